//! Scripted analyses: augmentation grid, loss ablation, batch/embedding
//! sensitivity and cross-city transfer.
//!
//! Every analysis is a grid of independent cells. A cell trains one model
//! per seed, extracts frozen embeddings and runs the probe protocol; cells
//! differ from the base configuration only in the swept fields and share all
//! seeds. Failed cells are kept in the matrix with their error message.

use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationKind, AugmentationPipeline};
use crate::config::config_hash;
use crate::encoder::AnyModel;
use crate::error::{Error, Result};
use crate::ingest::NormalizedSeries;
use crate::objectives::LossTerms;
use crate::probe::{probe_runs, probe_split, split_indices, ProbeConfig, ProbeRun, TargetTable};
use crate::trainer::{embed_regions_from, train, EmbeddingSource, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    AugGrid,
    Ablation,
    Sensitivity,
    Transfer,
}

/// Which regions the encoder is pretrained on in a single-city cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainScope {
    /// One model per probe split, trained on that split's training regions
    /// only. Costs `runs` trainings per seed.
    #[default]
    TrainSplit,
    /// One model per seed on every region (no labels are used), shared by
    /// all probe splits.
    AllRegions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    pub name: Option<String>,
    /// Training seeds; each cell averages over all of them.
    pub seeds: Vec<u64>,
    /// Axis of the augmentation grid.
    pub augmentations: Vec<AugmentationKind>,
    pub batch_sizes: Vec<usize>,
    /// Embedding sizes; the projection size follows.
    pub embedding_dims: Vec<usize>,
    pub pretrain: PretrainScope,
    /// Target column to probe; the first one when unset.
    pub target: Option<String>,
    /// Output stem, relative to the run's output directory.
    pub output: Option<PathBuf>,
    pub heatmap: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            kind: ExperimentKind::AugGrid,
            name: None,
            seeds: vec![0],
            augmentations: AugmentationKind::ALL.to_vec(),
            batch_sizes: vec![4, 8, 12],
            embedding_dims: vec![64, 128, 256],
            pretrain: PretrainScope::default(),
            target: None,
            output: None,
            heatmap: true,
        }
    }
}

impl ExperimentPlan {
    pub fn new(kind: ExperimentKind) -> Self {
        let seeds = if kind == ExperimentKind::Ablation { vec![0, 1, 2] } else { vec![0] };
        ExperimentPlan { kind, seeds, ..Default::default() }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            match self.kind {
                ExperimentKind::AugGrid => "aug_grid",
                ExperimentKind::Ablation => "ablation",
                ExperimentKind::Sensitivity => "sensitivity",
                ExperimentKind::Transfer => "transfer",
            }
            .to_string()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("experiment `{}`: {m}", self.label())));
        if self.seeds.is_empty() {
            return bad("needs at least one seed");
        }
        match self.kind {
            ExperimentKind::AugGrid => {
                let mut sorted = self.augmentations.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.is_empty() || sorted.len() != self.augmentations.len() {
                    return bad("augmentations must be a non-empty list without repeats");
                }
            }
            ExperimentKind::Sensitivity => {
                if self.batch_sizes.is_empty() || self.embedding_dims.is_empty() {
                    return bad("batch_sizes and embedding_dims must be non-empty");
                }
                if self.batch_sizes.iter().any(|&b| b < 2) || self.embedding_dims.contains(&0) {
                    return bad("batch sizes must be at least 2 and embedding sizes positive");
                }
            }
            ExperimentKind::Ablation | ExperimentKind::Transfer => {}
        }
        Ok(())
    }
}

/// A city's series with the indicator to probe, restricted to the regions
/// that have a target value so row `i` of both refers to the same region.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub series: NormalizedSeries,
    pub target: TargetTable,
}

impl Dataset {
    pub fn new(name: impl Into<String>, series: NormalizedSeries, target: &TargetTable) -> Result<Self> {
        let mut rows = Vec::new();
        let mut values = Vec::new();
        for (i, id) in series.region_ids.iter().enumerate() {
            if let Some(p) = target.region_ids.iter().position(|t| t == id) {
                rows.push(i);
                values.push(target.values[p]);
            }
        }
        if rows.len() < 8 {
            return Err(Error::arg(format!(
                "only {} regions have a `{}` value; the probe needs at least 8",
                rows.len(),
                target.name
            )));
        }
        let series = series.select(&rows);
        let target = TargetTable::new(target.name.clone(), series.region_ids.clone(), values)?;
        Ok(Dataset { name: name.into(), series, target })
    }

    fn y(&self) -> ndarray::ArrayView1<'_, f64> {
        ndarray::ArrayView1::from(&self.target.values[..])
    }
}

/// One grid cell. `r2_mean` is `None` when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub r2_mean: Option<f64>,
    /// Population standard deviation over all probe runs of all seeds.
    pub r2_std: Option<f64>,
    /// Mean R² per training seed.
    pub seed_means: Vec<f64>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub error: Option<String>,
}

impl Cell {
    fn from_result(result: Result<Vec<Vec<ProbeRun>>>, seeds: &[u64], hash: String) -> Cell {
        match result {
            Ok(per_seed) => {
                let all: Vec<f64> = per_seed.iter().flatten().map(|r| r.r2).collect();
                let mean = all.iter().sum::<f64>() / all.len() as f64;
                let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
                let non_finite = !mean.is_finite();
                Cell {
                    r2_mean: Some(mean),
                    r2_std: Some(var.sqrt()),
                    seed_means: per_seed
                        .iter()
                        .map(|runs| runs.iter().map(|r| r.r2).sum::<f64>() / runs.len() as f64)
                        .collect(),
                    alphas: per_seed.iter().flatten().map(|r| r.alpha).collect(),
                    seeds: seeds.to_vec(),
                    config_hash: hash,
                    error: non_finite.then(|| "non-finite R²".to_string()),
                }
            }
            Err(e) => Cell {
                r2_mean: None,
                r2_std: None,
                seed_means: Vec::new(),
                alphas: Vec::new(),
                seeds: seeds.to_vec(),
                config_hash: hash,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.r2_mean.is_some_and(f64::is_finite)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub title: String,
    /// Header of the row-label column, e.g. `first\second`.
    pub corner: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    /// Row-major.
    pub cells: Vec<Vec<Cell>>,
}

impl ResultMatrix {
    pub fn get(&self, row: &str, col: &str) -> Option<&Cell> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.cols.iter().position(|x| x == col)?;
        Some(&self.cells[r][c])
    }

    pub fn all_ok(&self) -> bool {
        self.cells.iter().flatten().all(Cell::is_ok)
    }

    /// Comma-separated matrix of mean R²; failed cells read `FAILED`.
    pub fn write_delimited<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![self.corner.clone()];
        header.extend(self.cols.iter().cloned());
        out.write_record(&header)?;
        for (label, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| match c.r2_mean {
                Some(v) if c.is_ok() => format!("{v:.4}"),
                _ => "FAILED".to_string(),
            }));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<matrix>", e))
    }

    pub fn to_delimited(&self) -> String {
        let mut buf = Vec::new();
        self.write_delimited(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    /// Static SVG heatmap of the delimited values.
    pub fn to_svg(&self) -> String {
        let (cw, ch, left, top) = (90.0, 36.0, 110.0, 60.0);
        let width = left + cw * self.cols.len() as f64 + 20.0;
        let height = top + ch * self.rows.len() as f64 + 20.0;
        let ok: Vec<f64> = self.cells.iter().flatten().filter(|c| c.is_ok()).filter_map(|c| c.r2_mean).collect();
        let lo = ok.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ok.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<text x="{}" y="20" font-size="14">{}</text>"#, left, escape(&self.title));
        for (j, c) in self.cols.iter().enumerate() {
            let x = left + cw * (j as f64 + 0.5);
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8.0, escape(c));
        }
        for (i, (label, row)) in self.rows.iter().zip(&self.cells).enumerate() {
            let y = top + ch * i as f64;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 8.0, y + ch / 2.0 + 4.0, escape(label));
            for (j, cell) in row.iter().enumerate() {
                let x = left + cw * j as f64;
                let (fill, text) = match cell.r2_mean {
                    Some(v) if cell.is_ok() => {
                        let t = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
                        // White to dark blue.
                        let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
                        (format!("rgb({},{},{})", c(247.0, 8.0), c(251.0, 48.0), c(255.0, 107.0)), format!("{v:.3}"))
                    }
                    _ => ("rgb(200,200,200)".to_string(), "failed".to_string()),
                };
                let ink = if fill.starts_with("rgb(2") { "black" } else { "white" };
                let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" stroke="white"/>"#);
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{text}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Shared inputs of every cell.
#[derive(Debug, Clone)]
pub struct Runner {
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub workers: usize,
}

impl Runner {
    pub fn new(train: TrainConfig, probe: ProbeConfig) -> Self {
        Runner { train, probe, workers: 1 }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Runs `jobs` on the worker pool; results come back in job order.
    fn pool<J: Sync, T: Send>(&self, jobs: &[J], run: impl Fn(&J) -> T + Sync) -> Vec<T> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..self.workers.min(jobs.len()).max(1) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(i) else { break };
                    let out = run(job);
                    slots.lock().expect("no worker panicked holding the lock")[i] = Some(out);
                });
            }
        });
        slots
            .into_inner()
            .expect("workers finished")
            .into_iter()
            .map(|s| s.expect("every job ran"))
            .collect()
    }

    /// Probe runs of one training configuration, one list per seed.
    pub fn evaluate_config(
        &self,
        data: &Dataset,
        train: &TrainConfig,
        source: EmbeddingSource,
        scope: PretrainScope,
        seeds: &[u64],
    ) -> Result<Vec<Vec<ProbeRun>>> {
        let y = data.y();
        seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { seed, ..train.clone() };
                match scope {
                    PretrainScope::AllRegions => {
                        let state = train_logged(&data.series, &cfg)?;
                        let emb = embed_regions_from(&data.series, &state, source)?;
                        probe_runs(emb.matrix.view(), y, &self.probe)
                    }
                    PretrainScope::TrainSplit => (0..self.probe.runs)
                        .map(|run| {
                            let split_seed = self.probe.seed_for_run(run);
                            let n = data.series.num_regions();
                            let (tr, te) = split_indices(n, self.probe.train_fraction, split_seed)?;
                            let state = train_logged(&data.series.select(&tr), &cfg)?;
                            let emb = embed_regions_from(&data.series, &state, source)?;
                            probe_split(emb.matrix.view(), y, tr, te, split_seed, &self.probe)
                        })
                        .collect(),
                }
            })
            .collect()
    }

    fn cell(&self, data: &Dataset, train: &TrainConfig, source: EmbeddingSource, plan: &ExperimentPlan) -> Cell {
        let hash = config_hash(train);
        let result = self.evaluate_config(data, train, source, plan.pretrain, &plan.seeds);
        let cell = Cell::from_result(result, &plan.seeds, hash);
        if let Some(e) = &cell.error {
            log::warn!("cell failed: {e}");
        }
        cell
    }

    /// Training configuration of augmentation cell `(first, second)`.
    pub fn aug_cell_config(&self, first: AugmentationKind, second: AugmentationKind) -> TrainConfig {
        let kinds = if first == second { vec![first] } else { vec![first, second] };
        TrainConfig { pipeline: AugmentationPipeline::from_kinds(&kinds), ..self.train.clone() }
    }

    /// Rows are the first transform, columns the second; the diagonal holds
    /// single transforms.
    pub fn aug_grid(&self, data: &Dataset, plan: &ExperimentPlan) -> Result<ResultMatrix> {
        plan.validate()?;
        let axis = &plan.augmentations;
        let jobs: Vec<(usize, usize)> = (0..axis.len()).flat_map(|i| (0..axis.len()).map(move |j| (i, j))).collect();
        let cells = self.pool(&jobs, |&(i, j)| {
            log::info!("aug_grid cell ({}, {})", axis[i], axis[j]);
            self.cell(data, &self.aug_cell_config(axis[i], axis[j]), EmbeddingSource::Joint, plan)
        });
        let labels: Vec<String> = axis.iter().map(ToString::to_string).collect();
        Ok(ResultMatrix {
            title: format!("{} — {}", plan.label(), data.target.name),
            corner: "first\\second".into(),
            rows: labels.clone(),
            cols: labels,
            cells: cells.chunks(axis.len()).map(<[Cell]>::to_vec).collect(),
        })
    }

    /// The four loss configurations with the embedding each one trains.
    pub fn ablation_rows() -> [(&'static str, LossTerms); 4] {
        [
            ("L^o only", LossTerms::OUTBOUND_ONLY),
            ("L^i only", LossTerms::INBOUND_ONLY),
            ("w/o L^a", LossTerms::NO_AUX),
            ("full", LossTerms::FULL),
        ]
    }

    pub fn ablation(&self, data: &Dataset, plan: &ExperimentPlan) -> Result<ResultMatrix> {
        plan.validate()?;
        let rows = Self::ablation_rows();
        let cells = self.pool(&rows, |(label, terms)| {
            log::info!("ablation row {label}");
            let cfg = TrainConfig { loss_terms: *terms, ..self.train.clone() };
            self.cell(data, &cfg, EmbeddingSource::for_terms(*terms), plan)
        });
        Ok(ResultMatrix {
            title: format!("{} — {}", plan.label(), data.target.name),
            corner: "loss".into(),
            rows: rows.iter().map(|(l, _)| l.to_string()).collect(),
            cols: vec![data.target.name.clone()],
            cells: cells.into_iter().map(|c| vec![c]).collect(),
        })
    }

    pub fn sensitivity_cell_config(&self, batch: usize, dim: usize) -> TrainConfig {
        let mut cfg = TrainConfig { batch_size: batch, ..self.train.clone() };
        cfg.model.repr_dim = dim;
        cfg.model.proj_dim = dim;
        cfg
    }

    /// Rows are batch sizes, columns embedding sizes.
    pub fn sensitivity(&self, data: &Dataset, plan: &ExperimentPlan) -> Result<ResultMatrix> {
        plan.validate()?;
        let (bs, ds) = (&plan.batch_sizes, &plan.embedding_dims);
        let jobs: Vec<(usize, usize)> = bs.iter().flat_map(|&b| ds.iter().map(move |&d| (b, d))).collect();
        let cells = self.pool(&jobs, |&(b, d)| {
            log::info!("sensitivity cell batch={b} dim={d}");
            self.cell(data, &self.sensitivity_cell_config(b, d), EmbeddingSource::Joint, plan)
        });
        Ok(ResultMatrix {
            title: format!("{} — {}", plan.label(), data.target.name),
            corner: "batch\\dim".into(),
            rows: bs.iter().map(ToString::to_string).collect(),
            cols: ds.iter().map(ToString::to_string).collect(),
            cells: cells.chunks(ds.len()).map(<[Cell]>::to_vec).collect(),
        })
    }

    /// Probe runs on `target` with encoders pretrained on all of `source`,
    /// one list per seed.
    pub fn transfer_runs(&self, source: &Dataset, target: &Dataset, seeds: &[u64]) -> Result<Vec<Vec<ProbeRun>>> {
        check_compatible(source, target)?;
        seeds
            .iter()
            .map(|&seed| {
                let state = train_logged(&source.series, &TrainConfig { seed, ..self.train.clone() })?;
                let emb = embed_regions_from(&target.series, &state, EmbeddingSource::Joint)?;
                probe_runs(emb.matrix.view(), target.y(), &self.probe)
            })
            .collect()
    }

    pub fn transfer(&self, source: &Dataset, target: &Dataset, seeds: &[u64]) -> Result<Cell> {
        check_compatible(source, target)?;
        Ok(Cell::from_result(self.transfer_runs(source, target, seeds), seeds, config_hash(&self.train)))
    }

    /// Source x target matrix; each source model is trained once per seed
    /// and reused for every target.
    pub fn transfer_matrix(&self, cities: &[Dataset], plan: &ExperimentPlan) -> Result<ResultMatrix> {
        plan.validate()?;
        if cities.is_empty() {
            return Err(Error::arg("transfer needs at least one dataset"));
        }
        for s in cities {
            for t in cities {
                check_compatible(s, t)?;
            }
        }
        let hash = config_hash(&self.train);
        let rows = self.pool(cities, |source| {
            log::info!("transfer source {}", source.name);
            let models: Result<Vec<AnyModel>> = plan
                .seeds
                .iter()
                .map(|&seed| train_logged(&source.series, &TrainConfig { seed, ..self.train.clone() }))
                .collect();
            cities
                .iter()
                .map(|target| {
                    let result = models.as_ref().map_err(clone_err).and_then(|ms| {
                        ms.iter()
                            .map(|m| {
                                let emb = embed_regions_from(&target.series, m, EmbeddingSource::Joint)?;
                                probe_runs(emb.matrix.view(), target.y(), &self.probe)
                            })
                            .collect()
                    });
                    Cell::from_result(result, &plan.seeds, hash.clone())
                })
                .collect::<Vec<_>>()
        });
        let names: Vec<String> = cities.iter().map(|c| c.name.clone()).collect();
        Ok(ResultMatrix {
            title: format!("{} — {}", plan.label(), cities[0].target.name),
            corner: "source\\target".into(),
            rows: names.clone(),
            cols: names,
            cells: rows,
        })
    }

    /// Dispatches on the plan kind. Single-city analyses use the first
    /// dataset.
    pub fn run(&self, plan: &ExperimentPlan, datasets: &[Dataset]) -> Result<ResultMatrix> {
        let first = datasets.first().ok_or_else(|| Error::arg("experiment needs a dataset"))?;
        match plan.kind {
            ExperimentKind::AugGrid => self.aug_grid(first, plan),
            ExperimentKind::Ablation => self.ablation(first, plan),
            ExperimentKind::Sensitivity => self.sensitivity(first, plan),
            ExperimentKind::Transfer => self.transfer_matrix(datasets, plan),
        }
    }
}

fn clone_err(e: &Error) -> Error {
    Error::arg(e.to_string())
}

fn check_compatible(source: &Dataset, target: &Dataset) -> Result<()> {
    let (s, t) = (&source.series.values, &target.series.values);
    if s.len_of(Axis(1)) != t.len_of(Axis(1)) || s.len_of(Axis(2)) != t.len_of(Axis(2)) {
        return Err(Error::arg(format!(
            "transfer needs matching series shapes: {} has T={} C={}, {} has T={} C={}",
            source.name,
            s.len_of(Axis(1)),
            s.len_of(Axis(2)),
            target.name,
            t.len_of(Axis(1)),
            t.len_of(Axis(2)),
        )));
    }
    Ok(())
}

fn train_logged(data: &NormalizedSeries, cfg: &TrainConfig) -> Result<AnyModel> {
    let state = train(data, cfg)?;
    log::debug!("trained {} steps, seed {}", state.steps_completed(), cfg.seed);
    Ok(state.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::ingest::zscore;
    use crate::testkit::{gen_city, CitySpec};

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            model: ModelConfig { num_blocks: 1, dilations: vec![1], ..ModelConfig::tiny(4) },
            ..Default::default()
        }
    }

    fn dataset(seed: u64, steps: usize) -> Dataset {
        let city = gen_city(&CitySpec { n_regions: 16, steps, seed, ..Default::default() }).unwrap();
        Dataset::new(format!("city{seed}"), zscore(&city.series), &city.targets()).unwrap()
    }

    fn quick_probe() -> ProbeConfig {
        ProbeConfig { runs: 2, ..Default::default() }
    }

    fn plan(kind: ExperimentKind) -> ExperimentPlan {
        ExperimentPlan { pretrain: PretrainScope::AllRegions, ..ExperimentPlan::new(kind) }
    }

    #[test]
    fn aug_grid_layout_and_hashes() {
        let runner = Runner::new(TrainConfig::default(), quick_probe());
        let default_hash = config_hash(&TrainConfig::default());
        let (j, s) = (AugmentationKind::Jitter, AugmentationKind::Shift);
        assert_eq!(config_hash(&runner.aug_cell_config(j, s)), default_hash);
        assert_eq!(runner.aug_cell_config(j, j).pipeline, AugmentationPipeline::from_kinds(&[j]));
        assert_eq!(runner.aug_cell_config(s, j).pipeline, AugmentationPipeline::from_kinds(&[s, j]));
    }

    #[test]
    fn aug_grid_fills_sixteen_cells() {
        let runner = Runner::new(tiny_train(), quick_probe()).with_workers(3);
        let m = runner.aug_grid(&dataset(0, 24), &plan(ExperimentKind::AugGrid)).unwrap();
        assert_eq!(m.rows, ["scale", "jitter", "shift", "dropout"]);
        assert_eq!(m.cells.iter().flatten().count(), 16);
        assert!(m.all_ok(), "{m:?}");
        let text = m.to_delimited();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("first\\second,scale,jitter,shift,dropout"));
        assert!(m.to_svg().contains("<rect"));
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let data = dataset(1, 24);
        let p = ExperimentPlan { augmentations: vec![AugmentationKind::Jitter, AugmentationKind::Shift], ..plan(ExperimentKind::AugGrid) };
        let one = Runner::new(tiny_train(), quick_probe()).aug_grid(&data, &p).unwrap();
        let many = Runner::new(tiny_train(), quick_probe()).with_workers(4).aug_grid(&data, &p).unwrap();
        assert_eq!(one, many);
    }

    #[test]
    fn ablation_has_four_rows() {
        let p = ExperimentPlan { seeds: vec![0, 1], ..plan(ExperimentKind::Ablation) };
        let m = Runner::new(tiny_train(), quick_probe()).ablation(&dataset(2, 24), &p).unwrap();
        assert_eq!(m.rows, ["L^o only", "L^i only", "w/o L^a", "full"]);
        assert!(m.all_ok());
        assert_eq!(m.cells[0][0].seed_means.len(), 2);
    }

    #[test]
    fn sensitivity_cells_differ_only_in_swept_fields() {
        let runner = Runner::new(TrainConfig::default(), quick_probe());
        let base = serde_json::to_value(&runner.train).unwrap();
        let cell = serde_json::to_value(runner.sensitivity_cell_config(8, 64)).unwrap();
        let mut changed = Vec::new();
        for (k, v) in base.as_object().unwrap() {
            if cell[k] != *v {
                changed.push(k.clone());
            }
        }
        assert_eq!(changed, ["batch_size", "model"]);
        let model_changed: Vec<_> = base["model"]
            .as_object()
            .unwrap()
            .iter()
            .filter(|(k, v)| cell["model"][k.as_str()] != **v)
            .map(|(k, _)| k.clone())
            .collect();
        assert_eq!(model_changed, ["proj_dim", "repr_dim"]);
    }

    #[test]
    fn sensitivity_grid_labels() {
        let p = ExperimentPlan { batch_sizes: vec![4, 8], embedding_dims: vec![4, 8], ..plan(ExperimentKind::Sensitivity) };
        let m = Runner::new(tiny_train(), quick_probe()).sensitivity(&dataset(3, 24), &p).unwrap();
        assert_eq!((m.rows.clone(), m.cols.clone()), (vec!["4".to_string(), "8".into()], vec!["4".to_string(), "8".into()]));
        assert!(m.all_ok());
    }

    #[test]
    fn transfer_rejects_mismatched_lengths() {
        let runner = Runner::new(tiny_train(), quick_probe());
        let err = runner.transfer(&dataset(0, 24), &dataset(1, 48), &[0]).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn self_transfer_equals_plain_evaluation() {
        let runner = Runner::new(tiny_train(), quick_probe());
        let data = dataset(4, 24);
        let t = runner.transfer_runs(&data, &data, &[5]).unwrap();
        let e = runner.evaluate_config(&data, &runner.train, EmbeddingSource::Joint, PretrainScope::AllRegions, &[5]).unwrap();
        assert_eq!(t, e);
    }

    #[test]
    fn train_split_scope_trains_per_split() {
        let runner = Runner::new(tiny_train(), quick_probe());
        let data = dataset(5, 24);
        let runs = runner.evaluate_config(&data, &runner.train, EmbeddingSource::Joint, PretrainScope::TrainSplit, &[0]).unwrap();
        assert_eq!(runs[0].len(), 2);
        assert!(runs[0].iter().all(|r| r.r2.is_finite()));
    }

    #[test]
    fn failed_cells_are_marked() {
        let mut train = tiny_train();
        train.learning_rate = -1.0;
        let runner = Runner::new(train, quick_probe());
        let m = runner.ablation(&dataset(0, 24), &plan(ExperimentKind::Ablation)).unwrap();
        assert!(!m.all_ok());
        assert!(m.to_delimited().contains("FAILED"));
        assert!(m.to_svg().contains("failed"));
    }

    #[test]
    fn plan_validation() {
        let p = ExperimentPlan { augmentations: vec![AugmentationKind::Jitter, AugmentationKind::Jitter], ..Default::default() };
        assert!(p.validate().is_err());
        let p = ExperimentPlan { kind: ExperimentKind::Sensitivity, batch_sizes: vec![1], ..Default::default() };
        assert!(p.validate().is_err());
        assert!(ExperimentPlan { seeds: vec![], ..Default::default() }.validate().is_err());
        let parsed: ExperimentPlan = toml::from_str("kind = \"ablation\"\nseeds = [0, 1, 2]").unwrap();
        assert_eq!(parsed.kind, ExperimentKind::Ablation);
    }
}
