//! Minibatch contrastive training and frozen-encoder embedding extraction.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{trio_views, AugmentationPipeline, ViewPair};
use crate::container::{Container, Tensor};
use crate::encoder::{forward_trio, pooled_representation, AnyModel, Flow, MobiClrModel, ModelConfig, Precision};
use crate::error::{Error, Result};
use crate::ingest::NormalizedSeries;
use crate::objectives::{loss_and_grad, LossBreakdown, LossOptions, LossTerms, Temperatures};
use crate::nn::Scalar;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;

/// Whether augmented views are redrawn each epoch or drawn once and reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    #[default]
    Fresh,
    Cached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub pipeline: AugmentationPipeline,
    pub optimizer: OptimizerConfig,
    pub loss_terms: LossTerms,
    pub temperatures: Temperatures,
    pub symmetric_ntxent: bool,
    pub views: ViewMode,
    pub precision: Precision,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-4,
            epochs: 30,
            seed: 0,
            pipeline: AugmentationPipeline::default_pair(),
            optimizer: OptimizerConfig::default(),
            loss_terms: LossTerms::FULL,
            temperatures: Temperatures::default(),
            symmetric_ntxent: false,
            views: ViewMode::Fresh,
            precision: Precision::F32,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !self.loss_terms.any() {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        self.pipeline.validate()?;
        self.optimizer.validate()?;
        self.temperatures.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.model.validate()
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            temperatures: self.temperatures,
            terms: self.loss_terms,
            symmetric_ntxent: self.symmetric_ntxent,
        }
    }

    /// Seed for parameter initialisation, derived from the training seed.
    pub fn init_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &[rng::TAG_INIT])
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// Dataset row indices in the batch.
    pub regions: Vec<usize>,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Gradient L2 norms of the inbound, outbound and joint encoder+head.
    pub grad_norms: [f64; 3],
}

pub struct TrainState {
    pub model: AnyModel,
    pub optimizer: Optimizer,
    pub epochs_completed: usize,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn steps_completed(&self) -> usize {
        self.history.len()
    }

    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut sums = vec![(0.0, 0usize); self.epochs_completed];
        for r in &self.history {
            sums[r.epoch].0 += r.loss.total;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    /// Loss log as JSON lines, one record per step.
    pub fn write_loss_log<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.history {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io("<loss log>", e))?;
        }
        Ok(())
    }
}

/// Batches of one epoch: a seeded shuffle of `0..n`, chunked, with any
/// trailing batch smaller than two dropped.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::TAG_SHUFFLE, epoch as u64]));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn region_views(data: &NormalizedSeries, region: usize, pipeline: &AugmentationPipeline, seed: u64, epoch: usize) -> ViewPair {
    let mut r = rng::stream(seed, &[rng::TAG_VIEW, epoch as u64, region as u64]);
    trio_views(data.region(region), pipeline, &mut r)
}

pub fn train(data: &NormalizedSeries, config: &TrainConfig) -> Result<TrainState> {
    train_with(data, config, |_| {})
}

/// Trains from a fresh initialisation, calling `on_step` after each step.
pub fn train_with(data: &NormalizedSeries, config: &TrainConfig, on_step: impl FnMut(&StepRecord)) -> Result<TrainState> {
    config.validate()?;
    let model = AnyModel::init(config.model.clone(), config.init_seed(), config.precision)?;
    let optimizer = match &model {
        AnyModel::F32(m) => Optimizer::new(config.optimizer, config.learning_rate, m)?,
        AnyModel::F64(m) => Optimizer::new(config.optimizer, config.learning_rate, m)?,
    };
    let mut state = TrainState {
        model,
        optimizer,
        epochs_completed: 0,
        history: Vec::new(),
    };
    resume(&mut state, data, config, on_step)?;
    Ok(state)
}

/// Continues training `state` until `config.epochs` epochs are complete.
pub fn resume(state: &mut TrainState, data: &NormalizedSeries, config: &TrainConfig, on_step: impl FnMut(&StepRecord)) -> Result<()> {
    let n = data.num_regions();
    if n < 2 {
        return Err(Error::arg(format!("training needs at least 2 regions, got {n}")));
    }
    if n < config.batch_size {
        return Err(Error::arg(format!("{n} regions is fewer than batch_size {}", config.batch_size)));
    }
    if data.values.shape()[2] != 2 {
        return Err(Error::shape("2 channels", data.values.shape()[2]));
    }
    let TrainState { model, optimizer, epochs_completed, history } = state;
    let mut run = Run { data, config, optimizer, epochs_completed, history, on_step };
    match model {
        AnyModel::F32(m) => run.epochs(m),
        AnyModel::F64(m) => run.epochs(m),
    }
}

struct Run<'a, S> {
    data: &'a NormalizedSeries,
    config: &'a TrainConfig,
    optimizer: &'a mut Optimizer,
    epochs_completed: &'a mut usize,
    history: &'a mut Vec<StepRecord>,
    on_step: S,
}

impl<S: FnMut(&StepRecord)> Run<'_, S> {
    fn epochs<F: Scalar>(&mut self, model: &mut MobiClrModel<F>) -> Result<()> {
        let (data, config) = (self.data, self.config);
        let n = data.num_regions();
        let opts = config.loss_options();
        let needed = opts.terms.flows_needed();
        let cache: Option<Vec<ViewPair>> = (config.views == ViewMode::Cached)
            .then(|| (0..n).map(|r| region_views(data, r, &config.pipeline, config.seed, 0)).collect());

        while *self.epochs_completed < config.epochs {
            let epoch = *self.epochs_completed;
            let mut epoch_total = 0.0;
            let batches = epoch_batches(n, config.batch_size, config.seed, epoch);
            let num_batches = batches.len();
            for batch in batches {
                let views: Vec<ViewPair> = batch
                    .iter()
                    .map(|&r| match &cache {
                        Some(c) => c[r].clone(),
                        None => region_views(data, r, &config.pipeline, config.seed, epoch),
                    })
                    .collect();
                let fwd = forward_trio(&views, model, needed)?;
                let lg = loss_and_grad(&fwd.projections(), &opts)?;
                let step = self.history.len();
                if !lg.breakdown.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step, regions: batch });
                }
                let mut grads = model.zeros_like();
                fwd.backward(model, &lg.grads, &mut grads);
                drop(fwd);
                self.optimizer.step(model, &grads);
                if !model.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, step, regions: batch });
                }
                let record = StepRecord {
                    epoch,
                    step,
                    regions: batch,
                    loss: lg.breakdown,
                    grad_norms: Flow::ALL.map(|f| grads.flow_norm(f)),
                };
                epoch_total += record.loss.total;
                (self.on_step)(&record);
                self.history.push(record);
            }
            log::info!("epoch {} mean loss {:.6}", epoch + 1, epoch_total / num_batches.max(1) as f64);
            *self.epochs_completed += 1;
        }
        Ok(())
    }
}

/// Which frozen encoder(s) produce the evaluation embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    #[default]
    Joint,
    Inbound,
    Outbound,
    /// Mean of the pooled inbound and outbound representations.
    MeanFlows,
}

impl EmbeddingSource {
    /// The encoders that were trained under `terms`, as an embedding source.
    pub fn for_terms(terms: LossTerms) -> Self {
        match (terms.use_li, terms.use_lo, terms.use_la) {
            (_, _, true) => EmbeddingSource::Joint,
            (true, true, false) => EmbeddingSource::MeanFlows,
            (true, false, false) => EmbeddingSource::Inbound,
            _ => EmbeddingSource::Outbound,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionEmbeddings {
    /// `N x D`.
    pub matrix: Array2<f64>,
    pub region_ids: Vec<String>,
    /// Identifier of the model the embeddings came from.
    pub source: String,
}

/// Pooled joint-encoder embedding of every region, on unaugmented input.
pub fn embed_regions(data: &NormalizedSeries, model: &AnyModel) -> Result<RegionEmbeddings> {
    embed_regions_from(data, model, EmbeddingSource::Joint)
}

pub fn embed_regions_from(data: &NormalizedSeries, model: &AnyModel, source: EmbeddingSource) -> Result<RegionEmbeddings> {
    if data.values.shape()[2] != 2 {
        return Err(Error::shape("2 channels", data.values.shape()[2]));
    }
    let n = data.num_regions();
    let d = model.config().repr_dim;
    let mut matrix = Array2::<f64>::zeros((n, d));
    for r in 0..n {
        let x = data.region(r);
        let row: Array1<f64> = match source {
            EmbeddingSource::Joint => pooled_representation(model, Flow::Joint, x)?,
            EmbeddingSource::Inbound => pooled_representation(model, Flow::Inbound, x)?,
            EmbeddingSource::Outbound => pooled_representation(model, Flow::Outbound, x)?,
            EmbeddingSource::MeanFlows => {
                (pooled_representation(model, Flow::Inbound, x)? + pooled_representation(model, Flow::Outbound, x)?) * 0.5
            }
        };
        matrix.row_mut(r).assign(&row);
    }
    Ok(RegionEmbeddings {
        matrix,
        region_ids: data.region_ids.clone(),
        source: model.id(),
    })
}

impl RegionEmbeddings {
    pub fn num_regions(&self) -> usize {
        self.matrix.nrows()
    }

    /// Delimited export: `region_id,e0,...,e{D-1}`. Values use Rust's
    /// shortest round-trip formatting, so the file is exact.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["region_id".to_string()];
        header.extend((0..self.matrix.ncols()).map(|k| format!("e{k}")));
        out.write_record(&header)?;
        for (id, row) in self.region_ids.iter().zip(self.matrix.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| Error::io("<embeddings>", e))
    }

    /// Lines starting with `#` are ignored.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        let mut width = None;
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |message: String| Error::Schema { path: path.to_path_buf(), line: i + 2, message };
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>().map_err(|_| bad(format!("bad value `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            if *width.get_or_insert(vals.len()) != vals.len() {
                return Err(bad("ragged row".into()));
            }
            ids.push(rec.get(0).unwrap_or_default().to_string());
            values.extend(vals);
        }
        let d = width.unwrap_or(0);
        Ok(RegionEmbeddings {
            matrix: Array2::from_shape_vec((ids.len(), d), values).expect("rows checked"),
            region_ids: ids,
            source: String::new(),
        })
    }

    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let (n, d) = self.matrix.dim();
        let mut c = Container::new(
            "region_embeddings",
            json!({"region_ids": self.region_ids, "source": self.source, "extra": meta}),
        );
        c.push(Tensor::f64("embeddings", &[n, d], self.matrix.iter().copied().collect()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let region_ids: Vec<String> = serde_json::from_value(c.meta["region_ids"].clone())?;
        let source = c.meta["source"].as_str().unwrap_or_default().to_string();
        let t = c.require("embeddings")?;
        let data = t.as_f64().ok_or_else(|| Error::arg("`embeddings` must be f64"))?;
        match t.shape[..] {
            [n, d] if n == region_ids.len() => Ok(RegionEmbeddings {
                matrix: Array2::from_shape_vec((n, d), data.to_vec()).expect("shape checked"),
                region_ids,
                source,
            }),
            _ => Err(Error::shape(format!("({}, D)", region_ids.len()), format!("{:?}", t.shape))),
        }
    }

    /// Loads `.csv` exports or binary containers.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::read_csv(path)
        } else {
            Self::from_container(&Container::load_kind(path, "region_embeddings")?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::zscore_array;
    use ndarray::{s, Array3};

    fn toy_data(n: usize, t: usize, seed: u64) -> NormalizedSeries {
        use rand::Rng;
        let mut r = rng::stream(seed, &[]);
        let raw = Array3::from_shape_fn((n, t, 2), |(i, k, c)| {
            let phase = (i % 3) as f64 + c as f64;
            ((k as f64 / 4.0 + phase).sin() + 1.5) * (1.0 + i as f64 * 0.1) + r.random_range(0.0..0.3)
        });
        let (values, means, stds) = zscore_array(raw.view());
        NormalizedSeries {
            values,
            means,
            stds,
            region_ids: (0..n).map(|i| format!("r{i}")).collect(),
            time_origin: 0,
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            model: ModelConfig::tiny(8),
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn batches_drop_singletons() {
        let b = epoch_batches(9, 4, 1, 0);
        assert_eq!(b.len(), 2);
        let b = epoch_batches(10, 4, 1, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch_batches(10, 4, 1, 0), epoch_batches(10, 4, 1, 1));
    }

    #[test]
    fn rejects_too_few_regions() {
        let data = toy_data(1, 8, 0);
        assert!(matches!(train(&data, &small_config()), Err(Error::Argument(_))));
        let mut cfg = small_config();
        cfg.batch_size = 1;
        assert!(matches!(train(&toy_data(4, 8, 0), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn history_and_determinism() {
        let data = toy_data(9, 24, 1);
        let cfg = small_config();
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
        assert_eq!(a.steps_completed(), 4);
        assert_eq!(a.optimizer.steps_taken(), 4);
        let mut log = Vec::new();
        a.write_loss_log(&mut log).unwrap();
        assert_eq!(String::from_utf8(log).unwrap().lines().count(), 4);
    }

    #[test]
    fn inbound_only_leaves_other_flows_untouched() {
        let data = toy_data(8, 16, 2);
        let cfg = TrainConfig { loss_terms: LossTerms::INBOUND_ONLY, ..small_config() };
        let st = train(&data, &cfg).unwrap();
        let init = MobiClrModel::<f32>::init(cfg.model.clone(), cfg.init_seed()).unwrap();
        let AnyModel::F32(trained) = &st.model else { panic!("default precision is f32") };
        for r in &st.history {
            assert!(r.grad_norms[0] > 0.0);
            assert_eq!(r.grad_norms[1], 0.0);
            assert_eq!(r.grad_norms[2], 0.0);
        }
        assert_eq!(trained.encoders[1], init.encoders[1]);
        assert_eq!(trained.encoders[2], init.encoders[2]);
        assert_eq!(trained.heads[2], init.heads[2]);
        assert_ne!(trained.encoders[0], init.encoders[0]);
    }

    #[test]
    fn cached_views_repeat_across_epochs() {
        let data = toy_data(4, 16, 3);
        let cfg = TrainConfig { views: ViewMode::Cached, ..small_config() };
        let v0 = region_views(&data, 2, &cfg.pipeline, cfg.seed, 0);
        let v1 = region_views(&data, 2, &cfg.pipeline, cfg.seed, 1);
        assert_ne!(v0.view_a, v1.view_a);
        assert!(train(&data, &cfg).is_ok());
    }

    #[test]
    fn embeddings_shape_and_constant_input() {
        let model = AnyModel::init(ModelConfig::tiny(8), 4, Precision::F64).unwrap();
        let mut data = toy_data(5, 12, 4);
        let emb = embed_regions(&data, &model).unwrap();
        assert_eq!(emb.matrix.dim(), (5, 8));
        assert!(emb.matrix.iter().all(|v| v.is_finite()));
        assert_eq!(emb, embed_regions(&data, &model).unwrap());

        // Zero padding makes a constant series' representation vary near the
        // edges, so the pooled embedding equals the single-step value only
        // for T = 1. Away from the edges every step is identical.
        data.values.slice_mut(s![0, .., ..]).fill(0.7);
        let single = NormalizedSeries { values: data.values.slice(s![0..1, 0..1, ..]).to_owned(), ..data.select(&[0]) };
        let e1 = embed_regions(&single, &model).unwrap();
        let direct = model.encode(Flow::Joint, ndarray::arr2(&[[0.7, 0.7]]).view()).unwrap();
        assert!((&e1.matrix.row(0) - &direct.row(0)).iter().all(|d| d.abs() < 1e-12));

        let radius = model.config().receptive_radius();
        let long = Array3::from_elem((1, 2 * radius + 5, 2), 0.7);
        let h = model.encode(Flow::Joint, long.slice(s![0, .., ..])).unwrap();
        for step in radius..long.shape()[1] - radius {
            assert!((&h.row(step) - &h.row(radius)).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn embedding_export_roundtrip() {
        let model = AnyModel::init(ModelConfig::tiny(4), 4, Precision::F32).unwrap();
        let emb = embed_regions(&toy_data(3, 8, 5), &model).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        emb.write_csv(std::fs::File::create(&p).unwrap()).unwrap();
        let back = RegionEmbeddings::load(&p).unwrap();
        assert_eq!(back.matrix, emb.matrix);
        let q = dir.path().join("e.bin");
        emb.to_container(json!({})).save(&q).unwrap();
        assert_eq!(RegionEmbeddings::load(&q).unwrap(), emb);
    }

    #[test]
    fn source_for_terms() {
        assert_eq!(EmbeddingSource::for_terms(LossTerms::FULL), EmbeddingSource::Joint);
        assert_eq!(EmbeddingSource::for_terms(LossTerms::NO_AUX), EmbeddingSource::MeanFlows);
        assert_eq!(EmbeddingSource::for_terms(LossTerms::INBOUND_ONLY), EmbeddingSource::Inbound);
        assert_eq!(EmbeddingSource::for_terms(LossTerms::OUTBOUND_ONLY), EmbeddingSource::Outbound);
    }
}
