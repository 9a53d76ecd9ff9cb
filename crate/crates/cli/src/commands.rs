use std::path::{Path, PathBuf};

use mobiclr::encoder::AnyModel;
use mobiclr::experiments::{Dataset, ExperimentKind, ExperimentPlan, Runner};
use mobiclr::ingest::{bin_trips, read_trips, NormalizedSeries, RegionSet, INBOUND, OUTBOUND};
use mobiclr::probe::{self, EvalReport, TargetTable};
use mobiclr::testkit::gen_city;
use mobiclr::trainer::{self, embed_regions, RegionEmbeddings};
use serde_json::{json, Value};

use crate::artifacts::{required, Run};
use crate::{CliError, CliResult, Global, KindArg, RawFeatures};

fn to_value<T: serde::Serialize>(v: &T) -> CliResult<Value> {
    Ok(serde_json::to_value(v).map_err(mobiclr::Error::from)?)
}

pub struct IngestArgs {
    pub trips: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub window_start: Option<String>,
    pub hours: Option<usize>,
}

pub fn ingest(g: &Global, a: IngestArgs) -> CliResult<()> {
    let mut run = Run::setup(g, "ingest", |c| {
        if a.trips.is_some() {
            c.data.trips = a.trips;
        }
        if a.regions.is_some() {
            c.data.regions = a.regions;
        }
        if a.window_start.is_some() {
            c.data.window_start = a.window_start;
        }
        if let Some(h) = a.hours {
            c.data.window_hours = h;
        }
    })?;
    let d = run.config.data.clone();
    let trips_path = required(d.trips.clone(), "--trips", "data.trips")?;
    let regions_path = required(d.regions.clone(), "--regions", "data.regions")?;
    run.input(&trips_path);
    run.input(&regions_path);
    let (start, end) = d.window()?;

    let regions = RegionSet::load(&regions_path, &d.region_id_property)?;
    let trips = read_trips(&trips_path, &d.trip_csv)?;
    if trips.is_empty() {
        log::warn!("{} contains no trips; the series is all zeros", trips_path.display());
    }
    let (series, diag) = bin_trips(&trips, &regions, start, end)?;

    let per_region: Vec<Value> = series
        .region_ids
        .iter()
        .zip(series.counts.outer_iter())
        .map(|(id, x)| {
            let col = |c: usize| x.column(c).iter().map(|&v| u64::from(v)).sum::<u64>();
            json!({"region_id": id, "inbound": col(INBOUND), "outbound": col(OUTBOUND)})
        })
        .collect();
    log::info!(
        "{} trips read, {} regions x {} hours; unresolved origin/destination {}/{}, outside window {}/{}, invalid {}",
        diag.trips_read,
        series.num_regions(),
        series.num_steps(),
        diag.unresolved_origin,
        diag.unresolved_destination,
        diag.start_outside_window,
        diag.end_outside_window,
        diag.invalid_times,
    );
    run.write_container("series.bin", series.to_container())?;
    run.write_json(
        "ingest_diagnostics.json",
        json!({
            "trips_path": trips_path,
            "regions_path": regions_path,
            "window": {"start": start, "end": end, "hours": series.num_steps()},
            "counts": diag,
            "per_region": per_region,
        }),
    )?;
    Ok(())
}

pub fn synth(g: &Global, regions: Option<usize>, steps: Option<usize>) -> CliResult<()> {
    let run = Run::setup(g, "synth", |c| {
        if let Some(n) = regions {
            c.synth.n_regions = n;
        }
        if let Some(t) = steps {
            c.synth.steps = t;
        }
    })?;
    let city = gen_city(&run.config.synth)?;
    log::info!(
        "synthetic city: {} regions x {} hours, profiles {:?}",
        city.series.num_regions(),
        city.series.num_steps(),
        city.profile_names
    );
    run.write_container("series.bin", city.series.to_container())?;
    run.write_delimited("series.csv", |b| city.series.write_csv(b))?;
    run.write_delimited("targets.csv", |b| city.targets().write_csv(b))?;
    run.write_container("truth.bin", city.truth_container())?;
    Ok(())
}

fn load_series(run: &mut Run) -> CliResult<(PathBuf, NormalizedSeries)> {
    let path = required(run.config.data.series.clone(), "--series", "data.series")?;
    run.input(&path);
    let data = NormalizedSeries::load_any(&path)?;
    Ok((path, data))
}

pub fn train(g: &Global, series: Option<PathBuf>) -> CliResult<()> {
    let mut run = Run::setup(g, "train", |c| {
        if series.is_some() {
            c.data.series = series;
        }
    })?;
    let (_, data) = load_series(&mut run)?;
    let cfg = run.config.train.clone();
    log::info!(
        "training on {} regions x {} hours: {} epochs, batch {}, lr {}",
        data.num_regions(),
        data.num_steps(),
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate
    );
    let state = trainer::train_with(&data, &cfg, |r| {
        log::trace!("epoch {} step {} loss {:.5}", r.epoch, r.step, r.loss.total);
    })?;

    let meta = json!({"epochs": state.epochs_completed, "steps": state.steps_completed()});
    run.write_container("checkpoint.bin", state.model.to_container(meta))?;
    let mut log_text = String::new();
    for r in &state.history {
        let mut v = to_value(r)?;
        v["config_hash"] = Value::String(run.hash.clone());
        log_text.push_str(&v.to_string());
        log_text.push('\n');
    }
    run.write_bytes("loss_log.jsonl", log_text.as_bytes())?;
    run.write_json(
        "train_summary.json",
        json!({
            "checkpoint_id": state.model.id(),
            "regions": data.num_regions(),
            "epochs": state.epochs_completed,
            "steps": state.steps_completed(),
            "epoch_mean_loss": state.epoch_means(),
        }),
    )?;
    Ok(())
}

pub fn embed(g: &Global, series: Option<PathBuf>, checkpoint: Option<PathBuf>) -> CliResult<()> {
    let mut run = Run::setup(g, "embed", |c| {
        if series.is_some() {
            c.data.series = series;
        }
        if checkpoint.is_some() {
            c.data.checkpoint = checkpoint;
        }
    })?;
    let (_, data) = load_series(&mut run)?;
    let ckpt = required(run.config.data.checkpoint.clone(), "--checkpoint", "data.checkpoint")?;
    run.input(&ckpt);
    let model = AnyModel::load(&ckpt)?;
    let emb = embed_regions(&data, &model)?;
    log::info!("{} regions embedded in {} dimensions", emb.num_regions(), emb.matrix.ncols());
    run.write_delimited("embeddings.csv", |b| emb.write_csv(b))?;
    run.write_container("embeddings.bin", emb.to_container(json!({"checkpoint": ckpt})))?;
    Ok(())
}

pub struct EvaluateArgs {
    pub embeddings: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub columns: Vec<String>,
    pub raw: Option<RawFeatures>,
    pub series: Option<PathBuf>,
}

pub fn evaluate(g: &Global, a: EvaluateArgs) -> CliResult<()> {
    let mut run = Run::setup(g, "evaluate", |c| {
        if a.embeddings.is_some() {
            c.data.embeddings = a.embeddings;
        }
        if a.targets.is_some() {
            c.data.targets = a.targets;
        }
        if !a.columns.is_empty() {
            c.data.target_columns = a.columns;
        }
        if a.series.is_some() {
            c.data.series = a.series;
        }
    })?;
    let targets_path = required(run.config.data.targets.clone(), "--targets", "data.targets")?;
    run.input(&targets_path);
    let tables = TargetTable::read_columns(&targets_path, &run.config.data.target_columns)?;

    let (method, ids, x, source) = match a.raw {
        Some(kind) => {
            let (path, data) = load_series(&mut run)?;
            let (name, channels): (&str, &[usize]) = match kind {
                RawFeatures::Inbound => ("raw_inbound", &[INBOUND]),
                RawFeatures::Outbound => ("raw_outbound", &[OUTBOUND]),
                RawFeatures::Both => ("raw_both", &[INBOUND, OUTBOUND]),
            };
            (name.to_string(), data.region_ids.clone(), data.flattened(channels)?, json!({"series": path}))
        }
        None => {
            let path = required(run.config.data.embeddings.clone(), "--embeddings", "data.embeddings")?;
            run.input(&path);
            let emb = RegionEmbeddings::load(&path)?;
            let checkpoint = (!emb.source.is_empty()).then_some(emb.source);
            ("mobiclr".to_string(), emb.region_ids, emb.matrix, json!({"embeddings": path, "checkpoint_id": checkpoint}))
        }
    };
    let report = probe::evaluate(&method, &ids, x.view(), &tables, &run.config.probe, source)?;
    for t in &report.targets {
        log::info!(
            "{}: R² {:.4} ± {:.4} over {} regions (alphas {:?})",
            t.target,
            t.summary.r2_mean,
            t.summary.r2_std,
            t.n_regions,
            t.summary.alphas
        );
    }
    run.write_json("eval_report.json", to_value(&report)?)?;
    run.write_delimited("eval_table.csv", |b| EvalReport::write_table(std::slice::from_ref(&report), b))?;
    Ok(())
}

impl From<KindArg> for ExperimentKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::AugGrid => ExperimentKind::AugGrid,
            KindArg::Ablation => ExperimentKind::Ablation,
            KindArg::Sensitivity => ExperimentKind::Sensitivity,
            KindArg::Transfer => ExperimentKind::Transfer,
        }
    }
}

fn dataset(run: &mut Run, series: &Path, targets: &Path, column: Option<&str>) -> CliResult<Dataset> {
    run.input(series);
    run.input(targets);
    let name = series.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let data = NormalizedSeries::load_any(series)?;
    let target = TargetTable::read_csv(targets, column)?;
    Ok(Dataset::new(name, data, &target)?)
}

pub fn experiment(g: &Global, kind: Option<KindArg>, series: Option<PathBuf>, targets: Option<PathBuf>) -> CliResult<()> {
    let mut run = Run::setup(g, "experiment", |c| {
        if let Some(k) = kind {
            c.experiments = vec![ExperimentPlan::new(k.into())];
        }
        if series.is_some() {
            c.data.series = series;
        }
        if targets.is_some() {
            c.data.targets = targets;
        }
    })?;
    if run.config.experiments.is_empty() {
        return Err(CliError::usage("nothing to run: pass --kind or add an [[experiment]] table to the config"));
    }
    let d = run.config.data.clone();
    let series_path = required(d.series.clone(), "--series", "data.series")?;
    let targets_path = required(d.targets.clone(), "--targets", "data.targets")?;
    let runner = Runner::new(run.config.train.clone(), run.config.probe.clone()).with_workers(run.config.workers);

    for plan in run.config.experiments.clone() {
        let column = plan.target.as_deref();
        let mut datasets = vec![dataset(&mut run, &series_path, &targets_path, column)?];
        if plan.kind == ExperimentKind::Transfer {
            for (i, extra) in d.extra_series.iter().enumerate() {
                let t = d.extra_targets.get(i).unwrap_or(&targets_path);
                datasets.push(dataset(&mut run, extra, t, column)?);
            }
        }
        log::info!("experiment {} on {} dataset(s)", plan.label(), datasets.len());
        let matrix = runner.run(&plan, &datasets)?;
        let failed = matrix.cells.iter().flatten().filter(|c| !c.is_ok()).count();
        if failed > 0 {
            log::warn!("{}: {failed} cell(s) failed; see the json output for errors", plan.label());
        }
        let stem = plan.output.clone().unwrap_or_else(|| PathBuf::from(plan.label()));
        let stem = stem.to_string_lossy();
        run.write_delimited(&format!("{stem}.csv"), |b| matrix.write_delimited(b))?;
        run.write_json(&format!("{stem}.json"), to_value(&matrix)?)?;
        if plan.heatmap {
            let svg = format!("<!-- config_hash: {} -->\n{}", run.hash, matrix.to_svg());
            run.write_bytes(&format!("{stem}.svg"), svg.as_bytes())?;
        }
    }
    Ok(())
}
