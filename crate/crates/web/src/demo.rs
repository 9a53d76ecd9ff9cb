//! The computations behind the page, as plain functions returning JSON so
//! they can be tested natively.

use mobiclr::augment::{two_views, AugmentationKind, AugmentationPipeline, AugmentationSpec, JitterMode, ScaleMode};
use mobiclr::ingest::{zscore, INBOUND, OUTBOUND};
use mobiclr::objectives::contrastive_rows;
use mobiclr::rng;
use mobiclr::testkit::{gen_city, CitySpec, WEEK_HOURS};
use mobiclr::{Error, Result};
use ndarray::{Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

/// How many regions the page plots.
const SHOWN: usize = 6;

fn week(x: ArrayView1<'_, f64>) -> Vec<f64> {
    x.iter().take(WEEK_HOURS).copied().collect()
}

/// One synthetic week: profile templates plus the first few regions'
/// counts, mixture weights and indicator.
pub fn synth_city(n_regions: usize, noise_level: f64, concentration: f64, seed: u64) -> Result<Value> {
    let spec = CitySpec {
        n_regions,
        noise_level,
        concentration,
        seed,
        steps: WEEK_HOURS,
        ..CitySpec::default()
    };
    let city = gen_city(&spec)?;
    let profiles: Vec<Value> = city
        .profile_names
        .iter()
        .zip(city.templates.outer_iter())
        .map(|(name, t)| {
            json!({
                "name": name,
                "inbound": week(t.column(INBOUND)),
                "outbound": week(t.column(OUTBOUND)),
            })
        })
        .collect();
    let regions: Vec<Value> = (0..n_regions.min(SHOWN))
        .map(|n| {
            let counts = city.series.counts.index_axis(Axis(0), n).mapv(f64::from);
            json!({
                "id": city.series.region_ids[n],
                "weights": city.weights.row(n).to_vec(),
                "indicator": city.indicator[n],
                "inbound": week(counts.column(INBOUND)),
                "outbound": week(counts.column(OUTBOUND)),
            })
        })
        .collect();
    Ok(json!({"profiles": profiles, "beta": city.beta.to_vec(), "regions": regions}))
}

fn spec_for(kind: &str, strength: f64) -> Result<AugmentationSpec> {
    let kind: AugmentationKind = serde_json::from_value(json!(kind))
        .map_err(|_| Error::Argument(format!("unknown augmentation `{kind}`")))?;
    let spec = match kind {
        AugmentationKind::Jitter => AugmentationSpec::Jitter { sigma: strength, mode: JitterMode::Additive },
        AugmentationKind::Shift => AugmentationSpec::Shift { sigma: strength },
        AugmentationKind::Scale => AugmentationSpec::Scale { sigma: strength, mode: ScaleMode::Literal },
        AugmentationKind::Dropout => AugmentationSpec::Dropout { drop_prob: strength },
    };
    spec.validate()?;
    Ok(spec)
}

/// Two views of one region's z-scored week under a comma-separated list
/// of augmentations (`"jitter,shift"`), all at the same strength.
pub fn augment_views(kinds: &str, strength: f64, seed: u64) -> Result<Value> {
    let steps = kinds
        .split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(|k| spec_for(k, strength))
        .collect::<Result<Vec<_>>>()?;
    let pipeline = AugmentationPipeline::new(steps);
    let city = gen_city(&CitySpec { n_regions: 8, steps: WEEK_HOURS, ..CitySpec::default() })?;
    let x = zscore(&city.series).values.index_axis(Axis(0), 0).to_owned();
    let mut r = rng::stream(seed, &[rng::TAG_VIEW]);
    let pair = two_views(x.view(), &pipeline, &mut r);
    let channel = |m: &Array2<f64>| week(m.column(INBOUND));
    Ok(json!({
        "original": channel(&x),
        "view_a": channel(&pair.view_a),
        "view_b": channel(&pair.view_b),
    }))
}

/// Mean NT-Xent of a batch whose positive pairs all sit at cosine
/// similarity `s`, swept over `s` in `[-1, 1]`. Anchors are random unit
/// vectors; each positive is rotated away from its anchor within the plane
/// of a random orthogonal direction.
pub fn ntxent_curve(temperature: f64, batch: usize, seed: u64) -> Result<Value> {
    const DIM: usize = 16;
    const POINTS: usize = 41;
    if batch < 2 {
        return Err(Error::Argument("batch must be at least 2".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    let mut r = rng::stream(seed, &[]);
    let mut gaussian = |rows: usize| Array2::<f64>::from_shape_simple_fn((rows, DIM), || StandardNormal.sample(&mut r));
    let unit = |mut m: Array2<f64>| {
        for mut row in m.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row /= norm;
        }
        m
    };
    let anchors = unit(gaussian(batch));
    let mut ortho = gaussian(batch);
    for (mut o, a) in ortho.rows_mut().into_iter().zip(anchors.rows()) {
        let proj = o.dot(&a);
        o.scaled_add(-proj, &a);
    }
    let ortho = unit(ortho);

    let mut sims = Vec::with_capacity(POINTS);
    let mut losses = Vec::with_capacity(POINTS);
    for i in 0..POINTS {
        let s = 1.0 - 2.0 * i as f64 / (POINTS - 1) as f64;
        let positives = &anchors * s + &ortho * (1.0 - s * s).max(0.0).sqrt();
        let rows = contrastive_rows(anchors.view(), positives.view(), temperature, 1.0)?;
        sims.push(s);
        losses.push(rows.losses.mean().unwrap_or(f64::NAN));
    }
    // With every logit equal the loss is ln(2B - 1): the "knows nothing" level.
    let chance = ((2 * batch - 1) as f64).ln();
    Ok(json!({"similarity": sims, "loss": losses, "chance": chance}))
}
