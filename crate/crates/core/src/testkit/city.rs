use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::ingest::{MobilitySeries, INBOUND, OUTBOUND};
use crate::probe::TargetTable;
use crate::rng;

pub const WEEK_HOURS: usize = 168;

const BUILTIN_PROFILES: &str = include_str!("../../data/profiles.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DaySet {
    Named(String),
    List(Vec<usize>),
}

impl DaySet {
    fn days(&self) -> Result<Vec<usize>> {
        match self {
            DaySet::Named(s) => match s.as_str() {
                "weekday" => Ok((0..5).collect()),
                "weekend" => Ok(vec![5, 6]),
                "daily" => Ok((0..7).collect()),
                other => Err(Error::Config(format!("unknown day set `{other}`"))),
            },
            DaySet::List(d) if d.iter().all(|&x| x < 7) => Ok(d.clone()),
            DaySet::List(d) => Err(Error::Config(format!("day indices must be 0-6, got {d:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub hour: f64,
    pub width: f64,
    pub height: f64,
    pub days: DaySet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelTemplate {
    pub base: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
}

impl ChannelTemplate {
    /// The 168-hour pattern.
    pub fn render(&self) -> Result<Array1<f64>> {
        if self.base < 0.0 {
            return Err(Error::Config("template base must be non-negative".into()));
        }
        let mut out = Array1::from_elem(WEEK_HOURS, self.base);
        let week = WEEK_HOURS as f64;
        for b in &self.bumps {
            if !(b.width > 0.0) || b.height < 0.0 {
                return Err(Error::Config("bumps need positive width and non-negative height".into()));
            }
            for day in b.days.days()? {
                let centre = day as f64 * 24.0 + b.hour;
                for (h, v) in out.iter_mut().enumerate() {
                    let raw = (h as f64 - centre).rem_euclid(week);
                    let dist = raw.min(week - raw);
                    *v += b.height * (-0.5 * (dist / b.width).powi(2)).exp();
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub inbound: ChannelTemplate,
    pub outbound: ChannelTemplate,
}

impl Profile {
    /// `168 x 2` template, channels ordered inbound, outbound.
    pub fn render(&self) -> Result<Array2<f64>> {
        let mut out = Array2::<f64>::zeros((WEEK_HOURS, 2));
        out.column_mut(INBOUND).assign(&self.inbound.render()?);
        out.column_mut(OUTBOUND).assign(&self.outbound.render()?);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileLibrary {
    pub profile: Vec<Profile>,
}

impl ProfileLibrary {
    /// The residential / commercial / entertainment profiles shipped with the
    /// crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_PROFILES).expect("bundled profiles parse")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lib: ProfileLibrary = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if lib.profile.is_empty() {
            return Err(Error::Config("profile library is empty".into()));
        }
        for p in &lib.profile {
            p.render()?;
        }
        Ok(lib)
    }

    /// `K x 168 x 2` templates of the first `k` profiles.
    pub fn templates(&self, k: usize) -> Result<Array3<f64>> {
        if k == 0 || k > self.profile.len() {
            return Err(Error::arg(format!("asked for {k} profiles, library has {}", self.profile.len())));
        }
        let mut out = Array3::<f64>::zeros((k, WEEK_HOURS, 2));
        for (i, p) in self.profile.iter().take(k).enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&p.render()?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CitySpec {
    pub n_regions: usize,
    pub n_profiles: usize,
    pub steps: usize,
    /// Count noise standard deviation as a multiple of `sqrt(expected)`.
    pub noise_level: f64,
    pub seed: u64,
    /// Expected trips per hour at a template value of 1, median region.
    pub volume: f64,
    /// Log-normal spread of per-region volume.
    pub volume_spread: f64,
    /// Symmetric Dirichlet concentration of the mixture weights.
    pub concentration: f64,
    /// Standard deviation of the Gaussian noise added to the indicator.
    pub indicator_noise: f64,
    /// Unix time of the first hour.
    pub time_origin: i64,
}

impl Default for CitySpec {
    fn default() -> Self {
        CitySpec {
            n_regions: 60,
            n_profiles: 3,
            steps: 336,
            noise_level: 1.0,
            seed: 0,
            volume: 40.0,
            volume_spread: 0.3,
            concentration: 1.0,
            indicator_noise: 0.02,
            // Monday 2024-01-01 00:00 UTC.
            time_origin: 1_704_067_200,
        }
    }
}

impl CitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 8 {
            return Err(Error::arg(format!("a synthetic city needs at least 8 regions, got {}", self.n_regions)));
        }
        if self.steps == 0 || self.steps % 24 != 0 {
            return Err(Error::arg(format!("steps must be a positive multiple of 24, got {}", self.steps)));
        }
        let ok = self.noise_level >= 0.0
            && self.volume > 0.0
            && self.volume_spread >= 0.0
            && self.concentration > 0.0
            && self.indicator_noise >= 0.0;
        if !ok {
            return Err(Error::arg("noise, volume and concentration parameters must be non-negative (volume, concentration positive)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCity {
    pub spec: CitySpec,
    pub profile_names: Vec<String>,
    /// `K x 168 x 2`.
    pub templates: Array3<f64>,
    /// `N x K`, rows on the simplex.
    pub weights: Array2<f64>,
    pub volumes: Array1<f64>,
    pub beta: Array1<f64>,
    pub indicator: Array1<f64>,
    /// Noise-free expected counts, `N x T x 2`.
    pub expected: Array3<f64>,
    pub series: MobilitySeries,
}

/// Generates a city from the built-in profiles.
pub fn gen_city(spec: &CitySpec) -> Result<SynthCity> {
    gen_city_with(spec, &ProfileLibrary::builtin())
}

impl SynthCity {
    pub fn region_ids(&self) -> &[String] {
        &self.series.region_ids
    }

    pub fn targets(&self) -> TargetTable {
        TargetTable {
            name: "indicator".into(),
            region_ids: self.series.region_ids.clone(),
            values: self.indicator.to_vec(),
        }
    }

    /// Ground truth (weights, volumes, indicator) as a container.
    pub fn truth_container(&self) -> Container {
        let (n, k) = self.weights.dim();
        let mut c = Container::new(
            "synthetic_truth",
            json!({"spec": self.spec, "profiles": self.profile_names, "region_ids": self.series.region_ids}),
        );
        c.push(Tensor::f64("weights", &[n, k], self.weights.iter().copied().collect()));
        c.push(Tensor::f64("volumes", &[n], self.volumes.to_vec()));
        c.push(Tensor::f64("beta", &[k], self.beta.to_vec()));
        c.push(Tensor::f64("indicator", &[n], self.indicator.to_vec()));
        c
    }
}

pub fn gen_city_with(spec: &CitySpec, library: &ProfileLibrary) -> Result<SynthCity> {
    spec.validate()?;
    let (n, k, t) = (spec.n_regions, spec.n_profiles, spec.steps);
    let templates = library.templates(k)?;
    let sub = |tag: u64| rng::stream(spec.seed, &[rng::TAG_CITY, tag]);

    let gamma = Gamma::new(spec.concentration, 1.0).map_err(|e| Error::arg(e.to_string()))?;
    let mut r = sub(1);
    let mut weights = Array2::<f64>::zeros((n, k));
    for mut row in weights.rows_mut() {
        loop {
            row.iter_mut().for_each(|w| *w = gamma.sample(&mut r));
            let s = row.sum();
            if s > 0.0 {
                row /= s;
                break;
            }
        }
    }

    let mut r = sub(2);
    let volumes = Array1::from_shape_simple_fn(n, || {
        let e: f64 = StandardNormal.sample(&mut r);
        spec.volume * (spec.volume_spread * e).exp()
    });

    let mut expected = Array3::<f64>::zeros((n, t, 2));
    for i in 0..n {
        for step in 0..t {
            for c in 0..2 {
                let mix: f64 = (0..k).map(|p| weights[[i, p]] * templates[[p, step % WEEK_HOURS, c]]).sum();
                expected[[i, step, c]] = volumes[i] * mix;
            }
        }
    }

    let mut r = sub(3);
    let counts = expected.mapv(|mu| {
        let e: f64 = StandardNormal.sample(&mut r);
        // Truncated at zero by clipping.
        (mu + spec.noise_level * mu.sqrt() * e).max(0.0).round() as u32
    });

    let mut beta: Vec<f64> = if k == 1 { vec![1.0] } else { (0..k).map(|i| i as f64 / (k - 1) as f64).collect() };
    beta.shuffle(&mut sub(4));
    let beta = Array1::from(beta);

    let mut r = sub(5);
    let noise = Normal::new(0.0, spec.indicator_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::arg(e.to_string()))?;
    let indicator = Array1::from_shape_fn(n, |i| {
        let clean = weights.row(i).dot(&beta);
        if spec.indicator_noise > 0.0 {
            clean + noise.sample(&mut r)
        } else {
            clean
        }
    });

    let series = MobilitySeries {
        counts,
        time_origin: spec.time_origin,
        region_ids: (0..n).map(|i| format!("R{i:03}")).collect(),
    };
    Ok(SynthCity {
        spec: spec.clone(),
        profile_names: library.profile.iter().take(k).map(|p| p.name.clone()).collect(),
        templates,
        weights,
        volumes,
        beta,
        indicator,
        expected,
        series,
    })
}
