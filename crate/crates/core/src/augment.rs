//! Stochastic time-series transforms and two-view generation.
//!
//! Every transform is split into a sampling step that records its random
//! draws ([`Draw`]) and a pure replay step, so any view can be rebuilt from
//! its recorded draws.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const DEFAULT_SIGMA: f64 = 0.2;
pub const DEFAULT_DROP_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterMode {
    /// `x + eps_t`.
    #[default]
    Additive,
    /// `eps_t * x`, with mean-zero `eps_t`.
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Multiplier drawn from `N(0, sigma)`.
    #[default]
    Literal,
    /// Multiplier drawn from `N(1, sigma)`.
    MeanOne,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

fn default_drop_prob() -> f64 {
    DEFAULT_DROP_PROB
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationSpec {
    Jitter {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default)]
        mode: JitterMode,
    },
    Shift {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    Scale {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default)]
        mode: ScaleMode,
    },
    Dropout {
        #[serde(default = "default_drop_prob")]
        drop_prob: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Scale,
    Jitter,
    Shift,
    Dropout,
}

impl AugmentationKind {
    /// Grid order used by the augmentation experiment.
    pub const ALL: [AugmentationKind; 4] = [
        AugmentationKind::Scale,
        AugmentationKind::Jitter,
        AugmentationKind::Shift,
        AugmentationKind::Dropout,
    ];

    pub fn default_spec(self) -> AugmentationSpec {
        match self {
            AugmentationKind::Jitter => AugmentationSpec::Jitter {
                sigma: DEFAULT_SIGMA,
                mode: JitterMode::Additive,
            },
            AugmentationKind::Shift => AugmentationSpec::Shift { sigma: DEFAULT_SIGMA },
            AugmentationKind::Scale => AugmentationSpec::Scale {
                sigma: DEFAULT_SIGMA,
                mode: ScaleMode::Literal,
            },
            AugmentationKind::Dropout => AugmentationSpec::Dropout {
                drop_prob: DEFAULT_DROP_PROB,
            },
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugmentationKind::Scale => "scale",
            AugmentationKind::Jitter => "jitter",
            AugmentationKind::Shift => "shift",
            AugmentationKind::Dropout => "dropout",
        })
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentationKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::arg(format!("unknown augmentation `{s}`")))
    }
}

impl AugmentationSpec {
    pub fn kind(&self) -> AugmentationKind {
        match self {
            AugmentationSpec::Jitter { .. } => AugmentationKind::Jitter,
            AugmentationSpec::Shift { .. } => AugmentationKind::Shift,
            AugmentationSpec::Scale { .. } => AugmentationKind::Scale,
            AugmentationSpec::Dropout { .. } => AugmentationKind::Dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentationSpec::Jitter { sigma, .. }
            | AugmentationSpec::Shift { sigma }
            | AugmentationSpec::Scale { sigma, .. } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::arg(format!("{}: sigma must be > 0", self.kind())));
                }
            }
            AugmentationSpec::Dropout { drop_prob } => {
                if !(0.0..=1.0).contains(&drop_prob) {
                    return Err(Error::arg("dropout: drop_prob must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    /// Draws the randomness for one application to a `rows x cols` tensor.
    pub fn sample(&self, rows: usize, cols: usize, rng: &mut Stream) -> Draw {
        match *self {
            AugmentationSpec::Jitter { sigma, .. } => {
                let n = normal(0.0, sigma);
                Draw::Jitter(Array2::from_shape_simple_fn((rows, cols), || n.sample(rng)))
            }
            AugmentationSpec::Shift { sigma } => Draw::Shift(normal(0.0, sigma).sample(rng)),
            AugmentationSpec::Scale { sigma, mode } => {
                let mean = match mode {
                    ScaleMode::Literal => 0.0,
                    ScaleMode::MeanOne => 1.0,
                };
                Draw::Scale(normal(mean, sigma).sample(rng))
            }
            AugmentationSpec::Dropout { drop_prob } => Draw::Dropout(Array2::from_shape_simple_fn(
                (rows, cols),
                || rng.random::<f64>() < drop_prob,
            )),
        }
    }

    /// Applies recorded draws. Pure.
    pub fn replay(&self, x: ArrayView2<f64>, draw: &Draw) -> Result<Array2<f64>> {
        let check = |dim: (usize, usize)| {
            if dim == x.dim() {
                Ok(())
            } else {
                Err(Error::shape(format!("{:?}", x.dim()), format!("{dim:?}")))
            }
        };
        Ok(match (self, draw) {
            (AugmentationSpec::Jitter { mode, .. }, Draw::Jitter(eps)) => {
                check(eps.dim())?;
                match mode {
                    JitterMode::Additive => &x + eps,
                    JitterMode::Multiplicative => &x * eps,
                }
            }
            (AugmentationSpec::Shift { .. }, Draw::Shift(eps)) => x.mapv(|v| v + eps),
            (AugmentationSpec::Scale { .. }, Draw::Scale(eps)) => x.mapv(|v| v * eps),
            (AugmentationSpec::Dropout { .. }, Draw::Dropout(mask)) => {
                check(mask.dim())?;
                let mut out = x.to_owned();
                out.zip_mut_with(mask, |v, &drop| {
                    if drop {
                        *v = 0.0
                    }
                });
                out
            }
            _ => return Err(Error::arg(format!("draw does not match a {} step", self.kind()))),
        })
    }
}

fn normal(mean: f64, sigma: f64) -> Normal<f64> {
    Normal::new(mean, sigma).expect("sigma validated as positive and finite")
}

/// Recorded randomness of one transform application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Draw {
    Jitter(Array2<f64>),
    Shift(f64),
    Scale(f64),
    /// `true` marks a dropped entry.
    Dropout(Array2<bool>),
}

pub fn apply_jitter(x: ArrayView2<f64>, sigma: f64, mode: JitterMode, rng: &mut Stream) -> Array2<f64> {
    apply_one(AugmentationSpec::Jitter { sigma, mode }, x, rng)
}

pub fn apply_shift(x: ArrayView2<f64>, sigma: f64, rng: &mut Stream) -> Array2<f64> {
    apply_one(AugmentationSpec::Shift { sigma }, x, rng)
}

pub fn apply_scale(x: ArrayView2<f64>, sigma: f64, mode: ScaleMode, rng: &mut Stream) -> Array2<f64> {
    apply_one(AugmentationSpec::Scale { sigma, mode }, x, rng)
}

pub fn apply_dropout(x: ArrayView2<f64>, drop_prob: f64, rng: &mut Stream) -> Array2<f64> {
    apply_one(AugmentationSpec::Dropout { drop_prob }, x, rng)
}

fn apply_one(spec: AugmentationSpec, x: ArrayView2<f64>, rng: &mut Stream) -> Array2<f64> {
    let draw = spec.sample(x.nrows(), x.ncols(), rng);
    spec.replay(x, &draw).expect("draw sampled for this shape")
}

/// Ordered composition of transforms, applied left to right.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugmentationPipeline {
    pub steps: Vec<AugmentationSpec>,
}

impl AugmentationPipeline {
    pub fn new(steps: Vec<AugmentationSpec>) -> Self {
        AugmentationPipeline { steps }
    }

    /// Jitter then shift, both with the default sigma.
    pub fn default_pair() -> Self {
        Self::from_kinds(&[AugmentationKind::Jitter, AugmentationKind::Shift])
    }

    pub fn from_kinds(kinds: &[AugmentationKind]) -> Self {
        AugmentationPipeline {
            steps: kinds.iter().map(|k| k.default_spec()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.steps.iter().try_for_each(AugmentationSpec::validate)
    }

    pub fn apply(&self, x: ArrayView2<f64>, rng: &mut Stream) -> (Array2<f64>, Vec<Draw>) {
        let mut cur = x.to_owned();
        let mut draws = Vec::with_capacity(self.steps.len());
        for step in &self.steps {
            let d = step.sample(cur.nrows(), cur.ncols(), rng);
            cur = step.replay(cur.view(), &d).expect("draw sampled for this shape");
            draws.push(d);
        }
        (cur, draws)
    }

    pub fn replay(&self, x: ArrayView2<f64>, draws: &[Draw]) -> Result<Array2<f64>> {
        if draws.len() != self.steps.len() {
            return Err(Error::arg(format!(
                "{} draws recorded for a {}-step pipeline",
                draws.len(),
                self.steps.len()
            )));
        }
        let mut cur = x.to_owned();
        for (step, d) in self.steps.iter().zip(draws) {
            cur = step.replay(cur.view(), d)?;
        }
        Ok(cur)
    }
}

/// Two augmented views of one `T x C` series. The draws are grouped: one
/// group per independently augmented part of the input (one group for the
/// whole tensor from [`two_views`], one per channel from [`trio_views`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Array2<f64>,
    pub view_b: Array2<f64>,
    pub draws_a: Vec<Vec<Draw>>,
    pub draws_b: Vec<Vec<Draw>>,
}

/// Two independent pipeline applications to the whole tensor.
pub fn two_views(x: ArrayView2<f64>, pipeline: &AugmentationPipeline, rng: &mut Stream) -> ViewPair {
    let (view_a, da) = pipeline.apply(x, rng);
    let (view_b, db) = pipeline.apply(x, rng);
    ViewPair {
        view_a,
        view_b,
        draws_a: vec![da],
        draws_b: vec![db],
    }
}

/// Views for the encoder trio. Each channel of the `T x 2` joint series is
/// augmented as its own univariate series, and the joint view is their
/// concatenation, so the inbound, outbound and joint encoders all see the
/// same draws.
pub fn trio_views(x_io: ArrayView2<f64>, pipeline: &AugmentationPipeline, rng: &mut Stream) -> ViewPair {
    let per_view = |rng: &mut Stream| {
        let (parts, draws): (Vec<_>, Vec<_>) = (0..x_io.ncols())
            .map(|c| pipeline.apply(x_io.slice(ndarray::s![.., c..c + 1]), rng))
            .unzip();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        (concatenate(Axis(1), &views).expect("equal lengths"), draws)
    };
    let (view_a, draws_a) = per_view(rng);
    let (view_b, draws_b) = per_view(rng);
    ViewPair {
        view_a,
        view_b,
        draws_a,
        draws_b,
    }
}

/// Rebuilds a view from its recorded draw groups.
pub fn replay_view(x: ArrayView2<f64>, pipeline: &AugmentationPipeline, draws: &[Vec<Draw>]) -> Result<Array2<f64>> {
    match draws.len() {
        1 => pipeline.replay(x, &draws[0]),
        n if n == x.ncols() => {
            let parts = draws
                .iter()
                .enumerate()
                .map(|(c, d)| pipeline.replay(x.slice(ndarray::s![.., c..c + 1]), d))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            Ok(concatenate(Axis(1), &views).expect("equal lengths"))
        }
        n => Err(Error::arg(format!("{n} draw groups for a {}-channel series", x.ncols()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{array, Array2};

    fn col(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((v.len(), 1), v.to_vec()).unwrap()
    }

    #[test]
    fn injected_draws() {
        let x = col(&[1.0, 2.0, 3.0]);
        let jit = AugmentationSpec::Jitter { sigma: 0.2, mode: JitterMode::Additive };
        assert_eq!(jit.replay(x.view(), &Draw::Jitter(col(&[0.1, -0.2, 0.0]))).unwrap(), col(&[1.1, 1.8, 3.0]));
        assert_eq!(jit.replay(x.view(), &Draw::Jitter(Array2::zeros((3, 1)))).unwrap(), x);

        let shift = AugmentationKind::Shift.default_spec();
        assert_eq!(shift.replay(x.view(), &Draw::Shift(0.5)).unwrap(), col(&[1.5, 2.5, 3.5]));
        assert_eq!(shift.replay(x.view(), &Draw::Shift(0.0)).unwrap(), x);

        let scale = AugmentationKind::Scale.default_spec();
        assert_eq!(scale.replay(x.view(), &Draw::Scale(2.0)).unwrap(), col(&[2.0, 4.0, 6.0]));
        assert_eq!(scale.replay(x.view(), &Draw::Scale(1.0)).unwrap(), x);

        let mult = AugmentationSpec::Jitter { sigma: 0.2, mode: JitterMode::Multiplicative };
        assert_eq!(mult.replay(x.view(), &Draw::Jitter(col(&[2.0, 0.0, -1.0]))).unwrap(), col(&[2.0, 0.0, -3.0]));
    }

    #[test]
    fn default_pipeline_with_zero_draws_is_identity() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let p = AugmentationPipeline::default_pair();
        let out = p.replay(x.view(), &[Draw::Jitter(Array2::zeros((2, 2))), Draw::Shift(0.0)]).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn same_seed_same_output() {
        let x = array![[1.0], [2.0], [3.0]];
        let a = apply_jitter(x.view(), 0.2, JitterMode::Additive, &mut stream(3, &[]));
        let b = apply_jitter(x.view(), 0.2, JitterMode::Additive, &mut stream(3, &[]));
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn single_scalar_transforms() {
        let x = Array2::from_shape_fn((50, 2), |(t, c)| (t as f64 + 1.0) * (c as f64 + 1.5));
        let shifted = apply_shift(x.view(), 0.2, &mut stream(1, &[]));
        let d = &shifted - &x;
        assert!(d.iter().all(|v| (v - d[[0, 0]]).abs() < 1e-12));

        let scaled = apply_scale(x.view(), 0.2, ScaleMode::Literal, &mut stream(2, &[]));
        let r = &scaled / &x;
        assert!(r.iter().all(|v| (v - r[[0, 0]]).abs() < 1e-12));
    }

    #[test]
    fn dropout_extremes_and_frequency() {
        let x = Array2::from_elem((1000, 100), 1.0);
        assert_eq!(apply_dropout(x.view(), 0.0, &mut stream(1, &[])), x);
        assert!(apply_dropout(x.view(), 1.0, &mut stream(1, &[])).iter().all(|&v| v == 0.0));
        let out = apply_dropout(x.view(), 0.1, &mut stream(4, &[]));
        let frac = out.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
        // Survivors are not rescaled.
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn shapes_preserved() {
        let x = Array2::from_elem((7, 3), 2.0);
        for k in AugmentationKind::ALL {
            let (y, _) = AugmentationPipeline::from_kinds(&[k]).apply(x.view(), &mut stream(1, &[]));
            assert_eq!(y.dim(), (7, 3));
        }
    }

    #[test]
    fn empty_pipeline_is_identity() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let v = two_views(x.view(), &AugmentationPipeline::default(), &mut stream(1, &[]));
        assert_eq!(v.view_a, x);
        assert_eq!(v.view_b, x);
    }

    #[test]
    fn views_differ_and_replay() {
        let x = Array2::from_shape_fn((24, 2), |(t, c)| (t as f64).sin() + c as f64);
        let p = AugmentationPipeline::from_kinds(&AugmentationKind::ALL);
        for seed in 0..20 {
            let v = two_views(x.view(), &p, &mut stream(seed, &[]));
            assert_ne!(v.view_a, v.view_b);
            assert_eq!(replay_view(x.view(), &p, &v.draws_a).unwrap(), v.view_a);
            assert_eq!(replay_view(x.view(), &p, &v.draws_b).unwrap(), v.view_b);

            let t = trio_views(x.view(), &p, &mut stream(seed, &[]));
            assert_ne!(t.view_a, t.view_b);
            assert_eq!(t.draws_a.len(), 2);
            assert_eq!(replay_view(x.view(), &p, &t.draws_a).unwrap(), t.view_a);
            assert_eq!(replay_view(x.view(), &p, &t.draws_b).unwrap(), t.view_b);
        }
    }

    #[test]
    fn trio_channels_use_independent_shifts() {
        let x = Array2::<f64>::zeros((10, 2));
        let p = AugmentationPipeline::from_kinds(&[AugmentationKind::Shift]);
        let v = trio_views(x.view(), &p, &mut stream(9, &[]));
        // Each channel is constant, but the two constants differ.
        assert!(v.view_a.column(0).iter().all(|&a| a == v.view_a[[0, 0]]));
        assert_ne!(v.view_a[[0, 0]], v.view_a[[0, 1]]);
    }

    #[test]
    fn spec_serde_and_validation() {
        let p: AugmentationPipeline =
            serde_json::from_str(r#"[{"kind":"jitter"},{"kind":"shift","sigma":0.5},{"kind":"dropout"}]"#).unwrap();
        assert_eq!(p.steps[0], AugmentationKind::Jitter.default_spec());
        assert_eq!(p.steps[1], AugmentationSpec::Shift { sigma: 0.5 });
        assert_eq!(p.steps[2], AugmentationSpec::Dropout { drop_prob: 0.1 });
        assert!(AugmentationSpec::Shift { sigma: 0.0 }.validate().is_err());
        assert!(AugmentationSpec::Dropout { drop_prob: 1.5 }.validate().is_err());
        assert_eq!("dropout".parse::<AugmentationKind>().unwrap(), AugmentationKind::Dropout);
    }
}
