//! Contrastive objectives: per-timestep NT-Xent on the inbound and outbound
//! projections, a pooled alignment regularizer tying the joint projection to
//! each flow, and their sum.
//!
//! Every loss is returned together with its gradient with respect to the
//! projections it consumed, so the trainer can backpropagate without an
//! autodiff engine.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor used by cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Temperatures {
    /// Instance-level NT-Xent temperature.
    pub tau: f64,
    /// Pooled alignment temperature.
    pub tau_a: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Temperatures { tau: 1.0, tau_a: 0.1 }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        if self.tau > 0.0 && self.tau_a > 0.0 && self.tau.is_finite() && self.tau_a.is_finite() {
            Ok(())
        } else {
            Err(Error::arg("temperatures must be positive and finite"))
        }
    }
}

/// Which loss terms contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub use_li: bool,
    pub use_lo: bool,
    pub use_la: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        LossTerms::FULL
    }
}

impl LossTerms {
    pub const FULL: LossTerms = LossTerms { use_li: true, use_lo: true, use_la: true };
    pub const INBOUND_ONLY: LossTerms = LossTerms { use_li: true, use_lo: false, use_la: false };
    pub const OUTBOUND_ONLY: LossTerms = LossTerms { use_li: false, use_lo: true, use_la: false };
    pub const NO_AUX: LossTerms = LossTerms { use_li: true, use_lo: true, use_la: false };

    pub fn any(&self) -> bool {
        self.use_li || self.use_lo || self.use_la
    }

    /// Projections each term needs: `[inbound, outbound, joint]`.
    pub fn flows_needed(&self) -> [bool; 3] {
        [
            self.use_li || self.use_la,
            self.use_lo || self.use_la,
            self.use_la,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOptions {
    pub temperatures: Temperatures,
    pub terms: LossTerms,
    /// Average `l(z, z~)` and `l(z~, z)` instead of using only the first.
    pub symmetric_ntxent: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_i: f64,
    pub l_o: f64,
    pub l_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_i: f64, l_o: f64, l_a: f64) -> Self {
        LossBreakdown { l_i, l_o, l_a, total: l_i + l_o + l_a }
    }

    pub fn is_finite(&self) -> bool {
        self.l_i.is_finite() && self.l_o.is_finite() && self.l_a.is_finite() && self.total.is_finite()
    }
}

/// Cosine similarity with each norm floored at [`COSINE_EPS`], clamped to
/// `[-1, 1]`.
pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(COSINE_EPS);
    let nb = b.dot(&b).sqrt().max(COSINE_EPS);
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Row-normalized copy of `x` and the floored row norms.
fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(COSINE_EPS));
    let u = &x / &norms.view().insert_axis(Axis(1));
    (u, norms)
}

/// Pulls a gradient on normalized rows back to the raw rows.
fn normalize_rows_backward(x: ArrayView2<f64>, u: &Array2<f64>, norms: &Array1<f64>, du: Array2<f64>) -> Array2<f64> {
    let mut dx = du;
    for ((mut dr, ur), (&n, xr)) in dx
        .outer_iter_mut()
        .zip(u.outer_iter())
        .zip(norms.iter().zip(x.outer_iter()))
    {
        if xr.dot(&xr).sqrt() > COSINE_EPS {
            let proj = ur.dot(&dr);
            dr.zip_mut_with(&ur, |d, &uv| *d -= uv * proj);
        }
        dr.mapv_inplace(|d| d / n);
    }
    dx
}

/// Per-anchor contrastive losses and their gradients.
#[derive(Debug, Clone)]
pub struct RowLosses {
    pub losses: Array1<f64>,
    /// `d(sum_n w_n * loss_n) / d anchors`, for the weights passed in.
    pub d_anchor: Array2<f64>,
    pub d_candidate: Array2<f64>,
}

/// The shared NT-Xent kernel. For anchors `a` and candidates `c` (both
/// `B x F`, row `n` of `c` is the positive of row `n` of `a`):
///
/// ```text
/// loss_n = -log  exp(s(a_n, c_n)/tau)
///               / ( sum_{m != n} exp(s(a_n, a_m)/tau) + sum_m exp(s(a_n, c_m)/tau) )
/// ```
///
/// Computed as log-sum-exp minus the positive logit after subtracting the
/// per-anchor maximum logit. Gradients are scaled by `weight` per anchor.
pub fn contrastive_rows(a: ArrayView2<f64>, c: ArrayView2<f64>, tau: f64, weight: f64) -> Result<RowLosses> {
    let b = a.nrows();
    if b < 2 {
        return Err(Error::arg("contrastive loss needs at least two samples per batch"));
    }
    if c.dim() != a.dim() {
        return Err(Error::shape(format!("{:?}", a.dim()), format!("{:?}", c.dim())));
    }
    let (ua, na) = normalize_rows(a);
    let (uc, nc) = normalize_rows(c);
    let s_aa = ua.dot(&ua.t()).mapv(|v| v.clamp(-1.0, 1.0) / tau);
    let s_ac = ua.dot(&uc.t()).mapv(|v| v.clamp(-1.0, 1.0) / tau);

    let mut losses = Array1::<f64>::zeros(b);
    // Softmax weights minus the positive indicator, per logit, times weight/tau.
    let mut g_aa = Array2::<f64>::zeros((b, b));
    let mut g_ac = Array2::<f64>::zeros((b, b));
    for n in 0..b {
        let mut max = f64::NEG_INFINITY;
        for m in 0..b {
            if m != n {
                max = max.max(s_aa[[n, m]]);
            }
            max = max.max(s_ac[[n, m]]);
        }
        let mut sum = 0.0;
        for m in 0..b {
            if m != n {
                sum += (s_aa[[n, m]] - max).exp();
            }
            sum += (s_ac[[n, m]] - max).exp();
        }
        losses[n] = max + sum.ln() - s_ac[[n, n]];
        for m in 0..b {
            if m != n {
                g_aa[[n, m]] = (s_aa[[n, m]] - max).exp() / sum * weight / tau;
            }
            g_ac[[n, m]] = (s_ac[[n, m]] - max).exp() / sum * weight / tau;
        }
        g_ac[[n, n]] -= weight / tau;
    }
    // s_aa[n, m] = ua_n . ua_m feeds both rows n and m.
    let du_a = g_aa.dot(&ua) + g_aa.t().dot(&ua) + g_ac.dot(&uc);
    let du_c = g_ac.t().dot(&ua);
    Ok(RowLosses {
        losses,
        d_anchor: normalize_rows_backward(a, &ua, &na, du_a),
        d_candidate: normalize_rows_backward(c, &uc, &nc, du_c),
    })
}

/// Per-timestep NT-Xent and gradients of the scalar mean.
#[derive(Debug, Clone)]
pub struct TimestepLoss {
    /// `B x T`.
    pub per_step: Array2<f64>,
    pub mean: f64,
    pub d_z: Array3<f64>,
    pub d_z_tilde: Array3<f64>,
}

/// NT-Xent applied independently at every timestep: anchors `z[:, t]`,
/// positives `z_tilde[:, t]`, in-view negatives `z[m != n, t]`, cross-view
/// negatives `z_tilde[m, t]`. The scalar is the mean over `B x T`.
pub fn ntxent_timestep(z: ArrayView3<f64>, z_tilde: ArrayView3<f64>, tau: f64) -> Result<TimestepLoss> {
    let (b, t, f) = z.dim();
    if z_tilde.dim() != (b, t, f) {
        return Err(Error::shape(format!("{:?}", z.dim()), format!("{:?}", z_tilde.dim())));
    }
    if b < 2 {
        return Err(Error::arg("NT-Xent needs a batch of at least two"));
    }
    let w = 1.0 / (b * t) as f64;
    let mut per_step = Array2::<f64>::zeros((b, t));
    let mut d_z = Array3::<f64>::zeros((b, t, f));
    let mut d_zt = Array3::<f64>::zeros((b, t, f));
    for step in 0..t {
        let rows = contrastive_rows(z.slice(s![.., step, ..]), z_tilde.slice(s![.., step, ..]), tau, w)?;
        per_step.column_mut(step).assign(&rows.losses);
        d_z.slice_mut(s![.., step, ..]).assign(&rows.d_anchor);
        d_zt.slice_mut(s![.., step, ..]).assign(&rows.d_candidate);
    }
    let mean = per_step.sum() * w;
    Ok(TimestepLoss { per_step, mean, d_z, d_z_tilde: d_zt })
}

/// Symmetrized variant: mean of `l(z, z~)` and `l(z~, z)`.
pub fn ntxent_timestep_symmetric(z: ArrayView3<f64>, z_tilde: ArrayView3<f64>, tau: f64) -> Result<TimestepLoss> {
    let fwd = ntxent_timestep(z, z_tilde, tau)?;
    let bwd = ntxent_timestep(z_tilde, z, tau)?;
    Ok(TimestepLoss {
        per_step: (&fwd.per_step + &bwd.per_step) * 0.5,
        mean: 0.5 * (fwd.mean + bwd.mean),
        d_z: (&fwd.d_z + &bwd.d_z_tilde) * 0.5,
        d_z_tilde: (&fwd.d_z_tilde + &bwd.d_z) * 0.5,
    })
}

/// Arithmetic mean over the time axis of a `T x F` sequence.
pub fn temporal_mean_pool(z: ArrayView2<f64>) -> Array1<f64> {
    assert!(z.nrows() >= 1, "pooling needs at least one step");
    z.mean_axis(Axis(0)).expect("non-empty")
}

/// Pools every sequence of a `B x T x F` batch to `B x F`.
pub fn pool_batch(z: ArrayView3<f64>) -> Array2<f64> {
    z.mean_axis(Axis(1)).expect("non-empty time axis")
}

/// Alignment loss of pooled joint anchors against pooled flow candidates,
/// with the other joint anchors as in-modal negatives.
pub fn aux_pair_loss(anchor: ArrayView2<f64>, candidates: ArrayView2<f64>, tau_a: f64) -> Result<Array1<f64>> {
    Ok(contrastive_rows(anchor, candidates, tau_a, 0.0)?.losses)
}

/// Projections of one flow for both views, each `B x T x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowPair {
    pub z: Array3<f64>,
    pub z_tilde: Array3<f64>,
}

impl FlowPair {
    pub fn zeros_like(&self) -> FlowPair {
        FlowPair {
            z: Array3::zeros(self.z.dim()),
            z_tilde: Array3::zeros(self.z_tilde.dim()),
        }
    }
}

/// Projections for a batch. A flow may be absent when no enabled loss term
/// reads it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchProjections {
    pub inbound: Option<FlowPair>,
    pub outbound: Option<FlowPair>,
    pub joint: Option<FlowPair>,
}

/// Pooled (`B x F`) projections for the alignment regularizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledProjections {
    pub inbound: (Array2<f64>, Array2<f64>),
    pub outbound: (Array2<f64>, Array2<f64>),
    pub joint: (Array2<f64>, Array2<f64>),
}

impl PooledProjections {
    pub fn from_batch(batch: &BatchProjections) -> Result<Self> {
        let pool = |p: &Option<FlowPair>, name: &str| {
            p.as_ref()
                .map(|fp| (pool_batch(fp.z.view()), pool_batch(fp.z_tilde.view())))
                .ok_or_else(|| Error::arg(format!("alignment regularizer needs {name} projections")))
        };
        Ok(PooledProjections {
            inbound: pool(&batch.inbound, "inbound")?,
            outbound: pool(&batch.outbound, "outbound")?,
            joint: pool(&batch.joint, "joint")?,
        })
    }
}

/// Gradients of the alignment regularizer w.r.t. the pooled projections.
struct AuxGrad {
    value: f64,
    d_joint: (Array2<f64>, Array2<f64>),
    d_inbound: (Array2<f64>, Array2<f64>),
    d_outbound: (Array2<f64>, Array2<f64>),
}

fn aux_with_grad(p: &PooledProjections, tau_a: f64) -> Result<AuxGrad> {
    let b = p.joint.0.nrows();
    let w = 1.0 / b as f64;
    let ai = contrastive_rows(p.joint.0.view(), p.inbound.0.view(), tau_a, w)?;
    let ai_t = contrastive_rows(p.joint.1.view(), p.inbound.1.view(), tau_a, w)?;
    let ao = contrastive_rows(p.joint.0.view(), p.outbound.0.view(), tau_a, w)?;
    let ao_t = contrastive_rows(p.joint.1.view(), p.outbound.1.view(), tau_a, w)?;
    let value = (ai.losses.sum() + ai_t.losses.sum()) * w + (ao.losses.sum() + ao_t.losses.sum()) * w;
    Ok(AuxGrad {
        value,
        d_joint: (&ai.d_anchor + &ao.d_anchor, &ai_t.d_anchor + &ao_t.d_anchor),
        d_inbound: (ai.d_candidate, ai_t.d_candidate),
        d_outbound: (ao.d_candidate, ao_t.d_candidate),
    })
}

/// The four-term pooled alignment regularizer:
/// `mean_n[l_ai(z_io, z_i) + l_ai(z~_io, z~_i)] + mean_n[l_ao(z_io, z_o) + l_ao(z~_io, z~_o)]`.
pub fn aux_regularizer(pooled: &PooledProjections, tau_a: f64) -> Result<f64> {
    Ok(aux_with_grad(pooled, tau_a)?.value)
}

/// Spreads a pooled gradient (`B x F`) evenly over `T` steps.
fn unpool(d: &Array2<f64>, steps: usize) -> Array3<f64> {
    let (b, f) = d.dim();
    let scaled = d / steps as f64;
    scaled
        .insert_axis(Axis(1))
        .broadcast((b, steps, f))
        .expect("broadcast over time")
        .to_owned()
}

/// Loss value and the gradient w.r.t. each projection present in the batch.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub breakdown: LossBreakdown,
    pub grads: BatchProjections,
}

/// Total objective `L_i + L_o + L_a` with disabled terms contributing zero.
pub fn loss_and_grad(batch: &BatchProjections, opts: &LossOptions) -> Result<LossGrad> {
    opts.temperatures.validate()?;
    let need = opts.terms.flows_needed();
    let have = [batch.inbound.is_some(), batch.outbound.is_some(), batch.joint.is_some()];
    for (k, name) in ["inbound", "outbound", "joint"].iter().enumerate() {
        if need[k] && !have[k] {
            return Err(Error::arg(format!("enabled loss terms need {name} projections")));
        }
    }
    let zero_like = |p: &Option<FlowPair>| p.as_ref().map(FlowPair::zeros_like);
    let mut grads = BatchProjections {
        inbound: zero_like(&batch.inbound),
        outbound: zero_like(&batch.outbound),
        joint: zero_like(&batch.joint),
    };
    let tau = opts.temperatures.tau;
    let ntxent = |fp: &FlowPair| {
        if opts.symmetric_ntxent {
            ntxent_timestep_symmetric(fp.z.view(), fp.z_tilde.view(), tau)
        } else {
            ntxent_timestep(fp.z.view(), fp.z_tilde.view(), tau)
        }
    };
    let accumulate = |g: &mut Option<FlowPair>, dz: &Array3<f64>, dzt: &Array3<f64>| {
        let g = g.as_mut().expect("gradient slot exists for every present flow");
        g.z += dz;
        g.z_tilde += dzt;
    };

    let mut l_i = 0.0;
    if opts.terms.use_li {
        let r = ntxent(batch.inbound.as_ref().unwrap())?;
        l_i = r.mean;
        accumulate(&mut grads.inbound, &r.d_z, &r.d_z_tilde);
    }
    let mut l_o = 0.0;
    if opts.terms.use_lo {
        let r = ntxent(batch.outbound.as_ref().unwrap())?;
        l_o = r.mean;
        accumulate(&mut grads.outbound, &r.d_z, &r.d_z_tilde);
    }
    let mut l_a = 0.0;
    if opts.terms.use_la {
        let pooled = PooledProjections::from_batch(batch)?;
        let g = aux_with_grad(&pooled, opts.temperatures.tau_a)?;
        l_a = g.value;
        let steps = batch.joint.as_ref().unwrap().z.shape()[1];
        accumulate(&mut grads.joint, &unpool(&g.d_joint.0, steps), &unpool(&g.d_joint.1, steps));
        accumulate(&mut grads.inbound, &unpool(&g.d_inbound.0, steps), &unpool(&g.d_inbound.1, steps));
        accumulate(&mut grads.outbound, &unpool(&g.d_outbound.0, steps), &unpool(&g.d_outbound.1, steps));
    }
    Ok(LossGrad {
        breakdown: LossBreakdown::new(l_i, l_o, l_a),
        grads,
    })
}

/// All three terms, no gradients.
pub fn total_loss(batch: &BatchProjections, temps: Temperatures) -> Result<LossBreakdown> {
    let opts = LossOptions {
        temperatures: temps,
        ..Default::default()
    };
    Ok(loss_and_grad(batch, &opts)?.breakdown)
}
