//! Direct transcription of the objective: explicit loops, explicit `exp`, no
//! log-sum-exp, no shared code with [`crate::objectives`].

use ndarray::ArrayView3;

use crate::error::{Error, Result};
use crate::objectives::{total_loss, BatchProjections, FlowPair, LossBreakdown, Temperatures};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8))
}

/// `-log exp(s(a_n,c_n)/t) / (sum_{m!=n} exp(s(a_n,a_m)/t) + sum_m exp(s(a_n,c_m)/t))`
fn row_loss(a: &[Vec<f64>], c: &[Vec<f64>], n: usize, t: f64) -> f64 {
    let mut denom = 0.0;
    for m in 0..a.len() {
        if m != n {
            denom += (cos(&a[n], &a[m]) / t).exp();
        }
    }
    for m in 0..c.len() {
        denom += (cos(&a[n], &c[m]) / t).exp();
    }
    let num = (cos(&a[n], &c[n]) / t).exp();
    -(num / denom).ln()
}

fn rows_at(z: ArrayView3<f64>, step: usize) -> Vec<Vec<f64>> {
    (0..z.shape()[0]).map(|n| (0..z.shape()[2]).map(|f| z[[n, step, f]]).collect()).collect()
}

fn pooled(z: ArrayView3<f64>) -> Vec<Vec<f64>> {
    let (b, t, f) = z.dim();
    let mut out = vec![vec![0.0; f]; b];
    for n in 0..b {
        for s in 0..t {
            for k in 0..f {
                out[n][k] += z[[n, s, k]];
            }
        }
        for v in out[n].iter_mut() {
            *v /= t as f64;
        }
    }
    out
}

fn ntxent(fp: &FlowPair, tau: f64) -> f64 {
    let (b, t, _) = fp.z.dim();
    let mut total = 0.0;
    for step in 0..t {
        let z = rows_at(fp.z.view(), step);
        let zt = rows_at(fp.z_tilde.view(), step);
        for n in 0..b {
            total += row_loss(&z, &zt, n, tau);
        }
    }
    total / (b * t) as f64
}

fn aux(joint: &FlowPair, other: &FlowPair, tau_a: f64) -> f64 {
    let (ja, jb) = (pooled(joint.z.view()), pooled(joint.z_tilde.view()));
    let (oa, ob) = (pooled(other.z.view()), pooled(other.z_tilde.view()));
    let b = ja.len();
    let mut total = 0.0;
    for n in 0..b {
        total += row_loss(&ja, &oa, n, tau_a) + row_loss(&jb, &ob, n, tau_a);
    }
    total / b as f64
}

/// Reference value of all three loss terms.
pub fn oracle_total_loss(batch: &BatchProjections, temps: Temperatures) -> Result<LossBreakdown> {
    let need = |p: &Option<FlowPair>, name: &str| {
        p.clone().ok_or_else(|| Error::arg(format!("oracle needs {name} projections")))
    };
    let (i, o, io) = (need(&batch.inbound, "inbound")?, need(&batch.outbound, "outbound")?, need(&batch.joint, "joint")?);
    if i.z.shape()[0] < 2 {
        return Err(Error::arg("oracle needs a batch of at least two"));
    }
    let l_i = ntxent(&i, temps.tau);
    let l_o = ntxent(&o, temps.tau);
    let l_a = aux(&io, &i, temps.tau_a) + aux(&io, &o, temps.tau_a);
    Ok(LossBreakdown::new(l_i, l_o, l_a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub fast: LossBreakdown,
    pub oracle: LossBreakdown,
    /// `|fast - oracle| / max(1, |oracle|)`, largest over the four fields.
    pub max_rel_error: f64,
}

/// Compares the vectorized objective against the loop oracle.
pub fn verify_against_oracle(batch: &BatchProjections, temps: Temperatures) -> Result<OracleReport> {
    let fast = total_loss(batch, temps)?;
    let oracle = oracle_total_loss(batch, temps)?;
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1.0);
    let max_rel_error = [
        rel(fast.l_i, oracle.l_i),
        rel(fast.l_o, oracle.l_o),
        rel(fast.l_a, oracle.l_a),
        rel(fast.total, oracle.total),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(OracleReport { fast, oracle, max_rel_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::aux_pair_loss;
    use ndarray::{Array2, ArrayView2, Array3};
    use rand::Rng;

    fn oracle_pair(a: ArrayView2<f64>, c: ArrayView2<f64>, tau: f64) -> Vec<f64> {
        let rows = |x: ArrayView2<f64>| x.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let (ra, rc) = (rows(a), rows(c));
        (0..ra.len()).map(|n| row_loss(&ra, &rc, n, tau)).collect()
    }

    fn random_pair(b: usize, t: usize, f: usize, seed: u64) -> FlowPair {
        let mut r = crate::rng::stream(seed, &[77]);
        let mut gen = || Array3::from_shape_simple_fn((b, t, f), || r.random_range(-1.0..1.0));
        FlowPair { z: gen(), z_tilde: gen() }
    }

    #[test]
    fn fast_objective_matches_loops() {
        for (seed, b) in [(1u64, 2usize), (2, 4), (3, 7)] {
            let batch = BatchProjections {
                inbound: Some(random_pair(b, 5, 6, seed)),
                outbound: Some(random_pair(b, 5, 6, seed + 100)),
                joint: Some(random_pair(b, 5, 6, seed + 200)),
            };
            let r = verify_against_oracle(&batch, Temperatures::default()).unwrap();
            assert!(r.max_rel_error < 1e-10, "{r:?}");
        }
    }

    #[test]
    fn pair_kernel_matches() {
        let mut r = crate::rng::stream(5, &[]);
        let a = Array2::from_shape_simple_fn((5, 4), || r.random_range(-1.0..1.0));
        let c = Array2::from_shape_simple_fn((5, 4), || r.random_range(-1.0..1.0));
        let fast = aux_pair_loss(a.view(), c.view(), 0.1).unwrap();
        for (x, y) in fast.iter().zip(oracle_pair(a.view(), c.view(), 0.1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn one_hot(b: usize, f: usize) -> Array3<f64> {
        Array3::from_shape_fn((b, 1, f), |(n, _, k)| if n == k { 1.0 } else { 0.0 })
    }

    #[test]
    fn orthonormal_hand_case() {
        // Two orthogonal anchors, each identical to its positive.
        let fp = FlowPair { z: one_hot(2, 2), z_tilde: one_hot(2, 2) };
        let batch = BatchProjections { inbound: Some(fp.clone()), outbound: Some(fp.clone()), joint: Some(fp) };
        let want = (std::f64::consts::E + 2.0).ln() - 1.0;
        let r = oracle_total_loss(&batch, Temperatures::default()).unwrap();
        assert!((r.l_i - want).abs() < 1e-12 && (r.l_o - want).abs() < 1e-12);
        assert!((want - 0.551444).abs() < 1e-6);
    }

    #[test]
    fn scaling_one_embedding_changes_nothing() {
        let batch = BatchProjections {
            inbound: Some(random_pair(4, 3, 5, 8)),
            outbound: Some(random_pair(4, 3, 5, 9)),
            joint: Some(random_pair(4, 3, 5, 10)),
        };
        let base = oracle_total_loss(&batch, Temperatures::default()).unwrap();
        let mut scaled = batch.clone();
        scaled.inbound.as_mut().unwrap().z.slice_mut(ndarray::s![1, 2, ..]).mapv_inplace(|v| 3.0 * v);
        let after = oracle_total_loss(&scaled, Temperatures::default()).unwrap();
        assert!((base.l_i - after.l_i).abs() < 1e-9);
        assert!((base.l_o - after.l_o).abs() < 1e-9);
    }

    #[test]
    fn missing_flow_rejected() {
        let batch = BatchProjections { inbound: Some(random_pair(2, 1, 2, 0)), ..Default::default() };
        assert!(oracle_total_loss(&batch, Temperatures::default()).is_err());
    }
}
