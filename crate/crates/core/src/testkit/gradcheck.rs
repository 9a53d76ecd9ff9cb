use crate::augment::ViewPair;
use crate::encoder::{forward_trio, MobiClrModel};
use crate::error::Result;
use crate::objectives::{loss_and_grad, LossOptions};

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], step: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|k| {
            let orig = p[k];
            p[k] = orig + step;
            let up = f(&p);
            p[k] = orig - step;
            let down = f(&p);
            p[k] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Compares two flat gradients entry by entry.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck { checked: analytic.len(), max_rel_error: 0.0, worst: None };
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_error(a, n);
        if e > out.max_rel_error || out.worst.is_none() {
            out.max_rel_error = out.max_rel_error.max(e);
            out.worst = Some((String::new(), k, a, n));
        }
    }
    out
}

/// Checks every parameter of `model` against central differences of the
/// total loss on fixed `views`.
pub fn model_gradient_check(model: &mut MobiClrModel<f64>, views: &[ViewPair], opts: &LossOptions, step: f64) -> Result<GradCheck> {
    let needed = opts.terms.flows_needed();
    let fwd = forward_trio(views, model, needed)?;
    let lg = loss_and_grad(&fwd.projections(), opts)?;
    let mut g = model.zeros_like();
    fwd.backward(model, &lg.grads, &mut g);
    let names: Vec<String> = g.params().iter().map(|p| p.name.clone()).collect();
    let analytic: Vec<Vec<f64>> = g.params().iter().map(|p| p.data.to_vec()).collect();

    let mut report = GradCheck { checked: 0, max_rel_error: 0.0, worst: None };
    for (t, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = model.params_mut()[t][k];
            let mut eval = |v: f64| -> Result<f64> {
                model.params_mut()[t][k] = v;
                let fwd = forward_trio(views, model, needed)?;
                Ok(loss_and_grad(&fwd.projections(), opts)?.breakdown.total)
            };
            let up = eval(orig + step)?;
            let down = eval(orig - step)?;
            model.params_mut()[t][k] = orig;
            let n = (up - down) / (2.0 * step);
            let e = rel_error(a, n);
            report.checked += 1;
            if report.worst.is_none() || e > report.max_rel_error {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((names[t].clone(), k, a, n));
            }
        }
    }
    Ok(report)
}
