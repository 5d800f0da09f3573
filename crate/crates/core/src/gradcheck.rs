//! Central finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamStore;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err <= self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn format_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .params
            .iter()
            .map(|p| p.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        out.push_str(&format!(
            "{:<width$}  {:>8}  {:>12}  {:>14}  {:>14}  status\n",
            "name", "coords", "max_rel_err", "analytic", "numeric"
        ));
        for p in &self.params {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>12.3e}  {:>14.6e}  {:>14.6e}  {}\n",
                p.name,
                p.coords,
                p.max_rel_err,
                p.worst_analytic,
                p.worst_numeric,
                if p.max_rel_err <= self.tol { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

/// Checks every coordinate of every parameter in `store` against central
/// finite differences of `loss_fn`.
///
/// `loss_fn(store, with_grads)` must return the (deterministic) loss; when
/// `with_grads` is true it must also accumulate analytic gradients into the
/// store. Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-6).
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    assert!(h > 0.0, "step must be positive");
    store.zero_grads();
    let base = loss_fn(store, true)?;
    if !base.is_finite() {
        return Err(Error::numerical(format!("loss is not finite: {base}")));
    }

    let analytic: Vec<(String, Matrix)> = store
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone()))
        .collect();

    let mut params = Vec::with_capacity(analytic.len());
    for (name, grads) in &analytic {
        let mut check = ParamCheck {
            name: name.clone(),
            coords: grads.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for i in 0..grads.len() {
            store.perturb(name, i, h);
            let up = loss_fn(store, false)?;
            store.perturb(name, i, -2.0 * h);
            let down = loss_fn(store, false)?;
            store.perturb(name, i, h);
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::numerical(format!(
                    "perturbed loss not finite at {name}[{i}]"
                )));
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grads.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_coord = i;
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { h, tol, params })
}
