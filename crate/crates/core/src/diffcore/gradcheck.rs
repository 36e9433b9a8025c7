//! Central finite-difference verification of reverse-mode gradients.

use super::{DiffError, Graph, ParamSet, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Check at most this many entries per tensor, chosen at random; `None` checks all.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: 1e-5, max_per_tensor: None, seed: 0, floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval<F>(params: &ParamSet, f: &F) -> Result<f64, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, DiffError>,
{
    let mut g = Graph::new(params);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compares the gradient of the scalar built by `f` against central differences.
pub fn gradcheck<F>(params: &mut ParamSet, f: F, opts: GradCheckOptions) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, DiffError>,
{
    gradcheck_where(params, f, opts, |_| true)
}

/// Like [`gradcheck`], restricted to parameters whose name passes `select`.
///
/// Needed when `f` detaches part of the graph: the analytic gradient through
/// a detached input is zero by construction while finite differences are not.
pub fn gradcheck_where<F, S>(
    params: &mut ParamSet,
    f: F,
    opts: GradCheckOptions,
    select: S,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, DiffError>,
    S: Fn(&str) -> bool,
{
    let analytic = {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), worst_index: 0, checked: 0 };
    let ids: Vec<_> = params.ids().filter(|&id| select(params.name(id))).collect();
    for id in ids {
        let n = params.get(id).len();
        let entries: Vec<usize> = match opts.max_per_tensor {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in entries {
            let orig = params.get(id).data[i];
            params.get_mut(id).data[i] = orig + opts.h;
            let plus = eval(params, &f)?;
            params.get_mut(id).data[i] = orig - opts.h;
            let minus = eval(params, &f)?;
            params.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = analytic.get(id).data[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst_param = params.name(id).to_string();
                    report.worst_index = i;
                }
            }
        }
    }
    Ok(report)
}
