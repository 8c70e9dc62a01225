//! Central finite-difference checks against [`Graph::backward`].

use crate::{Graph, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients from
/// dominating the relative error.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the scalar built by `loss` with central
/// differences for the given `(param, flat index)` entries.
pub fn check<F, E>(
    params: &ParamStore,
    entries: &[(ParamId, usize)],
    eps: f64,
    loss: F,
) -> std::result::Result<Report, E>
where
    F: Fn(&mut Graph) -> std::result::Result<Var, E>,
    E: From<crate::Error>,
{
    let grads = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        g.backward(l)?
    };
    let eval = |ps: &ParamStore| -> std::result::Result<f64, E> {
        let mut g = Graph::new(ps);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };
    let mut work = params.clone();
    let mut report = Report::default();
    for &(id, idx) in entries {
        let orig = work.get(id).data()[idx];
        work.get_mut(id).data_mut()[idx] = orig + eps;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig - eps;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[idx]);
        let err = rel_err(analytic, numeric, 1e-6);
        report.checked += 1;
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(Mismatch {
                param: params.name(id).to_string(),
                index: idx,
                analytic,
                numeric,
                rel_err: err,
            });
        }
    }
    Ok(report)
}

/// Picks `per_param` evenly spaced entries from every parameter whose name
/// starts with `prefix`.
pub fn sample_entries(params: &ParamStore, prefix: &str, per_param: usize) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in params.ids() {
        if !params.name(id).starts_with(prefix) {
            continue;
        }
        let n = params.get(id).len();
        let k = per_param.min(n);
        for j in 0..k {
            out.push((id, j * n / k + (n / k) / 2));
        }
    }
    out
}
