//! Finite-difference verification of graph gradients.

use super::graph::{Graph, Var};
use super::tensor::{ParamSet, Scalar};
use crate::error::Result;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(param name, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, 1e-3)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks up to `max_entries` parameter entries, spread evenly across all
/// trainable parameters. `forward` builds the graph and returns the scalar loss.
pub fn check<S, F>(params: &mut ParamSet<S>, h: f64, max_entries: usize, mut forward: F) -> Result<GradCheck>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &ParamSet<S>) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let loss = forward(&mut g, params)?;
    g.backward(loss)?;
    g.accumulate_into(params);

    let mut coords = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        if p.trainable {
            coords.extend((0..p.value.len()).map(|j| (pi, j)));
        }
    }
    let stride = (coords.len() / max_entries.max(1)).max(1);
    let picked: Vec<(usize, usize)> = coords.into_iter().step_by(stride).take(max_entries).collect();

    let eval = |params: &ParamSet<S>, forward: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let loss = forward(&mut g, params)?;
        Ok(g.value(loss).item().f64())
    };

    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (pi, j) in picked {
        let id = super::tensor::ParamId(pi);
        let analytic = params.get(id).grad.data()[j].f64();
        let orig = params.get(id).value.data()[j];
        params.get_mut(id).value.data_mut()[j] = S::of(orig.f64() + h);
        let up = eval(params, &mut forward)?;
        params.get_mut(id).value.data_mut()[j] = S::of(orig.f64() - h);
        let down = eval(params, &mut forward)?;
        params.get_mut(id).value.data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((params.get(id).name.clone(), j, analytic, numeric));
        }
    }
    Ok(report)
}
