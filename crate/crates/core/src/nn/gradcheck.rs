//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Bound, Graph, Var};
use super::params::ParamSet;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-tensor norm-wise relative error `|a - n| / max(|a|, |n|)`.
    pub max_rel_err: f64,
    pub worst: String,
    /// Relative error over all trainable entries taken as one vector.
    pub global_rel_err: f64,
    pub checked: usize,
}

/// Compare analytic gradients of the scalar built by `f` against central
/// differences with step `eps`. Tensors whose analytic and numeric gradients
/// are both below `1e-12` in norm count as matching.
pub fn gradcheck<F>(params: &ParamSet<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = g.bind(params);
    let loss = f(&mut g, &bound)?;
    let grads = g.backward(loss)?;
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::no_grad();
        let b = g.bind(ps);
        let l = f(&mut g, &b)?;
        Ok(g.value(l).item())
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        global_rel_err: 0.0,
        checked: 0,
    };
    let (mut diff_all, mut a_all, mut n_all) = (0.0, 0.0, 0.0);
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let analytic = grads.named()[&name].clone();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, num) in numeric.iter_mut().enumerate() {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + eps;
            let lp = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - eps;
            let lm = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            *num = (lp - lm) / (2.0 * eps);
        }
        let (mut d, mut na, mut nn) = (0.0, 0.0, 0.0);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            d += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
        diff_all += d;
        a_all += na;
        n_all += nn;
        report.checked += numeric.len();
        let scale = na.sqrt().max(nn.sqrt());
        let rel = if scale < 1e-12 { 0.0 } else { d.sqrt() / scale };
        if rel >= report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = name.clone();
        }
    }
    let scale = a_all.sqrt().max(n_all.sqrt());
    report.global_rel_err = if scale < 1e-12 { 0.0 } else { diff_all.sqrt() / scale };
    Ok(report)
}
