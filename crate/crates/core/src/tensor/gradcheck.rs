use super::{Graph, ParamSet, Tensor, Var};
use crate::error::{arg, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
}

/// Compares reverse-mode gradients of a scalar function of `params` with
/// central differences `(f(p+h) − f(p−h)) / 2h` over every coordinate.
/// Relative error is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<Fun>(params: &mut ParamSet<f64>, h: f64, mut f: Fun) -> Result<GradCheckReport>
where
    Fun: FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(arg("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    if g.value(out).numel() != 1 {
        return Err(arg(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape_of(out)
        )));
    }
    let grads = g.backward(out)?;
    let mut analytic: Vec<Tensor<f64>> = params
        .ids()
        .map(|id| Tensor::zeros(params.get(id).value.shape()))
        .collect();
    for (id, t) in grads.param_grads() {
        analytic[id.index()] = t.clone();
    }
    drop(g);

    let mut eval = |params: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, params)?;
        Ok(g.value(v).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).value.numel() {
            let orig = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + h;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[k] = orig - h;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.index()].data()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coords += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = Some((params.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
