use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Denominator floor of the relative error, so that gradients that are
/// essentially zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    /// Indices of parameters whose error reaches the tolerance.
    pub fn failures(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| !(p.max_rel_err < self.tolerance))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences `(f(w + h) - f(w - h)) / 2h`, one entry at a time.
pub fn check_gradients<T, F>(
    f: F,
    params: &[Tensor<T>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let graph = Graph::new();
    let vars: Vec<_> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let g = Graph::new();
        let vs: Vec<_> = ps.iter().map(|p| g.constant(p.clone())).collect();
        Ok(f(&g, &vs)?.item().as_f64())
    };

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for k in 0..a.len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = T::lit(orig.as_f64() + step);
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = T::lit(orig.as_f64() - step);
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let an = a.data()[k].as_f64();
            let rel = relative_error(an, numeric);
            check.max_abs_err = check.max_abs_err.max((an - numeric).abs());
            // NaN must register as a failure
            if rel > check.max_rel_err || rel.is_nan() {
                check.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                check.worst_index = k;
            }
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance,
    })
}
