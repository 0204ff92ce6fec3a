use super::{Tape, Tensor, TensorError, TensorResult, Var};

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over every scalar.
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst scalar.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub scalars: usize,
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape and one trainable leaf per entry of `params`, and
/// must return a scalar loss. It is re-run twice per scalar, so any randomness
/// inside it must be re-seeded on every call.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> TensorResult<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite("grad_check loss".into()))
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_finite() {
        return Err(TensorError::NonFinite("grad_check loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        scalars: 0,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / numeric.abs().max(1.0);
            report.scalars += 1;
            if rel > report.max_rel_error || report.scalars == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
