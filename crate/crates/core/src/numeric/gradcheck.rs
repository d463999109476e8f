use crate::error::Result;

use super::array::NdArray;
use super::tape::{Tape, Var};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

const REL_FLOOR: f64 = 1e-8;

/// Check every entry of every parameter. `f` must be deterministic and
/// return a scalar node.
pub fn check_gradients<F>(f: F, params: &[NdArray<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    check_gradients_sampled(f, params, step, usize::MAX)
}

/// As [`check_gradients`], but visits at most `max_per_param` entries of each
/// parameter, evenly strided.
pub fn check_gradients_sampled<F>(
    f: F,
    params: &[NdArray<f64>],
    step: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |values: &[NdArray<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| tape.param(v.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss)?;
    let analytic: Vec<NdArray<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| NdArray::zeros(p.shape().to_vec())))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_entry: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<NdArray<f64>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let stride = p.len().div_ceil(max_per_param.max(1)).max(1);
        for i in (0..p.len()).step_by(stride) {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + step;
            let plus = eval(&work);
            work[pi].data_mut()[i] = orig - step;
            let minus = eval(&work);
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.entries_checked == 1 {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_entry = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
