use super::{Tape, Tensor, Var};
use crate::Result;

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|g_fd - g_ad| / max(floor, |g_fd| + |g_ad|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates skipped because the perturbation straddles a kink
    /// (relu at 0, a max switching its argmax, `|x|` at 0, ...).
    pub skipped: usize,
}

/// Relative disagreement between the two one-sided slopes above which a
/// coordinate is treated as sitting on a non-differentiable point.
const KINK_TOLERANCE: f64 = 1e-3;

/// Checks the tape gradient of the scalar function `f` at `x` against
/// central differences with step `eps`. Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_report(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_rel_error)
}

/// Multi-input gradient check over every coordinate of every input.
pub fn grad_check_report<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_floor(f, inputs, eps, 1e-8)
}

/// [`grad_check_report`] with the relative-error denominator bounded below
/// by `floor`, so gradients that vanish up to rounding are compared in
/// absolute terms.
pub fn grad_check_with_floor<F>(f: F, inputs: &[Tensor], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).item();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(v)).collect();

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (ti, g_ad) in analytic.iter().enumerate() {
        for i in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = orig - eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = orig;

            let right = (fp - f0) / eps;
            let left = (f0 - fm) / eps;
            if (right - left).abs() > KINK_TOLERANCE * (1.0 + right.abs() + left.abs()) {
                report.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * eps);
            let ad = g_ad.data()[i];
            let rel = (fd - ad).abs() / (fd.abs() + ad.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
