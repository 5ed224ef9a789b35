//! Central finite-difference gradient checking.
//!
//! The scalar under test is `Σ out ⊙ R` for a fixed random projection `R`, so
//! any tensor-valued tape function can be checked against its backward rule.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::SeqTensor;
use rand::Rng;

pub const STEP: f64 = 1e-5;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both are negligible.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

/// Returns the worst relative error over all inputs.
pub fn check<F, R>(inputs: &[SeqTensor], f: F, rng: &mut R) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |xs: &[SeqTensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let proj = SeqTensor::randn(tape.value(out).shape(), rng);
    let grads = tape.backward(out, proj.clone())?;
    let objective = |xs: &[SeqTensor]| -> Result<f64> {
        let (tape, _, out) = eval(xs)?;
        Ok(tape.value(out).dot(&proj))
    };

    let mut worst: f64 = 0.0;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        let mut xs = inputs.to_vec();
        for j in 0..inputs[i].len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = objective(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = objective(&xs)?;
            xs[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
