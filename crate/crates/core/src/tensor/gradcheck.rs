//! Central finite-difference checks for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

fn eval<F>(f: &F, xs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    Ok(tape.value(out).item())
}

/// Numerical gradient of `f` with respect to every coordinate of `xs`.
pub fn central_differences<F>(f: &F, xs: &[Tensor], h: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = xs.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for t in 0..xs.len() {
        let mut g = Vec::with_capacity(xs[t].numel());
        for i in 0..xs[t].numel() {
            let orig = xs[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let plus = eval(f, &work)?;
            work[t].data_mut()[i] = orig - h;
            let minus = eval(f, &work)?;
            work[t].data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        out.push(g);
    }
    Ok(out)
}

/// Max over all coordinates of `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` is evaluated twice at the base point; differing results are
/// reported as a contract error since the check would be meaningless.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let first = eval(&f, xs)?;
    let second = eval(&f, xs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "grad_check target is non-deterministic ({first} vs {second})"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let numeric = central_differences(&f, xs, h)?;

    let mut worst = 0.0_f64;
    for (v, num) in vars.iter().zip(&numeric) {
        let zeros;
        let analytic = match grads.get(*v) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; num.len()];
                &zeros
            }
        };
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max((a - n).abs() / n.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vs| f(tape, vs[0]), std::slice::from_ref(x), h)
}
