//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Floor of the relative-error denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-5, max_coords_per_input: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input, coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let v = f(inputs)?.item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Compare the gradient of `f` w.r.t. every input against central
/// differences `(f(x+εe) − f(x−εe)) / 2ε`. Returns the largest relative
/// error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().with_requires_grad(true)).collect();
    let out = f(&leaves)?;
    let v = out.item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    out.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for (ti, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.len()]);
        if analytic.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite analytic gradient for input {ti}")));
        }
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(k) if k < leaf.len() => {
                let mut c = sample(&mut rng, leaf.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..leaf.len()).collect(),
        };
        for &ci in &coords {
            let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
            let mut shifted = leaf.to_vec();
            shifted[ci] += opts.eps;
            probe[ti] = Tensor::from_vec(shifted.clone(), leaf.shape())?;
            let plus = eval(&f, &probe)?;
            shifted[ci] -= 2.0 * opts.eps;
            probe[ti] = Tensor::from_vec(shifted, leaf.shape())?;
            let minus = eval(&f, &probe)?;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(analytic[ci], numeric);
            report.coords_checked += 1;
            if err > report.max_relative_error || report.coords_checked == 1 {
                report.max_relative_error = err;
                report.worst = (ti, ci);
                report.analytic = analytic[ci];
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let opts = GradCheckOptions { eps, ..GradCheckOptions::default() };
    grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(x), opts).map(|r| r.max_relative_error)
}
