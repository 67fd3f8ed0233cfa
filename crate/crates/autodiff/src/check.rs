//! Finite-difference gradient checking.
//!
//! A function under test maps input variables to an output of any shape. It is
//! reduced to a scalar by a fixed, uneven weighting of the output entries so
//! that errors cannot cancel between symmetric positions.

pub mod catalog;

use ndarray::ArrayD;

use crate::error::Result;
use crate::tape::{grad, Array, Tape, Var};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; keeps all-zero gradients comparable.
const NORM_FLOOR: f64 = 1e-7;

fn projection(shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|i| 0.5 + ((i * 7919 + 13) % 101) as f64 / 101.0)
        .collect();
    ArrayD::from_shape_vec(shape.to_vec(), w).unwrap()
}

fn project(out: &Var) -> Result<Var> {
    let w = out.tape().constant(projection(&out.shape()));
    Ok(out.mul(&w)?.sum())
}

fn evaluate<F>(f: &F, inputs: &[Array]) -> Result<f64>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    Ok(project(&f(&vars)?)?.item())
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().cloned())
        .max(norm(&mut b.iter().cloned()))
        .max(NORM_FLOOR);
    diff / scale
}

/// Central-difference gradient of the projected output of `f`.
pub fn numeric_gradient<F>(f: &F, inputs: &[Array], h: f64) -> Result<Vec<Array>>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let mut work: Vec<Array> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = ArrayD::zeros(inputs[k].raw_dim());
        for i in 0..inputs[k].len() {
            let orig = work[k].as_slice().unwrap()[i];
            work[k].as_slice_mut().unwrap()[i] = orig + h;
            let plus = evaluate(f, &work)?;
            work[k].as_slice_mut().unwrap()[i] = orig - h;
            let minus = evaluate(f, &work)?;
            work[k].as_slice_mut().unwrap()[i] = orig;
            g.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Reverse-mode gradient of the projected output of `f`.
pub fn analytic_gradient<F>(f: &F, inputs: &[Array]) -> Result<Vec<Array>>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.var(a.clone())).collect();
    let loss = project(&f(&vars)?)?;
    Ok(grad(&loss, &vars, false)?
        .iter()
        .map(|g| (*g.value()).clone())
        .collect())
}

/// Largest relative error over the inputs between reverse-mode and
/// central-difference gradients.
pub fn gradcheck<F>(f: F, inputs: &[Array], h: f64) -> Result<f64>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, inputs)?;
    let numeric = numeric_gradient(&f, inputs, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.as_slice().unwrap(), n.as_slice().unwrap()))
        .fold(0.0, f64::max))
}

/// Checks the backward pass of `f` itself: the projected gradients of `f`,
/// computed with a recorded graph, are differentiated again and compared with
/// finite differences.
pub fn gradcheck_second_order<F>(f: F, inputs: &[Array], h: f64) -> Result<f64>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let through_gradient = |vars: &[Var]| -> Result<Var> {
        let loss = project(&f(vars)?)?;
        let grads = grad(&loss, vars, true)?;
        let mut total: Option<Var> = None;
        for g in &grads {
            // a different weighting than the first projection
            let w = g.tape().constant(projection(&g.shape()).mapv(|v| 2.0 - v));
            let term = g.mul(&w)?.sum();
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        Ok(total.expect("at least one input"))
    };
    gradcheck(through_gradient, inputs, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn relative_error_of_identical_vectors_is_zero() {
        assert_eq!(relative_error(&[1.0, -2.0], &[1.0, -2.0]), 0.0);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // detaching hides the dependence from reverse mode but not from finite differences
        let err = gradcheck(|v| Ok(v[0].detach().square()), &[arr1(&[1.5]).into_dyn()], STEP).unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn square_passes() {
        let err = gradcheck(|v| Ok(v[0].square()), &[arr1(&[1.5, -0.3]).into_dyn()], STEP).unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
