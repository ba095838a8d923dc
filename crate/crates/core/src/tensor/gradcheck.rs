use rayon::prelude::*;

use super::{Result, Tape, Tensor, TensorError, Var};

/// `|analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central differences at step `h` carry roughly `ε·|f|/h` of round-off, so a
/// coordinate whose true gradient is near that size cannot meet a pure
/// relative bound. This admits `rel` relative error plus `abs` absolute slack.
pub fn agrees(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= rel * (analytic.abs() + numeric.abs()) + abs
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Sync,
{
    let errs = finite_diff_check_many(|_tape, inputs| f(inputs[0]), std::slice::from_ref(x), h)?;
    Ok(errs[0])
}

/// Multi-input variant: returns the worst relative error per input tensor.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    Ok(finite_diff_pairs(f, inputs, h)?
        .iter()
        .map(|pairs| {
            pairs
                .iter()
                .map(|&(a, n)| relative_error(a, n))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// `(analytic, numeric)` for every coordinate of every input.
pub fn finite_diff_pairs<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<Vec<(f64, f64)>>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    if h <= 0.0 {
        return Err(TensorError::Invalid {
            op: "finite_diff_check",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&tape, &vars)?;
        let grads = tape.backward(root)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.item())
    };

    inputs
        .iter()
        .enumerate()
        .map(|(which, input)| {
            (0..input.len())
                .into_par_iter()
                .map(|coord| {
                    let numeric = (eval(which, coord, h)? - eval(which, coord, -h)?) / (2.0 * h);
                    Ok((analytic[which].data()[coord], numeric))
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A function whose tape gradient is correct passes ...
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let ok = finite_diff_check(|v| Ok(v.mul(v)?.sum()), &x, 1e-6).unwrap();
        assert!(ok < 1e-8, "{ok}");
        // ... while one that hides part of the dependence from the tape fails.
        let bad = finite_diff_check(
            |v| {
                let frozen = v.tape().constant((*v.value()).clone());
                Ok(v.mul(frozen)?.sum())
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(bad > 0.1, "{bad}");
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_check(|v| Ok(v.sum()), &x, 0.0).is_err());
    }
}
