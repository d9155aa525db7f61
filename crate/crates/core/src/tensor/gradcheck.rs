use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Skip elements whose one-sided differences disagree by more than this
    /// relative amount: a kink (sort-order change, relu hinge) lies within
    /// one step and the central difference is meaningless there.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            kink_tolerance: None,
        }
    }
}

/// Worst relative error between reverse-mode gradients of `f` and central
/// finite differences, over every element of every input.
///
/// `f` builds a scalar from the inputs bound as gradient-collecting leaves.
/// It runs in `f64`, on the same op implementations models use in `f32`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(f, inputs, GradCheckOptions::default())
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.scalar(out);
    g.backward(out)?;
    let analytic = g.grads_of(&vars);

    let h = opts.step;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[e] = orig - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            if let Some(tol) = opts.kink_tolerance {
                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                if rel_error(fwd, bwd) > tol && (fwd - bwd).abs() > 1e-6 {
                    continue;
                }
            }
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_error(analytic[ti][e], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let c = g.constant(&[], vec![4.0])?;
                let z = g.scale(v[0], 0.0)?;
                let s = g.sum(z)?;
                g.add(s, c)
            },
            &[x],
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mse_matches_finite_differences() {
        let a = Tensor::new(&[4], vec![0.3, -1.2, 1.7, 0.1]).unwrap();
        let b = Tensor::new(&[4], vec![-0.5, 0.4, 1.1, -1.9]).unwrap();
        let err = grad_check(|g, v| g.mse(v[0], v[1]), &[a, b]).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
