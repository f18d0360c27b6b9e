//! Central-difference verification of tape gradients.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Checks the gradient of scalar `f` at `point`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` where `numeric`
/// is the central difference with step `h`.
pub fn gradcheck<R, F>(f: F, point: &Tensor<R>, h: f64) -> Result<GradcheckReport>
where
    R: Real,
    F: for<'t> Fn(&'t Tape<R>, Var<'t, R>) -> Result<Var<'t, R>>,
{
    gradcheck_many(
        |tape: &Tape<R>, vars: &[Var<'_, R>]| f(tape, vars[0]),
        std::slice::from_ref(point),
        h,
    )
}

/// [`gradcheck`] over several inputs at once.
pub fn gradcheck_many<R, F>(f: F, points: &[Tensor<R>], h: f64) -> Result<GradcheckReport>
where
    R: Real,
    F: for<'t> Fn(&'t Tape<R>, &[Var<'t, R>]) -> Result<Var<'t, R>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = points.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<R>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |inputs: &[Tensor<R>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.value().item().f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("gradcheck objective".into()))
        }
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor<R>> = points.to_vec();
    for (pi, point) in points.iter().enumerate() {
        for i in 0..point.numel() {
            let x0 = point.data()[i];
            // Differences are taken over the actually representable step.
            let plus = R::of(x0.f64() + h);
            let minus = R::of(x0.f64() - h);
            work[pi].data_mut()[i] = plus;
            let fp = eval(&work)?;
            work[pi].data_mut()[i] = minus;
            let fm = eval(&work)?;
            work[pi].data_mut()[i] = x0;
            let numeric = (fp - fm) / (plus.f64() - minus.f64());
            let a = analytic[pi].data()[i].f64();
            if !a.is_finite() {
                return Err(Error::NonFinite("analytic gradient".into()));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::<f64>::randn([7], 1.0, &mut rng);
        let r = gradcheck(|_, x| Ok(x.square().sum()), &p, 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = Tensor::<f64>::randn([6], 1.0, &mut rng);
        let r = gradcheck(
            |tape, x| {
                let v = x.value().map(|a| a * a);
                // true derivative is 2a; report 3a
                let y = tape.custom(x, v, |input, g| {
                    Tensor::from_fn(input.shape(), |i| 3.0 * input.data()[i] * g.data()[i])
                });
                Ok(y.sum())
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-1, "{r:?}");
    }
}
