//! Central finite-difference verification of analytic gradients.
//!
//! The relative error of one coordinate is `|a − n| / max(|a|, |n|, 1e-8)`
//! where `a` is the analytic and `n` the numerical derivative. Checks always
//! run in 64-bit mode.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

const REL_FLOOR: f64 = 1e-8;

/// Smallest step tried by [`check_leaves`] when shrinking past a kink.
pub const MIN_STEP: f64 = 1e-8;

/// Relative agreement between quotients at neighboring steps needed before
/// the coarser one is trusted.
const STEP_AGREEMENT: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of the scalar function `f` at `x`, over every
/// coordinate. Returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
{
    let probe = x.detach().into_param();
    f(&probe)?.backward()?;
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; probe.numel()]);
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let numeric = central_difference(|| f(&probe), &probe, i, step)?;
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

fn central_difference<F>(f: F, t: &Tensor<f64>, index: usize, step: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    let original = t.data()[index];
    let eval = |v: f64| -> Result<f64> {
        t.update_data(|d| d[index] = v);
        no_grad(|| f().map(|y| y.item()))
    };
    let plus = eval(original + step);
    let minus = eval(original - step);
    t.update_data(|d| d[index] = original);
    Ok((plus? - minus?) / (2.0 * step))
}

struct Quotients {
    central: f64,
    /// Forward minus backward quotient: `h f''` when smooth, a jump when a
    /// kink lies within the step.
    asymmetry: f64,
}

/// Central difference at the largest step, from `step` down by factors of
/// ten, that passes three tests against the next finer step `h / 10`:
///
/// * the finer central quotient agrees, which catches a kink between
///   `h / 10` and `h`;
/// * the asymmetry shrinks tenfold, which catches a kink inside `h / 10`
///   that both central quotients would share;
/// * roundoff at `h / 10`, about `4 ε |base| / h`, is small next to the
///   estimate.
///
/// `base` is the loss at the unperturbed point. `None` when no step down to
/// [`MIN_STEP`] passes.
fn settled_difference<F>(f: &F, t: &Tensor<f64>, index: usize, step: f64, base: f64) -> Result<Option<f64>>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    let original = t.data()[index];
    let quotients = |h: f64| -> Result<Quotients> {
        let eval = |v: f64| {
            t.update_data(|d| d[index] = v);
            no_grad(|| f().map(|y| y.item()))
        };
        let (plus, minus) = (eval(original + h), eval(original - h));
        t.update_data(|d| d[index] = original);
        let (plus, minus) = (plus?, minus?);
        Ok(Quotients {
            central: (plus - minus) / (2.0 * h),
            asymmetry: (plus + minus - 2.0 * base) / h,
        })
    };
    let roundoff = |h: f64| 4.0 * f64::EPSILON * base.abs().max(1.0) / h;
    let mut h = step;
    let mut coarse = quotients(h)?;
    while h / 10.0 >= MIN_STEP * 0.999 {
        let fine = quotients(h / 10.0)?;
        let size = coarse.central.abs();
        let resolvable = roundoff(h / 10.0) <= STEP_AGREEMENT * size;
        let central_agrees = (coarse.central - fine.central).abs() <= 2.0 * STEP_AGREEMENT * size;
        let scales = (coarse.asymmetry - 10.0 * fine.asymmetry).abs() <= 20.0 * STEP_AGREEMENT * size;
        if resolvable && central_agrees && scales {
            return Ok(Some(coarse.central));
        }
        h /= 10.0;
        coarse = fine;
    }
    Ok(None)
}

/// Result of checking one named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Coordinates whose numerical derivative settled and was compared.
    pub coords_checked: usize,
    /// Coordinates skipped because no step size gave a settled estimate.
    pub unsettled: usize,
    pub max_rel_error: f64,
}

/// Checks the gradient of a scalar loss with respect to existing leaf
/// tensors, perturbing them in place.
///
/// Tensors with at most `max_coords` elements are checked exhaustively.
/// Larger ones are checked at the coordinate of largest analytic magnitude
/// plus coordinates drawn from `rng` until `max_coords` have settled, trying
/// at most `4 * max_coords`. The step starts at `step` and shrinks per
/// coordinate while the estimate is unsettled.
pub fn check_leaves<F>(
    loss_fn: F,
    params: &[(String, Tensor<f64>)],
    step: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<Vec<ParamCheck>>
where
    F: Fn() -> Result<Tensor<f64>>,
{
    for (_, p) in params {
        p.zero_grad();
    }
    let base = no_grad(&loss_fn)?.item();
    loss_fn()?.backward()?;
    let mut report = Vec::with_capacity(params.len());
    for (name, p) in params {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let candidates: Vec<usize> = if p.numel() <= max_coords {
            (0..p.numel()).collect()
        } else {
            let largest = analytic
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let tries = max_coords.saturating_mul(4).min(p.numel());
            let mut picked = vec![largest];
            picked.extend(sample(rng, p.numel(), tries).into_iter().filter(|&i| i != largest).take(tries - 1));
            picked
        };
        let (mut checked, mut unsettled, mut worst) = (0, 0, 0.0f64);
        for &i in &candidates {
            if checked == max_coords {
                break;
            }
            match settled_difference(&loss_fn, p, i, step, base)? {
                Some(numeric) => {
                    worst = worst.max(relative_error(analytic[i], numeric));
                    checked += 1;
                }
                None => unsettled += 1,
            }
        }
        report.push(ParamCheck {
            name: name.clone(),
            coords_checked: checked,
            unsettled,
            max_rel_error: worst,
        });
        p.zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::fault;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_function_is_exact() {
        let err = grad_check(|x| Ok(x.sum()), &random(&[3, 4], 1), DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn gelu_sum_passes() {
        let err = grad_check(|x| Ok(x.gelu().sum()), &random(&[10], 2), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let x = random(&[6], 3);
        let err = fault::with_fault("gelu", || grad_check(|x| Ok(x.gelu().sum()), &x, 1e-5)).unwrap();
        assert!(err > 1e-2, "{err}");
        assert!(fault::armed().is_none());
    }

    #[test]
    fn check_leaves_samples_large_tensors() {
        let w = random(&[50], 4).into_param();
        let params = vec![("w".to_string(), w.clone())];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let report = check_leaves(|| Ok(w.mul(&w)?.sum()), &params, 1e-5, 6, &mut rng).unwrap();
        assert_eq!(report[0].coords_checked, 6);
        assert_eq!(report[0].unsettled, 0);
        assert!(report[0].max_rel_error < 1e-8);
        // data restored after perturbation
        assert_eq!(w.to_vec(), random(&[50], 4).to_vec());
    }

    #[test]
    fn kinks_inside_every_step_are_unsettled() {
        // ReLU a hair above its kink: every step straddles it and the
        // quotients drift from 0.5 toward 0.65 as the step shrinks.
        let x = Tensor::<f64>::from_vec(vec![3e-9], &[1]).unwrap().into_param();
        let params = vec![("x".to_string(), x.clone())];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let report = check_leaves(|| Ok(x.relu().sum()), &params, 1e-4, 1, &mut rng).unwrap();
        assert_eq!(report[0].coords_checked, 0);
        assert_eq!(report[0].unsettled, 1);
    }
}
