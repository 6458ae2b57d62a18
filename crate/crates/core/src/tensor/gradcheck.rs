use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference step used unless a caller asks otherwise.
pub const DEFAULT_STEP: f64 = 1e-5;
const MIN_STEP: f64 = 1e-6;
const MAX_STEP: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

/// Outcome of comparing a tape gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Checks the tape gradient of `f` at `x` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
///
/// `f` receives a fresh tape and `x` registered as a trainable leaf, and must
/// return a single-element variable.
pub fn finite_diff_check<F>(x: &Tensor, h: f64, f: F) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_with(x, h, f, |_| {})
}

/// Like [`finite_diff_check`], with a hook that may tamper with the analytic
/// gradient before comparison. Used to exercise failure reporting.
pub(crate) fn check_with<F>(
    x: &Tensor,
    h: f64,
    f: F,
    tamper: impl FnOnce(&mut Tensor),
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(MIN_STEP..=MAX_STEP).contains(&h) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {h} outside [{MIN_STEP}, {MAX_STEP}]"
        )));
    }
    let mut analytic = {
        let tape = Tape::new();
        let leaf = tape.param(x);
        let root = f(&tape, leaf)?;
        tape.backward(root)?.wrt(&leaf)
    };
    tamper(&mut analytic);

    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.constant(probe);
        Ok(f(&tape, leaf)?.item())
    };
    let mut probe = x.clone();
    let mut numeric = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (plus - minus) / (2.0 * h);
    }

    let (worst_index, max_rel_error) = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::scalar(3.0);
        let r = finite_diff_check(&x, DEFAULT_STEP, |_, v| v.hadamard(&v)).unwrap();
        assert_eq!(r.analytic.item(), 6.0);
        assert!((r.numeric.item() - 6.0).abs() < 1e-9);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::ones(&[3]);
        let r = finite_diff_check(&x, DEFAULT_STEP, |t, _| Ok(t.constant(&Tensor::scalar(4.0))))
            .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.analytic, Tensor::zeros(&[3]));
    }

    #[test]
    fn sigmoid_sum_on_random_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[8], 2.0, &mut rng);
        let r = finite_diff_check(&x, DEFAULT_STEP, |_, v| v.sigmoid()?.sum_all()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(&x, 1e-2, |_, v| Ok(v)).is_err());
    }

    #[test]
    fn tampering_is_detected() {
        let x = Tensor::scalar(1.0);
        let r = check_with(&x, DEFAULT_STEP, |_, v| v.hadamard(&v), |g| {
            g.data_mut()[0] *= 1.01
        })
        .unwrap();
        assert!(r.max_rel_error > 1e-3);
    }
}
