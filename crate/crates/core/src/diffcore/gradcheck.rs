use super::tape::{Bindings, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of `build` at `x` with central differences.
///
/// `build` records a scalar function of the input node it is handed. The
/// returned value is the largest per-coordinate error, measured relative to
/// `max(|analytic|, |numeric|, 1e-7 · max(1, ‖analytic‖∞))` so that
/// coordinates whose true gradient is zero are judged against the scale of
/// the whole gradient rather than against round-off.
pub fn check_gradient<F>(build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    let mut tape = Tape::new();
    let input = tape.input("x");
    let out = build(&mut tape, input);
    let mut bind = Bindings::new();
    bind.insert("x".into(), x.clone());
    tape.evaluate(&bind, out)?;
    let analytic = tape.gradient(out, &["x"])?.remove("x").expect("requested");

    let mut eval_at = |v: Tensor| -> Result<f64> {
        bind.insert("x".into(), v);
        let y = tape.evaluate(&bind, out)?.item();
        if !y.is_finite() {
            return Err(Error::Numeric { index: 0, what: "function value is not finite".into() });
        }
        Ok(y)
    };

    let scale = 1e-7 * analytic.max_abs().max(1.0);
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.values_mut()[i] += h;
        let mut minus = x.clone();
        minus.values_mut()[i] -= h;
        let numeric = (eval_at(plus)? - eval_at(minus)?) / (2.0 * h);
        let a = analytic.values()[i];
        let diff = (a - numeric).abs();
        if diff == 0.0 {
            continue;
        }
        let denom = a.abs().max(numeric.abs()).max(scale);
        worst = worst.max(diff / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Unary;

    #[test]
    fn cubic() {
        let err = check_gradient(
            |t, x| {
                let sq = t.square(x);
                let cube = t.mul(sq, x);
                t.sum(cube)
            },
            &Tensor::scalar(2.0),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = check_gradient(
            |t, x| {
                let c = t.constant(Tensor::scalar(4.0));
                let z = t.scale(x, 0.0);
                let s = t.sum(z);
                t.add(s, c)
            },
            &Tensor::vector(vec![1.0, -2.0]),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nan_is_reported() {
        let r = check_gradient(
            |t, x| {
                let l = t.map(x, Unary::Log);
                t.sum(l)
            },
            &Tensor::vector(vec![1e-9]),
            1e-5,
        );
        assert!(r.is_err());
    }
}
