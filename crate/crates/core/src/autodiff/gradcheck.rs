use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central finite
/// differences. Returns `max_i |g_ad - g_fd| / max(1, |g_fd|)`.
pub fn gradient_check<F>(f: F, input: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out).item();
        if !val.is_finite() {
            return Err(Error::NonFinite("gradient_check probe".to_string()));
        }
        Ok(val)
    };

    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let out = f(&mut tape, x)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
    if !analytic.is_finite() {
        return Err(Error::NonFinite("gradient_check tape gradient".to_string()));
    }

    let mut worst: f64 = 0.0;
    let mut probe = input.clone();
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (analytic.data()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::column(vec![1.5, -2.0, 0.25]);
        let err = gradient_check(
            |t, x| {
                let w = t.constant(w.clone());
                let y = t.matmul(x, w)?;
                Ok(t.sum(y))
            },
            &Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let res = gradient_check(
            |t, x| {
                let y = t.log(x);
                Ok(t.sum(y))
            },
            &Tensor::row(vec![-1.0]),
            1e-5,
        );
        assert!(res.is_err());
    }
}
