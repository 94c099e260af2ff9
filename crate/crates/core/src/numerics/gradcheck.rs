use super::{NumericsError, Tape, Tensor, Var};

const REL_FLOOR: f64 = 1e-12;

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |analytic_i - fd_i| / (|fd_i| + 1e-12)`, where
/// `fd_i = (f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    point: &[f64],
    h: f64,
) -> Result<f64, NumericsError> {
    if !(h > 0.0 && h <= 1e-2) {
        return Err(NumericsError::InvalidArgument(format!("step h={h} outside (0, 1e-2]")));
    }
    if analytic.len() != point.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check",
            lhs: vec![analytic.len()],
            rhs: vec![point.len()],
        });
    }
    if let Some(index) = analytic.iter().position(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite { context: "analytic gradient".into(), index });
    }
    let mut probe = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        probe[i] = point[i] + h;
        let up = f(&probe);
        probe[i] = point[i] - h;
        let down = f(&probe);
        probe[i] = point[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(NumericsError::NonFinite { context: "function value".into(), index: i });
        }
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - fd).abs() / (fd.abs() + REL_FLOOR));
    }
    Ok(worst)
}

/// Runs [`grad_check`] over every element of every input of a tape-built
/// scalar function, using the tape's own backward pass as the analytic side.
pub fn tape_grad_check<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64, NumericsError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut analytic = Vec::with_capacity(sizes.iter().sum());
    for (v, &n) in vars.iter().zip(&sizes) {
        match tape.grad(*v)? {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
    }
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();

    let mut failure = None;
    let eval = |flat: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut offset = 0;
        let mut vars = Vec::with_capacity(shapes.len());
        for (shape, &n) in shapes.iter().zip(&sizes) {
            let t = Tensor::from_slice(shape, &flat[offset..offset + n]).expect("shape preserved");
            vars.push(tape.constant(t));
            offset += n;
        }
        match build(&mut tape, &vars).and_then(|l| tape.value(l).item()) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let result = grad_check(eval, &analytic, &point, h);
    match failure {
        Some(e) => Err(e),
        None => result,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let f = |p: &[f64]| 3.0 * p[0] - 2.0 * p[1] + 0.5;
        let err = grad_check(f, &[3.0, -2.0], &[0.3, -1.2], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sine_matches_cosine() {
        let err = grad_check(|p| p[0].sin(), &[1.0f64.cos()], &[1.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn doubled_gradient_is_flagged() {
        let err = grad_check(|p| p[0] * p[0], &[2.0 * 2.0 * 1.5], &[1.5], 1e-5).unwrap();
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        assert!(grad_check(|p| p[0], &[1.0], &[0.0], 0.0).is_err());
        assert!(grad_check(|p| p[0], &[1.0], &[0.0], 0.1).is_err());
        let err = grad_check(|p| p[0].ln(), &[1.0], &[0.0], 1e-5).unwrap_err();
        assert!(matches!(err, NumericsError::NonFinite { .. }));
    }
}
