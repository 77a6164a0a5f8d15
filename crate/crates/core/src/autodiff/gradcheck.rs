use super::{AutodiffError, Tape, Tensor, Var};

/// Denominator floor for the scaled relative error, so coordinates whose
/// true gradient is zero are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (parameter index, flat coordinate) of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor], trainable: bool) -> Result<(Tape, Vec<Var>, Var), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(AutodiffError::NonScalarLoss {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    Ok((tape, vars, out))
}

/// Checks the gradient of a scalar closure w.r.t. every coordinate of `params`.
///
/// `f` receives the tape and one leaf per parameter (all trainable) and
/// must be deterministic. Each coordinate is perturbed by `±eps`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let (mut tape, vars, out) = evaluate(&f, params, true)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        coordinates: 0,
        tolerance: tol,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..probe[pi].len() {
            let orig = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + eps;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let plus = t.value(o).item();
            probe[pi].data_mut()[ci] = orig - eps;
            let (t, _, o) = evaluate(&f, &probe, false)?;
            let minus = t.value(o).item();
            probe[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[ci];
            let rel = relative_error(a, numeric);
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((pi, ci));
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_near_exact() {
        let w = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.1]);
        let x = Tensor::matrix(3, 1, vec![1.5, -0.5, 2.0]);
        let report = grad_check(
            |t, p| {
                let y = t.matmul(p[0], p[1])?;
                t.sum(y)
            },
            &[w, x],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.coordinates, 9);
    }

    #[test]
    fn reports_a_wrong_gradient() {
        // relu kink straddled by eps gives a visibly wrong numeric slope
        let x = Tensor::vector(vec![1e-7]);
        let report = grad_check(
            |t, p| {
                let r = t.relu(p[0])?;
                t.sum(r)
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!report.passed());
    }
}
