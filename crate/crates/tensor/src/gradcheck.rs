use crate::{Result, Scalar, Tape, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    /// An entry also passes when its absolute error is below this floor.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, rel_tol: 1e-4, abs_tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub failures: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

fn evaluate<F, Fun>(f: &Fun, inputs: &[(String, Tensor<F>)]) -> Result<(Tape<F>, Vec<Var>, Var)>
where
    F: Scalar,
    Fun: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| tape.leaf(t)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Compares tape gradients of a scalar function against central differences.
///
/// Every input is perturbed element by element. An entry passes when
/// `|analytic - numeric| <= max(rel_tol * max(|analytic|, |numeric|), abs_tol)`.
pub fn grad_check<F, Fun>(
    f: Fun,
    inputs: &[(String, Tensor<F>)],
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Scalar,
    Fun: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let inputs: Vec<(String, Tensor<F>)> =
        inputs.iter().map(|(n, t)| (n.clone(), t.clone().with_grad())).collect();

    let (mut tape, vars, loss) = evaluate(&f, &inputs)?;
    let base = tape.scalar(loss);
    let (again, _, again_loss) = evaluate(&f, &inputs)?;
    let second = again.scalar(again_loss);
    if second != base {
        return Err(TensorError::NonDeterministicFunction {
            first: base.to_f64().unwrap_or(f64::NAN),
            second: second.to_f64().unwrap_or(f64::NAN),
        });
    }
    tape.backward(loss)?;

    let h = F::of(config.step);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe = inputs.clone();
    for (idx, (name, tensor)) in inputs.iter().enumerate() {
        let zeros = vec![F::zero(); tensor.len()];
        let analytic = tape.grad(vars[idx]).unwrap_or(&zeros).to_vec();
        let mut report = InputReport {
            name: name.clone(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            failures: 0,
            passed: true,
        };
        for e in 0..tensor.len() {
            let original = tensor.data()[e];
            probe[idx].1.data_mut()[e] = original + h;
            let (tp, _, lp) = evaluate(&f, &probe)?;
            probe[idx].1.data_mut()[e] = original - h;
            let (tm, _, lm) = evaluate(&f, &probe)?;
            probe[idx].1.data_mut()[e] = original;

            let plus = tp.scalar(lp).to_f64().unwrap();
            let minus = tm.scalar(lm).to_f64().unwrap();
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic[e].to_f64().unwrap();
            let abs_err = (a - numeric).abs();
            let magnitude = a.abs().max(numeric.abs());
            let rel_err = if magnitude > 0.0 { abs_err / magnitude } else { 0.0 };
            report.max_abs_error = report.max_abs_error.max(abs_err);
            if abs_err > config.abs_tol {
                report.max_rel_error = report.max_rel_error.max(rel_err);
            }
            if abs_err > (config.rel_tol * magnitude).max(config.abs_tol) {
                report.failures += 1;
                report.passed = false;
            }
        }
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed);
    Ok(GradCheckReport { inputs: reports, passed })
}
