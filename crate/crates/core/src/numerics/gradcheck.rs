//! Central finite-difference gradient checking.

use serde::Serialize;

/// A set of named parameter tensors, flattened.
///
/// Gradients use the same type as the parameters they belong to, so one
/// implementation serves both and drives the generic update and checking code.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(&'static str, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    /// `self += alpha · other`
    fn add_scaled(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    fn fill(&mut self, value: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = value);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged by absolute error instead.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: &'static str,
    pub len: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub passed: bool,
    /// Set when a perturbed loss was NaN or infinite.
    pub diagnostic: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| match &t.diagnostic {
                Some(d) => format!("{}: {d}", t.name),
                None => format!(
                    "{}: rel err {:.3e} at index {}",
                    t.name, t.max_rel_err, t.worst_index
                ),
            })
            .collect()
    }
}

/// Compares `analytic` against central differences of `loss` around `params`,
/// element by element.
pub fn grad_check<P, F>(params: &P, analytic: &P, mut loss: F, opts: GradCheckOptions) -> GradCheckReport
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    let analytic_tensors = analytic.tensors();
    let mut probe = params.clone();
    let mut report = Vec::with_capacity(analytic_tensors.len());

    for (t, (name, grad)) in analytic_tensors.iter().enumerate() {
        let mut check = TensorCheck {
            name,
            len: grad.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            passed: true,
            diagnostic: None,
        };
        for i in 0..grad.len() {
            let original = probe.tensors()[t].1[i];
            probe.tensors_mut()[t].1[i] = original + opts.step;
            let plus = loss(&probe);
            probe.tensors_mut()[t].1[i] = original - opts.step;
            let minus = loss(&probe);
            probe.tensors_mut()[t].1[i] = original;

            if !plus.is_finite() || !minus.is_finite() {
                check.passed = false;
                check.diagnostic = Some(format!("non-finite loss when perturbing {name}[{i}]"));
                break;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let abs = (numeric - grad[i]).abs();
            let rel = abs / numeric.abs().max(grad[i].abs()).max(opts.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        if check.max_rel_err > opts.tol {
            check.passed = false;
        }
        report.push(check);
    }
    GradCheckReport { tensors: report }
}
