//! Central finite-difference gradient verification.

use rand::Rng;

use crate::Scalar;

/// Function value plus the arguments of every non-differentiable point the
/// evaluation passed through (ReLU pre-activations, hinge margins).
#[derive(Clone, Debug)]
pub struct Probe<T> {
    pub value: T,
    pub kinks: Vec<T>,
}

impl<T> Probe<T> {
    pub fn smooth(value: T) -> Probe<T> {
        Probe { value, kinks: Vec::new() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Coordinate with the largest error.
    pub worst: Option<usize>,
}

/// True when some kink argument moved between the two probes and either
/// changed sign or came within `tol` of zero.
pub fn kinks_crossed<T: Scalar>(plus: &[T], minus: &[T], tol: T) -> bool {
    plus.len() != minus.len()
        || plus.iter().zip(minus).any(|(&a, &b)| {
            a != b && ((a > T::zero()) != (b > T::zero()) || a.abs().min(b.abs()) < tol)
        })
}

/// Compares `analytic` against `(f(p+eps) - f(p-eps)) / 2eps` on up to
/// `samples` random coordinates (all of them when `samples >= len`).
///
/// Coordinates whose perturbation crosses a kink are skipped and replaced by
/// fresh draws. Relative error uses `max(|a|, |n|, 1e-8)` as denominator.
pub fn grad_check<T, F, R>(
    mut f: F,
    params: &[T],
    analytic: &[T],
    eps: T,
    kink_tol: T,
    samples: usize,
    rng: &mut R,
) -> GradCheckReport
where
    T: Scalar,
    F: FnMut(&[T]) -> Probe<T>,
    R: Rng,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let n = params.len();
    let mut report = GradCheckReport::default();
    if n == 0 {
        return report;
    }
    let exhaustive = samples >= n;
    let budget = if exhaustive { n } else { samples * 20 };
    let mut p = params.to_vec();
    let two_eps = eps + eps;
    for draw in 0..budget {
        if report.checked >= samples {
            break;
        }
        let i = if exhaustive { draw } else { rng.gen_range(0..n) };
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p);
        p[i] = orig - eps;
        let minus = f(&p);
        p[i] = orig;
        if kinks_crossed(&plus.kinks, &minus.kinks, kink_tol) {
            report.skipped += 1;
            continue;
        }
        let numeric = ((plus.value - minus.value) / two_eps).to_f64_lossy();
        let a = analytic[i].to_f64_lossy();
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let err = (a - numeric).abs() / denom;
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some(i);
            }
        }
    }
    report
}
