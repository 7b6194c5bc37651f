use crate::scalar::Scalar;

use super::Tensor;

/// A flat, indexable view over a set of trainable values.
pub trait ParamSet<T: Scalar>: Clone {
    fn num_values(&self) -> usize;
    fn value_at(&self, i: usize) -> T;
    fn set_value_at(&mut self, i: usize, v: T);
    /// Human-readable location of flat index `i`.
    fn describe(&self, i: usize) -> String {
        format!("#{i}")
    }
}

impl<T: Scalar> ParamSet<T> for Tensor<T> {
    fn num_values(&self) -> usize {
        self.len()
    }

    fn value_at(&self, i: usize) -> T {
        self.data()[i]
    }

    fn set_value_at(&mut self, i: usize, v: T) {
        self.data_mut()[i] = v;
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Where the worst coordinate lives.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss_fn` around
/// `params`, one coordinate at a time.
pub fn grad_check<T, P, F>(loss_fn: F, params: &P, analytic: &P, eps: f64) -> GradCheckReport
where
    T: Scalar,
    P: ParamSet<T>,
    F: Fn(&P) -> T,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        checked: params.num_values(),
    };
    let mut probe = params.clone();
    for i in 0..params.num_values() {
        let orig = params.value_at(i);
        probe.set_value_at(i, orig + T::of(eps));
        let up = loss_fn(&probe).as_f64();
        probe.set_value_at(i, orig - T::of(eps));
        let down = loss_fn(&probe).as_f64();
        probe.set_value_at(i, orig);

        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.value_at(i).as_f64();
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = err;
            report.worst = params.describe(i);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
