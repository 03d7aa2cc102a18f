use super::{Graph, ParamStore, Var};
use crate::error::{invalid, Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub coords: usize,
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` must build the same scalar on every call. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParamStore, eps: f64, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g)?;
        check_finite(g.value(l).item())?;
        g.backward(l)
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let l = loss(&mut g)?;
        check_finite(g.value(l).item())
    };
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, worst_pair: (0.0, 0.0), coords: 0 };
    for i in 0..params.len() {
        for j in 0..params.tensors()[i].len() {
            let orig = params.tensors()[i].data()[j];
            work.tensors_mut()[i].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.tensors[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coords += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.names()[i].clone(), j));
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("loss evaluated to {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn square_matches_calculus() {
        let s = scalar_store(3.0);
        let id = s.id("w").unwrap();
        let r = grad_check(&s, 1e-5, |g| {
            let w = g.param(id);
            Ok(g.square(w))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let s = scalar_store(3.0);
        let r = grad_check(&s, 1e-5, |g| Ok(g.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let s = scalar_store(3.0);
        let r = grad_check(&s, 1e-5, |g| Ok(g.constant(Tensor::scalar(f64::NAN))));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_bad_eps() {
        let s = scalar_store(1.0);
        assert!(grad_check(&s, 0.0, |g| Ok(g.constant(Tensor::scalar(0.0)))).is_err());
    }
}
