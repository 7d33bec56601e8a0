//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

/// Finite-difference checker configuration.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    /// Check at most this many entries per parameter, evenly strided.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { epsilon: 1e-5, max_entries_per_param: None }
    }
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, ..Self::default() }
    }

    pub fn max_entries(mut self, n: usize) -> Self {
        self.max_entries_per_param = Some(n);
        self
    }

    /// Compare analytic gradients of the scalar built by `objective` with
    /// `(f(p+eps) - f(p-eps)) / 2eps` for every selected entry of `params`.
    /// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
    pub fn run<F>(&self, store: &mut ParamStore, params: &[ParamId], objective: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph) -> Result<NodeId>,
    {
        if !(1e-6..=1e-3).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [1e-6, 1e-3]", self.epsilon)));
        }
        let analytic = {
            let mut g = Graph::new(store);
            let loss = objective(&mut g)?;
            let grads = g.backward(loss)?;
            params
                .iter()
                .map(|&id| {
                    grads
                        .param(id)
                        .map(|t| t.data().to_vec())
                        .unwrap_or_else(|| vec![0.0; store.value(id).len()])
                })
                .collect::<Vec<_>>()
        };
        let eval = |store: &ParamStore| -> Result<f64> {
            let mut g = Graph::new(store);
            let loss = objective(&mut g)?;
            let v = g.value(loss).item();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteObjective)
            }
        };
        let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
        for (pi, &id) in params.iter().enumerate() {
            let n = store.value(id).len();
            let stride = match self.max_entries_per_param {
                Some(m) if m > 0 && n > m => n.div_ceil(m),
                _ => 1,
            };
            for i in (0..n).step_by(stride) {
                let orig = store.value(id).data()[i];
                store.value_mut(id).data_mut()[i] = orig + self.epsilon;
                let plus = eval(store);
                store.value_mut(id).data_mut()[i] = orig - self.epsilon;
                let minus = eval(store);
                store.value_mut(id).data_mut()[i] = orig;
                let numeric = (plus? - minus?) / (2.0 * self.epsilon);
                let a = analytic[pi][i];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                let rel = (a - numeric).abs() / denom;
                report.entries_checked += 1;
                if rel > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = rel;
                    report.worst = Some((store.param(id).name.clone(), i));
                }
            }
        }
        Ok(report)
    }
}

/// Convenience wrapper with default settings.
pub fn grad_check<F>(store: &mut ParamStore, params: &[ParamId], epsilon: f64, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    GradCheck::new(epsilon).run(store, params, objective)
}
