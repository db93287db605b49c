use serde::Serialize;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct ParamGradError {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamGradError>,
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub eps: f64,
}

impl GradReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central-difference check of every parameter element of `store`.
///
/// `loss` records the forward computation on a fresh graph and returns a
/// scalar. It runs once for the analytic gradient and twice per element.
#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    pub eps: f64,
    /// Negates the analytic gradient of the named parameter, simulating a
    /// backward rule with the wrong sign.
    pub flip_sign_of: Option<String>,
}

impl GradCheck {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            flip_sign_of: None,
        }
    }

    pub fn run<F>(&self, store: &mut ParamStore<f64>, mut loss: F) -> Result<GradReport>
    where
        F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
    {
        if !(1e-6..=1e-4).contains(&self.eps) {
            return Err(Error::invalid(
                "grad_check",
                format!("eps {} outside [1e-6, 1e-4]", self.eps),
            ));
        }
        let analytic = {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let l = loss(&mut g, &bound)?;
            let grads = g.backward(l)?;
            store.collect_grads(&grads, &bound)
        };

        let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let l = loss(&mut g, &bound)?;
            Ok(g.value(l).item())
        };

        let ids: Vec<_> = store.iter().map(|(id, name, _)| (id, name.to_string())).collect();
        let mut params = Vec::with_capacity(ids.len());
        for ((id, name), grad) in ids.into_iter().zip(analytic) {
            let flip = self.flip_sign_of.as_deref() == Some(name.as_str());
            let mut worst = ParamGradError {
                name: name.clone(),
                max_rel_err: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
            };
            for idx in 0..grad.len() {
                let orig = store.value(id).data()[idx];
                store.get_mut(id).value.data_mut()[idx] = orig + self.eps;
                let plus = eval(store);
                store.get_mut(id).value.data_mut()[idx] = orig - self.eps;
                let minus = eval(store);
                store.get_mut(id).value.data_mut()[idx] = orig;
                let (plus, minus) = (plus?, minus?);
                let numeric = (plus - minus) / (2.0 * self.eps);
                let mut a = grad.data()[idx];
                if flip {
                    a = -a;
                }
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::NonFinite {
                        path: format!("{name}[{idx}]"),
                    });
                }
                let e = rel_err(a, numeric);
                if e > worst.max_rel_err || idx == 0 {
                    worst.max_rel_err = e;
                    worst.worst_index = idx;
                    worst.analytic = a;
                    worst.numeric = numeric;
                }
            }
            params.push(worst);
        }
        let (max_rel_err, worst) = params
            .iter()
            .map(|p| (p.max_rel_err, format!("{}[{}]", p.name, p.worst_index)))
            .fold((0.0, String::new()), |acc, x| {
                if x.0 > acc.0 || acc.1.is_empty() {
                    x
                } else {
                    acc
                }
            });
        Ok(GradReport {
            params,
            max_rel_err,
            worst,
            eps: self.eps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    fn quadratic_store() -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store
            .add(
                "theta",
                Tensor::from_f64(&[3], &[0.5, -1.25, 2.0]).unwrap(),
                ParamGroup::Bias,
            )
            .unwrap();
        store
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = quadratic_store();
        let report = GradCheck::new(1e-5)
            .run(&mut store, |g, p| {
                let theta = p[store_id()];
                Ok(g.half_sum_squares(theta))
            })
            .unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");
    }

    fn store_id() -> crate::params::ParamId {
        crate::params::ParamId(0)
    }

    #[test]
    fn flipped_sign_is_caught() {
        let mut store = quadratic_store();
        let check = GradCheck {
            eps: 1e-5,
            flip_sign_of: Some("theta".into()),
        };
        let report = check
            .run(&mut store, |g, p| Ok(g.half_sum_squares(p[store_id()])))
            .unwrap();
        assert!(report.max_rel_err > 1.0);
        assert!(report.worst.starts_with("theta["));
    }

    #[test]
    fn eps_range_enforced() {
        let mut store = quadratic_store();
        assert!(GradCheck::new(1e-2)
            .run(&mut store, |g, p| Ok(g.sum(p[store_id()])))
            .is_err());
    }
}
