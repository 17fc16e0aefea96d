//! Adam and plain gradient descent over named parameter groups.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdPlain,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgdPlain => "sgd_plain",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::SgdPlain => 1,
        }
    }

    pub fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(OptimizerKind::Adam),
            1 => Some(OptimizerKind::SgdPlain),
            _ => None,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd_plain" => Ok(OptimizerKind::SgdPlain),
            other => Err(Error::InvalidConfig(format!(
                "unknown optimizer `{other}` (expected adam or sgd_plain)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// Moment accumulators of one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupState<T: Scalar> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Default for GroupState<T> {
    fn default() -> Self {
        GroupState {
            step: 0,
            m: ParamStore::new(),
            v: ParamStore::new(),
        }
    }
}

/// Optimizer state keyed by group name (`gen`, `dis_t`, `dis_c`, ...).
/// Each group keeps its own step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    pub kind: OptimizerKind,
    pub groups: BTreeMap<String, GroupState<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            groups: BTreeMap::new(),
        }
    }

    pub fn group_step(&self, group: &str) -> u64 {
        self.groups.get(group).map_or(0, |g| g.step)
    }

    /// Applies one descent step to every parameter in `grads`. Parameters
    /// without a gradient are left alone.
    pub fn apply(
        &mut self,
        group: &str,
        weights: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        hyper: &Hyper,
    ) -> Result<()> {
        for (name, g) in grads {
            g.ensure_shape(weights.get(name)?.shape(), name)?;
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: self.group_step(group),
                    detail: format!("gradient of `{name}` in group {group}"),
                });
            }
        }
        let kind = self.kind;
        let state = self.groups.entry(group.to_string()).or_default();
        state.step += 1;
        match kind {
            OptimizerKind::SgdPlain => {
                let lr = T::c(hyper.lr);
                for (name, g) in grads {
                    let w = weights.get_mut(name)?;
                    for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
                        *wi = *wi - lr * *gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = state.step as i32;
                let bc1 = 1.0 - hyper.beta1.powi(t);
                let bc2 = 1.0 - hyper.beta2.powi(t);
                let step_size = T::c(hyper.lr / bc1);
                let inv_sqrt_bc2 = T::c(1.0 / bc2.sqrt());
                let (b1, b2) = (T::c(hyper.beta1), T::c(hyper.beta2));
                let (c1, c2) = (T::c(1.0 - hyper.beta1), T::c(1.0 - hyper.beta2));
                let eps = T::c(ADAM_EPS);
                for (name, g) in grads {
                    let shape = g.shape();
                    if !state.m.contains(name) {
                        state.m.insert(name.clone(), Tensor::zeros(shape));
                        state.v.insert(name.clone(), Tensor::zeros(shape));
                    }
                    let m = state.m.get_mut(name)?;
                    let v = state.v.get_mut(name)?;
                    let w = weights.get_mut(name)?;
                    for (((wi, mi), vi), &gi) in w
                        .data_mut()
                        .iter_mut()
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                        .zip(g.data())
                    {
                        *mi = b1 * *mi + c1 * gi;
                        *vi = b2 * *vi + c2 * gi * gi;
                        *wi = *wi - step_size * *mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_vec([1, 1, 1, vals.len()], vals.to_vec()).unwrap());
        s
    }

    fn grads(vals: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(
            "w".to_string(),
            Tensor::from_vec([1, 1, 1, vals.len()], vals.to_vec()).unwrap(),
        )])
    }

    const H: Hyper = Hyper {
        lr: 0.1,
        beta1: 0.5,
        beta2: 0.999,
    };

    #[test]
    fn sgd_moves_against_gradient() {
        let mut w = store(&[1.0, -2.0]);
        let mut opt = OptimizerState::new(OptimizerKind::SgdPlain);
        opt.apply("gen", &mut w, &grads(&[0.5, -1.0]), &H).unwrap();
        assert_eq!(w.get("w").unwrap().data(), &[0.95, -1.9]);
        assert_eq!(opt.group_step("gen"), 1);
        assert_eq!(opt.group_step("dis"), 0);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut w = store(&[0.0, 0.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        opt.apply("gen", &mut w, &grads(&[3.0, -0.001]), &H).unwrap();
        let d = w.get("w").unwrap().data();
        assert!((d[0] + 0.1).abs() < 1e-6);
        assert!((d[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn adam_matches_reference_recurrence() {
        let mut w = store(&[0.3]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.3f64);
        for t in 1..=5 {
            let g = 2.0 * x;
            opt.apply("g", &mut w, &grads(&[g]), &H).unwrap();
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + ADAM_EPS);
            assert!((w.get("w").unwrap().data()[0] - x).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_leaves_weights() {
        let mut w = store(&[1.0]);
        let mut opt = OptimizerState::new(OptimizerKind::Adam);
        let err = opt.apply("gen", &mut w, &grads(&[f64::NAN]), &H).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(w.get("w").unwrap().data(), &[1.0]);
        assert_eq!(opt.group_step("gen"), 0);
    }

    #[test]
    fn kind_names() {
        for k in [OptimizerKind::Adam, OptimizerKind::SgdPlain] {
            assert_eq!(k.as_str().parse::<OptimizerKind>().unwrap(), k);
            assert_eq!(OptimizerKind::from_code(k.code()), Some(k));
        }
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
