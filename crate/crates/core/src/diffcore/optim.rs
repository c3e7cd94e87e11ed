//! AdamW with decoupled weight decay and a step-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use super::tensor::Tensor;
use super::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter, the global step counter, and the
/// number of updates each parameter has received. Bias correction uses the
/// per-parameter count, so a tensor that was skipped while frozen starts
/// fresh when it is first updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step: u64,
    pub updates: BTreeMap<String, u64>,
}

impl OptimizerState {
    /// Zero moments shaped like `params`.
    pub fn for_params(params: &ParameterSet) -> Self {
        let zeros: ParameterSet = params
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            updates: BTreeMap::new(),
        }
    }
}

/// Learning rate after halving (or scaling by `factor`) every `every` epochs.
pub fn step_decay_lr(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * factor.powi((epoch / every) as i32)
}

/// One AdamW step. Parameters for which `skip` returns true (frozen
/// encoders) are left untouched, moments included.
pub fn adamw_step(
    params: &ParameterSet,
    grads: &ParameterSet,
    state: &OptimizerState,
    cfg: &AdamWConfig,
    skip: impl Fn(&str) -> bool,
) -> Result<(ParameterSet, OptimizerState), DiffError> {
    let mut missing: Vec<String> = Vec::new();
    for p in params.paths() {
        for (what, set) in [("grad", grads), ("m", &state.m), ("v", &state.v)] {
            match set.get(p) {
                Some(t) if t.shape() == params.get(p).unwrap().shape() => {}
                _ => missing.push(format!("{what}:{p}")),
            }
        }
    }
    for p in grads.paths() {
        if !params.contains(p) {
            missing.push(format!("param:{p}"));
        }
    }
    if !missing.is_empty() {
        return Err(DiffError::PathMismatch { missing });
    }

    let mut new_params = ParameterSet::new();
    let mut new_state = OptimizerState {
        m: ParameterSet::new(),
        v: ParameterSet::new(),
        step: state.step + 1,
        updates: state.updates.clone(),
    };
    for (path, p) in params.iter() {
        let m = state.m.get(path).unwrap();
        let v = state.v.get(path).unwrap();
        if skip(path) {
            new_params.insert(path.clone(), p.clone());
            new_state.m.insert(path.clone(), m.clone());
            new_state.v.insert(path.clone(), v.clone());
            continue;
        }
        let t = state.updates.get(path).copied().unwrap_or(0) + 1;
        new_state.updates.insert(path.clone(), t);
        let bc1 = 1.0 - cfg.beta1.powf(t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(t as f64);
        let g = grads.get(path).unwrap();
        let n = p.len();
        let (mut pd, mut md, mut vd) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let gi = g.data()[i] as f64;
            let mi = cfg.beta1 * m.data()[i] as f64 + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
            let (mh, vh) = (mi / bc1, vi / bc2);
            let pi = p.data()[i] as f64;
            let upd = pi - cfg.lr * cfg.weight_decay * pi - cfg.lr * mh / (vh.sqrt() + cfg.eps);
            pd.push(upd as f32);
            md.push(mi as f32);
            vd.push(vi as f32);
        }
        let shape = p.shape().to_vec();
        new_params.insert(path.clone(), Tensor::from_parts(shape.clone(), pd));
        new_state.m.insert(path.clone(), Tensor::from_parts(shape.clone(), md));
        new_state.v.insert(path.clone(), Tensor::from_parts(shape, vd));
    }
    Ok((new_params, new_state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("p", Tensor::new(vec![1], vec![v]).unwrap());
        ps
    }

    #[test]
    fn zero_gradient_without_decay_is_a_null_update() {
        let params = one(0.7);
        let grads = one(0.0);
        let state = OptimizerState::for_params(&params);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (p, s) = adamw_step(&params, &grads, &state, &cfg, |_| false).unwrap();
        assert_eq!(p, params);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        let params = one(1.0);
        let grads = one(1.0);
        let state = OptimizerState::for_params(&params);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let (p, _) = adamw_step(&params, &grads, &state, &cfg, |_| false).unwrap();
        assert!((p.get("p").unwrap().item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        // Zero gradient: only the decay term moves the parameter.
        let params = one(2.0);
        let grads = one(0.0);
        let state = OptimizerState::for_params(&params);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let (p, _) = adamw_step(&params, &grads, &state, &cfg, |_| false).unwrap();
        assert!((p.get("p").unwrap().item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-6);
    }

    #[test]
    fn path_mismatch_lists_missing() {
        let params = one(1.0);
        let grads = ParameterSet::new();
        let state = OptimizerState::for_params(&params);
        let err = adamw_step(&params, &grads, &state, &AdamWConfig::default(), |_| false).unwrap_err();
        assert!(err.to_string().contains("grad:p"), "{err}");
    }

    #[test]
    fn skipped_parameters_are_untouched() {
        let params = one(1.0);
        let grads = one(1.0);
        let state = OptimizerState::for_params(&params);
        let (p, s) = adamw_step(&params, &grads, &state, &AdamWConfig::default(), |_| true).unwrap();
        assert_eq!(p, params);
        assert_eq!(s.m, state.m);
        assert_eq!(s.step, 1);
        assert!(s.updates.is_empty());
    }

    #[test]
    fn unfrozen_parameters_take_a_first_step_sized_update() {
        let params = one(1.0);
        let grads = one(1.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut state = OptimizerState::for_params(&params);
        for _ in 0..250 {
            state = adamw_step(&params, &grads, &state, &cfg, |_| true).unwrap().1;
        }
        let (p, s) = adamw_step(&params, &grads, &state, &cfg, |_| false).unwrap();
        assert_eq!((s.step, s.updates["p"]), (251, 1));
        assert!((p.get("p").unwrap().item() - 0.9).abs() < 1e-6);
    }

    #[test]
    fn schedule_halves_every_ten_epochs() {
        assert_eq!(step_decay_lr(5e-4, 0.5, 10, 0), 5e-4);
        assert_eq!(step_decay_lr(5e-4, 0.5, 10, 9), 5e-4);
        assert_eq!(step_decay_lr(5e-4, 0.5, 10, 10), 2.5e-4);
        assert_eq!(step_decay_lr(5e-4, 0.5, 10, 25), 1.25e-4);
    }
}
