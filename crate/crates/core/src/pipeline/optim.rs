use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, ParamGroup, ToyTransformer};

/// AdamW hyperparameters; `lr` is the peak rate of a stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamHp {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHp {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHp {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if !ok {
            return Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// One AdamW step at learning rate `lr` with decoupled weight decay:
/// `p ← p − lr·wd·p − lr·m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    params: &mut [f32],
    grads: &[f64],
    state: &mut MomentState,
    hp: &AdamHp,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!(
            "{} parameters vs {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient {} at index {i}",
            grads[i]
        )));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    if state.m.len() != params.len() {
        return Err(Error::shape("moment buffers do not match the parameter"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        let old = f64::from(*p);
        let new = old - lr * hp.weight_decay * old - lr * m_hat / (v_hat.sqrt() + hp.eps);
        *p = new as f32;
    }
    Ok(())
}

/// AdamW over the tensors of a model, keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub hp: AdamHp,
    states: BTreeMap<String, MomentState>,
}

impl AdamW {
    pub fn new(hp: AdamHp) -> Self {
        Self {
            hp,
            states: BTreeMap::new(),
        }
    }

    /// Updates every tensor whose group is in `groups`; each must have a gradient.
    pub fn step(
        &mut self,
        model: &mut ToyTransformer,
        grads: &GradientSet,
        groups: &[ParamGroup],
        lr: f64,
    ) -> Result<()> {
        let mut outcome = Ok(());
        let hp = self.hp;
        let states = &mut self.states;
        model.visit_params_mut(&mut |name, group, values| {
            if outcome.is_err() || !groups.contains(&group) {
                return;
            }
            outcome = match grads.get(name) {
                Some(g) => adamw_step(
                    values,
                    g,
                    states.entry(name.to_string()).or_default(),
                    &hp,
                    lr,
                )
                .map_err(|e| match e {
                    Error::Training(msg) => Error::Training(format!("{name}: {msg}")),
                    other => other,
                }),
                None => Err(Error::Training(format!(
                    "no gradient for trainable tensor {name}"
                ))),
            };
        });
        outcome
    }
}
