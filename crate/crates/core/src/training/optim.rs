//! AdamW with inspectable state, global-norm gradient clipping and a
//! parameter EMA.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Decoupled-weight-decay Adam over a fixed, ordered parameter list.
#[derive(Debug)]
pub struct AdamW {
    config: AdamWConfig,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        let m = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            config,
            vars,
            m,
            v,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Replaces the moment estimates and step counter, e.g. from a checkpoint.
    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: u64) -> Result<()> {
        for (i, var) in self.vars.iter().enumerate() {
            for t in [m.get(i), v.get(i)] {
                match t {
                    Some(t) if t.dims() == var.dims() => {}
                    Some(t) => return Err(Error::shape(var.dims(), t.dims())),
                    None => return Err(Error::Config("optimizer state has too few tensors".into())),
                }
            }
        }
        if m.len() != self.vars.len() || v.len() != self.vars.len() {
            return Err(Error::Config("optimizer state has too many tensors".into()));
        }
        self.m = m;
        self.v = v;
        self.step = step;
        Ok(())
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// only receive weight decay and moment decay.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for ((var, m), v) in self.vars.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.detach(),
                None => var.zeros_like()?,
            };
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = (var.as_tensor().detach() * (1.0 - lr * c.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
        }
        Ok(())
    }
}

/// Euclidean norm of all gradients of `vars` taken together.
pub fn global_grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for var in vars {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Rescales gradients in place so that their global norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let norm = global_grad_norm(grads, vars)?;
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for var in vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                let scaled = (g.detach() * scale)?;
                grads.insert(var.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

/// Exponential moving average of parameters, initialized to their values at
/// construction: `shadow ← d·shadow + (1 − d)·param`.
///
/// With `warmup`, the decay used at update `n` is `min(d, (1 + n)/(10 + n))`
/// so that short runs are not dominated by the initial weights.
#[derive(Debug, Clone)]
pub struct Ema {
    decay: f64,
    warmup: bool,
    updates: u64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(vars: &[Var], decay: f64, warmup: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        let shadow = vars
            .iter()
            .map(|v| v.as_tensor().detach().copy())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            decay,
            warmup,
            updates: 0,
            shadow,
        })
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update(&mut self, vars: &[Var]) -> Result<()> {
        let d = self.effective_decay();
        for (s, v) in self.shadow.iter_mut().zip(vars) {
            *s = ((&*s * d)? + (v.as_tensor().detach() * (1.0 - d))?)?;
        }
        self.updates += 1;
        Ok(())
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn restore(&mut self, shadow: Vec<Tensor>, updates: u64) -> Result<()> {
        if shadow.len() != self.shadow.len() {
            return Err(Error::Config("EMA state has the wrong number of tensors".into()));
        }
        for (a, b) in self.shadow.iter().zip(&shadow) {
            if a.dims() != b.dims() {
                return Err(Error::shape(a.dims(), b.dims()));
            }
        }
        self.shadow = shadow;
        self.updates = updates;
        Ok(())
    }
}
