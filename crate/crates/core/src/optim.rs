//! Named parameter storage, Adam updates, and finite-difference checking.

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::HashMap;

/// Adam hyperparameters. Weight decay only touches entries registered with
/// `decay = true` (encoder weight matrices).
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

/// Named parameters with gradient accumulators and Adam moments.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    step: u64,
}

/// Tape handles for every parameter staged by [`ParamStore::stage`].
pub struct StagedParams {
    pairs: Vec<(String, ValueId)>,
}

impl StagedParams {
    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ValueId> + '_ {
        self.pairs.iter().map(|(_, id)| *id)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, decay: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let shape = value.shape().to_vec();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            decay,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].grad)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if value.shape() != self.entries[i].value.shape() {
            return Err(Error::shape(format!(
                "parameter {name}: {:?} vs {:?}",
                value.shape(),
                self.entries[i].value.shape()
            )));
        }
        self.entries[i].value = value;
        Ok(())
    }

    /// Record every parameter as a leaf on `tape`, in registration order.
    pub fn stage(&self, tape: &mut Tape) -> StagedParams {
        let pairs = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), tape.leaf(e.value.clone())))
            .collect();
        StagedParams { pairs }
    }

    /// Pull leaf gradients from a backward pass into the accumulators.
    /// Parameters the loss never touched accumulate nothing.
    pub fn accumulate(&mut self, staged: &StagedParams, grads: &mut Gradients) {
        for (entry, (_, id)) in self.entries.iter_mut().zip(&staged.pairs) {
            if let Some(g) = grads.take(*id) {
                for (acc, &gv) in entry.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += gv;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Bias-corrected Adam step over all parameters; gradient accumulators
    /// are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for e in &mut self.entries {
            let wd = if e.decay { cfg.weight_decay } else { 0.0 };
            for i in 0..e.value.len() {
                let g = e.grad.data()[i] + wd * e.value.data()[i];
                let m = cfg.beta1 * e.m.data()[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * e.v.data()[i] + (1.0 - cfg.beta2) * g * g;
                e.m.data_mut()[i] = m;
                e.v.data_mut()[i] = v;
                let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                e.value.data_mut()[i] -= cfg.lr * update;
            }
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Copy of all parameter values, for best-epoch snapshots.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Tensor]) {
        debug_assert_eq!(snapshot.len(), self.entries.len());
        for (e, t) in self.entries.iter_mut().zip(snapshot) {
            e.value = t.clone();
        }
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    fn perturb(&mut self, entry: usize, elem: usize, delta: f64) {
        self.entries[entry].value.data_mut()[elem] += delta;
    }
}

/// Glorot-uniform matrix `[fan_in, fan_out]`.
pub fn glorot_uniform(rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("sized upfront")
}

pub fn seeded_rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Central finite differences against tape gradients, over every parameter
/// entry (or a seeded subsample of 10^4 when there are more). Returns the
/// max relative error with denominator `max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &StagedParams) -> Result<ValueId>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let loss = build(&mut tape, &staged)?;
        Ok(tape.value(loss).item())
    };

    // analytic gradients
    let mut tape = Tape::new();
    let staged = store.stage(&mut tape);
    let loss = build(&mut tape, &staged)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = staged
        .pairs
        .iter()
        .enumerate()
        .map(|(i, (_, id))| {
            grads
                .take(*id)
                .unwrap_or_else(|| Tensor::zeros(store.entries[i].value.shape()))
        })
        .collect();

    let total: usize = store.entries.iter().map(|e| e.value.len()).sum();
    let coords: Vec<(usize, usize)> = if total <= 10_000 {
        (0..store.entries.len())
            .flat_map(|i| (0..store.entries[i].value.len()).map(move |j| (i, j)))
            .collect()
    } else {
        let mut rng = seeded_rng(0xfd17);
        (0..10_000)
            .map(|_| {
                let i = rng.gen_range(0..store.entries.len());
                let j = rng.gen_range(0..store.entries[i].value.len());
                (i, j)
            })
            .collect()
    };

    let mut max_rel = 0.0f64;
    for (i, j) in coords {
        store.perturb(i, j, eps);
        let plus = eval(store)?;
        store.perturb(i, j, -2.0 * eps);
        let minus = eval(store)?;
        store.perturb(i, j, eps);
        let fd = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::from_vec(&[2, 1], vec![0.5, -0.25]).unwrap(), false)
            .unwrap();
        store.adam_step(&AdamConfig::with_lr(0.1, 0.0));
        assert_eq!(store.get("w").unwrap().data(), &[0.5, -0.25]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0), false).unwrap();
        store.entries[0].grad = Tensor::scalar(1.0);
        store.adam_step(&AdamConfig::with_lr(0.1, 0.0));
        let w = store.get("w").unwrap().item();
        assert!((w + 0.1).abs() < 1e-8, "w = {w}");
        // accumulator zeroed
        assert_eq!(store.grad("w").unwrap().item(), 0.0);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut store = ParamStore::new();
            store
                .register("w", Tensor::from_vec(&[3, 1], vec![0.1, 0.2, 0.3]).unwrap(), true)
                .unwrap();
            for k in 0..5 {
                store.entries[0].grad =
                    Tensor::from_vec(&[3, 1], vec![0.5 + k as f64, -0.25, 0.125]).unwrap();
                store.adam_step(&AdamConfig::with_lr(0.01, 5e-4));
            }
            store.get("w").unwrap().data().to_vec()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn grad_check_linear_mse_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(3);
        store.register("w", glorot_uniform(&mut rng, 4, 2), false).unwrap();
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect()).unwrap();
        let y = Tensor::from_vec(&[3, 2], (0..6).map(|i| (i as f64) * 0.5).collect()).unwrap();
        let err = grad_check(&mut store, 1e-5, |tape, staged| {
            let xi = tape.leaf(x.clone());
            let w = staged.get("w")?;
            let pred = tape.matmul(xi, w)?;
            tape.mse(pred, &y)
        })
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(1.0), false).unwrap();
        assert!(grad_check(&mut store, 1e-2, |tape, staged| {
            let w = staged.get("w")?;
            tape.mse(w, &Tensor::scalar(0.0))
        })
        .is_err());
    }

    #[test]
    fn unused_parameter_gradient_is_zero() {
        let mut store = ParamStore::new();
        store.register("used", Tensor::scalar(2.0), false).unwrap();
        store.register("unused", Tensor::scalar(5.0), false).unwrap();
        let mut tape = Tape::new();
        let staged = store.stage(&mut tape);
        let u = staged.get("used").unwrap();
        let loss = tape.mse(u, &Tensor::scalar(0.0)).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        store.accumulate(&staged, &mut grads);
        assert_eq!(store.grad("unused").unwrap().item(), 0.0);
        assert!((store.grad("used").unwrap().item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0), false).unwrap();
        assert!(store.register("w", Tensor::scalar(0.0), false).is_err());
    }
}
