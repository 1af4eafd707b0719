use std::cell::RefCell;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{numel, BnStats, Real, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor and its momentum buffer.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub momentum: Vec<T>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with standard deviation `sqrt(2 / fan_in)`.
    FanIn(usize),
}

pub type SharedStats<T> = Rc<RefCell<BnStats<T>>>;

/// Owns every parameter and normalization buffer of a network, in
/// registration order.
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    buffers: Vec<(String, SharedStats<T>)>,
    rng: ChaCha8Rng,
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        let taken = self.params.iter().any(|p| p.name == name)
            || self.buffers.iter().any(|(n, _)| n == name);
        if taken {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor<T>> {
        let name = name.into();
        self.check_unique(&name)?;
        let n = numel(shape);
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn(fan_in) => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect()
            }
        };
        let tensor = Tensor::parameter(shape, data)?;
        self.params.push(Parameter {
            name,
            tensor: tensor.clone(),
            momentum: vec![T::zero(); n],
        });
        Ok(tensor)
    }

    pub fn add_bn_stats(&mut self, name: impl Into<String>, channels: usize) -> Result<SharedStats<T>> {
        let name = name.into();
        self.check_unique(&name)?;
        let stats = Rc::new(RefCell::new(BnStats::new(channels)));
        self.buffers.push((name, Rc::clone(&stats)));
        Ok(stats)
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, SharedStats<T>)] {
        &self.buffers
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        self.params.iter().for_each(|p| p.tensor.zero_grad());
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// `v ← momentum·v + (grad + weight_decay·w)`, `w ← w − lr·v`, then clears
/// the gradients. Fails without touching anything if a gradient is missing.
pub fn sgd_step<T: Real>(params: &mut [Parameter<T>], cfg: &SgdConfig) -> Result<()> {
    let grads = params
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .ok_or_else(|| Error::invalid(format!("parameter {} has no gradient", p.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let (lr, mom, wd) = (
        T::from_f64(cfg.lr),
        T::from_f64(cfg.momentum),
        T::from_f64(cfg.weight_decay),
    );
    for (p, g) in params.iter_mut().zip(grads) {
        let mut w = p.tensor.data_mut();
        for ((wi, vi), gi) in w.iter_mut().zip(p.momentum.iter_mut()).zip(g) {
            *vi = mom * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
        drop(w);
        p.tensor.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{mul, sum};

    fn single(value: f64) -> (ParamStore<f64>, Tensor<f64>) {
        let mut store = ParamStore::new(0);
        let w = store.add("w", &[1], Init::Ones).unwrap();
        w.data_mut()[0] = value;
        (store, w)
    }

    fn constant_grad(w: &Tensor<f64>, g: f64) {
        let c = Tensor::new(&[1], vec![g]).unwrap();
        sum(&mul(w, &c).unwrap()).backward().unwrap();
    }

    #[test]
    fn plain_descent() {
        let (mut store, w) = single(1.0);
        constant_grad(&w, 1.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(store.params_mut(), &cfg).unwrap();
        assert!((w.item() - 0.9).abs() < 1e-15);
        assert!(w.grad().is_none());
    }

    #[test]
    fn two_momentum_steps() {
        let (mut store, w) = single(1.0);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        constant_grad(&w, 1.0);
        sgd_step(store.params_mut(), &cfg).unwrap();
        assert!((w.item() - 0.9).abs() < 1e-12);
        constant_grad(&w, 1.0);
        sgd_step(store.params_mut(), &cfg).unwrap();
        assert!((w.item() - 0.71).abs() < 1e-12);
        assert!((store.params()[0].momentum[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_no_decay_keeps_weight() {
        let (mut store, w) = single(0.37);
        constant_grad(&w, 0.0);
        sgd_step(store.params_mut(), &SgdConfig { lr: 0.5, momentum: 0.9, weight_decay: 0.0 }).unwrap();
        assert_eq!(w.item(), 0.37);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut store, w) = single(1.0);
        assert!(sgd_step(store.params_mut(), &SgdConfig::default()).is_err());
        assert_eq!(w.item(), 1.0);
    }

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new(0);
        store.add("a", &[2], Init::Zeros).unwrap();
        assert!(store.add("a", &[2], Init::Zeros).is_err());
        assert!(store.add_bn_stats("a", 2).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let draw = |seed| {
            let mut s = ParamStore::<f32>::new(seed);
            s.add("w", &[16], Init::FanIn(9)).unwrap().to_vec()
        };
        assert_eq!(draw(3), draw(3));
        assert_ne!(draw(3), draw(4));
    }
}
