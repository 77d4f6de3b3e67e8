use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{Scalar, Tensor};

/// Learning-rate group. The fused-feature classifier trains at its own rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Classifier,
    Body,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Owns every learnable tensor together with its gradient accumulator.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            group,
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weights drawn from U(-bound, bound) with `bound = gain / sqrt(fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.add(name, group, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        for (a, &g) in self.params[id.0].grad.data_mut().iter_mut().zip(grad) {
            *a += g;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Step decay: the base rate is multiplied by `gamma` at each milestone.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn at(&self, iteration: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.base * self.gamma.powi(passed as i32)
    }
}

/// SGD with coupled weight decay and optional heavy-ball momentum:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`. With `μ = 0` this is
/// `p ← p − lr·(g + wd·p)`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub classifier: LrSchedule,
    pub body: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Iterations of linear ramp from `lr/warmup` to `lr`.
    pub warmup: usize,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr_classifier: f64, lr_body: f64, weight_decay: f64, milestones: Vec<usize>) -> Self {
        Self {
            classifier: LrSchedule {
                base: lr_classifier,
                milestones: milestones.clone(),
                gamma: 0.1,
            },
            body: LrSchedule {
                base: lr_body,
                milestones,
                gamma: 0.1,
            },
            weight_decay,
            momentum: 0.0,
            warmup: 0,
            velocity: Vec::new(),
        }
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_warmup(mut self, iterations: usize) -> Self {
        self.warmup = iterations;
        self
    }

    pub fn lr(&self, group: ParamGroup, iteration: usize) -> f64 {
        let ramp = if iteration < self.warmup {
            (iteration + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        ramp * match group {
            ParamGroup::Classifier => self.classifier.at(iteration),
            ParamGroup::Body => self.body.at(iteration),
        }
    }

    /// Apply one update with the rates in effect at `iteration`, then zero
    /// every gradient.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, iteration: usize) {
        let wd = self.weight_decay;
        let mu = self.momentum;
        if mu != 0.0 && self.velocity.len() != store.len() {
            self.velocity = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        }
        let rates: Vec<f64> = store.iter().map(|(_, p)| self.lr(p.group, iteration)).collect();
        for (i, p) in store.iter_mut().enumerate() {
            let lr = rates[i];
            let grad = p.grad.data_mut();
            if mu == 0.0 {
                let (lr, wd) = (T::from_f64(lr), T::from_f64(wd));
                for (w, g) in p.value.data_mut().iter_mut().zip(grad.iter_mut()) {
                    *w -= lr * (*g + wd * *w);
                    *g = T::zero();
                }
            } else {
                let vel = &mut self.velocity[i];
                for ((w, g), v) in p.value.data_mut().iter_mut().zip(grad.iter_mut()).zip(vel.iter_mut()) {
                    *v = mu * *v + g.as_f64() + wd * w.as_f64();
                    *w = T::from_f64(w.as_f64() - lr * *v);
                    *g = T::zero();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamGroup::Body, Tensor::scalar(p));
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn plain_step() {
        let mut s = single(1.0, 1.0);
        Sgd::new(0.1, 0.1, 0.0, vec![]).step(&mut s, 0);
        let p = s.get(ParamId(0));
        assert!((p.value.item() - 0.9).abs() < 1e-15);
        assert_eq!(p.grad.item(), 0.0);
    }

    #[test]
    fn decay_only_step() {
        let mut s = single(1.0, 0.0);
        Sgd::new(0.1, 0.1, 1.0, vec![]).step(&mut s, 0);
        assert!((s.get(ParamId(0)).value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let sched = LrSchedule {
            base: 0.05,
            milestones: vec![1000, 2000],
            gamma: 0.1,
        };
        assert_eq!(sched.at(0), 0.05);
        assert_eq!(sched.at(999), 0.05);
        assert!((sched.at(1000) - 0.005).abs() < 1e-15);
        assert!((sched.at(2500) - 0.0005).abs() < 1e-15);
    }

    #[test]
    fn groups_use_their_own_rate() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("cls", ParamGroup::Classifier, Tensor::scalar(1.0));
        let b = s.add("body", ParamGroup::Body, Tensor::scalar(1.0));
        s.get_mut(a).grad = Tensor::scalar(1.0);
        s.get_mut(b).grad = Tensor::scalar(1.0);
        Sgd::new(0.5, 0.1, 0.0, vec![]).step(&mut s, 0);
        assert!((s.get(a).value.item() - 0.5).abs() < 1e-15);
        assert!((s.get(b).value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut s = single(1.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.1, 0.0, vec![]).with_momentum(0.9);
        opt.step(&mut s, 0);
        assert!((s.get(ParamId(0)).value.item() - 0.9).abs() < 1e-12);
        s.get_mut(ParamId(0)).grad = Tensor::scalar(1.0);
        opt.step(&mut s, 1);
        assert!((s.get(ParamId(0)).value.item() - 0.71).abs() < 1e-12);
    }
}
