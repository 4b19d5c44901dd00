use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const INIT_STD: f64 = 0.02;

/// Normal sample truncated to ±2 standard deviations.
pub fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn trunc_normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| trunc_normal(rng, std)).collect()).expect("init shape")
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

/// Parameters bound onto one tape plus the mode flag and pending running-stat updates.
pub struct Session<'t> {
    pub tape: &'t Tape,
    pub params: Bound<'t>,
    pub train: bool,
    updates: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore, train: bool) -> Self {
        Self { tape, params: store.bind(tape), train, updates: RefCell::new(Vec::new()) }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.params.get(id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Running-statistic updates produced by training-mode batch norms.
    pub fn take_updates(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }
}

/// `x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let w = store.insert(format!("{name}.w"), trunc_normal_tensor(&[fan_in, fan_out], std, rng), true);
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), true);
        Self { w, b }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(&s.p(self.w))?.add_row(&s.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0), true);
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]), true);
        Self { gain, bias }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&s.p(self.gain), &s.p(self.bias), NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0), true),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]), true),
            running_mean: store.insert(format!("{name}.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.insert(format!("{name}.running_var"), Tensor::full(&[dim], 1.0), false),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let rm = s.p(self.running_mean).value();
        let rv = s.p(self.running_var).value();
        let (y, running) = x.batch_norm(
            &s.p(self.gain),
            &s.p(self.bias),
            rm.data(),
            rv.data(),
            NORM_EPS,
            BN_MOMENTUM,
            s.train,
        )?;
        if let Some((m, v)) = running {
            let mut u = s.updates.borrow_mut();
            u.push((self.running_mean, Tensor::vector(m)));
            u.push((self.running_var, Tensor::vector(v)));
        }
        Ok(y)
    }
}
