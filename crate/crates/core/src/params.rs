//! Named parameter declarations and storage.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tape::Mat;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with the given std, redrawn outside ±2 std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Declared shape, initializer and decay policy of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
    pub decay: bool,
}

impl ParamSpec {
    /// Projection matrix: truncated normal(0.02), decayed.
    pub fn dense(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            init: Init::TruncNormal(0.02),
            decay: true,
        }
    }

    /// 1×n bias, zero-initialized, decayed.
    pub fn bias(name: impl Into<String>, n: usize) -> Self {
        ParamSpec {
            name: name.into(),
            rows: 1,
            cols: n,
            init: Init::Zeros,
            decay: true,
        }
    }

    /// Layer-norm gain, excluded from decay.
    pub fn ln_gain(name: impl Into<String>, n: usize) -> Self {
        ParamSpec {
            name: name.into(),
            rows: 1,
            cols: n,
            init: Init::Ones,
            decay: false,
        }
    }

    /// Layer-norm bias, excluded from decay.
    pub fn ln_bias(name: impl Into<String>, n: usize) -> Self {
        ParamSpec {
            name: name.into(),
            rows: 1,
            cols: n,
            init: Init::Zeros,
            decay: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn count_params(specs: &[ParamSpec]) -> u64 {
    specs.iter().map(|s| s.numel() as u64).sum()
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Parameter tensors keyed by module path, in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let tensors = specs
            .iter()
            .map(|s| {
                let m = match s.init {
                    Init::Zeros => Mat::zeros((s.rows, s.cols)),
                    Init::Ones => Mat::ones((s.rows, s.cols)),
                    Init::TruncNormal(std) => {
                        Mat::from_shape_simple_fn((s.rows, s.cols), || trunc_normal(rng, std))
                    }
                };
                (s.name.clone(), m)
            })
            .collect();
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Option<Mat> {
        self.tensors.insert(name.into(), value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> u64 {
        self.tensors.values().map(|m| m.len() as u64).sum()
    }
}
