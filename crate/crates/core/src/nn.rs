//! Layer building blocks: convolution, spatial normalization and activations,
//! with seeded initialization into a [`ParameterStore`] and tape-side forward
//! passes through a [`NetCtx`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::ops::ConvCfg;
use crate::params::ParameterStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Couples a tape with a frozen parameter store; parameters become tape
/// leaves on first use so the trainer can map gradients back to names.
pub struct NetCtx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    store: &'a ParameterStore<T>,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Scalar> NetCtx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParameterStore<T>) -> Self {
        Self {
            tape,
            store,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    /// Tape leaf for a named parameter (registered once per context).
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.tape.leaf(value);
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Names of all parameters touched so far, with their leaf vars.
    pub fn touched(&self) -> BTreeMap<String, Var> {
        self.vars.borrow().clone()
    }
}

pub fn he_normal<T: Scalar, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let std = T::from_f64_c((2.0 / fan_in as f64).sqrt());
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::standard_normal(rng) * std).collect();
    Tensor::new(shape, data).expect("shape/data consistent")
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub cfg: ConvCfg,
    pub bias: bool,
}

impl Conv {
    /// 3x3 same-size convolution by default.
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            k,
            cfg: ConvCfg {
                stride: 1,
                pad: k / 2,
                dilation: 1,
            },
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.cfg.stride = s;
        self
    }

    /// Dilated same-size convolution: pad scales with the rate.
    pub fn dilation(mut self, d: usize) -> Self {
        self.cfg.dilation = d;
        self.cfg.pad = d * (self.k / 2);
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.cfg.pad = p;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) {
        let fan_in = self.in_ch * self.k * self.k;
        store.insert(
            self.weight_name(),
            he_normal(rng, vec![self.out_ch, self.in_ch, self.k, self.k], fan_in),
        );
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(vec![self.out_ch]));
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &NetCtx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = if self.bias {
            Some(ctx.param(&self.bias_name())?)
        } else {
            None
        };
        ctx.tape.conv2d(x, w, b, self.cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub ch: usize,
    pub eps: f64,
}

impl Norm {
    pub fn new(name: impl Into<String>, ch: usize) -> Self {
        Self {
            name: name.into(),
            ch,
            eps: 1e-5,
        }
    }

    pub fn init<T: Scalar>(&self, store: &mut ParameterStore<T>) {
        store.insert(format!("{}.gamma", self.name), Tensor::full(vec![self.ch], T::one()));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(vec![self.ch]));
    }

    pub fn forward<T: Scalar>(&self, ctx: &NetCtx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        ctx.tape.norm2d(x, gamma, beta, T::from_f64_c(self.eps))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    PRelu,
    Relu,
    None,
}

/// Conv -> norm -> activation, the unit everything else is assembled from.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: Option<Norm>,
    pub act: Act,
}

impl ConvBlock {
    pub fn new(conv: Conv, act: Act) -> Self {
        let norm = Norm::new(conv.name.replace(".conv", ".norm"), conv.out_ch);
        Self {
            conv,
            norm: Some(norm),
            act,
        }
    }

    pub fn bare(conv: Conv) -> Self {
        Self {
            conv,
            norm: None,
            act: Act::None,
        }
    }

    fn prelu_name(&self) -> String {
        self.conv.name.replace(".conv", ".prelu")
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParameterStore<T>, rng: &mut R) {
        self.conv.init(store, rng);
        if let Some(norm) = &self.norm {
            norm.init(store);
        }
        if self.act == Act::PRelu {
            store.insert(
                format!("{}.alpha", self.prelu_name()),
                Tensor::full(vec![self.conv.out_ch], T::from_f64_c(0.25)),
            );
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &NetCtx<T>, x: Var) -> Result<Var> {
        let mut y = self.conv.forward(ctx, x)?;
        if let Some(norm) = &self.norm {
            y = norm.forward(ctx, y)?;
        }
        match self.act {
            Act::PRelu => {
                let alpha = ctx.param(&format!("{}.alpha", self.prelu_name()))?;
                ctx.tape.prelu(y, alpha)
            }
            Act::Relu => Ok(ctx.tape.relu(y)),
            Act::None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_block_forward_shapes_and_param_names() {
        let mut store = ParameterStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = ConvBlock::new(Conv::new("m.conv", 3, 8, 3).stride(2), Act::PRelu);
        block.init(&mut store, &mut rng);
        assert!(store.contains("m.conv.weight"));
        assert!(store.contains("m.norm.gamma"));
        assert!(store.contains("m.prelu.alpha"));

        let tape = Tape::new();
        let ctx = NetCtx::new(&tape, &store);
        let x = tape.leaf(Tensor::full(vec![3, 16, 16], 0.5));
        let y = block.forward(&ctx, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 8, 8]);
        assert!(tape.value(y).all_finite());
    }

    #[test]
    fn missing_parameter_is_reported_by_name() {
        let store = ParameterStore::<f64>::new();
        let tape = Tape::new();
        let ctx = NetCtx::new(&tape, &store);
        let conv = Conv::new("ghost.conv", 1, 1, 1);
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 2]));
        let err = conv.forward(&ctx, x).unwrap_err();
        assert!(err.to_string().contains("ghost.conv.weight"));
    }
}
