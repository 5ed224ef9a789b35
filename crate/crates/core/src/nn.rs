//! Parameter storage and the small layers shared by encoder and decoder.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::SeqTensor;
use rand::Rng;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<SeqTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: SeqTensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &SeqTensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut SeqTensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[SeqTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [SeqTensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Zeroes every parameter whose name starts with `prefix`.
    pub fn zero_matching(&mut self, prefix: &str) {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if n.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// One forward pass: a fresh tape with parameters bound lazily as leaves.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    grad: bool,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore, grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            grad,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.grad {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: SeqTensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &SeqTensor {
        self.tape.value(v)
    }

    /// Gradients for every parameter in store order; unused parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<SeqTensor> {
        self.bound
            .iter()
            .enumerate()
            .map(|(i, b)| {
                b.and_then(|v| grads.take(v))
                    .unwrap_or_else(|| SeqTensor::zeros(self.params.tensors[i].shape()))
            })
            .collect()
    }
}

/// Per-frame affine map `[L, Cin] -> [L, Cout]`.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Pointwise {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), SeqTensor::uniform(&[cin, cout], bound, rng)),
            bias: store.add(format!("{name}.bias"), SeqTensor::uniform(&[cout], bound, rng)),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.tape.linear(x, w, Some(b))
    }
}

/// Depthwise convolution followed by a pointwise mix.
#[derive(Clone, Debug)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: Pointwise,
    pub dilation: usize,
}

impl SeparableConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        window: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (window as f64).sqrt();
        Self {
            depthwise: store.add(
                format!("{name}.depthwise"),
                SeqTensor::uniform(&[window, channels], bound, rng),
            ),
            pointwise: Pointwise::new(store, &format!("{name}.pointwise"), channels, channels, rng),
            dilation,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let k = s.param(self.depthwise);
        let h = s.tape.depthwise_conv1d(x, k, self.dilation)?;
        self.pointwise.forward(s, h)
    }
}

/// Instance normalization over time with a learned affine map; a no-op when disabled.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub enabled: bool,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, enabled: bool) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), SeqTensor::filled(&[channels], 1.0)),
            bias: store.add(format!("{name}.bias"), SeqTensor::zeros(&[channels])),
            enabled,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        if !self.enabled {
            return Ok(x);
        }
        let g = s.param(self.gain);
        let b = s.param(self.bias);
        s.tape.instance_norm(x, g, b, NORM_EPS)
    }
}

/// Pre-normalized two-layer ReLU block with a residual: `x + W2·relu(W1·IN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: Norm,
    pub expand: Pointwise,
    pub project: Pointwise,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        expansion: usize,
        norm: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            norm: Norm::new(store, &format!("{name}.norm"), channels, norm),
            expand: Pointwise::new(store, &format!("{name}.expand"), channels, channels * expansion, rng),
            project: Pointwise::new(store, &format!("{name}.project"), channels * expansion, channels, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let z = self.norm.forward(s, x)?;
        let h = self.expand.forward(s, z)?;
        let h = s.tape.relu(h);
        let h = self.project.forward(s, h)?;
        s.tape.add(x, h)
    }
}
