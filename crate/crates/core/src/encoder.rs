//! Temporal dilation perception (TDP) encoder.
//!
//! Each TDP layer normalizes its input and combines three gates, each
//! multiplying its own depthwise-separable convolution of the normalized
//! sequence:
//!
//! - boundary: stride-1 max pooling, which keeps sharp local peaks;
//! - global: per-channel temporal mean, scaled and rectified, broadcast back
//!   over time;
//! - dilation: a dilated depthwise convolution reaching `dilation·(w-1)/2`
//!   frames either side.
//!
//! The raw layer input is added back as a residual, and a pre-normalized
//! feed-forward block follows every layer.

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::nn::{FeedForward, Norm, ParamId, ParamStore, Pointwise, SeparableConv, Session};
use crate::tensor::SeqTensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdpLayerConfig {
    pub channels: usize,
    pub window: usize,
    pub dilation: usize,
    pub pool_window: usize,
}

impl TdpLayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return config_err("tdp channels must be positive");
        }
        if self.window.is_multiple_of(2) || self.pool_window.is_multiple_of(2) {
            return config_err("tdp windows must be odd");
        }
        if self.dilation == 0 {
            return config_err("tdp dilation must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdpEncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_layers: usize,
    pub dilations: Vec<usize>,
    pub window: usize,
    pub pool_window: usize,
    pub ffn_expansion: usize,
    /// Disabling normalization makes every path local, which the
    /// receptive-field diagnostics rely on.
    pub instance_norm: bool,
}

impl TdpEncoderConfig {
    /// Defaults with dilations `1, 2, 4, …`.
    pub fn new(input_dim: usize, hidden: usize, num_layers: usize) -> Self {
        Self {
            input_dim,
            hidden,
            num_layers,
            dilations: (0..num_layers).map(|i| 1usize << i.min(30)).collect(),
            window: 3,
            pool_window: 3,
            ffn_expansion: 2,
            instance_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.num_layers == 0 || self.ffn_expansion == 0 {
            return config_err("encoder dimensions must be positive");
        }
        if self.dilations.len() != self.num_layers {
            return config_err(format!(
                "dilation schedule has {} entries for {} layers",
                self.dilations.len(),
                self.num_layers
            ));
        }
        for &d in &self.dilations {
            self.layer(d).validate()?;
        }
        Ok(())
    }

    pub fn layer(&self, dilation: usize) -> TdpLayerConfig {
        TdpLayerConfig {
            channels: self.hidden,
            window: self.window,
            dilation,
            pool_window: self.pool_window,
        }
    }

    /// Frames either side of `t` that can influence output `t` when every
    /// path is local.
    pub fn receptive_radius(&self) -> usize {
        let local = (self.window / 2).max(self.pool_window / 2);
        self.dilations.iter().map(|&d| (d * (self.window / 2)).max(local)).sum()
    }
}

/// Boundary gate: stride-1 max pooling.
pub fn boundary_branch(tape: &mut Tape, x: Var, pool_window: usize) -> Result<Var> {
    tape.maxpool1d_same(x, pool_window)
}

/// Global gate: `ReLU(scale ⊙ mean_time(x))` repeated over every frame.
pub fn global_branch(tape: &mut Tape, x: Var, scale: Var) -> Result<Var> {
    let frames = tape.value(x).frames();
    let pooled = tape.mean_time(x)?;
    let scaled = tape.mul(pooled, scale)?;
    let act = tape.relu(scaled);
    tape.broadcast_time(act, frames)
}

/// Dilation gate: depthwise convolution with the layer's dilation.
pub fn dilation_branch(tape: &mut Tape, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
    tape.depthwise_conv1d(x, kernel, dilation)
}

#[derive(Clone, Debug)]
pub struct TdpLayer {
    pub cfg: TdpLayerConfig,
    pub norm: Norm,
    pub global_scale: ParamId,
    pub dilated_kernel: ParamId,
    pub gate_convs: [SeparableConv; 3],
}

impl TdpLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: TdpLayerConfig,
        instance_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.channels;
        let bound = 1.0 / (cfg.window as f64).sqrt();
        let norm = Norm::new(store, &format!("{name}.norm"), h, instance_norm);
        let global_scale = store.add(format!("{name}.global.scale"), SeqTensor::filled(&[1, h], 1.0));
        let dilated_kernel = store.add(
            format!("{name}.dilation.kernel"),
            SeqTensor::uniform(&[cfg.window, h], bound, rng),
        );
        let gate_convs = [
            SeparableConv::new(store, &format!("{name}.boundary.conv"), h, cfg.window, 1, rng),
            SeparableConv::new(store, &format!("{name}.global.conv"), h, cfg.window, 1, rng),
            SeparableConv::new(store, &format!("{name}.dilation.conv"), h, cfg.window, 1, rng),
        ];
        Ok(Self {
            cfg,
            norm,
            global_scale,
            dilated_kernel,
            gate_convs,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.channels {
            return crate::error::dim_err(format!("tdp layer expects [L, {}], got {:?}", self.cfg.channels, shape));
        }
        let z = self.norm.forward(s, x)?;
        let scale = s.param(self.global_scale);
        let kernel = s.param(self.dilated_kernel);
        let phi = boundary_branch(&mut s.tape, z, self.cfg.pool_window)?;
        // The temporal mean of a normalized sequence is just the norm's bias,
        // so the global gate reads the un-normalized input.
        let glob = global_branch(&mut s.tape, x, scale)?;
        let psi = dilation_branch(&mut s.tape, z, kernel, self.cfg.dilation)?;
        let mut out = x;
        for (gate, conv) in [phi, glob, psi].into_iter().zip(&self.gate_convs) {
            let c = conv.forward(s, z)?;
            let term = s.tape.mul(gate, c)?;
            out = s.tape.add(out, term)?;
        }
        Ok(out)
    }
}

/// Input projection followed by TDP layers, each with a feed-forward block.
#[derive(Clone, Debug)]
pub struct TdpEncoder {
    pub cfg: TdpEncoderConfig,
    pub input: Pointwise,
    pub layers: Vec<(TdpLayer, FeedForward)>,
}

impl TdpEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: TdpEncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let input = Pointwise::new(store, &format!("{name}.input"), cfg.input_dim, cfg.hidden, rng);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (i, &d) in cfg.dilations.iter().enumerate() {
            let layer = TdpLayer::new(store, &format!("{name}.layer{i}"), cfg.layer(d), cfg.instance_norm, rng)?;
            let ffn = FeedForward::new(
                store,
                &format!("{name}.layer{i}.ffn"),
                cfg.hidden,
                cfg.ffn_expansion,
                cfg.instance_norm,
                rng,
            );
            layers.push((layer, ffn));
        }
        Ok(Self { cfg, input, layers })
    }

    /// Runs the layer stack on a sequence already at the hidden width.
    pub fn forward_stack(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, ffn) in &self.layers {
            h = layer.forward(s, h)?;
            h = ffn.forward(s, h)?;
        }
        Ok(h)
    }

    /// `[L, D]` features to `[L, H]` conditioning features.
    pub fn forward(&self, s: &mut Session, features: Var) -> Result<Var> {
        let f = s.value(features);
        f.validate()?;
        if f.shape().len() != 2 || f.shape()[1] != self.cfg.input_dim {
            return crate::error::dim_err(format!(
                "encoder expects [L, {}] features, got {:?}",
                self.cfg.input_dim,
                f.shape()
            ));
        }
        let h = self.input.forward(s, features)?;
        self.forward_stack(s, h)
    }
}
