use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};

use super::{Architecture, Binding, Builder, Network};

/// Strided-conv classifier on (image, label) pairs.
///
/// Stage `i` is a 4×4 stride-2 conv to `base·2^min(i,3)` channels, batch
/// norm (skipped on the first stage) and LeakyReLU. A 1×1 conv to one
/// channel, a sigmoid and a spatial mean give one probability per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub x_channels: usize,
    pub y_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    /// Side used for the layer table; the forward pass is size-agnostic.
    pub side: usize,
    pub leak: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { x_channels: 3, y_channels: 1, depth: 4, base_channels: 32, side: 64, leak: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn input_channels(&self) -> usize {
        self.x_channels + self.y_channels
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage.min(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_channels == 0 || self.y_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("discriminator channel counts must be positive".into()));
        }
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::Config(format!("discriminator depth must lie in 1..=16, got {}", self.depth)));
        }
        if self.side >> self.depth == 0 {
            return Err(Error::Config(format!("side {} too small for depth {}", self.side, self.depth)));
        }
        if !(self.leak > 0.0 && self.leak < 1.0) {
            return Err(Error::Config(format!("leak slope must lie in (0,1), got {}", self.leak)));
        }
        Ok(())
    }
}

pub fn build_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut b = Builder::new(seed);
    let mut c_in = cfg.input_channels();
    let mut side = cfg.side;
    b.layer("concat", "concat_pair", [1, cfg.x_channels, side, side], [1, c_in, side, side], 0);
    for i in 0..cfg.depth {
        let c = cfg.stage_channels(i);
        let name = format!("stage{i}");
        let out = (side + 2 - 4) / 2 + 1;
        let n = b.conv(&format!("{name}.conv"), [c, c_in, 4, 4], c_in * 16)?;
        b.layer(format!("{name}.conv"), "conv4x4/s2", [1, c_in, side, side], [1, c, out, out], n);
        side = out;
        if i > 0 {
            let n = b.batch_norm(&format!("{name}.bn"), c)?;
            b.layer(format!("{name}.bn"), "batch_norm", [1, c, side, side], [1, c, side, side], n);
        }
        b.layer(format!("{name}.act"), "leaky_relu", [1, c, side, side], [1, c, side, side], 0);
        c_in = c;
    }
    let n = b.conv("head", [1, c_in, 1, 1], c_in)?;
    b.layer("head", "conv1x1", [1, c_in, side, side], [1, 1, side, side], n);
    b.layer("head.act", "sigmoid", [1, 1, side, side], [1, 1, side, side], 0);
    b.layer("head.mean", "spatial_mean", [1, 1, side, side], [1, 1, 1, 1], 0);
    Ok(b.finish(Architecture::Discriminator(cfg.clone())))
}

/// Probability per sample, shape [N], that `y` is an expert label for `x`.
pub fn discriminator_forward(net: &mut Network, tape: &mut Tape, binding: &Binding, x: Var, y: Var) -> Result<Var> {
    let Architecture::Discriminator(cfg) = &net.arch else {
        return Err(Error::Config("network is not a discriminator".into()));
    };
    let cfg = cfg.clone();
    let (nx, cx, hx, wx) = tape.value(x).dims4("discriminator_forward")?;
    let (ny, cy, hy, wy) = tape.value(y).dims4("discriminator_forward")?;
    if (nx, hx, wx) != (ny, hy, wy) {
        return Err(Error::shape(
            "discriminator_forward",
            format!(
                "image {:?} and label {:?} differ in batch or spatial size",
                tape.value(x).shape(),
                tape.value(y).shape()
            ),
        ));
    }
    if cx != cfg.x_channels || cy != cfg.y_channels {
        return Err(Error::shape(
            "discriminator_forward",
            format!("got {cx}+{cy} channels, expected {}+{}", cfg.x_channels, cfg.y_channels),
        ));
    }

    let lrelu = Activation::LeakyRelu(cfg.leak);
    let mut ctx = net.ctx(tape, binding);
    let mut h = ctx.tape.concat_channels(x, y)?;
    for i in 0..cfg.depth {
        let name = format!("stage{i}");
        h = ctx.conv(&format!("{name}.conv"), h, 2, 1)?;
        if i > 0 {
            h = ctx.batch_norm(&format!("{name}.bn"), h)?;
        }
        h = ctx.tape.activation(h, lrelu)?;
    }
    let logits = ctx.conv("head", h, 1, 0)?;
    let prob = ctx.tape.sigmoid(logits)?;
    ctx.tape.mean_per_sample(prob)
}
