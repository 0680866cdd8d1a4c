use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};

use super::residual::{add_unit, unit};
use super::{Architecture, Binding, Builder, Network};

/// U-shaped encoder/decoder with skip connections.
///
/// Encoder stage `i` (0-based) is a 4×4 stride-2 conv to
/// `base·2^min(i,3)` channels, batch norm, LeakyReLU and one residual
/// bottleneck unit. Decoder stage `j` is a 4×4 stride-2 transposed conv,
/// batch norm and ReLU; from the second decoder stage on, its input is the
/// previous decoder output concatenated with the mirrored encoder output.
/// A 1×1 conv and Tanh produce the output map.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub side: usize,
    pub leak: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { input_channels: 3, output_channels: 1, depth: 4, base_channels: 32, side: 64, leak: 0.2 }
    }
}

impl GeneratorConfig {
    /// Full-resolution 512×512 configuration.
    pub fn full_scale() -> Self {
        Self { depth: 8, base_channels: 64, side: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::Config("generator channel counts must be positive".into()));
        }
        if self.depth == 0 || self.depth > 16 {
            return Err(Error::Config(format!("generator depth must lie in 1..=16, got {}", self.depth)));
        }
        if self.base_channels < 2 || !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config(format!("base_channels must be even and >= 2, got {}", self.base_channels)));
        }
        let unit = 1usize << self.depth;
        if self.side == 0 || !self.side.is_multiple_of(unit) {
            return Err(Error::Config(format!("side {} is not divisible by 2^depth = {unit}", self.side)));
        }
        if !(self.leak > 0.0 && self.leak < 1.0) {
            return Err(Error::Config(format!("leak slope must lie in (0,1), got {}", self.leak)));
        }
        Ok(())
    }

    pub fn encoder_channels(&self, stage: usize) -> usize {
        self.base_channels << stage.min(3)
    }

    /// Channels produced by decoder stage `stage`: those of the encoder stage
    /// it is concatenated with next, and `base` for the last stage.
    pub fn decoder_out_channels(&self, stage: usize) -> usize {
        if stage + 1 < self.depth {
            self.encoder_channels(self.depth - 2 - stage)
        } else {
            self.base_channels
        }
    }

    pub fn decoder_in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.encoder_channels(self.depth - 1)
        } else {
            self.decoder_out_channels(stage - 1) + self.encoder_channels(self.depth - 1 - stage)
        }
    }

    /// Encoder stage whose output is the skip input of decoder `stage`
    /// (for stage 0 this is the bottleneck itself).
    pub fn mirrored_encoder_stage(&self, stage: usize) -> usize {
        self.depth - 1 - stage
    }
}

pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut b = Builder::new(seed);
    let s = cfg.side;

    let mut c_in = cfg.input_channels;
    let mut side = s;
    for i in 0..cfg.depth {
        let c = cfg.encoder_channels(i);
        let name = format!("enc{i}");
        let n = b.conv(&format!("{name}.conv"), [c, c_in, 4, 4], c_in * 16)?;
        b.layer(format!("{name}.conv"), "conv4x4/s2", [1, c_in, side, side], [1, c, side / 2, side / 2], n);
        side /= 2;
        let n = b.batch_norm(&format!("{name}.bn"), c)?;
        b.layer(format!("{name}.bn"), "batch_norm", [1, c, side, side], [1, c, side, side], n);
        b.layer(format!("{name}.act"), "leaky_relu", [1, c, side, side], [1, c, side, side], 0);
        add_unit(&mut b, &format!("{name}.res"), c, side)?;
        c_in = c;
    }

    for j in 0..cfg.depth {
        let name = format!("dec{j}");
        let ci = cfg.decoder_in_channels(j);
        let co = cfg.decoder_out_channels(j);
        if j > 0 {
            b.layer(
                format!("{name}.concat"),
                "concat_skip",
                [1, cfg.decoder_out_channels(j - 1), side, side],
                [1, ci, side, side],
                0,
            );
        }
        let n = b.deconv(&format!("{name}.deconv"), [ci, co, 4, 4], ci * 16)?;
        b.layer(format!("{name}.deconv"), "deconv4x4/s2", [1, ci, side, side], [1, co, side * 2, side * 2], n);
        side *= 2;
        let n = b.batch_norm(&format!("{name}.bn"), co)?;
        b.layer(format!("{name}.bn"), "batch_norm", [1, co, side, side], [1, co, side, side], n);
        b.layer(format!("{name}.act"), "relu", [1, co, side, side], [1, co, side, side], 0);
    }

    let c = cfg.base_channels;
    let n = b.conv("head", [cfg.output_channels, c, 1, 1], c)?;
    b.layer("head", "conv1x1", [1, c, s, s], [1, cfg.output_channels, s, s], n);
    b.layer("head.act", "tanh", [1, cfg.output_channels, s, s], [1, cfg.output_channels, s, s], 0);
    Ok(b.finish(Architecture::Generator(cfg.clone())))
}

/// Intervention hooks for inspecting the skip wiring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Probe {
    /// Zero the tensor carried from this encoder stage to its mirrored
    /// decoder stage (the encoder path itself is left intact).
    pub zero_skip: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct GeneratorTrace {
    pub encoder_outputs: Vec<Var>,
    pub decoder_inputs: Vec<Var>,
    pub decoder_outputs: Vec<Var>,
    pub output: Var,
}

pub fn generator_forward(net: &mut Network, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
    Ok(generator_forward_traced(net, tape, binding, x, Probe::default())?.output)
}

pub fn generator_forward_traced(
    net: &mut Network,
    tape: &mut Tape,
    binding: &Binding,
    x: Var,
    probe: Probe,
) -> Result<GeneratorTrace> {
    let Architecture::Generator(cfg) = &net.arch else {
        return Err(Error::Config("network is not a generator".into()));
    };
    let cfg = cfg.clone();
    let (_, c, h, w) = tape.value(x).dims4("generator_forward")?;
    if c != cfg.input_channels {
        return Err(Error::shape(
            "generator_forward",
            format!("input has {c} channels, generator expects {}", cfg.input_channels),
        ));
    }
    let multiple = 1usize << cfg.depth;
    if h % multiple != 0 || w % multiple != 0 {
        return Err(Error::shape(
            "generator_forward",
            format!("spatial size {h}x{w} is not divisible by 2^depth = {multiple}"),
        ));
    }

    let lrelu = Activation::LeakyRelu(cfg.leak);
    let mut ctx = net.ctx(tape, binding);
    let mut encoder_outputs = Vec::with_capacity(cfg.depth);
    let mut hcur = x;
    for i in 0..cfg.depth {
        let name = format!("enc{i}");
        let t = ctx.conv(&format!("{name}.conv"), hcur, 2, 1)?;
        let t = ctx.batch_norm(&format!("{name}.bn"), t)?;
        let t = ctx.tape.activation(t, lrelu)?;
        hcur = unit(&mut ctx, &format!("{name}.res"), t, lrelu)?;
        encoder_outputs.push(hcur);
    }

    let skip = |ctx: &mut super::Ctx<'_>, stage: usize| -> Result<Var> {
        let e = encoder_outputs[stage];
        if probe.zero_skip == Some(stage) {
            ctx.tape.scale(e, 0.0)
        } else {
            Ok(e)
        }
    };

    let mut decoder_inputs = Vec::with_capacity(cfg.depth);
    let mut decoder_outputs = Vec::with_capacity(cfg.depth);
    for j in 0..cfg.depth {
        let name = format!("dec{j}");
        let mirrored = skip(&mut ctx, cfg.mirrored_encoder_stage(j))?;
        let input = if j == 0 { mirrored } else { ctx.tape.concat_channels(decoder_outputs[j - 1], mirrored)? };
        decoder_inputs.push(input);
        let t = ctx.deconv(&format!("{name}.deconv"), input, 2, 1)?;
        let t = ctx.batch_norm(&format!("{name}.bn"), t)?;
        decoder_outputs.push(ctx.tape.relu(t)?);
    }

    let t = ctx.conv("head", decoder_outputs[cfg.depth - 1], 1, 0)?;
    let output = ctx.tape.tanh(t)?;
    Ok(GeneratorTrace { encoder_outputs, decoder_inputs, decoder_outputs, output })
}
