use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};

use super::{Architecture, Binding, Builder, Ctx, Network};

/// Registers the parameters of a residual bottleneck unit under `name`:
/// a 1×1 reduce conv (C→C/2) and a 3×3 restore conv (C/2→C), each followed
/// by batch norm. Returns the parameter count.
pub(super) fn add_unit(b: &mut Builder, name: &str, channels: usize, side: usize) -> Result<usize> {
    if channels < 2 || !channels.is_multiple_of(2) {
        return Err(Error::Config(format!("residual unit {name} needs an even channel count >= 2, got {channels}")));
    }
    let half = channels / 2;
    let full = [1, channels, side, side];
    let reduced = [1, half, side, side];
    let mut total = 0;

    let n = b.conv(&format!("{name}.reduce"), [half, channels, 1, 1], channels)?;
    b.layer(format!("{name}.reduce"), "conv1x1", full, reduced, n);
    total += n;
    let n = b.batch_norm(&format!("{name}.bn1"), half)?;
    b.layer(format!("{name}.bn1"), "batch_norm", reduced, reduced, n);
    total += n;
    b.layer(format!("{name}.act"), "activation", reduced, reduced, 0);
    let n = b.conv(&format!("{name}.restore"), [channels, half, 3, 3], half * 9)?;
    b.layer(format!("{name}.restore"), "conv3x3", reduced, full, n);
    total += n;
    let n = b.batch_norm(&format!("{name}.bn2"), channels)?;
    b.layer(format!("{name}.bn2"), "batch_norm", full, full, n);
    total += n;
    b.layer(format!("{name}.add"), "residual_add", full, full, 0);
    Ok(total)
}

pub(super) fn unit(ctx: &mut Ctx<'_>, name: &str, x: Var, act: Activation) -> Result<Var> {
    let c = ctx.tape.value(x).dims4("residual_bottleneck")?.1;
    if c % 2 != 0 {
        return Err(Error::shape("residual_bottleneck", format!("channel count {c} is odd")));
    }
    let h = ctx.conv(&format!("{name}.reduce"), x, 1, 0)?;
    let h = ctx.batch_norm(&format!("{name}.bn1"), h)?;
    let h = ctx.tape.activation(h, act)?;
    let h = ctx.conv(&format!("{name}.restore"), h, 1, 1)?;
    let h = ctx.batch_norm(&format!("{name}.bn2"), h)?;
    ctx.tape.add(x, h)
}

/// A standalone residual bottleneck unit with parameters under `unit.`.
pub fn build_residual_unit(channels: usize, activation: Activation, seed: u64) -> Result<Network> {
    let mut b = Builder::new(seed);
    add_unit(&mut b, "unit", channels, 1)?;
    // spatial extents in the table are placeholders for a size-agnostic unit
    Ok(b.finish(Architecture::ResidualUnit { channels, activation }))
}

/// `x + f(x)` where `f` = 1×1 conv (C→C/2) → BN → act → 3×3 conv (C/2→C) → BN.
pub fn residual_bottleneck_forward(
    net: &mut Network,
    tape: &mut Tape,
    binding: &Binding,
    name: &str,
    x: Var,
) -> Result<Var> {
    let act = match &net.arch {
        Architecture::ResidualUnit { activation, .. } => *activation,
        Architecture::Generator(cfg) => Activation::LeakyRelu(cfg.leak),
        Architecture::Discriminator(_) => return Err(Error::Config("the discriminator has no residual units".into())),
    };
    unit(&mut net.ctx(tape, binding), name, x, act)
}
