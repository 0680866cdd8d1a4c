//! Generator and discriminator networks built on the autodiff tape.
//!
//! A [`Network`] owns its trainable parameters and its batch-norm running
//! statistics. Forward passes take a [`Binding`], which places every
//! parameter on a tape either as a trainable leaf or as a constant; after
//! `backward`, [`Network::absorb_grads`] copies the leaf gradients back into
//! the parameter store for the optimizer.

mod discriminator;
mod generator;
mod residual;

use std::fmt;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use discriminator::{build_discriminator, discriminator_forward, DiscriminatorConfig};
pub use generator::{
    build_generator, generator_forward, generator_forward_traced, GeneratorConfig, GeneratorTrace, Probe,
};
pub use residual::{build_residual_unit, residual_bottleneck_forward};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Generator(GeneratorConfig),
    Discriminator(DiscriminatorConfig),
    /// A single residual bottleneck unit, mostly useful on its own in tests.
    ResidualUnit {
        channels: usize,
        activation: Activation,
    },
}

/// One row of the human-readable layer table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub params: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub arch: Architecture,
    pub params: ParamStore,
    /// Batch-norm running statistics; not touched by the optimizer.
    pub buffers: ParamStore,
    pub mode: Mode,
    layers: Vec<LayerInfo>,
}

/// Tape handles for every parameter of one network.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: IndexMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Binding from explicit handles, e.g. parameters placed on a tape by
    /// other means.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }
}

impl Network {
    /// Places all parameters on `tape`. With `trainable` false the
    /// parameters are constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Binding> {
        let mut vars = IndexMap::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let mut leaf = t.clone();
            leaf.requires_grad = trainable;
            vars.insert(name.to_string(), tape.leaf(leaf)?);
        }
        Ok(Binding { vars })
    }

    /// Adds the tape gradients of bound parameters into `params[*].grad`.
    pub fn absorb_grads(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        for (name, var) in binding.iter() {
            if let Some(g) = tape.grad(var) {
                self.params.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.zero_grad();
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    /// Trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameters followed by buffers, in checkpoint order.
    pub fn state_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().chain(self.buffers.iter())
    }

    /// Copies values for every parameter and buffer from `store`.
    pub fn load_state(&mut self, store: &ParamStore) -> Result<()> {
        for (name, t) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let src = store.get(name).map_err(|_| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, network expects {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Forward for single-input architectures (generator, residual unit).
    pub fn forward(&mut self, tape: &mut Tape, binding: &Binding, x: Var) -> Result<Var> {
        match self.arch {
            Architecture::Generator(_) => generator_forward(self, tape, binding, x),
            Architecture::ResidualUnit { .. } => residual_bottleneck_forward(self, tape, binding, "unit", x),
            Architecture::Discriminator(_) => {
                Err(Error::Config("the discriminator takes an (image, label) pair".into()))
            }
        }
    }

    fn ctx<'a>(&'a mut self, tape: &'a mut Tape, binding: &'a Binding) -> Ctx<'a> {
        Ctx { tape, binding, buffers: &mut self.buffers, mode: self.mode }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:<18} {:<20} {:<20} {:>10}", "name", "type", "in", "out", "params")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<28} {:<18} {:<20} {:<20} {:>10}",
                l.name,
                l.kind,
                format!("{:?}", l.in_shape),
                format!("{:?}", l.out_shape),
                l.params
            )?;
        }
        write!(f, "total trainable parameters: {}", self.param_count())
    }
}

/// Parameter construction shared by the builders.
struct Builder {
    rng: ChaCha8Rng,
    params: ParamStore,
    buffers: ParamStore,
    layers: Vec<LayerInfo>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamStore::new(),
            buffers: ParamStore::new(),
            layers: Vec::new(),
        }
    }

    /// He-scaled Gaussian weights, zero bias. `shape` is the weight shape,
    /// `fan_in` the number of inputs feeding each output.
    fn conv(&mut self, name: &str, shape: [usize; 4], fan_in: usize) -> Result<usize> {
        self.weighted(name, shape, fan_in, shape[0])
    }

    /// Transposed-conv weights are laid out [in, out, kh, kw].
    fn deconv(&mut self, name: &str, shape: [usize; 4], fan_in: usize) -> Result<usize> {
        self.weighted(name, shape, fan_in, shape[1])
    }

    fn weighted(&mut self, name: &str, shape: [usize; 4], fan_in: usize, bias_len: usize) -> Result<usize> {
        let std = (2.0 / fan_in as f64).sqrt();
        let w = Tensor::randn(&shape, std, &mut self.rng);
        let count = w.numel() + bias_len;
        self.params.insert(format!("{name}.weight"), w)?;
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[bias_len]))?;
        Ok(count)
    }

    fn batch_norm(&mut self, name: &str, channels: usize) -> Result<usize> {
        self.params.insert(format!("{name}.gamma"), Tensor::ones(&[channels]))?;
        self.params.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
        self.buffers.insert(format!("{name}.running_var"), Tensor::ones(&[channels]))?;
        self.buffers.insert(format!("{name}.tracked"), Tensor::zeros(&[1]))?;
        Ok(2 * channels)
    }

    fn layer(
        &mut self,
        name: impl Into<String>,
        kind: &str,
        in_shape: [usize; 4],
        out_shape: [usize; 4],
        params: usize,
    ) {
        self.layers.push(LayerInfo {
            name: name.into(),
            kind: kind.to_string(),
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
            params,
        });
    }

    fn finish(self, arch: Architecture) -> Network {
        Network { arch, params: self.params, buffers: self.buffers, mode: Mode::Train, layers: self.layers }
    }
}

/// Per-forward view of the pieces a layer needs.
struct Ctx<'a> {
    tape: &'a mut Tape,
    binding: &'a Binding,
    buffers: &'a mut ParamStore,
    mode: Mode,
}

impl Ctx<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.binding.var(name)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.weight"))?, self.p(&format!("{name}.bias"))?);
        self.tape.conv2d(x, w, b, stride, pad)
    }

    fn deconv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let (w, b) = (self.p(&format!("{name}.weight"))?, self.p(&format!("{name}.bias"))?);
        self.tape.conv_transpose2d(x, w, b, stride, pad)
    }

    /// Batch norm with batch statistics (train) or running statistics (eval).
    fn batch_norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        let mean_key = format!("{name}.running_mean");
        let var_key = format!("{name}.running_var");
        let tracked_key = format!("{name}.tracked");
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let blend = |running: &mut Tensor, batch: &[f64]| {
                    for (r, b) in running.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                };
                blend(self.buffers.get_mut(&mean_key)?, &stats.mean);
                blend(self.buffers.get_mut(&var_key)?, &stats.var);
                self.buffers.get_mut(&tracked_key)?.data_mut()[0] += 1.0;
                Ok(y)
            }
            Mode::Eval => {
                if self.buffers.get(&tracked_key)?.data()[0] < 1.0 {
                    return Err(Error::MissingRunningStats(name.to_string()));
                }
                let mean = self.buffers.get(&mean_key)?.data().to_vec();
                let var = self.buffers.get(&var_key)?.data().to_vec();
                self.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}
