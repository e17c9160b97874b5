use rand::Rng;
use serde::{Deserialize, Serialize};
use steallab_autodiff::{BatchStats, Parameter, Tape, Tensor, UpsampleMode, Var};

use super::{he_uniform, InputKind, Mode};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub output: InputKind,
    /// Image outputs: upsample→conv→BN→ReLU blocks. Vector outputs: dense→BN→ReLU blocks.
    /// Zero leaves a single linear layer before the tanh head.
    pub num_blocks: usize,
    /// Width of the last block; earlier image blocks double it per level.
    pub base_channels: usize,
    #[serde(default = "default_upsample", with = "upsample_serde")]
    pub upsample: UpsampleMode,
}

fn default_upsample() -> UpsampleMode {
    UpsampleMode::Nearest
}

mod upsample_serde {
    use serde::{Deserialize, Deserializer, Serializer};
    use steallab_autodiff::UpsampleMode;

    pub fn serialize<S: Serializer>(m: &UpsampleMode, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match m {
            UpsampleMode::Nearest => "nearest",
            UpsampleMode::Bilinear => "bilinear",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<UpsampleMode, D::Error> {
        match String::deserialize(d)?.as_str() {
            "nearest" => Ok(UpsampleMode::Nearest),
            "bilinear" => Ok(UpsampleMode::Bilinear),
            other => Err(serde::de::Error::custom(format!("unknown upsample mode `{other}`"))),
        }
    }
}

impl GeneratorSpec {
    pub const DEFAULT_LATENT: usize = 64;

    /// Default generator for an input domain: three blocks either way.
    pub fn for_output(output: InputKind) -> Self {
        let base_channels = match output {
            InputKind::Vector { .. } => 64,
            InputKind::Image { .. } => 8,
        };
        Self {
            latent_dim: Self::DEFAULT_LATENT,
            output,
            num_blocks: 3,
            base_channels,
            upsample: UpsampleMode::Nearest,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(Error::InvalidSpec("latent_dim and base_channels must be positive".into()));
        }
        if self.num_blocks > 3 {
            return Err(Error::InvalidSpec(format!("num_blocks must be 0..=3, got {}", self.num_blocks)));
        }
        if let InputKind::Image { height, width, channels } = self.output {
            let f = 1 << self.num_blocks;
            if channels == 0 || height == 0 || width == 0 || height % f != 0 || width % f != 0 {
                return Err(Error::InvalidSpec(format!(
                    "{height}x{width} output is not divisible by 2^{} upsampling",
                    self.num_blocks
                )));
            }
        }
        if self.output.numel() == 0 {
            return Err(Error::InvalidSpec("empty output".into()));
        }
        Ok(())
    }

    /// Channel widths entering each image block, then the width leaving the last one.
    fn image_widths(&self) -> Vec<usize> {
        (0..=self.num_blocks).rev().map(|i| self.base_channels << i).collect()
    }
}

/// Latent noise → sample in [−1, 1] generator with batch-normalized blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorModel {
    spec: GeneratorSpec,
    params: Vec<Parameter>,
    mode: Mode,
}

fn bn_params(params: &mut Vec<Parameter>, name: &str, c: usize) {
    params.push(Parameter::new(format!("{name}.gamma"), Tensor::full(&[c], 1.0)));
    params.push(Parameter::new(format!("{name}.beta"), Tensor::zeros(&[c])));
    let mut rm = Parameter::new(format!("{name}.running_mean"), Tensor::zeros(&[c]));
    let mut rv = Parameter::new(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
    rm.trainable = false;
    rv.trainable = false;
    params.push(rm);
    params.push(rv);
}

impl GeneratorModel {
    pub fn build<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let latent = spec.latent_dim;
        match spec.output {
            _ if spec.num_blocks == 0 => {
                let out = spec.output.numel();
                params.push(Parameter::new("fc.weight", he_uniform(&[latent, out], latent, rng)));
                params.push(Parameter::new("fc.bias", Tensor::zeros(&[out])));
            }
            InputKind::Vector { dim } => {
                let width = spec.base_channels;
                let mut fan_in = latent;
                for i in 0..spec.num_blocks {
                    params.push(Parameter::new(format!("block{i}.weight"), he_uniform(&[fan_in, width], fan_in, rng)));
                    params.push(Parameter::new(format!("block{i}.bias"), Tensor::zeros(&[width])));
                    bn_params(&mut params, &format!("block{i}.bn"), width);
                    fan_in = width;
                }
                params.push(Parameter::new("head.weight", he_uniform(&[fan_in, dim], fan_in, rng)));
                params.push(Parameter::new("head.bias", Tensor::zeros(&[dim])));
            }
            InputKind::Image {
                channels,
                height,
                width,
            } => {
                let widths = spec.image_widths();
                let f = 1 << spec.num_blocks;
                let start = widths[0] * (height / f) * (width / f);
                params.push(Parameter::new("fc.weight", he_uniform(&[latent, start], latent, rng)));
                params.push(Parameter::new("fc.bias", Tensor::zeros(&[start])));
                bn_params(&mut params, "fc.bn", widths[0]);
                for i in 0..spec.num_blocks {
                    let (cin, cout) = (widths[i], widths[i + 1]);
                    params.push(Parameter::new(
                        format!("block{i}.weight"),
                        he_uniform(&[cout, cin, 3, 3], cin * 9, rng),
                    ));
                    params.push(Parameter::new(format!("block{i}.bias"), Tensor::zeros(&[cout])));
                    bn_params(&mut params, &format!("block{i}.bn"), cout);
                }
                let last = widths[spec.num_blocks];
                params.push(Parameter::new("head.weight", he_uniform(&[channels, last, 1, 1], last, rng)));
                params.push(Parameter::new("head.bias", Tensor::zeros(&[channels])));
            }
        }
        Ok(Self {
            spec,
            params,
            mode: Mode::Train,
        })
    }

    pub(crate) fn from_parts(spec: GeneratorSpec, params: Vec<Parameter>) -> Self {
        Self {
            spec,
            params,
            mode: Mode::Eval,
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn param(&self, name: &str) -> &Parameter {
        self.params
            .iter()
            .find(|p| p.name == name)
            .unwrap_or_else(|| panic!("generator parameter `{name}` missing"))
    }

    /// Builds `G(z)` on `tape`. In train mode the running statistics of every
    /// batch-norm layer are updated from the batch.
    pub fn forward(&mut self, tape: &mut Tape, z: Var, track: bool) -> Result<Var> {
        let (out, stats) = self.forward_impl(tape, z, track, self.mode == Mode::Train)?;
        for (name, s) in stats {
            self.update_running(&name, &s);
        }
        Ok(out)
    }

    /// Eval-mode forward; never mutates the model.
    pub fn forward_eval(&self, tape: &mut Tape, z: Var, track: bool) -> Result<Var> {
        Ok(self.forward_impl(tape, z, track, false)?.0)
    }

    /// Samples without gradient tracking, honouring the current mode.
    pub fn generate(&mut self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let x = self.forward(&mut tape, zv, false)?;
        Ok(tape.value(x).clone())
    }

    /// Eval-mode samples; a pure function of `z`.
    pub fn generate_eval(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let x = self.forward_eval(&mut tape, zv, false)?;
        Ok(tape.value(x).clone())
    }

    fn update_running(&mut self, bn: &str, s: &BatchStats) {
        let unbias = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        for p in &mut self.params {
            if p.name == format!("{bn}.running_mean") {
                for (r, m) in p.tensor.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
            } else if p.name == format!("{bn}.running_var") {
                for (r, v) in p.tensor.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
                }
            }
        }
    }

    fn batch_norm(
        &self,
        tape: &mut Tape,
        h: Var,
        name: &str,
        track: bool,
        batch_stats: bool,
        stats: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let bind = |tape: &mut Tape, p: &Parameter| if track { tape.param(p) } else { tape.frozen(p) };
        let g = bind(tape, self.param(&format!("{name}.gamma")));
        let b = bind(tape, self.param(&format!("{name}.beta")));
        if batch_stats {
            let (y, s) = tape.batch_norm_train(h, g, b, BN_EPS)?;
            stats.push((name.to_string(), s));
            Ok(y)
        } else {
            let rm = self.param(&format!("{name}.running_mean")).tensor.data().to_vec();
            let rv = self.param(&format!("{name}.running_var")).tensor.data().to_vec();
            Ok(tape.batch_norm_eval(h, g, b, &rm, &rv, BN_EPS)?)
        }
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        z: Var,
        track: bool,
        batch_stats: bool,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        let s = tape.value(z).shape().to_vec();
        if s.len() != 2 || s[1] != self.spec.latent_dim {
            return Err(steallab_autodiff::AutodiffError::Shape {
                op: "generator input",
                detail: format!("expected (N, {}), got {s:?}", self.spec.latent_dim),
            }
            .into());
        }
        let n = s[0];
        let bind = |tape: &mut Tape, name: &str| {
            let p = self.param(name);
            if track {
                tape.param(p)
            } else {
                tape.frozen(p)
            }
        };
        let mut stats = Vec::new();
        let blocks = self.spec.num_blocks;
        let out_shape = self.spec.output.batch_shape(n);

        if blocks == 0 {
            let (w, b) = (bind(tape, "fc.weight"), bind(tape, "fc.bias"));
            let h = tape.linear(z, w, b)?;
            let h = tape.tanh(h)?;
            return Ok((tape.reshape(h, &out_shape)?, stats));
        }

        let mut h = z;
        match self.spec.output {
            InputKind::Vector { .. } => {
                for i in 0..blocks {
                    let (w, b) = (bind(tape, &format!("block{i}.weight")), bind(tape, &format!("block{i}.bias")));
                    h = tape.linear(h, w, b)?;
                    h = self.batch_norm(tape, h, &format!("block{i}.bn"), track, batch_stats, &mut stats)?;
                    h = tape.relu(h)?;
                }
                let (w, b) = (bind(tape, "head.weight"), bind(tape, "head.bias"));
                h = tape.linear(h, w, b)?;
            }
            InputKind::Image { height, width, .. } => {
                let widths = self.spec.image_widths();
                let f = 1 << blocks;
                let (w, b) = (bind(tape, "fc.weight"), bind(tape, "fc.bias"));
                h = tape.linear(h, w, b)?;
                h = tape.reshape(h, &[n, widths[0], height / f, width / f])?;
                h = self.batch_norm(tape, h, "fc.bn", track, batch_stats, &mut stats)?;
                for i in 0..blocks {
                    h = tape.upsample2(h, self.spec.upsample)?;
                    let (w, b) = (bind(tape, &format!("block{i}.weight")), bind(tape, &format!("block{i}.bias")));
                    h = tape.conv2d(h, w, Some(b), 1)?;
                    h = self.batch_norm(tape, h, &format!("block{i}.bn"), track, batch_stats, &mut stats)?;
                    h = tape.relu(h)?;
                }
                let (w, b) = (bind(tape, "head.weight"), bind(tape, "head.bias"));
                h = tape.conv2d(h, w, Some(b), 0)?;
            }
        }
        let h = tape.tanh(h)?;
        Ok((h, stats))
    }
}
