use rand::Rng;
use serde::{Deserialize, Serialize};
use steallab_autodiff::{Parameter, Tape, Tensor, Var};

use super::{he_uniform, InputKind, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Tiny,
    Small,
    Medium,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierFamily {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input: InputKind,
    pub num_classes: usize,
    pub capacity: Capacity,
    pub family: ClassifierFamily,
}

impl ClassifierSpec {
    pub fn mlp(dim: usize, num_classes: usize, capacity: Capacity) -> Self {
        Self {
            input: InputKind::Vector { dim },
            num_classes,
            capacity,
            family: ClassifierFamily::Mlp,
        }
    }

    pub fn conv(channels: usize, height: usize, width: usize, num_classes: usize, capacity: Capacity) -> Self {
        Self {
            input: InputKind::Image {
                channels,
                height,
                width,
            },
            num_classes,
            capacity,
            family: ClassifierFamily::Conv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        match (self.family, self.input) {
            (ClassifierFamily::Mlp, InputKind::Vector { dim }) if dim >= 1 => Ok(()),
            (ClassifierFamily::Conv, InputKind::Image { channels, height, width })
                if channels >= 1 && height % 4 == 0 && width % 4 == 0 && height > 0 && width > 0 =>
            {
                Ok(())
            }
            (ClassifierFamily::Conv, InputKind::Image { .. }) => Err(Error::InvalidSpec(
                "conv classifiers need image sides divisible by 4".into(),
            )),
            (family, input) => Err(Error::InvalidSpec(format!("{family:?} family cannot take {input:?}"))),
        }
    }

    /// Hidden widths of the MLP preset.
    pub fn mlp_hidden(&self) -> &'static [usize] {
        match self.capacity {
            Capacity::Tiny => &[16, 16],
            Capacity::Small => &[32, 32],
            Capacity::Medium => &[64, 64, 64],
        }
    }

    /// (conv1 channels, conv2 channels, optional dense hidden width) of the CNN preset.
    pub fn conv_widths(&self) -> (usize, usize, Option<usize>) {
        match self.capacity {
            Capacity::Tiny => (4, 8, None),
            Capacity::Small => (8, 16, None),
            Capacity::Medium => (16, 32, Some(64)),
        }
    }

    /// Closed-form parameter count of the preset.
    ///
    /// MLP: Σ (fan_in·fan_out + fan_out) over the dense chain d → hidden… → K.
    /// CNN: 9·C·c1 + c1 + 9·c1·c2 + c2, then dense layers from c2·(H/4)·(W/4).
    pub fn param_count(&self) -> usize {
        let k = self.num_classes;
        let dense = |widths: &[usize]| -> usize { widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum() };
        match self.input {
            InputKind::Vector { dim } => {
                let mut widths = vec![dim];
                widths.extend_from_slice(self.mlp_hidden());
                widths.push(k);
                dense(&widths)
            }
            InputKind::Image {
                channels,
                height,
                width,
            } => {
                let (c1, c2, hidden) = self.conv_widths();
                let conv = 9 * channels * c1 + c1 + 9 * c1 * c2 + c2;
                let flat = c2 * (height / 4) * (width / 4);
                let mut widths = vec![flat];
                widths.extend(hidden);
                widths.push(k);
                conv + dense(&widths)
            }
        }
    }
}

/// MLP or two-block CNN classifier producing raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    spec: ClassifierSpec,
    params: Vec<Parameter>,
    mode: Mode,
}

impl ClassifierModel {
    /// He-uniform weights, zero biases.
    pub fn build<R: Rng + ?Sized>(spec: ClassifierSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = Vec::new();
        let dense = |params: &mut Vec<Parameter>, prefix: &str, widths: &[usize], rng: &mut R| {
            for (i, w) in widths.windows(2).enumerate() {
                params.push(Parameter::new(format!("{prefix}{i}.weight"), he_uniform(&[w[0], w[1]], w[0], rng)));
                params.push(Parameter::new(format!("{prefix}{i}.bias"), Tensor::zeros(&[w[1]])));
            }
        };
        match spec.input {
            InputKind::Vector { dim } => {
                let mut widths = vec![dim];
                widths.extend_from_slice(spec.mlp_hidden());
                widths.push(spec.num_classes);
                dense(&mut params, "fc", &widths, rng);
            }
            InputKind::Image {
                channels,
                height,
                width,
            } => {
                let (c1, c2, hidden) = spec.conv_widths();
                params.push(Parameter::new("conv0.weight", he_uniform(&[c1, channels, 3, 3], channels * 9, rng)));
                params.push(Parameter::new("conv0.bias", Tensor::zeros(&[c1])));
                params.push(Parameter::new("conv1.weight", he_uniform(&[c2, c1, 3, 3], c1 * 9, rng)));
                params.push(Parameter::new("conv1.bias", Tensor::zeros(&[c2])));
                let mut widths = vec![c2 * (height / 4) * (width / 4)];
                widths.extend(hidden);
                widths.push(spec.num_classes);
                dense(&mut params, "fc", &widths, rng);
            }
        }
        Ok(Self {
            spec,
            params,
            mode: Mode::Train,
        })
    }

    pub(crate) fn from_parts(spec: ClassifierSpec, params: Vec<Parameter>) -> Self {
        Self {
            spec,
            params,
            mode: Mode::Eval,
        }
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
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

    /// The architecture has no mode-dependent layers; the flag is recorded for callers.
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Builds the logits of `x` on `tape`. With `track` false the parameters
    /// enter as constants, so gradients reach only `x`.
    pub fn forward(&self, tape: &mut Tape, x: Var, track: bool) -> Result<Var> {
        self.spec.input.check_batch(tape.value(x))?;
        let bind = |tape: &mut Tape, p: &Parameter| if track { tape.param(p) } else { tape.frozen(p) };
        let mut h = x;
        let mut rest = &self.params[..];
        if let ClassifierFamily::Conv = self.spec.family {
            for _ in 0..2 {
                let (w, b) = (bind(tape, &rest[0]), bind(tape, &rest[1]));
                h = tape.conv2d(h, w, Some(b), 1)?;
                h = tape.relu(h)?;
                h = tape.max_pool2(h)?;
                rest = &rest[2..];
            }
            h = tape.flatten(h)?;
        }
        let layers = rest.len() / 2;
        for (i, pair) in rest.chunks(2).enumerate() {
            let (w, b) = (bind(tape, &pair[0]), bind(tape, &pair[1]));
            h = tape.linear(h, w, b)?;
            if i + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Logits without gradient tracking.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(y).clone())
    }

    /// Argmax labels, lowest index on ties.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.classify(x)?.argmax_rows())
    }

    /// Copy of this model with every logit negated (last layer sign-flipped).
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        let n = out.params.len();
        for p in &mut out.params[n - 2..] {
            p.tensor = p.tensor.map(|v| -v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_logit_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ClassifierModel::build(ClassifierSpec::mlp(2, 4, Capacity::Tiny), &mut rng).unwrap();
        let x = Tensor::randn(&[5, 2], &mut rng);
        assert_eq!(m.classify(&x).unwrap().shape(), &[5, 4]);
    }

    #[test]
    fn conv_small_param_count_matches_closed_form() {
        let spec = ClassifierSpec::conv(1, 8, 8, 10, Capacity::Small);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ClassifierModel::build(spec, &mut rng).unwrap();
        // conv0 8·1·9+8, conv1 16·8·9+16, fc 64·10+10
        assert_eq!(m.param_count(), 80 + 1168 + 650);
        assert_eq!(spec.param_count(), m.param_count());
    }

    #[test]
    fn closed_form_holds_for_every_preset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cap in [Capacity::Tiny, Capacity::Small, Capacity::Medium] {
            for spec in [ClassifierSpec::mlp(16, 4, cap), ClassifierSpec::conv(1, 8, 8, 10, cap)] {
                let m = ClassifierModel::build(spec, &mut rng).unwrap();
                assert_eq!(m.param_count(), spec.param_count(), "{spec:?}");
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = ClassifierSpec::conv(1, 8, 8, 10, Capacity::Tiny);
        let a = ClassifierModel::build(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = ClassifierModel::build(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn biases_start_at_zero() {
        let m = ClassifierModel::build(ClassifierSpec::mlp(3, 2, Capacity::Small), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for p in m.params().iter().filter(|p| p.name.ends_with("bias")) {
            assert!(p.tensor.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(ClassifierModel::build(ClassifierSpec::mlp(2, 1, Capacity::Tiny), &mut rng).is_err());
        let mut image_mlp = ClassifierSpec::conv(1, 8, 8, 10, Capacity::Tiny);
        image_mlp.family = ClassifierFamily::Mlp;
        assert!(ClassifierModel::build(image_mlp, &mut rng).is_err());
        let mut vector_conv = ClassifierSpec::mlp(4, 3, Capacity::Tiny);
        vector_conv.family = ClassifierFamily::Conv;
        assert!(ClassifierModel::build(vector_conv, &mut rng).is_err());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ClassifierModel::build(ClassifierSpec::mlp(2, 4, Capacity::Tiny), &mut rng).unwrap();
        assert!(m.classify(&Tensor::zeros(&[3, 5])).is_err());
    }
}
