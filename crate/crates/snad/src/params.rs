//! Flat parameter storage shared by layers, optimizers and checkpoints.
//!
//! Layers hold indices into a [`ParamSet`] rather than owning tensors, so one
//! registration pass puts every trainable tensor on a tape exactly once and
//! the optimizer can walk the set without knowing the network structure.

use crate::error::Result;
use crate::rng::normal_tensor;
use crate::tape::{GradTape, Var};
use crate::tensor::{ConvSpec, Tensor};
use rand::Rng;

/// Role recorded in checkpoint manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

impl ParamRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(ParamRole::Weight),
            "bias" => Some(ParamRole::Bias),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: ParamRole) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            role,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].value
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    /// Total scalar count across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Registers every entry as a trainable tape parameter, in order.
    pub fn register(&self, tape: &mut GradTape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.param(&e.name, e.value.clone()))
            .collect()
    }

    /// Places every entry on the tape as a frozen constant (gradients may
    /// flow through but the tensors are not reported as trainable).
    pub fn register_frozen(&self, tape: &mut GradTape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Kaiming-style normal scaled by fan-in.
    He,
    /// All zeros (identity-at-init heads).
    Zero,
    Normal(f64),
}

fn init_tensor(shape: [usize; 4], init: Init, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Normal(std) => normal_tensor(shape, rng, std),
        Init::He => normal_tensor(shape, rng, (2.0 / fan_in as f64).sqrt()),
    }
}

/// A convolution layer: spec + indices of its weight/bias in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub weight: usize,
    pub bias: usize,
}

impl ConvLayer {
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        spec: ConvSpec,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let weight = init_tensor(spec.weight_shape(), init, fan_in, rng);
        let bias = Tensor::zeros([1, spec.out_channels, 1, 1]);
        ConvLayer {
            weight: set.add(format!("{prefix}.weight"), weight, ParamRole::Weight),
            bias: set.add(format!("{prefix}.bias"), bias, ParamRole::Bias),
            spec,
        }
    }

    pub fn forward(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv2d(x, vars[self.weight], Some(vars[self.bias]), &self.spec)
    }
}

/// A stride-2 transposed convolution layer; weight layout `(inC, outC, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTransposeLayer {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvTransposeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        set: &mut ParamSet,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let shape = [in_channels, out_channels, kernel, kernel];
        let fan_in = in_channels * kernel * kernel;
        let weight = init_tensor(shape, init, fan_in, rng);
        let bias = Tensor::zeros([1, out_channels, 1, 1]);
        ConvTransposeLayer {
            weight: set.add(format!("{prefix}.weight"), weight, ParamRole::Weight),
            bias: set.add(format!("{prefix}.bias"), bias, ParamRole::Bias),
            stride,
            padding,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, tape: &mut GradTape, vars: &[Var], x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, vars[self.weight], Some(vars[self.bias]), self.stride, self.padding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng;

    #[test]
    fn registration_matches_indices() {
        let mut set = ParamSet::new();
        let mut r = rng(61);
        let spec = ConvSpec::same(4, 2, 3).unwrap();
        let layer = ConvLayer::init(&mut set, "probe", spec, Init::He, &mut r);
        assert_eq!(set.len(), 2);
        assert_eq!(set.entry(layer.weight).role, ParamRole::Weight);
        assert_eq!(set.entry(layer.bias).role, ParamRole::Bias);

        let mut tape = GradTape::new();
        let vars = set.register(&mut tape);
        assert_eq!(tape.param_count(), 2);
        assert_eq!(tape.value(vars[layer.weight]).shape(), [4, 2, 3, 3]);
    }

    #[test]
    fn zero_init_heads_are_zero() {
        let mut set = ParamSet::new();
        let mut r = rng(62);
        let spec = ConvSpec::same(3, 3, 3).unwrap();
        let layer = ConvLayer::init(&mut set, "head", spec, Init::Zero, &mut r);
        assert!(set.get(layer.weight).data().iter().all(|&v| v == 0.0));
    }
}
