use rand::Rng;
use rand_distr::StandardNormal;

use super::{ArchError, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Shape, Tape, Tensor};

/// Closed-form parameter count of a biased convolution.
pub fn conv_param_count(c_in: usize, c_out: usize, kernel: usize, groups: usize) -> usize {
    c_out * (c_in / groups) * kernel * kernel + c_out
}

/// Where layer constructors obtain their parameters.
pub(crate) trait ParamSource {
    /// Returns the id of parameter `name`; `fan_in` scales fresh weights
    /// (`None` for zero-initialised biases).
    fn param(&mut self, name: &str, shape: Shape, fan_in: Option<f64>) -> Result<ParamId>;
}

/// Creates fresh parameters: fan-in-scaled normal weights, zero biases.
pub(crate) struct Initializer<'a, T: Scalar, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
}

impl<T: Scalar, R: Rng> ParamSource for Initializer<'_, T, R> {
    fn param(&mut self, name: &str, shape: Shape, fan_in: Option<f64>) -> Result<ParamId> {
        let data = match fan_in {
            Some(f) => {
                let std = (1.0 / f).sqrt();
                (0..shape.numel())
                    .map(|_| T::from_f64(std * self.rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            }
            None => vec![T::zero(); shape.numel()],
        };
        Ok(self.store.add(name, Tensor::new(shape, data)?)?)
    }
}

/// Looks parameters up by name in an existing store.
pub(crate) struct Binder<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
}

impl<T: Scalar> ParamSource for Binder<'_, T> {
    fn param(&mut self, name: &str, shape: Shape, _: Option<f64>) -> Result<ParamId> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| ArchError::MissingParameter(name.to_string()))?;
        let found = self.store.get(id).value.shape();
        if found != shape {
            return Err(ArchError::ParameterShape {
                name: name.to_string(),
                expected: shape,
                found,
            });
        }
        Ok(id)
    }
}

/// Records names and shapes without allocating.
#[derive(Default)]
pub(crate) struct Recorder {
    pub entries: Vec<(String, Shape)>,
}

impl ParamSource for Recorder {
    fn param(&mut self, name: &str, shape: Shape, _: Option<f64>) -> Result<ParamId> {
        self.entries.push((name.to_string(), shape));
        Ok(ParamId(self.entries.len() - 1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvKind {
    Dense { groups: usize },
    Transposed,
}

/// A biased 2-D convolution (dense/grouped or transposed).
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    kind: ConvKind,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn dense(
        src: &mut dyn ParamSource,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let fan_in = (c_in / groups * kernel * kernel) as f64;
        let weight = src.param(
            &format!("{name}.weight"),
            Shape::new(c_out, c_in / groups, kernel, kernel),
            Some(fan_in),
        )?;
        let bias = src.param(&format!("{name}.bias"), Shape::new(1, c_out, 1, 1), None)?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            kind: ConvKind::Dense { groups },
            stride,
            pad,
        })
    }

    /// 3x3, stride 1, padding 1.
    pub(crate) fn conv3(src: &mut dyn ParamSource, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::dense(src, name, c_in, c_out, 3, 1, 1, 1)
    }

    /// 1x1 projection.
    pub(crate) fn conv1(src: &mut dyn ParamSource, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::dense(src, name, c_in, c_out, 1, 1, 0, 1)
    }

    /// Kernel 4, stride 2, padding 1: exactly doubles both extents.
    pub(crate) fn up2(src: &mut dyn ParamSource, name: &str, channels: usize) -> Result<Self> {
        let (k, s) = (4, 2);
        let fan_in = (channels * (k / s) * (k / s)) as f64;
        let weight = src.param(
            &format!("{name}.weight"),
            Shape::new(channels, channels, k, k),
            Some(fan_in),
        )?;
        let bias = src.param(&format!("{name}.bias"), Shape::new(1, channels, 1, 1), None)?;
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            kind: ConvKind::Transposed,
            stride: s,
            pad: 1,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        Ok(match self.kind {
            ConvKind::Dense { groups } => tape.conv2d(x, &w, Some(&b), self.stride, self.pad, groups)?,
            ConvKind::Transposed => tape.conv_transpose2d(x, &w, Some(&b), self.stride, self.pad)?,
        })
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Halves resolution: strided 3x3 conv, LeakyReLU, 3x3 conv.
#[derive(Debug, Clone)]
pub struct DownBlock {
    pub strided: ConvLayer,
    pub conv: ConvLayer,
    slope: f64,
}

impl DownBlock {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, channels: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            strided: ConvLayer::dense(src, &format!("{name}.strided"), channels, channels, 3, 2, 1, 1)?,
            conv: ConvLayer::conv3(src, &format!("{name}.conv"), channels, channels)?,
            slope,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.strided.forward(tape, store, x)?;
        let y = tape.leaky_relu(&y, self.slope)?;
        self.conv.forward(tape, store, &y)
    }
}

/// Doubles resolution: 3x3 conv to 4C channels, then pixel shuffle.
#[derive(Debug, Clone)]
pub struct UpBlock {
    pub conv: ConvLayer,
}

impl UpBlock {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv: ConvLayer::conv3(src, &format!("{name}.conv"), channels, 4 * channels)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(tape, store, x)?;
        Ok(tape.pixel_shuffle(&y, 2)?)
    }
}

/// Local feature fusion: channel concatenation and a 1x1 projection.
#[derive(Debug, Clone)]
pub struct Lff {
    pub proj: ConvLayer,
}

impl Lff {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, channels: usize, inputs: usize) -> Result<Self> {
        Ok(Self {
            proj: ConvLayer::conv1(src, &format!("{name}.proj"), inputs * channels, channels)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        parts: &[&Tensor<T>],
    ) -> Result<Tensor<T>> {
        let cat = tape.concat_channels(parts)?;
        self.proj.forward(tape, store, &cat)
    }
}

/// Carries features from one level to another at the receiver's
/// resolution.
#[derive(Debug, Clone)]
pub enum Adapter {
    /// Half resolution to full: stride-2 transposed conv.
    Up(ConvLayer),
    /// Equal resolution: 3x3 conv.
    Same(ConvLayer),
    /// Quarter resolution to full: two chained stride-2 transposed convs.
    Up4(ConvLayer, ConvLayer),
}

impl Adapter {
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Adapter::Up(c) | Adapter::Same(c) => c.forward(tape, store, x),
            Adapter::Up4(a, b) => {
                let y = a.forward(tape, store, x)?;
                b.forward(tape, store, &y)
            }
        }
    }

    pub fn layers(&self) -> Vec<&ConvLayer> {
        match self {
            Adapter::Up(c) | Adapter::Same(c) => vec![c],
            Adapter::Up4(a, b) => vec![a, b],
        }
    }
}
