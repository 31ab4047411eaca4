use super::layers::{ConvLayer, ParamSource};
use super::{ArchError, NetworkConfig, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor};

/// Squeeze-and-excitation gate: GAP, 1x1 down, ReLU, 1x1 up, sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub down: ConvLayer,
    pub up: ConvLayer,
}

/// Returns `x * sigmoid(up(relu(down(gap(x)))))`, the gate broadcast over
/// the spatial extent.
pub fn channel_attention<T: Scalar>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    ca: &ChannelAttention,
) -> Result<Tensor<T>> {
    let gate = attention_weights(tape, store, x, ca)?;
    Ok(tape.mul(x, &gate)?)
}

pub(crate) fn attention_weights<T: Scalar>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    ca: &ChannelAttention,
) -> Result<Tensor<T>> {
    let pooled = tape.global_avg_pool(x)?;
    let squeezed = tape.relu(&ca.down.forward(tape, store, &pooled)?)?;
    Ok(tape.sigmoid(&ca.up.forward(tape, store, &squeezed)?)?)
}

/// Recurrent residual channel-attention block.
///
/// One body pass is `u + CA(fuse(relu(gc1(relu(gc2(u))))))`; the block runs
/// the body `loops + 1` times with the same weights.
#[derive(Debug, Clone)]
pub struct Rrcab {
    pub gc2: ConvLayer,
    pub gc1: ConvLayer,
    pub fuse: Option<ConvLayer>,
    pub ca: Option<ChannelAttention>,
    channels: usize,
    loops: usize,
    shuffle_groups: Option<usize>,
}

impl Rrcab {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, cfg: &NetworkConfig) -> Result<Self> {
        let c = cfg.channels;
        let gc2 = ConvLayer::dense(src, &format!("{name}.gc2"), c, c, 3, 1, 1, cfg.groups)?;
        let gc1 = ConvLayer::dense(src, &format!("{name}.gc1"), c, c, 3, 1, 1, cfg.groups)?;
        let fuse = cfg
            .ff
            .then(|| ConvLayer::conv1(src, &format!("{name}.fuse"), c, c))
            .transpose()?;
        let ca = if cfg.ca {
            let b = cfg.ca_width();
            Some(ChannelAttention {
                down: ConvLayer::conv1(src, &format!("{name}.ca_down"), c, b)?,
                up: ConvLayer::conv1(src, &format!("{name}.ca_up"), b, c)?,
            })
        } else {
            None
        };
        Ok(Self {
            gc2,
            gc1,
            fuse,
            ca,
            channels: c,
            loops: cfg.rrcab_loops,
            shuffle_groups: cfg.cs.then_some(cfg.groups),
        })
    }

    pub fn loops(&self) -> usize {
        self.loops
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        v.extend(self.gc2.params());
        v.extend(self.gc1.params());
        if let Some(f) = &self.fuse {
            v.extend(f.params());
        }
        if let Some(ca) = &self.ca {
            v.extend(ca.down.params());
            v.extend(ca.up.params());
        }
        v
    }

    fn grouped<T: Scalar>(
        &self,
        conv: &ConvLayer,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let y = conv.forward(tape, store, x)?;
        match self.shuffle_groups {
            Some(g) => Ok(tape.channel_shuffle(&y, g)?),
            None => Ok(y),
        }
    }

    fn body<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
        let y = tape.relu(&self.grouped(&self.gc2, tape, store, u)?)?;
        let mut y = tape.relu(&self.grouped(&self.gc1, tape, store, &y)?)?;
        if let Some(f) = &self.fuse {
            y = f.forward(tape, store, &y)?;
        }
        if let Some(ca) = &self.ca {
            y = channel_attention(tape, store, &y, ca)?;
        }
        Ok(tape.add(u, &y)?)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().c() != self.channels {
            return Err(ArchError::ChannelMismatch {
                expected: self.channels,
                got: x.shape().c(),
            });
        }
        let mut u = self.body(tape, store, x)?;
        for _ in 0..self.loops {
            u = self.body(tape, store, &u)?;
        }
        Ok(u)
    }
}

/// Applies one RRCAB.
pub fn rrcab_forward<T: Scalar>(
    tape: &Tape<T>,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    block: &Rrcab,
) -> Result<Tensor<T>> {
    block.forward(tape, store, x)
}
