use rand::Rng;

use super::layers::{Adapter, Binder, ConvLayer, DownBlock, Initializer, Lff, ParamSource, UpBlock};
use super::rrcab::Rrcab;
use super::{ArchError, NetworkConfig, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Shape, Tape, Tensor};

/// Image channels consumed and produced by the network.
pub const IMAGE_CHANNELS: usize = 3;

/// Stage outputs of the full-resolution level.
#[derive(Debug, Clone)]
pub struct Level1Output<T: Scalar> {
    pub out: Tensor<T>,
    /// Outputs of RRCABs 1..=5.
    pub stages: Vec<Tensor<T>>,
}

/// Stage outputs of the half-resolution level.
#[derive(Debug, Clone)]
pub struct Level2Output<T: Scalar> {
    /// Upsampled back to full resolution.
    pub out: Tensor<T>,
    pub downsampled: Tensor<T>,
    /// Outputs of RRCABs 1..=5 at half resolution.
    pub stages: Vec<Tensor<T>>,
}

/// Stage outputs of the progressive (quarter, then half resolution) level.
#[derive(Debug, Clone)]
pub struct Level3Output<T: Scalar> {
    pub out: Tensor<T>,
    pub downsampled: Tensor<T>,
    /// Outputs of RRCABs 1..=10: 1-5 at quarter, 6-10 at half resolution.
    pub stages: Vec<Tensor<T>>,
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar> {
    pub shallow: Tensor<T>,
    pub l1: Level1Output<T>,
    pub l2: Level2Output<T>,
    pub l3: Level3Output<T>,
    pub deep: Tensor<T>,
    pub output: Tensor<T>,
}

#[derive(Debug, Clone)]
struct Level1 {
    blocks: Vec<Rrcab>,
    /// Adapters for F_L2^1..4, injected before blocks 1..4.
    from_l2: Option<[usize; 4]>,
    /// Adapters for F_L3^2 and F_L3^4, injected before blocks 1 and 2.
    from_l3: Option<[usize; 2]>,
}

#[derive(Debug, Clone)]
struct Level2 {
    down: DownBlock,
    blocks: Vec<Rrcab>,
    up: UpBlock,
    /// Adapters for F_L3^2, F_L3^4, F_L3^7, F_L3^9, injected before blocks 1..4.
    from_l3: Option<[usize; 4]>,
}

#[derive(Debug, Clone)]
struct Level3 {
    down1: DownBlock,
    down2: DownBlock,
    blocks: Vec<Rrcab>,
    lff1: Lff,
    lff2: Lff,
    up1: UpBlock,
    up2: UpBlock,
}

/// The multi-scale feature interaction network.
///
/// The structure holds parameter ids only; values live in a
/// [`ParamStore`] passed to every forward call.
#[derive(Debug, Clone)]
pub struct Msfin {
    cfg: NetworkConfig,
    shallow: ConvLayer,
    l1: Level1,
    l2: Level2,
    l3: Level3,
    deep: Vec<Rrcab>,
    recon: ConvLayer,
    adapters: Vec<Adapter>,
}

fn blocks(src: &mut dyn ParamSource, prefix: &str, n: usize, cfg: &NetworkConfig) -> Result<Vec<Rrcab>> {
    (1..=n)
        .map(|i| Rrcab::new(src, &format!("{prefix}.block{i}"), cfg))
        .collect()
}

impl Msfin {
    /// Registers freshly initialised parameters in `store`.
    pub fn new<T: Scalar, R: Rng>(cfg: NetworkConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Self::build(cfg, &mut Initializer { store, rng })
    }

    /// Binds to parameters already in `store`, by name and shape. Extra
    /// parameters in the store are ignored.
    pub fn bind<T: Scalar>(cfg: NetworkConfig, store: &ParamStore<T>) -> Result<Self> {
        Self::build(cfg, &mut Binder { store })
    }

    pub(crate) fn build(cfg: NetworkConfig, src: &mut dyn ParamSource) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let slope = cfg.leaky_slope;
        let shallow = ConvLayer::conv3(src, "shallow", IMAGE_CHANNELS, c)?;

        let l3 = Level3 {
            down1: DownBlock::new(src, "l3.down1", c, slope)?,
            down2: DownBlock::new(src, "l3.down2", c, slope)?,
            blocks: blocks(src, "l3", 10, &cfg)?,
            lff1: Lff::new(src, "l3.lff1", c, 3)?,
            lff2: Lff::new(src, "l3.lff2", c, 3)?,
            up1: UpBlock::new(src, "l3.up1", c)?,
            up2: UpBlock::new(src, "l3.up2", c)?,
        };
        let l2_down = DownBlock::new(src, "l2.down", c, slope)?;
        let l2_blocks = blocks(src, "l2", 5, &cfg)?;
        let l2_up = UpBlock::new(src, "l2.up", c)?;
        let l1_blocks = blocks(src, "l1", 5, &cfg)?;

        let mut adapters = Vec::new();
        let mut push = |a: Adapter| {
            adapters.push(a);
            adapters.len() - 1
        };
        let (l2_from_l3, l1_from_l2, l1_from_l3) = if !cfg.ic {
            (None, None, None)
        } else if cfg.ns {
            let mut l3l2 = [0; 4];
            for (slot, tap) in l3l2.iter_mut().zip([2, 4, 7, 9]) {
                let name = format!("ic.l3_l2.tap{tap}");
                *slot = push(if tap < 5 {
                    Adapter::Up(ConvLayer::up2(src, &name, c)?)
                } else {
                    Adapter::Same(ConvLayer::conv3(src, &name, c, c)?)
                });
            }
            let mut l2l1 = [0; 4];
            for (j, slot) in l2l1.iter_mut().enumerate() {
                *slot = push(Adapter::Up(ConvLayer::up2(src, &format!("ic.l2_l1.tap{}", j + 1), c)?));
            }
            let l3l1 = if cfg.cic {
                let mut ids = [0; 2];
                for (slot, tap) in ids.iter_mut().zip([2, 4]) {
                    let name = format!("ic.l3_l1.tap{tap}");
                    *slot = push(Adapter::Up4(
                        ConvLayer::up2(src, &format!("{name}.a"), c)?,
                        ConvLayer::up2(src, &format!("{name}.b"), c)?,
                    ));
                }
                Some(ids)
            } else {
                None
            };
            (Some(l3l2), Some(l2l1), l3l1)
        } else {
            let up = push(Adapter::Up(ConvLayer::up2(src, "ic.l3_l2.up", c)?));
            let same = push(Adapter::Same(ConvLayer::conv3(src, "ic.l3_l2.same", c, c)?));
            let l2l1 = push(Adapter::Up(ConvLayer::up2(src, "ic.l2_l1", c)?));
            let l3l1 = if cfg.cic {
                let a = push(Adapter::Up4(
                    ConvLayer::up2(src, "ic.l3_l1.a", c)?,
                    ConvLayer::up2(src, "ic.l3_l1.b", c)?,
                ));
                Some([a, a])
            } else {
                None
            };
            (Some([up, up, same, same]), Some([l2l1; 4]), l3l1)
        };

        let deep = blocks(src, "deep", 4, &cfg)?;
        let recon = ConvLayer::conv3(src, "recon", c, IMAGE_CHANNELS)?;
        Ok(Self {
            shallow,
            l1: Level1 {
                blocks: l1_blocks,
                from_l2: l1_from_l2,
                from_l3: l1_from_l3,
            },
            l2: Level2 {
                down: l2_down,
                blocks: l2_blocks,
                up: l2_up,
                from_l3: l2_from_l3,
            },
            l3,
            deep,
            recon,
            adapters,
            cfg,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// Parameter ids the forward pass reads.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let convs = |ids: &mut Vec<ParamId>, c: &ConvLayer| ids.extend(c.params());
        convs(&mut ids, &self.shallow);
        for d in [&self.l3.down1, &self.l3.down2, &self.l2.down] {
            convs(&mut ids, &d.strided);
            convs(&mut ids, &d.conv);
        }
        for u in [&self.l3.up1, &self.l3.up2, &self.l2.up] {
            convs(&mut ids, &u.conv);
        }
        convs(&mut ids, &self.l3.lff1.proj);
        convs(&mut ids, &self.l3.lff2.proj);
        for b in self.l1.blocks.iter().chain(&self.l2.blocks).chain(&self.l3.blocks).chain(&self.deep) {
            ids.extend(b.params());
        }
        for a in &self.adapters {
            for c in a.layers() {
                convs(&mut ids, c);
            }
        }
        convs(&mut ids, &self.recon);
        ids.sort();
        ids.dedup();
        ids
    }

    /// Zeroes the reconstruction conv, turning the network into the identity
    /// on its input when the global skip is on.
    pub fn zero_reconstruction<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in self.recon.params() {
            let v = store.get(id).value.map(|_| T::zero());
            store.set_value(id, v).expect("same shape");
        }
    }

    /// Interactive adapter `index` applied to `x`.
    pub fn interactive_adapter<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        index: usize,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.adapters
            .get(index)
            .ok_or_else(|| ArchError::Config(format!("no adapter {index}")))?
            .forward(tape, store, x)
    }

    /// Adapter indices used for the level-2 to level-1 connections.
    pub fn l2_to_l1_adapters(&self) -> Option<[usize; 4]> {
        self.l1.from_l2
    }

    /// Every RRCAB: level 1, level 2, level 3, then the deep extractor.
    pub fn rrcabs(&self) -> Vec<&Rrcab> {
        self.l1
            .blocks
            .iter()
            .chain(&self.l2.blocks)
            .chain(&self.l3.blocks)
            .chain(&self.deep)
            .collect()
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    fn inject<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        base: Tensor<T>,
        adapter: Option<usize>,
        tap: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let Some(i) = adapter else { return Ok(base) };
        let carried = self.interactive_adapter(tape, store, i, tap)?;
        if carried.shape() != base.shape() {
            return Err(ArchError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "interactive connection",
                a: base.shape(),
                b: carried.shape(),
            }));
        }
        Ok(tape.add(&base, &carried)?)
    }

    /// Progressive level: quarter resolution, local fusion, half
    /// resolution, back to full.
    pub fn level3_forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f_sf: &Tensor<T>,
    ) -> Result<Level3Output<T>> {
        check_divisible(f_sf.shape(), 4)?;
        let l3 = &self.l3;
        let d = l3.down1.forward(tape, store, f_sf)?;
        let d = l3.down2.forward(tape, store, &d)?;
        let mut stages = Vec::with_capacity(10);
        let mut x = d.clone();
        for b in &l3.blocks[..4] {
            x = b.forward(tape, store, &x)?;
            stages.push(x.clone());
        }
        let fused = l3.lff1.forward(tape, store, &[&d, &stages[1], &stages[3]])?;
        stages.push(l3.blocks[4].forward(tape, store, &fused)?);
        let up = l3.up1.forward(tape, store, &stages[4])?;
        let mut x = up.clone();
        for b in &l3.blocks[5..9] {
            x = b.forward(tape, store, &x)?;
            stages.push(x.clone());
        }
        let fused = l3.lff2.forward(tape, store, &[&up, &stages[6], &stages[7]])?;
        stages.push(l3.blocks[9].forward(tape, store, &fused)?);
        let out = l3.up2.forward(tape, store, &stages[9])?;
        Ok(Level3Output {
            out,
            downsampled: d,
            stages,
        })
    }

    /// Half-resolution level. `l3_stages` are the ten level-3 stage outputs;
    /// taps 2, 4, 7 and 9 are used when interactive connections are on.
    pub fn level2_forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f_sf: &Tensor<T>,
        l3_stages: &[Tensor<T>],
    ) -> Result<Level2Output<T>> {
        check_divisible(f_sf.shape(), 2)?;
        let l2 = &self.l2;
        let d = l2.down.forward(tape, store, f_sf)?;
        let taps = [1, 3, 6, 8];
        let mut stages = Vec::with_capacity(5);
        let mut x = d.clone();
        for (i, b) in l2.blocks.iter().enumerate() {
            if i < 4 {
                let adapter = l2.from_l3.map(|a| a[i]);
                if adapter.is_some() {
                    let tap = l3_stages.get(taps[i]).ok_or_else(|| {
                        ArchError::Config(format!("level-3 tap {} missing", taps[i] + 1))
                    })?;
                    x = self.inject(tape, store, x, adapter, tap)?;
                }
            }
            x = b.forward(tape, store, &x)?;
            stages.push(x.clone());
        }
        let out = l2.up.forward(tape, store, &x)?;
        Ok(Level2Output {
            out,
            downsampled: d,
            stages,
        })
    }

    /// Full-resolution level, fed by level-2 stages 1..4 and (with CIC)
    /// level-3 stages 2 and 4.
    pub fn level1_forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f_sf: &Tensor<T>,
        l2_stages: &[Tensor<T>],
        l3_stages: &[Tensor<T>],
    ) -> Result<Level1Output<T>> {
        let l1 = &self.l1;
        let mut stages = Vec::with_capacity(5);
        let mut x = f_sf.clone();
        for (i, b) in l1.blocks.iter().enumerate() {
            if i < 4 {
                if let Some(a) = l1.from_l2 {
                    let tap = l2_stages
                        .get(i)
                        .ok_or_else(|| ArchError::Config(format!("level-2 tap {} missing", i + 1)))?;
                    x = self.inject(tape, store, x, Some(a[i]), tap)?;
                }
            }
            if i < 2 {
                if let Some(a) = l1.from_l3 {
                    let tap = l3_stages
                        .get(2 * i + 1)
                        .ok_or_else(|| ArchError::Config(format!("level-3 tap {} missing", 2 * i + 2)))?;
                    x = self.inject(tape, store, x, Some(a[i]), tap)?;
                }
            }
            x = b.forward(tape, store, &x)?;
            stages.push(x.clone());
        }
        Ok(Level1Output { out: x, stages })
    }

    /// Forward pass on inputs whose extents are multiples of 4, keeping all
    /// intermediates.
    pub fn forward_traced<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        input: &Tensor<T>,
    ) -> Result<Trace<T>> {
        let s = input.shape();
        if s.c() != IMAGE_CHANNELS {
            return Err(ArchError::ChannelMismatch {
                expected: IMAGE_CHANNELS,
                got: s.c(),
            });
        }
        check_divisible(s, 4)?;
        let shallow = self.shallow.forward(tape, store, input)?;
        let l3 = self.level3_forward(tape, store, &shallow)?;
        let l2 = self.level2_forward(tape, store, &shallow, &l3.stages)?;
        let l1 = self.level1_forward(tape, store, &shallow, &l2.stages, &l3.stages)?;
        let mut deep = tape.add(&tape.add(&l1.out, &l2.out)?, &l3.out)?;
        for b in &self.deep {
            deep = b.forward(tape, store, &deep)?;
        }
        let mut output = self.recon.forward(tape, store, &deep)?;
        if self.cfg.global_skip {
            output = tape.add(&output, input)?;
        }
        Ok(Trace {
            shallow,
            l1,
            l2,
            l3,
            deep,
            output,
        })
    }

    /// Super-resolves a pre-upsampled (N,3,H,W) batch. Extents that are not
    /// multiples of 4 are reflect-padded and the output cropped back.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, store: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.c() != IMAGE_CHANNELS {
            return Err(ArchError::ChannelMismatch {
                expected: IMAGE_CHANNELS,
                got: s.c(),
            });
        }
        let (h, w) = (s.h().next_multiple_of(4), s.w().next_multiple_of(4));
        if (h, w) == (s.h(), s.w()) {
            return Ok(self.forward_traced(tape, store, input)?.output);
        }
        let padded = tape.reflect_pad(input, h, w)?;
        let out = self.forward_traced(tape, store, &padded)?.output;
        Ok(tape.crop(&out, s.h(), s.w())?)
    }
}

fn check_divisible(s: Shape, divisor: usize) -> Result<()> {
    if s.h() % divisor != 0 || s.w() % divisor != 0 || s.h() == 0 || s.w() == 0 {
        return Err(ArchError::SpatialSize {
            h: s.h(),
            w: s.w(),
            divisor,
        });
    }
    Ok(())
}
