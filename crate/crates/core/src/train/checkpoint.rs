//! Binary checkpoint format, little-endian:
//!
//! ```text
//! "MSFN" | version u32 | text_len u32 | key = value text (UTF-8)
//! count u32 | count × { name_len u32 | name | dtype u8 | 4 × u32 dims | data }
//! ```
//!
//! Adam moments are stored as `adam.m.<name>` and `adam.v.<name>` next to
//! each parameter.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};
use crate::config::{parse_pairs, RunConfig};
use crate::tensor::{DType, ParamStore, Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSFN";
pub const CHECKPOINT_VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

/// Full position of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub config: RunConfig,
    /// Optimizer steps completed.
    pub step: u64,
    pub rng: RngState,
    pub params: ParamStore<T>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: Shape, data: &[T]) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    for d in shape.0 {
        put_u32(out, d);
    }
    for &v in data {
        v.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail<X>(&self, field: &str, detail: impl Into<String>) -> Result<X> {
        Err(TrainError::Checkpoint {
            path: self.path.to_path_buf(),
            field: field.to_string(),
            detail: detail.into(),
        })
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&end| end <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(field, format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

impl<T: Scalar> Checkpoint<T> {
    fn header_text(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("step = {}\n", self.step));
        s.push_str(&format!("rng_seed = {}\n", hex(&self.rng.seed)));
        s.push_str(&format!("rng_word_pos = {}\n", self.rng.word_pos));
        s.push_str(&format!("rng_stream = {}\n", self.rng.stream));
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.header_text();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, 3 * self.params.len());
        for (_, p) in self.params.iter() {
            let s = p.value.shape();
            put_tensor(&mut out, &p.name, s, p.value.data());
            put_tensor(&mut out, &format!("{M_PREFIX}{}", p.name), s, &p.moment1);
            put_tensor(&mut out, &format!("{V_PREFIX}{}", p.name), s, &p.moment2);
        }
        out
    }

    /// Decodes a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return r.fail("magic", "not an MSFN checkpoint");
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return r.fail("version", format!("unsupported version {version}"));
        }
        let len = r.u32("config length")?;
        let text = std::str::from_utf8(r.take(len, "config")?).or_else(|e| r.fail("config", e.to_string()))?;
        let pairs = parse_pairs(text).or_else(|e| r.fail("config", e.to_string()))?;
        let (mut step, mut seed, mut word_pos, mut stream) = (None, None, None, None);
        let mut rest = Vec::new();
        for (k, v) in pairs {
            match k.as_str() {
                "step" => step = Some(v.parse::<u64>().or_else(|e| r.fail("step", e.to_string()))?),
                "rng_seed" => seed = Some(unhex(&v).map_or_else(|| r.fail("rng_seed", "expected 64 hex digits"), Ok)?),
                "rng_word_pos" => {
                    word_pos = Some(v.parse::<u128>().or_else(|e| r.fail("rng_word_pos", e.to_string()))?)
                }
                "rng_stream" => stream = Some(v.parse::<u64>().or_else(|e| r.fail("rng_stream", e.to_string()))?),
                _ => rest.push((k, v)),
            }
        }
        let mut config = RunConfig::default();
        config.apply_pairs(&rest).or_else(|e| r.fail("config", e.to_string()))?;
        config.validate().or_else(|e| r.fail("config", e.to_string()))?;
        let rng = RngState {
            seed: seed.map_or_else(|| r.fail("rng_seed", "missing"), Ok)?,
            word_pos: word_pos.map_or_else(|| r.fail("rng_word_pos", "missing"), Ok)?,
            stream: stream.map_or_else(|| r.fail("rng_stream", "missing"), Ok)?,
        };
        let step = step.map_or_else(|| r.fail("step", "missing"), Ok)?;

        let count = r.u32("tensor count")?;
        let mut params = ParamStore::new();
        let mut moments: Vec<(String, Shape, Vec<T>)> = Vec::new();
        for i in 0..count {
            let field = format!("tensor {i}");
            let name_len = r.u32(&field)?;
            let name = std::str::from_utf8(r.take(name_len, &field)?)
                .or_else(|e| r.fail(&field, e.to_string()))?
                .to_string();
            let tag = r.take(1, &name)?[0];
            let dtype = DType::from_tag(tag).map_or_else(|| r.fail(&name, format!("unknown dtype tag {tag}")), Ok)?;
            if dtype != T::DTYPE {
                return r.fail(&name, format!("stored as {dtype}, expected {}", T::DTYPE));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32(&name)?;
            }
            let shape = Shape(dims);
            let size = shape.numel().checked_mul(dtype.size());
            let raw = match size {
                Some(n) => r.take(n, &name)?,
                None => return r.fail(&name, "tensor size overflows"),
            };
            let data: Vec<T> = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            if name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX) {
                moments.push((name, shape, data));
            } else {
                let t = Tensor::new(shape, data).or_else(|e| r.fail(&name, e.to_string()))?;
                params.add(name.clone(), t).or_else(|e| r.fail(&name, e.to_string()))?;
            }
        }
        if r.pos != bytes.len() {
            return r.fail("trailer", format!("{} unexpected bytes", bytes.len() - r.pos));
        }
        for (name, shape, data) in moments {
            let (base, first) = match name.strip_prefix(M_PREFIX) {
                Some(b) => (b, true),
                None => (&name[V_PREFIX.len()..], false),
            };
            let Some(id) = params.id(base) else {
                return r.fail(&name, "moment without parameter");
            };
            let p = params.get_mut(id);
            if p.value.shape() != shape {
                return r.fail(&name, format!("shape {shape} differs from parameter {}", p.value.shape()));
            }
            if first {
                p.moment1 = data;
            } else {
                p.moment2 = data;
            }
        }
        Ok(Self {
            config,
            step,
            rng,
            params,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp: PathBuf = path.to_path_buf();
        let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        tmp.set_file_name(format!(".{file}.tmp"));
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        drop(f);
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> Checkpoint<f32> {
        let mut params = ParamStore::new();
        let a = params
            .add("a.weight", Tensor::from_fn(Shape::new(2, 1, 3, 3), |n, _, y, x| (n + y * x) as f32 * 0.25))
            .unwrap();
        params.add("a.bias", Tensor::full(Shape::new(1, 2, 1, 1), -1.5)).unwrap();
        params.get_mut(a).moment1[3] = 0.125;
        params.get_mut(a).moment2[4] = 7.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        Checkpoint {
            config: RunConfig::default(),
            step: 42,
            rng: RngState::capture(&rng),
            params,
        }
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.step, 42);
        assert_eq!(back.rng, ck.rng);
        let id = back.params.id("a.weight").unwrap();
        assert_eq!(back.params.get(id).moment2[4], 7.0);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let _: [u64; 5] = rng.random();
        let mut copy = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), copy.random::<u64>());
    }

    #[test]
    fn corruption_names_the_field() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::<f32>::from_bytes(&bytes, Path::new("x.msfn")).unwrap_err();
        assert!(err.to_string().contains("x.msfn") && err.to_string().contains("magic"));

        let bytes = sample().to_bytes();
        let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], Path::new("t")).unwrap_err();
        assert!(matches!(err, TrainError::Checkpoint { ref field, .. } if field == "adam.v.a.bias"));

        let err = Checkpoint::<f64>::from_bytes(&bytes, Path::new("t")).unwrap_err();
        assert!(err.to_string().contains("expected f64"));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.msfn");
        let ck = sample();
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::<f32>::load(&p).unwrap().to_bytes(), ck.to_bytes());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
