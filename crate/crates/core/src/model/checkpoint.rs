//! Checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "TTHINCK\0"
//! version      u32       currently 1
//! config_len   u32
//! config       config_len bytes of UTF-8 TOML (a ModelConfig)
//! step         u64       optimisation steps taken
//! rng_seed     32 bytes  noise generator key
//! rng_stream   u64
//! rng_word_pos u128
//! count        u32       number of tensors
//! count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8, e.g. "layers.0.attention.query"
//!   rank       u32
//!   dims       rank × u64
//!   data       product(dims) × f64
//! ```
//!
//! Tensors appear in the model's parameter order; loading checks every
//! name and shape against a freshly built model of the stored config.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTHINCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(model)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    decode(&fs::read(path)?)
}

pub(crate) fn encode(model: &Model) -> Result<Vec<u8>> {
    let config = toml::to_string(model.config()).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&model.step().to_le_bytes());
    let rng = model.rng();
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());

    let mut tensors = Vec::new();
    model.weights.visit(&mut |name, t| tensors.push((name, t.clone())));
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Format(format!("{what} too large")))
    }

    fn text(&mut self, n: usize, what: &str) -> Result<&'a str> {
        std::str::from_utf8(self.take(n, what)?).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig =
        toml::from_str(r.text(config_len, "config")?).map_err(|e| Error::Format(format!("config: {e}")))?;
    config.validate()?;
    let step = r.u64("step")?;
    let seed: [u8; 32] = r.array("rng seed")?;
    let stream = r.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(r.array("rng position")?);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut weights = Model::build(config.clone(), 0)?.weights;
    let mut expected = Vec::new();
    weights.visit(&mut |name, t| expected.push((name, t.shape().to_vec())));
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "{count} tensors stored but the config needs {}",
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name_len = r.u32("tensor name length")? as usize;
        let name = r.text(name_len, "tensor name")?;
        if name != want_name {
            return Err(Error::Format(format!("expected tensor `{want_name}`, found `{name}`")));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
        if &shape != want_shape {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {shape:?}, config needs {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        loaded.push(Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for (slot, t) in weights.slots_mut().into_iter().zip(loaded) {
        *slot = t;
    }
    Ok(Model::from_parts(config, weights, rng, step))
}
