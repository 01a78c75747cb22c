//! Model checkpoint files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes   "SSCKPT01"
//! arch_len   u32       then the architecture string, UTF-8
//! channels   u32       input geometry
//! height     u32
//! width      u32
//! alpha      f32
//! dropout    f32
//! bias       u8        1 if the readout has a bias
//! params     f32 × N   per layer: weights [co][ci][dx][dy], β, b;
//!                      then readout weights [class][feature] and bias
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, Network, NetworkOptions};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSCKPT01";

pub fn save_checkpoint(model: &Network) -> Vec<u8> {
    let arch = model.architecture().to_string();
    let shape = model.input_shape();
    let options = model.options();
    let params = model.params();
    let mut out = Vec::with_capacity(40 + arch.len() + 4 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    for dim in [shape.channels, shape.height, shape.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(options.alpha as f32).to_le_bytes());
    out.extend_from_slice(&(options.dropout as f32).to_le_bytes());
    out.push(options.readout_bias as u8);
    for p in params {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                message: format!("checkpoint ends inside {what}"),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", "not a model checkpoint"));
    }
    let len = r.u32("architecture length")? as usize;
    let arch = std::str::from_utf8(r.take(len, "architecture")?)
        .map_err(|_| Error::format("architecture", "not UTF-8"))?;
    let architecture: Architecture = arch.parse()?;
    let channels = r.u32("channels")? as usize;
    let height = r.u32("height")? as usize;
    let width = r.u32("width")? as usize;
    let alpha = r.f32("alpha")? as f64;
    let dropout = r.f32("dropout")? as f64;
    let readout_bias = match r.take(1, "bias flag")?[0] {
        0 => false,
        1 => true,
        other => return Err(Error::format("bias flag", format!("expected 0 or 1, got {other}"))),
    };
    let options = NetworkOptions {
        alpha,
        dropout,
        readout_bias,
        ..NetworkOptions::default()
    };
    // Weights are overwritten below; the seed only fills the template.
    let mut model = Network::new(
        &architecture,
        channels,
        height,
        width,
        options,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let n = model.num_params();
    let params = (0..n)
        .map(|_| r.f32("parameters").map(f64::from))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            "parameters",
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    model.set_params(&params)?;
    Ok(model)
}
