//! Binary checkpoint of a run.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "FLORGCKP"
//! version    u32
//! round      u64
//! config     u64 length, then UTF-8 `key = value` text
//! tensors    u64 count, then per tensor:
//!              u16 name length, UTF-8 name, u64 rows, u64 cols,
//!              rows*cols f64 in row-major order
//! ```

use std::io::{Read, Write};

use super::config::{parse_config_str, ExperimentConfig};
use super::round::GlobalState;
use crate::adapter::{AdapterConfig, AdapterState};
use crate::baselines::{LoraState, SchemeId};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"FLORGCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    pub config_text: String,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_state(cfg: &ExperimentConfig, round: u64, state: &GlobalState) -> Self {
        let mut tensors = Vec::new();
        match state {
            GlobalState::Florg(layers) => {
                for (l, s) in layers.iter().enumerate() {
                    tensors.push((format!("layer{l}.w0"), s.w0().clone()));
                    tensors.push((format!("layer{l}.l"), s.l_basis().clone()));
                    tensors.push((format!("layer{l}.r"), s.r_basis().clone()));
                    tensors.push((format!("layer{l}.a"), s.a.clone()));
                }
            }
            GlobalState::Lora { layers, personal_b } => {
                for (l, s) in layers.iter().enumerate() {
                    tensors.push((format!("layer{l}.w0"), s.w0().clone()));
                    tensors.push((format!("layer{l}.b"), s.b.clone()));
                    tensors.push((format!("layer{l}.a"), s.a.clone()));
                }
                for (c, bs) in personal_b.iter().enumerate() {
                    for (l, b) in bs.iter().enumerate() {
                        tensors.push((format!("client{c}.layer{l}.b"), b.clone()));
                    }
                }
            }
        }
        Checkpoint {
            round,
            config_text: cfg.to_text(),
            tensors,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        Ok(parse_config_str(&self.config_text)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Matrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// Rebuild the global state recorded in this checkpoint.
    pub fn to_state(&self) -> Result<GlobalState> {
        let cfg = self.config()?;
        if cfg.scheme == SchemeId::Florg {
            let layers = (0..cfg.layers)
                .map(|l| {
                    let w0 = self.tensor(&format!("layer{l}.w0"))?.clone();
                    let (d_out, d_in) = w0.shape();
                    AdapterState::from_parts(
                        AdapterConfig {
                            d_out,
                            d_in,
                            rank: cfg.rank,
                            alpha: cfg.alpha,
                            init_scheme: cfg.init_scheme,
                            seed: super::round::layer_seed(cfg.seed, l),
                        },
                        w0,
                        self.tensor(&format!("layer{l}.l"))?.clone(),
                        self.tensor(&format!("layer{l}.r"))?.clone(),
                        self.tensor(&format!("layer{l}.a"))?.clone(),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GlobalState::Florg(layers))
        } else {
            let layers = (0..cfg.layers)
                .map(|l| {
                    LoraState::from_parts(
                        self.tensor(&format!("layer{l}.w0"))?.clone(),
                        self.tensor(&format!("layer{l}.b"))?.clone(),
                        self.tensor(&format!("layer{l}.a"))?.clone(),
                        cfg.alpha,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let personal_b = if cfg.scheme == SchemeId::FedSaLora {
                (0..cfg.num_clients)
                    .map(|c| {
                        (0..cfg.layers)
                            .map(|l| self.tensor(&format!("client{c}.layer{l}.b")).cloned())
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            Ok(GlobalState::Lora { layers, personal_b })
        }
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.round.to_le_bytes())?;
        out.write_all(&(self.config_text.len() as u64).to_le_bytes())?;
        out.write_all(self.config_text.as_bytes())?;
        out.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, m) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.write_all(&name_len.to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(m.rows() as u64).to_le_bytes())?;
            out.write_all(&(m.cols() as u64).to_le_bytes())?;
            for v in m.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to memory cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut input)?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let round = u64::from_le_bytes(read_array(&mut input)?);
        let config_len = read_len(&mut input)?;
        let config_text = read_string(&mut input, config_len)?;
        let count = read_len(&mut input)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut input)?) as usize;
            let name = read_string(&mut input, name_len)?;
            let rows = read_len(&mut input)?;
            let cols = read_len(&mut input)?;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` too large")))?;
            let mut data = Vec::with_capacity(n.min(1 << 24));
            for _ in 0..n {
                data.push(f64::from_le_bytes(read_array(&mut input)?));
            }
            let m = Matrix::new(rows, cols, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, m));
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Checkpoint {
            round,
            config_text,
            tensors,
        })
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        e.into()
    }
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn read_len<R: Read>(input: &mut R) -> Result<usize> {
    let v = u64::from_le_bytes(read_array(input)?);
    usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit")))
}

fn read_string<R: Read>(input: &mut R, len: usize) -> Result<String> {
    let mut buf = vec![0u8; len];
    input.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
}
