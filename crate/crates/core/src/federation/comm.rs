//! Per-round communication accounting.
//!
//! Counts are in parameters (fp64 scalars) per client per layer. The wire
//! payload is the matrices' entries as little-endian fp64, concatenated, so
//! `bytes = 8 · params`.

use crate::baselines::SchemeId;
use crate::linalg::Matrix;

/// Shape of one adapted layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
}

impl LayerDims {
    pub fn k(&self) -> usize {
        self.d_out.min(self.d_in)
    }
}

/// Parameters a client uploads per round.
pub fn uplink_params(scheme: SchemeId, dims: LayerDims) -> usize {
    let LayerDims { d_out, d_in, rank } = dims;
    match scheme {
        SchemeId::Florg => rank * dims.k(),
        SchemeId::FedIt | SchemeId::FeDeRa | SchemeId::FedExLora => rank * (d_out + d_in),
        SchemeId::FfaLora => rank * d_out,
        SchemeId::FedSaLora => rank * d_in,
    }
}

/// Parameters the server sends to each client per round.
pub fn downlink_params(scheme: SchemeId, dims: LayerDims) -> usize {
    match scheme {
        SchemeId::FedExLora => uplink_params(scheme, dims) + dims.d_out * dims.d_in,
        other => uplink_params(other, dims),
    }
}

/// Little-endian fp64 wire encoding of a payload.
pub fn encode_payload(matrices: &[&Matrix]) -> Vec<u8> {
    let n: usize = matrices.iter().map(|m| m.as_slice().len()).sum();
    let mut out = Vec::with_capacity(8 * n);
    for m in matrices {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn payload_params(matrices: &[&Matrix]) -> usize {
    matrices.iter().map(|m| m.as_slice().len()).sum()
}
