//! Binary snapshot of policy parameters and optimizer state.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"MUGRPOCK"
//! version u32 (= 1)
//! vocab   u64
//! feature u64
//! step    u64
//! weights vocab * feature f64
//! m       vocab * feature f64
//! v       vocab * feature f64
//! ```
//!
//! Decoding rejects any input whose sizes or values do not fit this layout.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::policy::{OptimizerState, PolicyParams};

pub const MAGIC: &[u8; 8] = b"MUGRPOCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub opt: OptimizerState,
}

pub fn encode(params: &PolicyParams, opt: &OptimizerState) -> Result<Vec<u8>> {
    let shape = params.weights().shape();
    opt.first_moment.check_shape(params.weights())?;
    opt.second_moment.check_shape(params.weights())?;
    let n = shape.0 * shape.1;
    let mut out = Vec::with_capacity(HEADER_LEN + 3 * 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.0 as u64).to_le_bytes());
    out.extend_from_slice(&(shape.1 as u64).to_le_bytes());
    out.extend_from_slice(&opt.step_count.to_le_bytes());
    for m in [params.weights(), &opt.first_moment, &opt.second_moment] {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let Some((head, rest)) = self.bytes.split_first_chunk::<N>() else {
            return Err(Error::Checkpoint(format!("truncated {what}")));
        };
        self.bytes = rest;
        Ok(*head)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.take::<8>(what).map(u64::from_le_bytes)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let data = (0..rows * cols)
            .map(|_| self.take::<8>(what).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite value in {what}")));
        }
        Matrix::from_vec(rows, cols, data)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes };
    if &r.take::<8>("magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take::<4>("version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let rows = r.u64("vocab size")?;
    let cols = r.u64("feature dim")?;
    let step_count = r.u64("step count")?;
    // Bound the declared size by the payload before allocating anything.
    let payload = r.bytes.len() as u128;
    let expected = (rows as u128 * cols as u128).checked_mul(24);
    if expected != Some(payload) {
        return Err(Error::Checkpoint(format!(
            "shape {rows}x{cols} does not match {payload} payload bytes"
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let weights = r.matrix(rows, cols, "weights")?;
    let first_moment = r.matrix(rows, cols, "first moment")?;
    let second_moment = r.matrix(rows, cols, "second moment")?;
    if second_moment.as_slice().iter().any(|v| *v < 0.0) {
        return Err(Error::Checkpoint("negative second moment".into()));
    }
    let params = PolicyParams::from_weights(weights).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        params,
        opt: OptimizerState {
            first_moment,
            second_moment,
            step_count,
        },
    })
}
