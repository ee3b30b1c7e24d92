//! Binary dataset files, one per split.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes  "FKDS"
//! version    u32      1
//! modalities u32      M
//! frames     u32      T
//! count      u32      N sequences
//! seed       u64      scenario seed
//! id_len     u32      followed by id_len bytes of UTF-8 scenario id
//! dims       M x u32
//! N records:
//!   seed     u64
//!   features for m in 0..M: T * dims[m] f64, row-major
//!   labels   T bytes (0 or 1)
//!   masks    M * T bytes (0 or 1), modality-major
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::matrix::Matrix;

use super::ModalSequence;

pub const DATASET_MAGIC: &[u8; 4] = b"FKDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(seqs: &[ModalSequence], scenario_seed: u64) -> Result<Vec<u8>> {
    let (m, t, dims, id) = match seqs.first() {
        Some(s) => (
            s.modalities(),
            s.frames(),
            s.x.iter().map(|x| x.cols()).collect::<Vec<_>>(),
            s.scenario.clone(),
        ),
        None => (0, 0, Vec::new(), String::new()),
    };
    if seqs
        .iter()
        .any(|s| s.frames() != t || s.x.iter().map(|x| x.cols()).ne(dims.iter().copied()))
    {
        return Err(Error::Input("sequences in one file must share T and dims".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(seqs.len() as u32).to_le_bytes());
    out.extend_from_slice(&scenario_seed.to_le_bytes());
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for s in seqs {
        out.extend_from_slice(&s.seed.to_le_bytes());
        for x in &s.x {
            for v in x.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend(s.y.iter().copied());
        for mask in &s.masks {
            out.extend(mask.iter().map(|&b| u8::from(b)));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Load("dataset file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Header fields of a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub seed: u64,
    pub scenario: String,
    pub frames: usize,
    pub dims: Vec<usize>,
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(DatasetHeader, Vec<ModalSequence>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Load("not a dataset file".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Load(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let m = r.u32()? as usize;
    let t = r.u32()? as usize;
    let n = r.u32()? as usize;
    let seed = r.u64()?;
    let id_len = r.u32()? as usize;
    let scenario = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::Load("scenario id is not UTF-8".into()))?;
    let dims = (0..m).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let mut seqs = Vec::with_capacity(n);
    for _ in 0..n {
        let seq_seed = r.u64()?;
        let mut x = Vec::with_capacity(m);
        for &d in &dims {
            let data = (0..t * d).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            x.push(Matrix::from_vec(t, d, data));
        }
        let y = r.take(t)?.to_vec();
        let masks = (0..m)
            .map(|_| r.take(t).map(|b| b.iter().map(|&v| v != 0).collect()))
            .collect::<Result<Vec<_>>>()?;
        seqs.push(ModalSequence {
            x,
            y,
            masks,
            seed: seq_seed,
            scenario: scenario.clone(),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Load("trailing bytes after dataset".into()));
    }
    Ok((
        DatasetHeader {
            seed,
            scenario,
            frames: t,
            dims,
        },
        seqs,
    ))
}

pub fn write_dataset(path: &Path, seqs: &[ModalSequence], scenario_seed: u64) -> Result<()> {
    atomic_write(path, &encode_dataset(seqs, scenario_seed)?)
}

pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<ModalSequence>)> {
    decode_dataset(&std::fs::read(path)?)
}
