//! Parameter files.
//!
//! Binary payload (`.bin`), all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  b"DLORAPRM"
//! version  u32      1
//! count    u32      number of tensors
//! count x {
//!   name_len u32, name (UTF-8), ndim u32, dims u64 x ndim, data f64 x prod(dims)
//! }
//! ```
//!
//! The JSON sidecar (`.json`) carries the adapter kind, dims and the tensor
//! table so a file can be inspected without parsing the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    AdapterKind, AdapterParams, DualLoraParams, LoraParams, MoeParams,
};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const MAGIC: &[u8; 8] = b"DLORAPRM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterMeta {
    pub format: String,
    pub version: u32,
    pub adapter: AdapterKind,
    pub d_in: usize,
    pub d_out: usize,
    /// Layer-norm epsilon (Dual-LoRA only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    /// Shared input dropout (MoE only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe_dropout: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save_adapter(stem: &Path, params: &AdapterParams) -> Result<()> {
    let named = params.named_tensors();
    let meta = AdapterMeta {
        format: "duallora-adapter".into(),
        version: VERSION,
        adapter: params.kind(),
        d_in: params.d_in(),
        d_out: params.d_out(),
        eps: match params {
            AdapterParams::Dual(p) => Some(p.eps),
            _ => None,
        },
        moe_dropout: match params {
            AdapterParams::Moe(p) => Some(p.dropout),
            _ => None,
        },
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    write_tensors(BufWriter::new(File::create(with_ext(stem, "bin"))?), &named)?;
    let mut js = serde_json::to_string_pretty(&meta)?;
    js.push('\n');
    std::fs::write(with_ext(stem, "json"), js)?;
    Ok(())
}

/// Reads a pair written by [`save_adapter`], validating names and shapes
/// against the sidecar.
pub fn load_adapter(stem: &Path) -> Result<AdapterParams> {
    let meta: AdapterMeta = serde_json::from_str(&std::fs::read_to_string(with_ext(stem, "json"))?)?;
    let tensors = read_tensors(BufReader::new(File::open(with_ext(stem, "bin"))?))?;
    if tensors.len() != meta.tensors.len() {
        return Err(Error::Format("tensor count differs from sidecar".into()));
    }
    for ((name, t), entry) in tensors.iter().zip(&meta.tensors) {
        if name != &entry.name || t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!("tensor {name} does not match sidecar entry {}", entry.name)));
        }
    }
    let mut it = tensors.into_iter().map(|(_, t)| Arc::new(t));
    let mut next = || it.next().ok_or_else(|| Error::Format("missing tensor".into()));
    let params = match &meta.adapter {
        AdapterKind::Lora { hyper } => AdapterParams::Lora(LoraParams { a: next()?, b: next()?, hyper: *hyper }),
        AdapterKind::DualLora { hyper } => AdapterParams::Dual(DualLoraParams {
            s: next()?,
            t: next()?,
            b: next()?,
            norm_gain: next()?,
            norm_bias: next()?,
            hyper: *hyper,
            eps: meta.eps.unwrap_or(crate::numeric::LN_EPS),
        }),
        AdapterKind::Moe { experts, strategy } => {
            let router = next()?;
            let mut ex = Vec::with_capacity(experts.len());
            for h in experts {
                ex.push(LoraParams { a: next()?, b: next()?, hyper: *h });
            }
            AdapterParams::Moe(MoeParams {
                experts: ex,
                router,
                strategy: *strategy,
                dropout: meta.moe_dropout.unwrap_or(0.0),
            })
        }
    };
    if params.d_in() != meta.d_in || params.d_out() != meta.d_out {
        return Err(Error::Format("dims differ from sidecar".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, GateStrategy};
    use crate::numeric::Rng;

    #[test]
    fn header_layout() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), &t)]).unwrap();
        assert_eq!(&buf[..8], b"DLORAPRM");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 1);
        assert_eq!(buf[20], b'w');
        assert_eq!(u32::from_le_bytes(buf[21..25].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[25..33].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[33..41].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[41..49].try_into().unwrap()), 1.0);
        assert_eq!(buf.len(), 57);
    }

    #[test]
    fn rejects_corrupt_payloads() {
        assert!(matches!(read_tensors(&b"NOTMAGIC\x01\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), &Tensor::ones(&[3]))]).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_tensors(&buf[..]), Err(Error::Io(_))));
    }

    #[test]
    fn adapters_survive_a_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(0);
        let kinds = [
            AdapterKind::lora(3),
            AdapterKind::dual(2),
            AdapterKind::moe(&[4, 2, 1, 1], GateStrategy::TopK(2)),
        ];
        for (i, kind) in kinds.iter().enumerate() {
            let mut p = init_adapter(kind, 5, 4, i as u64).unwrap();
            for t in p.tensors_mut() {
                let shape = t.shape().to_vec();
                *t = Arc::new(rng.normal_tensor(&shape, 1.0));
            }
            let stem = dir.path().join(format!("a{i}"));
            save_adapter(&stem, &p).unwrap();
            let q = load_adapter(&stem).unwrap();
            assert_eq!(q.kind(), p.kind());
            for ((n1, t1), (n2, t2)) in p.named_tensors().iter().zip(q.named_tensors()) {
                assert_eq!(n1, &n2);
                assert_eq!(t1.data(), t2.data());
            }
        }
    }
}
