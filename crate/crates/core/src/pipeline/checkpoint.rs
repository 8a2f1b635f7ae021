//! Binary checkpoint format.
//!
//! ```text
//! magic    "SATN1"
//! version  u32
//! config   u32 length + UTF-8 key=value lines
//! seed     u64
//! epoch    u64
//! has_opt  u8, followed by the Adam step (u64) when set
//! count    u32
//! arrays   count × { u32 name length, name, u8 kind, u32 ndim, ndim × u32 dims, f32 data }
//! ```
//!
//! Integers and floats are little-endian. Array kinds: 0 parameter, 1
//! buffer, 2 Adam first moment, 3 Adam second moment.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{AdamConfig, AdamState, ParamSet};
use crate::satnet::{Model, ModelConfig, SatNet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SATN1";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;

/// A trained model plus the bookkeeping needed to reproduce or resume it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub seed: u64,
    pub epoch: u64,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config().to_kv());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.push(self.optimizer.is_some() as u8);
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&opt.step.to_le_bytes());
        }
        let params = &self.model.params;
        let mut arrays: Vec<(&str, u8, &Tensor<f32>)> = Vec::new();
        arrays.extend(params.iter().map(|p| (p.name.as_str(), KIND_PARAM, &p.value)));
        arrays.extend(params.buffers().iter().map(|(n, t)| (n.as_str(), KIND_BUFFER, t)));
        if let Some(opt) = &self.optimizer {
            for (p, (m, v)) in params.iter().zip(opt.m.iter().zip(&opt.v)) {
                arrays.push((p.name.as_str(), KIND_ADAM_M, m));
                arrays.push((p.name.as_str(), KIND_ADAM_V, v));
            }
        }
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, kind, t) in arrays {
            put_str(&mut out, name);
            out.push(kind);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(5)? != MAGIC {
            return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unknown checkpoint version {version}")));
        }
        let config = ModelConfig::from_kv(&r.string()?)
            .map_err(|e| Error::Checkpoint(format!("invalid config echo: {e}")))?;
        let seed = r.u64()?;
        let epoch = r.u64()?;
        let has_opt = match r.u8()? {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("invalid optimizer flag {f}"))),
        };
        let adam_step = if has_opt { Some(r.u64()?) } else { None };

        let net = SatNet::new(config)?;
        let mut params: ParamSet<f32> = net.init();
        let param_index: HashMap<String, usize> =
            params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let param_shapes: Vec<Vec<usize>> = params.iter().map(|p| p.value.shape().to_vec()).collect();
        let buffer_index: HashMap<String, usize> =
            params.buffers().iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let mut seen: HashSet<(String, u8)> = HashSet::new();
        let mut m = vec![None; params.len()];
        let mut v = vec![None; params.len()];

        let count = r.u32()?;
        for _ in 0..count {
            let name = r.string()?;
            let kind = r.u8()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let expected = match kind {
                KIND_PARAM | KIND_ADAM_M | KIND_ADAM_V => param_index.get(&name).map(|&i| param_shapes[i].clone()),
                KIND_BUFFER => buffer_index.get(&name).map(|&i| params.buffers()[i].1.shape().to_vec()),
                k => return Err(Error::Checkpoint(format!("array {name}: unknown kind {k}"))),
            }
            .ok_or_else(|| Error::Checkpoint(format!("array {name} does not exist in the configured model")))?;
            if shape != expected {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {shape:?} does not match {expected:?} required by the config"
                )));
            }
            if (kind == KIND_ADAM_M || kind == KIND_ADAM_V) && !has_opt {
                return Err(Error::Checkpoint(format!("optimizer array for {name} without optimizer flag")));
            }
            if !seen.insert((name.clone(), kind)) {
                return Err(Error::Checkpoint(format!("array {name} appears twice")));
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(4 * numel)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            let t = Tensor::new(shape, data)?;
            match kind {
                KIND_PARAM => params.set_value(&name, t)?,
                KIND_BUFFER => params.buffers_mut()[buffer_index[&name]].1 = t,
                _ => {
                    let slot = if kind == KIND_ADAM_M { &mut m } else { &mut v };
                    slot[param_index[&name]] = Some(t);
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        for p in params.iter() {
            if !seen.contains(&(p.name.clone(), KIND_PARAM)) {
                return Err(Error::Checkpoint(format!("parameter {} missing", p.name)));
            }
        }
        for (n, _) in params.buffers() {
            if !seen.contains(&(n.clone(), KIND_BUFFER)) {
                return Err(Error::Checkpoint(format!("buffer {n} missing")));
            }
        }
        let optimizer = match adam_step {
            None => None,
            Some(step) => {
                let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
                let unwrap_all = |xs: Vec<Option<Tensor<f32>>>| -> Result<Vec<Tensor<f32>>> {
                    xs.into_iter()
                        .zip(&names)
                        .map(|(x, n)| x.ok_or_else(|| Error::Checkpoint(format!("optimizer state for {n} missing"))))
                        .collect()
                };
                Some(AdamState { config: AdamConfig::default(), step, m: unwrap_all(m)?, v: unwrap_all(v)? })
            }
        };
        Ok(Checkpoint { model: Model { net, params }, optimizer, seed, epoch })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let mut cfg = ModelConfig::with_depth(3);
        cfg.sat.channels = 8;
        cfg.sat.reduction_ratio = 2;
        cfg.seed = 17;
        let model = Model::new(cfg).unwrap();
        let mut opt = AdamState::new(&model.params, AdamConfig::default());
        opt.step = 4;
        opt.m[0].data_mut()[0] = 0.5;
        Checkpoint { model, optimizer: Some(opt), seed: 5, epoch: 12 }
    }

    #[test]
    fn byte_identical_round_trip() {
        let c = small();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.epoch, 12);
        assert_eq!(back.optimizer.as_ref().unwrap().m[0].data()[0], 0.5);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = small().to_bytes();
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("magic"));
        let mut b = bytes.clone();
        b[5] = 9;
        assert!(Checkpoint::from_bytes(&b).unwrap_err().to_string().contains("version"));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn rejects_mismatched_config() {
        let c = small();
        let text = c.config().to_kv().replace("channels=8", "channels=16");
        let mut bytes = c.to_bytes();
        let old = c.config().to_kv();
        assert_eq!(old.len(), text.len() - 1);
        // Rebuild the header with the edited config so only the arrays mismatch.
        let tail = bytes.split_off(9 + 4 + old.len());
        bytes.truncate(9);
        put_str(&mut bytes, &text);
        bytes.extend_from_slice(&tail);
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("left.stem.conv.weight"), "{err}");
    }
}
