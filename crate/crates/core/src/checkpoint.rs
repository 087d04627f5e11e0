//! Binary checkpoints and the pBE / MIMO / BE checkpoint adaptations.
//!
//! Layout: `b"MOEL"`, a little-endian `u32` version, a little-endian `u64`
//! header length, a UTF-8 JSON header listing `{name, shape, dtype}` in storage
//! order, then the `f32` little-endian blobs in the same order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{build_model, BeInit, BlockKind, Model, ModelSpec, ParamStore, Variant};
use crate::numerics::{Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"MOEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

/// Checks names and shapes against a fresh build of `spec` and returns the
/// parameters in canonical order.
fn canonical(spec: &ModelSpec, params: ParamStore) -> Result<ParamStore> {
    let reference = build_model(spec, &mut Rng::new(0))?;
    if reference.params.len() != params.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, spec needs {}",
            params.len(),
            reference.params.len()
        )));
    }
    let mut out = ParamStore::new();
    for (name, t) in reference.params.iter() {
        let got = params.get(name).map_err(|_| Error::Format(format!("missing tensor `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::Format(format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
        out.insert(name.clone(), got.clone());
    }
    Ok(out)
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let params = canonical(&spec, params)?;
        Ok(Self { version: FORMAT_VERSION, spec, params })
    }

    pub fn from_model(model: &Model) -> Result<Self> {
        Self::new(model.spec.clone(), model.params.clone())
    }

    pub fn into_model(self) -> Model {
        Model { spec: self.spec, params: self.params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            spec: self.spec.clone(),
            tensors: self
                .params
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec(), dtype: "f32".into() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(fmt("not a MOEL checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 16 + hlen;
        let mut params = ParamStore::new();
        for entry in header.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Format(format!("unsupported dtype `{}`", entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| fmt("truncated tensor data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            params.insert(entry.name, Tensor::new(entry.shape, data)?);
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(fmt("trailing bytes after tensor data"));
        }
        let params = canonical(&header.spec, params)?;
        Ok(Self { version, spec: header.spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn sparse_blocks(spec: &ModelSpec) -> Vec<usize> {
    spec.block_kinds().iter().enumerate().filter(|(_, k)| matches!(k, BlockKind::Sparse(_))).map(|(i, _)| i).collect()
}

/// V-MoE to pBE: every router is sliced row-wise into `M` blocks.
pub fn adapt_checkpoint_pbe(ckpt: &Checkpoint, m: usize) -> Result<Checkpoint> {
    adapt_vmoe_checkpoint(ckpt, Variant::Pbe, m)
}

/// V-MoE to `pbe`, `only_tiling` or `only_partitioning`. Experts carry over
/// unchanged; partitioned variants slice each router row-wise into `M` blocks.
pub fn adapt_vmoe_checkpoint(ckpt: &Checkpoint, variant: Variant, m: usize) -> Result<Checkpoint> {
    if ckpt.spec.variant != Variant::Vmoe {
        return config_err("sparse-ensemble adaptation starts from a vmoe checkpoint");
    }
    if !matches!(variant, Variant::Pbe | Variant::OnlyTiling | Variant::OnlyPartitioning) {
        return config_err(format!("cannot adapt a vmoe checkpoint to `{}`", variant.name()));
    }
    if m == 0 || ckpt.spec.experts % m != 0 {
        return config_err(format!("E={} not divisible by M={m}", ckpt.spec.experts));
    }
    let mut spec = ckpt.spec.clone();
    spec.variant = variant;
    spec.m = m;
    let mut params = ckpt.params.clone();
    if spec.router_blocks() > 1 {
        for b in sparse_blocks(&ckpt.spec) {
            let name = format!("blocks.{b}.moe.router");
            let w = params.remove(&name).ok_or_else(|| Error::Format(format!("missing `{name}`")))?;
            let per = w.rows() / m;
            for i in 0..m {
                params.insert(format!("{name}.{i}"), w.select_rows(&(i * per..(i + 1) * per).collect::<Vec<_>>()));
            }
        }
    }
    Checkpoint::new(spec, params)
}

/// ViT or V-MoE to MIMO: input embedding replicated over channel slots, head
/// replicated over outputs, both weights scaled by `1/M`; head bias replicated.
pub fn adapt_checkpoint_mimo(ckpt: &Checkpoint, m: usize) -> Result<Checkpoint> {
    let base = ckpt.spec.variant;
    if !matches!(base, Variant::Vit | Variant::Vmoe) {
        return config_err("MIMO adaptation starts from a vit or vmoe checkpoint");
    }
    if m == 0 {
        return config_err("M must be positive");
    }
    let mut spec = ckpt.spec.clone();
    spec.variant = Variant::Mimo;
    spec.mimo_base = base;
    spec.m = m;
    let inv = 1.0 / m as f64;
    let c_in = ckpt.spec.channels;
    let mut params = ckpt.params.clone();

    let ew = params.get("embed.w")?.clone();
    let d = ew.cols();
    let pixels = ew.rows() / c_in;
    let mut new_ew = Tensor::zeros(&[pixels * c_in * m, d]);
    for px in 0..pixels {
        for slot in 0..m {
            for c in 0..c_in {
                let src = ew.row(px * c_in + c);
                let dst = new_ew.row_mut((px * m + slot) * c_in + c);
                for (o, v) in dst.iter_mut().zip(src) {
                    *o = v * inv;
                }
            }
        }
    }
    *params.get_mut("embed.w").expect("present") = new_ew;

    let hw = params.get("head.w")?.clone();
    let classes = hw.cols();
    let new_hw = Tensor::from_fn(&[hw.rows(), classes * m], |i| {
        let (r, col) = (i / (classes * m), i % (classes * m));
        hw.get2(r, col % classes) * inv
    });
    *params.get_mut("head.w").expect("present") = new_hw;
    let hb = params.get("head.b")?.clone();
    let new_hb = Tensor::from_fn(&[classes * m], |i| hb.data()[i % classes]);
    *params.get_mut("head.b").expect("present") = new_hb;
    Checkpoint::new(spec, params)
}

/// ViT to BE: the last-n MLPs become shared `U` with fresh rank-1 factors.
pub fn adapt_checkpoint_be(ckpt: &Checkpoint, m: usize, init: BeInit, rng: &mut Rng) -> Result<Checkpoint> {
    if ckpt.spec.variant != Variant::Vit {
        return config_err("BE adaptation starts from a vit checkpoint");
    }
    if m == 0 {
        return config_err("M must be positive");
    }
    let mut spec = ckpt.spec.clone();
    spec.variant = Variant::Be;
    spec.m = m;
    spec.be_init = init;
    let (d, f) = (spec.hidden, spec.mlp_dim);
    let mut params = ckpt.params.clone();
    let factor = |rng: &mut Rng, shape: &[usize]| match init {
        BeInit::RandomSign => rng.uniform(shape).map(|u| if u < 0.5 { -1.0 } else { 1.0 }),
        BeInit::Gaussian => rng.gaussian(shape).map(|z| 1.0 + 0.5 * z),
    };
    for (i, kind) in spec.block_kinds().into_iter().enumerate() {
        if kind != BlockKind::BatchEnsemble {
            continue;
        }
        let mp = format!("blocks.{i}.mlp");
        params.insert(format!("{mp}.w1_r"), factor(rng, &[m, d]));
        params.insert(format!("{mp}.w1_s"), factor(rng, &[m, f]));
        params.insert(format!("{mp}.w2_r"), factor(rng, &[m, f]));
        params.insert(format!("{mp}.w2_s"), factor(rng, &[m, d]));
    }
    Checkpoint::new(spec, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let spec = ModelSpec::tiny(Variant::Pbe, 3).with_m(2);
        let model = build_model(&spec, &mut Rng::new(4)).unwrap();
        let ck = Checkpoint::from_model(&model).unwrap();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((n, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.to_f32_precision(), *b, "{n}");
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let spec = ModelSpec::tiny(Variant::Vit, 2);
        let bytes = Checkpoint::from_model(&build_model(&spec, &mut Rng::new(0)).unwrap()).unwrap().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
