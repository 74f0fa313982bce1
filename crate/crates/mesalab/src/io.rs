//! Binary named-tensor container used for checkpoints and frozen corpora.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MESA"  version:u32  count:u32
//! repeat count times:
//!     name_len:u32  name:[u8; name_len]  (UTF-8)
//!     rank:u32  dims:[u32; rank]
//!     dtype:u8  (0 = f64, 1 = f32)
//!     payload: product(dims) values, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::Matrix;
use crate::seqgen::{GeneratorSpec, SequenceBatch, Teacher};
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 4] = b"MESA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!("dims {dims:?} vs {} values", data.len())));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor { dims: vec![m.rows(), m.cols()], data: TensorData::F64(m.data().to_vec()) }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims[..] {
            [r, c] => Matrix::new(r, c, self.data.to_f64()),
            _ => Err(Error::Format(format!("expected a rank-2 tensor, found dims {:?}", self.dims))),
        }
    }

    /// Stacks equally shaped matrices into a `n × r × c` tensor.
    pub fn stack(ms: &[Matrix]) -> Result<Self> {
        let (r, c) = ms.first().map(|m| m.shape()).unwrap_or((0, 0));
        let mut data = Vec::with_capacity(ms.len() * r * c);
        for m in ms {
            if m.shape() != (r, c) {
                return Err(Error::ShapeMismatch("stacked matrices differ in shape".into()));
            }
            data.extend_from_slice(m.data());
        }
        Tensor::new(vec![ms.len(), r, c], TensorData::F64(data))
    }

    pub fn unstack(&self) -> Result<Vec<Matrix>> {
        let [n, r, c] = self.dims[..] else {
            return Err(Error::Format(format!("expected a rank-3 tensor, found dims {:?}", self.dims)));
        };
        let data = self.data.to_f64();
        (0..n).map(|i| Matrix::new(r, c, data[i * r * c..(i + 1) * r * c].to_vec())).collect()
    }
}

/// Ordered set of uniquely named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct NamedTensorContainer {
    pub entries: Vec<(String, Tensor)>,
}

impl NamedTensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(t.data.tag());
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut c = NamedTensorContainer::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("name is not UTF-8".into()))?.to_string();
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("dims overflow".into()))?;
            let data = match r.take(1)?[0] {
                0 => TensorData::F64(r.take(n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
                1 => TensorData::F32(r.take(n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
                t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
            };
            c.insert(&name, Tensor { dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Io(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";
const OPT_STEP: &str = "opt.step";

/// Parameters, plus the optimizer state when given.
pub fn checkpoint_container(params: &ModelParams, state: Option<&OptimizerState>) -> Result<NamedTensorContainer> {
    let mut c = NamedTensorContainer::new();
    for (k, m) in &params.tensors {
        c.insert(k, Tensor::from_matrix(m))?;
    }
    if let Some(s) = state {
        for (k, m) in &s.m {
            c.insert(&format!("{OPT_M}{k}"), Tensor::from_matrix(m))?;
        }
        for (k, m) in &s.v {
            c.insert(&format!("{OPT_V}{k}"), Tensor::from_matrix(m))?;
        }
        // u64 step stored as two exact u32 halves
        let halves = vec![(s.step >> 32) as f64, (s.step & 0xffff_ffff) as f64];
        c.insert(OPT_STEP, Tensor::new(vec![2], TensorData::F64(halves))?)?;
    }
    Ok(c)
}

pub fn checkpoint_parts(c: &NamedTensorContainer) -> Result<(ModelParams, Option<OptimizerState>)> {
    let mut params = ModelParams::default();
    let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
    let mut step = None;
    for (name, t) in &c.entries {
        if let Some(k) = name.strip_prefix(OPT_M) {
            m.insert(k.to_string(), t.to_matrix()?);
        } else if let Some(k) = name.strip_prefix(OPT_V) {
            v.insert(k.to_string(), t.to_matrix()?);
        } else if name == OPT_STEP {
            let h = t.data.to_f64();
            if h.len() != 2 {
                return Err(Error::Format("optimizer step".into()));
            }
            step = Some(((h[0] as u64) << 32) | h[1] as u64);
        } else {
            params.set(name, t.to_matrix()?);
        }
    }
    let state = step.map(|step| OptimizerState { m, v, step });
    Ok((params, state))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, state: Option<&OptimizerState>) -> Result<()> {
    checkpoint_container(params, state)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<OptimizerState>)> {
    checkpoint_parts(&NamedTensorContainer::load(path)?)
}

/// Observations `B × T × n_s`, states `B × T × n_h`, teacher matrices and
/// clip flags.
pub fn batch_container(batch: &SequenceBatch) -> Result<NamedTensorContainer> {
    let mut c = NamedTensorContainer::new();
    c.insert("observations", Tensor::stack(&batch.observations)?)?;
    c.insert("states", Tensor::stack(&batch.states)?)?;
    let ws: Vec<Matrix> = batch.teachers.iter().map(|t| t.w.clone()).collect();
    let cs: Vec<Matrix> = batch.teachers.iter().map(|t| t.c.clone()).collect();
    c.insert("teacher.w", Tensor::stack(&ws)?)?;
    c.insert("teacher.c", Tensor::stack(&cs)?)?;
    if batch.teachers.iter().all(|t| t.mlp.is_some()) && !batch.teachers.is_empty() {
        let a: Vec<Matrix> = batch.teachers.iter().map(|t| t.mlp.as_ref().unwrap().0.clone()).collect();
        let b: Vec<Matrix> = batch.teachers.iter().map(|t| t.mlp.as_ref().unwrap().1.clone()).collect();
        c.insert("teacher.mlp_a", Tensor::stack(&a)?)?;
        c.insert("teacher.mlp_b", Tensor::stack(&b)?)?;
    }
    let flags = batch.clipped.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    c.insert("clipped", Tensor::new(vec![batch.len()], TensorData::F64(flags))?)?;
    Ok(c)
}

/// Inverse of [`batch_container`]; the generator settings are not stored in the container.
pub fn batch_from_container(c: &NamedTensorContainer, spec: GeneratorSpec) -> Result<SequenceBatch> {
    let observations = c.require("observations")?.unstack()?;
    let states = c.require("states")?.unstack()?;
    let ws = c.require("teacher.w")?.unstack()?;
    let cs = c.require("teacher.c")?.unstack()?;
    let mlp = match (c.get("teacher.mlp_a"), c.get("teacher.mlp_b")) {
        (Some(a), Some(b)) => Some((a.unstack()?, b.unstack()?)),
        _ => None,
    };
    let teachers = ws
        .into_iter()
        .zip(cs)
        .enumerate()
        .map(|(i, (w, c))| Teacher { w, c, mlp: mlp.as_ref().map(|(a, b)| (a[i].clone(), b[i].clone())) })
        .collect();
    let clipped = c.require("clipped")?.data.to_f64().into_iter().map(|x| x != 0.0).collect();
    let batch = SequenceBatch { observations, states, teachers, clipped, spec };
    if batch.states.len() != batch.len() || batch.clipped.len() != batch.len() {
        return Err(Error::Format("batch tensors disagree in length".into()));
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TransformerConfig;
    use crate::numerics::Rng;
    use crate::seqgen::gen_sequences;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut c = NamedTensorContainer::new();
        c.insert("ab", Tensor::new(vec![1], TensorData::F32(vec![1.5])).unwrap()).unwrap();
        let b = c.to_bytes();
        assert_eq!(&b[..4], b"MESA");
        assert_eq!(&b[4..12], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[12..18], &[2, 0, 0, 0, b'a', b'b']);
        assert_eq!(&b[18..26], &[1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(b[26], 1);
        assert_eq!(&b[27..], &1.5f32.to_le_bytes());
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let mut c = NamedTensorContainer::new();
        c.insert("x", Tensor::from_matrix(&Matrix::identity(2))).unwrap();
        assert!(c.insert("x", Tensor::from_matrix(&Matrix::identity(2))).is_err());
        let b = c.to_bytes();
        assert!(NamedTensorContainer::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(NamedTensorContainer::from_bytes(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(NamedTensorContainer::from_bytes(&extra).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = TransformerConfig::hybrid_mesa(3);
        let p = ModelParams::init(&cfg, &mut Rng::new(1, 0)).unwrap();
        let mut s = OptimizerState::new(&p);
        s.step = (7u64 << 32) + 11;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.mesa");
        save_checkpoint(&path, &p, Some(&s)).unwrap();
        let (q, t) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(Some(s), t);
        save_checkpoint(&path, &p, None).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().1, None);
    }

    #[test]
    fn batch_round_trip() {
        let spec = GeneratorSpec::fully_observed(2, 6).with_kind(crate::seqgen::GeneratorKind::Nonlinear);
        let spec = GeneratorSpec { n_m: 5, ..spec };
        let b = gen_sequences(&spec, 3, &Rng::new(2, 0)).unwrap();
        let c = batch_container(&b).unwrap();
        assert_eq!(c.require("observations").unwrap().dims, vec![3, 6, 2]);
        let back = batch_from_container(&NamedTensorContainer::from_bytes(&c.to_bytes()).unwrap(), spec).unwrap();
        assert_eq!(b, back);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_identical(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 0..40),
            halves in proptest::collection::vec(proptest::num::f32::ANY, 0..10),
        ) {
            let mut c = NamedTensorContainer::new();
            c.insert("a", Tensor::new(vec![vals.len()], TensorData::F64(vals.clone())).unwrap()).unwrap();
            c.insert("ü/b", Tensor::new(vec![1, halves.len()], TensorData::F32(halves.clone())).unwrap()).unwrap();
            let bytes = c.to_bytes();
            let d = NamedTensorContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(d.to_bytes(), bytes);
            let TensorData::F64(v) = &d.get("a").unwrap().data else { panic!() };
            prop_assert!(v.iter().zip(&vals).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
