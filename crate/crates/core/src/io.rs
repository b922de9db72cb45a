//! Binary tensor container and model checkpoints.
//!
//! A tensor file is the 8-byte magic `CDTENSOR`, a `u32` version, a `u32`
//! dtype code (0 = f64, 1 = f32, 2 = u8), a `u32` rank, one `u64` per
//! dimension and the row-major payload. All integers and floats are
//! little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clothsim::make_grid_cloth;
use crate::dynamics::{DdmConfig, DdmModel};
use crate::error::{Error, Result};
use crate::geometry::{ClothMesh, Vec3};
use crate::neural::{ParamStore, Tensor};
use crate::perception::{DpmConfig, DpmModel};

pub const MAGIC: &[u8; 8] = b"CDTENSOR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    fn code(&self) -> u32 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
            TensorData::U8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<u64>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(shape: &[usize], data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.iter().map(|&d| d as u64).collect(),
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().iter().map(|&d| d as u64).collect(),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let shape: Vec<usize> = self.shape.iter().map(|&d| d as usize).collect();
        Tensor::new(&shape, self.data.to_f64())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.shape.len() + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.data.code().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a tensor file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported tensor file version {version}"
            )));
        }
        let code = r.u32()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<u64>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let n = n.ok_or_else(|| Error::Format("tensor shape overflows".into()))?;
        let width = match code {
            0 => 8,
            1 => 4,
            2 => 1,
            c => return Err(Error::Format(format!("unknown dtype code {c}"))),
        };
        let expected = n
            .checked_mul(width)
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let payload = r.take(expected)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        let data = match code {
            0 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            _ => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("tensor file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Vertex positions as an `[N, 3]` f64 tensor file.
pub fn points_to_file(points: &[Vec3]) -> TensorFile {
    TensorFile {
        shape: vec![points.len() as u64, 3],
        data: TensorData::F64(points.iter().flatten().copied().collect()),
    }
}

pub fn points_from_file(f: &TensorFile) -> Result<Vec<Vec3>> {
    if f.shape.len() != 2 || f.shape[1] != 3 {
        return Err(Error::Format(format!(
            "expected [N, 3] points, got {:?}",
            f.shape
        )));
    }
    Ok(f.data
        .to_f64()
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect())
}

/// Rectangular grid cloth description; rebuilds the canonical template.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClothSpec {
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub height: f64,
}

impl Default for ClothSpec {
    fn default() -> Self {
        Self {
            rows: 8,
            cols: 8,
            spacing: 0.05,
            height: 0.0,
        }
    }
}

impl ClothSpec {
    pub fn build(&self) -> Result<ClothMesh> {
        if !(self.spacing > 0.0) {
            return Err(Error::Config("cloth spacing must be positive".into()));
        }
        make_grid_cloth(self.rows, self.cols, self.spacing, self.height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dpm,
    Ddm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub cloth: ClothSpec,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn save_store(dir: &Path, store: &ParamStore) -> Result<Vec<ParamEntry>> {
    fs::create_dir_all(dir.join("params"))?;
    store
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let file = format!("params/{i:04}.cdt");
            TensorFile::from_tensor(t).write(&dir.join(&file))?;
            Ok(ParamEntry {
                name: name.to_string(),
                file,
                shape: t.shape().to_vec(),
            })
        })
        .collect()
}

fn load_store(dir: &Path, entries: &[ParamEntry]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for e in entries {
        let t = TensorFile::read(&dir.join(&e.file))?.to_tensor()?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "{}: manifest shape {:?}, file shape {:?}",
                e.name,
                e.shape,
                t.shape()
            )));
        }
        s.add(&e.name, t)?;
    }
    Ok(s)
}

fn write_manifest(dir: &Path, m: &CheckpointManifest) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

fn read_manifest(dir: &Path, kind: ModelKind) -> Result<CheckpointManifest> {
    let m: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.kind != kind {
        return Err(Error::Format(format!(
            "checkpoint holds a {:?} model, expected {kind:?}",
            m.kind
        )));
    }
    Ok(m)
}

pub fn save_dpm(dir: &Path, model: &DpmModel, cloth: &ClothSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = save_store(dir, &model.store)?;
    write_manifest(
        dir,
        &CheckpointManifest {
            kind: ModelKind::Dpm,
            cloth: *cloth,
            config: serde_json::to_value(&model.config)?,
            params,
        },
    )
}

pub fn load_dpm(dir: &Path) -> Result<(DpmModel, ClothSpec)> {
    let m = read_manifest(dir, ModelKind::Dpm)?;
    let config: DpmConfig = serde_json::from_value(m.config)?;
    let mut model = DpmModel::new(&m.cloth.build()?, config)?;
    model.store.load_from(&load_store(dir, &m.params)?)?;
    Ok((model, m.cloth))
}

pub fn save_ddm(dir: &Path, model: &DdmModel, cloth: &ClothSpec) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = save_store(dir, &model.store)?;
    write_manifest(
        dir,
        &CheckpointManifest {
            kind: ModelKind::Ddm,
            cloth: *cloth,
            config: serde_json::to_value(&model.config)?,
            params,
        },
    )
}

pub fn load_ddm(dir: &Path) -> Result<(DdmModel, ClothSpec)> {
    let m = read_manifest(dir, ModelKind::Ddm)?;
    let config: DdmConfig = serde_json::from_value(m.config)?;
    let mut model = DdmModel::new(&m.cloth.build()?, config)?;
    model.store.load_from(&load_store(dir, &m.params)?)?;
    Ok((model, m.cloth))
}
