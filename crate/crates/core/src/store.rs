//! Self-describing binary container for datasets, checkpoints and meshes.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! "VSDT"                      magic, 4 bytes
//! version                     u32
//! metadata_len                u32, then metadata_len bytes of UTF-8 JSON
//! entry_count                 u32
//! entry_count × {
//!     name_len                u16, then name_len bytes of UTF-8
//!     dtype                   u8   (0 = f32, 1 = f16, 2 = i8)
//!     rank                    u8
//!     dims                    rank × u32
//!     payload                 product(dims) × dtype size bytes
//! }
//! crc32                       u32 over every preceding byte
//! ```

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use viscosurr_tensorad::Tensor;

use crate::error::{CoreError, Result};
use crate::femsim::{Frame, Material, ScenarioConfig, Sequence, SequenceDataset};
use crate::meshkit::{Field3, GridMesh, MeshDescriptor};
use crate::surrogate::{ModelInstance, ModelSpec, Normalization, Param};
use crate::trainer::{AdamState, Checkpoint, EpochLog, Objective, TrainConfig};

pub const MAGIC: &[u8; 4] = b"VSDT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32 = 0,
    F16 = 1,
    I8 = 2,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F16),
            2 => Some(DType::I8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F16(_) => DType::F16,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to `f32`.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            TensorData::F32(v) => v.clone(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f32()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Entry { name: name.into(), dims: dims.to_vec(), data: TensorData::F32(data) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CoreError::Schema { expected: format!("entry {name}"), found: "nothing".into() })
    }
}

fn validate(c: &Container) -> Result<()> {
    let mut seen = HashSet::new();
    for e in &c.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(CoreError::contract("write_container", format!("duplicate entry name {:?}", e.name)));
        }
        if e.name.len() > u16::MAX as usize {
            return Err(CoreError::contract("write_container", format!("entry name too long ({} bytes)", e.name.len())));
        }
        if e.dims.len() > u8::MAX as usize || e.dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(CoreError::contract("write_container", format!("{}: dims {:?} not representable", e.name, e.dims)));
        }
        let n: usize = e.dims.iter().product();
        if n != e.data.len() {
            return Err(CoreError::contract(
                "write_container",
                format!("{}: dims {:?} hold {n} values but {} given", e.name, e.dims, e.data.len()),
            ));
        }
    }
    Ok(())
}

/// Serializes a container to bytes.
pub fn encode(c: &Container) -> Result<Vec<u8>> {
    validate(c)?;
    let meta = serde_json::to_vec(&c.metadata)?;
    let mut out = Vec::with_capacity(64 + meta.len() + c.entries.iter().map(|e| e.data.len() * 4 + 64).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(c.entries.len() as u32).to_le_bytes());
    for e in &c.entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype() as u8);
        out.push(e.dims.len() as u8);
        for &d in &e.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CoreError::Parse {
                offset: self.pos,
                msg: format!("truncated {}: need {n} bytes, {} left", what(), self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses and validates a container.
pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CoreError::Parse { offset: 0, msg: "bad magic (not a VSDT container)".into() });
    }
    if bytes.len() < 8 {
        return Err(CoreError::Parse { offset: 4, msg: "truncated header".into() });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version > FORMAT_VERSION || version == 0 {
        return Err(CoreError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    if bytes.len() < 12 {
        return Err(CoreError::Parse { offset: 8, msg: "truncated header".into() });
    }
    let body_len = bytes.len() - 4;
    let stored_crc = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let mut r = Reader { buf: &bytes[..body_len], pos: 8 };
    let meta_len = r.u32(&|| "metadata length".into())? as usize;
    let meta_start = r.pos;
    let meta_bytes = r.take(meta_len, &|| "metadata".into())?;
    let metadata: Value = serde_json::from_slice(meta_bytes)
        .map_err(|e| CoreError::Parse { offset: meta_start, msg: format!("metadata is not valid JSON: {e}") })?;
    let count = r.u32(&|| "entry count".into())? as usize;
    let mut entries: Vec<Entry> = Vec::new();
    let mut seen = HashSet::new();
    for i in 0..count {
        let start = r.pos;
        let label = move || format!("entry #{i}");
        let name_len = r.u16(&|| format!("{} name length", label()))? as usize;
        let name_bytes = r.take(name_len, &|| format!("{} name", label()))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CoreError::Parse { offset: start + 2, msg: format!("{} name is not UTF-8", label()) })?
            .to_string();
        let ctx = |what: &str| format!("entry {name:?} {what}");
        if !seen.insert(name.clone()) {
            return Err(CoreError::Parse { offset: start, msg: format!("duplicate entry name {name:?}") });
        }
        let code_at = r.pos;
        let code = r.u8(&|| ctx("dtype"))?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| CoreError::Parse { offset: code_at, msg: format!("{}: unknown dtype code {code}", ctx("header")) })?;
        let rank = r.u8(&|| ctx("rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32(&|| ctx("dims"))? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
        let (n, nbytes) = n.ok_or_else(|| CoreError::Parse { offset: start, msg: format!("{}: dims {dims:?} overflow", ctx("header")) })?;
        let payload = r.take(nbytes, &|| ctx("payload"))?;
        let data = match dtype {
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F16 => TensorData::F16(payload.chunks_exact(2).map(|c| f16::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
        };
        debug_assert_eq!(data.len(), n);
        entries.push(Entry { name, dims, data });
    }
    if r.pos != body_len {
        return Err(CoreError::Parse { offset: r.pos, msg: format!("{} unexpected trailing bytes", body_len - r.pos) });
    }
    let crc = crc32fast::hash(&bytes[..body_len]);
    if crc != stored_crc {
        return Err(CoreError::Parse {
            offset: body_len,
            msg: format!("checksum mismatch (stored {stored_crc:08x}, computed {crc:08x})"),
        });
    }
    Ok(Container { metadata, entries })
}

/// Writes atomically: the bytes go to a temporary file in the target
/// directory, which is then renamed over `path`.
pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    let bytes = encode(c)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CoreError::io(dir, e))?;
    std::io::Write::write_all(&mut tmp, &bytes).map_err(|e| CoreError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| CoreError::io(path, e))?;
    tmp.persist(path).map_err(|e| CoreError::io(path, e.error))?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode(&bytes)
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    let v = meta.get(key).ok_or_else(|| CoreError::Schema { expected: format!("metadata field {key}"), found: "nothing".into() })?;
    Ok(serde_json::from_value(v.clone())?)
}

fn expect_kind(meta: &Value, kind: &str) -> Result<()> {
    let found: String = meta_field(meta, "kind")?;
    if found != kind {
        return Err(CoreError::Schema { expected: format!("{kind} container"), found: format!("{found} container") });
    }
    Ok(())
}

fn check_schema(meta: &Value, mesh: Option<&GridMesh>) -> Result<()> {
    if let Some(mesh) = mesh {
        let found: String = meta_field(meta, "schema_tag")?;
        if found != mesh.schema_tag() {
            return Err(CoreError::Schema { expected: mesh.schema_tag(), found });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Meshes.

pub fn mesh_to_container(mesh: &GridMesh) -> Container {
    Container {
        metadata: json!({ "kind": "mesh", "schema_tag": mesh.schema_tag(), "mesh": mesh.descriptor() }),
        entries: Vec::new(),
    }
}

pub fn mesh_from_container(c: &Container) -> Result<GridMesh> {
    expect_kind(&c.metadata, "mesh")?;
    GridMesh::from_descriptor(&meta_field::<MeshDescriptor>(&c.metadata, "mesh")?)
}

// ---------------------------------------------------------------------------
// Datasets: per sequence a `[frames, X, Y, Z, 3]` force and displacement entry.

pub fn dataset_to_container(ds: &SequenceDataset) -> Container {
    let [x, y, z] = ds.mesh.dims();
    let mut entries = Vec::with_capacity(2 * ds.sequences.len());
    let mut times = Vec::with_capacity(ds.sequences.len());
    for (i, seq) in ds.sequences.iter().enumerate() {
        let dims = [seq.frames.len(), x, y, z, 3];
        let pack = |get: &dyn Fn(&Frame) -> &Field3| -> Vec<f32> {
            seq.frames.iter().flat_map(|f| get(f).values().iter().map(|&v| v as f32)).collect()
        };
        entries.push(Entry::f32(format!("seq{i}.force"), &dims, pack(&|f| &f.force)));
        entries.push(Entry::f32(format!("seq{i}.displacement"), &dims, pack(&|f| &f.displacement)));
        times.push(seq.frames.iter().map(|f| f.t).collect::<Vec<f64>>());
    }
    let metadata = json!({
        "kind": "dataset",
        "schema_tag": ds.mesh.schema_tag(),
        "mesh": ds.mesh.descriptor(),
        "material": ds.material,
        "scenario": ds.config,
        "seed": ds.seed,
        "dt": ds.dt,
        "sequences": ds.sequences.len(),
        "frames": ds.sequences.iter().map(|s| s.frames.len()).collect::<Vec<_>>(),
        "times": times,
    });
    Container { metadata, entries }
}

/// Decodes a dataset; with `mesh` given, refuses data generated on another mesh.
pub fn dataset_from_container(c: &Container, mesh: Option<&GridMesh>) -> Result<SequenceDataset> {
    let meta = &c.metadata;
    expect_kind(meta, "dataset")?;
    check_schema(meta, mesh)?;
    let stored = GridMesh::from_descriptor(&meta_field::<MeshDescriptor>(meta, "mesh")?)?;
    let tag: String = meta_field(meta, "schema_tag")?;
    if tag != stored.schema_tag() {
        return Err(CoreError::Schema { expected: stored.schema_tag(), found: tag });
    }
    let dims = stored.dims();
    let n: usize = meta_field(meta, "sequences")?;
    let times: Vec<Vec<f64>> = meta_field(meta, "times")?;
    if times.len() != n {
        return Err(CoreError::Schema { expected: format!("{n} time series"), found: format!("{}", times.len()) });
    }
    let vox = 3 * stored.n_nodes();
    let mut sequences = Vec::with_capacity(n);
    for (i, t) in times.iter().enumerate() {
        let field_entry = |what: &str| -> Result<Vec<Field3>> {
            let e = c.entry(&format!("seq{i}.{what}"))?;
            let want = [t.len(), dims[0], dims[1], dims[2], 3];
            if e.dims != want {
                return Err(CoreError::Schema { expected: format!("{} dims {want:?}", e.name), found: format!("{:?}", e.dims) });
            }
            let data = e.data.to_f32();
            data.chunks(vox.max(1))
                .take(t.len())
                .map(|c| Field3::from_values(dims, c.iter().map(|&v| v as f64).collect()))
                .collect()
        };
        let forces = field_entry("force")?;
        let disps = field_entry("displacement")?;
        let frames = t
            .iter()
            .zip(forces.into_iter().zip(disps))
            .map(|(&t, (force, displacement))| Frame { t, force, displacement })
            .collect();
        sequences.push(Sequence { frames });
    }
    Ok(SequenceDataset {
        mesh: stored,
        material: meta_field::<Material>(meta, "material")?,
        config: meta_field::<ScenarioConfig>(meta, "scenario")?,
        seed: meta_field(meta, "seed")?,
        dt: meta_field(meta, "dt")?,
        sequences,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints: parameters, optimizer moments and training bookkeeping.

/// Storage precision of checkpoint parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ParamPrecision {
    #[default]
    F32,
    F16,
}

pub fn checkpoint_to_container(ckpt: &Checkpoint, precision: ParamPrecision) -> Container {
    let model = &ckpt.model;
    let mut entries = Vec::with_capacity(3 * model.params.len());
    for p in &model.params {
        let data = match precision {
            ParamPrecision::F32 => TensorData::F32(p.value.data().to_vec()),
            ParamPrecision::F16 => TensorData::F16(p.value.data().iter().map(|&x| f16::from_f32(x)).collect()),
        };
        entries.push(Entry { name: format!("param.{}", p.name), dims: p.value.shape().to_vec(), data });
    }
    let with_moments = ckpt.optimizer.m.len() == model.params.len();
    if with_moments {
        for ((p, m), v) in model.params.iter().zip(&ckpt.optimizer.m).zip(&ckpt.optimizer.v) {
            entries.push(Entry::f32(format!("adam.m.{}", p.name), m.shape(), m.data().to_vec()));
            entries.push(Entry::f32(format!("adam.v.{}", p.name), v.shape(), v.data().to_vec()));
        }
    }
    let metadata = json!({
        "kind": "checkpoint",
        "schema_tag": model.mesh().schema_tag(),
        "mesh": model.mesh().descriptor(),
        "spec": model.spec,
        "normalization": model.norm,
        "objective": ckpt.objective,
        "train_config": ckpt.config,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "best_val": if ckpt.best_val.is_finite() { json!(ckpt.best_val) } else { Value::Null },
        "best_epoch": ckpt.best_epoch,
        "v_origin": model.mesh().rest_volume(),
        "adam_step": ckpt.optimizer.step,
        "adam_moments": with_moments,
        "param_count": model.param_count(),
    });
    Container { metadata, entries }
}

/// Decodes a checkpoint; with `mesh` given, refuses checkpoints for another mesh.
pub fn checkpoint_from_container(c: &Container, mesh: Option<&GridMesh>) -> Result<Checkpoint> {
    let meta = &c.metadata;
    expect_kind(meta, "checkpoint")?;
    check_schema(meta, mesh)?;
    let stored = GridMesh::from_descriptor(&meta_field::<MeshDescriptor>(meta, "mesh")?)?;
    let spec: ModelSpec = meta_field(meta, "spec")?;
    let norm: Normalization = meta_field(meta, "normalization")?;
    let template = ModelInstance::build(spec.clone(), &stored)?;
    let tensor = |name: &str, shape: &[usize]| -> Result<Arc<Tensor<f32>>> {
        let e = c.entry(name)?;
        if e.dims != shape {
            return Err(CoreError::Schema { expected: format!("{name} {shape:?}"), found: format!("{:?}", e.dims) });
        }
        Ok(Arc::new(Tensor::new(shape, e.data.to_f32())?))
    };
    let params = template
        .params
        .iter()
        .map(|p| Ok(Param { name: p.name.clone(), value: tensor(&format!("param.{}", p.name), p.value.shape())? }))
        .collect::<Result<Vec<_>>>()?;
    let model = ModelInstance::from_parts(spec, &stored, params, norm)?;
    let optimizer = if meta_field::<bool>(meta, "adam_moments")? {
        let moments = |which: &str| -> Result<Vec<Tensor<f32>>> {
            model
                .params
                .iter()
                .map(|p| Ok((*tensor(&format!("adam.{which}.{}", p.name), p.value.shape())?).clone()))
                .collect()
        };
        AdamState { step: meta_field(meta, "adam_step")?, m: moments("m")?, v: moments("v")? }
    } else {
        AdamState::new(&model)
    };
    let best_val: Option<f64> = meta_field(meta, "best_val")?;
    Ok(Checkpoint {
        model,
        objective: meta_field::<Objective>(meta, "objective")?,
        config: meta_field::<TrainConfig>(meta, "train_config")?,
        optimizer,
        epoch: meta_field(meta, "epoch")?,
        history: meta_field::<Vec<EpochLog>>(meta, "history")?,
        best_val: best_val.unwrap_or(f64::INFINITY),
        best_epoch: meta_field(meta, "best_epoch")?,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_container(path, &checkpoint_to_container(ckpt, ParamPrecision::F32))
}

pub fn load_checkpoint(path: &Path, mesh: Option<&GridMesh>) -> Result<Checkpoint> {
    checkpoint_from_container(&read_container(path)?, mesh)
}

pub fn save_dataset(path: &Path, ds: &SequenceDataset) -> Result<()> {
    write_container(path, &dataset_to_container(ds))
}

pub fn load_dataset(path: &Path, mesh: Option<&GridMesh>) -> Result<SequenceDataset> {
    dataset_from_container(&read_container(path)?, mesh)
}

/// Pretty-printed JSON, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CoreError::io(dir, e))?;
    std::io::Write::write_all(&mut tmp, text.as_bytes()).map_err(|e| CoreError::io(path, e))?;
    std::io::Write::write_all(&mut tmp, b"\n").map_err(|e| CoreError::io(path, e))?;
    tmp.persist(path).map_err(|e| CoreError::io(path, e.error))?;
    Ok(())
}
