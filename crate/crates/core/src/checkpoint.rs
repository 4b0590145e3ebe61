//! Binary tensor container.
//!
//! ```text
//! "PKT1" | header_len: u64 LE | header: UTF-8 JSON (header_len bytes) | payload
//! ```
//!
//! The header carries a format version, a content kind, an optional model config, free-form
//! metadata and a manifest listing every tensor's name, role, layer, shape, dtype, byte
//! offset and byte length. Tensors are stored little-endian, back to back, in manifest
//! order starting at payload offset 0. A tensor is written as `f32` when every value is
//! exactly representable in single precision and as `f64` otherwise, so decoding always
//! reproduces the encoded values bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{ExtractionPlan, PlanSidecar};
use crate::inject::{InitStrategy, InjectedModel, LoraInit};
use crate::linalg::DenseMatrix;
use crate::sensitivity::SensitivityMap;
use crate::tinylm::{expected_shapes, ModelConfig, ParamName, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"PKT1";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 12;

pub const SUFFIX_LORA_B: &str = ".lora.b";
pub const SUFFIX_LORA_A: &str = ".lora.a";
pub const SUFFIX_LORA_SUB: &str = ".lora.sub";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// What a container holds; typed loaders refuse the wrong kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    Model,
    Sensitivity,
    Injected,
    Plan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub role: Option<String>,
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub kind: ContentKind,
    pub config: Option<ModelConfig>,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Decoded container contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContentKind,
    pub config: Option<ModelConfig>,
    pub meta: serde_json::Value,
    pub tensors: Vec<RawTensor>,
}

fn fits_f32(data: &[f64]) -> bool {
    data.iter().all(|&v| (v as f32) as f64 == v || v.is_nan())
}

/// Serializes a container. Tensor names must be unique.
pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let mut manifest = Vec::with_capacity(c.tensors.len());
    let mut payload = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for t in &c.tensors {
        if !seen.insert(t.name.as_str()) {
            return Err(Error::format(&t.name, "duplicate tensor name"));
        }
        if t.shape.is_empty() || t.data.is_empty() || t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::format(&t.name, "shape does not match data length"));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(&t.name, "non-finite value"));
        }
        let dtype = if fits_f32(&t.data) { Dtype::F32 } else { Dtype::F64 };
        let offset = payload.len() as u64;
        for &v in &t.data {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        let (role, layer) = match base_name(&t.name).parse::<ParamName>() {
            Ok(p) => (Some(p.role.as_str().to_string()), p.layer),
            Err(_) => (None, None),
        };
        manifest.push(ManifestEntry {
            name: t.name.clone(),
            role,
            layer,
            shape: t.shape.clone(),
            dtype,
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: c.kind,
        config: c.config.clone(),
        meta: c.meta.clone(),
        tensors: manifest,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Name without any LoRA suffix.
fn base_name(name: &str) -> &str {
    [SUFFIX_LORA_B, SUFFIX_LORA_A, SUFFIX_LORA_SUB]
        .iter()
        .find_map(|s| name.strip_suffix(s))
        .unwrap_or(name)
}

/// Parses and validates the preamble and header without touching the payload.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    const WHOLE: &str = "<container>";
    if bytes.len() < PREAMBLE {
        return Err(Error::format(WHOLE, format!("{} bytes is shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(WHOLE, "bad magic bytes"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let rest = &bytes[PREAMBLE..];
    if hlen > rest.len() as u64 {
        return Err(Error::format(WHOLE, format!("header length {hlen} exceeds file size")));
    }
    let (hbytes, payload) = rest.split_at(hlen as usize);
    let text = std::str::from_utf8(hbytes).map_err(|_| Error::format(WHOLE, "header is not UTF-8"))?;
    let header: Header = serde_json::from_str(text).map_err(|e| Error::format(WHOLE, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            WHOLE,
            format!("format version {} is not supported (expected {FORMAT_VERSION})", header.format_version),
        ));
    }
    if let Some(cfg) = &header.config {
        cfg.validate().map_err(|e| Error::format(WHOLE, format!("bad config: {e}")))?;
    }

    let mut seen = std::collections::BTreeSet::new();
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let bad = |reason: String| Error::format(&e.name, reason);
        if !seen.insert(e.name.as_str()) {
            return Err(bad("duplicate tensor name".into()));
        }
        let count = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| bad("shape overflows".into()))?;
        if e.shape.is_empty() || count == 0 {
            return Err(bad(format!("degenerate shape {:?}", e.shape)));
        }
        let want = count
            .checked_mul(e.dtype.size() as u64)
            .ok_or_else(|| bad("shape overflows".into()))?;
        if e.nbytes != want {
            return Err(bad(format!("shape {:?} needs {want} bytes, manifest says {}", e.shape, e.nbytes)));
        }
        if e.offset != expected_offset {
            return Err(bad(format!("offset {} but previous tensor ends at {expected_offset}", e.offset)));
        }
        expected_offset = e
            .offset
            .checked_add(e.nbytes)
            .ok_or_else(|| bad("offset overflows".into()))?;
        if expected_offset > payload.len() as u64 {
            return Err(bad(format!(
                "payload truncated: tensor ends at byte {expected_offset}, payload has {}",
                payload.len()
            )));
        }
        if let Ok(p) = base_name(&e.name).parse::<ParamName>() {
            if e.role.as_deref() != Some(p.role.as_str()) || e.layer != p.layer {
                return Err(bad("role/layer fields disagree with the name".into()));
            }
        }
    }
    if expected_offset != payload.len() as u64 {
        let last = header.tensors.last().map_or(WHOLE, |e| e.name.as_str());
        return Err(Error::format(
            last,
            format!("{} trailing payload bytes", payload.len() as u64 - expected_offset),
        ));
    }
    Ok((header, payload))
}

/// Full decode. The whole manifest is validated before any tensor is materialized.
pub fn decode(bytes: &[u8]) -> Result<Container> {
    let (header, payload) = decode_header(bytes)?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let raw = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data: Vec<f64> = match e.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(&e.name, format!("non-finite value at element {i}")));
        }
        tensors.push(RawTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    Ok(Container {
        kind: header.kind,
        config: header.config,
        meta: header.meta,
        tensors,
    })
}

pub fn write_file(path: &Path, c: &Container) -> Result<()> {
    let bytes = encode(c)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn raw(name: impl Into<String>, t: &Tensor) -> RawTensor {
    RawTensor {
        name: name.into(),
        shape: t.shape(),
        data: t.as_slice().to_vec(),
    }
}

fn raw_matrix(name: impl Into<String>, m: &DenseMatrix) -> RawTensor {
    RawTensor {
        name: name.into(),
        shape: vec![m.rows(), m.cols()],
        data: m.as_slice().to_vec(),
    }
}

fn to_matrix(t: RawTensor) -> Result<DenseMatrix> {
    match t.shape[..] {
        [r, c] => DenseMatrix::new(r, c, t.data).map_err(|e| Error::format(&t.name, e.to_string())),
        _ => Err(Error::format(&t.name, format!("expected a matrix, found shape {:?}", t.shape))),
    }
}

fn expect_kind(c: &Container, kind: ContentKind) -> Result<()> {
    if c.kind != kind {
        return Err(Error::format("<container>", format!("holds {:?}, expected {kind:?}", c.kind)));
    }
    Ok(())
}

fn store_container(kind: ContentKind, store: &ParamStore, meta: serde_json::Value, extra: Vec<RawTensor>) -> Container {
    let mut tensors: Vec<RawTensor> = store.iter().map(|(n, t)| raw(n.to_string(), t)).collect();
    tensors.extend(extra);
    Container {
        kind,
        config: Some(store.config().clone()),
        meta,
        tensors,
    }
}

/// Splits off a full parameter store; returns whatever tensors are left over.
fn take_store(config: ModelConfig, tensors: Vec<RawTensor>) -> Result<(ParamStore, Vec<RawTensor>)> {
    let mut shapes = expected_shapes(&config);
    let mut found = BTreeMap::new();
    let mut rest = Vec::new();
    for t in tensors {
        let name = match t.name.parse::<ParamName>() {
            Ok(n) if shapes.contains_key(&n) => n,
            _ => {
                rest.push(t);
                continue;
            }
        };
        let want = shapes.remove(&name).expect("checked above");
        if t.shape != want {
            return Err(Error::format(&t.name, format!("shape {:?}, config implies {want:?}", t.shape)));
        }
        let tensor = if want.len() == 1 { Tensor::Vector(t.data) } else { Tensor::Matrix(to_matrix(t)?) };
        found.insert(name, tensor);
    }
    if let Some(missing) = shapes.keys().next() {
        return Err(Error::format(missing.to_string(), "missing from container"));
    }
    Ok((ParamStore::from_tensors(config, found)?, rest))
}

fn require_config(c: &Container) -> Result<ModelConfig> {
    c.config
        .clone()
        .ok_or_else(|| Error::format("<container>", "header has no model config"))
}

fn no_leftovers(rest: &[RawTensor]) -> Result<()> {
    match rest.first() {
        Some(t) => Err(Error::format(&t.name, "unexpected tensor")),
        None => Ok(()),
    }
}

pub fn model_to_container(store: &ParamStore) -> Container {
    store_container(ContentKind::Model, store, serde_json::Value::Null, Vec::new())
}

pub fn model_from_container(c: Container) -> Result<ParamStore> {
    expect_kind(&c, ContentKind::Model)?;
    let (store, rest) = take_store(require_config(&c)?, c.tensors)?;
    no_leftovers(&rest)?;
    Ok(store)
}

pub fn sensitivity_to_container(map: &SensitivityMap) -> Container {
    store_container(
        ContentKind::Sensitivity,
        map.scores(),
        serde_json::json!({ "sample_count": map.sample_count() }),
        Vec::new(),
    )
}

pub fn sensitivity_from_container(c: Container) -> Result<SensitivityMap> {
    expect_kind(&c, ContentKind::Sensitivity)?;
    let count = c.meta.get("sample_count").and_then(|v| v.as_u64()).ok_or_else(|| {
        Error::format("<container>", "sensitivity container lacks meta.sample_count")
    })?;
    let (store, rest) = take_store(require_config(&c)?, c.tensors)?;
    no_leftovers(&rest)?;
    SensitivityMap::new(store, count as usize)
}

pub fn injected_to_container(m: &InjectedModel) -> Container {
    let mut extra = Vec::new();
    for (name, l) in m.lora() {
        extra.push(raw_matrix(format!("{name}{SUFFIX_LORA_B}"), &l.b));
        extra.push(raw_matrix(format!("{name}{SUFFIX_LORA_A}"), &l.a));
        if let Some(s) = &l.subtract {
            extra.push(raw_matrix(format!("{name}{SUFFIX_LORA_SUB}"), s));
        }
    }
    store_container(
        ContentKind::Injected,
        m.base(),
        serde_json::json!({ "strategy": m.strategy() }),
        extra,
    )
}

pub fn injected_from_container(c: Container) -> Result<InjectedModel> {
    expect_kind(&c, ContentKind::Injected)?;
    let strategy: InitStrategy = c
        .meta
        .get("strategy")
        .cloned()
        .ok_or_else(|| Error::format("<container>", "injected container lacks meta.strategy"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format("<container>", e.to_string())))?;
    let (base, rest) = take_store(require_config(&c)?, c.tensors)?;

    let mut parts: BTreeMap<ParamName, [Option<DenseMatrix>; 3]> = BTreeMap::new();
    for t in rest {
        let (stem, slot) = [SUFFIX_LORA_B, SUFFIX_LORA_A, SUFFIX_LORA_SUB]
            .iter()
            .enumerate()
            .find_map(|(i, s)| t.name.strip_suffix(s).map(|stem| (stem.to_string(), i)))
            .ok_or_else(|| Error::format(&t.name, "unexpected tensor"))?;
        let name: ParamName = stem.parse().map_err(|_| Error::format(&t.name, "bad lora target name"))?;
        let label = t.name.clone();
        let entry = parts.entry(name).or_default();
        if entry[slot].is_some() {
            return Err(Error::format(label, "duplicate lora tensor"));
        }
        entry[slot] = Some(to_matrix(t)?);
    }
    let mut lora = BTreeMap::new();
    for (name, [b, a, sub]) in parts {
        let (b, a) = match (b, a) {
            (Some(b), Some(a)) => (b, a),
            _ => return Err(Error::format(name.to_string(), "lora module lacks its b or a factor")),
        };
        let rank = b.cols();
        lora.insert(name, LoraInit { b, a, subtract: sub, rank });
    }
    InjectedModel::new(base, lora, strategy).map_err(|e| Error::format("<container>", e.to_string()))
}

pub fn plan_to_container(plan: &ExtractionPlan) -> Result<Container> {
    Ok(Container {
        kind: ContentKind::Plan,
        config: None,
        meta: serde_json::to_value(plan.sidecar())?,
        tensors: plan
            .entries
            .iter()
            .map(|(n, e)| raw_matrix(n.to_string(), &e.extracted))
            .collect(),
    })
}

pub fn plan_from_container(c: Container) -> Result<ExtractionPlan> {
    expect_kind(&c, ContentKind::Plan)?;
    let sidecar: PlanSidecar =
        serde_json::from_value(c.meta).map_err(|e| Error::format("<container>", format!("bad plan sidecar: {e}")))?;
    let mut matrices = BTreeMap::new();
    for t in c.tensors {
        let name: ParamName = t.name.parse().map_err(|_| Error::format(&t.name, "bad parameter name"))?;
        matrices.insert(name, to_matrix(t)?);
    }
    ExtractionPlan::from_parts(sidecar, matrices)
}

pub fn save_model(store: &ParamStore, path: &Path) -> Result<()> {
    write_file(path, &model_to_container(store))
}

pub fn load_model(path: &Path) -> Result<ParamStore> {
    model_from_container(read_file(path)?)
}

pub fn save_sensitivity(map: &SensitivityMap, path: &Path) -> Result<()> {
    write_file(path, &sensitivity_to_container(map))
}

pub fn load_sensitivity(path: &Path) -> Result<SensitivityMap> {
    sensitivity_from_container(read_file(path)?)
}

pub fn save_injected(m: &InjectedModel, path: &Path) -> Result<()> {
    write_file(path, &injected_to_container(m))
}

pub fn load_injected(path: &Path) -> Result<InjectedModel> {
    injected_from_container(read_file(path)?)
}

pub fn save_plan(plan: &ExtractionPlan, path: &Path) -> Result<()> {
    write_file(path, &plan_to_container(plan)?)
}

pub fn load_plan(path: &Path) -> Result<ExtractionPlan> {
    plan_from_container(read_file(path)?)
}
