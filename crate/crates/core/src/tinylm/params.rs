use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// What a tensor does inside the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "embed.tok")]
    EmbedTok,
    #[serde(rename = "embed.pos")]
    EmbedPos,
    #[serde(rename = "attn.wq")]
    AttnWq,
    #[serde(rename = "attn.wk")]
    AttnWk,
    #[serde(rename = "attn.wv")]
    AttnWv,
    #[serde(rename = "attn.wo")]
    AttnWo,
    #[serde(rename = "ffn.w1")]
    FfnW1,
    #[serde(rename = "ffn.w2")]
    FfnW2,
    #[serde(rename = "ffn.w3")]
    FfnW3,
    #[serde(rename = "head.out")]
    HeadOut,
    /// RMS-norm scale vector (1-D).
    #[serde(rename = "norm")]
    Norm,
}

impl Role {
    pub const ALL: [Role; 11] = [
        Role::EmbedTok,
        Role::EmbedPos,
        Role::AttnWq,
        Role::AttnWk,
        Role::AttnWv,
        Role::AttnWo,
        Role::FfnW1,
        Role::FfnW2,
        Role::FfnW3,
        Role::HeadOut,
        Role::Norm,
    ];

    /// The seven per-layer matrices, in canonical order.
    pub const LAYER_MATRICES: [Role; 7] = [
        Role::AttnWq,
        Role::AttnWk,
        Role::AttnWv,
        Role::AttnWo,
        Role::FfnW1,
        Role::FfnW2,
        Role::FfnW3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::EmbedTok => "embed.tok",
            Role::EmbedPos => "embed.pos",
            Role::AttnWq => "attn.wq",
            Role::AttnWk => "attn.wk",
            Role::AttnWv => "attn.wv",
            Role::AttnWo => "attn.wo",
            Role::FfnW1 => "ffn.w1",
            Role::FfnW2 => "ffn.w2",
            Role::FfnW3 => "ffn.w3",
            Role::HeadOut => "head.out",
            Role::Norm => "norm",
        }
    }

    pub fn is_layer_role(self) -> bool {
        !matches!(self, Role::EmbedTok | Role::EmbedPos | Role::HeadOut)
    }

    /// Coarse module family used to filter extraction and injection targets.
    pub fn group(self) -> RoleGroup {
        match self {
            Role::EmbedTok | Role::EmbedPos => RoleGroup::Embed,
            Role::AttnWq | Role::AttnWk | Role::AttnWv | Role::AttnWo => RoleGroup::Attn,
            Role::FfnW1 | Role::FfnW2 | Role::FfnW3 => RoleGroup::Ffn,
            Role::HeadOut => RoleGroup::Head,
            Role::Norm => RoleGroup::Norm,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown role `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleGroup {
    Embed,
    Attn,
    Ffn,
    Head,
    Norm,
}

impl FromStr for RoleGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => Ok(RoleGroup::Embed),
            "attn" => Ok(RoleGroup::Attn),
            "ffn" => Ok(RoleGroup::Ffn),
            "head" => Ok(RoleGroup::Head),
            "norm" => Ok(RoleGroup::Norm),
            _ => Err(Error::Config(format!("unknown role group `{s}`"))),
        }
    }
}

/// Tensor identifier. Renders as `layer{i}.{role}[.{qualifier}]` or `{role}[.{qualifier}]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParamName {
    pub layer: Option<usize>,
    pub role: Role,
    pub qualifier: Option<String>,
}

impl ParamName {
    pub fn global(role: Role) -> Self {
        Self {
            layer: None,
            role,
            qualifier: None,
        }
    }

    pub fn layer(layer: usize, role: Role) -> Self {
        Self {
            layer: Some(layer),
            role,
            qualifier: None,
        }
    }

    pub fn with_qualifier(mut self, q: &str) -> Self {
        self.qualifier = Some(q.to_string());
        self
    }

    /// Layer index with `-1` for tensors outside the block stack.
    pub fn layer_index(&self) -> i64 {
        self.layer.map_or(-1, |l| l as i64)
    }

    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.layer {
            write!(f, "layer{l}.")?;
        }
        f.write_str(self.role.as_str())?;
        if let Some(q) = &self.qualifier {
            write!(f, ".{q}")?;
        }
        Ok(())
    }
}

impl FromStr for ParamName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed parameter name `{s}`"));
        let (layer, rest) = match s.strip_prefix("layer") {
            Some(tail) => {
                let (idx, rest) = tail.split_once('.').ok_or_else(bad)?;
                if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                (Some(idx.parse::<usize>().map_err(|_| bad())?), rest)
            }
            None => (None, s),
        };
        // Longest role prefix wins; whatever follows a '.' is the qualifier.
        let role = Role::ALL
            .into_iter()
            .filter(|r| rest == r.as_str() || rest.starts_with(&format!("{}.", r.as_str())))
            .max_by_key(|r| r.as_str().len())
            .ok_or_else(bad)?;
        let qualifier = rest[role.as_str().len()..].strip_prefix('.').map(str::to_string);
        if qualifier.as_deref() == Some("") {
            return Err(bad());
        }
        let name = ParamName { layer, role, qualifier };
        if name.to_string() != s {
            return Err(bad());
        }
        Ok(name)
    }
}

impl Serialize for ParamName {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParamName {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Ord for ParamName {
    fn cmp(&self, other: &Self) -> Ordering {
        self.to_string().cmp(&other.to_string())
    }
}

impl PartialOrd for ParamName {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A parameter tensor: a matrix or a 1-D vector.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Matrix(DenseMatrix),
    Vector(Vec<f64>),
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::Matrix(m) => vec![m.rows(), m.cols()],
            Tensor::Vector(v) => vec![v.len()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Tensor::Matrix(m) => m.as_slice(),
            Tensor::Vector(v) => v,
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Tensor::Matrix(m) => m.as_mut_slice(),
            Tensor::Vector(v) => v,
        }
    }

    pub fn as_matrix(&self) -> Option<&DenseMatrix> {
        match self {
            Tensor::Matrix(m) => Some(m),
            Tensor::Vector(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        self.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Matrix(m) => Tensor::Matrix(DenseMatrix::zeros(m.rows(), m.cols())),
            Tensor::Vector(v) => Tensor::Vector(vec![0.0; v.len()]),
        }
    }

    /// Same shape, values produced by `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        match self {
            Tensor::Matrix(m) => Tensor::Matrix(DenseMatrix::from_raw(
                m.rows(),
                m.cols(),
                m.as_slice().iter().map(|&v| f(v)).collect(),
            )),
            Tensor::Vector(v) => Tensor::Vector(v.iter().map(|&x| f(x)).collect()),
        }
    }
}

/// Named parameter tensors of one model, iterated in canonical-name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    config: ModelConfig,
    tensors: BTreeMap<ParamName, Tensor>,
}

impl ParamStore {
    /// Builds a store after checking every tensor against the shapes `config` implies.
    pub fn from_tensors(config: ModelConfig, tensors: BTreeMap<ParamName, Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "model needs {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape) in &expected {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            if &t.shape() != shape {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            if t.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("tensor `{name}` has non-finite values")));
            }
        }
        Ok(Self { config, tensors })
    }

    pub(crate) fn from_tensors_unchecked(config: ModelConfig, tensors: BTreeMap<ParamName, Tensor>) -> Self {
        Self { config, tensors }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &ParamName) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &ParamName) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn matrix(&self, name: &ParamName) -> &DenseMatrix {
        match self.tensors.get(name) {
            Some(Tensor::Matrix(m)) => m,
            _ => panic!("store lacks matrix `{name}`"),
        }
    }

    pub(crate) fn vector(&self, name: &ParamName) -> &[f64] {
        match self.tensors.get(name) {
            Some(Tensor::Vector(v)) => v,
            _ => panic!("store lacks vector `{name}`"),
        }
    }

    pub(crate) fn replace_matrix(&mut self, name: &ParamName, m: DenseMatrix) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(Tensor::Matrix(old)) if old.shape() == m.shape() => {
                *old = m;
                Ok(())
            }
            Some(t) => Err(Error::Shape(format!(
                "cannot replace `{name}` of shape {:?} with {:?}",
                t.shape(),
                m.shape()
            ))),
            None => Err(Error::Config(format!("no tensor named `{name}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamName, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamName, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &ParamName> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zero-valued store with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.zeros_like())).collect(),
        }
    }

    /// Rounds every value to the nearest `f32`, the precision used on disk.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.as_mut_slice() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Every tensor a model with `cfg` owns, with its shape. Matrices are stored `in × out`.
pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<ParamName, Vec<usize>> {
    let (v, d, f, t) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim, cfg.max_seq_len);
    let mut out = BTreeMap::new();
    out.insert(ParamName::global(Role::EmbedTok), vec![v, d]);
    out.insert(ParamName::global(Role::EmbedPos), vec![t, d]);
    out.insert(ParamName::global(Role::HeadOut), vec![d, v]);
    out.insert(ParamName::global(Role::Norm).with_qualifier("final"), vec![d]);
    for l in 0..cfg.num_layers {
        for role in [Role::AttnWq, Role::AttnWk, Role::AttnWv, Role::AttnWo] {
            out.insert(ParamName::layer(l, role), vec![d, d]);
        }
        out.insert(ParamName::layer(l, Role::FfnW1), vec![d, f]);
        out.insert(ParamName::layer(l, Role::FfnW3), vec![d, f]);
        out.insert(ParamName::layer(l, Role::FfnW2), vec![f, d]);
        out.insert(ParamName::layer(l, Role::Norm).with_qualifier("attn"), vec![d]);
        out.insert(ParamName::layer(l, Role::Norm).with_qualifier("ffn"), vec![d]);
    }
    out
}
