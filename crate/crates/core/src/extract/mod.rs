//! Teacher-to-student parameter extraction: sensitivity-ranked layer mapping followed by a
//! student-shaped sub-matrix selection for every targeted teacher matrix.

mod submatrix;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use submatrix::{
    brute_force_submatrix, select_submatrix, SearchFamily, SubmatrixSelection, SubmatrixStrategy,
    BRUTE_FORCE_SUBSET_LIMIT,
};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::sensitivity::{LayerScores, SensitivityMap};
use crate::tinylm::{ModelConfig, ParamName, ParamStore, Role, RoleGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerStrategy {
    /// Highest layer scores, kept in their original order.
    Sensitivity,
    /// The first `l_s` layers.
    Top,
    /// The last `l_s` layers.
    Last,
    Random { seed: u64 },
}

impl fmt::Display for LayerStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerStrategy::Sensitivity => f.write_str("sensitivity"),
            LayerStrategy::Top => f.write_str("top"),
            LayerStrategy::Last => f.write_str("last"),
            LayerStrategy::Random { seed } => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for LayerStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sensitivity" => Ok(Self::Sensitivity),
            "top" => Ok(Self::Top),
            "last" => Ok(Self::Last),
            _ => match s.strip_prefix("random:").map(str::parse) {
                Some(Ok(seed)) => Ok(Self::Random { seed }),
                _ => Err(Error::Config(format!("unknown layer strategy `{s}`"))),
            },
        }
    }
}

/// Order-preserving assignment of teacher layers to student layers `0..l_s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMapping {
    /// `(teacher_layer, student_layer)`, student layers ascending from zero.
    pub pairs: Vec<(usize, usize)>,
    pub strategy: LayerStrategy,
}

impl LayerMapping {
    pub fn teacher_layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }
}

pub fn select_layers(scores: &LayerScores, l_s: usize, strategy: LayerStrategy) -> Result<LayerMapping> {
    let l_t = scores.len();
    if l_s == 0 || l_s > l_t {
        return Err(Error::Shape(format!("cannot map {l_s} student layers from {l_t} teacher layers")));
    }
    let mut chosen: Vec<usize> = match strategy {
        LayerStrategy::Sensitivity => {
            let s = scores.as_slice();
            let mut idx: Vec<usize> = (0..l_t).collect();
            idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            idx.truncate(l_s);
            idx
        }
        LayerStrategy::Top => (0..l_s).collect(),
        LayerStrategy::Last => (l_t - l_s..l_t).collect(),
        LayerStrategy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, l_t, l_s).into_vec()
        }
    };
    chosen.sort_unstable();
    Ok(LayerMapping {
        pairs: chosen.into_iter().enumerate().map(|(s, t)| (t, s)).collect(),
        strategy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOptions {
    pub layer_strategy: LayerStrategy,
    pub submatrix_strategy: SubmatrixStrategy,
    /// Module families to extract; norms are never extracted.
    pub roles: BTreeSet<RoleGroup>,
    /// Seed-sample identifiers, recorded for provenance only.
    #[serde(default)]
    pub seed_sample_ids: Vec<usize>,
}

impl ExtractionOptions {
    pub fn all_roles() -> BTreeSet<RoleGroup> {
        [RoleGroup::Embed, RoleGroup::Attn, RoleGroup::Ffn, RoleGroup::Head].into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub teacher_config_hash: String,
    pub student_config_hash: String,
    pub seed_sample_ids: Vec<usize>,
    pub layer_strategy: LayerStrategy,
    pub submatrix_strategy: SubmatrixStrategy,
    pub roles: BTreeSet<RoleGroup>,
}

/// One student matrix worth of extracted teacher values.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub teacher_name: ParamName,
    pub selection: SubmatrixSelection,
    pub extracted: DenseMatrix,
}

/// Everything extracted from a teacher, keyed by the student tensor it targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionPlan {
    pub mapping: LayerMapping,
    pub entries: BTreeMap<ParamName, PlanEntry>,
    pub provenance: Provenance,
}

fn check_dims(teacher: &ModelConfig, student: &ModelConfig) -> Result<()> {
    if teacher.vocab_size != student.vocab_size {
        return Err(Error::Config(format!(
            "vocab mismatch: teacher {} vs student {}",
            teacher.vocab_size, student.vocab_size
        )));
    }
    if teacher.max_seq_len != student.max_seq_len {
        return Err(Error::Config(format!(
            "max_seq_len mismatch: teacher {} vs student {}",
            teacher.max_seq_len, student.max_seq_len
        )));
    }
    for (what, t, s) in [
        ("num_layers", teacher.num_layers, student.num_layers),
        ("hidden_dim", teacher.hidden_dim, student.hidden_dim),
        ("ffn_dim", teacher.ffn_dim, student.ffn_dim),
    ] {
        if s > t {
            return Err(Error::Shape(format!("student {what} {s} exceeds teacher {what} {t}")));
        }
    }
    Ok(())
}

/// `(teacher name, student name)` pairs the plan covers, in a fixed order.
fn targets(mapping: &LayerMapping, roles: &BTreeSet<RoleGroup>) -> Vec<(ParamName, ParamName)> {
    let mut out = Vec::new();
    if roles.contains(&RoleGroup::Embed) {
        for r in [Role::EmbedTok, Role::EmbedPos] {
            out.push((ParamName::global(r), ParamName::global(r)));
        }
    }
    for &(t, s) in &mapping.pairs {
        for r in Role::LAYER_MATRICES {
            if roles.contains(&r.group()) {
                out.push((ParamName::layer(t, r), ParamName::layer(s, r)));
            }
        }
    }
    if roles.contains(&RoleGroup::Head) {
        out.push((ParamName::global(Role::HeadOut), ParamName::global(Role::HeadOut)));
    }
    out
}

/// Per-matrix seed for random selections, so matrices do not share index sets.
fn entry_seed(strategy: SubmatrixStrategy, k: usize) -> SubmatrixStrategy {
    match strategy {
        SubmatrixStrategy::Random { seed } => SubmatrixStrategy::Random {
            seed: seed.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        },
        other => other,
    }
}

/// Maps sensitive teacher layers onto the student and gathers student-shaped sub-matrices.
///
/// Embeddings keep every vocabulary/position row and shrink the hidden axis; the output
/// head keeps every vocabulary column and shrinks the hidden axis.
pub fn build_extraction_plan(
    teacher: &ParamStore,
    smap: &SensitivityMap,
    student_cfg: &ModelConfig,
    options: &ExtractionOptions,
) -> Result<ExtractionPlan> {
    let tcfg = teacher.config();
    check_dims(tcfg, student_cfg)?;
    if !smap.is_congruent_with(teacher) {
        return Err(Error::Shape("sensitivity map does not match the teacher".into()));
    }
    if options.roles.contains(&RoleGroup::Norm) {
        return Err(Error::Config("norm vectors are not extractable".into()));
    }
    let scores = crate::sensitivity::layer_scores(smap);
    let mapping = select_layers(&scores, student_cfg.num_layers, options.layer_strategy)?;
    let student_shapes = crate::tinylm::expected_shapes(student_cfg);

    let mut entries = BTreeMap::new();
    for (k, (tname, sname)) in targets(&mapping, &options.roles).into_iter().enumerate() {
        let shape = &student_shapes[&sname];
        let sens = smap.matrix(&tname).expect("congruent map has every matrix");
        let selection = select_submatrix(sens, shape[0], shape[1], entry_seed(options.submatrix_strategy, k))?;
        let extracted = selection.gather(teacher.matrix(&tname))?;
        entries.insert(
            sname,
            PlanEntry {
                teacher_name: tname,
                selection,
                extracted,
            },
        );
    }

    Ok(ExtractionPlan {
        mapping,
        entries,
        provenance: Provenance {
            teacher_config_hash: tcfg.fingerprint(),
            student_config_hash: student_cfg.fingerprint(),
            seed_sample_ids: options.seed_sample_ids.clone(),
            layer_strategy: options.layer_strategy,
            submatrix_strategy: options.submatrix_strategy,
            roles: options.roles.clone(),
        },
    })
}

/// The same layer mapping and targets with every selection replaced by a random one.
pub fn randomize_plan(
    plan: &ExtractionPlan,
    teacher: &ParamStore,
    smap: &SensitivityMap,
    seed: u64,
) -> Result<ExtractionPlan> {
    let strategy = SubmatrixStrategy::Random { seed };
    let mut entries = BTreeMap::new();
    for (k, (sname, e)) in plan.entries.iter().enumerate() {
        let sens = smap
            .matrix(&e.teacher_name)
            .ok_or_else(|| Error::Shape(format!("sensitivity map lacks `{}`", e.teacher_name)))?;
        let selection = select_submatrix(sens, e.extracted.rows(), e.extracted.cols(), entry_seed(strategy, k))?;
        let source = teacher
            .get(&e.teacher_name)
            .and_then(|t| t.as_matrix())
            .ok_or_else(|| Error::Shape(format!("teacher lacks `{}`", e.teacher_name)))?;
        let extracted = selection.gather(source)?;
        entries.insert(
            sname.clone(),
            PlanEntry {
                teacher_name: e.teacher_name.clone(),
                selection,
                extracted,
            },
        );
    }
    let mut provenance = plan.provenance.clone();
    provenance.submatrix_strategy = strategy;
    Ok(ExtractionPlan {
        mapping: plan.mapping.clone(),
        entries,
        provenance,
    })
}

/// JSON description of a plan; the extracted values travel in a checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSidecar {
    pub mapping: LayerMapping,
    pub provenance: Provenance,
    pub entries: Vec<SidecarEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub student_name: ParamName,
    pub teacher_name: ParamName,
    pub selection: SubmatrixSelection,
}

impl ExtractionPlan {
    pub fn sidecar(&self) -> PlanSidecar {
        PlanSidecar {
            mapping: self.mapping.clone(),
            provenance: self.provenance.clone(),
            entries: self
                .entries
                .iter()
                .map(|(s, e)| SidecarEntry {
                    student_name: s.clone(),
                    teacher_name: e.teacher_name.clone(),
                    selection: e.selection.clone(),
                })
                .collect(),
        }
    }

    /// Reassembles a plan from its sidecar and the extracted matrices.
    pub fn from_parts(sidecar: PlanSidecar, mut matrices: BTreeMap<ParamName, DenseMatrix>) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for e in sidecar.entries {
            let extracted = matrices
                .remove(&e.student_name)
                .ok_or_else(|| Error::format(e.student_name.to_string(), "listed in sidecar but missing from container"))?;
            if extracted.shape() != (e.selection.rows, e.selection.cols) {
                return Err(Error::format(
                    e.student_name.to_string(),
                    "extracted matrix shape disagrees with its selection",
                ));
            }
            entries.insert(
                e.student_name,
                PlanEntry {
                    teacher_name: e.teacher_name,
                    selection: e.selection,
                    extracted,
                },
            );
        }
        if let Some(extra) = matrices.keys().next() {
            return Err(Error::format(extra.to_string(), "present in container but not in sidecar"));
        }
        Ok(Self {
            mapping: sidecar.mapping,
            entries,
            provenance: sidecar.provenance,
        })
    }
}
