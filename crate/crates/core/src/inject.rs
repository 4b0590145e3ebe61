//! LoRA modules initialized from extracted teacher sub-matrices.
//!
//! Every target keeps a frozen base weight `W`, trainable factors `B` (n×r) and `A` (r×m)
//! and, under the start-from-base semantics, a frozen copy of the teacher's rank-r term.
//! The effective weight is `W − W_r + B·A` with the subtraction, `W + B·A` without it.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{ExtractionPlan, SubmatrixStrategy};
use crate::linalg::{svd, truncated_factors, DenseMatrix};
use crate::tinylm::{backward, forward_loss, ParamName, ParamStore, Role, TokenBatch};

/// Std of the Gaussian factor under [`InitStrategy::GaussianZero`].
pub const GAUSSIAN_STD: f64 = 0.02;

/// Roles that may carry a LoRA module. `embed.pos` is extracted but never adapted.
pub const LORA_ROLES: [Role; 9] = [
    Role::EmbedTok,
    Role::AttnWq,
    Role::AttnWk,
    Role::AttnWv,
    Role::AttnWo,
    Role::FfnW1,
    Role::FfnW2,
    Role::FfnW3,
    Role::HeadOut,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitStrategy {
    /// Teacher factors, rank-r term subtracted from the base so training starts at `W`.
    PaperDefault,
    /// Teacher factors added on top of the base.
    LoraResidual,
    /// `B ~ N(0, 0.02²)`, `A = 0`; no teacher knowledge.
    GaussianZero { seed: u64 },
    /// Start-from-base semantics on a plan whose selections were drawn at random.
    RandomSubmatrix { seed: u64 },
}

impl InitStrategy {
    pub fn subtracts(self) -> bool {
        matches!(self, InitStrategy::PaperDefault | InitStrategy::RandomSubmatrix { .. })
    }

    pub fn tag(self) -> &'static str {
        match self {
            InitStrategy::PaperDefault => "paper_default",
            InitStrategy::LoraResidual => "lora_residual",
            InitStrategy::GaussianZero { .. } => "gaussian_zero",
            InitStrategy::RandomSubmatrix { .. } => "random_submatrix",
        }
    }
}

impl fmt::Display for InitStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitStrategy::GaussianZero { seed } | InitStrategy::RandomSubmatrix { seed } => {
                write!(f, "{}:{seed}", self.tag())
            }
            _ => f.write_str(self.tag()),
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    /// Accepts `paper_default`, `lora_residual`, `gaussian_zero[:SEED]`, `random_submatrix[:SEED]`.
    fn from_str(s: &str) -> Result<Self> {
        let (tag, seed) = match s.split_once(':') {
            Some((t, n)) => (
                t,
                n.parse::<u64>()
                    .map_err(|_| Error::Config(format!("bad seed in init strategy `{s}`")))?,
            ),
            None => (s, 0),
        };
        match (tag, s.contains(':')) {
            ("paper_default", false) => Ok(Self::PaperDefault),
            ("lora_residual", false) => Ok(Self::LoraResidual),
            ("gaussian_zero", _) => Ok(Self::GaussianZero { seed }),
            ("random_submatrix", _) => Ok(Self::RandomSubmatrix { seed }),
            _ => Err(Error::Config(format!("unknown init strategy `{s}`"))),
        }
    }
}

/// Factors of one LoRA module.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraInit {
    pub b: DenseMatrix,
    pub a: DenseMatrix,
    /// Frozen rank-r teacher term, present only under start-from-base semantics.
    pub subtract: Option<DenseMatrix>,
    pub rank: usize,
}

impl LoraInit {
    pub fn product(&self) -> DenseMatrix {
        self.b.matmul(&self.a).expect("lora factor shapes agree")
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    fn validate(&self, name: &ParamName) -> Result<()> {
        let (n, m) = self.shape();
        let ok = self.b.cols() == self.rank
            && self.a.rows() == self.rank
            && self.rank >= 1
            && self.rank <= n.min(m)
            && self.subtract.as_ref().is_none_or(|s| s.shape() == (n, m));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!("inconsistent lora factors for `{name}`")))
        }
    }
}

/// Rank-r truncated SVD of `w`: `b = U_r Σ_r`, `a = V_rᵀ`, `subtract = b·a`.
pub fn factorize_extracted(w: &DenseMatrix, r: usize) -> Result<LoraInit> {
    let max = w.rows().min(w.cols());
    if r == 0 || r > max {
        return Err(Error::Rank { rank: r, max });
    }
    let (b, a) = truncated_factors(&svd(w)?, r)?;
    let subtract = b.matmul(&a)?;
    Ok(LoraInit {
        b,
        a,
        subtract: Some(subtract),
        rank: r,
    })
}

/// Effective weight of a target.
pub fn effective_weight(base: &DenseMatrix, init: &LoraInit, strategy: InitStrategy) -> Result<DenseMatrix> {
    if base.shape() != init.shape() {
        return Err(Error::Shape(format!(
            "base {:?} vs lora {:?}",
            base.shape(),
            init.shape()
        )));
    }
    let mut delta = init.product();
    if strategy.subtracts() {
        let sub = init
            .subtract
            .as_ref()
            .ok_or_else(|| Error::State(format!("{strategy} needs the subtracted teacher term")))?;
        // `base + (B·A − W_r)` rather than `(base − W_r) + B·A`: at initialization the
        // bracket is exactly zero, so training starts from `base` bit-for-bit.
        for (d, s) in delta.as_mut_slice().iter_mut().zip(sub.as_slice()) {
            *d -= s;
        }
    }
    base.add(&delta)
}

/// A student with LoRA modules on a subset of its matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedModel {
    base: ParamStore,
    lora: BTreeMap<ParamName, LoraInit>,
    strategy: InitStrategy,
}

/// Gradients of one module's trainable factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub b: DenseMatrix,
    pub a: DenseMatrix,
}

impl InjectedModel {
    pub fn new(base: ParamStore, lora: BTreeMap<ParamName, LoraInit>, strategy: InitStrategy) -> Result<Self> {
        for (name, init) in &lora {
            init.validate(name)?;
            if !LORA_ROLES.contains(&name.role) {
                return Err(Error::Config(format!("`{name}` cannot carry a lora module")));
            }
            let w = base
                .get(name)
                .and_then(|t| t.as_matrix())
                .ok_or_else(|| Error::Config(format!("lora target `{name}` is not a base matrix")))?;
            if w.shape() != init.shape() {
                return Err(Error::Config(format!("lora target `{name}` has shape {:?}, base {:?}", init.shape(), w.shape())));
            }
            if strategy.subtracts() != init.subtract.is_some() {
                return Err(Error::State(format!("`{name}`: subtract term does not fit {strategy}")));
            }
        }
        Ok(Self { base, lora, strategy })
    }

    pub fn base(&self) -> &ParamStore {
        &self.base
    }

    pub fn lora(&self) -> &BTreeMap<ParamName, LoraInit> {
        &self.lora
    }

    pub(crate) fn lora_mut(&mut self) -> &mut BTreeMap<ParamName, LoraInit> {
        &mut self.lora
    }

    pub fn strategy(&self) -> InitStrategy {
        self.strategy
    }

    pub fn num_trainable(&self) -> usize {
        self.lora.values().map(|l| l.b.as_slice().len() + l.a.as_slice().len()).sum()
    }

    /// The base model with every target replaced by its effective weight.
    pub fn effective_store(&self) -> Result<ParamStore> {
        let mut store = self.base.clone();
        for (name, init) in &self.lora {
            let w = effective_weight(self.base.matrix(name), init, self.strategy)?;
            store.replace_matrix(name, w)?;
        }
        Ok(store)
    }

    pub fn forward_loss(&self, batch: &TokenBatch) -> Result<f64> {
        forward_loss(&self.effective_store()?, batch)
    }
}

/// Builds a student whose LoRA modules start from the plan's extracted matrices.
///
/// Targets are the plan entries whose role is in [`LORA_ROLES`]; the plan's role set
/// therefore also decides whether the output head is adapted.
pub fn build_injected_model(
    student: &ParamStore,
    plan: &ExtractionPlan,
    r: usize,
    strategy: InitStrategy,
) -> Result<InjectedModel> {
    if let InitStrategy::RandomSubmatrix { .. } = strategy {
        if !matches!(plan.provenance.submatrix_strategy, SubmatrixStrategy::Random { .. }) {
            return Err(Error::Config(
                "random_submatrix needs a plan with random selections (see extract::randomize_plan)".into(),
            ));
        }
    }
    let shapes = crate::tinylm::expected_shapes(student.config());
    let mut rng = match strategy {
        InitStrategy::GaussianZero { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let normal = Normal::new(0.0, GAUSSIAN_STD).expect("valid std");

    let mut lora = BTreeMap::new();
    for (name, entry) in plan.entries.iter().filter(|(n, _)| LORA_ROLES.contains(&n.role)) {
        let want = shapes
            .get(name)
            .ok_or_else(|| Error::Config(format!("plan target `{name}` does not exist in the student")))?;
        let (n, m) = entry.extracted.shape();
        if want.as_slice() != [n, m] {
            return Err(Error::Config(format!(
                "plan entry `{name}` is {n}x{m} but the student expects {want:?}"
            )));
        }
        let max = n.min(m);
        if r == 0 || r > max {
            return Err(Error::Rank { rank: r, max });
        }
        let init = match (strategy, rng.as_mut()) {
            (InitStrategy::GaussianZero { .. }, Some(rng)) => LoraInit {
                b: DenseMatrix::from_fn(n, r, |_, _| normal.sample(rng)),
                a: DenseMatrix::zeros(r, m),
                subtract: None,
                rank: r,
            },
            (InitStrategy::LoraResidual, _) => LoraInit {
                subtract: None,
                ..factorize_extracted(&entry.extracted, r)?
            },
            _ => factorize_extracted(&entry.extracted, r)?,
        };
        lora.insert(name.clone(), init);
    }
    InjectedModel::new(student.clone(), lora, strategy)
}

/// Loss and gradients of the trainable factors only.
///
/// With `G = ∂L/∂W_eff`, the chain rule through `B·A` gives `∂L/∂B = G·Aᵀ`, `∂L/∂A = Bᵀ·G`.
pub fn injected_forward_backward(
    m: &InjectedModel,
    batch: &TokenBatch,
) -> Result<(f64, BTreeMap<ParamName, LoraGrad>)> {
    let (loss, grads) = backward(&m.effective_store()?, batch)?;
    let mut out = BTreeMap::new();
    for (name, init) in &m.lora {
        let g = grads.matrix(name);
        out.insert(
            name.clone(),
            LoraGrad {
                b: g.matmul(&init.a.transpose())?,
                a: init.b.transpose().matmul(g)?,
            },
        );
    }
    Ok((loss, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn diagonal_factorization() {
        let f = factorize_extracted(&m(&[&[3.0, 0.0], &[0.0, 2.0]]), 1).unwrap();
        assert_eq!(f.b.as_slice(), &[3.0, 0.0]);
        assert_eq!(f.a.as_slice(), &[1.0, 0.0]);
        assert_eq!(f.subtract.unwrap().as_slice(), &[3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_one_is_exact() {
        let w = m(&[&[2.0, 4.0], &[1.0, 2.0]]);
        let f = factorize_extracted(&w, 1).unwrap();
        let s = f.subtract.unwrap();
        for (x, y) in s.as_slice().iter().zip(w.as_slice()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_bounds() {
        let w = DenseMatrix::from_fn(3, 5, |i, j| (i + j) as f64);
        assert!(matches!(factorize_extracted(&w, 0), Err(Error::Rank { rank: 0, max: 3 })));
        assert!(matches!(factorize_extracted(&w, 4), Err(Error::Rank { rank: 4, max: 3 })));
    }

    #[test]
    fn effective_weight_examples() {
        let init = LoraInit {
            b: m(&[&[3.0], &[0.0]]),
            a: m(&[&[1.0, 0.0]]),
            subtract: Some(m(&[&[3.0, 0.0], &[0.0, 0.0]])),
            rank: 1,
        };
        let eye = DenseMatrix::identity(2);
        assert_eq!(effective_weight(&eye, &init, InitStrategy::PaperDefault).unwrap(), eye);

        let plain = LoraInit {
            b: m(&[&[1.0], &[0.0]]),
            a: m(&[&[0.0, 1.0]]),
            subtract: None,
            rank: 1,
        };
        assert_eq!(
            effective_weight(&eye, &plain, InitStrategy::LoraResidual).unwrap(),
            m(&[&[1.0, 1.0], &[0.0, 1.0]])
        );
        assert!(matches!(
            effective_weight(&eye, &plain, InitStrategy::PaperDefault),
            Err(Error::State(_))
        ));

        let zero = LoraInit {
            a: DenseMatrix::zeros(1, 2),
            ..plain
        };
        assert_eq!(effective_weight(&eye, &zero, InitStrategy::GaussianZero { seed: 1 }).unwrap(), eye);
    }

    #[test]
    fn strategy_strings() {
        for s in ["paper_default", "lora_residual", "gaussian_zero:4", "random_submatrix:9"] {
            assert_eq!(s.parse::<InitStrategy>().unwrap().to_string(), s);
        }
        assert_eq!("gaussian_zero".parse::<InitStrategy>().unwrap(), InitStrategy::GaussianZero { seed: 0 });
        assert!("paper_default:1".parse::<InitStrategy>().is_err());
        assert!("xavier".parse::<InitStrategy>().is_err());
        let json = serde_json::to_string(&InitStrategy::RandomSubmatrix { seed: 2 }).unwrap();
        assert_eq!(json, r#"{"kind":"random_submatrix","seed":2}"#);
    }
}
