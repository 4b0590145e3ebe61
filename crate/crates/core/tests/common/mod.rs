//! Fixtures and oracles shared by the integration tests.
#![allow(dead_code)]

use paraknow_core::extract::{build_extraction_plan, ExtractionOptions, ExtractionPlan, LayerStrategy, SubmatrixStrategy};
use paraknow_core::linalg::DenseMatrix;
use paraknow_core::sensitivity::{accumulate_sensitivity, SensitivityMap};
use paraknow_core::tinylm::{init_model, ModelConfig, ParamName, ParamStore, Role, RoleGroup, TokenBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn teacher_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 21,
        max_seq_len: 12,
        num_layers: 3,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        seed: 5,
    }
}

pub fn student_cfg() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        seed: 6,
        ..teacher_cfg()
    }
}

/// A model whose head is non-zero and whose weights are spread enough to matter.
pub fn lively_model(cfg: &ModelConfig, scale: f64) -> ParamStore {
    let mut m = init_model(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xABCD);
    for (name, t) in m.iter_mut() {
        for v in t.as_mut_slice() {
            *v = match name.role {
                Role::HeadOut => rng.random_range(-0.3..0.3),
                Role::Norm => 1.0 + rng.random_range(-0.2..0.2),
                _ => *v * scale,
            };
        }
    }
    m
}

pub fn seed_batches(n: usize, len: usize, vocab: u32, seed: u64) -> Vec<TokenBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| TokenBatch::single((0..len).map(|_| rng.random_range(0..vocab)).collect()))
        .collect()
}

pub struct Fixture {
    pub teacher: ParamStore,
    pub smap: SensitivityMap,
    pub student: ParamStore,
    pub plan: ExtractionPlan,
}

pub fn fixture(submatrix: SubmatrixStrategy, roles: &[RoleGroup]) -> Fixture {
    let teacher = lively_model(&teacher_cfg(), 5.0);
    let smap = accumulate_sensitivity(&teacher, &seed_batches(6, 8, 21, 1)).unwrap();
    let student = lively_model(&student_cfg(), 3.0);
    let options = ExtractionOptions {
        layer_strategy: LayerStrategy::Sensitivity,
        submatrix_strategy: submatrix,
        roles: roles.iter().copied().collect(),
        seed_sample_ids: vec![],
    };
    let plan = build_extraction_plan(&teacher, &smap, student.config(), &options).unwrap();
    Fixture {
        teacher,
        smap,
        student,
        plan,
    }
}

pub fn default_roles() -> Vec<RoleGroup> {
    vec![RoleGroup::Embed, RoleGroup::Attn, RoleGroup::Ffn]
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn matrix_of(store: &ParamStore, name: &ParamName) -> DenseMatrix {
    store.get(name).unwrap().as_matrix().unwrap().clone()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(m: &DenseMatrix) -> Vec<f64> {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values via the eigenvalues of the smaller Gram matrix.
pub fn singular_values_oracle(m: &DenseMatrix) -> Vec<f64> {
    let gram = if m.rows() >= m.cols() {
        m.transpose().matmul(m).unwrap()
    } else {
        m.matmul(&m.transpose()).unwrap()
    };
    symmetric_eigenvalues(&gram).into_iter().map(|e| e.max(0.0).sqrt()).collect()
}

pub fn rel_frob(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
}
