//! Teacher pre-training, LoRA-only fine-tuning and exact-match evaluation.

mod task;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use task::{
    decode, encode, make_batch, make_task, Example, MaskMode, TaskDataset, TaskKind, TaskSpec, VOCAB, VOCAB_SIZE,
};

use crate::error::{Error, Result};
use crate::inject::{injected_forward_backward, InjectedModel};
use crate::tinylm::{backward, generate_batch, init_model, ModelConfig, ParamStore, TokenBatch};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub loss_mask: MaskMode,
    #[serde(default)]
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            learning_rate: 3e-4,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: default_clip(),
            loss_mask: MaskMode::AnswerOnly,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        // A zero learning rate is a legitimate no-op run.
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0,1) and eps must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    /// Gradient norm before clipping, per step.
    pub grad_norms: Vec<f64>,
    pub clipped_steps: usize,
    pub hyperparams: Hyperparams,
    pub final_eval: Option<f64>,
    /// Not reproducible; ignore when comparing runs.
    pub wall_clock_secs: f64,
}

#[derive(Serialize)]
struct StepRecord {
    step: usize,
    loss: f64,
    grad_norm: f64,
}

impl TrainLog {
    fn new(hp: &Hyperparams) -> Self {
        Self {
            losses: Vec::new(),
            grad_norms: Vec::new(),
            clipped_steps: 0,
            hyperparams: hp.clone(),
            final_eval: None,
            wall_clock_secs: 0.0,
        }
    }

    pub fn steps(&self) -> usize {
        self.losses.len()
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (step, (&loss, &grad_norm)) in self.losses.iter().zip(&self.grad_norms).enumerate() {
            let rec = StepRecord { step, loss, grad_norm };
            out.push_str(&serde_json::to_string(&rec).expect("plain record"));
            out.push('\n');
        }
        out
    }

    /// Everything except the per-step series.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "steps": self.steps(),
            "final_loss": self.losses.last(),
            "clipped_steps": self.clipped_steps,
            "hyperparams": self.hyperparams,
            "final_eval": self.final_eval,
            "wall_clock_secs": self.wall_clock_secs,
        })
    }
}

/// Adam with bias correction over a fixed list of parameter slices.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(hp: &Hyperparams, sizes: &[usize]) -> Self {
        Self {
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            lr: hp.learning_rate,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// `grads[i]` updates `params[i]`, each pre-multiplied by `grad_scale`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], grad_scale: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter list changed between steps");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * grad_scale;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Global norm and the factor that brings it under `clip`.
fn clip_scale(grads: &[&[f64]], clip: Option<f64>) -> (f64, f64) {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
    match clip {
        Some(c) if norm > c => (norm, c / norm),
        _ => (norm, 1.0),
    }
}

/// Shuffled mini-batches for every epoch, in the order they are consumed.
fn epoch_batches<'a>(data: &'a TaskDataset, hp: &Hyperparams) -> Result<impl Iterator<Item = TokenBatch> + 'a> {
    hp.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mode = hp.loss_mask;
    let bs = hp.batch_size;
    Ok((0..hp.epochs).flat_map(move |_| {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        order
            .chunks(bs)
            .map(|c| make_batch(&c.iter().map(|&i| &data.train[i]).collect::<Vec<_>>(), mode))
            .collect::<Vec<_>>()
    }))
}

fn check_loss(step: usize, loss: f64, norm: f64) -> Result<()> {
    if !loss.is_finite() || !norm.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    Ok(())
}

/// Full-parameter training of an existing model.
pub fn train_params(mut model: ParamStore, data: &TaskDataset, hp: &Hyperparams) -> Result<(ParamStore, TrainLog)> {
    let start = Instant::now();
    let mut log = TrainLog::new(hp);
    let sizes: Vec<usize> = model.iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(hp, &sizes);
    for (step, batch) in epoch_batches(data, hp)?.enumerate() {
        let (loss, grads) = backward(&model, &batch)?;
        let g: Vec<&[f64]> = grads.iter().map(|(_, t)| t.as_slice()).collect();
        let (norm, scale) = clip_scale(&g, hp.clip_norm);
        check_loss(step, loss, norm)?;
        let mut p: Vec<&mut [f64]> = model.iter_mut().map(|(_, t)| t.as_mut_slice()).collect();
        adam.step(&mut p, &g, scale);
        log.losses.push(loss);
        log.grad_norms.push(norm);
        log.clipped_steps += usize::from(scale < 1.0);
        if log::log_enabled!(log::Level::Debug) && step % 50 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, log))
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) on the task.
pub fn train_teacher(cfg: &ModelConfig, data: &TaskDataset, hp: &Hyperparams) -> Result<(ParamStore, TrainLog)> {
    train_params(init_model(cfg)?, data, hp)
}

/// Adam over the LoRA factors only; base weights and subtracted terms are never touched.
pub fn finetune(mut m: InjectedModel, data: &TaskDataset, hp: &Hyperparams) -> Result<(InjectedModel, TrainLog)> {
    let start = Instant::now();
    let mut log = TrainLog::new(hp);
    let sizes: Vec<usize> = m
        .lora()
        .values()
        .flat_map(|l| [l.b.as_slice().len(), l.a.as_slice().len()])
        .collect();
    let mut adam = Adam::new(hp, &sizes);
    for (step, batch) in epoch_batches(data, hp)?.enumerate() {
        let (loss, grads) = injected_forward_backward(&m, &batch)?;
        let g: Vec<&[f64]> = grads.values().flat_map(|g| [g.b.as_slice(), g.a.as_slice()]).collect();
        let (norm, scale) = clip_scale(&g, hp.clip_norm);
        check_loss(step, loss, norm)?;
        let mut p: Vec<&mut [f64]> = m
            .lora_mut()
            .values_mut()
            .flat_map(|l| [l.b.as_mut_slice(), l.a.as_mut_slice()])
            .collect();
        adam.step(&mut p, &g, scale);
        log.losses.push(loss);
        log.grad_norms.push(norm);
        log.clipped_steps += usize::from(scale < 1.0);
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((m, log))
}

/// Anything that can greedily extend prompts.
pub trait Decoder {
    fn vocab_size(&self) -> usize;

    /// The `max_new` tokens generated after each prompt.
    fn complete(&self, prompts: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>>;
}

fn strip_prompts(prompts: &[Vec<u32>], full: Vec<Vec<u32>>) -> Vec<Vec<u32>> {
    full.into_iter().zip(prompts).map(|(s, p)| s[p.len()..].to_vec()).collect()
}

impl Decoder for ParamStore {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn complete(&self, prompts: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>> {
        Ok(strip_prompts(prompts, generate_batch(self, prompts, max_new)?))
    }
}

impl Decoder for InjectedModel {
    fn vocab_size(&self) -> usize {
        self.base().config().vocab_size
    }

    fn complete(&self, prompts: &[Vec<u32>], max_new: usize) -> Result<Vec<Vec<u32>>> {
        let store = self.effective_store()?;
        Ok(strip_prompts(prompts, generate_batch(&store, prompts, max_new)?))
    }
}

const EVAL_CHUNK: usize = 256;

/// Fraction of eval prompts whose greedy completion matches exactly.
pub fn evaluate_exact_match<D: Decoder + ?Sized>(model: &D, data: &TaskDataset) -> Result<f64> {
    if data.eval.is_empty() {
        return Err(Error::InvalidInput("empty eval split".into()));
    }
    if model.vocab_size() != data.vocab_size() {
        return Err(Error::Data(format!(
            "model vocab {} differs from task vocab {}",
            model.vocab_size(),
            data.vocab_size()
        )));
    }
    // Group by completion length so every call decodes a fixed number of tokens.
    let mut by_len: std::collections::BTreeMap<usize, Vec<&Example>> = Default::default();
    for e in &data.eval {
        by_len.entry(e.completion.len()).or_default().push(e);
    }
    let mut hits = 0usize;
    for (len, group) in by_len {
        for chunk in group.chunks(EVAL_CHUNK) {
            let prompts: Vec<Vec<u32>> = chunk.iter().map(|e| e.prompt.clone()).collect();
            let out = model.complete(&prompts, len)?;
            hits += out.iter().zip(chunk).filter(|(o, e)| **o == e.completion).count();
        }
    }
    Ok(hits as f64 / data.eval.len() as f64)
}
