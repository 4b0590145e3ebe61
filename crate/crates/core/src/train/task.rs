//! Synthetic tasks over a small shared character vocabulary.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::TokenBatch;

/// Token `i` is the `i`-th character.
pub const VOCAB: &str = "0123456789+=|abcdefgh";
pub const VOCAB_SIZE: usize = 21;
const LETTERS: &str = "abcdefgh";
const DIGITS: &str = "0123456789";

pub fn encode(text: &str) -> Result<Vec<u32>> {
    text.chars()
        .map(|c| {
            VOCAB
                .find(c)
                .map(|i| i as u32)
                .ok_or_else(|| Error::Data(format!("character `{c}` is not in the task vocabulary")))
        })
        .collect()
}

/// Lossy: ids outside the vocabulary render as `?`.
pub fn decode(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| VOCAB.as_bytes().get(t as usize).map_or('?', |&b| b as char))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `"ab+cd=" → (ab + cd) mod 10ⁿ`, operands and result zero-padded to `n` digits.
    ModularAdd,
    /// `"abc|" → "abc"`.
    Copy,
    /// `"abc|" → "cba"`.
    Reverse,
    /// `"3142|" → "1234"`.
    SortDigits,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ModularAdd => "modular_add",
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::SortDigits => "sort_digits",
        }
    }
}

/// A task and its size: digit count for `modular_add`, maximum input length otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub size: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, size: usize) -> Result<Self> {
        let spec = Self { kind, size };
        spec.universe()?;
        Ok(spec)
    }

    /// Length of prompt plus completion for the longest example.
    pub fn max_sequence_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularAdd => 3 * self.size + 2,
            _ => 2 * self.size + 1,
        }
    }

    /// Number of distinct examples.
    fn universe(&self) -> Result<usize> {
        let too_big = || Error::Config(format!("task {self} is too large to index"));
        if self.size == 0 {
            return Err(Error::Config(format!("task {self} needs a positive size")));
        }
        match self.kind {
            TaskKind::ModularAdd => 10usize
                .checked_pow(
                    self.size
                        .checked_mul(2)
                        .and_then(|e| u32::try_from(e).ok())
                        .ok_or_else(too_big)?,
                )
                .ok_or_else(too_big),
            _ => {
                let base = self.alphabet().len();
                let mut total = 0usize;
                let mut p = 1usize;
                for _ in 0..self.size {
                    p = p.checked_mul(base).ok_or_else(too_big)?;
                    total = total.checked_add(p).ok_or_else(too_big)?;
                }
                Ok(total)
            }
        }
    }

    fn alphabet(&self) -> &'static str {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => LETTERS,
            _ => DIGITS,
        }
    }

    /// The `idx`-th example in a fixed enumeration of the task.
    fn example(&self, idx: usize) -> Example {
        let text = match self.kind {
            TaskKind::ModularAdd => {
                let modulus = 10usize.pow(self.size as u32);
                let (a, b) = (idx / modulus, idx % modulus);
                let n = self.size;
                (format!("{a:0n$}+{b:0n$}="), format!("{:0n$}", (a + b) % modulus))
            }
            _ => {
                let alpha = self.alphabet().as_bytes();
                let (mut len, mut rest, mut count) = (1, idx, alpha.len());
                while rest >= count {
                    rest -= count;
                    len += 1;
                    count *= alpha.len();
                }
                let input: Vec<u8> = (0..len)
                    .map(|_| {
                        let c = alpha[rest % alpha.len()];
                        rest /= alpha.len();
                        c
                    })
                    .collect();
                let mut out = input.clone();
                match self.kind {
                    TaskKind::Reverse => out.reverse(),
                    TaskKind::SortDigits => out.sort_unstable(),
                    _ => {}
                }
                let s = String::from_utf8(input).expect("ascii");
                (format!("{s}|"), String::from_utf8(out).expect("ascii"))
            }
        };
        Example {
            prompt: encode(&text.0).expect("task alphabet is in vocab"),
            completion: encode(&text.1).expect("task alphabet is in vocab"),
        }
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.size)
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    /// `modular_add:2`, `copy:6`, …
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad task `{s}`, expected KIND:SIZE"));
        let (k, n) = s.split_once(':').ok_or_else(bad)?;
        let kind = match k {
            "modular_add" => TaskKind::ModularAdd,
            "copy" => TaskKind::Copy,
            "reverse" => TaskKind::Reverse,
            "sort_digits" => TaskKind::SortDigits,
            _ => return Err(bad()),
        };
        TaskSpec::new(kind, n.parse().map_err(|_| bad())?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<u32>,
    pub completion: Vec<u32>,
}

impl Example {
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.completion);
        s
    }
}

/// Which positions count towards the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Completion tokens only.
    #[default]
    AnswerOnly,
    /// Every token after the first.
    Full,
}

pub fn make_batch(examples: &[&Example], mode: MaskMode) -> TokenBatch {
    let seqs: Vec<Vec<u32>> = examples.iter().map(|e| e.sequence()).collect();
    match mode {
        MaskMode::Full => TokenBatch::full(seqs),
        MaskMode::AnswerOnly => {
            let lens: Vec<usize> = examples.iter().map(|e| e.prompt.len()).collect();
            TokenBatch::answer_only(seqs, &lens)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl TaskDataset {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }
}

/// Draws `n_train + n_eval` distinct examples; the two splits never share an example.
pub fn make_task(spec: TaskSpec, n_train: usize, n_eval: usize, seed: u64) -> Result<TaskDataset> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::InvalidInput("train and eval counts must be at least 1".into()));
    }
    let universe = spec.universe()?;
    let total = n_train
        .checked_add(n_eval)
        .filter(|&t| t <= universe)
        .ok_or_else(|| {
            Error::InvalidInput(format!(
                "task {spec} has only {universe} distinct examples, {n_train}+{n_eval} requested"
            ))
        })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<Example> = sample(&mut rng, universe, total)
        .into_iter()
        .map(|i| spec.example(i))
        .collect();
    let eval = all.split_off(n_train);
    Ok(TaskDataset {
        spec,
        seed,
        train: all,
        eval,
    })
}
