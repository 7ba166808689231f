//! Trainable channel-to-CU assignments and the blending of CU alternatives.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, ParamId, ParamRole, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ThetaMode {
    /// Independent softmax over branches for every output channel (logits `[C, N]`).
    PerChannel { channels: usize, branches: usize },
    /// Softmax over the `C + 1` split points between two branches (logits `[C + 1]`).
    Contiguous { channels: usize },
}

impl ThetaMode {
    pub fn channels(self) -> usize {
        match self {
            ThetaMode::PerChannel { channels, .. } | ThetaMode::Contiguous { channels } => channels,
        }
    }

    pub fn branches(self) -> usize {
        match self {
            ThetaMode::PerChannel { branches, .. } => branches,
            ThetaMode::Contiguous { .. } => 2,
        }
    }

    fn logit_shape(self) -> Vec<usize> {
        match self {
            ThetaMode::PerChannel { channels, branches } => vec![channels, branches],
            ThetaMode::Contiguous { channels } => vec![channels + 1],
        }
    }
}

/// Assignment logits of one channel space plus an optional hard override.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaBank {
    pub name: String,
    pub mode: ThetaMode,
    pub logits: ParamId,
    pub tau: f32,
    hard: Option<Vec<usize>>,
}

impl ThetaBank {
    /// Zero logits, i.e. a uniform assignment.
    pub fn new(store: &mut ParamStore, name: impl Into<String>, mode: ThetaMode) -> Result<Self> {
        if mode.channels() == 0 || mode.branches() < 2 {
            return Err(Error::Invalid(format!("theta bank needs >= 1 channel and >= 2 branches, got {mode:?}")));
        }
        let name = name.into();
        let logits = store.add(format!("{name}.theta"), Tensor::zeros(mode.logit_shape()), ParamRole::Theta);
        Ok(ThetaBank {
            name,
            mode,
            logits,
            tau: 1.0,
            hard: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn branches(&self) -> usize {
        self.mode.branches()
    }

    pub fn is_frozen(&self, store: &ParamStore) -> bool {
        store.get(self.logits).frozen
    }

    pub fn set_frozen(&self, store: &mut ParamStore, frozen: bool) {
        store.set_frozen(self.logits, frozen);
    }

    pub fn hard(&self) -> Option<&[usize]> {
        self.hard.as_deref()
    }

    /// Replaces the soft assignment by a one-hot one (branch index per channel).
    pub fn set_hard(&mut self, assignment: Vec<usize>) -> Result<()> {
        if assignment.len() != self.channels() || assignment.iter().any(|&b| b >= self.branches()) {
            return Err(Error::Invalid(format!(
                "bank `{}`: assignment of {} channels over {} branches is invalid",
                self.name,
                self.channels(),
                self.branches()
            )));
        }
        if matches!(self.mode, ThetaMode::Contiguous { .. }) && !is_sorted(&assignment) {
            return Err(Error::Invalid(format!("bank `{}`: contiguous assignment must be sorted", self.name)));
        }
        self.hard = Some(assignment);
        Ok(())
    }

    pub fn clear_hard(&mut self) {
        self.hard = None;
    }

    /// Split-point distribution (contiguous mode only).
    pub fn split_probabilities(&self, store: &ParamStore) -> Option<Vec<f32>> {
        match self.mode {
            ThetaMode::Contiguous { .. } => Some(softmax_scaled(store.value(self.logits).data(), self.tau)),
            ThetaMode::PerChannel { .. } => None,
        }
    }

    /// Per-channel probabilities `[C, N]` of the soft assignment.
    pub fn probabilities(&self, store: &ParamStore) -> Tensor {
        let logits = store.value(self.logits);
        match self.mode {
            ThetaMode::PerChannel { channels, branches } => {
                let mut p = Vec::with_capacity(channels * branches);
                for row in logits.data().chunks(branches) {
                    p.extend(softmax_scaled(row, self.tau));
                }
                Tensor::new([channels, branches], p).expect("shape")
            }
            ThetaMode::Contiguous { channels } => {
                let first = contiguous_theta(&softmax_scaled(logits.data(), self.tau)).expect("normalized");
                let mut p = Vec::with_capacity(2 * channels);
                for t in first {
                    p.extend([t, 1.0 - t]);
                }
                Tensor::new([channels, 2], p).expect("shape")
            }
        }
    }

    /// Records `theta` `[C, N]` on the tape: one-hot constants if hard, else a
    /// differentiable function of the logits.
    pub fn theta(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        if let Some(a) = &self.hard {
            return Ok(tape.constant(one_hot(a, self.branches())));
        }
        let logits = tape.param(store, self.logits);
        let scaled = tape.scale(logits, 1.0 / self.tau);
        let probs = tape.softmax(scaled);
        match self.mode {
            ThetaMode::PerChannel { .. } => Ok(probs),
            ThetaMode::Contiguous { .. } => {
                let first = tape.suffix_sum(probs)?;
                let second = tape.one_minus(first);
                tape.stack_columns(&[first, second])
            }
        }
    }

    /// Branch index per channel: argmax per row, or the argmax split point.
    /// Ties go to the lowest index.
    pub fn discretize(&self, store: &ParamStore) -> Vec<usize> {
        if let Some(a) = &self.hard {
            return a.clone();
        }
        let logits = store.value(self.logits);
        match self.mode {
            ThetaMode::PerChannel { .. } => self.probabilities(store).argmax_rows(),
            ThetaMode::Contiguous { channels } => {
                let k = argmax(&softmax_scaled(logits.data(), self.tau));
                split_assignment(k, channels)
            }
        }
    }
}

fn softmax_scaled(logits: &[f32], tau: f32) -> Vec<f32> {
    let mut v: Vec<f32> = logits.iter().map(|&l| l / tau).collect();
    softmax_in_place(&mut v);
    v
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn is_sorted(a: &[usize]) -> bool {
    a.windows(2).all(|w| w[0] <= w[1])
}

/// `k` channels on branch 0, the rest on branch 1.
pub fn split_assignment(k: usize, channels: usize) -> Vec<usize> {
    (0..channels).map(|c| usize::from(c >= k)).collect()
}

pub fn one_hot(assignment: &[usize], branches: usize) -> Tensor {
    let mut t = Tensor::zeros([assignment.len(), branches]);
    for (row, &b) in t.data_mut().chunks_mut(branches).zip(assignment) {
        row[b] = 1.0;
    }
    t
}

/// Probability that each channel sits before the split: `theta_i = sum_{k > i} p_k`.
pub fn contiguous_theta(split: &[f32]) -> Result<Vec<f32>> {
    if split.len() < 2 {
        return Err(Error::Invalid("split distribution needs at least two positions".into()));
    }
    let total: f64 = split.iter().map(|&p| p as f64).sum();
    if split.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-4 {
        return Err(Error::Invalid(format!("split distribution is not normalized (sum {total})")));
    }
    let mut out = vec![0.0f32; split.len() - 1];
    let mut acc = 0.0f64;
    for i in (0..out.len()).rev() {
        acc += split[i + 1] as f64;
        out[i] = (acc as f32).min(1.0);
    }
    Ok(out)
}

/// `n_j = sum_c theta[c, j]`.
pub fn effective_channels(theta: &Tensor, branch: usize) -> f32 {
    let n = theta.dim(1);
    theta.data().chunks(n).map(|r| r[branch] as f64).sum::<f64>() as f32
}

/// Differentiable effective channel count of every branch, `[N]`.
pub fn effective_channels_var(tape: &mut Tape, theta: Var) -> Result<Var> {
    tape.sum_rows(theta)
}

/// Per-channel convex combination of full branch outputs (`[B, C, ...]` each).
pub fn blend_outputs(tape: &mut Tape, outputs: &[Var], theta: Var) -> Result<Var> {
    blend(tape, outputs, theta, 1, "blend_outputs")
}

/// Per-filter convex combination of (quantized) branch weights (`[C, ...]` each).
pub fn blend_weights(tape: &mut Tape, weights: &[Var], theta: Var) -> Result<Var> {
    blend(tape, weights, theta, 0, "blend_weights")
}

fn blend(tape: &mut Tape, parts: &[Var], theta: Var, axis: usize, op: &'static str) -> Result<Var> {
    let ts = tape.value(theta).shape().to_vec();
    if ts.len() != 2 || ts[1] != parts.len() {
        return Err(Error::shape(op, format!("theta {ts:?} for {} branches", parts.len())));
    }
    let shape = tape.value(parts[0]).shape().to_vec();
    if let Some(p) = parts.iter().find(|&&p| tape.value(p).shape() != shape.as_slice()) {
        return Err(Error::shape(
            op,
            format!("branch shapes differ: {shape:?} vs {:?}", tape.value(*p).shape()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (j, &p) in parts.iter().enumerate() {
        let col = tape.column(theta, j)?;
        let term = tape.scale_axis(p, col, axis)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one branch"))
}
