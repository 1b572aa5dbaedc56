//! Alternating first-order architecture search and the optional second
//! stage that trains only network parameters of the chosen scheme.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{AdapterKind, Cascade};
use crate::cell::{cell_forward, discretize_index, gumbel_softmax, CellMode, NfaCell, PathWeights};
use crate::diffcore::{Adam, BindMode, Graph, NodeId, ParameterSet};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::objective::{penalty, penalty_value, task_loss, total_loss, PenaltyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauShape {
    Exponential,
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    pub shape: TauShape,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self { start: 5.0, end: 0.5, shape: TauShape::Exponential }
    }
}

impl TauSchedule {
    /// Temperature for `epoch` (0-based) of `total` stage-1 epochs.
    pub fn at(&self, epoch: usize, total: usize) -> f64 {
        if total <= 1 || self.shape == TauShape::Constant {
            return self.start;
        }
        let t = epoch.min(total - 1) as f64 / (total - 1) as f64;
        match self.shape {
            TauShape::Exponential => self.start * (self.end / self.start).powf(t),
            TauShape::Linear => self.start + (self.end - self.start) * t,
            TauShape::Constant => self.start,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub split_ratio: f64,
    pub lr_network: f64,
    pub lr_arch: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub tau: TauSchedule,
    pub batch_size: usize,
    /// Set from the experiment seed rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Straight-through one-hot sampling; `false` mixes paths softly.
    pub hard: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            split_ratio: 0.5,
            lr_network: 1e-4,
            lr_arch: 1e-3,
            stage1_epochs: 10,
            stage2_epochs: 0,
            tau: TauSchedule::default(),
            batch_size: 32,
            seed: 0,
            hard: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio {} must lie in (0, 1)", self.split_ratio)));
        }
        if !(self.lr_network > 0.0 && self.lr_arch > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.tau.start > 0.0 && self.tau.end > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded shuffle then split; the first part has `round(ratio * N)`
/// samples, halves rounded up.
pub fn split_dataset(data: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot split an empty dataset".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("split ratio {ratio} must lie in (0, 1)")));
    }
    let n = data.len();
    let n_train = ((ratio * n as f64) + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5b1e_0000));
    Ok((data.subset(&order[..n_train]), data.subset(&order[n_train..])))
}

/// Every cell of a cascade, in order, plus stage boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet {
    pub cells: Vec<NfaCell>,
    stage_ends: Vec<usize>,
    stage_softmax: Vec<bool>,
    pub labels: usize,
}

impl Supernet {
    pub fn new(cascade: &Cascade, mode: CellMode, adapters: &[AdapterKind], seed: u64) -> Result<Self> {
        let cells = cascade
            .modules
            .iter()
            .enumerate()
            .map(|(i, m)| NfaCell::new(i, m, mode, adapters, seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cells,
            stage_ends: cascade.stage_ends(),
            stage_softmax: cascade.stage_softmax.clone(),
            labels: cascade.labels,
        })
    }

    /// Logits of the final stage.
    pub fn forward(&self, graph: &mut Graph, x: NodeId, weights: &[NodeId], network: BindMode) -> Result<NodeId> {
        if weights.len() != self.cells.len() {
            return Err(Error::InvalidArgument(format!(
                "{} cells but {} weight vectors",
                self.cells.len(),
                weights.len()
            )));
        }
        let mut h = x;
        for (i, cell) in self.cells.iter().enumerate() {
            h = cell_forward(graph, cell, h, weights[i], network)?;
            if let Some(stage) = self.stage_ends.iter().position(|&e| e == i) {
                if self.stage_softmax[stage] {
                    h = graph.softmax(h)?;
                }
            }
        }
        Ok(h)
    }

    /// Current argmax path index of every cell.
    pub fn discretization(&self) -> Vec<usize> {
        self.cells.iter().map(discretize_index).collect()
    }

    pub fn check_scheme(&self, scheme: &[usize]) -> Result<()> {
        if scheme.len() != self.cells.len() || scheme.iter().zip(&self.cells).any(|(&k, c)| k >= c.num_paths()) {
            return Err(Error::InvalidArgument(format!("scheme {scheme:?} does not fit the cells")));
        }
        Ok(())
    }

    pub fn scheme_weights(&self, graph: &mut Graph, scheme: &[usize]) -> Result<Vec<NodeId>> {
        self.check_scheme(scheme)?;
        scheme
            .iter()
            .zip(&self.cells)
            .map(|(&k, c)| PathWeights::one_hot(k, c.num_paths()).constant(graph))
            .collect()
    }

    /// Trainable parameters a discrete scheme would update.
    pub fn selected_params(&self, scheme: &[usize]) -> usize {
        scheme.iter().zip(&self.cells).map(|(&k, c)| c.trainable_count(c.paths()[k])).sum()
    }

    pub fn network_count(&self) -> usize {
        self.cells.iter().map(NfaCell::network_count).sum()
    }

    pub fn alpha_count(&self) -> usize {
        self.cells.iter().map(|c| c.arch_params().count()).sum()
    }

    pub fn alpha_checksum(&self) -> u64 {
        self.cells.iter().fold(0, |h, c| h.rotate_left(5) ^ c.arch_params().checksum())
    }

    pub fn network_checksum(&self) -> u64 {
        self.cells.iter().fold(0, |h, c| h.rotate_left(5) ^ c.network_checksum())
    }

    pub fn pretrained_checksum(&self) -> u64 {
        self.cells.iter().fold(0, |h, c| h.rotate_left(5) ^ c.module().pretrained().checksum())
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.cells.iter().map(|c| c.alpha().to_vec()).collect()
    }

    /// Alpha sets followed by network sets, for checkpointing.
    pub fn param_sets(&self) -> Vec<&ParameterSet> {
        let mut out: Vec<&ParameterSet> = self.cells.iter().map(|c| c.arch_params()).collect();
        for c in &self.cells {
            out.extend(c.network_sets());
        }
        out
    }

    pub fn param_sets_mut(&mut self) -> Vec<&mut ParameterSet> {
        let mut alphas = Vec::new();
        let mut nets = Vec::new();
        for c in self.cells.iter_mut() {
            let (alpha, net) = c.sets_mut();
            alphas.push(alpha);
            nets.extend(net);
        }
        alphas.extend(nets);
        alphas
    }

    /// Mean task loss of a fixed scheme over a whole dataset.
    pub fn evaluate(&self, data: &Dataset, scheme: &[usize]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("evaluation data is empty".into()));
        }
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut g = Graph::new();
        let x = g.constant(data.inputs(&idx))?;
        let w = self.scheme_weights(&mut g, scheme)?;
        let logits = self.forward(&mut g, x, &w, BindMode::Frozen)?;
        let loss = task_loss(&mut g, logits, &data.labels_of(&idx))?;
        g.value(loss).item()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Mean network-step task loss over the epoch.
    pub train_loss: f64,
    /// Task loss of the current discretization on the validation part.
    pub val_loss: f64,
    /// Mean architecture-step penalty (stage one) or the penalty of the
    /// fixed scheme (stage two).
    pub penalty: f64,
    pub alpha: Vec<Vec<f64>>,
    pub discretization: Vec<usize>,
    pub selected_params: usize,
}

/// Ids of every sample consumed by each step kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleAudit {
    pub arch_ids: BTreeSet<usize>,
    pub net_ids: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchState {
    pub epoch: usize,
    pub stage: Stage,
    pub arch_frozen: bool,
    pub stage1_done: bool,
    pub history: Vec<EpochRecord>,
    pub audit: SampleAudit,
}

impl Default for SearchState {
    fn default() -> Self {
        Self {
            epoch: 0,
            stage: Stage::One,
            arch_frozen: false,
            stage1_done: false,
            history: Vec::new(),
            audit: SampleAudit::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Arch,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Checksums {
    pub alpha: u64,
    pub network: u64,
    pub pretrained: u64,
}

/// Group checksums around one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepAudit {
    pub kind: StepKind,
    pub stage: Stage,
    pub before: Checksums,
    pub after: Checksums,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchStepLoss {
    pub total: f64,
    pub task: f64,
    pub penalty: f64,
}

/// Bilevel search driver over a train/validation split.
pub struct Searcher {
    pub supernet: Supernet,
    train: Dataset,
    val: Dataset,
    cfg: SearchConfig,
    penalty_cfg: PenaltyConfig,
    net_opt: Adam,
    arch_opt: Adam,
    rng: ChaCha8Rng,
    val_order: Vec<usize>,
    val_cursor: usize,
    tau: f64,
    state: SearchState,
    step_audit: Option<Vec<StepAudit>>,
}

impl Searcher {
    pub fn new(
        supernet: Supernet,
        train: Dataset,
        val: Dataset,
        cfg: SearchConfig,
        penalty_cfg: PenaltyConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        penalty_cfg.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::InvalidArgument("search needs nonempty train and validation parts".into()));
        }
        Ok(Self {
            supernet,
            train,
            val,
            net_opt: Adam::new(cfg.lr_network),
            arch_opt: Adam::new(cfg.lr_arch),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0053_4541_5243_4800),
            val_order: Vec::new(),
            val_cursor: 0,
            tau: cfg.tau.start,
            cfg,
            penalty_cfg,
            state: SearchState::default(),
            step_audit: None,
        })
    }

    pub fn state(&self) -> &SearchState {
        &self.state
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn train_part(&self) -> &Dataset {
        &self.train
    }

    pub fn val_part(&self) -> &Dataset {
        &self.val
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Records checksums around every subsequent optimizer step.
    pub fn enable_step_audit(&mut self) {
        self.step_audit = Some(Vec::new());
    }

    pub fn step_audit(&self) -> &[StepAudit] {
        self.step_audit.as_deref().unwrap_or(&[])
    }

    pub fn checksums(&self) -> Checksums {
        Checksums {
            alpha: self.supernet.alpha_checksum(),
            network: self.supernet.network_checksum(),
            pretrained: self.supernet.pretrained_checksum(),
        }
    }

    fn audited<T>(&mut self, kind: StepKind, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let before = self.step_audit.is_some().then(|| self.checksums());
        let out = f(self)?;
        if let Some(before) = before {
            let after = self.checksums();
            let stage = self.state.stage;
            self.step_audit.as_mut().expect("enabled").push(StepAudit { kind, stage, before, after });
        }
        Ok(out)
    }

    fn sample_weights(&mut self, graph: &mut Graph, alpha_mode: BindMode) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.supernet.cells.len());
        for cell in &self.supernet.cells {
            let a = cell.bind_alpha(graph, alpha_mode)?;
            let w = gumbel_softmax(graph, a, self.tau, &mut self.rng, self.cfg.hard, true)?;
            out.push(w.node);
        }
        Ok(out)
    }

    /// One architecture update on a validation batch. Network weights enter
    /// as constants; only alpha moves.
    pub fn arch_step(&mut self, val_batch: &[usize]) -> Result<ArchStepLoss> {
        if val_batch.is_empty() {
            return Err(Error::InvalidArgument("empty validation batch".into()));
        }
        if self.state.arch_frozen {
            return Err(Error::InvalidArgument("architecture is frozen".into()));
        }
        self.audited(StepKind::Arch, |s| {
            let mut g = Graph::new();
            let x = g.constant(s.val.inputs(val_batch))?;
            let w = s.sample_weights(&mut g, BindMode::Trainable)?;
            let logits = s.supernet.forward(&mut g, x, &w, BindMode::Frozen)?;
            let task = task_loss(&mut g, logits, &s.val.labels_of(val_batch))?;
            let pen = penalty(&mut g, &s.supernet.cells, &w, &s.penalty_cfg)?;
            let total = total_loss(&mut g, task, pen, &s.penalty_cfg)?;
            g.backward(total)?;
            for cell in s.supernet.cells.iter_mut() {
                let set = cell.arch_params_mut();
                set.pull_grads(&g);
                s.arch_opt.step(set)?;
                set.zero_grad();
            }
            s.state.audit.arch_ids.extend(s.val.ids_of(val_batch));
            Ok(ArchStepLoss { total: g.value(total).item()?, task: g.value(task).item()?, penalty: g.value(pen).item()? })
        })
    }

    /// One network update on a training batch under a sampled architecture
    /// (or a fixed scheme). Alpha enters as a constant; the penalty does not
    /// depend on network weights and is left out.
    pub fn net_step(&mut self, train_batch: &[usize], scheme: Option<&[usize]>) -> Result<f64> {
        if train_batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        self.audited(StepKind::Net, |s| {
            let mut g = Graph::new();
            let x = g.constant(s.train.inputs(train_batch))?;
            let w = match scheme {
                Some(scheme) => s.supernet.scheme_weights(&mut g, scheme)?,
                None => s.sample_weights(&mut g, BindMode::Frozen)?,
            };
            let logits = s.supernet.forward(&mut g, x, &w, BindMode::Trainable)?;
            let task = task_loss(&mut g, logits, &s.train.labels_of(train_batch))?;
            g.backward(task)?;
            for cell in s.supernet.cells.iter_mut() {
                for set in cell.network_sets_mut() {
                    if set.pull_grads(&g) {
                        s.net_opt.step(set)?;
                    }
                    set.zero_grad();
                }
            }
            s.state.audit.net_ids.extend(s.train.ids_of(train_batch));
            g.value(task).item()
        })
    }

    fn next_val_batch(&mut self) -> Vec<usize> {
        let n = self.val.len();
        let mut batch = Vec::with_capacity(self.cfg.batch_size.min(n));
        while batch.len() < self.cfg.batch_size.min(n) {
            if self.val_cursor == self.val_order.len() {
                self.val_order = (0..n).collect();
                self.val_order.shuffle(&mut self.rng);
                self.val_cursor = 0;
            }
            batch.push(self.val_order[self.val_cursor]);
            self.val_cursor += 1;
        }
        batch
    }

    fn train_batches(&mut self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn record(&mut self, stage: Stage, train_loss: f64, penalty: f64) -> Result<()> {
        let scheme = self.supernet.discretization();
        let val_loss = self.supernet.evaluate(&self.val, &scheme)?;
        self.state.epoch += 1;
        self.state.history.push(EpochRecord {
            epoch: self.state.epoch,
            stage,
            train_loss,
            val_loss,
            penalty,
            alpha: self.supernet.alphas(),
            selected_params: self.supernet.selected_params(&scheme),
            discretization: scheme,
        });
        Ok(())
    }

    /// Stage one: per training batch, one architecture step on the next
    /// validation batch, then one network step. Temperature follows the
    /// schedule per epoch.
    pub fn run_stage1(&mut self) -> Result<&SearchState> {
        if self.state.stage1_done {
            return Err(Error::InvalidArgument("stage one already ran".into()));
        }
        let epochs = self.cfg.stage1_epochs;
        for e in 0..epochs {
            self.tau = self.cfg.tau.at(e, epochs);
            let (mut train_sum, mut pen_sum, mut steps) = (0.0, 0.0, 0usize);
            for batch in self.train_batches() {
                let vb = self.next_val_batch();
                pen_sum += self.arch_step(&vb)?.penalty;
                train_sum += self.net_step(&batch, None)?;
                steps += 1;
            }
            let n = steps.max(1) as f64;
            self.record(Stage::One, train_sum / n, pen_sum / n)?;
        }
        self.state.stage1_done = true;
        Ok(&self.state)
    }

    /// Stage two: alpha frozen, the stage-one discretization trained with
    /// network steps only.
    pub fn run_stage2(&mut self) -> Result<&SearchState> {
        if !self.state.stage1_done {
            return Err(Error::InvalidArgument("stage two requires a completed stage one".into()));
        }
        self.state.stage = Stage::Two;
        self.state.arch_frozen = true;
        let scheme = self.supernet.discretization();
        let weights: Vec<Vec<f64>> = scheme
            .iter()
            .zip(&self.supernet.cells)
            .map(|(&k, c)| PathWeights::one_hot(k, c.num_paths()).weights)
            .collect();
        let pen = penalty_value(&self.supernet.cells, &weights, &self.penalty_cfg)?;
        for _ in 0..self.cfg.stage2_epochs {
            let (mut sum, mut steps) = (0.0, 0usize);
            for batch in self.train_batches() {
                sum += self.net_step(&batch, Some(&scheme))?;
                steps += 1;
            }
            self.record(Stage::Two, sum / steps.max(1) as f64, pen)?;
        }
        Ok(&self.state)
    }

    /// Network-only training of a fixed scheme for `epochs`, without touching
    /// search bookkeeping. Returns the final validation task loss.
    pub fn train_scheme(&mut self, scheme: &[usize], epochs: usize) -> Result<f64> {
        self.supernet.check_scheme(scheme)?;
        for _ in 0..epochs {
            for batch in self.train_batches() {
                self.net_step(&batch, Some(scheme))?;
            }
        }
        self.supernet.evaluate(&self.val, scheme)
    }
}
