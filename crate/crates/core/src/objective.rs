//! Final-task loss and the trainable-parameter penalty on architecture
//! weights.
//!
//! For each cell the penalty is the weighted mean of per-path parameter
//! counts, `sum_k w_k P_k / sum_k P_k`, summed over cells. With several
//! adapters each adapter path adds its own term and its count joins the
//! denominator.

use serde::{Deserialize, Serialize};

use crate::cell::NfaCell;
use crate::diffcore::{Adam, BindMode, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Count charged to the frozen path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PfrPolicy {
    Zero,
    Constant(usize),
    /// Half the module size (floor).
    HalfFineTune,
}

impl PfrPolicy {
    pub fn frozen_count(self, module_count: usize) -> usize {
        match self {
            PfrPolicy::Zero => 0,
            PfrPolicy::Constant(c) => c,
            PfrPolicy::HalfFineTune => module_count / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub pfr_policy: PfrPolicy,
    pub lambda: f64,
    pub enabled: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { pfr_policy: PfrPolicy::HalfFineTune, lambda: 1.0, enabled: true }
    }
}

impl PenaltyConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("penalty lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

fn check_logits(graph: &Graph, logits: NodeId, labels: &[usize]) -> Result<usize> {
    let shape = graph.value(logits).shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape { op: "cross_entropy", shapes: vec![shape.to_vec(), vec![labels.len()]] });
    }
    let width = shape[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {width} classes")));
    }
    Ok(width)
}

/// Mean softmax cross-entropy over the batch.
pub fn cross_entropy(graph: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let width = check_logits(graph, logits, labels)?;
    let mut mask = Tensor::zeros(&[labels.len(), width]);
    for (i, &l) in labels.iter().enumerate() {
        mask.data_mut()[i * width + l] = 1.0;
    }
    let logp = graph.log_softmax(logits)?;
    let mask = graph.constant(mask)?;
    let picked = graph.mul(logp, mask)?;
    let total = graph.sum(picked)?;
    graph.scale(total, -1.0 / labels.len() as f64)
}

/// Final-task loss: cross-entropy on the last stage's logits only.
pub fn task_loss(graph: &mut Graph, final_logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    cross_entropy(graph, final_logits, labels)
}

/// Mean squared error.
pub fn mse(graph: &mut Graph, prediction: NodeId, target: NodeId) -> Result<NodeId> {
    let d = graph.sub(prediction, target)?;
    let sq = graph.mul(d, d)?;
    graph.mean(sq)
}

/// `P_k / sum P` for each path of one cell.
pub fn normalized_counts(counts: &[usize]) -> Result<Vec<f64>> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("penalty denominator is zero".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Differentiable penalty over all cells given each cell's weights node.
pub fn penalty(graph: &mut Graph, cells: &[NfaCell], weights: &[NodeId], cfg: &PenaltyConfig) -> Result<NodeId> {
    let counts: Vec<Vec<usize>> = cells.iter().map(|c| c.path_param_counts(cfg.pfr_policy)).collect();
    penalty_from_counts(graph, &counts, weights)
}

/// The penalty for explicit per-cell path counts, in path order.
pub fn penalty_from_counts(graph: &mut Graph, counts: &[Vec<usize>], weights: &[NodeId]) -> Result<NodeId> {
    if counts.len() != weights.len() || counts.is_empty() {
        return Err(Error::InvalidArgument(format!("{} cells but {} weight vectors", counts.len(), weights.len())));
    }
    let mut total: Option<NodeId> = None;
    for (c, &w) in counts.iter().zip(weights) {
        let coef = normalized_counts(c)?;
        if graph.value(w).shape() != [coef.len()] {
            return Err(Error::Shape {
                op: "penalty",
                shapes: vec![graph.value(w).shape().to_vec(), vec![coef.len()]],
            });
        }
        let coef = graph.constant(Tensor::vector(coef))?;
        let prod = graph.mul(w, coef)?;
        let term = graph.sum(prod)?;
        total = Some(match total {
            None => term,
            Some(acc) => graph.add(acc, term)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// `task + lambda * pen` when enabled, else `task`.
pub fn total_loss(graph: &mut Graph, task: NodeId, pen: NodeId, cfg: &PenaltyConfig) -> Result<NodeId> {
    if !cfg.enabled || cfg.lambda == 0.0 {
        return Ok(task);
    }
    let scaled = graph.scale(pen, cfg.lambda)?;
    graph.add(task, scaled)
}

/// Plain value of the penalty for fixed weights.
pub fn penalty_value(cells: &[NfaCell], weights: &[Vec<f64>], cfg: &PenaltyConfig) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = weights
        .iter()
        .map(|w| g.constant(Tensor::vector(w.clone())))
        .collect::<Result<Vec<_>>>()?;
    let p = penalty(&mut g, cells, &nodes, cfg)?;
    g.value(p).item()
}

/// Optimizes alpha against the penalty alone, with noise-free softmax
/// weights. Returns the penalty value after each step.
pub fn penalty_descent(cells: &mut [NfaCell], cfg: &PenaltyConfig, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut opt = Adam::new(lr);
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut g = Graph::new();
        let mut ws = Vec::with_capacity(cells.len());
        for cell in cells.iter() {
            let a = cell.bind_alpha(&mut g, BindMode::Trainable)?;
            ws.push(g.softmax(a)?);
        }
        let p = penalty(&mut g, cells, &ws, cfg)?;
        trace.push(g.value(p).item()?);
        g.backward(p)?;
        for cell in cells.iter_mut() {
            let set = cell.arch_params_mut();
            set.pull_grads(&g);
            opt.step(set)?;
            set.zero_grad();
        }
    }
    Ok(trace)
}
