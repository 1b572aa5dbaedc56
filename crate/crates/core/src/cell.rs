//! The searchable unit wrapped around one pretrained module.
//!
//! An NFA cell offers the paths `[Frozen, FineTune, Adapter..]`; an NA cell
//! keeps the module frozen and offers `[Frozen (skip), Adapter]`. Each path
//! output is scaled by its architecture weight and the results are summed.
//! Frozen and adapter paths share one forward pass of the frozen module.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::cascade::{Adapter, AdapterKind, NetModule};
use crate::diffcore::{BindMode, Graph, NodeId, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::objective::PfrPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellMode {
    /// Frozen module with a skip-or-adapter choice.
    Na,
    /// Frozen, fine-tune, or one of the adapters.
    Nfa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    Frozen,
    FineTune,
    /// Index into the cell's adapter list.
    Adapter(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NfaCell {
    pub index: usize,
    pub mode: CellMode,
    module: NetModule,
    paths: Vec<PathKind>,
    finetune: Option<ParameterSet>,
    adapters: Vec<Adapter>,
    alpha: ParameterSet,
}

const ALPHA: &str = "alpha";

impl NfaCell {
    /// Wraps `module`. Adapter weights are drawn from `seed`; alpha starts at
    /// zero, so an untrained cell discretizes to Frozen.
    pub fn new(index: usize, module: &NetModule, mode: CellMode, adapters: &[AdapterKind], seed: u64) -> Result<Self> {
        if adapters.is_empty() {
            return Err(Error::Config(format!("cell {index} needs at least one adapter candidate")));
        }
        if mode == CellMode::Na && adapters.len() != 1 {
            return Err(Error::Config("NA cells take exactly one adapter".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let adapters = adapters
            .iter()
            .enumerate()
            .map(|(k, &kind)| Adapter::new(kind, module.out_dim(), format!("cell{index}.ad{k}"), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (paths, finetune) = match mode {
            CellMode::Nfa => {
                let mut p = vec![PathKind::Frozen, PathKind::FineTune];
                p.extend((0..adapters.len()).map(PathKind::Adapter));
                (p, Some(module.pretrained().rescoped(format!("cell{index}.ft"))))
            }
            CellMode::Na => (vec![PathKind::Frozen, PathKind::Adapter(0)], None),
        };
        let mut alpha = ParameterSet::new(format!("cell{index}.arch"));
        alpha.insert(ALPHA, Tensor::zeros(&[paths.len()]))?;
        Ok(Self { index, mode, module: module.clone(), paths, finetune, adapters, alpha })
    }

    pub fn module(&self) -> &NetModule {
        &self.module
    }

    pub fn paths(&self) -> &[PathKind] {
        &self.paths
    }

    pub fn num_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    pub fn finetune(&self) -> Option<&ParameterSet> {
        self.finetune.as_ref()
    }

    pub fn alpha(&self) -> &[f64] {
        self.alpha.get(ALPHA).expect("alpha entry").data()
    }

    pub fn set_alpha(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.paths.len() {
            return Err(Error::InvalidArgument(format!(
                "cell {} has {} paths, got {} logits",
                self.index,
                self.paths.len(),
                values.len()
            )));
        }
        *self.alpha.get_mut(ALPHA).expect("alpha entry") = Tensor::vector(values.to_vec());
        Ok(())
    }

    pub fn arch_params(&self) -> &ParameterSet {
        &self.alpha
    }

    pub fn arch_params_mut(&mut self) -> &mut ParameterSet {
        &mut self.alpha
    }

    pub fn bind_alpha(&self, graph: &mut Graph, mode: BindMode) -> Result<NodeId> {
        self.alpha.bind(graph, ALPHA, mode)
    }

    /// Fine-tune copy and adapter weights: the network-parameter group.
    pub fn network_sets(&self) -> Vec<&ParameterSet> {
        self.finetune.iter().chain(self.adapters.iter().map(|a| &a.params)).collect()
    }

    pub fn network_sets_mut(&mut self) -> Vec<&mut ParameterSet> {
        self.finetune.iter_mut().chain(self.adapters.iter_mut().map(|a| &mut a.params)).collect()
    }

    /// Alpha and the network sets, borrowed mutably together.
    pub fn sets_mut(&mut self) -> (&mut ParameterSet, Vec<&mut ParameterSet>) {
        let net = self.finetune.iter_mut().chain(self.adapters.iter_mut().map(|a| &mut a.params)).collect();
        (&mut self.alpha, net)
    }

    pub fn network_count(&self) -> usize {
        self.network_sets().iter().map(|s| s.count()).sum()
    }

    pub fn network_checksum(&self) -> u64 {
        self.network_sets().iter().fold(0, |h, s| h.rotate_left(11) ^ s.checksum())
    }

    /// Trainable elements each path would update: Frozen 0, FineTune the
    /// module size, Adapter the adapter size.
    pub fn trainable_counts(&self) -> Vec<usize> {
        self.paths.iter().map(|p| self.trainable_count(*p)).collect()
    }

    pub fn trainable_count(&self, path: PathKind) -> usize {
        match path {
            PathKind::Frozen => 0,
            PathKind::FineTune => self.module.param_count(),
            PathKind::Adapter(k) => self.adapters[k].param_count(),
        }
    }

    /// Per-path counts entering the parameter penalty; the frozen path gets
    /// its count from `policy`.
    pub fn path_param_counts(&self, policy: PfrPolicy) -> Vec<usize> {
        let frozen = policy.frozen_count(self.module.param_count());
        self.paths
            .iter()
            .map(|&p| if p == PathKind::Frozen { frozen } else { self.trainable_count(p) })
            .collect()
    }

    pub fn path_label(&self, path: PathKind) -> String {
        match path {
            PathKind::Frozen => "frozen".to_string(),
            PathKind::FineTune => "finetune".to_string(),
            PathKind::Adapter(k) => format!("adapter:{}", self.adapters[k].kind.tag()),
        }
    }

    pub fn path_index(&self, path: PathKind) -> Option<usize> {
        self.paths.iter().position(|&p| p == path)
    }
}

/// Per-path mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PathWeights {
    pub weights: Vec<f64>,
    pub hard: bool,
}

impl PathWeights {
    pub fn one_hot(k: usize, n: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[k] = 1.0;
        Self { weights, hard: true }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights {:?} are not on the simplex", self.weights)));
        }
        if self.hard && self.weights.iter().filter(|&&w| w == 1.0).count() != 1 {
            return Err(Error::InvalidArgument("hard weights must be one-hot".into()));
        }
        Ok(())
    }

    /// Constant node carrying these weights.
    pub fn constant(&self, graph: &mut Graph) -> Result<NodeId> {
        graph.constant(Tensor::vector(self.weights.clone()))
    }
}

/// Weights node plus its plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledWeights {
    pub node: NodeId,
    pub weights: PathWeights,
}

/// `softmax((alpha + g) / tau)` with `g ~ Gumbel(0, 1)` when `noise`.
/// With `hard`, the forward value is the one-hot argmax and gradients
/// flow as if soft.
pub fn gumbel_softmax<R: Rng + ?Sized>(
    graph: &mut Graph,
    alpha: NodeId,
    tau: f64,
    rng: &mut R,
    hard: bool,
    noise: bool,
) -> Result<SampledWeights> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {tau} must be positive")));
    }
    let n = graph.value(alpha).numel();
    let mut logits = alpha;
    if noise {
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
        let g: Vec<f64> = (0..n).map(|_| gumbel.sample(rng)).collect();
        let g = graph.constant(Tensor::vector(g))?;
        logits = graph.add(logits, g)?;
    }
    let scaled = graph.scale(logits, 1.0 / tau)?;
    let soft = graph.softmax(scaled)?;
    if !hard {
        let weights = graph.value(soft).data().to_vec();
        return Ok(SampledWeights { node: soft, weights: PathWeights { weights, hard: false } });
    }
    let k = argmax(graph.value(soft).data());
    let one_hot = PathWeights::one_hot(k, n);
    let node = graph.straight_through(soft, Tensor::vector(one_hot.weights.clone()))?;
    Ok(SampledWeights { node, weights: one_hot })
}

/// First index of the maximum.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Weighted sum of path outputs. With constant weights, zero-weight paths
/// are skipped; they contribute nothing to value or gradient.
pub fn cell_forward(
    graph: &mut Graph,
    cell: &NfaCell,
    x: NodeId,
    weights: NodeId,
    network: BindMode,
) -> Result<NodeId> {
    let wv = graph.value(weights);
    if wv.rank() != 1 || wv.numel() != cell.num_paths() {
        return Err(Error::InvalidArgument(format!(
            "cell {} has {} paths, weights have shape {:?}",
            cell.index,
            cell.num_paths(),
            wv.shape()
        )));
    }
    let skip_zero = !graph.requires_grad(weights);
    let wvals = wv.data().to_vec();
    let needs_backbone = cell
        .paths
        .iter()
        .zip(&wvals)
        .any(|(p, &w)| *p != PathKind::FineTune && !(skip_zero && w == 0.0));
    let backbone = if needs_backbone { Some(cell.module.forward_frozen(graph, x)?) } else { None };

    let mut out: Option<NodeId> = None;
    for (k, &path) in cell.paths.iter().enumerate() {
        if skip_zero && wvals[k] == 0.0 {
            continue;
        }
        let y = match path {
            PathKind::Frozen => backbone.expect("backbone computed"),
            PathKind::FineTune => {
                let ft = cell.finetune.as_ref().expect("NFA cell has a fine-tune copy");
                cell.module.forward_with(graph, ft, network, x)?
            }
            PathKind::Adapter(a) => cell.adapters[a].forward(graph, backbone.expect("backbone computed"), network)?,
        };
        let y = if skip_zero && wvals[k] == 1.0 {
            y
        } else {
            let w = graph.pick(weights, k)?;
            graph.mul(w, y)?
        };
        out = Some(match out {
            None => y,
            Some(acc) => graph.add(acc, y)?,
        });
    }
    out.ok_or_else(|| Error::InvalidArgument(format!("cell {} got all-zero weights", cell.index)))
}

/// Argmax over alpha; ties go to the path with the fewest trainable
/// parameters, then to the earlier path.
pub fn discretize(cell: &NfaCell) -> PathKind {
    cell.paths[discretize_index(cell)]
}

pub fn discretize_index(cell: &NfaCell) -> usize {
    let alpha = cell.alpha();
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..cell.num_paths())
        .filter(|&k| alpha[k] == max)
        .min_by_key(|&k| (cell.trainable_count(cell.paths[k]), k))
        .expect("cell has paths")
}

/// Union of the network-parameter group (fine-tune copy and adapters)
/// under scope `cell{i}.net`. Alpha is reported separately by
/// [`NfaCell::arch_params`].
pub fn cell_trainable_params(cell: &NfaCell) -> Result<ParameterSet> {
    let mut out = ParameterSet::new(format!("cell{}.net", cell.index));
    for set in cell.network_sets() {
        let prefix = set.scope().rsplit('.').next().unwrap_or(set.scope()).to_string();
        for (name, p) in set.iter() {
            out.insert(format!("{prefix}.{name}"), p.value.clone())?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{build_cascade, CascadeSpec};

    fn module() -> NetModule {
        build_cascade(&CascadeSpec::toy(), 7).unwrap().modules[0].clone()
    }

    fn nfa(alpha: &[f64]) -> NfaCell {
        let mut c = NfaCell::new(0, &module(), CellMode::Nfa, &[AdapterKind::Bottleneck], 1).unwrap();
        c.set_alpha(alpha).unwrap();
        c
    }

    #[test]
    fn path_layouts() {
        let m = module();
        let c = NfaCell::new(0, &m, CellMode::Nfa, &[AdapterKind::Bottleneck, AdapterKind::Gated], 0).unwrap();
        assert_eq!(c.paths(), &[PathKind::Frozen, PathKind::FineTune, PathKind::Adapter(0), PathKind::Adapter(1)]);
        assert_eq!(c.finetune().unwrap().iter().count(), m.pretrained().iter().count());
        for ((_, a), (_, b)) in c.finetune().unwrap().iter().zip(m.pretrained().iter()) {
            assert_eq!(a.value.checksum(), b.value.checksum());
        }
        let na = NfaCell::new(0, &m, CellMode::Na, &[AdapterKind::Bottleneck], 0).unwrap();
        assert_eq!(na.paths(), &[PathKind::Frozen, PathKind::Adapter(0)]);
        assert!(NfaCell::new(0, &m, CellMode::Na, &[], 0).is_err());
    }

    #[test]
    fn symmetric_logits_give_uniform_weights() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0; 3])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = gumbel_softmax(&mut g, a, 1.0, &mut rng, false, false).unwrap();
        assert_eq!(w.weights.weights, vec![1.0 / 3.0; 3]);
        w.weights.validate().unwrap();
    }

    #[test]
    fn dominant_logit_hard() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![10.0, 0.0, 0.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = gumbel_softmax(&mut g, a, 1.0, &mut rng, true, false).unwrap();
        assert_eq!(w.weights.weights, vec![1.0, 0.0, 0.0]);
        assert_eq!(g.value(w.node).data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0; 2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(gumbel_softmax(&mut g, a, 0.0, &mut rng, false, true).is_err());
        assert!(gumbel_softmax(&mut g, a, -1.0, &mut rng, false, true).is_err());
    }

    #[test]
    fn discretize_examples() {
        assert_eq!(discretize(&nfa(&[2.0, 1.0, 0.5])), PathKind::Frozen);
        assert_eq!(discretize(&nfa(&[0.0, 0.0, 0.0])), PathKind::Frozen);
        assert_eq!(discretize(&nfa(&[0.0, 0.1, 3.0])), PathKind::Adapter(0));
        // FineTune / Adapter tie: the adapter is smaller.
        assert_eq!(discretize(&nfa(&[0.0, 1.0, 1.0])), PathKind::Adapter(0));
    }

    fn run_cell(cell: &NfaCell, x: &Tensor, w: &[f64]) -> Tensor {
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let wn = g.constant(Tensor::vector(w.to_vec())).unwrap();
        let y = cell_forward(&mut g, cell, xn, wn, BindMode::Trainable).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn one_hot_selection() {
        let c = nfa(&[0.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&mut rng, &[5, 16], 1.0);
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let reference = c.module().forward_frozen(&mut g, xn).unwrap();
        let reference = g.value(reference).clone();
        assert_eq!(run_cell(&c, &x, &[1.0, 0.0, 0.0]), reference);
        assert_eq!(run_cell(&c, &x, &[0.0, 1.0, 0.0]), reference);
        // Zero-init bottleneck adapter is the identity on the backbone output.
        assert_eq!(run_cell(&c, &x, &[0.0, 0.0, 1.0]), reference);
    }

    #[test]
    fn na_half_half_with_fresh_adapter() {
        let c = NfaCell::new(0, &module(), CellMode::Na, &[AdapterKind::Bottleneck], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&mut rng, &[3, 16], 1.0);
        let mut g = Graph::new();
        let xn = g.constant(x.clone()).unwrap();
        let m = c.module().forward_frozen(&mut g, xn).unwrap();
        let out = run_cell(&c, &x, &[0.5, 0.5]);
        for (a, b) in out.data().iter().zip(g.value(m).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_length_mismatch_rejected() {
        let c = nfa(&[0.0; 3]);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 16])).unwrap();
        let w = g.constant(Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert!(cell_forward(&mut g, &c, x, w, BindMode::Trainable).is_err());
    }

    #[test]
    fn network_group_counts() {
        let m = module();
        assert_eq!(m.param_count(), 544);
        let c = NfaCell::new(0, &m, CellMode::Nfa, &[AdapterKind::Bottleneck], 0).unwrap();
        assert_eq!(cell_trainable_params(&c).unwrap().count(), 692);
        let na = NfaCell::new(0, &m, CellMode::Na, &[AdapterKind::Bottleneck], 0).unwrap();
        assert_eq!(cell_trainable_params(&na).unwrap().count(), 148);
        let two = NfaCell::new(0, &m, CellMode::Nfa, &[AdapterKind::Bottleneck, AdapterKind::Gated], 0).unwrap();
        assert_eq!(cell_trainable_params(&two).unwrap().count(), 544 + 148 + 544);
        assert_eq!(two.alpha().len(), 4);
    }
}
