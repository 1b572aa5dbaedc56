//! Toy cascaded model: stages of dense modules, adapter blocks, and
//! pretraining of the upstream stages.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, BindMode, Graph, NodeId, ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::objective::{cross_entropy, mse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => graph.tanh(x),
            Activation::Relu => graph.relu(x),
            Activation::Sigmoid => graph.sigmoid(x),
        }
    }
}

fn tanh_act() -> Activation {
    Activation::Tanh
}

fn identity_act() -> Activation {
    Activation::Identity
}

/// One searchable unit: `dims = [in, hidden.., out]`, one affine layer per
/// consecutive pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub name: String,
    pub dims: Vec<usize>,
    #[serde(default = "tanh_act")]
    pub hidden_activation: Activation,
    #[serde(default = "identity_act")]
    pub output_activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub modules: Vec<ModuleSpec>,
    /// Apply softmax to the stage output before it reaches the next stage.
    #[serde(default)]
    pub softmax_output: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeSpec {
    pub stages: Vec<StageSpec>,
    /// Width of the final-task logits.
    pub labels: usize,
}

fn module(name: &str, dims: &[usize], out: Activation) -> ModuleSpec {
    ModuleSpec {
        name: name.to_string(),
        dims: dims.to_vec(),
        hidden_activation: Activation::Tanh,
        output_activation: out,
    }
}

impl CascadeSpec {
    /// Denoiser -> recognizer -> labeler, two modules per stage, width 16,
    /// eight labels.
    pub fn toy() -> Self {
        use Activation::*;
        Self {
            stages: vec![
                StageSpec {
                    name: "denoise".into(),
                    modules: vec![module("denoise.0", &[16, 16, 16], Tanh), module("denoise.1", &[16, 16, 16], Identity)],
                    softmax_output: false,
                },
                StageSpec {
                    name: "recognize".into(),
                    modules: vec![
                        module("recognize.0", &[16, 16, 16], Tanh),
                        module("recognize.1", &[16, 16, 16], Identity),
                    ],
                    softmax_output: true,
                },
                StageSpec {
                    name: "label".into(),
                    modules: vec![module("label.0", &[16, 16, 16], Tanh), module("label.1", &[16, 16, 8], Identity)],
                    softmax_output: false,
                },
            ],
            labels: 8,
        }
    }

    /// One module per stage; 27 schemes with a single adapter type.
    pub fn three_cell() -> Self {
        use Activation::*;
        Self {
            stages: vec![
                StageSpec {
                    name: "denoise".into(),
                    modules: vec![module("denoise.0", &[16, 16, 16], Identity)],
                    softmax_output: false,
                },
                StageSpec {
                    name: "recognize".into(),
                    modules: vec![module("recognize.0", &[16, 16, 16], Identity)],
                    softmax_output: true,
                },
                StageSpec {
                    name: "label".into(),
                    modules: vec![module("label.0", &[16, 16, 8], Identity)],
                    softmax_output: false,
                },
            ],
            labels: 8,
        }
    }

    pub fn module_count(&self) -> usize {
        self.stages.iter().map(|s| s.modules.len()).sum()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.stages.first()?.modules.first()?.dims.first().copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.modules.is_empty()) {
            return Err(Error::Config("every stage needs at least one module".into()));
        }
        let mut prev: Option<(&str, usize)> = None;
        let mut names = std::collections::HashSet::new();
        for m in self.stages.iter().flat_map(|s| &s.modules) {
            if m.dims.len() < 2 || m.dims.contains(&0) {
                return Err(Error::Config(format!("module `{}` needs >= 2 positive dims", m.name)));
            }
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate module name `{}`", m.name)));
            }
            if let Some((pname, pout)) = prev {
                if pout != m.dims[0] {
                    return Err(Error::Config(format!(
                        "`{pname}` emits width {pout} but `{}` expects {}",
                        m.name, m.dims[0]
                    )));
                }
            }
            prev = Some((&m.name, *m.dims.last().unwrap()));
        }
        let out = prev.map(|p| p.1).unwrap_or(0);
        if out != self.labels {
            return Err(Error::Config(format!("final width {out} != label count {}", self.labels)));
        }
        Ok(())
    }
}

/// A parameterized block of affine+nonlinearity layers with a pretrained
/// snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct NetModule {
    pub name: String,
    pub stage: usize,
    pub dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    pretrained: ParameterSet,
    frozen: bool,
}

impl NetModule {
    fn init<R: Rng + ?Sized>(spec: &ModuleSpec, stage: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParameterSet::new(format!("pre.{}", spec.name));
        for (l, pair) in spec.dims.windows(2).enumerate() {
            let std = 1.0 / (pair[0] as f64).sqrt();
            params.insert(format!("w{l}"), Tensor::randn(rng, &[pair[0], pair[1]], std))?;
            params.insert(format!("b{l}"), Tensor::zeros(&[pair[1]]))?;
        }
        Ok(Self {
            name: spec.name.clone(),
            stage,
            dims: spec.dims.clone(),
            hidden_activation: spec.hidden_activation,
            output_activation: spec.output_activation,
            pretrained: params,
            frozen: false,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn pretrained(&self) -> &ParameterSet {
        &self.pretrained
    }

    pub fn param_count(&self) -> usize {
        self.pretrained.count()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the snapshot immutable.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Forward with an arbitrary weight set laid out like the snapshot (the
    /// snapshot itself, or a fine-tune copy).
    pub fn forward_with(&self, graph: &mut Graph, params: &ParameterSet, mode: BindMode, x: NodeId) -> Result<NodeId> {
        if graph.value(x).last_dim() != self.in_dim() {
            return Err(Error::Shape {
                op: "module_forward",
                shapes: vec![graph.value(x).shape().to_vec(), vec![self.in_dim()]],
            });
        }
        let mut h = x;
        for l in 0..self.layers() {
            let w = params.bind(graph, &format!("w{l}"), mode)?;
            let b = params.bind(graph, &format!("b{l}"), mode)?;
            let z = graph.matmul(h, w)?;
            let z = graph.add(z, b)?;
            let act = if l + 1 == self.layers() { self.output_activation } else { self.hidden_activation };
            h = act.apply(graph, z)?;
        }
        Ok(h)
    }

    /// Forward through the pretrained snapshot, no gradient into it.
    pub fn forward_frozen(&self, graph: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.forward_with(graph, &self.pretrained, BindMode::Frozen, x)
    }
}

/// Modules in cascade order plus stage boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Cascade {
    pub modules: Vec<NetModule>,
    /// Per stage: whether its output is softmaxed before the next stage.
    pub stage_softmax: Vec<bool>,
    pub labels: usize,
}

impl Cascade {
    pub fn stages(&self) -> usize {
        self.stage_softmax.len()
    }

    /// Index of the last module of each stage.
    pub fn stage_ends(&self) -> Vec<usize> {
        let mut ends = vec![0; self.stages()];
        for (i, m) in self.modules.iter().enumerate() {
            ends[m.stage] = i;
        }
        ends
    }

    pub fn modules_of_stage(&self, stage: usize) -> impl Iterator<Item = &NetModule> {
        self.modules.iter().filter(move |m| m.stage == stage)
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(NetModule::param_count).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.modules.iter().fold(0u64, |h, m| h.rotate_left(7) ^ m.pretrained.checksum())
    }

    /// Frozen forward through stages `0..upto`, stage softmax included.
    pub fn forward_stages(&self, graph: &mut Graph, x: NodeId, upto: usize) -> Result<NodeId> {
        let mut h = x;
        for stage in 0..upto {
            for m in self.modules_of_stage(stage) {
                h = m.forward_frozen(graph, h)?;
            }
            if self.stage_softmax[stage] {
                h = graph.softmax(h)?;
            }
        }
        Ok(h)
    }
}

/// Builds the cascade with seeded random weights.
pub fn build_cascade(spec: &CascadeSpec, seed: u64) -> Result<Cascade> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modules = Vec::with_capacity(spec.module_count());
    for (s, stage) in spec.stages.iter().enumerate() {
        for m in &stage.modules {
            modules.push(NetModule::init(m, s, &mut rng)?);
        }
    }
    Ok(Cascade {
        modules,
        stage_softmax: spec.stages.iter().map(|s| s.softmax_output).collect(),
        labels: spec.labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 5e-3, batch_size: 32 }
    }
}

/// What each upstream stage is pretrained to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainTask {
    /// Regress the clean signal.
    Denoise,
    /// Classify the intermediate class from the stage logits.
    Recognize,
}

/// The last stage is left at random init; the stage before it learns the
/// intermediate classification, earlier stages learn denoising.
pub fn pretrain_task(cascade: &Cascade, stage: usize) -> Option<PretrainTask> {
    let n = cascade.stages();
    if stage + 1 >= n {
        None
    } else if stage + 2 == n {
        Some(PretrainTask::Recognize)
    } else {
        Some(PretrainTask::Denoise)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StagePretrainReport {
    pub stage: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

fn stage_loss(
    cascade: &Cascade,
    stage: usize,
    task: PretrainTask,
    data: &Dataset,
    idx: &[usize],
    live: Option<&mut [ParameterSet]>,
) -> Result<(Graph, NodeId)> {
    let mut g = Graph::new();
    let x = g.constant(data.inputs(idx))?;
    let mut h = cascade.forward_stages(&mut g, x, stage)?;
    let mods: Vec<&NetModule> = cascade.modules_of_stage(stage).collect();
    for (k, m) in mods.iter().enumerate() {
        h = match &live {
            Some(sets) => m.forward_with(&mut g, &sets[k], BindMode::Trainable, h)?,
            None => m.forward_frozen(&mut g, h)?,
        };
    }
    let loss = match task {
        PretrainTask::Denoise => {
            if g.value(h).last_dim() != data.dim {
                return Err(Error::Config(format!("denoising stage {stage} must emit width {}", data.dim)));
            }
            let target = g.constant(data.clean(idx))?;
            mse(&mut g, h, target)?
        }
        PretrainTask::Recognize => {
            if g.value(h).last_dim() != data.intermediate_classes {
                return Err(Error::Config(format!(
                    "recognition stage {stage} must emit {} logits",
                    data.intermediate_classes
                )));
            }
            cross_entropy(&mut g, h, &data.intermediates_of(idx))?
        }
    };
    Ok((g, loss))
}

/// Loss of a stage's pretraining objective on `data` with current weights.
pub fn pretrain_objective(cascade: &Cascade, stage: usize, data: &Dataset) -> Result<f64> {
    let task = pretrain_task(cascade, stage)
        .ok_or_else(|| Error::InvalidArgument(format!("stage {stage} has no pretraining objective")))?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (g, loss) = stage_loss(cascade, stage, task, data, &idx, None)?;
    g.value(loss).item()
}

/// Trains upstream stages in order on source-domain data, then freezes
/// every module snapshot.
pub fn pretrain_upstream(
    cascade: &mut Cascade,
    source: &Dataset,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<Vec<StagePretrainReport>> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("pretraining data is empty".into()));
    }
    if cascade.modules.iter().any(NetModule::is_frozen) {
        return Err(Error::InvalidArgument("cascade snapshots are already frozen".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0070_7265_7472_6169);
    let all: Vec<usize> = (0..source.len()).collect();
    let mut reports = Vec::new();
    for stage in 0..cascade.stages() {
        let Some(task) = pretrain_task(cascade, stage) else { continue };
        let loss_before = pretrain_objective(cascade, stage, source)?;
        let positions: Vec<usize> =
            cascade.modules.iter().enumerate().filter(|(_, m)| m.stage == stage).map(|(i, _)| i).collect();
        let mut sets: Vec<ParameterSet> = positions.iter().map(|&i| cascade.modules[i].pretrained.clone()).collect();
        let mut opt = Adam::new(cfg.lr);
        let mut order = all.clone();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                let (mut g, loss) = stage_loss(cascade, stage, task, source, batch, Some(&mut sets))?;
                g.backward(loss)?;
                for set in sets.iter_mut() {
                    set.pull_grads(&g);
                    opt.step(set)?;
                    set.zero_grad();
                }
            }
        }
        for (&i, set) in positions.iter().zip(sets) {
            cascade.modules[i].pretrained = set;
        }
        let loss_after = pretrain_objective(cascade, stage, source)?;
        reports.push(StagePretrainReport { stage, loss_before, loss_after });
    }
    for m in &mut cascade.modules {
        m.freeze();
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AdapterKind {
    #[serde(rename = "ba")]
    Bottleneck,
    #[serde(rename = "ga")]
    Gated,
}

impl AdapterKind {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterKind::Bottleneck => "ba",
            AdapterKind::Gated => "ga",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "ba" => Some(AdapterKind::Bottleneck),
            "ga" => Some(AdapterKind::Gated),
            _ => None,
        }
    }

    /// Closed-form trainable count on width `dim`.
    pub fn param_count(self, dim: usize) -> usize {
        match self {
            AdapterKind::Bottleneck => {
                let h = bottleneck_width(dim);
                dim * h + h + h * dim + dim
            }
            AdapterKind::Gated => 2 * (dim * dim + dim),
        }
    }
}

/// Quarter of the input width, rounded up.
pub fn bottleneck_width(dim: usize) -> usize {
    dim.div_ceil(4)
}

/// Shape-preserving adapter placed after a module.
///
/// Bottleneck: `x + up(tanh(down(x)))` with a zero-initialized up
/// projection. Gated: `g * x + (1 - g) * expand(x)` with
/// `g = sigmoid(gate(x))` and `expand` initialized to the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub kind: AdapterKind,
    pub dim: usize,
    pub params: ParameterSet,
}

impl Adapter {
    pub fn new<R: Rng + ?Sized>(kind: AdapterKind, dim: usize, scope: impl Into<String>, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("adapter width must be positive".into()));
        }
        let mut params = ParameterSet::new(scope);
        let std = 1.0 / (dim as f64).sqrt();
        match kind {
            AdapterKind::Bottleneck => {
                let h = bottleneck_width(dim);
                params.insert("down.w", Tensor::randn(rng, &[dim, h], std))?;
                params.insert("down.b", Tensor::zeros(&[h]))?;
                params.insert("up.w", Tensor::zeros(&[h, dim]))?;
                params.insert("up.b", Tensor::zeros(&[dim]))?;
            }
            AdapterKind::Gated => {
                params.insert("gate.w", Tensor::randn(rng, &[dim, dim], std))?;
                params.insert("gate.b", Tensor::zeros(&[dim]))?;
                params.insert("expand.w", Tensor::identity(dim))?;
                params.insert("expand.b", Tensor::zeros(&[dim]))?;
            }
        }
        Ok(Self { kind, dim, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn forward(&self, graph: &mut Graph, x: NodeId, mode: BindMode) -> Result<NodeId> {
        adapter_forward(graph, self, x, mode)
    }
}

pub fn adapter_forward(graph: &mut Graph, adapter: &Adapter, x: NodeId, mode: BindMode) -> Result<NodeId> {
    if graph.value(x).last_dim() != adapter.dim {
        return Err(Error::Shape {
            op: "adapter_forward",
            shapes: vec![graph.value(x).shape().to_vec(), vec![adapter.dim]],
        });
    }
    let p = &adapter.params;
    let affine = |g: &mut Graph, input: NodeId, name: &str| -> Result<NodeId> {
        let w = p.bind(g, &format!("{name}.w"), mode)?;
        let b = p.bind(g, &format!("{name}.b"), mode)?;
        let z = g.matmul(input, w)?;
        g.add(z, b)
    };
    match adapter.kind {
        AdapterKind::Bottleneck => {
            let d = affine(graph, x, "down")?;
            let h = graph.tanh(d)?;
            let u = affine(graph, h, "up")?;
            graph.add(x, u)
        }
        AdapterKind::Gated => {
            let gz = affine(graph, x, "gate")?;
            let gate = graph.sigmoid(gz)?;
            let e = affine(graph, x, "expand")?;
            // g*x + (1-g)*e  ==  e + g*(x - e)
            let diff = graph.sub(x, e)?;
            let gated = graph.mul(gate, diff)?;
            graph.add(e, gated)
        }
    }
}

/// Exact scalar element count.
pub fn param_count(params: &ParameterSet) -> usize {
    params.count()
}
