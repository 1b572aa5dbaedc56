//! Shared helpers for integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use nfa_core::cascade::{build_cascade, Activation, AdapterKind, CascadeSpec, ModuleSpec, StageSpec};
use nfa_core::cell::{cell_forward, gumbel_softmax, CellMode, NfaCell};
use nfa_core::diffcore::{BindMode, Graph, NodeId, Tensor};
use nfa_core::harness::config::ExperimentConfig;
use nfa_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn readout(graph: &mut Graph, out: NodeId) -> Result<NodeId> {
    let shape = graph.value(out).shape().to_vec();
    let r = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(0xfeed), &shape, 1.0);
    let r = graph.constant(r)?;
    let prod = graph.mul(out, r)?;
    graph.sum(prod)
}

/// Scalar `sum(op(inputs) * R)` with a fixed random `R`.
pub fn eval_op(build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
    let out = build(&mut g, &ids).unwrap();
    let loss = readout(&mut g, out).unwrap();
    g.value(loss).item().unwrap()
}

pub fn analytic_op(build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>, inputs: &[Tensor]) -> Vec<Tensor> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> =
        inputs.iter().enumerate().map(|(i, t)| g.param(&format!("in{i}"), t).unwrap()).collect();
    let out = build(&mut g, &ids).unwrap();
    let loss = readout(&mut g, out).unwrap();
    g.backward(loss).unwrap();
    (0..inputs.len()).map(|i| g.param_grad(&format!("in{i}")).unwrap()).collect()
}

/// Largest relative error between analytic gradients of `build` and central
/// differences of `surrogate` (usually the same function).
pub fn gradcheck_op(
    build: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    surrogate: &dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    inputs: &[Tensor],
) -> f64 {
    let analytic = analytic_op(build, inputs);
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let n = (eval_op(surrogate, &plus) - eval_op(surrogate, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i].data()[j], n));
        }
    }
    worst
}

pub type OpBuilder = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v += 0.2 * v.signum();
    }
    t
}

fn positive(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        *v = 0.5 + v.abs();
    }
    t
}

pub struct OpCase {
    pub name: &'static str,
    pub op: OpBuilder,
    /// Differenced instead of `op` when set.
    pub surrogate: Option<OpBuilder>,
    pub inputs: Vec<Tensor>,
}

/// Every graph op with random inputs from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(&mut rng, shape, 1.0);
    let mut cases: Vec<OpCase> = Vec::new();
    let mut push = |name, op: OpBuilder, inputs: Vec<Tensor>| {
        cases.push(OpCase { name, op, surrogate: None, inputs });
    };
    push("matmul", Box::new(|g, x| g.matmul(x[0], x[1])), vec![r(&[3, 4]), r(&[4, 2])]);
    push("add", Box::new(|g, x| g.add(x[0], x[1])), vec![r(&[3, 4]), r(&[3, 4])]);
    push("add_row", Box::new(|g, x| g.add(x[0], x[1])), vec![r(&[3, 4]), r(&[4])]);
    push("add_scalar", Box::new(|g, x| g.add(x[0], x[1])), vec![r(&[3, 4]), r(&[])]);
    push("mul", Box::new(|g, x| g.mul(x[0], x[1])), vec![r(&[3, 4]), r(&[3, 4])]);
    push("mul_row", Box::new(|g, x| g.mul(x[0], x[1])), vec![r(&[3, 4]), r(&[1, 4])]);
    push("mul_scalar", Box::new(|g, x| g.mul(x[0], x[1])), vec![r(&[1]), r(&[3, 4])]);
    push("sub", Box::new(|g, x| g.sub(x[0], x[1])), vec![r(&[2, 5]), r(&[2, 5])]);
    push("relu", Box::new(|g, x| g.relu(x[0])), vec![away_from_zero(r(&[3, 4]))]);
    push("tanh", Box::new(|g, x| g.tanh(x[0])), vec![r(&[3, 4])]);
    push("sigmoid", Box::new(|g, x| g.sigmoid(x[0])), vec![r(&[3, 4])]);
    push("softmax_lastdim", Box::new(|g, x| g.softmax(x[0])), vec![r(&[3, 5])]);
    push("softmax_vector", Box::new(|g, x| g.softmax(x[0])), vec![r(&[4])]);
    push("log_softmax_lastdim", Box::new(|g, x| g.log_softmax(x[0])), vec![r(&[3, 5])]);
    push("log", Box::new(|g, x| g.log(x[0])), vec![positive(r(&[3, 4]))]);
    push("sum", Box::new(|g, x| g.sum(x[0])), vec![r(&[3, 4])]);
    push("mean", Box::new(|g, x| g.mean(x[0])), vec![r(&[3, 4])]);
    push("concat_lastdim", Box::new(|g, x| g.concat(&[x[0], x[1]])), vec![r(&[3, 2]), r(&[3, 3])]);
    push("scale", Box::new(|g, x| g.scale(x[0], -1.7)), vec![r(&[3, 4])]);
    push("pick", Box::new(|g, x| g.pick(x[0], 2)), vec![r(&[4])]);

    // Straight-through: the forward value is fixed, so its gradient is
    // checked against differences of the soft input it stands in for.
    let st: OpBuilder = Box::new(|g, x| {
        let soft = g.softmax(x[0])?;
        let k = argmax(g.value(soft).data());
        let mut hot = Tensor::zeros(g.value(soft).shape());
        hot.data_mut()[k] = 1.0;
        g.straight_through(soft, hot)
    });
    let soft: OpBuilder = Box::new(|g, x| g.softmax(x[0]));
    cases.push(OpCase { name: "straight_through", op: st, surrogate: Some(soft), inputs: vec![r(&[4])] });
    cases
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

/// A small single-module cascade for cell-level checks.
pub fn small_spec(width: usize) -> CascadeSpec {
    CascadeSpec {
        stages: vec![StageSpec {
            name: "s".into(),
            modules: vec![ModuleSpec {
                name: "m".into(),
                dims: vec![width, width + 1, width],
                hidden_activation: Activation::Tanh,
                output_activation: Activation::Tanh,
            }],
            softmax_output: false,
        }],
        labels: width,
    }
}

/// A cell whose network parameters are all random (adapter up-projections
/// included), so every gradient is generically nonzero.
pub fn random_cell(seed: u64, mode: CellMode, adapters: &[AdapterKind]) -> NfaCell {
    let cascade = build_cascade(&small_spec(5), seed).unwrap();
    let mut cell = NfaCell::new(0, &cascade.modules[0], mode, adapters, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for set in cell.network_sets_mut() {
        let names: Vec<String> = set.iter().map(|(n, _)| n.to_string()).collect();
        for n in names {
            let t = set.get_mut(&n).unwrap();
            *t = Tensor::randn(&mut rng, t.shape(), 0.5);
        }
    }
    let alpha = Tensor::randn(&mut rng, &[cell.num_paths()], 1.0).into_data();
    cell.set_alpha(&alpha).unwrap();
    cell
}

/// `sum(cell(x) * R)` under soft noise-free weights at temperature `tau`.
pub fn cell_loss(cell: &NfaCell, x: &Tensor, tau: f64, trainable: bool) -> (Graph, NodeId, NodeId) {
    let mode = if trainable { BindMode::Trainable } else { BindMode::Frozen };
    let mut g = Graph::new();
    let xin = if trainable { g.param("x", x).unwrap() } else { g.constant(x.clone()).unwrap() };
    let a = cell.bind_alpha(&mut g, mode).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = gumbel_softmax(&mut g, a, tau, &mut rng, false, false).unwrap();
    let out = cell_forward(&mut g, cell, xin, w.node, mode).unwrap();
    let loss = readout(&mut g, out).unwrap();
    (g, loss, xin)
}

/// Largest relative error over alpha, every network parameter, and x.
pub fn gradcheck_cell(cell: &NfaCell, x: &Tensor, tau: f64) -> f64 {
    let eval = |c: &NfaCell, x: &Tensor| {
        let (g, loss, _) = cell_loss(c, x, tau, false);
        g.value(loss).item().unwrap()
    };
    let (g, loss, _) = cell_loss(cell, x, tau, true);
    let mut g = g;
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;

    let mut analytic = cell.clone();
    analytic.arch_params_mut().pull_grads(&g);
    let ga = analytic.arch_params().grad("alpha").unwrap().clone();
    for j in 0..cell.num_paths() {
        let bump = |d: f64| {
            let mut c = cell.clone();
            let mut a = c.alpha().to_vec();
            a[j] += d;
            c.set_alpha(&a).unwrap();
            eval(&c, x)
        };
        let n = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(ga.data()[j], n));
    }

    for (si, set) in analytic.network_sets_mut().into_iter().enumerate() {
        set.pull_grads(&g);
        for (name, p) in set.iter() {
            let grad = p.grad.as_ref().expect("every path is live under soft weights");
            for j in 0..p.value.numel() {
                let bump = |d: f64| {
                    let mut c = cell.clone();
                    c.network_sets_mut()[si].get_mut(name).unwrap().data_mut()[j] += d;
                    eval(&c, x)
                };
                let n = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(grad.data()[j], n));
            }
        }
    }

    let gx = g.param_grad("x").unwrap();
    for j in 0..x.numel() {
        let bump = |d: f64| {
            let mut xx = x.clone();
            xx.data_mut()[j] += d;
            eval(cell, &xx)
        };
        let n = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(gx.data()[j], n));
    }
    worst
}

/// Worst gradcheck error over every op and cell variant for one seed.
pub fn gradcheck_seed(seed: u64) -> std::result::Result<f64, String> {
    let mut worst: f64 = 0.0;
    for case in op_cases(seed) {
        let e = gradcheck_op(case.op.as_ref(), case.surrogate.as_ref().unwrap_or(&case.op).as_ref(), &case.inputs);
        if !(e < 1e-4) {
            return Err(format!("op {} seed {seed}: rel err {e:e}", case.name));
        }
        worst = worst.max(e);
    }
    let x = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x55), &[3, 5], 1.0);
    let variants: [(&str, CellMode, &[AdapterKind]); 3] = [
        ("nfa[ba,ga]", CellMode::Nfa, &[AdapterKind::Bottleneck, AdapterKind::Gated]),
        ("na[ba]", CellMode::Na, &[AdapterKind::Bottleneck]),
        ("na[ga]", CellMode::Na, &[AdapterKind::Gated]),
    ];
    for (name, mode, adapters) in variants {
        let cell = random_cell(seed, mode, adapters);
        let e = gradcheck_cell(&cell, &x, 1.3);
        if !(e < 1e-4) {
            return Err(format!("cell {name} seed {seed}: rel err {e:e}"));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
