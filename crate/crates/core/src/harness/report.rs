//! Architecture decisions, parameter accounting, and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{BindMode, Graph, Tensor};
use crate::error::{Error, Result};
use crate::objective::PenaltyConfig;
use crate::search::{EpochRecord, Stage, Supernet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellDecision {
    pub index: usize,
    pub module: String,
    /// `frozen`, `finetune`, or `adapter:<tag>`.
    pub choice: String,
    pub alpha: Vec<f64>,
    /// Penalty count of each path, keyed by path label.
    #[serde(rename = "P")]
    pub p: BTreeMap<String, usize>,
}

/// Alpha counts toward `train_params` and `total_params`, never toward
/// `selected_params`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Totals {
    pub total_params: usize,
    pub train_params: usize,
    pub selected_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDecision {
    pub cells: Vec<CellDecision>,
    pub totals: Totals,
    pub config_hash: String,
    pub seed: u64,
}

impl ArchitectureDecision {
    pub fn choices(&self) -> Vec<&str> {
        self.cells.iter().map(|c| c.choice.as_str()).collect()
    }

    pub fn finetuned_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.choice == "finetune").count()
    }
}

/// Totals for `scheme` from the supernet's parameter groups.
pub fn account_params(supernet: &Supernet, scheme: &[usize]) -> Result<Totals> {
    supernet.check_scheme(scheme)?;
    let pretrained: usize = supernet.cells.iter().map(|c| c.module().param_count()).sum();
    let train = supernet.network_count() + supernet.alpha_count();
    Ok(Totals { total_params: pretrained + train, train_params: train, selected_params: supernet.selected_params(scheme) })
}

/// Snapshot of the supernet's current discretization.
pub fn decide(supernet: &Supernet, penalty: &PenaltyConfig, config_hash: &str, seed: u64) -> Result<ArchitectureDecision> {
    let scheme = supernet.discretization();
    let cells = supernet
        .cells
        .iter()
        .zip(&scheme)
        .map(|(c, &k)| CellDecision {
            index: c.index,
            module: c.module().name.clone(),
            choice: c.path_label(c.paths()[k]),
            alpha: c.alpha().to_vec(),
            p: c.paths().iter().map(|&p| c.path_label(p)).zip(c.path_param_counts(penalty.pfr_policy)).collect(),
        })
        .collect();
    Ok(ArchitectureDecision {
        cells,
        totals: account_params(supernet, &scheme)?,
        config_hash: config_hash.to_string(),
        seed,
    })
}

/// Elements that receive a gradient when `scheme` is trained on inputs `x`.
pub fn reachable_params(supernet: &Supernet, scheme: &[usize], x: &Tensor) -> Result<usize> {
    let mut net = supernet.clone();
    let mut g = Graph::new();
    let input = g.constant(x.clone())?;
    let w = net.scheme_weights(&mut g, scheme)?;
    let out = net.forward(&mut g, input, &w, BindMode::Trainable)?;
    let loss = g.sum(out)?;
    g.backward(loss)?;
    let mut reached = 0;
    for cell in net.cells.iter_mut() {
        for set in cell.network_sets_mut() {
            set.pull_grads(&g);
            reached += set.iter().filter(|(_, p)| p.grad.is_some()).map(|(_, p)| p.value.numel()).sum::<usize>();
        }
    }
    Ok(reached)
}

/// Re-derives the totals from raw tensors and compares.
pub fn verify_totals(supernet: &Supernet, decision: &ArchitectureDecision) -> Result<()> {
    let numel = |sets: Vec<&crate::diffcore::ParameterSet>| -> usize {
        sets.iter().flat_map(|s| s.iter()).map(|(_, p)| p.value.numel()).sum()
    };
    let pretrained = numel(supernet.cells.iter().map(|c| c.module().pretrained()).collect());
    let network = numel(supernet.cells.iter().flat_map(|c| c.network_sets()).collect());
    let alpha = numel(supernet.cells.iter().map(|c| c.arch_params()).collect());
    let mut selected = 0;
    if decision.cells.len() != supernet.cells.len() {
        return Err(Error::InvalidArgument("decision and supernet disagree on cell count".into()));
    }
    for (d, c) in decision.cells.iter().zip(&supernet.cells) {
        let path = c
            .paths()
            .iter()
            .find(|&&p| c.path_label(p) == d.choice)
            .ok_or_else(|| Error::InvalidArgument(format!("cell {} has no path `{}`", d.index, d.choice)))?;
        selected += match path {
            crate::cell::PathKind::Frozen => 0,
            crate::cell::PathKind::FineTune => numel(c.finetune().into_iter().collect()),
            crate::cell::PathKind::Adapter(k) => numel(vec![&c.adapters()[*k].params]),
        };
    }
    let expect = Totals { total_params: pretrained + network + alpha, train_params: network + alpha, selected_params: selected };
    if expect != decision.totals || selected > expect.train_params {
        return Err(Error::InvalidArgument(format!("accounting mismatch: recount {expect:?}, decision {:?}", decision.totals)));
    }
    Ok(())
}

pub fn export_architecture(decision: &ArchitectureDecision, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(decision)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn import_architecture(path: &Path) -> Result<ArchitectureDecision> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub const METRICS_HEADER: [&str; 6] = ["epoch", "stage", "train_loss", "val_loss", "penalty", "selected_params"];

/// One row per epoch.
pub fn write_metrics(history: &[EpochRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(METRICS_HEADER)?;
    for r in history {
        let stage = match r.stage {
            Stage::One => "1",
            Stage::Two => "2",
        };
        w.write_record([
            r.epoch.to_string(),
            stage.to_string(),
            r.train_loss.to_string(),
            r.val_loss.to_string(),
            r.penalty.to_string(),
            r.selected_params.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-cell comparison of two decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionDiff {
    pub rows: Vec<(usize, String, String, String)>,
    pub totals: (Totals, Totals),
}

impl DecisionDiff {
    pub fn changed(&self) -> usize {
        self.rows.iter().filter(|r| r.2 != r.3).count()
    }
}

pub fn compare_decisions(a: &ArchitectureDecision, b: &ArchitectureDecision) -> Result<DecisionDiff> {
    if a.cells.len() != b.cells.len() || a.cells.iter().zip(&b.cells).any(|(x, y)| x.module != y.module) {
        return Err(Error::InvalidArgument("decisions describe different cascades".into()));
    }
    let rows = a
        .cells
        .iter()
        .zip(&b.cells)
        .map(|(x, y)| (x.index, x.module.clone(), x.choice.clone(), y.choice.clone()))
        .collect();
    Ok(DecisionDiff { rows, totals: (a.totals, b.totals) })
}

impl fmt::Display for DecisionDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>4}  {:<16} {:<14} {:<14}", "cell", "module", "a", "b")?;
        for (i, m, a, b) in &self.rows {
            let mark = if a == b { "" } else { "  *" };
            writeln!(f, "{i:>4}  {m:<16} {a:<14} {b:<14}{mark}")?;
        }
        let (ta, tb) = self.totals;
        writeln!(f, "total_params     {:>10} {:>10}", ta.total_params, tb.total_params)?;
        writeln!(f, "train_params     {:>10} {:>10}", ta.train_params, tb.train_params)?;
        writeln!(f, "selected_params  {:>10} {:>10}", ta.selected_params, tb.selected_params)?;
        write!(f, "{} of {} cells differ", self.changed(), self.rows.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{build_cascade, AdapterKind, CascadeSpec};
    use crate::cell::CellMode;

    fn toy() -> Supernet {
        let c = build_cascade(&CascadeSpec::toy(), 0).unwrap();
        Supernet::new(&c, CellMode::Nfa, &[AdapterKind::Bottleneck], 0).unwrap()
    }

    #[test]
    fn frozen_and_finetune_extremes() {
        let s = toy();
        assert_eq!(account_params(&s, &[0; 6]).unwrap().selected_params, 0);
        let ft = account_params(&s, &[1; 6]).unwrap();
        assert_eq!(ft.selected_params, 3128);
        // BA on width 16 is 148, on width 8 is 42; alpha adds 3 per cell.
        let network = 3128 + 5 * 148 + 42;
        assert_eq!(ft.train_params, network + 18);
        assert_eq!(ft.total_params, 3128 + network + 18);
    }

    #[test]
    fn untrained_decision_is_all_frozen_and_verifies() {
        let s = toy();
        let d = decide(&s, &PenaltyConfig::default(), "h", 3).unwrap();
        assert_eq!(d.cells.len(), 6);
        assert!(d.choices().iter().all(|c| *c == "frozen"));
        assert_eq!(d.totals.selected_params, 0);
        assert_eq!(d.cells[0].p["finetune"], 544);
        assert_eq!(d.cells[0].p["frozen"], 272);
        assert_eq!(d.cells[5].p["adapter:ba"], 42);
        verify_totals(&s, &d).unwrap();
        let mut bad = d.clone();
        bad.totals.selected_params += 1;
        assert!(verify_totals(&s, &bad).is_err());
    }

    #[test]
    fn export_import_round_trip_with_fixed_key_order() {
        let mut s = toy();
        s.cells[2].set_alpha(&[0.1, 0.7 / 3.0, -1e-17]).unwrap();
        let d = decide(&s, &PenaltyConfig::default(), "abc", 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        export_architecture(&d, &path).unwrap();
        assert_eq!(import_architecture(&path).unwrap(), d);
        let text = std::fs::read_to_string(&path).unwrap();
        let keys = ["\"cells\"", "\"totals\"", "\"config_hash\"", "\"seed\""];
        let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(text.matches("\"index\"").count(), 6);
    }

    #[test]
    fn export_to_missing_dir_names_path() {
        let d = decide(&toy(), &PenaltyConfig::default(), "", 0).unwrap();
        let err = export_architecture(&d, Path::new("/nonexistent/dir/a.json")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/dir/a.json"), "{err}");
    }

    #[test]
    fn compare_marks_changed_cells() {
        let mut s = toy();
        let a = decide(&s, &PenaltyConfig::default(), "", 0).unwrap();
        s.cells[1].set_alpha(&[0.0, 1.0, 0.0]).unwrap();
        let b = decide(&s, &PenaltyConfig::default(), "", 0).unwrap();
        let diff = compare_decisions(&a, &b).unwrap();
        assert_eq!(diff.changed(), 1);
        assert!(diff.to_string().contains("1 of 6 cells differ"));
    }
}
