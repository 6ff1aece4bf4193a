//! Run directories: what a training run leaves on disk, and the summary table
//! built from many of them.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{TrainConfig, Variant};
use crate::models::Arch;
use crate::trainer::{Metrics, NodeLossRow, ProbeRow, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed metrics: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("no run directories given")]
    NoRuns,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub arch_phi: Arch,
    pub arch_psi: Arch,
    pub test_f1_phi: f64,
    pub test_f1_psi: f64,
    pub val_f1_phi: f64,
    pub val_f1_psi: f64,
    pub best_epoch: usize,
    pub best_epoch_phi: usize,
    pub best_epoch_psi: usize,
    pub epochs_run: usize,
    /// Scores are from the checkpoint with the best validation F1.
    pub checkpoint: String,
    pub config: TrainConfig,
}

impl RunSummary {
    pub fn new(config: &TrainConfig, metrics: &Metrics) -> Self {
        Self {
            variant: config.variant,
            arch_phi: config.arch_phi,
            arch_psi: config.arch_psi,
            test_f1_phi: metrics.test_f1_phi,
            test_f1_psi: metrics.test_f1_psi,
            val_f1_phi: metrics.val_f1_phi,
            val_f1_psi: metrics.val_f1_psi,
            best_epoch: metrics.best_epoch,
            best_epoch_phi: metrics.best_epoch_phi,
            best_epoch_psi: metrics.best_epoch_psi,
            epochs_run: metrics.epochs.len(),
            checkpoint: "best_validation".into(),
            config: config.clone(),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(io_err(path))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curves_csv(metrics: &Metrics) -> String {
    let mut s = String::from("epoch,loss_phi,loss_psi,val_f1_phi,val_f1_psi,mean_reward\n");
    for e in &metrics.epochs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.epoch,
            opt(e.loss_phi),
            opt(e.loss_psi),
            opt(e.val_f1_phi),
            opt(e.val_f1_psi),
            opt(e.mean_reward)
        );
    }
    s
}

pub fn actions_csv(metrics: &Metrics) -> String {
    let mut s = String::from("epoch,node,a1,a2,p_phi_teacher,p_propagate\n");
    for a in &metrics.actions {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            a.epoch,
            a.node,
            a.a1,
            a.a2,
            opt(a.p_phi_teacher),
            opt(a.p_propagate)
        );
    }
    s
}

pub fn probe_csv(rows: &[ProbeRow], ids: &[String]) -> String {
    let mut s = String::from("node,sigma,prob_phi_teacher,prob_psi_teacher\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", ids[r.node], r.sigma, r.prob_phi_teacher, r.prob_psi_teacher);
    }
    s
}

pub fn node_losses_csv(rows: &[NodeLossRow], ids: &[String]) -> String {
    let mut s = String::from("node,ce_phi,ce_psi\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", ids[r.node], r.ce_phi, r.ce_psi);
    }
    s
}

/// Writes metrics.json, curves.csv, actions.csv and checkpoint.json.
pub fn write_run(dir: &Path, config: &TrainConfig, outcome: &TrainOutcome) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary = RunSummary::new(config, &outcome.metrics);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(&dir.join("metrics.json"), &(json + "\n"))?;
    write(&dir.join("curves.csv"), &curves_csv(&outcome.metrics))?;
    write(&dir.join("actions.csv"), &actions_csv(&outcome.metrics))?;
    let ckpt = serde_json::to_string(&Checkpoint::from(outcome)).expect("checkpoint serializes");
    write(&dir.join("checkpoint.json"), &ckpt)
}

/// Trained parameters of both networks and both policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub phi: crate::models::GnnModel,
    pub psi: crate::models::GnnModel,
    pub node_policy: crate::agent::PolicyNet,
    pub struct_policy: crate::agent::PolicyNet,
}

impl From<&TrainOutcome> for Checkpoint {
    fn from(o: &TrainOutcome) -> Self {
        Self {
            phi: o.phi.clone(),
            psi: o.psi.clone(),
            node_policy: o.node_policy.clone(),
            struct_policy: o.struct_policy.clone(),
        }
    }
}

impl Checkpoint {
    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            phi: self.phi,
            psi: self.psi,
            node_policy: self.node_policy,
            struct_policy: self.struct_policy,
            metrics: Metrics::default(),
        }
    }
}

pub fn read_checkpoint(dir: &Path) -> Result<Checkpoint, RunError> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Malformed {
        path,
        message: e.to_string(),
    })
}

pub fn read_summary(dir: &Path) -> Result<RunSummary, RunError> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Malformed {
        path,
        message: e.to_string(),
    })
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub variant: Variant,
    pub arch_phi: Arch,
    pub arch_psi: Arch,
    pub runs: usize,
    pub mean_f1_phi: f64,
    pub std_f1_phi: f64,
    pub mean_f1_psi: f64,
    pub std_f1_psi: f64,
    /// Mean over both networks of the gain in mean F1 over the independent
    /// rows with the same architectures; `None` if there are none.
    pub improvement: Option<f64>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(runs: &[RunSummary]) -> Vec<ReportRow> {
    let mut groups: std::collections::BTreeMap<(Variant, Arch, Arch), Vec<&RunSummary>> = Default::default();
    for r in runs {
        groups.entry((r.variant, r.arch_phi, r.arch_psi)).or_default().push(r);
    }
    let mut rows: Vec<ReportRow> = groups
        .iter()
        .map(|(&(variant, arch_phi, arch_psi), g)| {
            let (mean_f1_phi, std_f1_phi) = mean_std(&g.iter().map(|r| r.test_f1_phi).collect::<Vec<_>>());
            let (mean_f1_psi, std_f1_psi) = mean_std(&g.iter().map(|r| r.test_f1_psi).collect::<Vec<_>>());
            ReportRow {
                variant,
                arch_phi,
                arch_psi,
                runs: g.len(),
                mean_f1_phi,
                std_f1_phi,
                mean_f1_psi,
                std_f1_psi,
                improvement: None,
            }
        })
        .collect();
    let base: Vec<ReportRow> = rows.iter().filter(|r| r.variant == Variant::Independent).cloned().collect();
    for r in &mut rows {
        if let Some(b) = base.iter().find(|b| b.arch_phi == r.arch_phi && b.arch_psi == r.arch_psi) {
            r.improvement = Some(0.5 * ((r.mean_f1_phi - b.mean_f1_phi) + (r.mean_f1_psi - b.mean_f1_psi)));
        }
    }
    rows
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "variant,arch_phi,arch_psi,runs,mean_f1_phi,std_f1_phi,mean_f1_psi,std_f1_psi,improvement_vs_independent\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.variant,
            r.arch_phi,
            r.arch_psi,
            r.runs,
            r.mean_f1_phi,
            r.std_f1_phi,
            r.mean_f1_psi,
            r.std_f1_psi,
            r.improvement.map(|x| format!("{x:.6}")).unwrap_or_default()
        );
    }
    s
}

/// Reads every `metrics.json` under `run_dirs` and writes the summary CSV
/// to `out`.
pub fn emit_report(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>, RunError> {
    if run_dirs.is_empty() {
        return Err(RunError::NoRuns);
    }
    let runs = run_dirs.iter().map(|d| read_summary(d)).collect::<Result<Vec<_>, _>>()?;
    let rows = summarize(&runs);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write(out, &report_csv(&rows))?;
    Ok(rows)
}
