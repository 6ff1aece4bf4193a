//! The mutual distillation training loop, its ablations, evaluation and the
//! noise-injection probe.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{
    build_struct_state, center_similarity, compute_reward, node_state_from_parts, policy_act_batch, policy_update,
    ActionRecord, AgentError, BaselineTable, Decision, NodeLosses, PolicyNet,
};
use crate::autodiff::{Tape, TensorError, Var};
use crate::config::{TrainConfig, Variant};
use crate::distill::{
    distill_on_tape, select_all_neighborhoods, select_neighborhoods, total_loss_on_tape, ActionAssignment,
    DistillError, DistillGates, DistillVars,
};
use crate::graph::Graph;
use crate::models::{per_node_ce, ForwardResult, GnnModel, GraphOps, ModelError, ModelSpec};
use crate::optim::AdamState;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged {
        epoch: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error("micro-F1 over an empty node set")]
    EmptyEvaluation,
    #[error("graph has no training nodes")]
    NoTrainingNodes,
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Independent random streams, so that one network's dropout masks do not
/// depend on whether the other network or the agent is running.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
enum Stream {
    InitPhi = 1,
    InitPsi = 2,
    DropoutPhi = 3,
    DropoutPsi = 4,
    Agent = 5,
    Batches = 6,
    PolicyInit = 7,
    Probe = 8,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Micro-averaged F1 over `nodes`; equals accuracy for single-label
/// multi-class predictions.
pub fn evaluate_micro_f1(predictions: &[usize], labels: &[usize], nodes: &[usize]) -> Result<f64, TrainError> {
    if nodes.is_empty() {
        return Err(TrainError::EmptyEvaluation);
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for &i in nodes {
        if predictions[i] == labels[i] {
            tp += 1;
        } else {
            // A wrong prediction is a false positive for the predicted class
            // and a false negative for the true one.
            fp += 1;
            fn_ += 1;
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

fn f1_or_zero(pred: &[usize], labels: &[usize], nodes: &[usize]) -> f64 {
    evaluate_micro_f1(pred, labels, nodes).unwrap_or(0.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean (over batches) of each network's total objective.
    pub loss_phi: Option<f64>,
    pub loss_psi: Option<f64>,
    pub node_loss_phi: f64,
    pub node_loss_psi: f64,
    pub struct_loss_phi: f64,
    pub struct_loss_psi: f64,
    pub train_f1_phi: Option<f64>,
    pub train_f1_psi: Option<f64>,
    pub val_f1_phi: Option<f64>,
    pub val_f1_psi: Option<f64>,
    /// Mean reward over every action of the epoch.
    pub mean_reward: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionLog {
    pub epoch: usize,
    pub node: usize,
    pub a1: u8,
    pub a2: u8,
    /// Node-level probability that `phi` teaches.
    pub p_phi_teacher: Option<f64>,
    /// Structure-level probability of propagating.
    pub p_propagate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    /// Best epoch of each network; equal to `best_epoch` except for
    /// independently trained pairs.
    pub best_epoch_phi: usize,
    pub best_epoch_psi: usize,
    pub val_f1_phi: f64,
    pub val_f1_psi: f64,
    pub test_f1_phi: f64,
    pub test_f1_psi: f64,
    pub actions: Vec<ActionLog>,
}

impl Metrics {
    pub fn reward_trace(&self) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.mean_reward).collect()
    }
}

/// Trained networks, policies and the run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub phi: GnnModel,
    pub psi: GnnModel,
    pub node_policy: PolicyNet,
    pub struct_policy: PolicyNet,
    pub metrics: Metrics,
}

fn model_spec(cfg: &TrainConfig, graph: &Graph, arch: crate::models::Arch) -> ModelSpec {
    ModelSpec {
        arch,
        input_dim: graph.num_features(),
        hidden: cfg.hidden,
        classes: graph.num_classes(),
        layers: cfg.layers,
        heads: cfg.heads,
        dropout: cfg.dropout,
        attention_dropout: cfg.attention_dropout,
    }
}

fn batches(train: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if batch_size == 0 || batch_size >= train.len() {
        return vec![train.to_vec()];
    }
    let mut order = train.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn predictions(res: &ForwardResult) -> Vec<usize> {
    res.probs.argmax_rows()
}

/// Applies `variant`'s fixed overrides.
pub fn effective_config(cfg: &TrainConfig) -> TrainConfig {
    let mut cfg = cfg.clone();
    match cfg.variant {
        Variant::FreekdNode => cfg.rho = 0.0,
        Variant::Independent => {
            cfg.mu = 0.0;
            cfg.rho = 0.0;
        }
        _ => {}
    }
    cfg
}

/// Trains the pair according to `cfg.variant`.
pub fn train(graph: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    if graph.train_nodes().is_empty() {
        return Err(TrainError::NoTrainingNodes);
    }
    let owned;
    let graph = if cfg.row_normalize {
        owned = graph.row_normalized();
        &owned
    } else {
        graph
    };
    let cfg = effective_config(cfg);
    if cfg.variant == Variant::Independent {
        return train_independent(graph, &cfg);
    }
    PairTrainer::new(graph, &cfg)?.run()
}

/// Alias kept for the ablation driver: trains `graph` with `variant`.
pub fn run_variant(variant: Variant, graph: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let cfg = TrainConfig {
        variant,
        ..cfg.clone()
    };
    train(graph, &cfg)
}

/// Result of training one network on its own.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleRun {
    pub model: GnnModel,
    pub best_epoch: usize,
    pub epochs: Vec<(f64, f64, f64)>,
    pub val_f1: f64,
    pub test_f1: f64,
}

/// Which of the two network slots a single run occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Phi,
    Psi,
}

/// Trains one network with cross-entropy only, on the same random streams it
/// would use inside a pair. Early stopping uses its own validation F1.
pub fn train_single(graph: &Graph, cfg: &TrainConfig, slot: Slot) -> Result<SingleRun, TrainError> {
    let (arch, lr0, init, drop) = match slot {
        Slot::Phi => (cfg.arch_phi, cfg.lr_phi, Stream::InitPhi, Stream::DropoutPhi),
        Slot::Psi => (cfg.arch_psi, cfg.lr_psi, Stream::InitPsi, Stream::DropoutPsi),
    };
    let ops = GraphOps::new(graph);
    let mut model = GnnModel::new(&model_spec(cfg, graph, arch), &mut stream(cfg.seed, init))?;
    let mut adam = AdamState::new(model.params(), lr0, cfg.weight_decay);
    let mut dropout_rng = stream(cfg.seed, drop);
    let mut batch_rng = stream(cfg.seed, Stream::Batches);

    let mut best: Option<(usize, f64, GnnModel)> = None;
    let mut epochs = Vec::new();
    for epoch in 0..cfg.max_epochs {
        adam.lr = cfg.lr_at(lr0, epoch);
        let mut loss_sum = 0.0;
        let parts = batches(graph.train_nodes(), cfg.batch_size, &mut batch_rng);
        for batch in &parts {
            let mut step = || -> Result<f64, TrainError> {
                let mut tape = Tape::new();
                let fw = model.forward(&mut tape, &ops, graph.features(), true, &mut dropout_rng)?;
                let ce = per_node_ce(&mut tape, fw.probs, graph.labels(), batch)?;
                let ce = tape.sum(ce)?;
                let loss = tape.scale(ce, 1.0 / batch.len() as f64)?;
                let grads = tape.backward(loss)?;
                let g: Vec<Tensor> = fw.params.iter().map(|&v| grads.get(v)).collect();
                let value = tape.value(loss).item();
                adam.step(model.params_mut(), &g)?;
                Ok(value)
            };
            loss_sum += step().map_err(|e| TrainError::Diverged {
                epoch,
                source: Box::new(e),
            })?;
        }
        let res = model.evaluate(&ops, graph, &[])?;
        let pred = predictions(&res);
        let train_f1 = f1_or_zero(&pred, graph.labels(), graph.train_nodes());
        let val_f1 = f1_or_zero(&pred, graph.labels(), graph.val_nodes());
        epochs.push((loss_sum / parts.len() as f64, train_f1, val_f1));
        match &best {
            Some((b, v, _)) if val_f1 <= *v => {
                if epoch - b >= cfg.patience {
                    break;
                }
            }
            _ => best = Some((epoch, val_f1, model.clone())),
        }
    }
    let (best_epoch, val_f1, model) = best.expect("at least one epoch");
    let res = model.evaluate(&ops, graph, &[])?;
    let test_f1 = f1_or_zero(&predictions(&res), graph.labels(), graph.test_nodes());
    Ok(SingleRun {
        model,
        best_epoch,
        epochs,
        val_f1,
        test_f1,
    })
}

fn train_independent(graph: &Graph, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let phi = train_single(graph, cfg, Slot::Phi)?;
    let psi = train_single(graph, cfg, Slot::Psi)?;
    let c = graph.num_classes();
    let mut policy_rng = stream(cfg.seed, Stream::PolicyInit);
    let node_policy = PolicyNet::new(2 * c + 2, &mut policy_rng);
    let struct_policy = PolicyNet::new(2 * c + 4, &mut policy_rng);

    let n = phi.epochs.len().max(psi.epochs.len());
    let epochs = (0..n)
        .map(|e| {
            let a = phi.epochs.get(e);
            let b = psi.epochs.get(e);
            EpochStats {
                epoch: e,
                loss_phi: a.map(|x| x.0),
                loss_psi: b.map(|x| x.0),
                train_f1_phi: a.map(|x| x.1),
                train_f1_psi: b.map(|x| x.1),
                val_f1_phi: a.map(|x| x.2),
                val_f1_psi: b.map(|x| x.2),
                ..EpochStats::default()
            }
        })
        .collect();
    let metrics = Metrics {
        epochs,
        best_epoch: phi.best_epoch.max(psi.best_epoch),
        best_epoch_phi: phi.best_epoch,
        best_epoch_psi: psi.best_epoch,
        val_f1_phi: phi.val_f1,
        val_f1_psi: psi.val_f1,
        test_f1_phi: phi.test_f1,
        test_f1_psi: psi.test_f1,
        actions: Vec::new(),
    };
    Ok(TrainOutcome {
        phi: phi.model,
        psi: psi.model,
        node_policy,
        struct_policy,
        metrics,
    })
}

struct StepSummary {
    loss_phi: f64,
    loss_psi: f64,
    distill: [f64; 4],
    rewards: Vec<f64>,
    post_update: Option<(ForwardResult, ForwardResult)>,
}

struct PairTrainer<'a> {
    graph: &'a Graph,
    cfg: &'a TrainConfig,
    ops: GraphOps,
    phi: GnnModel,
    psi: GnnModel,
    adam_phi: AdamState,
    adam_psi: AdamState,
    node_policy: PolicyNet,
    struct_policy: PolicyNet,
    baselines: BaselineTable,
    rng_phi: ChaCha8Rng,
    rng_psi: ChaCha8Rng,
    rng_agent: ChaCha8Rng,
    rng_batches: ChaCha8Rng,
    is_train: Vec<bool>,
    metrics: Metrics,
}

impl<'a> PairTrainer<'a> {
    fn new(graph: &'a Graph, cfg: &'a TrainConfig) -> Result<Self, TrainError> {
        let phi = GnnModel::new(&model_spec(cfg, graph, cfg.arch_phi), &mut stream(cfg.seed, Stream::InitPhi))?;
        let psi = GnnModel::new(&model_spec(cfg, graph, cfg.arch_psi), &mut stream(cfg.seed, Stream::InitPsi))?;
        let c = graph.num_classes();
        let mut policy_rng = stream(cfg.seed, Stream::PolicyInit);
        let node_policy = PolicyNet::new(2 * c + 2, &mut policy_rng);
        let struct_policy = PolicyNet::new(2 * c + 4, &mut policy_rng);
        let mut is_train = vec![false; graph.num_nodes()];
        for &i in graph.train_nodes() {
            is_train[i] = true;
        }
        Ok(Self {
            graph,
            cfg,
            ops: GraphOps::new(graph),
            adam_phi: AdamState::new(phi.params(), cfg.lr_phi, cfg.weight_decay),
            adam_psi: AdamState::new(psi.params(), cfg.lr_psi, cfg.weight_decay),
            phi,
            psi,
            node_policy,
            struct_policy,
            baselines: BaselineTable::new(),
            rng_phi: stream(cfg.seed, Stream::DropoutPhi),
            rng_psi: stream(cfg.seed, Stream::DropoutPsi),
            rng_agent: stream(cfg.seed, Stream::Agent),
            rng_batches: stream(cfg.seed, Stream::Batches),
            is_train,
            metrics: Metrics::default(),
        })
    }

    fn run(mut self) -> Result<TrainOutcome, TrainError> {
        let (graph, cfg) = (self.graph, self.cfg);
        let mut best: Option<(usize, f64, GnnModel, GnnModel)> = None;
        for epoch in 0..cfg.max_epochs {
            self.adam_phi.lr = cfg.lr_at(cfg.lr_phi, epoch);
            self.adam_psi.lr = cfg.lr_at(cfg.lr_psi, epoch);
            let parts = batches(graph.train_nodes(), cfg.batch_size, &mut self.rng_batches);
            let mut stats = EpochStats {
                epoch,
                ..EpochStats::default()
            };
            let (mut lp, mut ls) = (0.0, 0.0);
            let mut rewards = Vec::new();
            let mut last = None;
            for batch in &parts {
                let s = self.step(epoch, batch).map_err(|e| TrainError::Diverged {
                    epoch,
                    source: Box::new(e),
                })?;
                lp += s.loss_phi;
                ls += s.loss_psi;
                stats.node_loss_phi += s.distill[0];
                stats.node_loss_psi += s.distill[1];
                stats.struct_loss_phi += s.distill[2];
                stats.struct_loss_psi += s.distill[3];
                rewards.extend(s.rewards);
                last = s.post_update;
            }
            self.baselines.end_epoch();
            let k = parts.len() as f64;
            stats.loss_phi = Some(lp / k);
            stats.loss_psi = Some(ls / k);
            if !rewards.is_empty() {
                stats.mean_reward = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
            }

            let (rp, rs) = match last {
                Some(pair) => pair,
                None => (
                    self.phi.evaluate(&self.ops, graph, &[])?,
                    self.psi.evaluate(&self.ops, graph, &[])?,
                ),
            };
            let (pp, ps) = (predictions(&rp), predictions(&rs));
            let labels = graph.labels();
            stats.train_f1_phi = Some(f1_or_zero(&pp, labels, graph.train_nodes()));
            stats.train_f1_psi = Some(f1_or_zero(&ps, labels, graph.train_nodes()));
            let vp = f1_or_zero(&pp, labels, graph.val_nodes());
            let vs = f1_or_zero(&ps, labels, graph.val_nodes());
            stats.val_f1_phi = Some(vp);
            stats.val_f1_psi = Some(vs);
            self.metrics.epochs.push(stats);

            let mean_val = 0.5 * (vp + vs);
            match &best {
                Some((b, v, _, _)) if mean_val <= *v => {
                    if epoch - b >= cfg.patience {
                        break;
                    }
                }
                _ => best = Some((epoch, mean_val, self.phi.clone(), self.psi.clone())),
            }
        }

        let (best_epoch, _, phi, psi) = best.expect("at least one epoch");
        self.phi = phi;
        self.psi = psi;
        let rp = self.phi.evaluate(&self.ops, graph, &[])?;
        let rs = self.psi.evaluate(&self.ops, graph, &[])?;
        let labels = graph.labels();
        let m = &mut self.metrics;
        m.best_epoch = best_epoch;
        m.best_epoch_phi = best_epoch;
        m.best_epoch_psi = best_epoch;
        m.val_f1_phi = f1_or_zero(&predictions(&rp), labels, graph.val_nodes());
        m.val_f1_psi = f1_or_zero(&predictions(&rs), labels, graph.val_nodes());
        m.test_f1_phi = f1_or_zero(&predictions(&rp), labels, graph.test_nodes());
        m.test_f1_psi = f1_or_zero(&predictions(&rs), labels, graph.test_nodes());
        Ok(TrainOutcome {
            phi: self.phi,
            psi: self.psi,
            node_policy: self.node_policy,
            struct_policy: self.struct_policy,
            metrics: self.metrics,
        })
    }

    /// Decides the distillation gates for one batch. Returns the gates, the
    /// sampled node/structure decisions (agent variants only) and the states.
    fn decide(
        &mut self,
        batch: &[usize],
        tape: &Tape,
        probs: (Var, Var),
        hidden: (Var, Var),
        ce: (&[f64], &[f64]),
    ) -> Result<(DistillGates, Vec<Pending>), TrainError> {
        let graph = self.graph;
        let variant = self.cfg.variant;
        if variant == Variant::WithoutJudge {
            return Ok((DistillGates::bidirectional(batch, graph), Vec::new()));
        }
        let (pp, ps) = (tape.value(probs.0), tape.value(probs.1));
        let node_states: Vec<Vec<f64>> = batch
            .iter()
            .enumerate()
            .map(|(k, &i)| node_state_from_parts(pp.row(i), ce.0[k], ps.row(i), ce.1[k]))
            .collect();

        let (a1, node_decisions): (Vec<u8>, Option<Vec<Decision>>) = if variant.uses_agent() {
            let d = policy_act_batch(&self.node_policy, &Tensor::from_rows(&node_states), &mut self.rng_agent)?;
            (d.iter().map(|x| x.action).collect(), Some(d))
        } else {
            // Lower loss teaches; ties go to phi.
            let a = ce.0.iter().zip(ce.1).map(|(p, s)| u8::from(p > s)).collect();
            (a, None)
        };

        let provisional = ActionAssignment::new(batch.to_vec(), a1.clone(), vec![0; batch.len()])?;
        let sets = if variant == Variant::AllNeighbors {
            select_all_neighborhoods(&provisional, graph)
        } else {
            select_neighborhoods(&provisional, graph)
        };

        let mut struct_states = vec![None; batch.len()];
        let a2: Vec<u8>;
        let mut struct_decisions = None;
        if variant.uses_struct_agent() {
            let (hp, hs) = (tape.value(hidden.0), tape.value(hidden.1));
            let states: Vec<Vec<f64>> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let members = if a1[k] == 0 { &sets.phi[k] } else { &sets.psi[k] };
                    build_struct_state(&node_states[k], center_similarity(i, a1[k], members, hp, hs))
                })
                .collect();
            let d = policy_act_batch(&self.struct_policy, &Tensor::from_rows(&states), &mut self.rng_agent)?;
            a2 = d.iter().map(|x| x.action).collect();
            struct_states = states.into_iter().map(Some).collect();
            struct_decisions = Some(d);
        } else if variant == Variant::FreekdNode {
            a2 = vec![0; batch.len()];
        } else {
            a2 = vec![1; batch.len()];
        }

        let assignment = ActionAssignment::new(batch.to_vec(), a1, a2)?;
        let gates = DistillGates::from_assignment(&assignment, sets);

        let pending = match node_decisions {
            None => {
                let epoch = self.metrics.epochs.len();
                for (k, &i) in batch.iter().enumerate() {
                    self.metrics.actions.push(ActionLog {
                        epoch,
                        node: i,
                        a1: assignment.a1()[k],
                        a2: assignment.a2()[k],
                        p_phi_teacher: None,
                        p_propagate: None,
                    });
                }
                Vec::new()
            }
            Some(nd) => nd
                .into_iter()
                .zip(node_states)
                .zip(struct_states)
                .enumerate()
                .map(|(k, ((d1, s1), s2))| Pending {
                    node: batch[k],
                    node_state: s1,
                    d1,
                    struct_state: s2,
                    d2: struct_decisions.as_ref().map(|d| d[k]),
                    a2: assignment.a2()[k],
                })
                .collect(),
        };
        Ok((gates, pending))
    }

    fn step(&mut self, epoch: usize, batch: &[usize]) -> Result<StepSummary, TrainError> {
        let graph = self.graph;
        let cfg = self.cfg;
        let mut tape = Tape::new();
        let fp = self.phi.forward(&mut tape, &self.ops, graph.features(), true, &mut self.rng_phi)?;
        let fs = self.psi.forward(&mut tape, &self.ops, graph.features(), true, &mut self.rng_psi)?;
        let ce_p = per_node_ce(&mut tape, fp.probs, graph.labels(), batch)?;
        let ce_s = per_node_ce(&mut tape, fs.probs, graph.labels(), batch)?;
        let ce_p_vals = tape.value(ce_p).data().to_vec();
        let ce_s_vals = tape.value(ce_s).data().to_vec();

        let (gates, pending) = self.decide(
            batch,
            &tape,
            (fp.probs, fs.probs),
            (fp.hidden, fs.hidden),
            (&ce_p_vals, &ce_s_vals),
        )?;

        let d: DistillVars = if cfg.mu == 0.0 && cfg.rho == 0.0 {
            let z = tape.constant(Tensor::scalar(0.0));
            DistillVars {
                node_phi: z,
                node_psi: z,
                struct_phi: z,
                struct_psi: z,
            }
        } else if cfg.rho == 0.0 {
            let (node_phi, node_psi) = crate::distill::node_distill_on_tape(&mut tape, &gates, fp.probs, fs.probs)?;
            let z = tape.constant(Tensor::scalar(0.0));
            DistillVars {
                node_phi,
                node_psi,
                struct_phi: z,
                struct_psi: z,
            }
        } else {
            distill_on_tape(&mut tape, &gates, (fp.probs, fp.hidden), (fs.probs, fs.hidden))?
        };

        // Objective: (sum CE + mu * L_node + rho * L_struct) / |B|.
        let inv = 1.0 / batch.len() as f64;
        let sum_p = tape.sum(ce_p)?;
        let sum_s = tape.sum(ce_s)?;
        let lp = total_loss_on_tape(&mut tape, sum_p, d.node_phi, d.struct_phi, cfg.mu, cfg.rho)?;
        let ls = total_loss_on_tape(&mut tape, sum_s, d.node_psi, d.struct_psi, cfg.mu, cfg.rho)?;
        let lp = tape.scale(lp, inv)?;
        let ls = tape.scale(ls, inv)?;

        let gp = tape.backward(lp)?;
        let gs = tape.backward(ls)?;
        let grads_p: Vec<Tensor> = fp.params.iter().map(|&v| gp.get(v)).collect();
        let grads_s: Vec<Tensor> = fs.params.iter().map(|&v| gs.get(v)).collect();
        self.adam_phi.step(self.phi.params_mut(), &grads_p)?;
        self.adam_psi.step(self.psi.params_mut(), &grads_s)?;

        let distill = [d.node_phi, d.node_psi, d.struct_phi, d.struct_psi].map(|v| tape.value(v).item());
        let mut summary = StepSummary {
            loss_phi: tape.value(lp).item(),
            loss_psi: tape.value(ls).item(),
            distill,
            rewards: Vec::new(),
            post_update: None,
        };
        if pending.is_empty() {
            return Ok(summary);
        }

        // Delayed rewards from the updated networks.
        let train_nodes = graph.train_nodes();
        let rp = self.phi.evaluate(&self.ops, graph, train_nodes)?;
        let rs = self.psi.evaluate(&self.ops, graph, train_nodes)?;
        let mut losses = NodeLosses::new(graph.num_nodes());
        for ((i, a), (_, b)) in rp.ce.iter().zip(&rs.ce) {
            losses.set(*i, *a, *b);
        }
        let mut records = Vec::with_capacity(pending.len());
        for p in pending {
            let local: Vec<usize> = graph
                .neighbors(p.node)
                .iter()
                .copied()
                .filter(|&v| self.is_train[v])
                .collect();
            let reward = compute_reward(batch, &local, &losses, cfg.gamma)?;
            let baseline = self.baselines.baseline(p.node);
            self.baselines.record(p.node, reward);
            summary.rewards.push(reward);
            self.metrics.actions.push(ActionLog {
                epoch,
                node: p.node,
                a1: p.d1.action,
                a2: p.a2,
                p_phi_teacher: Some(p.d1.probs[0]),
                p_propagate: p.d2.map(|d| d.probs[1]),
            });
            records.push(ActionRecord {
                node: p.node,
                node_state: p.node_state,
                a1: p.d1.action,
                log_prob1: p.d1.log_prob,
                struct_state: p.struct_state,
                a2: p.a2,
                log_prob2: p.d2.map_or(0.0, |d| d.log_prob),
                reward,
                baseline,
            });
        }
        policy_update(&records, &mut self.node_policy, &mut self.struct_policy, cfg.policy_lr)?;
        summary.post_update = Some((rp, rs));
        Ok(summary)
    }
}

struct Pending {
    node: usize,
    node_state: Vec<f64>,
    d1: Decision,
    struct_state: Option<Vec<f64>>,
    d2: Option<Decision>,
    a2: u8,
}

/// Node-level states for `nodes` from evaluation-mode forward passes.
pub fn node_states(phi: &ForwardResult, psi: &ForwardResult, nodes: &[usize]) -> Result<Tensor, TrainError> {
    let rows = nodes
        .iter()
        .map(|&i| crate::agent::build_node_state(i, phi, psi))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Tensor::from_rows(&rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub node: usize,
    pub sigma: f64,
    /// `pi_theta(s, 0)`: probability that phi teaches.
    pub prob_phi_teacher: f64,
    /// `pi_theta(s, 1)`.
    pub prob_psi_teacher: f64,
}

/// Perturbs a copy of phi's parameters with `N(0, sigma)` noise for every
/// sigma and records the node-level policy's output at each of `nodes`.
pub fn noise_probe(
    outcome: &TrainOutcome,
    sigmas: &[f64],
    graph: &Graph,
    nodes: &[usize],
    seed: u64,
) -> Result<Vec<ProbeRow>, TrainError> {
    let ops = GraphOps::new(graph);
    let psi = outcome.psi.evaluate(&ops, graph, nodes)?;
    let mut rows = Vec::new();
    let mut rng = stream(seed, Stream::Probe);
    for &sigma in sigmas {
        let mut phi = outcome.phi.clone();
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).map_err(|e| TrainError::Config(e.to_string()))?;
            for p in phi.params_mut() {
                for w in p.data_mut() {
                    *w += noise.sample(&mut rng);
                }
            }
        }
        let fp = phi.evaluate(&ops, graph, nodes)?;
        let states = node_states(&fp, &psi, nodes)?;
        let probs = outcome.node_policy.probabilities(&states)?;
        for (k, &i) in nodes.iter().enumerate() {
            rows.push(ProbeRow {
                node: i,
                sigma,
                prob_phi_teacher: probs.get(k, 0),
                prob_psi_teacher: probs.get(k, 1),
            });
        }
    }
    Ok(rows)
}

/// Mean `prob_phi_teacher` per sigma, in the order of `sigmas`.
pub fn probe_means(rows: &[ProbeRow], sigmas: &[f64]) -> Vec<f64> {
    sigmas
        .iter()
        .map(|&s| {
            let v: Vec<f64> = rows.iter().filter(|r| r.sigma == s).map(|r| r.prob_phi_teacher).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLossRow {
    pub node: usize,
    pub ce_phi: f64,
    pub ce_psi: f64,
}

/// Per-node cross-entropy of both networks, side by side.
pub fn per_node_loss_report(
    graph: &Graph,
    phi: &GnnModel,
    psi: &GnnModel,
    nodes: &[usize],
) -> Result<Vec<NodeLossRow>, TrainError> {
    let ops = GraphOps::new(graph);
    let a = phi.evaluate(&ops, graph, nodes)?;
    let b = psi.evaluate(&ops, graph, nodes)?;
    Ok(a.ce
        .iter()
        .zip(&b.ce)
        .map(|(&(node, ce_phi), &(_, ce_psi))| NodeLossRow { node, ce_phi, ce_psi })
        .collect())
}

/// Uniform random subset of size `k` (used by callers that need sampled
/// batches outside the trainer).
pub fn sample_subset<R: Rng + ?Sized>(nodes: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut v = nodes.to_vec();
    v.shuffle(rng);
    v.truncate(k);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_f1_extremes() {
        let labels = [0, 1, 2, 1];
        assert_eq!(evaluate_micro_f1(&[0, 1, 2, 1], &labels, &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(evaluate_micro_f1(&[1, 2, 0, 0], &labels, &[0, 1, 2, 3]).unwrap(), 0.0);
        assert!(matches!(
            evaluate_micro_f1(&[0], &[0], &[]),
            Err(TrainError::EmptyEvaluation)
        ));
    }

    #[test]
    fn variant_overrides() {
        let cfg = TrainConfig {
            variant: Variant::FreekdNode,
            ..TrainConfig::default()
        };
        assert_eq!(effective_config(&cfg).rho, 0.0);
        assert_eq!(effective_config(&cfg).mu, 1.0);
    }

    #[test]
    fn full_batch_by_default() {
        let mut rng = stream(0, Stream::Batches);
        assert_eq!(batches(&[4, 2, 9], 0, &mut rng), vec![vec![4, 2, 9]]);
        let parts = batches(&[1, 2, 3, 4, 5], 2, &mut rng);
        assert_eq!(parts.len(), 3);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, vec![1, 2, 3, 4, 5]);
    }
}
