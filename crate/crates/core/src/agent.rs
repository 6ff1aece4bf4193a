//! The reinforced knowledge judge: hierarchical states, the two policy
//! networks, action sampling, rewards and the REINFORCE update.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, Tape, TensorError, Var};
use crate::models::ForwardResult;
use crate::optim::sgd_step;
use crate::tensor::Tensor;

/// Hidden widths of both policy networks.
pub const POLICY_HIDDEN: [usize; 2] = [64, 32];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("node {0} has no cross-entropy loss (unlabeled)")]
    Unlabeled(usize),
    #[error("policy expects states of width {expected}, got {found}")]
    Width { expected: usize, found: usize },
    #[error("reward needs a non-empty batch")]
    EmptyBatch,
    #[error("record for node {0} has no baseline")]
    MissingBaseline(usize),
    #[error("non-finite reward at node {0}")]
    NonFiniteReward(usize),
}

/// `concat(p_phi, L_phi, p_psi, L_psi)`, length `2C + 2`.
pub fn build_node_state(i: usize, phi: &ForwardResult, psi: &ForwardResult) -> Result<Vec<f64>, AgentError> {
    let l_phi = phi.ce_of(i).ok_or(AgentError::Unlabeled(i))?;
    let l_psi = psi.ce_of(i).ok_or(AgentError::Unlabeled(i))?;
    Ok(node_state_from_parts(phi.probs.row(i), l_phi, psi.probs.row(i), l_psi))
}

pub fn node_state_from_parts(p_phi: &[f64], l_phi: f64, p_psi: &[f64], l_psi: f64) -> Vec<f64> {
    let mut s = Vec::with_capacity(2 * p_phi.len() + 2);
    s.extend_from_slice(p_phi);
    s.push(l_phi);
    s.extend_from_slice(p_psi);
    s.push(l_psi);
    s
}

fn mean_cosine(h: &Tensor, i: usize, members: &[usize]) -> f64 {
    members.iter().map(|&v| cosine(h.row(i), h.row(v))).sum::<f64>() / members.len() as f64
}

/// Center similarity of node `i` over its agent-selected set: first entry in
/// the teacher ("distilled") network, second in the other one. An empty set
/// gives `[0, 0]`.
pub fn center_similarity(i: usize, a1: u8, members: &[usize], hidden_phi: &Tensor, hidden_psi: &Tensor) -> [f64; 2] {
    if members.is_empty() {
        return [0.0, 0.0];
    }
    let phi = mean_cosine(hidden_phi, i, members);
    let psi = mean_cosine(hidden_psi, i, members);
    if a1 == 0 {
        [phi, psi]
    } else {
        [psi, phi]
    }
}

/// `concat(node_state, u_i)`, length `2C + 4`.
pub fn build_struct_state(node_state: &[f64], center: [f64; 2]) -> Vec<f64> {
    let mut s = node_state.to_vec();
    s.extend_from_slice(&center);
    s
}

/// Three-layer tanh MLP ending in a two-way softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    input: usize,
    params: Vec<Tensor>,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(input: usize, rng: &mut R) -> Self {
        let widths = [input, POLICY_HIDDEN[0], POLICY_HIDDEN[1], 2];
        let mut params = Vec::new();
        for w in widths.windows(2) {
            params.push(Tensor::glorot_uniform(w[0], w[1], rng));
            params.push(Tensor::zeros(1, w[1]));
        }
        Self { input, params }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Records the network on `tape`; returns the parameter handles and the
    /// `m x 2` action probabilities.
    pub fn forward(&self, tape: &mut Tape, states: Var) -> Result<(Vec<Var>, Var), AgentError> {
        let width = tape.value(states).cols();
        if width != self.input {
            return Err(AgentError::Width {
                expected: self.input,
                found: width,
            });
        }
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let mut h = states;
        for l in 0..3 {
            let z = tape.matmul(h, params[2 * l])?;
            let z = tape.add_row(z, params[2 * l + 1])?;
            h = if l < 2 { tape.tanh(z)? } else { z };
        }
        let probs = tape.softmax_rows(h)?;
        Ok((params, probs))
    }

    /// Action probabilities for each state row.
    pub fn probabilities(&self, states: &Tensor) -> Result<Tensor, AgentError> {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let (_, p) = self.forward(&mut tape, s)?;
        Ok(tape.value(p).clone())
    }
}

/// One sampled action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub action: u8,
    /// Probability of the action taken.
    pub prob: f64,
    pub log_prob: f64,
    /// Probabilities of actions 0 and 1.
    pub probs: [f64; 2],
}

/// Samples `action ~ pi(state)`.
pub fn policy_act<R: Rng + ?Sized>(policy: &PolicyNet, state: &[f64], rng: &mut R) -> Result<Decision, AgentError> {
    let probs = policy.probabilities(&Tensor::from_rows(&[state.to_vec()]))?;
    Ok(sample(probs.row(0), rng))
}

/// Samples one action per row of `states`, in row order.
pub fn policy_act_batch<R: Rng + ?Sized>(policy: &PolicyNet, states: &Tensor, rng: &mut R) -> Result<Vec<Decision>, AgentError> {
    let probs = policy.probabilities(states)?;
    Ok((0..probs.rows()).map(|r| sample(probs.row(r), rng)).collect())
}

fn sample<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Decision {
    let action = if rng.random::<f64>() < p[0] { 0 } else { 1 };
    let prob = p[action as usize];
    Decision {
        action,
        prob,
        log_prob: prob.ln(),
        probs: [p[0], p[1]],
    }
}

/// Post-update per-node cross-entropy of both networks, indexed by node id;
/// `None` for nodes without a training label.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeLosses {
    pub phi: Vec<Option<f64>>,
    pub psi: Vec<Option<f64>>,
}

impl NodeLosses {
    pub fn new(num_nodes: usize) -> Self {
        Self {
            phi: vec![None; num_nodes],
            psi: vec![None; num_nodes],
        }
    }

    pub fn set(&mut self, node: usize, phi: f64, psi: f64) {
        self.phi[node] = Some(phi);
        self.psi[node] = Some(psi);
    }

    fn pair_sum(&self, node: usize) -> Option<f64> {
        Some(self.phi.get(node).copied().flatten()? + self.psi.get(node).copied().flatten()?)
    }
}

/// `R_i = -mean_{u in B}(L_phi(u) + L_psi(u)) - gamma * mean_{v in N_i}(L_phi(v) + L_psi(v))`.
///
/// Neighbors without losses are skipped; when none remain the second term is 0.
pub fn compute_reward(batch: &[usize], neighbors: &[usize], losses: &NodeLosses, gamma: f64) -> Result<f64, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut batch_sum = 0.0;
    for &u in batch {
        batch_sum += losses.pair_sum(u).ok_or(AgentError::Unlabeled(u))?;
    }
    let local: Vec<f64> = neighbors.iter().filter_map(|&v| losses.pair_sum(v)).collect();
    let local_term = if local.is_empty() {
        0.0
    } else {
        local.iter().sum::<f64>() / local.len() as f64
    };
    Ok(-batch_sum / batch.len() as f64 - gamma * local_term)
}

/// States, actions and returns of one node in one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub node: usize,
    pub node_state: Vec<f64>,
    pub a1: u8,
    pub log_prob1: f64,
    /// Absent when no structure-level decision was sampled.
    pub struct_state: Option<Vec<f64>>,
    pub a2: u8,
    pub log_prob2: f64,
    pub reward: f64,
    pub baseline: f64,
}

/// Per-node baselines: the reward each node received in the last epoch it
/// was visited. Unvisited nodes have baseline 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaselineTable {
    committed: BTreeMap<usize, f64>,
    pending: BTreeMap<usize, f64>,
}

impl BaselineTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn baseline(&self, node: usize) -> f64 {
        self.committed.get(&node).copied().unwrap_or(0.0)
    }

    /// Stores a reward for the current epoch; visible after [`end_epoch`](Self::end_epoch).
    pub fn record(&mut self, node: usize, reward: f64) {
        self.pending.insert(node, reward);
    }

    pub fn end_epoch(&mut self) {
        let pending = std::mem::take(&mut self.pending);
        self.committed.extend(pending);
    }

    pub fn entries(&self) -> &BTreeMap<usize, f64> {
        &self.committed
    }
}

/// One REINFORCE ascent step on both policies:
/// `grad J = 1/|B| sum (R_i - b_i) grad log(pi_node(a1) * pi_struct(a2))`.
///
/// Records without a structure state contribute only to the node policy.
pub fn policy_update(
    records: &[ActionRecord],
    node_policy: &mut PolicyNet,
    struct_policy: &mut PolicyNet,
    lr: f64,
) -> Result<(), AgentError> {
    if records.is_empty() {
        return Ok(());
    }
    for r in records {
        if !r.baseline.is_finite() {
            return Err(AgentError::MissingBaseline(r.node));
        }
        if !r.reward.is_finite() {
            return Err(AgentError::NonFiniteReward(r.node));
        }
    }
    let scale = 1.0 / records.len() as f64;
    let advantages: Vec<f64> = records.iter().map(|r| (r.reward - r.baseline) * scale).collect();

    let mut tape = Tape::new();
    let s1 = Tensor::from_rows(&records.iter().map(|r| r.node_state.clone()).collect::<Vec<_>>());
    let s1 = tape.constant(s1);
    let (theta, p1) = node_policy.forward(&mut tape, s1)?;
    let picks: Vec<(usize, usize)> = records.iter().enumerate().map(|(k, r)| (k, r.a1 as usize)).collect();
    let lp1 = tape.log(p1)?;
    let lp1 = tape.pick(lp1, &picks)?;
    let adv1 = Tensor::column(advantages.clone());
    let j1 = tape.mul_const(lp1, &adv1)?;
    let mut objective = tape.sum(j1)?;

    let with_struct: Vec<usize> = (0..records.len()).filter(|&k| records[k].struct_state.is_some()).collect();
    let mut delta = None;
    if !with_struct.is_empty() {
        let rows: Vec<Vec<f64>> = with_struct
            .iter()
            .map(|&k| records[k].struct_state.clone().expect("filtered"))
            .collect();
        let s2 = tape.constant(Tensor::from_rows(&rows));
        let (params, p2) = struct_policy.forward(&mut tape, s2)?;
        let picks: Vec<(usize, usize)> = with_struct
            .iter()
            .enumerate()
            .map(|(row, &k)| (row, records[k].a2 as usize))
            .collect();
        let lp2 = tape.log(p2)?;
        let lp2 = tape.pick(lp2, &picks)?;
        let adv2 = Tensor::column(with_struct.iter().map(|&k| advantages[k]).collect());
        let j2 = tape.mul_const(lp2, &adv2)?;
        let j2 = tape.sum(j2)?;
        objective = tape.add(objective, j2)?;
        delta = Some(params);
    }

    // Ascent on J is descent on -J.
    let loss = tape.scale(objective, -1.0)?;
    let grads = tape.backward(loss)?;
    let g_theta: Vec<Tensor> = theta.iter().map(|&v| grads.get(v)).collect();
    sgd_step(node_policy.params_mut(), &g_theta, lr)?;
    if let Some(params) = delta {
        let g_delta: Vec<Tensor> = params.iter().map(|&v| grads.get(v)).collect();
        sgd_step(struct_policy.params_mut(), &g_delta, lr)?;
    }
    Ok(())
}
