//! Node-level and structure-level distillation losses gated by the agent's
//! actions.
//!
//! Action bits: `a1[i] = 0` makes `phi` the teacher at node `i`, `a1[i] = 1`
//! makes `psi` the teacher. `a2[i] = 1` additionally propagates the local
//! structure of `i`. The teacher side of every KL term is read off the tape
//! as a constant, so no gradient reaches the teacher network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine, softmax_in_place, Tape, TensorError, Var, LOG_EPS};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("action bits must be 0 or 1 (node {node}: {bit})")]
    BadBit { node: usize, bit: u8 },
    #[error("assignment lengths differ: {nodes} nodes, {a1} a1 bits, {a2} a2 bits")]
    Length { nodes: usize, a1: usize, a2: usize },
    #[error("node {0} appears twice in the batch")]
    DuplicateNode(usize),
    #[error("row {0} is not a probability distribution")]
    NotNormalized(usize),
    #[error("similarity distribution over an empty member set")]
    EmptySet,
}

/// Per-node actions for one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionAssignment {
    nodes: Vec<usize>,
    a1: Vec<u8>,
    a2: Vec<u8>,
}

impl ActionAssignment {
    pub fn new(nodes: Vec<usize>, a1: Vec<u8>, a2: Vec<u8>) -> Result<Self, DistillError> {
        if nodes.len() != a1.len() || nodes.len() != a2.len() {
            return Err(DistillError::Length {
                nodes: nodes.len(),
                a1: a1.len(),
                a2: a2.len(),
            });
        }
        for (k, (&b1, &b2)) in a1.iter().zip(&a2).enumerate() {
            if b1 > 1 || b2 > 1 {
                return Err(DistillError::BadBit {
                    node: nodes[k],
                    bit: b1.max(b2),
                });
            }
        }
        let mut sorted = nodes.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(DistillError::DuplicateNode(w[0]));
        }
        Ok(Self { nodes, a1, a2 })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn a1(&self) -> &[u8] {
        &self.a1
    }

    pub fn a2(&self) -> &[u8] {
        &self.a2
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Same batch with the roles of the two networks exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            nodes: self.nodes.clone(),
            a1: self.a1.iter().map(|b| 1 - b).collect(),
            a2: self.a2.clone(),
        }
    }
}

/// Agent-selected neighborhood sets, indexed by batch position.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborhoodSets {
    pub phi: Vec<Vec<usize>>,
    pub psi: Vec<Vec<usize>>,
}

impl NeighborhoodSets {
    pub fn swapped(&self) -> Self {
        Self {
            phi: self.psi.clone(),
            psi: self.phi.clone(),
        }
    }
}

fn batch_bits(assignment: &ActionAssignment, n: usize) -> Vec<Option<u8>> {
    let mut bits = vec![None; n];
    for (&i, &b) in assignment.nodes.iter().zip(&assignment.a1) {
        bits[i] = Some(b);
    }
    bits
}

/// `M_i^phi`: batch neighbors `v` of `i` with `a1[i] = a1[v] = 0`;
/// `M_i^psi` likewise with both bits 1.
pub fn select_neighborhoods(assignment: &ActionAssignment, graph: &Graph) -> NeighborhoodSets {
    let bits = batch_bits(assignment, graph.num_nodes());
    let mut sets = NeighborhoodSets::default();
    for (&i, &b) in assignment.nodes.iter().zip(&assignment.a1) {
        let same: Vec<usize> = graph
            .neighbors(i)
            .iter()
            .copied()
            .filter(|&v| bits[v] == Some(b))
            .collect();
        let (phi, psi) = if b == 0 { (same, Vec::new()) } else { (Vec::new(), same) };
        sets.phi.push(phi);
        sets.psi.push(psi);
    }
    sets
}

/// Like [`select_neighborhoods`] but every batch neighbor is a member,
/// regardless of its own bit.
pub fn select_all_neighborhoods(assignment: &ActionAssignment, graph: &Graph) -> NeighborhoodSets {
    let bits = batch_bits(assignment, graph.num_nodes());
    let mut sets = NeighborhoodSets::default();
    for (&i, &b) in assignment.nodes.iter().zip(&assignment.a1) {
        let all: Vec<usize> = graph
            .neighbors(i)
            .iter()
            .copied()
            .filter(|&v| bits[v].is_some())
            .collect();
        let (phi, psi) = if b == 0 { (all, Vec::new()) } else { (Vec::new(), all) };
        sets.phi.push(phi);
        sets.psi.push(psi);
    }
    sets
}

/// `exp(cos(h_i, h_j)) / sum_v exp(cos(h_i, h_v))` over `members`.
pub fn similarity_distribution(embeddings: &Tensor, i: usize, members: &[usize]) -> Result<Vec<f64>, DistillError> {
    if members.is_empty() {
        return Err(DistillError::EmptySet);
    }
    let mut out: Vec<f64> = members
        .iter()
        .map(|&v| cosine(embeddings.row(i), embeddings.row(v)))
        .collect();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Per-node weights on each of the four distillation terms, plus the
/// member sets used by the structure terms.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillGates {
    pub nodes: Vec<usize>,
    /// Weight on `KL(p_phi || p_psi)` (phi teaches psi).
    pub node_to_psi: Vec<f64>,
    /// Weight on `KL(p_psi || p_phi)`.
    pub node_to_phi: Vec<f64>,
    pub struct_to_psi: Vec<f64>,
    pub struct_to_phi: Vec<f64>,
    pub sets: NeighborhoodSets,
}

impl DistillGates {
    pub fn from_assignment(assignment: &ActionAssignment, sets: NeighborhoodSets) -> Self {
        let bit = |b: u8| f64::from(b);
        let a1 = assignment.a1.iter().map(|&b| bit(b));
        let a2: Vec<f64> = assignment.a2.iter().map(|&b| bit(b)).collect();
        let node_to_phi: Vec<f64> = a1.collect();
        let node_to_psi: Vec<f64> = node_to_phi.iter().map(|a| 1.0 - a).collect();
        Self {
            nodes: assignment.nodes.clone(),
            struct_to_psi: node_to_psi.iter().zip(&a2).map(|(x, y)| x * y).collect(),
            struct_to_phi: node_to_phi.iter().zip(&a2).map(|(x, y)| x * y).collect(),
            node_to_psi,
            node_to_phi,
            sets,
        }
    }

    /// Both directions active at every node, each using all batch neighbors
    /// as its member set.
    pub fn bidirectional(nodes: &[usize], graph: &Graph) -> Self {
        let mut in_batch = vec![false; graph.num_nodes()];
        for &i in nodes {
            in_batch[i] = true;
        }
        let members: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&i| graph.neighbors(i).iter().copied().filter(|&v| in_batch[v]).collect())
            .collect();
        let ones = vec![1.0; nodes.len()];
        Self {
            nodes: nodes.to_vec(),
            node_to_psi: ones.clone(),
            node_to_phi: ones.clone(),
            struct_to_psi: ones.clone(),
            struct_to_phi: ones,
            sets: NeighborhoodSets {
                phi: members.clone(),
                psi: members,
            },
        }
    }
}

/// The four distillation losses as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct DistillVars {
    pub node_phi: Var,
    pub node_psi: Var,
    pub struct_phi: Var,
    pub struct_psi: Var,
}

/// `sum_r w_r * KL(teacher_r || student_r)` with the teacher rows constant.
fn weighted_kl(tape: &mut Tape, teacher: &Tensor, student: Var, weights: &[f64]) -> Result<Var, TensorError> {
    let mut constant = 0.0;
    let mut coef = teacher.clone();
    let cols = teacher.cols().max(1);
    for (r, row) in coef.data_mut().chunks_mut(cols).enumerate() {
        for t in row.iter_mut() {
            constant += weights[r] * *t * t.max(LOG_EPS).ln();
            *t *= weights[r];
        }
    }
    let logs = tape.log(student)?;
    let cross = tape.mul_const(logs, &coef)?;
    let cross = tape.sum(cross)?;
    let neg = tape.scale(cross, -1.0)?;
    tape.add_scalar(neg, constant)
}

fn check_distributions(p: &Tensor, rows: &[usize]) -> Result<(), DistillError> {
    for &r in rows {
        let row = p.row(r);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|&x| x < 0.0) {
            return Err(DistillError::NotNormalized(r));
        }
    }
    Ok(())
}

/// Node-level terms: `L_node^psi = sum w_psi KL(p_phi || p_psi)` and
/// `L_node^phi = sum w_phi KL(p_psi || p_phi)`. `probs_*` are full `N x C`.
pub fn node_distill_on_tape(
    tape: &mut Tape,
    gates: &DistillGates,
    probs_phi: Var,
    probs_psi: Var,
) -> Result<(Var, Var), DistillError> {
    let mut out = [None, None];
    for (slot, (teacher, student, weights)) in [
        (probs_psi, probs_phi, &gates.node_to_phi),
        (probs_phi, probs_psi, &gates.node_to_psi),
    ]
    .into_iter()
    .enumerate()
    {
        let (rows, w): (Vec<usize>, Vec<f64>) = gates
            .nodes
            .iter()
            .zip(weights.iter())
            .filter(|(_, &w)| w != 0.0)
            .map(|(&i, &w)| (i, w))
            .unzip();
        check_distributions(tape.value(teacher), &rows)?;
        check_distributions(tape.value(student), &rows)?;
        let t = tape.value(teacher).select_rows(&rows);
        let s = tape.gather_rows(student, &rows)?;
        out[slot] = Some(weighted_kl(tape, &t, s, &w)?);
    }
    Ok((out[0].expect("phi term"), out[1].expect("psi term")))
}

/// Structure-level terms. The teacher's similarity distribution over its
/// member set is matched by the student's distribution over the same set.
pub fn struct_distill_on_tape(
    tape: &mut Tape,
    gates: &DistillGates,
    hidden_phi: Var,
    hidden_psi: Var,
) -> Result<(Var, Var), DistillError> {
    let mut out = [None, None];
    for (slot, (teacher, student, weights, sets)) in [
        (hidden_psi, hidden_phi, &gates.struct_to_phi, &gates.sets.psi),
        (hidden_phi, hidden_psi, &gates.struct_to_psi, &gates.sets.phi),
    ]
    .into_iter()
    .enumerate()
    {
        let mut pairs = Vec::new();
        let mut offsets = vec![0];
        let mut target = Vec::new();
        let mut row_weights = Vec::new();
        for (k, &i) in gates.nodes.iter().enumerate() {
            let members = &sets[k];
            if weights[k] == 0.0 || members.is_empty() {
                continue;
            }
            let t = similarity_distribution(tape.value(teacher), i, members)?;
            target.extend(t);
            pairs.extend(members.iter().map(|&v| (i, v)));
            offsets.push(pairs.len());
            row_weights.extend(std::iter::repeat_n(weights[k], members.len()));
        }
        let cos = tape.row_cosine(student, &pairs)?;
        let s = tape.segment_softmax(cos, &offsets)?;
        let target = Tensor::column(target);
        out[slot] = Some(weighted_kl(tape, &target, s, &row_weights)?);
    }
    Ok((out[0].expect("phi term"), out[1].expect("psi term")))
}

pub fn distill_on_tape(
    tape: &mut Tape,
    gates: &DistillGates,
    phi: (Var, Var),
    psi: (Var, Var),
) -> Result<DistillVars, DistillError> {
    let (node_phi, node_psi) = node_distill_on_tape(tape, gates, phi.0, psi.0)?;
    let (struct_phi, struct_psi) = struct_distill_on_tape(tape, gates, phi.1, psi.1)?;
    Ok(DistillVars {
        node_phi,
        node_psi,
        struct_phi,
        struct_psi,
    })
}

/// `(L_node^phi, L_node^psi)` for full `N x C` soft-label matrices.
pub fn node_distill_losses(
    assignment: &ActionAssignment,
    probs_phi: &Tensor,
    probs_psi: &Tensor,
) -> Result<(f64, f64), DistillError> {
    let gates = DistillGates::from_assignment(assignment, NeighborhoodSets::default());
    let mut tape = Tape::new();
    let p = tape.constant(probs_phi.clone());
    let q = tape.constant(probs_psi.clone());
    let (a, b) = node_distill_on_tape(&mut tape, &gates, p, q)?;
    Ok((tape.value(a).item(), tape.value(b).item()))
}

/// `(L_struct^phi, L_struct^psi)` for full embedding matrices.
pub fn struct_distill_losses(
    assignment: &ActionAssignment,
    sets: &NeighborhoodSets,
    hidden_phi: &Tensor,
    hidden_psi: &Tensor,
) -> Result<(f64, f64), DistillError> {
    let gates = DistillGates::from_assignment(assignment, sets.clone());
    let mut tape = Tape::new();
    let h = tape.constant(hidden_phi.clone());
    let g = tape.constant(hidden_psi.clone());
    let (a, b) = struct_distill_on_tape(&mut tape, &gates, h, g)?;
    Ok((tape.value(a).item(), tape.value(b).item()))
}

/// Scalar pieces of one network's objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub node: f64,
    pub structure: f64,
}

/// `L = L_CE + mu * L_node + rho * L_struct` for each network.
pub fn total_losses(phi: LossParts, psi: LossParts, mu: f64, rho: f64) -> (f64, f64) {
    let total = |p: LossParts| p.ce + mu * p.node + rho * p.structure;
    (total(phi), total(psi))
}

/// Tape version of one network's objective.
pub fn total_loss_on_tape(tape: &mut Tape, ce: Var, node: Var, structure: Var, mu: f64, rho: f64) -> Result<Var, TensorError> {
    let mut total = ce;
    if mu != 0.0 {
        let n = tape.scale(node, mu)?;
        total = tape.add(total, n)?;
    }
    if rho != 0.0 {
        let s = tape.scale(structure, rho)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Splits;

    fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
    }

    /// Six nodes, edges of the two-network illustration: v1..v6 -> 0..5.
    fn six_node_graph() -> Graph {
        let edges = [(0, 1), (0, 2), (0, 3), (0, 4), (1, 2), (2, 5), (3, 4)];
        Graph::new(Tensor::zeros(6, 2), vec![0; 6], 1, &edges, Splits::default()).unwrap()
    }

    #[test]
    fn assignment_validation() {
        assert!(matches!(
            ActionAssignment::new(vec![0, 1], vec![0, 2], vec![0, 0]),
            Err(DistillError::BadBit { .. })
        ));
        assert!(matches!(
            ActionAssignment::new(vec![0, 0], vec![0, 1], vec![0, 0]),
            Err(DistillError::DuplicateNode(0))
        ));
        assert!(matches!(
            ActionAssignment::new(vec![0], vec![0, 1], vec![0]),
            Err(DistillError::Length { .. })
        ));
    }

    #[test]
    fn node_losses_by_hand() {
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.9, 0.1]]);
        let q = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let a = ActionAssignment::new(vec![0, 1], vec![0, 1], vec![0, 0]).unwrap();
        let (l_phi, l_psi) = node_distill_losses(&a, &p, &q).unwrap();
        assert!((l_psi - kl(&[0.9, 0.1], &[0.5, 0.5])).abs() < 1e-12);
        assert!((l_phi - kl(&[0.5, 0.5], &[0.9, 0.1])).abs() < 1e-12);
    }

    #[test]
    fn all_zero_bits_silence_phi_side() {
        let p = Tensor::from_rows(&[vec![0.7, 0.3], vec![0.2, 0.8]]);
        let q = Tensor::from_rows(&[vec![0.4, 0.6], vec![0.5, 0.5]]);
        let a = ActionAssignment::new(vec![0, 1], vec![0, 0], vec![1, 1]).unwrap();
        let (l_phi, l_psi) = node_distill_losses(&a, &p, &q).unwrap();
        assert_eq!(l_phi, 0.0);
        assert!(l_psi > 0.0);
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let p = Tensor::from_rows(&[vec![0.7, 0.7]]);
        let a = ActionAssignment::new(vec![0], vec![0], vec![0]).unwrap();
        assert_eq!(
            node_distill_losses(&a, &p, &p).unwrap_err(),
            DistillError::NotNormalized(0)
        );
    }

    #[test]
    fn neighborhood_selection_matches_illustration() {
        let g = six_node_graph();
        // v1, v4, v5 choose phi; v2, v3, v6 choose psi.
        let a = ActionAssignment::new((0..6).collect(), vec![0, 1, 1, 0, 0, 1], vec![1; 6]).unwrap();
        let sets = select_neighborhoods(&a, &g);
        assert_eq!(sets.phi[0], vec![3, 4]);
        assert!(sets.psi[0].is_empty());
        assert_eq!(sets.psi[2], vec![1, 5]);
        assert!(sets.phi[2].is_empty());
    }

    #[test]
    fn all_zero_bits_select_every_batch_neighbor() {
        let g = six_node_graph();
        let a = ActionAssignment::new(vec![0, 1, 2, 3], vec![0; 4], vec![0; 4]).unwrap();
        let sets = select_neighborhoods(&a, &g);
        assert_eq!(sets.phi[0], vec![1, 2, 3]);
        assert_eq!(sets.phi[2], vec![0, 1]);
        assert!(sets.psi.iter().all(Vec::is_empty));
    }

    #[test]
    fn similarity_distribution_cases() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 0.0]]);
        assert_eq!(similarity_distribution(&h, 0, &[2]).unwrap(), vec![1.0]);
        assert_eq!(similarity_distribution(&h, 0, &[]).unwrap_err(), DistillError::EmptySet);
        let d = similarity_distribution(&h, 0, &[1, 2, 3]).unwrap();
        let e = [0f64.exp(), (0.5f64.sqrt()).exp(), (-1f64).exp()];
        let z: f64 = e.iter().sum();
        for (got, want) in d.iter().zip(e.iter().map(|x| x / z)) {
            assert!((got - want).abs() < 1e-12);
        }
        let equal = similarity_distribution(&h, 2, &[0, 1]).unwrap();
        assert!((equal[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn struct_losses_vanish_without_structure_actions() {
        let g = six_node_graph();
        let h1 = Tensor::from_rows(&(0..6).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>());
        let h2 = Tensor::from_rows(&(0..6).map(|i| vec![1.0, (i * i) as f64]).collect::<Vec<_>>());
        let a = ActionAssignment::new((0..6).collect(), vec![0, 1, 1, 0, 0, 1], vec![0; 6]).unwrap();
        let sets = select_neighborhoods(&a, &g);
        assert_eq!(struct_distill_losses(&a, &sets, &h1, &h2).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn total_losses_combine() {
        let phi = LossParts {
            ce: 1.0,
            node: 0.5,
            structure: 0.25,
        };
        let psi = LossParts {
            ce: 2.0,
            node: 0.0,
            structure: 1.0,
        };
        assert_eq!(total_losses(phi, psi, 0.0, 0.0), (1.0, 2.0));
        assert_eq!(total_losses(phi, psi, 1.0, 2.0), (2.0, 4.0));
    }
}
