//! Central-difference checks shared by the gradient tests and the
//! acceptance run. Each function returns the worst relative error for one
//! seed.

use std::sync::Arc;

use freekd::agent::PolicyNet;
use freekd::distill::{
    node_distill_on_tape, select_neighborhoods, struct_distill_on_tape, ActionAssignment, DistillGates,
};
use freekd::models::{per_node_ce, ModelSpec};
use freekd::tensor::CsrMatrix;
use freekd::{Arch, GnnModel, GraphOps, Tape, Tensor, Var};
use rand::Rng;

use super::{check_fn, max_rel_error, project, random_graph, random_tensor, rng};

pub fn primitives(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = random_tensor(4, 3, 1.0, &mut r);
    let b = random_tensor(3, 5, 1.0, &mut r);
    let c = random_tensor(4, 3, 1.0, &mut r);
    let row = random_tensor(1, 3, 1.0, &mut r);
    let pos = random_tensor(4, 3, 1.0, &mut r).map(|x| x.abs() + 0.2);
    let mut worst: f64 = 0.0;

    worst = worst.max(check_fn(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, seed)
    }));
    worst = worst.max(check_fn(&[a.clone(), c.clone(), row.clone()], |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        let y = t.add_row(y, v[2]).unwrap();
        let y = t.mul(y, v[1]).unwrap();
        let y = t.add_scalar(y, 0.3).unwrap();
        let y = t.scale(y, -1.7).unwrap();
        project(t, y, seed)
    }));
    worst = worst.max(check_fn(&[a.clone(), c.clone()], |t, v| {
        let y = t.concat_cols(&[v[0], v[1], v[0]]).unwrap();
        let p = t.relu(y).unwrap();
        let q = t.elu(y).unwrap();
        let s = t.leaky_relu(y, 0.2).unwrap();
        let u = t.tanh(y).unwrap();
        let e = t.exp(y).unwrap();
        let all = t.concat_cols(&[p, q, s, u, e]).unwrap();
        project(t, all, seed)
    }));
    worst = worst.max(check_fn(&[pos.clone()], |t, v| {
        let y = t.log(v[0]).unwrap();
        project(t, y, seed)
    }));
    worst = worst.max(check_fn(&[a.clone()], |t, v| {
        let s = t.softmax_rows(v[0]).unwrap();
        let g = t.gather_rows(s, &[2, 0, 2]).unwrap();
        let p = t.pick(s, &[(0, 1), (3, 2), (0, 1)]).unwrap();
        let m = t.mean(g).unwrap();
        let m = t.scale(m, 2.0).unwrap();
        let p = project(t, p, seed);
        let g = project(t, g, seed + 1);
        let s1 = t.add(m, p).unwrap();
        t.add(s1, g).unwrap()
    }));
    worst = worst.max(check_fn(&[random_tensor(7, 1, 2.0, &mut r)], |t, v| {
        let s = t.segment_softmax(v[0], &[0, 3, 4, 7]).unwrap();
        let l = t.log(s).unwrap();
        project(t, l, seed)
    }));
    worst = worst.max(check_fn(&[a.clone()], |t, v| {
        let y = t.row_cosine(v[0], &[(0, 1), (1, 0), (2, 3), (3, 3), (0, 2)]).unwrap();
        project(t, y, seed)
    }));

    // Sparse products: fixed pattern, dense side and edge weights vary.
    let entries: Vec<Vec<(usize, f64)>> = (0..4)
        .map(|i| (0..4).filter(|&j| (i + j) % 2 == 0 || j == 3).map(|j| (j, r.random_range(-1.0..1.0))).collect())
        .collect();
    let m = Arc::new(CsrMatrix::from_rows(4, &entries));
    let w = random_tensor(m.nnz(), 1, 1.0, &mut r);
    worst = worst.max(check_fn(&[a.clone()], |t, v| {
        let y = t.spmm(&m, v[0]).unwrap();
        project(t, y, seed)
    }));
    worst = worst.max(check_fn(&[w, a], |t, v| {
        let y = t.edge_spmm(&m, v[0], v[1]).unwrap();
        project(t, y, seed)
    }));
    worst
}

/// Two-layer tanh MLP with a softmax cross-entropy head.
pub fn tanh_mlp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let x = random_tensor(5, 4, 1.0, &mut r);
    let params = [
        random_tensor(4, 6, 0.8, &mut r),
        random_tensor(1, 6, 0.2, &mut r),
        random_tensor(6, 3, 0.8, &mut r),
        random_tensor(1, 3, 0.2, &mut r),
    ];
    check_fn(&params, |t, v| {
        let x = t.constant(x.clone());
        let h = t.matmul(x, v[0]).unwrap();
        let h = t.add_row(h, v[1]).unwrap();
        let h = t.tanh(h).unwrap();
        let o = t.matmul(h, v[2]).unwrap();
        let o = t.add_row(o, v[3]).unwrap();
        let p = t.softmax_rows(o).unwrap();
        let l = t.log(p).unwrap();
        let l = t.pick(l, &[(0, 0), (1, 2), (2, 1), (3, 0), (4, 2)]).unwrap();
        let s = t.sum(l).unwrap();
        t.scale(s, -1.0).unwrap()
    })
}

/// A full network: summed cross-entropy over labeled nodes plus a projection
/// of the final hidden layer, so every parameter is exercised.
pub fn gnn(arch: Arch, layers: usize, seed: u64) -> f64 {
    let graph = random_graph(seed, 9, 4, 3);
    let ops = GraphOps::new(&graph);
    let spec = ModelSpec {
        arch,
        input_dim: 4,
        hidden: 4,
        classes: 3,
        layers,
        heads: 2,
        dropout: 0.5,
        attention_dropout: 0.5,
    };
    let mut r = rng(seed);
    let mut model = GnnModel::new(&spec, &mut r).unwrap();
    // Nonzero biases so their gradients are generic.
    let params: Vec<Tensor> = model
        .params()
        .iter()
        .map(|p| random_tensor(p.rows(), p.cols(), 0.8, &mut r))
        .collect();
    let nodes: Vec<usize> = (0..graph.num_nodes()).collect();
    let loss = |model: &GnnModel, tape: &mut Tape| -> (Vec<Var>, Var) {
        let fw = model.forward(tape, &ops, graph.features(), false, &mut rng(0)).unwrap();
        let ce = per_node_ce(tape, fw.probs, graph.labels(), &nodes).unwrap();
        let ce = tape.sum(ce).unwrap();
        let h = project(tape, fw.hidden, seed);
        (fw.params, tape.add(ce, h).unwrap())
    };
    model.set_params(params.clone());
    let mut tape = Tape::new();
    let (vars, l) = loss(&model, &mut tape);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    max_rel_error(&params, &analytic, |ps| {
        let mut m = model.clone();
        m.set_params(ps.to_vec());
        let mut tape = Tape::new();
        let (_, l) = loss(&m, &mut tape);
        tape.value(l).item()
    })
}

/// Policy network of the given input width; loss is a projection of the
/// log-probabilities.
pub fn policy(input: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut net = PolicyNet::new(input, &mut r);
    let params: Vec<Tensor> = net
        .params()
        .iter()
        .map(|p| random_tensor(p.rows(), p.cols(), 0.5, &mut r))
        .collect();
    let states = random_tensor(6, input, 1.0, &mut r);
    let loss = |net: &PolicyNet, tape: &mut Tape| {
        let s = tape.constant(states.clone());
        let (vars, p) = net.forward(tape, s).unwrap();
        let l = tape.log(p).unwrap();
        (vars, project(tape, l, seed))
    };
    for (dst, src) in net.params_mut().iter_mut().zip(&params) {
        *dst = src.clone();
    }
    let mut tape = Tape::new();
    let (vars, l) = loss(&net, &mut tape);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    max_rel_error(&params, &analytic, |ps| {
        let mut n = net.clone();
        for (dst, src) in n.params_mut().iter_mut().zip(ps) {
            *dst = src.clone();
        }
        let mut tape = Tape::new();
        let (_, l) = loss(&n, &mut tape);
        tape.value(l).item()
    })
}

pub fn random_gates(seed: u64, n: usize) -> (freekd::Graph, DistillGates) {
    let graph = random_graph(seed, n, 3, 3);
    let mut r = rng(seed ^ 0xabc);
    let nodes: Vec<usize> = (0..n).collect();
    let a1 = (0..n).map(|_| r.random_range(0..2u8)).collect();
    let a2 = (0..n).map(|_| r.random_range(0..2u8)).collect();
    let asg = ActionAssignment::new(nodes, a1, a2).unwrap();
    let sets = select_neighborhoods(&asg, &graph);
    let gates = DistillGates::from_assignment(&asg, sets);
    (graph, gates)
}

/// Node-level terms differentiated with respect to the student's logits;
/// `which` picks the student (0 = phi, 1 = psi).
pub fn node_distill(seed: u64, which: usize) -> f64 {
    let n = 8;
    let (_, gates) = random_gates(seed, n);
    let mut r = rng(seed);
    let logits = [random_tensor(n, 3, 2.0, &mut r), random_tensor(n, 3, 2.0, &mut r)];
    let other = logits[1 - which].clone();
    check_fn(&[logits[which].clone()], |t, v| {
        let o = t.constant(other.clone());
        let ps = t.softmax_rows(v[0]).unwrap();
        let po = t.softmax_rows(o).unwrap();
        let (pp, pq) = if which == 0 { (ps, po) } else { (po, ps) };
        let (l_phi, l_psi) = node_distill_on_tape(t, &gates, pp, pq).unwrap();
        if which == 0 {
            l_phi
        } else {
            l_psi
        }
    })
}

/// Structure-level terms differentiated with respect to the student's
/// embeddings.
pub fn struct_distill(seed: u64, which: usize) -> f64 {
    let n = 10;
    let (_, gates) = random_gates(seed, n);
    let mut r = rng(seed);
    let h = [random_tensor(n, 4, 1.0, &mut r), random_tensor(n, 4, 1.0, &mut r)];
    let other = h[1 - which].clone();
    check_fn(&[h[which].clone()], |t, v| {
        let o = t.constant(other.clone());
        let (hp, hq) = if which == 0 { (v[0], o) } else { (o, v[0]) };
        let (l_phi, l_psi) = struct_distill_on_tape(t, &gates, hp, hq).unwrap();
        if which == 0 {
            l_phi
        } else {
            l_psi
        }
    })
}
