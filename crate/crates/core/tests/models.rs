mod common;

use common::{random_graph, random_tensor, rng};
use freekd::graph::Splits;
use freekd::models::{per_node_ce, ModelSpec};
use freekd::{Arch, GnnModel, Graph, GraphOps, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn spec(arch: Arch, input: usize, hidden: usize, classes: usize, layers: usize, heads: usize) -> ModelSpec {
    ModelSpec {
        arch,
        input_dim: input,
        hidden,
        classes,
        layers,
        heads,
        dropout: 0.5,
        attention_dropout: 0.5,
    }
}

fn with_params(spec: &ModelSpec, params: Vec<Tensor>) -> GnnModel {
    let mut m = GnnModel::new(spec, &mut rng(0)).unwrap();
    m.set_params(params);
    m
}

fn path_graph(x: Tensor, edges: &[(usize, usize)]) -> Graph {
    let n = x.rows();
    let splits = Splits {
        train: (0..n).collect(),
        val: vec![],
        test: vec![],
    };
    Graph::new(x, vec![0; n], 2, edges, splits).unwrap()
}

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() < tol, "{a} vs {b}");
}

#[test]
fn gcn_two_node_path_matches_hand_product() {
    // A + I = all ones, degrees 2, so every entry of the operator is 1/2.
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
    let g = path_graph(x, &[(0, 1)]);
    let w = Tensor::from_rows(&[vec![0.5, -1.0], vec![0.25, 2.0]]);
    let b = Tensor::from_rows(&[vec![0.1, -0.2]]);
    let m = with_params(&spec(Arch::Gcn, 2, 2, 2, 1, 1), vec![w, b]);
    let r = m.evaluate(&GraphOps::new(&g), &g, &[]).unwrap();
    // mean row = [2, 0.5]; times W = [1.125, -1.0]; plus b.
    for i in 0..2 {
        close(r.logits.get(i, 0), 1.225, 1e-12);
        close(r.logits.get(i, 1), -1.2, 1e-12);
    }
}

#[test]
fn sage_three_node_path_matches_hand_computation() {
    let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![4.0]]);
    let g = path_graph(x, &[(0, 1), (1, 2)]);
    // Self weight 1, neighbor weight 10, one output column plus a zero one.
    let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![10.0, 0.0]]);
    let m = with_params(&spec(Arch::Sage, 1, 1, 2, 1, 1), vec![w, Tensor::zeros(1, 2)]);
    let r = m.evaluate(&GraphOps::new(&g), &g, &[]).unwrap();
    close(r.logits.get(0, 0), 1.0 + 10.0 * 2.0, 1e-12);
    close(r.logits.get(1, 0), 2.0 + 10.0 * 2.5, 1e-12);
    close(r.logits.get(2, 0), 4.0 + 10.0 * 2.0, 1e-12);
}

#[test]
fn sage_isolated_node_has_zero_neighbor_term_and_shared_features_give_that_feature() {
    let x = Tensor::from_rows(&[vec![3.0, 1.0], vec![5.0, 7.0], vec![5.0, 7.0], vec![-2.0, 0.5]]);
    let g = path_graph(x.clone(), &[(0, 1), (0, 2)]);
    let ops = GraphOps::new(&g);
    let mean = ops.neighbor_mean.matmul_dense(&x).unwrap();
    assert_eq!(mean.row(0), &[5.0, 7.0]);
    assert_eq!(mean.row(3), &[0.0, 0.0]);
}

#[test]
fn gat_three_node_single_head_matches_hand_attention() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let g = path_graph(x.clone(), &[(0, 1), (1, 2)]);
    let w = Tensor::from_rows(&[vec![1.0, -0.5], vec![0.5, 2.0]]);
    let a_dst = Tensor::column(vec![0.3, -0.7]);
    let a_src = Tensor::column(vec![-1.1, 0.4]);
    let b = Tensor::from_rows(&[vec![0.05, 0.0]]);
    let m = with_params(
        &spec(Arch::Gat, 2, 2, 2, 1, 1),
        vec![w.clone(), a_dst.clone(), a_src.clone(), b.clone()],
    );
    let r = m.evaluate(&GraphOps::new(&g), &g, &[]).unwrap();

    let z = x.matmul(&w).unwrap();
    let dot = |row: &[f64], a: &Tensor| row.iter().zip(a.data()).map(|(p, q)| p * q).sum::<f64>();
    let leaky = |v: f64| if v > 0.0 { v } else { 0.2 * v };
    let members = [vec![0, 1], vec![0, 1, 2], vec![1, 2]];
    for (i, js) in members.iter().enumerate() {
        let e: Vec<f64> = js
            .iter()
            .map(|&j| leaky(dot(z.row(i), &a_dst) + dot(z.row(j), &a_src)))
            .collect();
        let total: f64 = e.iter().map(|v| v.exp()).sum();
        for c in 0..2 {
            let expected: f64 = js
                .iter()
                .zip(&e)
                .map(|(&j, ej)| ej.exp() / total * z.get(j, c))
                .sum::<f64>()
                + b.get(0, c);
            close(r.logits.get(i, c), expected, 1e-12);
        }
    }
}

#[test]
fn gat_equal_scores_give_uniform_attention() {
    let g = random_graph(4, 7, 3, 2);
    let mut m = GnnModel::new(&spec(Arch::Gat, 3, 4, 2, 1, 2), &mut rng(1)).unwrap();
    let mut p = m.params().to_vec();
    for h in 0..2 {
        p[3 * h + 1] = Tensor::zeros(2, 1);
        p[3 * h + 2] = Tensor::zeros(2, 1);
    }
    m.set_params(p);
    let ops = GraphOps::new(&g);
    for alpha in m.first_layer_attention(&ops, g.features()).unwrap() {
        for i in 0..g.num_nodes() {
            let (lo, hi) = (ops.attention.indptr()[i], ops.attention.indptr()[i + 1]);
            let expected = 1.0 / (g.neighbors(i).len() + 1) as f64;
            for k in lo..hi {
                close(alpha.get(k, 0), expected, 1e-12);
            }
        }
    }
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::new();
    let c = 5;
    let uniform = tape.constant(Tensor::filled(2, c, 1.0 / c as f64));
    let ce = per_node_ce(&mut tape, uniform, &[0, 3], &[0, 1]).unwrap();
    for &v in tape.value(ce).data() {
        close(v, (c as f64).ln(), 1e-12);
    }
    let onehot = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0, 0.0]]));
    let ce = per_node_ce(&mut tape, onehot, &[1], &[0]).unwrap();
    assert_eq!(tape.value(ce).item(), 0.0);

    let logits = random_tensor(6, 4, 3.0, &mut rng(2));
    let labels = [0, 3, 1, 1, 2, 0];
    let l = tape.constant(logits.clone());
    let p = tape.softmax_rows(l).unwrap();
    let ce = per_node_ce(&mut tape, p, &labels, &[5, 0, 2]).unwrap();
    for (k, &i) in [5, 0, 2].iter().enumerate() {
        let row = logits.row(i);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        close(tape.value(ce).get(k, 0), lse - row[labels[i]], 1e-12);
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    for arch in [Arch::Gcn, Arch::Sage, Arch::Gat] {
        for seed in 0..4 {
            let g = random_graph(seed, 12, 5, 3);
            let mut perm: Vec<usize> = (0..12).collect();
            perm.shuffle(&mut rng(seed + 50));
            let pg = g.permuted(&perm).unwrap();
            let m = GnnModel::new(&spec(arch, 5, 8, 3, 2, 2), &mut rng(seed)).unwrap();
            let a = m.evaluate(&GraphOps::new(&g), &g, &[]).unwrap();
            let b = m.evaluate(&GraphOps::new(&pg), &pg, &[]).unwrap();
            for i in 0..12 {
                for (x, y) in a.probs.row(i).iter().zip(b.probs.row(perm[i])) {
                    close(*x, *y, 1e-12);
                }
                for (x, y) in a.hidden.row(i).iter().zip(b.hidden.row(perm[i])) {
                    close(*x, *y, 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn soft_labels_are_distributions(seed in 0u64..10_000, arch in 0usize..3, layers in 1usize..4) {
        let arch = [Arch::Gcn, Arch::Sage, Arch::Gat][arch];
        let g = random_graph(seed, 10, 4, 3);
        let m = GnnModel::new(&spec(arch, 4, 6, 3, layers, 2), &mut rng(seed)).unwrap();
        let nodes: Vec<usize> = (0..10).collect();
        let r = m.evaluate(&GraphOps::new(&g), &g, &nodes).unwrap();
        prop_assert_eq!(r.probs.shape(), [10, 3]);
        for i in 0..10 {
            let s: f64 = r.probs.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(r.probs.row(i).iter().all(|&p| p > 0.0 && p < 1.0));
        }
        prop_assert!(r.ce.iter().all(|&(_, l)| l >= 0.0));
    }
}
