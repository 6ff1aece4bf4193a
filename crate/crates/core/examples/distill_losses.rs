//! Node- and structure-level distillation losses for a hand-picked direction
//! assignment on a small tree.

use freekd::distill::{node_distill_losses, select_neighborhoods, struct_distill_losses, ActionAssignment};
use freekd::graph::Splits;
use freekd::{Graph, Tensor};

fn main() -> anyhow::Result<()> {
    let features = Tensor::from_rows(&vec![vec![1.0]; 6]);
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (3, 5)];
    let splits = Splits {
        train: vec![0, 1, 2, 3, 4, 5],
        val: vec![],
        test: vec![],
    };
    let graph = Graph::new(features, vec![0, 0, 0, 1, 1, 1], 2, &edges, splits)?;

    let p_phi = Tensor::from_rows(&[
        vec![0.9, 0.1],
        vec![0.8, 0.2],
        vec![0.4, 0.6],
        vec![0.2, 0.8],
        vec![0.1, 0.9],
        vec![0.3, 0.7],
    ]);
    let p_psi = Tensor::from_rows(&[
        vec![0.6, 0.4],
        vec![0.5, 0.5],
        vec![0.3, 0.7],
        vec![0.5, 0.5],
        vec![0.3, 0.7],
        vec![0.2, 0.8],
    ]);
    let h_phi = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.3], vec![0.2, 1.0], vec![0.0, 1.0], vec![-0.1, 1.0], vec![0.6, 0.8]]);
    let h_psi = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.7, 0.1], vec![0.4, 0.9], vec![0.3, 0.6], vec![0.0, 1.0], vec![0.9, -0.2]]);

    // phi teaches nodes 0, 1, 2; psi teaches 3, 4, 5. Nodes 1 and 3 propagate structure.
    let assignment = ActionAssignment::new(vec![0, 1, 2, 3, 4, 5], vec![0, 0, 0, 1, 1, 1], vec![0, 1, 0, 1, 0, 0])?;
    let sets = select_neighborhoods(&assignment, &graph);
    let (node_phi, node_psi) = node_distill_losses(&assignment, &p_phi, &p_psi)?;
    let (struct_phi, struct_psi) = struct_distill_losses(&assignment, &sets, &h_phi, &h_psi)?;
    println!("node-level   phi {node_phi:.6}  psi {node_psi:.6}");
    println!("struct-level phi {struct_phi:.6}  psi {struct_psi:.6}");

    let (swap_phi, swap_psi) = node_distill_losses(&assignment.swapped(), &p_phi, &p_psi)?;
    println!("swapped directions: node-level phi {swap_phi:.6}  psi {swap_psi:.6}");
    Ok(())
}
