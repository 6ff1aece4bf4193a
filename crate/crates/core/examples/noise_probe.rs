//! Train a pair, then perturb phi's weights with Gaussian noise and watch how
//! often the node-level policy still picks phi as the teacher.

use freekd::trainer::probe_means;
use freekd::{generate_sbm, noise_probe, train, SbmParams, TrainConfig};

fn main() -> anyhow::Result<()> {
    let graph = generate_sbm(&SbmParams::default())?;
    let outcome = train(&graph, &TrainConfig::default())?;
    let sigmas = [0.0, 0.5, 1.0, 2.0];
    let nodes: Vec<usize> = (0..graph.num_nodes()).collect();
    let rows = noise_probe(&outcome, &sigmas, &graph, &nodes, 0)?;
    for (s, m) in sigmas.iter().zip(probe_means(&rows, &sigmas)) {
        println!("sigma {s:.1}: mean p(phi teaches) {m:.4}");
    }
    Ok(())
}
