//! Forward passes of the three architectures on one graph, before any training.

use freekd::models::ModelSpec;
use freekd::{evaluate_micro_f1, generate_sbm, Arch, GnnModel, GraphOps, SbmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let graph = generate_sbm(&SbmParams::default())?;
    let ops = GraphOps::new(&graph);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for arch in [Arch::Gcn, Arch::Sage, Arch::Gat] {
        let spec = ModelSpec {
            arch,
            input_dim: graph.num_features(),
            hidden: 64,
            classes: graph.num_classes(),
            layers: 2,
            heads: 8,
            dropout: 0.5,
            attention_dropout: 0.5,
        };
        let model = GnnModel::new(&spec, &mut rng)?;
        let out = model.evaluate(&ops, &graph, graph.train_nodes())?;
        let mean_ce = out.ce.iter().map(|(_, l)| l).sum::<f64>() / out.ce.len() as f64;
        let f1 = evaluate_micro_f1(&out.probs.argmax_rows(), graph.labels(), graph.test_nodes())?;
        println!(
            "{arch}: hidden {:?}  probs {:?}  train CE {mean_ce:.4}  test F1 {f1:.3}",
            out.hidden.shape(),
            out.probs.shape()
        );
    }
    Ok(())
}
