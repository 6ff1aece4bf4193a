//! Generate a block-model graph, write it as a dataset directory, read it back.

use freekd::{generate_sbm, load_dataset, save_dataset, SbmParams};

fn main() -> anyhow::Result<()> {
    let params = SbmParams {
        seed: 3,
        ..SbmParams::default()
    };
    let graph = generate_sbm(&params)?;
    let dir = std::env::temp_dir().join("freekd-sbm-example");
    save_dataset(&graph, &dir)?;
    let back = load_dataset(&dir)?;

    let intra = back.edges().iter().filter(|(u, v)| back.labels()[*u] == back.labels()[*v]).count();
    println!("dataset in {}", dir.display());
    println!(
        "nodes {}  edges {} ({} within blocks)  features {}  classes {}",
        back.num_nodes(),
        back.num_edges(),
        intra,
        back.num_features(),
        back.num_classes()
    );
    println!(
        "train {}  val {}  test {}",
        back.train_nodes().len(),
        back.val_nodes().len(),
        back.test_nodes().len()
    );
    for f in ["nodes.tsv", "edges.tsv", "labels.tsv", "splits/train.txt"] {
        let p = dir.join(f);
        if p.exists() {
            println!("{f}: {} bytes", std::fs::metadata(p)?.len());
        }
    }
    Ok(())
}
