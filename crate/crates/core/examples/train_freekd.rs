//! Train one GCN pair with the agent on a block-model graph and compare it with
//! the same pair trained separately.
//!
//! `cargo run --release --example train_freekd -- [seed]`

use freekd::{generate_sbm, train, SbmParams, TrainConfig, Variant};

fn main() -> anyhow::Result<()> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let graph = generate_sbm(&SbmParams {
        seed,
        ..SbmParams::default()
    })?;
    for variant in [Variant::Independent, Variant::Freekd] {
        let cfg = TrainConfig {
            seed,
            variant,
            ..TrainConfig::default()
        };
        let m = train(&graph, &cfg)?.metrics;
        println!(
            "{variant:<12} test F1 phi {:.4} psi {:.4}  best epoch {} of {}",
            m.test_f1_phi,
            m.test_f1_psi,
            m.best_epoch,
            m.epochs.len()
        );
        if variant == Variant::Freekd {
            for e in m.epochs.iter().step_by(25) {
                println!(
                    "  epoch {:>3}  loss phi {:.4} psi {:.4}  mean reward {:.4}",
                    e.epoch,
                    e.loss_phi.unwrap_or(f64::NAN),
                    e.loss_psi.unwrap_or(f64::NAN),
                    e.mean_reward.unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}
