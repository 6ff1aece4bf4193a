//! Every variant over a few seeds on the default block-model graph.
//!
//! `cargo run --release --example ablation -- 10 freekd,independent [feature_noise] [p_in]`

use std::time::Instant;

use freekd::runs::{report_csv, summarize, RunSummary};
use freekd::{generate_sbm, trainer::run_variant, SbmParams, TrainConfig, Variant};
use rayon::prelude::*;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3);
    let variants: Vec<Variant> = match args.next() {
        Some(list) => list.split(',').map(|v| v.parse().map_err(anyhow::Error::msg)).collect::<Result<_, _>>()?,
        None => Variant::ALL.to_vec(),
    };
    let defaults = SbmParams::default();
    let feature_noise: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(defaults.feature_noise);
    let p_in: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(defaults.p_in);

    let start = Instant::now();
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| (0..seeds).map(move |s| (v, s))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let graph = generate_sbm(&SbmParams {
                seed,
                feature_noise,
                p_in,
                ..SbmParams::default()
            })?;
            let cfg = TrainConfig {
                seed,
                variant,
                ..TrainConfig::default()
            };
            let out = run_variant(variant, &graph, &cfg)?;
            Ok(RunSummary::new(&cfg, &out.metrics))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    print!("{}", report_csv(&summarize(&runs)));
    eprintln!("{} runs in {:.1?}", runs.len(), start.elapsed());
    Ok(())
}
