//! The policy network and its REINFORCE update on a two-state contextual bandit.

use freekd::agent::{policy_act, ActionRecord};
use freekd::{policy_update, PolicyNet, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let states = [vec![1.0, 0.0, 0.5, -0.5], vec![0.0, 1.0, -0.5, 0.5]];
    let best = [1u8, 0u8];
    let mut net = PolicyNet::new(4, &mut rng);
    let mut unused = PolicyNet::new(6, &mut rng);

    for update in 0..=400 {
        let probs = net.probabilities(&Tensor::from_rows(&states))?;
        if update % 50 == 0 {
            println!(
                "update {update:>3}: p(best | s0) {:.3}  p(best | s1) {:.3}",
                probs.get(0, best[0] as usize),
                probs.get(1, best[1] as usize)
            );
        }
        let mut records = Vec::new();
        for (s, state) in states.iter().enumerate() {
            for _ in 0..32 {
                let d = policy_act(&net, state, &mut rng)?;
                records.push(ActionRecord {
                    node: s,
                    node_state: state.clone(),
                    a1: d.action,
                    log_prob1: d.log_prob,
                    struct_state: None,
                    a2: 0,
                    log_prob2: 0.0,
                    reward: f64::from(u8::from(d.action == best[s])),
                    baseline: 0.5,
                });
            }
        }
        policy_update(&records, &mut net, &mut unused, 0.01)?;
    }
    Ok(())
}
