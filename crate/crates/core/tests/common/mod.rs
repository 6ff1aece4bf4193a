#![allow(dead_code)]

pub mod gradsuite;

use std::path::Path;

use freekd::graph::Splits;
use freekd::{Graph, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new([rows, cols], data).unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximized over every entry. The floor
/// sits above the rounding noise of a central difference at `H` (about
/// `1e-10` for losses of order ten), so exact zeros compare as zeros.
pub fn max_rel_error(
    params: &[Tensor],
    analytic: &[Tensor],
    mut loss: impl FnMut(&[Tensor]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (p, g) in analytic.iter().enumerate() {
        assert_eq!(g.shape(), params[p].shape());
        for k in 0..params[p].len() {
            let x = params[p].data()[k];
            work[p].data_mut()[k] = x + H;
            let up = loss(&work);
            work[p].data_mut()[k] = x - H;
            let down = loss(&work);
            work[p].data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * H);
            let a = g.data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if std::env::var("GRAD_DEBUG").is_ok() && err > 1e-4 {
                eprintln!("param {p} entry {k}: analytic {a:e} numeric {numeric:e} err {err:e}");
            }
            worst = worst.max(err);
        }
    }
    worst
}

/// Gradient check for a function of tensors built directly on a tape.
pub fn check_fn(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    max_rel_error(inputs, &analytic, |xs| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    })
}

/// Scalar `sum(c * x)` with fixed random coefficients, so every output entry
/// contributes with a distinct weight.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let [r, c] = tape.value(x).shape();
    let coef = random_tensor(r, c, 1.0, &mut rng(seed ^ 0x9e37));
    let y = tape.mul_const(x, &coef).unwrap();
    tape.sum(y).unwrap()
}

/// Small random connected-ish graph with every node labeled.
pub fn random_graph(seed: u64, n: usize, features: usize, classes: usize) -> Graph {
    let mut r = rng(seed);
    let x = random_tensor(n, features, 1.0, &mut r);
    let labels: Vec<usize> = (0..n).map(|i| if i < classes { i } else { r.random_range(0..classes) }).collect();
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (r.random_range(0..i), i)).collect();
    for _ in 0..n {
        let (a, b) = (r.random_range(0..n), r.random_range(0..n));
        edges.push((a, b));
    }
    let all: Vec<usize> = (0..n).collect();
    let splits = Splits {
        train: all[..n / 2].to_vec(),
        val: all[n / 2..3 * n / 4].to_vec(),
        test: all[3 * n / 4..].to_vec(),
    };
    Graph::new(x, labels, classes, &edges, splits).unwrap()
}

/// Three nodes `a - b - c`, two features, two classes.
pub fn write_three_node_fixture(dir: &Path) {
    std::fs::create_dir_all(dir.join("splits")).unwrap();
    std::fs::write(dir.join("nodes.tsv"), "a\t1.0\t0.0\nb\t0.5\t0.5\nc\t0.0\t1.0\n").unwrap();
    std::fs::write(dir.join("edges.tsv"), "a\tb\nb\tc\n").unwrap();
    std::fs::write(dir.join("labels.tsv"), "a\t0\nb\t0\nc\t1\n").unwrap();
    std::fs::write(dir.join("splits/train.txt"), "a\n").unwrap();
    std::fs::write(dir.join("splits/val.txt"), "b\n").unwrap();
    std::fs::write(dir.join("splits/test.txt"), "c\n").unwrap();
}

/// Two fixed states whose better arms differ (arm 1 pays 1 in the first
/// state, arm 0 in the second). Runs REINFORCE with a zero baseline and
/// returns the number of updates until the better arm has probability above
/// 0.9 in both states, or `None` within `max_updates`.
pub fn bandit_updates_to_converge(seed: u64, lr: f64, samples: usize, max_updates: usize) -> Option<usize> {
    use freekd::agent::{policy_act, ActionRecord};
    use freekd::{policy_update, PolicyNet};
    let mut r = rng(seed);
    let states = [vec![1.0, 0.0, 0.5, -0.5], vec![0.0, 1.0, -0.5, 0.5]];
    let best = [1u8, 0u8];
    let mut net = PolicyNet::new(4, &mut r);
    let mut unused = PolicyNet::new(6, &mut r);
    for update in 0..max_updates {
        let probs = net.probabilities(&Tensor::from_rows(&states)).unwrap();
        if (0..2).all(|s| probs.get(s, best[s] as usize) > 0.9) {
            return Some(update);
        }
        let mut records = Vec::new();
        for (s, state) in states.iter().enumerate() {
            for _ in 0..samples {
                let d = policy_act(&net, state, &mut r).unwrap();
                records.push(ActionRecord {
                    node: s,
                    node_state: state.clone(),
                    a1: d.action,
                    log_prob1: d.log_prob,
                    struct_state: None,
                    a2: 0,
                    log_prob2: 0.0,
                    reward: f64::from(u8::from(d.action == best[s])),
                    baseline: 0.0,
                });
            }
        }
        policy_update(&records, &mut net, &mut unused, lr).unwrap();
    }
    None
}

/// Fraction of `draws` samples that pick action 0, next to the policy's
/// probability for it.
pub fn sampling_frequency(seed: u64, draws: usize) -> (f64, f64) {
    use freekd::{policy_act, PolicyNet};
    let mut r = rng(seed);
    let net = PolicyNet::new(6, &mut r);
    let state = random_tensor(1, 6, 2.0, &mut r);
    let p0 = net.probabilities(&state).unwrap().get(0, 0);
    let zeros = (0..draws)
        .filter(|_| policy_act(&net, state.row(0), &mut r).unwrap().action == 0)
        .count();
    (zeros as f64 / draws as f64, p0)
}

pub struct RewardFixture {
    pub name: &'static str,
    pub batch: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub losses: freekd::agent::NodeLosses,
    pub gamma: f64,
    pub expected: f64,
}

/// Hand-worked rewards. Node losses are (phi, psi) per node id; nodes
/// without an entry are unlabeled.
pub fn reward_fixtures() -> Vec<RewardFixture> {
    use freekd::agent::NodeLosses;
    let losses = |pairs: &[(usize, f64, f64)]| {
        let mut l = NodeLosses::new(8);
        for &(i, a, b) in pairs {
            l.set(i, a, b);
        }
        l
    };
    let two = losses(&[(0, 0.2, 0.1), (1, 0.4, 0.3)]);
    let three = losses(&[(0, 0.1, 0.4), (1, 0.2, 0.5), (2, 0.3, 0.6)]);
    vec![
        // Batch mean (0.3 + 0.7) / 2 = 0.5; neighbor sum 0.3.
        RewardFixture {
            name: "two-node worked example",
            batch: vec![0, 1],
            neighbors: vec![0],
            losses: two.clone(),
            gamma: 0.5,
            expected: -0.65,
        },
        RewardFixture {
            name: "no neighborhood weight",
            batch: vec![0, 1],
            neighbors: vec![0],
            losses: two,
            gamma: 0.0,
            expected: -0.5,
        },
        RewardFixture {
            name: "all losses zero",
            batch: vec![0, 1, 2],
            neighbors: vec![1, 2],
            losses: losses(&[(0, 0.0, 0.0), (1, 0.0, 0.0), (2, 0.0, 0.0)]),
            gamma: 0.7,
            expected: 0.0,
        },
        // Sums 0.5, 0.7, 0.9: batch mean 0.7, neighbor mean 0.8.
        RewardFixture {
            name: "three-node batch, two neighbors",
            batch: vec![0, 1, 2],
            neighbors: vec![1, 2],
            losses: three.clone(),
            gamma: 0.3,
            expected: -0.94,
        },
        // Node 5 has no label, so only node 0 (sum 0.5) counts.
        RewardFixture {
            name: "unlabeled neighbor skipped",
            batch: vec![0, 1, 2],
            neighbors: vec![5, 0],
            losses: three.clone(),
            gamma: 1.0,
            expected: -1.2,
        },
        RewardFixture {
            name: "isolated node",
            batch: vec![0, 1, 2],
            neighbors: vec![],
            losses: three,
            gamma: 0.3,
            expected: -0.7,
        },
    ]
}
