//! Reverse-mode gradients of a small tanh network against central differences.

use freekd::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new([rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss(x: &Tensor, w1: &Tensor, w2: &Tensor) -> (Tape, freekd::Var, [freekd::Var; 2]) {
    let mut tape = Tape::new();
    let x = tape.constant(x.clone());
    let a = tape.param(w1.clone());
    let b = tape.param(w2.clone());
    let h = tape.matmul(x, a).unwrap();
    let h = tape.tanh(h).unwrap();
    let o = tape.matmul(h, b).unwrap();
    let p = tape.softmax_rows(o).unwrap();
    let l = tape.log(p).unwrap();
    let l = tape.sum(l).unwrap();
    (tape, l, [a, b])
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(5, 4, &mut rng);
    let params = [random(4, 6, &mut rng), random(6, 3, &mut rng)];
    let (tape, l, vars) = loss(&x, &params[0], &params[1]);
    let grads = tape.backward(l).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for idx in 0..params[k].data().len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p[k].data_mut()[idx] += delta;
                let (t, l, _) = loss(&x, &p[0], &p[1]);
                t.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[idx];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    println!("loss {:.6}", tape.value(l).item());
    println!("max relative gradient error {worst:.2e}");
}
