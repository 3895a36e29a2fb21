//! Rough single-thread conv throughput probe: `cargo run --release --example throughput -p lphom-tensor`.

use std::time::Instant;

use lphom_tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for &(n, c, o, hw) in &[(16, 32, 32, 16), (16, 64, 64, 8), (16, 128, 128, 4), (16, 16, 32, 64), (16, 96, 32, 16)] {
        let x = Tensor::<f32>::randn([n, c, hw, hw], &mut rng);
        let w = Tensor::<f32>::randn([o, c, 3, 3], &mut rng);
        let reps = 20;
        let start = Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::new();
            let xv = tape.param(x.clone());
            let wv = tape.param(w.clone());
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let l = tape.mean(y).unwrap();
            tape.backward(l).unwrap();
        }
        let secs = start.elapsed().as_secs_f64() / reps as f64;
        let macs = (n * o * c * 9 * hw * hw) as f64 * 3.0;
        println!("n{n} c{c} o{o} {hw}x{hw}: {:.2} ms fwd+bwd, {:.1} GMAC/s", secs * 1e3, macs / secs / 1e9);
    }
}
