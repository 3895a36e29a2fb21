//! Per-op forward+backward timing at VAE-like sizes.
use std::time::Instant;

use lphom_tensor::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn time(name: &str, inputs: &[Tensor<f32>], f: impl Fn(&mut Tape<f32>, &[Var]) -> Var) {
    let reps = 10;
    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let y = f(&mut tape, &vars);
        let l = tape.mean(y).unwrap();
        tape.backward(l).unwrap();
    }
    println!("{name:<28} {:8.2} ms", start.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = &mut rng;
    let x1 = Tensor::<f32>::randn([16, 1, 64, 64], r);
    let x16 = Tensor::<f32>::randn([16, 16, 64, 64], r);
    let x32 = Tensor::<f32>::randn([16, 32, 32, 32], r);
    let g16 = Tensor::<f32>::full([16], 1.0);
    let b16 = Tensor::<f32>::zeros([16]);
    time("mean only 16x16x64x64", &[x16.clone()], |_, v| v[0]);
    time("silu 16@64", &[x16.clone()], |t, v| t.silu(v[0]).unwrap());
    time("groupnorm 16@64", &[x16.clone(), g16.clone(), b16.clone()], |t, v| t.group_norm(v[0], v[1], v[2], 8).unwrap());
    time("conv 1->16 @64", &[x1.clone(), Tensor::randn([16, 1, 3, 3], r), b16.clone()], |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()
    });
    time("conv 16->1 @64", &[x16.clone(), Tensor::randn([1, 16, 3, 3], r)], |t, v| t.conv2d(v[0], v[1], None, 1, 1).unwrap());
    time("conv 16->32 s2 @64", &[x16.clone(), Tensor::randn([32, 16, 3, 3], r)], |t, v| {
        t.conv2d(v[0], v[1], None, 2, 1).unwrap()
    });
    time("convT 32->16 @32->64", &[x32.clone(), Tensor::randn([32, 16, 4, 4], r)], |t, v| {
        t.conv_transpose2d(v[0], v[1], None, 2, 1).unwrap()
    });
    time("mse 1@64", &[x1.clone(), x1.clone()], |t, v| t.mse(v[0], v[1]).unwrap());
}
