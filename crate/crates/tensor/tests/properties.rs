use lphom_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forward(seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::randn([2, 8, 8, 8], &mut rng));
    let w = tape.constant(Tensor::randn([8, 8, 3, 3], &mut rng));
    let g = tape.constant(Tensor::full([8], 1.0));
    let b = tape.constant(Tensor::zeros([8]));
    let h = tape.conv2d(x, w, None, 1, 1).unwrap();
    let h = tape.group_norm(h, g, b, 8).unwrap();
    let h = tape.silu(h).unwrap();
    tape.value(h).clone()
}

#[test]
fn identical_seed_gives_bit_identical_output() {
    assert_eq!(forward(11).data(), forward(11).data());
    assert_ne!(forward(11).data(), forward(12).data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_then_transpose_restores_spatial_dims(
        half in 2usize..9,
        k in 2usize..5,
        stride in 1usize..3,
    ) {
        // pad chosen so the strided conv maps 2*half-ish sizes exactly.
        let pad = (k - stride + 1) / 2;
        let h = half * stride;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, h, h]));
        let w = tape.constant(Tensor::zeros([3, 2, k, k]));
        if let Ok(down) = tape.conv2d(x, w, None, stride, pad) {
            let wt = tape.constant(Tensor::zeros([3, 2, k, k]));
            if let Ok(up) = tape.conv_transpose2d(down, wt, None, stride, pad) {
                let expect = (tape.shape(down)[2] - 1) * stride + k - 2 * pad;
                prop_assert_eq!(tape.shape(up)[2], expect);
                if (h + 2 * pad - k) % stride == 0 {
                    prop_assert_eq!(tape.shape(up), &[1, 2, h, h]);
                }
            }
        }
    }

    #[test]
    fn conv_output_size_formula(h in 3usize..20, k in 1usize..4, stride in 1usize..4, pad in 0usize..3) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 1, h, h]));
        let w = tape.constant(Tensor::zeros([1, 1, k, k]));
        let y = tape.conv2d(x, w, None, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y)[2], (h + 2 * pad - k) / stride + 1);
    }
}
