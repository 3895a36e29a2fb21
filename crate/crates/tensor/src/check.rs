//! Central finite-difference gradient checking.
//!
//! The oracle only evaluates the forward pass; it never touches the adjoint
//! code it is checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Magnitudes below this are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per input.
    pub max_entries_per_input: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-3, max_entries_per_input: usize::MAX }
    }
}

/// Compare the tape gradient of `f` against central differences for every
/// input tensor.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_input: 0, worst_index: 0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (k, (&var, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.get(var).expect("parameter gradient").data().to_vec();
        let n = input.len();
        let stride = n.div_ceil(opts.max_entries_per_input.min(n)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_input = k;
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::SeedableRng;
    Tensor::randn(shape.to_vec(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

/// Reduce `out` to a scalar with fixed random weights so every output element
/// carries a distinct, well-scaled adjoint.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(randn(tape.shape(out), seed ^ 0xabcd));
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

type Case = (String, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn cases() -> Vec<Case> {
    let mut c: Vec<Case> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $f:expr) => {
            c.push(($name.to_string(), $inputs, Box::new($f)))
        };
    }
    for (i, &(stride, pad)) in [(1, 1), (2, 1), (2, 0), (1, 0)].iter().enumerate() {
        case!(format!("conv2d s{stride} p{pad}"), vec![randn(&[2, 3, 6, 5], 1 + i as u64), randn(&[4, 3, 3, 3], 2), randn(&[4], 3)], move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, 4)
        });
    }
    for &(k, stride, pad) in &[(4, 2, 1), (3, 1, 1), (2, 2, 0)] {
        case!(format!("conv_transpose2d k{k} s{stride} p{pad}"), vec![randn(&[2, 3, 4, 4], 5), randn(&[3, 2, k, k], 6), randn(&[2], 7)], move |t, v| {
            let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(t, y, 8)
        });
    }
    case!("linear", vec![randn(&[3, 5], 9), randn(&[4, 5], 10), randn(&[4], 11)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        project(t, y, 12)
    });
    case!("group_norm", vec![randn(&[2, 16, 3, 3], 13), randn(&[16], 14), randn(&[16], 15)], |t, v| {
        let y = t.group_norm(v[0], v[1], v[2], 8)?;
        project(t, y, 16)
    });
    let x = || vec![randn(&[2, 3, 4, 4], 17)];
    case!("silu", x(), |t, v| {
        let y = t.silu(v[0])?;
        project(t, y, 18)
    });
    case!("sigmoid", x(), |t, v| {
        let y = t.sigmoid(v[0])?;
        project(t, y, 19)
    });
    case!("relu", x(), |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 20)
    });
    case!("exp", x(), |t, v| {
        let y = t.exp(v[0])?;
        project(t, y, 21)
    });
    case!("square", x(), |t, v| {
        let y = t.square(v[0])?;
        project(t, y, 22)
    });
    case!("clamp", x(), |t, v| {
        let y = t.clamp(v[0], -0.5, 0.7)?;
        project(t, y, 23)
    });
    case!("scale+add_scalar", x(), |t, v| {
        let y = t.scale(v[0], -1.7)?;
        let y = t.add_scalar(y, 0.3)?;
        project(t, y, 24)
    });
    let x = || vec![randn(&[2, 3, 4, 6], 25)];
    case!("avg_pool2", x(), |t, v| {
        let y = t.avg_pool2(v[0])?;
        project(t, y, 26)
    });
    case!("upsample2", x(), |t, v| {
        let y = t.upsample2(v[0])?;
        project(t, y, 27)
    });
    let ab = || vec![randn(&[2, 3, 4], 28), randn(&[2, 3, 4], 29)];
    case!("add", ab(), |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 30)
    });
    case!("sub", ab(), |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y, 31)
    });
    case!("mul", ab(), |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 32)
    });
    case!("mse", ab(), |t, v| t.mse(v[0], v[1]));
    case!("concat+narrow+channel_bias", vec![randn(&[2, 3, 4, 4], 33), randn(&[2, 5, 4, 4], 34), randn(&[2, 8], 35)], |t, v| {
        let y = t.concat_channels(&[v[0], v[1]])?;
        let y = t.add_channel_bias(y, v[2])?;
        let y = t.narrow_channels(y, 2, 4)?;
        project(t, y, 36)
    });
    let tables = || vec![randn(&[3, 4], 37), randn(&[5, 4], 38)];
    case!("mean+sum+reshape", tables(), |t, v| {
        let r = t.reshape(v[0], &[2, 6])?;
        let s = t.square(r)?;
        let a = t.mean(s)?;
        let b = t.sum(v[0])?;
        t.add(a, b)
    });
    case!("embedding", tables(), |t, v| {
        let e = t.embedding(v[1], &[4, 0, 4])?;
        project(t, e, 39)
    });
    case!("cross_entropy", tables(), |t, v| t.cross_entropy(v[0], &[1, 3, 0]));
    let chain = vec![
        randn(&[2, 2, 8, 8], 40),
        randn(&[8, 2, 3, 3], 41),
        randn(&[8], 42),
        randn(&[8], 43),
        randn(&[8, 2, 4, 4], 44),
        randn(&[2, 2, 8, 8], 45),
    ];
    case!("composite", chain, |t, v| {
        let h = t.conv2d(v[0], v[1], None, 1, 1)?;
        let h = t.group_norm(h, v[2], v[3], 8)?;
        let h = t.silu(h)?;
        let h = t.avg_pool2(h)?;
        let h = t.upsample2(h)?;
        let h = t.avg_pool2(h)?;
        let h = t.conv_transpose2d(h, v[4], None, 2, 1)?;
        t.mse(h, v[5])
    });
    c
}

/// Finite-difference reports for every differentiable kernel on small
/// random inputs, plus one composite chain.
pub fn kernel_suite() -> Result<Vec<(String, GradCheckReport)>> {
    cases()
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_gradients(&inputs, f, GradCheckOptions::default())?)))
        .collect()
}
