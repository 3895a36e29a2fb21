//! Layers as parameter handles into a [`ParamStore`]; forward passes record
//! onto a [`Tape`].

use lphom_tensor::{lecun_uniform, Bound, Element, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub const GROUPS: usize = 8;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), lecun_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self { weight, bias, stride, pad }
    }

    /// 3x3, stride 1, same padding.
    pub fn same<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self::new(store, name, cin, cout, 3, 1, 1, rng)
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)?)
    }
}

/// Kernel 4, stride 2, padding 1: exactly doubles the spatial size.
#[derive(Clone, Debug)]
pub struct Upconv {
    weight: ParamId,
    bias: ParamId,
}

impl Upconv {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        // Each output pixel receives cin * 2 * 2 kernel taps.
        let weight = store.add(format!("{name}.weight"), lecun_uniform(&[cin, cout, 4, 4], cin * 4, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([cout]));
        Self { weight, bias }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv_transpose2d(x, p.var(self.weight), Some(p.var(self.bias)), 2, 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), lecun_uniform(&[dout, din], din, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dout]));
        Self { weight, bias }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))?)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl GroupNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]));
        Self { gamma, beta }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.group_norm(x, p.var(self.gamma), p.var(self.beta), GROUPS)?)
    }
}

/// `GroupNorm -> SiLU -> Conv`.
#[derive(Clone, Debug)]
pub struct NormActConv {
    norm: GroupNorm,
    conv: Conv2d,
}

impl NormActConv {
    pub fn new<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        Self { norm: GroupNorm::new(store, &format!("{name}.norm"), cin), conv: Conv2d::same(store, &format!("{name}.conv"), cin, cout, rng) }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm.forward(tape, p, x)?;
        let h = tape.silu(h)?;
        self.conv.forward(tape, p, h)
    }
}

/// Pre-activation residual block with an optional additive embedding
/// injected after the first convolution.
#[derive(Clone, Debug)]
pub struct ResBlock {
    first: NormActConv,
    second: NormActConv,
    pub emb_proj: Option<Linear>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let first = NormActConv::new(store, &format!("{name}.in"), cin, cout, rng);
        let emb_proj = emb_dim.map(|d| Linear::new(store, &format!("{name}.emb"), d, cout, rng));
        let second = NormActConv::new(store, &format!("{name}.out"), cout, cout, rng);
        let skip = (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng));
        Self { first, second, emb_proj, skip }
    }

    /// `emb` is the already activated `(N, d)` embedding.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var, emb: Option<Var>) -> Result<Var> {
        let mut h = self.first.forward(tape, p, x)?;
        if let (Some(proj), Some(e)) = (&self.emb_proj, emb) {
            let bias = proj.forward(tape, p, e)?;
            h = tape.add_channel_bias(h, bias)?;
        }
        let h = self.second.forward(tape, p, h)?;
        let shortcut = match &self.skip {
            Some(conv) => conv.forward(tape, p, x)?,
            None => x,
        };
        Ok(tape.add(h, shortcut)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resblock_shapes_and_param_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let block = ResBlock::new(&mut store, "rb", 8, 16, Some(6), &mut rng);
        assert!(store.find("rb.skip.weight").is_some());
        assert!(store.find("rb.emb.weight").is_some());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::randn([2, 8, 4, 4], &mut rng));
        let e = tape.constant(Tensor::randn([2, 6], &mut rng));
        let y = block.forward(&mut tape, &p, x, Some(e)).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 4, 4]);

        let up = Upconv::new(&mut store, "up", 16, 8, &mut rng);
        let p = store.bind(&mut tape, false);
        let z = up.forward(&mut tape, &p, y).unwrap();
        assert_eq!(tape.shape(z), &[2, 8, 8, 8]);
    }
}
