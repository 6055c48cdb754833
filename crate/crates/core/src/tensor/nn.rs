//! Small layer library: linear, layer norm, multi-head attention and a
//! pre-norm transformer encoder block, plus deterministic initializers.

use super::params::{ParamStore, Parameter};
use super::Tensor;
use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

pub const MASK_NEG: f64 = -1e30;

/// Xavier-uniform initialization.
pub fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> ArrayD<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

pub struct Linear {
    pub w: Rc<Parameter>,
    pub b: Option<Rc<Parameter>>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            xavier(rng, fan_in, fan_out, &[fan_in, fan_out]),
            true,
        );
        let b = bias.then(|| {
            store.add(
                &format!("{name}.b"),
                Array1::<f64>::zeros(fan_out).into_dyn(),
                true,
            )
        });
        Linear { w, b }
    }

    /// Zero-initialized variant (used for output projections that must start
    /// at the identity/neutral configuration).
    pub fn new_zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            ArrayD::zeros(IxDyn(&[fan_in, fan_out])),
            true,
        );
        let b = Some(store.add(
            &format!("{name}.b"),
            Array1::<f64>::zeros(fan_out).into_dyn(),
            true,
        ));
        Linear { w, b }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = x.matmul(&Tensor::from_param(&self.w));
        match &self.b {
            Some(b) => y.add(&Tensor::from_param(b)),
            None => y,
        }
    }
}

pub struct LayerNorm {
    pub gain: Rc<Parameter>,
    pub bias: Rc<Parameter>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(&format!("{name}.g"), Array1::<f64>::ones(dim).into_dyn(), true),
            bias: store.add(&format!("{name}.b"), Array1::<f64>::zeros(dim).into_dyn(), true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(
            &Tensor::from_param(&self.gain),
            &Tensor::from_param(&self.bias),
            1e-5,
        )
    }
}

/// Additive `[tq, tk]` mask allowing query `i` to attend keys `j <= i + offset`.
pub fn causal_mask(tq: usize, tk: usize, offset: isize) -> Tensor {
    let m = Array2::from_shape_fn((tq, tk), |(i, j)| {
        if (j as isize) <= (i as isize) + offset {
            0.0
        } else {
            MASK_NEG
        }
    });
    Tensor::constant(m)
}

pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert_eq!(dim % heads, 0, "attention dim not divisible by heads");
        MultiHeadAttention {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, true, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, true, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, true, rng),
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// `q_in: [Tq, D]`, `kv_in: [Tk, D]`; `mask` is an additive `[Tq, Tk]`
    /// tensor (see [`causal_mask`]).
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(kv_in);
        let v = self.wv.forward(kv_in);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctxs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh);
            let kh = k.narrow(1, h * dh, dh);
            let vh = v.narrow(1, h * dh, dh);
            let mut scores = qh.matmul(&kh.t()).scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m);
            }
            let attn = scores.softmax(1);
            ctxs.push(attn.matmul(&vh));
        }
        let ctx = Tensor::concat(&ctxs, 1);
        self.wo.forward(&ctx)
    }
}

/// Pre-norm transformer encoder block: attention + feed-forward with
/// residual connections.
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        EncoderBlock {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, ff_dim, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff_dim, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let normed = self.ln1.forward(x);
        let x = x.add(&self.attn.forward(&normed, &normed, mask));
        let h = self.ff2.forward(&self.ff1.forward(&self.ln2.forward(&x)).relu());
        x.add(&h)
    }
}

/// Sinusoidal positional encodings for positions `[start, start+len)`.
pub fn sinusoidal_positions(start: usize, len: usize, dim: usize) -> Tensor {
    let mut pe = Array2::<f64>::zeros((len, dim));
    for (r, pos) in (start..start + len).enumerate() {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            pe[[r, 2 * i]] = angle.sin();
            pe[[r, 2 * i + 1]] = angle.cos();
        }
    }
    Tensor::constant(pe)
}

/// Linear time interpolation of a feature sequence `[R, F]` at rate
/// `src_rate` to `t_out` rows at rate `dst_rate`, using frame-center
/// alignment. Row `t` lands at source position `(t + 0.5) * src/dst - 0.5`,
/// clamped at the sequence ends.
pub fn interpolate_rows(features: &Tensor, src_rate: f64, dst_rate: f64, t_out: usize) -> Tensor {
    let rows = features.shape()[0];
    assert!(rows >= 1, "interpolate_rows on empty features");
    let ratio = src_rate / dst_rate;
    let mut pieces = Vec::with_capacity(t_out);
    for t in 0..t_out {
        let p = ((t as f64 + 0.5) * ratio - 0.5).clamp(0.0, (rows - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(rows - 1);
        let w1 = p - i0 as f64;
        let r0 = features.narrow(0, i0, 1);
        if w1 == 0.0 || i0 == i1 {
            pieces.push(r0);
        } else {
            let r1 = features.narrow(0, i1, 1);
            pieces.push(r0.scale(1.0 - w1).add(&r1.scale(w1)));
        }
    }
    Tensor::concat(&pieces, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::numeric_gradient;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn linear_forward_shape_and_grad() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut r);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |_| r.gen_range(-1.0..1.0));
        let x = Tensor::leaf(x0.clone());
        let y = lin.forward(&x);
        assert_eq!(y.shape(), &[2, 3]);
        y.square().sum().backward();
        let analytic = x.grad().unwrap();
        let numeric = numeric_gradient(
            |a| lin.forward(&Tensor::leaf(a.clone())).square().sum().scalar_value(),
            &x0,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-6);
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let block = EncoderBlock::new(&mut store, "b", 8, 2, 16, &mut r);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[5, 8]), |_| r.gen_range(-1.0..1.0));
        let mask = causal_mask(5, 5, 0);
        let base = block.forward(&Tensor::constant(x0.clone()), Some(&mask));
        let mut bumped = x0.clone();
        bumped[[4, 0]] += 1.0;
        let out = block.forward(&Tensor::constant(bumped), Some(&mask));
        for i in 0..4 {
            for j in 0..8 {
                assert_eq!(base.data()[[i, j]], out.data()[[i, j]], "leak at row {i}");
            }
        }
        assert_ne!(base.data()[[4, 0]], out.data()[[4, 0]]);
    }

    #[test]
    fn attention_gradients_check() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut r);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[4, 8]), |_| r.gen_range(-1.0..1.0));
        let x = Tensor::leaf(x0.clone());
        let mask = causal_mask(4, 4, 0);
        attn.forward(&x, &x, Some(&mask)).square().sum().backward();
        let analytic = x.grad().unwrap();
        let numeric = numeric_gradient(
            |a| {
                let t = Tensor::leaf(a.clone());
                attn.forward(&t, &t, Some(&mask)).square().sum().scalar_value()
            },
            &x0,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-8) < 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn interpolation_halving_rate_averages_adjacent_rows() {
        // 50 Hz -> 25 Hz: output row t must equal (src[2t] + src[2t+1]) / 2.
        let src = ArrayD::from_shape_fn(IxDyn(&[10, 3]), |ix| (ix[0] * 3 + ix[1]) as f64);
        let out = interpolate_rows(&Tensor::constant(src.clone()), 50.0, 25.0, 5);
        for t in 0..5 {
            for f in 0..3 {
                let expect = 0.5 * (src[[2 * t, f]] + src[[2 * t + 1, f]]);
                assert!((out.data()[[t, f]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn interpolation_of_constant_track_is_exact() {
        let src = ArrayD::from_elem(IxDyn(&[7, 2]), 3.25);
        let out = interpolate_rows(&Tensor::constant(src), 50.0, 30.0, 9);
        for v in out.data().iter() {
            assert_eq!(*v, 3.25);
        }
    }
}
