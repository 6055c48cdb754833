//! Convolution ops (1-D/2-D/3-D) implemented with im2col + matmul.
//!
//! Layouts: conv1d takes `[C, L]`, conv2d takes `[N, C, H, W]`, conv3d takes
//! `[C, D, H, W]` (single sample; the sequence axis plays the role of depth).
//! Padding is zero padding; conv1d takes separate left/right pads so causal
//! stacks can pad on the left only.

use super::{Backward, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};

fn out_len(input: usize, pad: (usize, usize), k: usize, s: usize) -> usize {
    let padded = input + pad.0 + pad.1;
    assert!(padded >= k, "convolution input shorter than kernel");
    (padded - k) / s + 1
}

// --------------------------------------------------------------------------
// conv1d
// --------------------------------------------------------------------------

fn im2col_1d(x: &ArrayD<f64>, k: usize, stride: usize, pad: (usize, usize)) -> Array2<f64> {
    let (c, l) = (x.shape()[0], x.shape()[1]);
    let lo = out_len(l, pad, k, stride);
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((c * k, lo));
    for ci in 0..c {
        for ki in 0..k {
            let row = ci * k + ki;
            for o in 0..lo {
                let pos = o * stride + ki;
                if pos >= pad.0 && pos - pad.0 < l {
                    cols[[row, o]] = xs[ci * l + (pos - pad.0)];
                }
            }
        }
    }
    cols
}

fn col2im_1d(
    gcols: &Array2<f64>,
    c: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: (usize, usize),
) -> ArrayD<f64> {
    let lo = gcols.ncols();
    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[c, l]));
    for ci in 0..c {
        for ki in 0..k {
            let row = ci * k + ki;
            for o in 0..lo {
                let pos = o * stride + ki;
                if pos >= pad.0 && pos - pad.0 < l {
                    gx[[ci, pos - pad.0]] += gcols[[row, o]];
                }
            }
        }
    }
    gx
}

struct Conv1dOp {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    stride: usize,
    pad: (usize, usize),
}

impl Backward for Conv1dOp {
    fn backward(&self, _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let (o, c, k) = {
            let ws = self.w.shape();
            (ws[0], ws[1], ws[2])
        };
        let l = self.x.shape()[1];
        let g2 = grad.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        if self.w.requires_grad() {
            let cols = im2col_1d(self.x.data(), k, self.stride, self.pad);
            let gw = g2.dot(&cols.t());
            self.w
                .accumulate(gw.into_shape_with_order(IxDyn(&[o, c, k])).unwrap());
        }
        if self.x.requires_grad() {
            let w2 = self
                .w
                .data()
                .to_owned()
                .into_shape_with_order((o, c * k))
                .unwrap();
            let gcols = w2.t().dot(&g2);
            self.x
                .accumulate(col2im_1d(&gcols, c, l, k, self.stride, self.pad));
        }
        if let Some(b) = &self.b {
            if b.requires_grad() {
                b.accumulate(g2.sum_axis(ndarray::Axis(1)).into_dyn());
            }
        }
    }
    fn parents(&self) -> Vec<Tensor> {
        let mut p = vec![self.x.clone(), self.w.clone()];
        if let Some(b) = &self.b {
            p.push(b.clone());
        }
        p
    }
}

/// `x: [C, L]`, `w: [O, C, K]`, `b: [O]` -> `[O, Lout]`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: (usize, usize)) -> Tensor {
    let (o, c, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(x.shape()[0], c, "conv1d channel mismatch");
    let cols = im2col_1d(x.data(), k, stride, pad);
    let w2 = w
        .data()
        .to_owned()
        .into_shape_with_order((o, c * k))
        .unwrap();
    let mut out = w2.dot(&cols);
    if let Some(b) = b {
        let bv = b.data().view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut row, &bias) in out.rows_mut().into_iter().zip(bv.iter()) {
            row += bias;
        }
    }
    let rg = x.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
    let op: Option<Box<dyn Backward>> = if rg {
        Some(Box::new(Conv1dOp {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            stride,
            pad,
        }))
    } else {
        None
    };
    Tensor::new(out.into_dyn(), op, rg)
}

// --------------------------------------------------------------------------
// conv2d
// --------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn im2col_2d(
    x: &ndarray::ArrayView3<'_, f64>, // [C, H, W]
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = out_len(h, (ph, ph), kh, sh);
    let wo = out_len(w, (pw, pw), kw, sw);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let pi = oi * sh + ki;
                    if pi < ph || pi - ph >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let pj = oj * sw + kj;
                        if pj >= pw && pj - pw < w {
                            cols[[row, oi * wo + oj]] = x[[ci, pi - ph, pj - pw]];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_2d(
    gcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
) -> ndarray::Array3<f64> {
    let ho = out_len(h, (ph, ph), kh, sh);
    let wo = out_len(w, (pw, pw), kw, sw);
    let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let pi = oi * sh + ki;
                    if pi < ph || pi - ph >= h {
                        continue;
                    }
                    for oj in 0..wo {
                        let pj = oj * sw + kj;
                        if pj >= pw && pj - pw < w {
                            gx[[ci, pi - ph, pj - pw]] += gcols[[row, oi * wo + oj]];
                        }
                    }
                }
            }
        }
    }
    gx
}

struct Conv2dOp {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Backward for Conv2dOp {
    fn backward(&self, _out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let ws = self.w.shape().to_vec();
        let (o, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let xs = self.x.shape().to_vec();
        let (n, h, w) = (xs[0], xs[2], xs[3]);
        let x4 = self
            .x
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let g4 = grad.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let w2 = self
            .w
            .data()
            .to_owned()
            .into_shape_with_order((o, c * kh * kw))
            .unwrap();
        let mut gw = Array2::<f64>::zeros((o, c * kh * kw));
        let mut gx = ndarray::Array4::<f64>::zeros((n, c, h, w));
        let mut gb = ndarray::Array1::<f64>::zeros(o);
        for ni in 0..n {
            let gi = g4.index_axis(ndarray::Axis(0), ni);
            let (ho, wo) = (gi.shape()[1], gi.shape()[2]);
            let g2 = gi.to_owned().into_shape_with_order((o, ho * wo)).unwrap();
            if self.w.requires_grad() || self.x.requires_grad() {
                if self.w.requires_grad() {
                    let cols = im2col_2d(
                        &x4.index_axis(ndarray::Axis(0), ni),
                        kh,
                        kw,
                        self.stride.0,
                        self.stride.1,
                        self.pad.0,
                        self.pad.1,
                    );
                    gw += &g2.dot(&cols.t());
                }
                if self.x.requires_grad() {
                    let gcols = w2.t().dot(&g2);
                    let gxi = col2im_2d(
                        &gcols,
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        self.stride.0,
                        self.stride.1,
                        self.pad.0,
                        self.pad.1,
                    );
                    gx.index_axis_mut(ndarray::Axis(0), ni).assign(&gxi);
                }
            }
            if self.b.is_some() {
                gb += &g2.sum_axis(ndarray::Axis(1));
            }
        }
        if self.w.requires_grad() {
            self.w
                .accumulate(gw.into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap());
        }
        if self.x.requires_grad() {
            self.x.accumulate(gx.into_dyn());
        }
        if let Some(b) = &self.b {
            if b.requires_grad() {
                b.accumulate(gb.into_dyn());
            }
        }
    }
    fn parents(&self) -> Vec<Tensor> {
        let mut p = vec![self.x.clone(), self.w.clone()];
        if let Some(b) = &self.b {
            p.push(b.clone());
        }
        p
    }
}

/// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]` -> `[N, O, Ho, Wo]`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Tensor {
    let ws = w.shape().to_vec();
    let (o, c, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let xs = x.shape().to_vec();
    assert_eq!(xs[1], c, "conv2d channel mismatch");
    let (n, h, wd) = (xs[0], xs[2], xs[3]);
    let ho = out_len(h, (pad.0, pad.0), kh, stride.0);
    let wo = out_len(wd, (pad.1, pad.1), kw, stride.1);
    let x4 = x.data().view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let w2 = w
        .data()
        .to_owned()
        .into_shape_with_order((o, c * kh * kw))
        .unwrap();
    let mut out = ndarray::Array4::<f64>::zeros((n, o, ho, wo));
    for ni in 0..n {
        let cols = im2col_2d(
            &x4.index_axis(ndarray::Axis(0), ni),
            kh,
            kw,
            stride.0,
            stride.1,
            pad.0,
            pad.1,
        );
        let mut res = w2.dot(&cols);
        if let Some(b) = b {
            let bv = b.data().view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (mut row, &bias) in res.rows_mut().into_iter().zip(bv.iter()) {
                row += bias;
            }
        }
        out.index_axis_mut(ndarray::Axis(0), ni)
            .assign(&res.into_shape_with_order((o, ho, wo)).unwrap());
    }
    let rg = x.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
    let op: Option<Box<dyn Backward>> = if rg {
        Some(Box::new(Conv2dOp {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            stride,
            pad,
        }))
    } else {
        None
    };
    Tensor::new(out.into_dyn(), op, rg)
}

// --------------------------------------------------------------------------
// conv3d
// --------------------------------------------------------------------------

fn im2col_3d(
    x: &ndarray::ArrayView4<'_, f64>, // [C, D, H, W]
    k: (usize, usize, usize),
    s: (usize, usize, usize),
    p: (usize, usize, usize),
) -> Array2<f64> {
    let (c, d, h, w) = x.dim();
    let do_ = out_len(d, (p.0, p.0), k.0, s.0);
    let ho = out_len(h, (p.1, p.1), k.1, s.1);
    let wo = out_len(w, (p.2, p.2), k.2, s.2);
    let mut cols = Array2::<f64>::zeros((c * k.0 * k.1 * k.2, do_ * ho * wo));
    for ci in 0..c {
        for kd in 0..k.0 {
            for ki in 0..k.1 {
                for kj in 0..k.2 {
                    let row = ((ci * k.0 + kd) * k.1 + ki) * k.2 + kj;
                    for od in 0..do_ {
                        let pd = od * s.0 + kd;
                        if pd < p.0 || pd - p.0 >= d {
                            continue;
                        }
                        for oi in 0..ho {
                            let pi = oi * s.1 + ki;
                            if pi < p.1 || pi - p.1 >= h {
                                continue;
                            }
                            for oj in 0..wo {
                                let pj = oj * s.2 + kj;
                                if pj >= p.2 && pj - p.2 < w {
                                    cols[[row, (od * ho + oi) * wo + oj]] =
                                        x[[ci, pd - p.0, pi - p.1, pj - p.2]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_3d(
    gcols: &Array2<f64>,
    dims: (usize, usize, usize, usize),
    k: (usize, usize, usize),
    s: (usize, usize, usize),
    p: (usize, usize, usize),
) -> ArrayD<f64> {
    let (c, d, h, w) = dims;
    let do_ = out_len(d, (p.0, p.0), k.0, s.0);
    let ho = out_len(h, (p.1, p.1), k.1, s.1);
    let wo = out_len(w, (p.2, p.2), k.2, s.2);
    let mut gx = ArrayD::<f64>::zeros(IxDyn(&[c, d, h, w]));
    for ci in 0..c {
        for kd in 0..k.0 {
            for ki in 0..k.1 {
                for kj in 0..k.2 {
                    let row = ((ci * k.0 + kd) * k.1 + ki) * k.2 + kj;
                    for od in 0..do_ {
                        let pd = od * s.0 + kd;
                        if pd < p.0 || pd - p.0 >= d {
                            continue;
                        }
                        for oi in 0..ho {
                            let pi = oi * s.1 + ki;
                            if pi < p.1 || pi - p.1 >= h {
                                continue;
                            }
                            for oj in 0..wo {
                                let pj = oj * s.2 + kj;
                                if pj >= p.2 && pj - p.2 < w {
                                    gx[[ci, pd - p.0, pi - p.1, pj - p.2]] +=
                                        gcols[[row, (od * ho + oi) * wo + oj]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

struct Conv3dOp {
    x: Tensor,
    w: Tensor,
    b: Option<Tensor>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
}

impl Backward for Conv3dOp {
    fn backward(&self, out: &ArrayD<f64>, grad: &ArrayD<f64>) {
        let ws = self.w.shape().to_vec();
        let o = ws[0];
        let (c, kd, kh, kw) = (ws[1], ws[2], ws[3], ws[4]);
        let xs = self.x.shape().to_vec();
        let dims = (xs[0], xs[1], xs[2], xs[3]);
        let spatial = out.len() / o;
        let g2 = grad
            .to_owned()
            .into_shape_with_order((o, spatial))
            .unwrap();
        if self.w.requires_grad() {
            let x4 = self
                .x
                .data()
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let cols = im2col_3d(&x4, (kd, kh, kw), self.stride, self.pad);
            let gw = g2.dot(&cols.t());
            self.w.accumulate(
                gw.into_shape_with_order(IxDyn(&[o, c, kd, kh, kw])).unwrap(),
            );
        }
        if self.x.requires_grad() {
            let w2 = self
                .w
                .data()
                .to_owned()
                .into_shape_with_order((o, c * kd * kh * kw))
                .unwrap();
            let gcols = w2.t().dot(&g2);
            self.x
                .accumulate(col2im_3d(&gcols, dims, (kd, kh, kw), self.stride, self.pad));
        }
        if let Some(b) = &self.b {
            if b.requires_grad() {
                b.accumulate(g2.sum_axis(ndarray::Axis(1)).into_dyn());
            }
        }
    }
    fn parents(&self) -> Vec<Tensor> {
        let mut p = vec![self.x.clone(), self.w.clone()];
        if let Some(b) = &self.b {
            p.push(b.clone());
        }
        p
    }
}

/// `x: [C, D, H, W]`, `w: [O, C, kd, kh, kw]`, `b: [O]` -> `[O, Do, Ho, Wo]`.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Tensor {
    let ws = w.shape().to_vec();
    let (o, c, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let xs = x.shape().to_vec();
    assert_eq!(xs[0], c, "conv3d channel mismatch");
    let do_ = out_len(xs[1], (pad.0, pad.0), kd, stride.0);
    let ho = out_len(xs[2], (pad.1, pad.1), kh, stride.1);
    let wo = out_len(xs[3], (pad.2, pad.2), kw, stride.2);
    let x4 = x.data().view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let cols = im2col_3d(&x4, (kd, kh, kw), stride, pad);
    let w2 = w
        .data()
        .to_owned()
        .into_shape_with_order((o, c * kd * kh * kw))
        .unwrap();
    let mut res = w2.dot(&cols);
    if let Some(b) = b {
        let bv = b.data().view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for (mut row, &bias) in res.rows_mut().into_iter().zip(bv.iter()) {
            row += bias;
        }
    }
    let out = res.into_shape_with_order(IxDyn(&[o, do_, ho, wo])).unwrap();
    let rg = x.requires_grad() || w.requires_grad() || b.map(|b| b.requires_grad()).unwrap_or(false);
    let op: Option<Box<dyn Backward>> = if rg {
        Some(Box::new(Conv3dOp {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
            stride,
            pad,
        }))
    } else {
        None
    };
    Tensor::new(out, op, rg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::check::numeric_gradient;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    fn check_conv_grads(
        f: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
        xs: &[usize],
        ws: &[usize],
        bs: &[usize],
    ) {
        let x0 = random(xs, 1);
        let w0 = random(ws, 2);
        let b0 = random(bs, 3);
        let (x, w, b) = (Tensor::leaf(x0.clone()), Tensor::leaf(w0.clone()), Tensor::leaf(b0.clone()));
        f(&x, &w, &b).backward();
        for (leaf, arr, tag) in [(&x, &x0, "x"), (&w, &w0, "w"), (&b, &b0, "b")] {
            let analytic = leaf.grad().unwrap();
            let numeric = numeric_gradient(
                |a| {
                    let (xx, ww, bb) = match tag {
                        "x" => (Tensor::leaf(a.clone()), Tensor::constant(w0.clone()), Tensor::constant(b0.clone())),
                        "w" => (Tensor::constant(x0.clone()), Tensor::leaf(a.clone()), Tensor::constant(b0.clone())),
                        _ => (Tensor::constant(x0.clone()), Tensor::constant(w0.clone()), Tensor::leaf(a.clone())),
                    };
                    f(&xx, &ww, &bb).scalar_value()
                },
                arr,
                1e-6,
            );
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = a.abs().max(n.abs()).max(1e-7);
                assert!((a - n).abs() / denom < 1e-5, "{tag}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn conv1d_shapes_and_gradients() {
        check_conv_grads(
            |x, w, b| conv1d(x, w, Some(b), 2, (3, 0)).square().sum(),
            &[2, 11],
            &[3, 2, 4],
            &[3],
        );
    }

    #[test]
    fn conv1d_causal_padding_never_sees_future() {
        // With left pad K-1, output[i] depends on x[..=i*stride].
        let k = 4;
        let x0 = random(&[1, 16], 5);
        let w = Tensor::constant(random(&[1, 1, k], 6));
        let base = conv1d(&Tensor::constant(x0.clone()), &w, None, 1, (k - 1, 0));
        let mut bumped = x0.clone();
        bumped[[0, 9]] += 1.0;
        let out = conv1d(&Tensor::constant(bumped), &w, None, 1, (k - 1, 0));
        for i in 0..9 {
            assert_eq!(base.data()[[0, i]], out.data()[[0, i]], "leaked at {i}");
        }
        assert_ne!(base.data()[[0, 9]], out.data()[[0, 9]]);
    }

    #[test]
    fn conv2d_shapes_and_gradients() {
        check_conv_grads(
            |x, w, b| conv2d(x, w, Some(b), (2, 1), (1, 1)).square().sum(),
            &[2, 2, 6, 5],
            &[3, 2, 3, 3],
            &[3],
        );
    }

    #[test]
    fn conv3d_shapes_and_gradients() {
        check_conv_grads(
            |x, w, b| conv3d(x, w, Some(b), (1, 2, 2), (0, 1, 1)).square().sum(),
            &[1, 3, 6, 6],
            &[2, 1, 2, 3, 3],
            &[2],
        );
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 kernel, stride 1: convolution is a per-pixel channel mix.
        let x = random(&[1, 2, 3, 3], 7);
        let w = random(&[1, 2, 1, 1], 8);
        let out = conv2d(
            &Tensor::constant(x.clone()),
            &Tensor::constant(w.clone()),
            None,
            (1, 1),
            (0, 0),
        );
        for i in 0..3 {
            for j in 0..3 {
                let expect = x[[0, 0, i, j]] * w[[0, 0, 0, 0]] + x[[0, 1, i, j]] * w[[0, 1, 0, 0]];
                assert!((out.data()[[0, 0, i, j]] - expect).abs() < 1e-12);
            }
        }
    }
}
