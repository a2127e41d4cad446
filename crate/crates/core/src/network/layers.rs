//! Layer primitives on `[H, W, C]` tensors together with their adjoints.
//!
//! Data is stored row-major with the channel index fastest, so a site's
//! channel vector is contiguous.

use super::{Amplitude, NetworkError};
use crate::lattice::Configuration;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self, NetworkError> {
        if data.len() != h * w * c {
            return Err(NetworkError::ShapeMismatch(format!(
                "{} values for shape [{h}, {w}, {c}]",
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.w + x) * self.c;
        &self.data[start..start + self.c]
    }
}

/// Single-channel tensor of raw site values.
pub fn site_values(config: &Configuration, h: usize, w: usize) -> Result<Tensor3, NetworkError> {
    if config.len() != h * w {
        return Err(NetworkError::ShapeMismatch(format!(
            "configuration of {} sites on a {h}x{w} lattice",
            config.len()
        )));
    }
    Tensor3::from_vec(h, w, 1, config.values().iter().map(|&v| f64::from(v)).collect())
}

/// Periodic padding: `out[i][j] = x[(i - ph) mod H][(j - pw) mod W]`.
pub fn pbc_pad_2d(x: &Tensor3, ph: usize, pw: usize) -> Result<Tensor3, NetworkError> {
    if ph >= x.h {
        return Err(NetworkError::UnsupportedPad { pad: ph, extent: x.h });
    }
    if pw >= x.w {
        return Err(NetworkError::UnsupportedPad { pad: pw, extent: x.w });
    }
    let (hp, wp) = (x.h + 2 * ph, x.w + 2 * pw);
    let mut out = Tensor3::zeros(hp, wp, x.c);
    for i in 0..hp {
        let sy = (i + x.h - ph) % x.h;
        for j in 0..wp {
            let sx = (j + x.w - pw) % x.w;
            let dst = out.idx(i, j, 0);
            let src = x.idx(sy, sx, 0);
            out.data[dst..dst + x.c].copy_from_slice(&x.data[src..src + x.c]);
        }
    }
    Ok(out)
}

/// Adjoint of [`pbc_pad_2d`]: folds the halo back onto the torus.
pub fn pbc_pad_2d_backward(grad: &Tensor3, h: usize, w: usize, ph: usize, pw: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(h, w, grad.c);
    for i in 0..grad.h {
        let sy = (i + h - ph) % h;
        for j in 0..grad.w {
            let sx = (j + w - pw) % w;
            let src = grad.idx(i, j, 0);
            let dst = out.idx(sy, sx, 0);
            for ch in 0..grad.c {
                out.data[dst + ch] += grad.data[src + ch];
            }
        }
    }
    out
}

/// Convolution kernel `[kh][kw][c_in][c_out]` with one bias per output channel.
#[derive(Debug, Clone, Copy)]
pub struct ConvShape {
    pub kh: usize,
    pub kw: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvShape {
    pub fn n_weights(&self) -> usize {
        self.kh * self.kw * self.c_in * self.c_out
    }
}

/// Valid cross-correlation of an already padded input.
pub fn conv2d(x: &Tensor3, shape: ConvShape, weights: &[f64], bias: &[f64]) -> Result<Tensor3, NetworkError> {
    let ConvShape { kh, kw, c_in, c_out } = shape;
    if x.c != c_in || weights.len() != shape.n_weights() || bias.len() != c_out || x.h < kh || x.w < kw {
        return Err(NetworkError::ShapeMismatch(format!(
            "conv {kh}x{kw} {c_in}->{c_out} on input [{}, {}, {}]",
            x.h, x.w, x.c
        )));
    }
    let (ho, wo) = (x.h - kh + 1, x.w - kw + 1);
    let mut out = Tensor3::zeros(ho, wo, c_out);
    for y in 0..ho {
        for xx in 0..wo {
            let o = out.idx(y, xx, 0);
            let acc = &mut out.data[o..o + c_out];
            acc.copy_from_slice(bias);
            for dy in 0..kh {
                for dx in 0..kw {
                    let input = x.pixel(y + dy, xx + dx);
                    let wbase = (dy * kw + dx) * c_in * c_out;
                    for (ci, &a) in input.iter().enumerate() {
                        let row = &weights[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                        for (acc_co, &wv) in acc.iter_mut().zip(row) {
                            *acc_co += a * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`]. Accumulates into `grad_w` and `grad_b` and returns
/// the gradient with respect to the padded input when `need_input` is set.
pub fn conv2d_backward(
    x: &Tensor3,
    shape: ConvShape,
    weights: &[f64],
    grad_out: &Tensor3,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input: bool,
) -> Option<Tensor3> {
    let ConvShape { kh, kw, c_in, c_out } = shape;
    let mut grad_in = need_input.then(|| Tensor3::zeros(x.h, x.w, c_in));
    for y in 0..grad_out.h {
        for xx in 0..grad_out.w {
            let g = grad_out.pixel(y, xx);
            for (gb, &gv) in grad_b.iter_mut().zip(g) {
                *gb += gv;
            }
            for dy in 0..kh {
                for dx in 0..kw {
                    let input = x.pixel(y + dy, xx + dx);
                    let wbase = (dy * kw + dx) * c_in * c_out;
                    for (ci, &a) in input.iter().enumerate() {
                        let off = wbase + ci * c_out;
                        for (gw, &gv) in grad_w[off..off + c_out].iter_mut().zip(g) {
                            *gw += a * gv;
                        }
                    }
                    if let Some(gi) = grad_in.as_mut() {
                        let base = gi.idx(y + dy, xx + dx, 0);
                        for ci in 0..c_in {
                            let row = &weights[wbase + ci * c_out..wbase + (ci + 1) * c_out];
                            let dot: f64 = row.iter().zip(g).map(|(w, gv)| w * gv).sum();
                            gi.data[base + ci] += dot;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Windowed max along the channel axis.
///
/// With `circular` the first `k - 1` channels are appended to the end so the
/// output keeps `ceil((C) / stride)` windows covering every start position;
/// without it `C` must be divisible by `k` and windows do not wrap.
/// Returns the pooled tensor and, per output neuron, the winning input channel
/// (lowest index on ties).
pub fn maxpool1d_channels(
    x: &Tensor3,
    k: usize,
    stride: usize,
    circular: bool,
) -> Result<(Tensor3, Vec<u32>), NetworkError> {
    if k == 0 || stride == 0 || k > x.c {
        return Err(NetworkError::InvalidConfig(format!(
            "pool kernel {k} stride {stride} on {} channels",
            x.c
        )));
    }
    let c_out = if circular {
        x.c.div_ceil(stride)
    } else {
        if !x.c.is_multiple_of(k) || !(x.c - k).is_multiple_of(stride) {
            return Err(NetworkError::IndivisibleChannels {
                channels: x.c,
                kernel: k,
            });
        }
        (x.c - k) / stride + 1
    };
    let mut out = Tensor3::zeros(x.h, x.w, c_out);
    let mut argmax = vec![0u32; x.h * x.w * c_out];
    for p in 0..x.h * x.w {
        let input = &x.data[p * x.c..(p + 1) * x.c];
        for o in 0..c_out {
            let start = o * stride;
            let mut best = start % x.c;
            let mut best_v = input[best];
            for r in 1..k {
                let ch = (start + r) % x.c;
                if input[ch] > best_v {
                    best_v = input[ch];
                    best = ch;
                }
            }
            out.data[p * c_out + o] = best_v;
            argmax[p * c_out + o] = best as u32;
        }
    }
    Ok((out, argmax))
}

/// Routes gradients to the recorded argmax channels.
pub fn maxpool1d_channels_backward(grad_out: &Tensor3, argmax: &[u32], c_in: usize) -> Tensor3 {
    let mut grad_in = Tensor3::zeros(grad_out.h, grad_out.w, c_in);
    for p in 0..grad_out.h * grad_out.w {
        for o in 0..grad_out.c {
            let ch = argmax[p * grad_out.c + o] as usize;
            grad_in.data[p * c_in + ch] += grad_out.data[p * grad_out.c + o];
        }
    }
    grad_in
}

/// Stride-`k` transposed convolution along channels with one shared kernel of
/// length `k`: `out[c * k + r] = x[c] * kernel[r]`.
pub fn tconv1d_channels(x: &Tensor3, kernel: &[f64]) -> Result<Tensor3, NetworkError> {
    let k = kernel.len();
    if k == 0 {
        return Err(NetworkError::ShapeMismatch(
            "empty transposed-convolution kernel".into(),
        ));
    }
    let mut out = Tensor3::zeros(x.h, x.w, x.c * k);
    for (i, &v) in x.data.iter().enumerate() {
        for (r, &kv) in kernel.iter().enumerate() {
            out.data[i * k + r] = v * kv;
        }
    }
    Ok(out)
}

/// Adjoint of [`tconv1d_channels`]; accumulates the kernel gradient.
pub fn tconv1d_channels_backward(x: &Tensor3, kernel: &[f64], grad_out: &Tensor3, grad_kernel: &mut [f64]) -> Tensor3 {
    let k = kernel.len();
    let mut grad_in = Tensor3::zeros(x.h, x.w, x.c);
    for (i, &v) in x.data.iter().enumerate() {
        let g = &grad_out.data[i * k..(i + 1) * k];
        let mut acc = 0.0;
        for r in 0..k {
            acc += g[r] * kernel[r];
            grad_kernel[r] += g[r] * v;
        }
        grad_in.data[i] = acc;
    }
    grad_in
}

/// Row index into the 3-row embedding table for a site value.
pub fn token_row(v: i8) -> Result<usize, NetworkError> {
    match v {
        -1 => Ok(0),
        0 => Ok(1),
        1 => Ok(2),
        other => Err(NetworkError::BadToken(other)),
    }
}

/// Per-site lookup into a `[3][dim]` table (rows for `-1`, `0`, `+1`).
pub fn embed(config: &Configuration, h: usize, w: usize, table: &[f64], dim: usize) -> Result<Tensor3, NetworkError> {
    if config.len() != h * w || table.len() != 3 * dim {
        return Err(NetworkError::ShapeMismatch("embedding input".into()));
    }
    let mut out = Tensor3::zeros(h, w, dim);
    for (s, &v) in config.values().iter().enumerate() {
        let row = token_row(v)?;
        out.data[s * dim..(s + 1) * dim].copy_from_slice(&table[row * dim..(row + 1) * dim]);
    }
    Ok(out)
}

/// Accumulates the embedding-table gradient.
pub fn embed_backward(config: &Configuration, grad_out: &Tensor3, grad_table: &mut [f64]) {
    let dim = grad_out.c;
    for (s, &v) in config.values().iter().enumerate() {
        let row = token_row(v).expect("validated in forward");
        for e in 0..dim {
            grad_table[row * dim + e] += grad_out.data[s * dim + e];
        }
    }
}

/// Product of all neurons as a signed log-amplitude.
pub fn product_head(features: &Tensor3) -> Amplitude {
    let mut log_abs = 0.0;
    let mut negative = false;
    for &f in &features.data {
        if f == 0.0 {
            return Amplitude::ZERO;
        }
        log_abs += f.abs().ln();
        negative ^= f < 0.0;
    }
    Amplitude::new(log_abs, if negative { -1 } else { 1 })
}

/// `∂ ln|Π f| / ∂f_i = 1 / f_i`.
pub fn product_head_backward(features: &Tensor3) -> Tensor3 {
    Tensor3 {
        data: features.data.iter().map(|f| 1.0 / f).collect(),
        ..features.clone()
    }
}

pub(crate) fn check_finite(t: &Tensor3, layer: &'static str) -> Result<(), NetworkError> {
    if t.data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetworkError::NumericalOverflow(layer))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::SiteMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor3 {
        Tensor3::from_vec(h, w, c, (0..h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor3, b: &Tensor3) -> f64 {
        assert_eq!((a.h, a.w, a.c), (b.h, b.w, b.c));
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn pad_two_by_two() {
        let (a, b, c, d) = (1.0, 2.0, 3.0, 4.0);
        let x = Tensor3::from_vec(2, 2, 1, vec![a, b, c, d]).unwrap();
        let p = pbc_pad_2d(&x, 1, 1).unwrap();
        let expected = [d, c, d, c, b, a, b, a, d, c, d, c, b, a, b, a];
        assert_eq!(p.data, expected);
        assert_eq!(pbc_pad_2d(&x, 0, 0).unwrap(), x);
        assert!(matches!(pbc_pad_2d(&x, 2, 1), Err(NetworkError::UnsupportedPad { .. })));
        let k = Tensor3::from_vec(3, 3, 2, vec![0.7; 18]).unwrap();
        assert!(pbc_pad_2d(&k, 2, 2).unwrap().data.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn pad_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(3, 4, 2, &mut rng);
        let p = pbc_pad_2d(&x, 1, 2).unwrap();
        let g = random_tensor(p.h, p.w, p.c, &mut rng);
        let back = pbc_pad_2d_backward(&g, 3, 4, 1, 2);
        assert!((dot(&p, &g) - dot(&x, &back)).abs() < 1e-12);
    }

    #[test]
    fn conv_identity_and_window_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(3, 3, 1, &mut rng);
        let id = ConvShape {
            kh: 1,
            kw: 1,
            c_in: 1,
            c_out: 1,
        };
        assert_eq!(conv2d(&x, id, &[1.0], &[0.0]).unwrap(), x);

        let c = Tensor3::from_vec(4, 4, 1, vec![0.3; 16]).unwrap();
        let shape = ConvShape {
            kh: 3,
            kw: 3,
            c_in: 1,
            c_out: 1,
        };
        let out = conv2d(&pbc_pad_2d(&c, 1, 1).unwrap(), shape, &[1.0; 9], &[0.5]).unwrap();
        assert_eq!((out.h, out.w), (4, 4));
        assert!(out.data.iter().all(|&v| (v - (9.0 * 0.3 + 0.5)).abs() < 1e-14));
        assert!(conv2d(&c, shape, &[1.0; 8], &[0.5]).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(5, 4, 2, &mut rng);
        let shape = ConvShape {
            kh: 3,
            kw: 2,
            c_in: 2,
            c_out: 3,
        };
        let w: Vec<f64> = (0..shape.n_weights()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = conv2d(&x, shape, &w, &b).unwrap();
        let g = random_tensor(out.h, out.w, out.c, &mut rng);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv2d_backward(&x, shape, &w, &g, &mut gw, &mut gb, true).unwrap();
        // Loss = <g, conv(x)> is linear in each argument; central differences are exact up to rounding.
        let loss = |x: &Tensor3, w: &[f64], b: &[f64]| dot(&conv2d(x, shape, w, b).unwrap(), &g);
        let eps = 1e-6;
        for k in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[k] += eps;
            wm[k] -= eps;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * eps);
            assert!((fd - gw[k]).abs() < 1e-7, "weight {k}: {fd} vs {}", gw[k]);
        }
        for k in 0..3 {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[k] += eps;
            bm[k] -= eps;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * eps);
            assert!((fd - gb[k]).abs() < 1e-7);
        }
        for k in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[k] += eps;
            xm.data[k] -= eps;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * eps);
            assert!((fd - gx.data[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor3::from_vec(1, 1, 3, vec![1.0, 3.0, 2.0]).unwrap();
        let (o, idx) = maxpool1d_channels(&x, 2, 1, true).unwrap();
        assert_eq!(o.data, vec![3.0, 3.0, 2.0]);
        assert_eq!(idx, vec![1, 1, 2]);

        let x = Tensor3::from_vec(1, 1, 4, vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (o, _) = maxpool1d_channels(&x, 2, 2, false).unwrap();
        assert_eq!(o.data, vec![3.0, 2.0]);

        let x = Tensor3::from_vec(1, 2, 4, vec![0.5; 8]).unwrap();
        let (o, idx) = maxpool1d_channels(&x, 2, 2, false).unwrap();
        assert!(o.data.iter().all(|&v| v == 0.5));
        // Ties go to the lowest index.
        assert_eq!(idx, vec![0, 2, 0, 2]);

        let x = Tensor3::from_vec(1, 1, 3, vec![1.0, 3.0, 2.0]).unwrap();
        assert!(matches!(
            maxpool1d_channels(&x, 2, 2, false),
            Err(NetworkError::IndivisibleChannels { .. })
        ));
    }

    #[test]
    fn maxpool_gradient_routes_to_winner() {
        let x = Tensor3::from_vec(1, 1, 4, vec![1.0, 3.0, 2.0, 0.0]).unwrap();
        let (o, idx) = maxpool1d_channels(&x, 2, 2, false).unwrap();
        let g = Tensor3::from_vec(1, 1, 2, vec![10.0, 20.0]).unwrap();
        let back = maxpool1d_channels_backward(&g, &idx, 4);
        assert_eq!(o.c, 2);
        assert_eq!(back.data, vec![0.0, 10.0, 20.0, 0.0]);
    }

    #[test]
    fn tconv_examples() {
        let x = Tensor3::from_vec(1, 1, 2, vec![2.0, 5.0]).unwrap();
        assert_eq!(
            tconv1d_channels(&x, &[1.0, 0.0]).unwrap().data,
            vec![2.0, 0.0, 5.0, 0.0]
        );
        assert_eq!(
            tconv1d_channels(&x, &[1.0, 1.0]).unwrap().data,
            vec![2.0, 2.0, 5.0, 5.0]
        );
    }

    #[test]
    fn tconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(2, 3, 3, &mut rng);
        let kernel = [0.4, -1.3];
        let out = tconv1d_channels(&x, &kernel).unwrap();
        let g = random_tensor(out.h, out.w, out.c, &mut rng);
        let mut gk = [0.0; 2];
        let gx = tconv1d_channels_backward(&x, &kernel, &g, &mut gk);
        let loss = |x: &Tensor3, k: &[f64]| dot(&tconv1d_channels(x, k).unwrap(), &g);
        let eps = 1e-6;
        for r in 0..2 {
            let (mut kp, mut km) = (kernel, kernel);
            kp[r] += eps;
            km[r] -= eps;
            assert!(((loss(&x, &kp) - loss(&x, &km)) / (2.0 * eps) - gk[r]).abs() < 1e-7);
        }
        for k in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[k] += eps;
            xm.data[k] -= eps;
            assert!(((loss(&xp, &kernel) - loss(&xm, &kernel)) / (2.0 * eps) - gx.data[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn embedding_lookup() {
        let holes = Configuration::new(vec![0; 8], SiteMode::TJ).unwrap();
        let table = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let e = embed(&holes, 2, 4, &table, 2).unwrap();
        for s in 0..8 {
            assert_eq!(&e.data[2 * s..2 * s + 2], &[3.0, 4.0]);
        }
        let onehot = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let c = Configuration::new(vec![-1, 0, 1, 1], SiteMode::TJ).unwrap();
        let e = embed(&c, 2, 2, &onehot, 3).unwrap();
        assert_eq!(e.data, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Configuration::new(vec![-1, 0, 1, 1, 0, -1], SiteMode::TJ).unwrap();
        let table: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = random_tensor(2, 3, 3, &mut rng);
        let mut gt = vec![0.0; 9];
        embed_backward(&c, &g, &mut gt);
        let loss = |t: &[f64]| dot(&embed(&c, 2, 3, t, 3).unwrap(), &g);
        let eps = 1e-6;
        for k in 0..9 {
            let (mut tp, mut tm) = (table.clone(), table.clone());
            tp[k] += eps;
            tm[k] -= eps;
            assert!(((loss(&tp) - loss(&tm)) / (2.0 * eps) - gt[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn product_head_examples() {
        let ones = Tensor3::from_vec(2, 2, 1, vec![1.0; 4]).unwrap();
        assert_eq!(product_head(&ones), Amplitude::new(0.0, 1));
        let f = Tensor3::from_vec(1, 2, 1, vec![2.0, -3.0]).unwrap();
        let a = product_head(&f);
        assert!((a.log_abs - 6f64.ln()).abs() < 1e-14);
        assert_eq!(a.sign, -1);
        let z = Tensor3::from_vec(1, 2, 1, vec![2.0, 0.0]).unwrap();
        assert!(product_head(&z).is_zero());
    }
}
