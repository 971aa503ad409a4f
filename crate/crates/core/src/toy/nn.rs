//! Minimal neural-network layers with explicit backward passes.
//!
//! Everything operates on per-sample 2-D token matrices (`tokens x features`)
//! so the denoiser's forward code reads like its math. Layers accumulate
//! parameter gradients internally; callers keep the activations a backward
//! pass needs.

use ndarray::{Array1, Array2, Dimension};
use rand::Rng;

use crate::attention::softmax_attention;
use crate::error::Result;
use crate::scalar::Scalar;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone)]
pub struct Linear<S> {
    pub w: Array2<S>,
    pub b: Array1<S>,
    pub gw: Array2<S>,
    pub gb: Array1<S>,
}

impl<S: Scalar> Linear<S> {
    /// Xavier-uniform init.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            S::from_real(rng.gen_range(-limit..limit))
        });
        Self {
            b: Array1::zeros(fan_out),
            gw: Array2::zeros((fan_in, fan_out)),
            gb: Array1::zeros(fan_out),
            w,
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> Array2<S> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulate parameter gradients and return the input gradient.
    pub fn backward(&mut self, x: &Array2<S>, gout: &Array2<S>) -> Array2<S> {
        self.gw = &self.gw + &x.t().dot(gout);
        self.gb = &self.gb + &gout.sum_axis(ndarray::Axis(0));
        gout.dot(&self.w.t())
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(S::zero());
        self.gb.fill(S::zero());
    }
}

/// Per-row layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm<S> {
    pub gamma: Array1<S>,
    pub beta: Array1<S>,
    pub ggamma: Array1<S>,
    pub gbeta: Array1<S>,
}

/// Activations a layer-norm backward pass needs.
#[derive(Debug)]
pub struct LayerNormCache<S> {
    /// Normalized input (before scale/shift).
    normed: Array2<S>,
    /// Per-row inverse standard deviation.
    inv_std: Array1<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            ggamma: Array1::zeros(dim),
            gbeta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<S>) -> (Array2<S>, LayerNormCache<S>) {
        let (rows, cols) = x.dim();
        let eps = S::from_real(LAYER_NORM_EPS);
        let n = S::from_real(cols as f64);
        let mut normed = Array2::zeros((rows, cols));
        let mut inv_std = Array1::zeros(rows);
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                normed[[r, c]] = (x[[r, c]] - mean) * is;
            }
        }
        let out = &normed * &self.gamma + &self.beta;
        (out, LayerNormCache { normed, inv_std })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<S>, gout: &Array2<S>) -> Array2<S> {
        let (rows, cols) = gout.dim();
        let n = S::from_real(cols as f64);
        let mut gin = Array2::zeros((rows, cols));
        for r in 0..rows {
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for c in 0..cols {
                let g = gout[[r, c]] * self.gamma[c];
                sum_g += g;
                sum_gx += g * cache.normed[[r, c]];
            }
            for c in 0..cols {
                let g = gout[[r, c]] * self.gamma[c];
                gin[[r, c]] = (g - sum_g / n - cache.normed[[r, c]] * sum_gx / n) * cache.inv_std[r];
            }
        }
        for c in 0..cols {
            let mut gg = S::zero();
            let mut gb = S::zero();
            for r in 0..rows {
                gg += gout[[r, c]] * cache.normed[[r, c]];
                gb += gout[[r, c]];
            }
            self.ggamma[c] += gg;
            self.gbeta[c] += gb;
        }
        gin
    }

    pub fn zero_grad(&mut self) {
        self.ggamma.fill(S::zero());
        self.gbeta.fill(S::zero());
    }
}

/// Elementwise tanh; returns the output, which is also the backward cache.
pub fn tanh_forward<S: Scalar>(x: &Array2<S>) -> Array2<S> {
    x.mapv(|v| v.tanh())
}

pub fn tanh_backward<S: Scalar>(y: &Array2<S>, gout: &Array2<S>) -> Array2<S> {
    let mut gin = gout.clone();
    gin.zip_mut_with(y, |g, t| *g *= S::one() - *t * *t);
    gin
}

/// Weights of one scaled-dot-product attention evaluation.
#[derive(Debug)]
pub struct AttnCache<S> {
    pub weights: Array2<S>,
}

/// Forward attention, sharing the exact arithmetic of the inference-side
/// primitive so captured maps agree bitwise between training and sampling.
pub fn attn_forward<S: Scalar>(
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
) -> Result<(Array2<S>, AttnCache<S>)> {
    let (out, weights) = softmax_attention(q, k, v)?;
    Ok((out, AttnCache { weights }))
}

/// Gradients `(gq, gk, gv)` of an attention evaluation.
pub fn attn_backward<S: Scalar>(
    cache: &AttnCache<S>,
    q: &Array2<S>,
    k: &Array2<S>,
    v: &Array2<S>,
    gout: &Array2<S>,
) -> (Array2<S>, Array2<S>, Array2<S>) {
    let a = &cache.weights;
    let scale = S::one() / S::from_real(q.ncols() as f64).sqrt();
    let gv = a.t().dot(gout);
    let ga = gout.dot(&v.t());
    // Softmax Jacobian per row: g_logits = a * (ga - rowsum(ga * a)).
    let mut glogits = ga.clone();
    for (mut grow, arow) in glogits.rows_mut().into_iter().zip(a.rows()) {
        let dot: S = grow.iter().zip(arow.iter()).map(|(g, w)| *g * *w).sum();
        for (g, w) in grow.iter_mut().zip(arow.iter()) {
            *g = (*g - dot) * *w;
        }
    }
    let gq = glogits.dot(k) * scale;
    let gk = glogits.t().dot(q) * scale;
    (gq, gk, gv)
}

/// Average-pool a `g x g` row-major token grid down to `g/2 x g/2`.
pub fn mean_pool_tokens<S: Scalar>(x: &Array2<S>, grid: usize) -> Array2<S> {
    debug_assert_eq!(x.nrows(), grid * grid);
    debug_assert_eq!(grid % 2, 0);
    let half = grid / 2;
    let d = x.ncols();
    let quarter = S::from_real(0.25);
    let mut out = Array2::zeros((half * half, d));
    for r in 0..half {
        for c in 0..half {
            let o = r * half + c;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i = (2 * r + dr) * grid + (2 * c + dc);
                for f in 0..d {
                    out[[o, f]] += x[[i, f]] * quarter;
                }
            }
        }
    }
    out
}

pub fn mean_pool_tokens_backward<S: Scalar>(gout: &Array2<S>, grid: usize) -> Array2<S> {
    let half = grid / 2;
    let d = gout.ncols();
    let quarter = S::from_real(0.25);
    let mut gin = Array2::zeros((grid * grid, d));
    for r in 0..half {
        for c in 0..half {
            let o = r * half + c;
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let i = (2 * r + dr) * grid + (2 * c + dc);
                for f in 0..d {
                    gin[[i, f]] = gout[[o, f]] * quarter;
                }
            }
        }
    }
    gin
}

/// Duplicate each token of a `g x g` grid into its 2x2 children on the
/// `2g x 2g` grid.
pub fn nearest_upsample_tokens<S: Scalar>(x: &Array2<S>, grid: usize) -> Array2<S> {
    debug_assert_eq!(x.nrows(), grid * grid);
    let big = grid * 2;
    let d = x.ncols();
    let mut out = Array2::zeros((big * big, d));
    for r in 0..big {
        for c in 0..big {
            let i = (r / 2) * grid + c / 2;
            for f in 0..d {
                out[[r * big + c, f]] = x[[i, f]];
            }
        }
    }
    out
}

pub fn nearest_upsample_tokens_backward<S: Scalar>(gout: &Array2<S>, grid: usize) -> Array2<S> {
    let big = grid * 2;
    let d = gout.ncols();
    let mut gin = Array2::zeros((grid * grid, d));
    for r in 0..big {
        for c in 0..big {
            let i = (r / 2) * grid + c / 2;
            for f in 0..d {
                gin[[i, f]] += gout[[r * big + c, f]];
            }
        }
    }
    gin
}

/// Cut an `H x W x C` image into non-overlapping `p x p` patches, one row per
/// patch in row-major grid order, features ordered `(dy, dx, channel)`.
pub fn patchify<S: Scalar>(img: &ndarray::Array3<S>, p: usize) -> Array2<S> {
    let (h, w, c) = img.dim();
    debug_assert!(h % p == 0 && w % p == 0);
    let (gh, gw) = (h / p, w / p);
    let mut out = Array2::zeros((gh * gw, p * p * c));
    for gr in 0..gh {
        for gc in 0..gw {
            let row = gr * gw + gc;
            let mut f = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[[row, f]] = img[[gr * p + dy, gc * p + dx, ch]];
                        f += 1;
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(tokens: &Array2<S>, p: usize, h: usize, w: usize, c: usize) -> ndarray::Array3<S> {
    let (gh, gw) = (h / p, w / p);
    debug_assert_eq!(tokens.nrows(), gh * gw);
    debug_assert_eq!(tokens.ncols(), p * p * c);
    let mut out = ndarray::Array3::zeros((h, w, c));
    for gr in 0..gh {
        for gc in 0..gw {
            let row = gr * gw + gc;
            let mut f = 0;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        out[[gr * p + dy, gc * p + dx, ch]] = tokens[[row, f]];
                        f += 1;
                    }
                }
            }
        }
    }
    out
}

/// Fixed 2-D sine/cosine position embedding for a `g x g` token grid.
pub fn position_embedding_2d<S: Scalar>(grid: usize, dim: usize) -> Array2<S> {
    debug_assert_eq!(dim % 4, 0);
    let quarter = dim / 4;
    let mut out = Array2::zeros((grid * grid, dim));
    for r in 0..grid {
        for c in 0..grid {
            let row = r * grid + c;
            for f in 0..quarter {
                let omega = 1.0 / 10000f64.powf(f as f64 / quarter as f64);
                out[[row, 4 * f]] = S::from_real((r as f64 * omega).sin());
                out[[row, 4 * f + 1]] = S::from_real((r as f64 * omega).cos());
                out[[row, 4 * f + 2]] = S::from_real((c as f64 * omega).sin());
                out[[row, 4 * f + 3]] = S::from_real((c as f64 * omega).cos());
            }
        }
    }
    out
}

/// Sine/cosine features of a normalized timestep in `(0, 1]`.
pub fn time_features<S: Scalar>(tau: f64, dim: usize) -> Array1<S> {
    debug_assert_eq!(dim % 2, 0);
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    let pos = tau * 100.0;
    for f in 0..half {
        let omega = 1.0 / 10000f64.powf(f as f64 / half as f64);
        out[2 * f] = S::from_real((pos * omega).sin());
        out[2 * f + 1] = S::from_real((pos * omega).cos());
    }
    out
}

/// Adam with slot state matched to a fixed per-step call order.
///
/// Callers invoke [`Adam::begin_step`] then `update` once per parameter
/// tensor in the same order every step; slots are allocated on first use.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    slots: Vec<(Vec<f64>, Vec<f64>)>,
    cursor: usize,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: Vec::new(),
            cursor: 0,
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
        self.cursor = 0;
    }

    /// Apply one update; `grad` must match `param` in shape.
    pub fn update<D: Dimension>(
        &mut self,
        param: &mut ndarray::Array<S, D>,
        grad: &ndarray::Array<S, D>,
    ) {
        debug_assert!(self.step > 0, "call begin_step before update");
        let n = param.len();
        if self.cursor == self.slots.len() {
            self.slots.push((vec![0.0; n], vec![0.0; n]));
        }
        let (m, v) = &mut self.slots[self.cursor];
        self.cursor += 1;
        debug_assert_eq!(m.len(), n, "parameter count changed between steps");
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.lr.to_real();
        for ((p, g), (ms, vs)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g.to_real();
            *ms = self.beta1 * *ms + (1.0 - self.beta1) * g;
            *vs = self.beta2 * *vs + (1.0 - self.beta2) * g * g;
            let mhat = *ms / bc1;
            let vhat = *vs / bc2;
            *p = S::from_real(p.to_real() - lr * mhat / (vhat.sqrt() + self.eps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;
    use ndarray::arr2;

    /// Central finite difference of a scalar function of one array entry.
    fn numeric_grad<F: FnMut(f64) -> f64>(x0: f64, mut f: F) -> f64 {
        let h = 1e-6;
        (f(x0 + h) - f(x0 - h)) / (2.0 * h)
    }

    #[test]
    fn linear_backward_matches_finite_difference() {
        let mut rng = rng_from_seed(31);
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = arr2(&[[0.3, -0.8, 0.5], [1.0, 0.2, -0.4]]);
        // Loss: sum of squares of the outputs.
        let y = lin.forward(&x);
        let gout = y.mapv(|v| 2.0 * v);
        lin.zero_grad();
        let gx = lin.backward(&x, &gout);

        for (i, j) in [(0, 0), (2, 1), (1, 0)] {
            let base = lin.w[[i, j]];
            let g = numeric_grad(base, |v| {
                let mut l2 = lin.clone();
                l2.w[[i, j]] = v;
                l2.forward(&x).iter().map(|o| o * o).sum()
            });
            assert_relative_eq!(lin.gw[[i, j]], g, max_relative = 1e-6);
        }
        let g = numeric_grad(x[[0, 1]], |v| {
            let mut x2 = x.clone();
            x2[[0, 1]] = v;
            lin.forward(&x2).iter().map(|o| o * o).sum()
        });
        assert_relative_eq!(gx[[0, 1]], g, max_relative = 1e-6);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut ln = LayerNorm::<f64>::new(4);
        ln.gamma = ndarray::arr1(&[1.1, 0.9, 1.2, 0.8]);
        ln.beta = ndarray::arr1(&[0.1, -0.1, 0.0, 0.2]);
        let x = arr2(&[[0.5, -1.0, 2.0, 0.3], [1.5, 0.1, -0.7, 0.9]]);
        let loss = |ln: &LayerNorm<f64>, x: &Array2<f64>| -> f64 {
            let (y, _) = ln.forward(x);
            y.iter().map(|v| v * v * 0.5).sum()
        };
        let (y, cache) = ln.forward(&x);
        ln.zero_grad();
        let gx = ln.backward(&cache, &y);

        for (i, j) in [(0, 0), (0, 3), (1, 2)] {
            let g = numeric_grad(x[[i, j]], |v| {
                let mut x2 = x.clone();
                x2[[i, j]] = v;
                loss(&ln, &x2)
            });
            assert_relative_eq!(gx[[i, j]], g, max_relative = 1e-5);
        }
        for j in 0..4 {
            let g = numeric_grad(ln.gamma[j], |v| {
                let mut l2 = ln.clone();
                l2.gamma[j] = v;
                loss(&l2, &x)
            });
            assert_relative_eq!(ln.ggamma[j], g, max_relative = 1e-5);
        }
    }

    #[test]
    fn attention_backward_matches_finite_difference() {
        let mut rng = rng_from_seed(33);
        let q = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let k = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let v = Array2::from_shape_fn((5, 2), |_| rng.gen_range(-1.0..1.0));
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| -> f64 {
            let (out, _) = attn_forward(q, k, v).unwrap();
            out.iter().map(|o| o * o * 0.5).sum()
        };
        let (out, cache) = attn_forward(&q, &k, &v).unwrap();
        let (gq, gk, gv) = attn_backward(&cache, &q, &k, &v, &out);

        for (arr, garr, name) in [(&q, &gq, "q"), (&k, &gk, "k"), (&v, &gv, "v")] {
            for idx in [(0, 0), (1, 1), (2, 0)] {
                let g = numeric_grad(arr[idx], |x| {
                    let mut a2 = (*arr).clone();
                    a2[idx] = x;
                    match name {
                        "q" => loss(&a2, &k, &v),
                        "k" => loss(&q, &a2, &v),
                        _ => loss(&q, &k, &a2),
                    }
                });
                assert_relative_eq!(garr[idx], g, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_maps() {
        let mut rng = rng_from_seed(35);
        let x = Array2::from_shape_fn((16, 3), |_| rng.gen_range(-1.0..1.0f64));
        let pooled = mean_pool_tokens(&x, 4);
        assert_eq!(pooled.dim(), (4, 3));
        // Token (0,0) pools grid entries 0, 1, 4, 5.
        let expect = (x[[0, 0]] + x[[1, 0]] + x[[4, 0]] + x[[5, 0]]) / 4.0;
        assert_relative_eq!(pooled[[0, 0]], expect, max_relative = 1e-12);

        let up = nearest_upsample_tokens(&pooled, 2);
        assert_eq!(up.dim(), (16, 3));
        assert_eq!(up[[0, 0]], pooled[[0, 0]]);
        assert_eq!(up[[5, 0]], pooled[[0, 0]]);

        // <Ax, y> == <x, A^T y> for both linear maps.
        let y = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0f64));
        let lhs: f64 = (&pooled * &y).sum();
        let back = mean_pool_tokens_backward(&y, 4);
        let rhs: f64 = (&x * &back).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);

        let y2 = Array2::from_shape_fn((16, 3), |_| rng.gen_range(-1.0..1.0f64));
        let lhs2: f64 = (&nearest_upsample_tokens(&y, 2) * &y2).sum();
        let rhs2: f64 = (&y * &nearest_upsample_tokens_backward(&y2, 2)).sum();
        assert_relative_eq!(lhs2, rhs2, max_relative = 1e-12);
    }

    #[test]
    fn patchify_round_trip() {
        let mut rng = rng_from_seed(37);
        let img = ndarray::Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0f32));
        let tokens = patchify(&img, 4);
        assert_eq!(tokens.dim(), (4, 48));
        let back = unpatchify(&tokens, 4, 8, 8, 3);
        assert_eq!(img, back);
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut p = ndarray::arr1(&[5.0f64, -3.0]);
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            opt.begin_step();
            let g = p.mapv(|v| 2.0 * v);
            let g2 = g.clone();
            opt.update(&mut p, &g2);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "p = {p:?}");
    }

    #[test]
    fn tanh_backward_matches_finite_difference() {
        let x = arr2(&[[0.3f64, -1.2], [2.0, 0.0]]);
        let y = tanh_forward(&x);
        let gout = Array2::ones((2, 2));
        let gin = tanh_backward(&y, &gout);
        for idx in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let g = numeric_grad(x[idx], |v| v.tanh());
            assert_relative_eq!(gin[idx], g, max_relative = 1e-6);
        }
    }
}
