//! Fused operations with hand-written adjoints: row layer normalization,
//! windowed multi-head attention, and depthwise valid convolution.
//!
//! Fusing these keeps tapes short and lets the backward passes reuse
//! quantities (normalized activations, attention probabilities) computed
//! during the forward pass.

use super::{Scalar, Tape, Var};
use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3};
use std::sync::Arc;

fn as2<T: Scalar>(x: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("operation requires a 2-d array")
}

fn as3<T: Scalar>(x: &ArrayD<T>) -> ndarray::ArrayView3<'_, T> {
    x.view()
        .into_dimensionality::<Ix3>()
        .expect("operation requires a 3-d array")
}

impl<T: Scalar> Tape<T> {
    /// Normalizes each row of `x` to zero mean and unit variance, then applies
    /// a learned per-column gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let (value, xhat, inv_std) = {
            let inner = self.inner.borrow();
            let vx = as2(&inner.values[x.0]);
            let vg = &inner.values[gain.0];
            let vb = &inner.values[bias.0];
            assert_eq!(vg.ndim(), 1, "layer_norm gain must be 1-d");
            assert_eq!(vb.ndim(), 1, "layer_norm bias must be 1-d");
            assert_eq!(vx.ncols(), vg.len(), "layer_norm gain width mismatch");
            assert_eq!(vx.ncols(), vb.len(), "layer_norm bias width mismatch");

            let n = T::from_f64(vx.ncols() as f64);
            let mut xhat = Array2::<T>::zeros(vx.raw_dim());
            let mut inv_std = Array1::<T>::zeros(vx.nrows());
            for (r, row) in vx.outer_iter().enumerate() {
                let mean = row.sum() / n;
                let var = row.fold(T::zero(), |acc, &v| {
                    let d = v - mean;
                    acc + d * d
                }) / n;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[r] = inv;
                for (c, &v) in row.iter().enumerate() {
                    xhat[(r, c)] = (v - mean) * inv;
                }
            }
            let g1 = vg.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let b1 = vb.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let value = (&xhat * &g1 + &b1).into_dyn();
            (value, xhat, inv_std)
        };
        let (xi, gi, bi) = (x.0, gain.0, bias.0);
        self.push(
            value,
            Box::new(move |values, g, sink| {
                let g2 = as2(g);
                let vg = values[gi]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                let n = T::from_f64(g2.ncols() as f64);

                sink(gi, (&g2 * &xhat).sum_axis(Axis(0)).into_dyn());
                sink(bi, g2.sum_axis(Axis(0)).into_dyn());

                let mut dx = Array2::<T>::zeros(g2.raw_dim());
                for r in 0..g2.nrows() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_xhat = T::zero();
                    for c in 0..g2.ncols() {
                        let dh = g2[(r, c)] * vg[c];
                        sum_dh = sum_dh + dh;
                        sum_dh_xhat = sum_dh_xhat + dh * xhat[(r, c)];
                    }
                    let mean_dh = sum_dh / n;
                    let mean_dh_xhat = sum_dh_xhat / n;
                    for c in 0..g2.ncols() {
                        let dh = g2[(r, c)] * vg[c];
                        dx[(r, c)] = inv_std[r] * (dh - mean_dh - xhat[(r, c)] * mean_dh_xhat);
                    }
                }
                sink(xi, dx.into_dyn());
            }),
        )
    }

    /// Multi-head scaled dot-product attention evaluated independently inside
    /// each window.
    ///
    /// `q`, `k`, `v` are `(windows * window_len, channels)` with rows grouped
    /// window by window. `mask`, when present, is `(windows, window_len,
    /// window_len)` and is added to the attention scores before the softmax;
    /// large negative entries suppress cross-region attention after a cyclic
    /// shift.
    pub fn window_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        windows: usize,
        window_len: usize,
        heads: usize,
        mask: Option<Arc<Array3<T>>>,
    ) -> Var {
        let (value, probs) = {
            let inner = self.inner.borrow();
            let vq = as2(&inner.values[q.0]);
            let vk = as2(&inner.values[k.0]);
            let vv = as2(&inner.values[v.0]);
            let channels = vq.ncols();
            assert_eq!(vq.shape(), vk.shape(), "attention q/k shape mismatch");
            assert_eq!(vq.shape(), vv.shape(), "attention q/v shape mismatch");
            assert_eq!(
                vq.nrows(),
                windows * window_len,
                "attention row count must equal windows * window_len"
            );
            assert_eq!(channels % heads, 0, "channels must divide into heads");
            if let Some(m) = &mask {
                assert_eq!(
                    m.shape(),
                    [windows, window_len, window_len],
                    "attention mask shape mismatch"
                );
            }
            let dh = channels / heads;
            let scale = T::one() / T::from_f64((dh as f64).sqrt());

            let mut out = Array2::<T>::zeros((vq.nrows(), channels));
            let mut probs: Vec<Array2<T>> = Vec::with_capacity(windows * heads);
            for w in 0..windows {
                let r0 = w * window_len;
                for h in 0..heads {
                    let c0 = h * dh;
                    let qw = vq.slice(ndarray::s![r0..r0 + window_len, c0..c0 + dh]);
                    let kw = vk.slice(ndarray::s![r0..r0 + window_len, c0..c0 + dh]);
                    let vw = vv.slice(ndarray::s![r0..r0 + window_len, c0..c0 + dh]);

                    let mut scores = qw.dot(&kw.t());
                    scores.mapv_inplace(|s| s * scale);
                    if let Some(m) = &mask {
                        for i in 0..window_len {
                            for j in 0..window_len {
                                scores[(i, j)] = scores[(i, j)] + m[(w, i, j)];
                            }
                        }
                    }
                    // Row softmax with max subtraction for numerical safety.
                    for mut row in scores.outer_iter_mut() {
                        let max = row.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
                        row.mapv_inplace(|s| (s - max).exp());
                        let total = row.sum();
                        row.mapv_inplace(|s| s / total);
                    }
                    let p = scores;
                    out.slice_mut(ndarray::s![r0..r0 + window_len, c0..c0 + dh])
                        .assign(&p.dot(&vw));
                    probs.push(p);
                }
            }
            (out.into_dyn(), probs)
        };
        let (qi, ki, vi) = (q.0, k.0, v.0);
        self.push(
            value,
            Box::new(move |values, g, sink| {
                let g2 = as2(g);
                let vq = as2(&values[qi]);
                let vk = as2(&values[ki]);
                let vv = as2(&values[vi]);
                let channels = vq.ncols();
                let dh = channels / heads;
                let scale = T::one() / T::from_f64((dh as f64).sqrt());

                let mut dq = Array2::<T>::zeros(vq.raw_dim());
                let mut dk = Array2::<T>::zeros(vk.raw_dim());
                let mut dv = Array2::<T>::zeros(vv.raw_dim());
                for w in 0..windows {
                    let r0 = w * window_len;
                    for h in 0..heads {
                        let c0 = h * dh;
                        let p = &probs[w * heads + h];
                        let go = g2.slice(ndarray::s![r0..r0 + window_len, c0..c0 + dh]);
                        let qw = vq.slice(ndarray::s![r0..r0 + window_len, c0..c0 + dh]);
                        let kw = vk.slice(ndarray::s![r0..r0 + window_len, c0..c0 + dh]);
                        let vw = vv.slice(ndarray::s![r0..r0 + window_len, c0..c0 + dh]);

                        dv.slice_mut(ndarray::s![r0..r0 + window_len, c0..c0 + dh])
                            .assign(&p.t().dot(&go));
                        let dp = go.dot(&vw.t());
                        // Softmax adjoint: dS = P ⊙ (dP - rowsum(dP ⊙ P)).
                        let mut ds = Array2::<T>::zeros((window_len, window_len));
                        for i in 0..window_len {
                            let mut dot = T::zero();
                            for j in 0..window_len {
                                dot = dot + dp[(i, j)] * p[(i, j)];
                            }
                            for j in 0..window_len {
                                ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot);
                            }
                        }
                        ds.mapv_inplace(|s| s * scale);
                        dq.slice_mut(ndarray::s![r0..r0 + window_len, c0..c0 + dh])
                            .assign(&ds.dot(&kw));
                        dk.slice_mut(ndarray::s![r0..r0 + window_len, c0..c0 + dh])
                            .assign(&ds.t().dot(&qw));
                    }
                }
                sink(qi, dq.into_dyn());
                sink(ki, dk.into_dyn());
                sink(vi, dv.into_dyn());
            }),
        )
    }

    /// Valid-mode depthwise correlation of an `(h, w, c)` node with a fixed
    /// 2-d kernel, applied identically to every channel.
    ///
    /// With stride 1 this realizes sliding-window filtering; with stride 2 and
    /// a 2x2 mean kernel it realizes low-pass downsampling. Output size is
    /// `floor((dim - kernel) / stride) + 1` per spatial dimension.
    pub fn conv2d_depthwise(&self, x: Var, kernel: Arc<Array2<T>>, stride: usize) -> Var {
        assert!(stride > 0, "stride must be positive");
        let value = {
            let inner = self.inner.borrow();
            let vx = as3(&inner.values[x.0]);
            let (h, w, c) = vx.dim();
            let (kh, kw) = kernel.dim();
            assert!(h >= kh && w >= kw, "kernel larger than input");
            let oh = (h - kh) / stride + 1;
            let ow = (w - kw) / stride + 1;
            let src_owned = vx.as_standard_layout();
            let src = src_owned.as_slice().expect("standard layout");
            let mut out = vec![T::zero(); oh * ow * c];
            for oy in 0..oh {
                let dst = &mut out[oy * ow * c..(oy + 1) * ow * c];
                for ky in 0..kh {
                    let iy = oy * stride + ky;
                    for kx in 0..kw {
                        let kv = kernel[(ky, kx)];
                        if stride == 1 {
                            // Consecutive outputs read consecutive inputs, so
                            // the whole row is one scaled add over a span.
                            let s = &src[(iy * w + kx) * c..(iy * w + kx) * c + ow * c];
                            for (d, &v) in dst.iter_mut().zip(s) {
                                *d = *d + kv * v;
                            }
                        } else {
                            for ox in 0..ow {
                                let si = (iy * w + ox * stride + kx) * c;
                                let di = ox * c;
                                for ch in 0..c {
                                    dst[di + ch] = dst[di + ch] + kv * src[si + ch];
                                }
                            }
                        }
                    }
                }
            }
            Array3::from_shape_vec((oh, ow, c), out)
                .expect("size matches")
                .into_dyn()
        };
        let xi = x.0;
        let kernel_b = Arc::clone(&kernel);
        self.push(
            value,
            Box::new(move |values, g, sink| {
                let g3 = as3(g);
                let vx = as3(&values[xi]);
                let (h, w, c) = vx.dim();
                let (kh, kw) = kernel_b.dim();
                let (oh, ow, _) = g3.dim();
                let g_owned = g3.as_standard_layout();
                let gs = g_owned.as_slice().expect("standard layout");
                let mut dx = vec![T::zero(); h * w * c];
                for oy in 0..oh {
                    let grow = &gs[oy * ow * c..(oy + 1) * ow * c];
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        for kx in 0..kw {
                            let kv = kernel_b[(ky, kx)];
                            if stride == 1 {
                                let d = &mut dx[(iy * w + kx) * c..(iy * w + kx) * c + ow * c];
                                for (dv, &gv) in d.iter_mut().zip(grow) {
                                    *dv = *dv + kv * gv;
                                }
                            } else {
                                for ox in 0..ow {
                                    let di = (iy * w + ox * stride + kx) * c;
                                    let gi = ox * c;
                                    for ch in 0..c {
                                        dx[di + ch] = dx[di + ch] + kv * grow[gi + ch];
                                    }
                                }
                            }
                        }
                    }
                }
                let dx = Array3::from_shape_vec((h, w, c), dx).expect("size matches");
                sink(xi, dx.into_dyn());
            }),
        )
    }
}
