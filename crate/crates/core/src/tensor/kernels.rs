//! Raw forward and backward kernels on row-major buffers. Summation order
//! is fixed, so results are bit-reproducible.

use super::{neumaier_add, Real};

/// Geometry of a stride-1 "same" convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Visits every kernel tap with the overlapping row/column ranges of the
    /// output plane and the source offset.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, std::ops::Range<usize>, std::ops::Range<usize>, isize, isize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        let ph = (self.kh as isize - 1) / 2;
        let pw = (self.kw as isize - 1) / 2;
        for ky in 0..self.kh {
            let dy = ky as isize - ph;
            let y0 = (-dy).max(0);
            let y1 = (h - dy).min(h);
            if y0 >= y1 {
                continue;
            }
            for kx in 0..self.kw {
                let dx = kx as isize - pw;
                let x0 = (-dx).max(0);
                let x1 = (w - dx).min(w);
                if x0 >= x1 {
                    continue;
                }
                f(ky, kx, y0 as usize..y1 as usize, x0 as usize..x1 as usize, dy, dx);
            }
        }
    }
}

/// Zero-padded cross-correlation plus optional per-channel bias.
pub fn conv2d_forward<F: Real>(
    d: &ConvDims,
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    out: &mut [F],
) {
    let plane = d.plane();
    let w = d.width;
    let ksz = d.kh * d.kw;
    let mut comp = vec![F::zero(); if F::COMPENSATED { plane } else { 0 }];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let o = &mut out[(b * d.c_out + co) * plane..][..plane];
            let init = bias.map_or(F::zero(), |bs| bs[co]);
            o.iter_mut().for_each(|v| *v = init);
            comp.iter_mut().for_each(|v| *v = F::zero());
            for ci in 0..d.c_in {
                let src = &input[(b * d.c_in + ci) * plane..][..plane];
                let kern = &weight[(co * d.c_in + ci) * ksz..][..ksz];
                d.for_each_tap(|ky, kx, ys, xs, dy, dx| {
                    let wv = kern[ky * d.kw + kx];
                    for y in ys {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + xs.start..y * w + xs.end];
                        let sx0 = (xs.start as isize + dx) as usize;
                        let srow = &src[sy * w + sx0..sy * w + sx0 + orow.len()];
                        if F::COMPENSATED {
                            let crow = &mut comp[y * w + xs.start..y * w + xs.end];
                            for ((ov, cv), &sv) in orow.iter_mut().zip(crow).zip(srow) {
                                neumaier_add(ov, cv, wv * sv);
                            }
                        } else {
                            for (ov, &sv) in orow.iter_mut().zip(srow) {
                                *ov += wv * sv;
                            }
                        }
                    }
                });
            }
            for (ov, &cv) in o.iter_mut().zip(&comp) {
                *ov += cv;
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for [`conv2d_forward`].
pub fn conv2d_backward<F: Real>(
    d: &ConvDims,
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    grad_in: Option<&mut [F]>,
    grad_w: Option<&mut [F]>,
    grad_b: Option<&mut [F]>,
) {
    let plane = d.plane();
    let w = d.width;
    let ksz = d.kh * d.kw;

    if let Some(gb) = grad_b {
        for b in 0..d.batch {
            for (co, g) in gb.iter_mut().enumerate() {
                *g += grad_out[(b * d.c_out + co) * plane..][..plane]
                    .iter()
                    .copied()
                    .sum::<F>();
            }
        }
    }

    if let Some(gw) = grad_w {
        for b in 0..d.batch {
            for co in 0..d.c_out {
                let go = &grad_out[(b * d.c_out + co) * plane..][..plane];
                for ci in 0..d.c_in {
                    let src = &input[(b * d.c_in + ci) * plane..][..plane];
                    let gk = &mut gw[(co * d.c_in + ci) * ksz..][..ksz];
                    d.for_each_tap(|ky, kx, ys, xs, dy, dx| {
                        let mut acc = F::zero();
                        for y in ys {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (xs.start as isize + dx) as usize;
                            let grow = &go[y * w + xs.start..y * w + xs.end];
                            let srow = &src[sy * w + sx0..sy * w + sx0 + grow.len()];
                            for (&g, &s) in grow.iter().zip(srow) {
                                acc += g * s;
                            }
                        }
                        gk[ky * d.kw + kx] += acc;
                    });
                }
            }
        }
    }

    if let Some(gi) = grad_in {
        for b in 0..d.batch {
            for co in 0..d.c_out {
                let go = &grad_out[(b * d.c_out + co) * plane..][..plane];
                for ci in 0..d.c_in {
                    let gsrc = &mut gi[(b * d.c_in + ci) * plane..][..plane];
                    let kern = &weight[(co * d.c_in + ci) * ksz..][..ksz];
                    d.for_each_tap(|ky, kx, ys, xs, dy, dx| {
                        let wv = kern[ky * d.kw + kx];
                        for y in ys {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (xs.start as isize + dx) as usize;
                            let grow = &go[y * w + xs.start..y * w + xs.end];
                            let srow = &mut gsrc[sy * w + sx0..sy * w + sx0 + grow.len()];
                            for (s, &g) in srow.iter_mut().zip(grow) {
                                *s += wv * g;
                            }
                        }
                    });
                }
            }
        }
    }
}

/// `out[b] = a[b] · c[b]` for `a: [B, m, k]`, `c: [B, k, n]`.
pub fn matmul_batched<F: Real>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    c: &[F],
    out: &mut [F],
) {
    for b in 0..batch {
        let ab = &a[b * m * k..][..m * k];
        let cb = &c[b * k * n..][..k * n];
        let ob = &mut out[b * m * n..][..m * n];
        ob.iter_mut().for_each(|v| *v = F::zero());
        let mut comp = vec![F::zero(); if F::COMPENSATED { n } else { 0 }];
        for i in 0..m {
            let orow = &mut ob[i * n..(i + 1) * n];
            comp.iter_mut().for_each(|v| *v = F::zero());
            for p in 0..k {
                let av = ab[i * k + p];
                let crow = &cb[p * n..(p + 1) * n];
                if F::COMPENSATED {
                    for ((o, c), &cv) in orow.iter_mut().zip(comp.iter_mut()).zip(crow) {
                        neumaier_add(o, c, av * cv);
                    }
                } else {
                    for (o, &cv) in orow.iter_mut().zip(crow) {
                        *o += av * cv;
                    }
                }
            }
            for (o, &c) in orow.iter_mut().zip(&comp) {
                *o += c;
            }
        }
    }
}

/// Swaps the last two axes of `[B, m, n]`.
pub fn transpose_last2<F: Real>(batch: usize, m: usize, n: usize, x: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for b in 0..batch {
        for i in 0..m {
            for j in 0..n {
                out[b * m * n + j * m + i] = x[b * m * n + i * n + j];
            }
        }
    }
    out
}

/// For each element of the `[B, C, r·H, r·W]` output, the index of its
/// source in the `[B, C·r², H, W]` input.
pub fn pixel_shuffle_index(b: usize, c: usize, h: usize, w: usize, r: usize) -> Vec<usize> {
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                let (y, dy) = (oy / r, oy % r);
                for ox in 0..ow {
                    let (x, dx) = (ox / r, ox % r);
                    let src_c = ci * r * r + dy * r + dx;
                    idx.push(((bi * c * r * r + src_c) * h + y) * w + x);
                }
            }
        }
    }
    idx
}

pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Row-wise softmax over contiguous rows of length `n`, max-subtracted.
pub fn softmax_rows<F: Real>(x: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}
