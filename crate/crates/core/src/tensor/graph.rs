//! Tape of recorded operations. Nodes are appended in evaluation order,
//! so walking the tape backwards is a reverse topological traversal.

use std::collections::HashMap;

use super::kernels::{self, ConvDims};
use super::{ParamId, ParamSet, Real, Tensor};
use crate::error::{arg, shape, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    MatMul {
        a: Var,
        b: Var,
        dims: [usize; 4],
    },
    Transpose(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    BiasAdd {
        x: Var,
        b: Var,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    GateMix {
        z: Var,
        a: Var,
        b: Var,
    },
    Mse(Var, Var),
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    flops: u64,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every parameter that took part in the graph, in
    /// parameter-id order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    /// Adds the parameter gradients into `params[*].grad`.
    pub fn accumulate_into(&self, params: &mut ParamSet<F>) {
        for (id, g) in self.param_grads() {
            params.get_mut(id).grad.add_assign(g);
        }
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            flops: 0,
        }
    }

    /// Multiply-add FLOPs (counted as 2 each) of the convolutions and
    /// matrix products recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for a parameter. Repeated requests for the same id within one
    /// graph return the same node so gradients from every use accumulate.
    pub fn param(&mut self, params: &ParamSet<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).value.clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let [batch, c_in, height, width] = self.value(x).dims4()?;
        let [c_out, wc_in, kh, kw] = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(shape(format!(
                "conv kernel expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape(format!("kernel {kh}x{kw} must have odd sides")));
        }
        if let Some(b) = b {
            if self.shape_of(b) != [c_out] {
                return Err(shape(format!(
                    "bias shape {:?} does not match {c_out} output channels",
                    self.shape_of(b)
                )));
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            height,
            width,
            kh,
            kw,
        };
        self.flops += 2 * (batch * c_out * c_in * kh * kw * height * width) as u64;
        let mut out = Tensor::zeros(&[batch, c_out, height, width]);
        kernels::conv2d_forward(
            &dims,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        Ok(self.push(out, Op::Conv2d { x, w, b, dims }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so divergence stays visible in the loss
        let out = self.value(x).map(|v| if v < F::zero() { F::zero() } else { v });
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().expect("tensors have rank >= 1");
        let data = kernels::softmax_rows(t.data(), n);
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(x))
    }

    /// Normalizes across channels at every `(b, y, x)` location of a
    /// `[B, C, H, W]` tensor, then applies per-channel `gamma`/`beta`.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.shape_of(gamma) != [c] || self.shape_of(beta) != [c] {
            return Err(shape(format!("layer norm affine params must have shape [{c}]")));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let inv_c = F::of(1.0 / c as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut xhat = vec![F::zero(); xs.len()];
        let mut inv_std = vec![F::zero(); b * plane];
        let mut out = vec![F::zero(); xs.len()];
        for bi in 0..b {
            for p in 0..plane {
                let at = |ci: usize| (bi * c + ci) * plane + p;
                let mean = (0..c).map(|ci| xs[at(ci)]).sum::<F>() * inv_c;
                let var = (0..c)
                    .map(|ci| {
                        let d = xs[at(ci)] - mean;
                        d * d
                    })
                    .sum::<F>()
                    * inv_c;
                let is = F::one() / (var + eps).sqrt();
                inv_std[bi * plane + p] = is;
                for ci in 0..c {
                    let xh = (xs[at(ci)] - mean) * is;
                    xhat[at(ci)] = xh;
                    out[at(ci)] = g[ci] * xh + be[ci];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        let (&[ba, m, k], &[bb, k2, n]) = (sa, sb) else {
            return Err(shape(format!("matmul needs rank-3 operands, got {sa:?} and {sb:?}")));
        };
        if ba != bb || k != k2 {
            return Err(shape(format!("cannot multiply {sa:?} by {sb:?}")));
        }
        self.flops += 2 * (ba * m * k * n) as u64;
        let mut out = Tensor::zeros(&[ba, m, n]);
        kernels::matmul_batched(
            ba,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                dims: [ba, m, k, n],
            },
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let &[b, m, n] = self.shape_of(x) else {
            return Err(shape(format!("transpose needs rank 3, got {:?}", self.shape_of(x))));
        };
        let data = kernels::transpose_last2(b, m, n, self.value(x).data());
        let out = Tensor::new(vec![b, n, m], data)?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| arg("concat of nothing"))?;
        let s0 = self.shape_of(*first).to_vec();
        if s0.len() < 2 {
            return Err(shape("concat needs rank >= 2"));
        }
        let mut channels = 0;
        for &v in xs {
            let s = self.shape_of(v);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(shape(format!("cannot concat {s:?} with {s0:?}")));
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let batch = s0[0];
        let mut data = Vec::with_capacity(batch * channels * inner);
        for b in 0..batch {
            for &v in xs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut out_shape = s0.clone();
        out_shape[1] = channels;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Concat(xs.to_vec())))
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() < 2 || len == 0 || start + len > s[1] {
            return Err(shape(format!("channel slice {start}..{} of {s:?}", start + len)));
        }
        let inner: usize = s[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[1] = len;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::SliceChannels { x, start }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Adds `b[c]` to every element of channel `c` (axis 1).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape_of(x).to_vec();
        if s.len() < 2 || self.shape_of(b) != [s[1]] {
            return Err(shape(format!(
                "bias {:?} does not match channels of {s:?}",
                self.shape_of(b)
            )));
        }
        let inner: usize = s[2..].iter().product();
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[(i / inner) % s[1]];
        }
        Ok(self.push(out, Op::BiasAdd { x, b }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(new_shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `[B, r²·C, H, W] -> [B, C, r·H, r·W]` with
    /// `out[b][c][r·y+dy][r·x+dx] = in[b][c·r² + dy·r + dx][y][x]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(shape(format!("{c} channels not divisible by {r}^2")));
        }
        let co = c / (r * r);
        let index = kernels::pixel_shuffle_index(b, co, h, w, r);
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(vec![b, co, h * r, w * r], data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [b, c, oh, ow] = self.value(x).dims4()?;
        if r == 0 || oh % r != 0 || ow % r != 0 {
            return Err(shape(format!("{oh}x{ow} not divisible by {r}")));
        }
        let forward = kernels::pixel_shuffle_index(b, c, oh / r, ow / r, r);
        let mut index = vec![0; forward.len()];
        for (out_pos, &src) in forward.iter().enumerate() {
            index[src] = out_pos;
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(vec![b, c * r * r, oh / r, ow / r], data)?;
        Ok(self.push(out, Op::Gather { x, index }))
    }

    /// `z ⊙ a + (1 − z) ⊙ b`.
    pub fn gate_mix(&mut self, z: Var, a: Var, b: Var) -> Result<Var> {
        self.same_shape(z, a, "gate")?;
        self.same_shape(a, b, "gate")?;
        let (tz, ta, tb) = (self.value(z), self.value(a), self.value(b));
        let data = tz
            .data()
            .iter()
            .zip(ta.data())
            .zip(tb.data())
            .map(|((&z, &a), &b)| z * a + (F::one() - z) * b)
            .collect();
        let out = Tensor::new(tz.shape().to_vec(), data)?;
        Ok(self.push(out, Op::GateMix { z, a, b }))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = F::of(self.value(a).numel() as f64);
        let (ta, tb) = (self.value(a), self.value(b));
        let s = super::compensated_sum(ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)));
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(arg(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape_of(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape_of(loss), F::one()));

        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else {
                continue;
            };
            self.backward_node(i, g, lower);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        params.sort_by_key(|&(id, _)| id);
        Ok(Gradients { grads, params })
    }

    /// Propagates `g` (gradient of node `i`) into its inputs, all of which
    /// live in `lower` because they were recorded earlier.
    fn backward_node(&self, i: usize, g: &Tensor<F>, lower: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let mut gw = Tensor::zeros(val(*w).shape());
                let mut gb = b.map(|b| Tensor::zeros(val(b).shape()));
                kernels::conv2d_backward(
                    dims,
                    val(*x).data(),
                    val(*w).data(),
                    gd,
                    Some(gx.data_mut()),
                    Some(gw.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                accumulate(lower, *x, gx);
                accumulate(lower, *w, gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    accumulate(lower, *b, gb);
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let data = gd
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                    .collect();
                accumulate(lower, *x, like(out, data));
            }
            Op::Sigmoid(x) => {
                let data = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (F::one() - y))
                    .collect();
                accumulate(lower, *x, like(out, data));
            }
            Op::Softmax(x) => {
                let n = *out.shape().last().unwrap();
                let mut data = vec![F::zero(); gd.len()];
                for ((grow, yrow), drow) in gd.chunks(n).zip(out.data().chunks(n)).zip(data.chunks_mut(n)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                    for ((d, &g), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d = y * (g - dot);
                    }
                }
                accumulate(lower, *x, like(out, data));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let [b, c, h, w] = out.dims4().unwrap();
                let plane = h * w;
                let gam = val(*gamma).data();
                let inv_c = F::of(1.0 / c as f64);
                let mut gx = vec![F::zero(); gd.len()];
                let mut ggamma = vec![F::zero(); c];
                let mut gbeta = vec![F::zero(); c];
                for bi in 0..b {
                    for p in 0..plane {
                        let at = |ci: usize| (bi * c + ci) * plane + p;
                        let mut mean_gh = F::zero();
                        let mut mean_ghx = F::zero();
                        for ci in 0..c {
                            let gh = gd[at(ci)] * gam[ci];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[at(ci)];
                            ggamma[ci] += gd[at(ci)] * xhat[at(ci)];
                            gbeta[ci] += gd[at(ci)];
                        }
                        mean_gh *= inv_c;
                        mean_ghx *= inv_c;
                        let is = inv_std[bi * plane + p];
                        for ci in 0..c {
                            let gh = gd[at(ci)] * gam[ci];
                            gx[at(ci)] = is * (gh - mean_gh - xhat[at(ci)] * mean_ghx);
                        }
                    }
                }
                accumulate(lower, *x, like(out, gx));
                accumulate(lower, *gamma, Tensor::new(vec![c], ggamma).unwrap());
                accumulate(lower, *beta, Tensor::new(vec![c], gbeta).unwrap());
            }
            Op::MatMul { a, b, dims } => {
                let [batch, m, k, n] = *dims;
                // dA = G · Bᵀ, dB = Aᵀ · G
                let bt = kernels::transpose_last2(batch, k, n, val(*b).data());
                let mut ga = vec![F::zero(); batch * m * k];
                kernels::matmul_batched(batch, m, n, k, gd, &bt, &mut ga);
                let at = kernels::transpose_last2(batch, m, k, val(*a).data());
                let mut gb = vec![F::zero(); batch * k * n];
                kernels::matmul_batched(batch, k, m, n, &at, gd, &mut gb);
                accumulate(lower, *a, Tensor::new(vec![batch, m, k], ga).unwrap());
                accumulate(lower, *b, Tensor::new(vec![batch, k, n], gb).unwrap());
            }
            Op::Transpose(x) => {
                let s = out.shape();
                let data = kernels::transpose_last2(s[0], s[1], s[2], gd);
                accumulate(lower, *x, Tensor::new(val(*x).shape().to_vec(), data).unwrap());
            }
            Op::Concat(xs) => {
                let s = out.shape();
                let inner: usize = s[2..].iter().product();
                let total_c = s[1];
                let mut offset = 0;
                for &v in xs {
                    let vs = val(v).shape().to_vec();
                    let c = vs[1];
                    let mut data = Vec::with_capacity(val(v).numel());
                    for b in 0..s[0] {
                        let base = (b * total_c + offset) * inner;
                        data.extend_from_slice(&gd[base..base + c * inner]);
                    }
                    accumulate(lower, v, Tensor::new(vs, data).unwrap());
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = val(*x).shape();
                let inner: usize = xs[2..].iter().product();
                let len = out.shape()[1];
                let mut gx = Tensor::zeros(xs);
                for b in 0..xs[0] {
                    let dst = (b * xs[1] + start) * inner;
                    let src = b * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                accumulate(lower, *x, gx);
            }
            Op::Add(a, b) => {
                accumulate(lower, *a, g.clone());
                accumulate(lower, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(lower, *a, g.clone());
                accumulate(lower, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let ga = gd.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                let gb = gd.iter().zip(va).map(|(&g, &x)| g * x).collect();
                accumulate(lower, *a, like(out, ga));
                accumulate(lower, *b, like(out, gb));
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(lower, *x, g.map(|v| v * s));
            }
            Op::BiasAdd { x, b } => {
                let s = val(*x).shape();
                let inner: usize = s[2..].iter().product();
                let mut gb = Tensor::zeros(&[s[1]]);
                for (i, &gv) in gd.iter().enumerate() {
                    gb.data_mut()[(i / inner) % s[1]] += gv;
                }
                accumulate(lower, *x, g.clone());
                accumulate(lower, *b, gb);
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(val(*x).shape()).unwrap();
                accumulate(lower, *x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                let dst = gx.data_mut();
                for (&src_i, &gv) in index.iter().zip(gd) {
                    dst[src_i] += gv;
                }
                accumulate(lower, *x, gx);
            }
            Op::GateMix { z, a, b } => {
                let (vz, va, vb) = (val(*z).data(), val(*a).data(), val(*b).data());
                let mut gz = Vec::with_capacity(gd.len());
                let mut ga = Vec::with_capacity(gd.len());
                let mut gb = Vec::with_capacity(gd.len());
                for i in 0..gd.len() {
                    gz.push(gd[i] * (va[i] - vb[i]));
                    ga.push(gd[i] * vz[i]);
                    gb.push(gd[i] * (F::one() - vz[i]));
                }
                accumulate(lower, *z, like(out, gz));
                accumulate(lower, *a, like(out, ga));
                accumulate(lower, *b, like(out, gb));
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = gd[0] * F::of(2.0 / va.numel() as f64);
                let ga: Vec<F> = va.data().iter().zip(vb.data()).map(|(&x, &y)| k * (x - y)).collect();
                let gb = ga.iter().map(|&v| -v).collect();
                accumulate(lower, *a, like(va, ga));
                accumulate(lower, *b, like(va, gb));
            }
            Op::Sum(x) => {
                accumulate(lower, *x, Tensor::full(val(*x).shape(), gd[0]));
            }
            Op::SumSquares(x) => {
                let k = gd[0] + gd[0];
                accumulate(lower, *x, val(*x).map(|v| k * v));
            }
        }
    }
}

fn like<F: Real>(t: &Tensor<F>, data: Vec<F>) -> Tensor<F> {
    Tensor::new(t.shape().to_vec(), data).expect("gradient matches value shape")
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, delta: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}
