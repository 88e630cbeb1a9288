use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gemm, Float, Grads, ParamId, ParamStore, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const GN_EPS: f64 = 1e-5;

enum Op<T> {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
    },
    GroupNorm {
        x: NodeId,
        groups: usize,
        affine: Option<(ParamId, ParamId)>,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBias {
        x: NodeId,
        v: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Upsample {
        x: NodeId,
    },
    Attention {
        qkv: NodeId,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
}

struct Node<T> {
    shape: [usize; 4],
    value: Vec<T>,
    op: Op<T>,
}

/// One recorded forward pass over borrowed parameters.
pub struct Graph<'p, T: Float> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'p, T: Float> Graph<'p, T> {
    /// Inference graph: dropout is the identity.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training graph: dropout draws its masks from `rng`.
    pub fn training(store: &'p ParamStore<T>, rng: ChaCha8Rng) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn shape(&self, id: NodeId) -> [usize; 4] {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    fn push(&mut self, shape: [usize; 4], value: Vec<T>, op: Op<T>) -> NodeId {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { shape, value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant `(n, c, h, w)` tensor.
    pub fn input(&mut self, shape: [usize; 4], value: Vec<T>) -> NodeId {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "input size");
        self.push(shape, value, Op::Input)
    }

    /// Square `k x k` convolution with zero padding. `w` has shape
    /// `(c_out, c_in, k, k)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let [n, cin, h, wd] = self.shape(x);
        let wp = self.store.get(w);
        let (cout, k) = (wp.shape[0], wp.shape[2]);
        assert_eq!(wp.shape[1], cin, "conv {}: input channels", wp.name);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let (kk, l) = (cin * k * k, ho * wo);
        let mut out = vec![T::zero(); n * cout * l];
        let xv = &self.nodes[x.0].value;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * l] };
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let src: &[T] = if direct {
                xs
            } else {
                im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            let os = &mut out[s * cout * l..(s + 1) * cout * l];
            if let Some(b) = b {
                let bv = &self.store.get(b).value;
                for (co, row) in os.chunks_mut(l).enumerate() {
                    row.iter_mut().for_each(|v| *v = bv[co]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            gemm(
                cout,
                kk,
                l,
                T::one(),
                &wp.value,
                View::rm(kk),
                src,
                View::rm(l),
                beta,
                os,
                View::rm(l),
            );
        }
        self.push(
            [n, cout, ho, wo],
            out,
            Op::Conv {
                x,
                w,
                b,
                k,
                stride,
                pad,
            },
        )
    }

    /// `y = x W^T + b` for `x` of shape `(n, in, 1, 1)` and `w` of shape
    /// `(out, in)`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> NodeId {
        let [n, fin, h, wd] = self.shape(x);
        assert_eq!(h * wd, 1, "linear expects (n, features, 1, 1)");
        let wp = self.store.get(w);
        let fout = wp.shape[0];
        assert_eq!(wp.shape[1], fin, "linear {}: input features", wp.name);
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = &self.store.get(b).value;
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            n,
            fin,
            fout,
            T::one(),
            &self.nodes[x.0].value,
            View::rm(fin),
            &wp.value,
            View::tr(fin),
            beta,
            &mut out,
            View::rm(fout),
        );
        self.push([n, fout, 1, 1], out, Op::Linear { x, w, b })
    }

    /// Group normalisation, optionally followed by a per-channel affine map.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        groups: usize,
        affine: Option<(ParamId, ParamId)>,
    ) -> NodeId {
        let shape = self.shape(x);
        let [n, c, h, w] = shape;
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let cg = c / groups;
        let per = cg * h * w;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); n * groups];
        let mut rstd = vec![T::zero(); n * groups];
        let inv = T::lit(1.0 / per as f64);
        for s in 0..n {
            for g in 0..groups {
                let off = (s * c + g * cg) * h * w;
                let chunk = &xv[off..off + per];
                let mu = chunk.iter().copied().sum::<T>() * inv;
                let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
                let r = T::one() / (var + T::lit(GN_EPS)).sqrt();
                mean[s * groups + g] = mu;
                rstd[s * groups + g] = r;
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let (gamma, beta) = match affine {
                        Some((ga, be)) => (self.store.get(ga).value[ch], self.store.get(be).value[ch]),
                        None => (T::one(), T::zero()),
                    };
                    let o = off + ci * h * w;
                    for i in o..o + h * w {
                        out[i] = (xv[i] - mu) * r * gamma + beta;
                    }
                }
            }
        }
        self.push(
            shape,
            out,
            Op::GroupNorm {
                x,
                groups,
                affine,
                mean,
                rstd,
            },
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.shape(x), out, Op::Silu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        self.push(self.shape(a), out, Op::Add { a, b })
    }

    /// Adds a per-sample, per-channel vector `v` of shape `(n, c, 1, 1)`.
    pub fn add_bias(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        assert_eq!(self.shape(v), [n, c, 1, 1], "add_bias: vector shape");
        let vv = &self.nodes[v.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for (i, chunk) in out.chunks_mut(h * w).enumerate() {
            let b = vv[i];
            chunk.iter_mut().for_each(|o| *o += b);
        }
        self.push([n, c, h, w], out, Op::AddBias { x, v })
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        assert_eq!((n, h, w), (nb, hb, wb), "concat: spatial mismatch");
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&av[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&bv[s * cb * hw..(s + 1) * cb * hw]);
        }
        self.push([n, ca + cb, h, w], out, Op::Concat { a, b })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let [n, c, h, w] = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push([n, c, h2, w2], out, Op::Upsample { x })
    }

    /// Multi-head scaled dot-product attention over spatial positions.
    /// `qkv` has shape `(n, 3c, h, w)` holding queries, keys and values in
    /// that channel order; the result has shape `(n, c, h, w)`.
    pub fn attention(&mut self, qkv: NodeId, heads: usize) -> NodeId {
        let [n, c3, h, w] = self.shape(qkv);
        assert!(c3 % 3 == 0, "attention: qkv channels");
        let c = c3 / 3;
        assert!(c % heads == 0, "attention: {c} channels, {heads} heads");
        let (d, l) = (c / heads, h * w);
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let qv = &self.nodes[qkv.0].value;
        let mut out = vec![T::zero(); n * c * l];
        let mut probs = vec![T::zero(); n * heads * l * l];
        for s in 0..n {
            let base = s * c3 * l;
            for hd in 0..heads {
                let q = &qv[base + hd * d * l..base + (hd + 1) * d * l];
                let k = &qv[base + (c + hd * d) * l..base + (c + (hd + 1) * d) * l];
                let v = &qv[base + (2 * c + hd * d) * l..base + (2 * c + (hd + 1) * d) * l];
                let p = &mut probs[(s * heads + hd) * l * l..(s * heads + hd + 1) * l * l];
                // scores[i][j] = q_i . k_j, q and k stored channel-major (d x l)
                gemm(l, d, l, scale, q, View::tr(l), k, View::rm(l), T::zero(), p, View::rm(l));
                for row in p.chunks_mut(l) {
                    softmax_in_place(row);
                }
                let o = &mut out[(s * c + hd * d) * l..(s * c + (hd + 1) * d) * l];
                // o (d x l) = v (d x l) * p^T
                gemm(d, l, l, T::one(), v, View::rm(l), p, View::tr(l), T::zero(), o, View::rm(l));
            }
        }
        self.push([n, c, h, w], out, Op::Attention { qkv, heads, probs })
    }

    /// Inverted dropout; the identity on inference graphs or when `p == 0`.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        let Some(rng) = self.dropout_rng.as_mut().filter(|_| p > 0.0) else {
            return x;
        };
        let keep = T::lit(1.0 / (1.0 - p));
        let len = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..len)
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.nodes[x.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(self.shape(x), out, Op::Dropout { x, mask })
    }

    /// Back-propagates `dout` from node `out`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward(&self, out: NodeId, dout: &[T], grads: &mut Grads<T>) {
        assert_eq!(dout.len(), self.nodes[out.0].value.len(), "backward: seed size");
        let mut g: Vec<Option<Vec<T>>> = (0..=out.0).map(|_| None).collect();
        g[out.0] = Some(dout.to_vec());
        for i in (0..=out.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                } => {
                    let dx = self.conv_backward(*x, *w, *b, *k, *stride, *pad, node.shape, &dy, grads);
                    accumulate(&mut g, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let [n, fin, _, _] = self.shape(*x);
                    let fout = node.shape[1];
                    let wv = &self.store.get(*w).value;
                    gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        &dy,
                        View::tr(fout),
                        &self.nodes[x.0].value,
                        View::rm(fin),
                        T::one(),
                        grads.get_mut(*w),
                        View::rm(fin),
                    );
                    if let Some(b) = b {
                        let gb = grads.get_mut(*b);
                        for row in dy.chunks(fout) {
                            gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    }
                    let mut dx = vec![T::zero(); n * fin];
                    gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        &dy,
                        View::rm(fout),
                        wv,
                        View::rm(fin),
                        T::zero(),
                        &mut dx,
                        View::rm(fin),
                    );
                    accumulate(&mut g, *x, dx);
                }
                Op::GroupNorm {
                    x,
                    groups,
                    affine,
                    mean,
                    rstd,
                } => {
                    let dx = self.group_norm_backward(*x, *groups, *affine, mean, rstd, &dy, grads);
                    accumulate(&mut g, *x, dx);
                }
                Op::Silu { x } => {
                    let dx = self.nodes[x.0]
                        .value
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &d)| {
                            let s = sigmoid(v);
                            d * s * (T::one() + v * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut g, *x, dx);
                }
                Op::Add { a, b } => {
                    accumulate(&mut g, *b, dy.clone());
                    accumulate(&mut g, *a, dy);
                }
                Op::AddBias { x, v } => {
                    let [n, c, h, w] = node.shape;
                    let dv: Vec<T> = dy.chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                    debug_assert_eq!(dv.len(), n * c);
                    accumulate(&mut g, *v, dv);
                    accumulate(&mut g, *x, dy);
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = self.shape(*a);
                    let cb = self.shape(*b)[1];
                    let hw = h * w;
                    let mut da = Vec::with_capacity(n * ca * hw);
                    let mut db = Vec::with_capacity(n * cb * hw);
                    for s in 0..n {
                        let off = s * (ca + cb) * hw;
                        da.extend_from_slice(&dy[off..off + ca * hw]);
                        db.extend_from_slice(&dy[off + ca * hw..off + (ca + cb) * hw]);
                    }
                    accumulate(&mut g, *a, da);
                    accumulate(&mut g, *b, db);
                }
                Op::Upsample { x } => {
                    let [n, c, h, w] = self.shape(*x);
                    let w2 = 2 * w;
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for p in 0..n * c {
                        let src = &dy[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut dx[p * h * w..(p + 1) * h * w];
                        for (idx, &v) in src.iter().enumerate() {
                            let (y, xx) = (idx / w2, idx % w2);
                            dst[(y / 2) * w + xx / 2] += v;
                        }
                    }
                    accumulate(&mut g, *x, dx);
                }
                Op::Attention { qkv, heads, probs } => {
                    let dqkv = self.attention_backward(*qkv, *heads, probs, &dy);
                    accumulate(&mut g, *qkv, dqkv);
                }
                Op::Dropout { x, mask } => {
                    let dx = dy.iter().zip(mask).map(|(&d, &m)| d * m).collect();
                    accumulate(&mut g, *x, dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        k: usize,
        stride: usize,
        pad: usize,
        out_shape: [usize; 4],
        dy: &[T],
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let [n, cin, h, wd] = self.shape(x);
        let [_, cout, ho, wo] = out_shape;
        let (kk, l) = (cin * k * k, ho * wo);
        let xv = &self.nodes[x.0].value;
        let wv = &self.store.get(w).value;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kk * l] };
        let mut dcols = vec![T::zero(); kk * l];
        let mut dx = vec![T::zero(); xv.len()];
        if let Some(b) = b {
            let gb = grads.get_mut(b);
            for s in 0..n {
                for co in 0..cout {
                    let off = (s * cout + co) * l;
                    gb[co] += dy[off..off + l].iter().copied().sum::<T>();
                }
            }
        }
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let dys = &dy[s * cout * l..(s + 1) * cout * l];
            let src: &[T] = if direct {
                xs
            } else {
                im2col(xs, cin, h, wd, k, stride, pad, ho, wo, &mut cols);
                &cols
            };
            // dW += dY (cout x l) * cols^T (l x kk)
            gemm(
                cout,
                l,
                kk,
                T::one(),
                dys,
                View::rm(l),
                src,
                View::tr(l),
                T::one(),
                grads.get_mut(w),
                View::rm(kk),
            );
            let dxs = &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd];
            if direct {
                gemm(kk, cout, l, T::one(), wv, View::tr(kk), dys, View::rm(l), T::zero(), dxs, View::rm(l));
            } else {
                gemm(
                    kk,
                    cout,
                    l,
                    T::one(),
                    wv,
                    View::tr(kk),
                    dys,
                    View::rm(l),
                    T::zero(),
                    &mut dcols,
                    View::rm(l),
                );
                col2im(&dcols, cin, h, wd, k, stride, pad, ho, wo, dxs);
            }
        }
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: NodeId,
        groups: usize,
        affine: Option<(ParamId, ParamId)>,
        mean: &[T],
        rstd: &[T],
        dy: &[T],
        grads: &mut Grads<T>,
    ) -> Vec<T> {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let cg = c / groups;
        let per = cg * hw;
        let xv = &self.nodes[x.0].value;
        let mut dx = vec![T::zero(); xv.len()];
        let inv = T::lit(1.0 / per as f64);
        let gamma = affine.map(|(ga, _)| &self.store.get(ga).value);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for s in 0..n {
            for g in 0..groups {
                let (mu, r) = (mean[s * groups + g], rstd[s * groups + g]);
                let off = (s * c + g * cg) * hw;
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let ga = gamma.map_or(T::one(), |gv| gv[ch]);
                    for i in off + ci * hw..off + (ci + 1) * hw {
                        let xhat = (xv[i] - mu) * r;
                        let d = dy[i] * ga;
                        sum_d += d;
                        sum_dx += d * xhat;
                        dgamma[ch] += dy[i] * xhat;
                        dbeta[ch] += dy[i];
                    }
                }
                let (md, mdx) = (sum_d * inv, sum_dx * inv);
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let ga = gamma.map_or(T::one(), |gv| gv[ch]);
                    for i in off + ci * hw..off + (ci + 1) * hw {
                        let xhat = (xv[i] - mu) * r;
                        dx[i] = r * (dy[i] * ga - md - xhat * mdx);
                    }
                }
            }
        }
        if let Some((ga, be)) = affine {
            grads.get_mut(ga).iter_mut().zip(&dgamma).for_each(|(a, &v)| *a += v);
            grads.get_mut(be).iter_mut().zip(&dbeta).for_each(|(a, &v)| *a += v);
        }
        dx
    }

    fn attention_backward(&self, qkv: NodeId, heads: usize, probs: &[T], dy: &[T]) -> Vec<T> {
        let [n, c3, h, w] = self.shape(qkv);
        let c = c3 / 3;
        let (d, l) = (c / heads, h * w);
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let qv = &self.nodes[qkv.0].value;
        let mut dqkv = vec![T::zero(); qv.len()];
        let mut dp = vec![T::zero(); l * l];
        for s in 0..n {
            let base = s * c3 * l;
            for hd in 0..heads {
                let qr = base + hd * d * l..base + (hd + 1) * d * l;
                let kr = base + (c + hd * d) * l..base + (c + (hd + 1) * d) * l;
                let vr = base + (2 * c + hd * d) * l..base + (2 * c + (hd + 1) * d) * l;
                let p = &probs[(s * heads + hd) * l * l..(s * heads + hd + 1) * l * l];
                let dout = &dy[(s * c + hd * d) * l..(s * c + (hd + 1) * d) * l];
                // dV = dO * P
                gemm(
                    d,
                    l,
                    l,
                    T::one(),
                    dout,
                    View::rm(l),
                    p,
                    View::rm(l),
                    T::zero(),
                    &mut dqkv[vr.clone()],
                    View::rm(l),
                );
                // dP = dO^T * V
                gemm(
                    l,
                    d,
                    l,
                    T::one(),
                    dout,
                    View::tr(l),
                    &qv[vr],
                    View::rm(l),
                    T::zero(),
                    &mut dp,
                    View::rm(l),
                );
                for (prow, dprow) in p.chunks(l).zip(dp.chunks_mut(l)) {
                    let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                    for (ds, &pv) in dprow.iter_mut().zip(prow) {
                        *ds = pv * (*ds - dot);
                    }
                }
                // dQ = s * K * dS^T, dK = s * Q * dS
                gemm(
                    d,
                    l,
                    l,
                    scale,
                    &qv[kr.clone()],
                    View::rm(l),
                    &dp,
                    View::tr(l),
                    T::zero(),
                    &mut dqkv[qr.clone()],
                    View::rm(l),
                );
                gemm(
                    d,
                    l,
                    l,
                    scale,
                    &qv[qr],
                    View::rm(l),
                    &dp,
                    View::rm(l),
                    T::zero(),
                    &mut dqkv[kr],
                    View::rm(l),
                );
            }
        }
        dqkv
    }
}

fn accumulate<T: Float>(g: &mut [Option<Vec<T>>], id: NodeId, d: Vec<T>) {
    match &mut g[id.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, &v)| *a += v),
        slot @ None => *slot = Some(d),
    }
}

#[inline]
fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let l = ho * wo;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * l..((ci * k + ky) * k + kx + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let l = ho * wo;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * l..((ci * k + ky) * k + kx + 1) * l];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
