//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Spatial activations use a channel-first, batch-second layout `[C, N, H, W]`
//! so that a convolution over a whole batch is a single matrix product.

use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Upper bound on any per-position negative log-likelihood, `-ln(1e-12)`.
pub const NLL_CAP: f64 = 27.631_021_115_928_547;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize) -> Self {
        ConvGeom {
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn pointwise() -> Self {
        ConvGeom {
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn patch(size: usize) -> Self {
        ConvGeom {
            kernel_h: size,
            kernel_w: size,
            stride: size,
            pad: 0,
        }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad - self.kernel_h) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kernel_w) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    StraightThrough(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2 {
        x: Var,
        w: Var,
        b: Var,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    ShiftRaster(Var),
    CondAffine {
        x: Var,
        scale: Var,
        shift: Var,
        positions: Vec<T>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    ToRows(Var),
    FromRows(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
    },
    L1Mean(Var, Var),
    SqDistMean(Var, Var),
    KlStdNormal {
        mu: Var,
        logvar: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: same value, no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(va.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    /// Forward value of `quantized`, backward identity into `encoded`.
    pub fn straight_through(&mut self, encoded: Var, quantized: Var) -> Var {
        assert_eq!(
            self.value(encoded).shape(),
            self.value(quantized).shape(),
            "straight-through shape mismatch"
        );
        let t = self.value(quantized).clone();
        let ng = self.ng(encoded);
        self.push(t, Op::StraightThrough(encoded), ng)
    }

    /// 2-D convolution. `x: [Cin, N, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv input must be [C, N, H, W]");
        assert_eq!(
            ws,
            vec![ws[0], xs[0], geom.kernel_h, geom.kernel_w],
            "conv weight shape mismatch"
        );
        let (cin, n, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let (ho, wo) = geom.out_dims(h, wd);
        let p = n * ho * wo;
        let ck = cin * geom.kernel_h * geom.kernel_w;
        let mut out = vec![T::zero(); cout * p];
        {
            let wv = self.value(w).data();
            if geom.is_pointwise() {
                let xv = self.value(x).data();
                gemm(MatRef::new(wv, cout, ck), MatRef::new(xv, ck, p), T::zero(), &mut out);
            } else {
                let col = im2col(self.value(x).data(), cin, n, h, wd, &geom);
                gemm(MatRef::new(wv, cout, ck), MatRef::new(&col, ck, p), T::zero(), &mut out);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), cout, "conv bias shape mismatch");
            for (row, &bias) in out.chunks_mut(p).zip(bv) {
                for v in row {
                    *v += bias;
                }
            }
        }
        let t = Tensor::from_vec(&[cout, n, ho, wo], out);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed convolution with a 2x2 kernel and stride 2.
    /// `x: [Cin, N, H, W]`, `w: [Cin, Cout, 2, 2]`, `b: [Cout]` → `[Cout, N, 2H, 2W]`.
    pub fn upsample2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[0], xs[0], "upsample weight shape mismatch");
        assert_eq!((ws[2], ws[3]), (2, 2));
        let (cin, n, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[1];
        let p = n * h * wd;
        let mut tmp = vec![T::zero(); cout * 4 * p];
        gemm(
            MatRef::new(self.value(w).data(), cin, cout * 4).t(),
            MatRef::new(self.value(x).data(), cin, p),
            T::zero(),
            &mut tmp,
        );
        let bv = self.value(b).data();
        let (h2, w2) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); cout * n * h2 * w2];
        for co in 0..cout {
            for di in 0..2 {
                for dj in 0..2 {
                    let row = &tmp[(co * 4 + di * 2 + dj) * p..][..p];
                    for ni in 0..n {
                        for hi in 0..h {
                            let src = &row[(ni * h + hi) * wd..][..wd];
                            let dst = &mut out[((co * n + ni) * h2 + 2 * hi + di) * w2..][..w2];
                            for (wi, &v) in src.iter().enumerate() {
                                dst[2 * wi + dj] = v + bv[co];
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[cout, n, h2, w2], out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::Upsample2 { x, w, b }, ng)
    }

    /// Row lookup: `table: [K, D]` → `[D, dims...]` with one index per position.
    pub fn gather(&mut self, table: Var, indices: &[usize], dims: &[usize]) -> Var {
        let ts = self.value(table).shape().to_vec();
        assert_eq!(ts.len(), 2);
        let (k, d) = (ts[0], ts[1]);
        let p = indices.len();
        assert_eq!(dims.iter().product::<usize>(), p, "gather dims mismatch");
        let tv = self.value(table).data();
        let mut out = vec![T::zero(); d * p];
        for (pi, &idx) in indices.iter().enumerate() {
            assert!(idx < k, "gather index {idx} out of range {k}");
            for di in 0..d {
                out[di * p + pi] = tv[idx * d + di];
            }
        }
        let mut shape = vec![d];
        shape.extend_from_slice(dims);
        let t = Tensor::from_vec(&shape, out);
        let ng = self.ng(table);
        self.push(
            t,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    /// Shift every image's raster sequence one step forward; index 0 becomes zero.
    pub fn shift_raster(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let l = xs[2] * xs[3];
        let mut out = vec![T::zero(); self.value(x).len()];
        for (dst, src) in out.chunks_mut(l).zip(self.value(x).data().chunks(l)) {
            dst[1..].copy_from_slice(&src[..l - 1]);
        }
        let t = Tensor::from_vec(&xs, out);
        let ng = self.ng(x);
        self.push(t, Op::ShiftRaster(x), ng)
    }

    /// `y[c, n] = x[c, n] + scale[c] * positions[n] + shift[c]`.
    pub fn cond_affine(&mut self, x: Var, scale: Var, shift: Var, positions: &[T]) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (c, n) = (xs[0], xs[1]);
        assert_eq!(positions.len(), n, "one conditioning value per image");
        assert_eq!(self.value(scale).len(), c);
        assert_eq!(self.value(shift).len(), c);
        let l = xs[2] * xs[3];
        let (sv, bv) = (self.value(scale).data(), self.value(shift).data());
        let mut out = self.value(x).data().to_vec();
        for ci in 0..c {
            for ni in 0..n {
                let add = sv[ci] * positions[ni] + bv[ci];
                for v in &mut out[(ci * n + ni) * l..][..l] {
                    *v += add;
                }
            }
        }
        let t = Tensor::from_vec(&xs, out);
        let ng = self.ng(x) || self.ng(scale) || self.ng(shift);
        self.push(
            t,
            Op::CondAffine {
                x,
                scale,
                shift,
                positions: positions.to_vec(),
            },
            ng,
        )
    }

    /// Single-head self-attention over each image's raster sequence where
    /// position `i` attends only to positions `j < i`. Position 0 outputs zero.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let qs = self.value(q).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        assert_eq!(self.value(k).shape(), &qs[..]);
        assert_eq!(&vs[1..], &qs[1..]);
        let (ca, n, l) = (qs[0], qs[1], qs[2] * qs[3]);
        let cv = vs[0];
        let scale = T::one() / T::from_f64_lossy(ca as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); n * l * l];
        let mut out = vec![T::zero(); cv * n * l];
        let mut scores = vec![T::zero(); l];
        for ni in 0..n {
            for i in 1..l {
                let mut max = T::neg_infinity();
                for (j, s) in scores[..i].iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for c in 0..ca {
                        let base = (c * n + ni) * l;
                        acc += qv[base + i] * kv[base + j];
                    }
                    *s = acc * scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut z = T::zero();
                for s in scores[..i].iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(ni * l + i) * l..][..l];
                for j in 0..i {
                    prow[j] = scores[j] / z;
                }
                for c in 0..cv {
                    let base = (c * n + ni) * l;
                    let mut acc = T::zero();
                    for j in 0..i {
                        acc += prow[j] * vv[base + j];
                    }
                    out[base + i] = acc;
                }
            }
        }
        let t = Tensor::from_vec(&vs, out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(t, Op::CausalAttention { q, k, v, probs }, ng)
    }

    /// Attention weights `[N, L, L]` recorded by a `causal_attention` node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `[C, N, H, W]` → `[N, C*H*W]`.
    pub fn to_rows(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let (c, n, l) = (xs[0], xs[1], xs[2] * xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for ci in 0..c {
            for ni in 0..n {
                out[(ni * c + ci) * l..][..l].copy_from_slice(&xv[(ci * n + ni) * l..][..l]);
            }
        }
        let t = Tensor::from_vec(&[n, c * l], out);
        let ng = self.ng(x);
        self.push(t, Op::ToRows(x), ng)
    }

    /// `[N, C*H*W]` → `[C, N, H, W]`.
    pub fn from_rows(&mut self, x: Var, c: usize, h: usize, w: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (n, f) = (xs[0], xs[1]);
        let l = h * w;
        assert_eq!(f, c * l, "from_rows feature size mismatch");
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for ci in 0..c {
            for ni in 0..n {
                out[(ci * n + ni) * l..][..l].copy_from_slice(&xv[(ni * c + ci) * l..][..l]);
            }
        }
        let t = Tensor::from_vec(&[c, n, h, w], out);
        let ng = self.ng(x);
        self.push(t, Op::FromRows(x), ng)
    }

    /// Fully connected layer. `x: [N, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs[1], ws[1], "dense input size mismatch");
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * fout];
        gemm(
            MatRef::new(self.value(x).data(), n, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            T::zero(),
            &mut out,
        );
        let bv = self.value(b).data();
        for row in out.chunks_mut(fout) {
            for (v, &bias) in row.iter_mut().zip(bv) {
                *v += bias;
            }
        }
        let t = Tensor::from_vec(&[n, fout], out);
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(t, Op::Dense { x, w, b }, ng)
    }

    /// Mean categorical negative log-likelihood of `targets` under
    /// `logits: [K, positions...]`, each term capped at [`NLL_CAP`].
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let k = lv.dim(0);
        let p = lv.len() / k;
        assert_eq!(targets.len(), p, "one target per position");
        let mut total = 0.0f64;
        for (pi, &t) in targets.iter().enumerate() {
            assert!(t < k, "target {t} out of range {k}");
            let nll = column_nll(lv.data(), k, p, pi, t);
            total += nll.to_f64_lossy().min(NLL_CAP);
        }
        let value = T::from_f64_lossy(total / p as f64);
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(value),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
            },
            ng,
        )
    }

    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "l1 shape mismatch");
        let sum: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let value = sum / T::from_f64_lossy(va.len() as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(value), Op::L1Mean(a, b), ng)
    }

    /// Squared distance summed over the leading (channel) axis, averaged over positions.
    pub fn sq_dist_mean(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sq_dist shape mismatch");
        let positions = va.len() / va.dim(0);
        let sum: T = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let value = sum / T::from_f64_lossy(positions as f64);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(value), Op::SqDistMean(a, b), ng)
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, I)`, summed over latent
    /// dimensions and averaged over the batch. Both inputs are `[N, Dz]`.
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Var {
        let (m, lv) = (self.value(mu), self.value(logvar));
        assert_eq!(m.shape(), lv.shape());
        let n = m.dim(0);
        let half = T::from_f64_lossy(0.5);
        let sum: T = m
            .data()
            .iter()
            .zip(lv.data())
            .map(|(&u, &l)| half * (u * u + l.exp() - l - T::one()))
            .sum();
        let value = sum / T::from_f64_lossy(n as f64);
        let ng = self.ng(mu) || self.ng(logvar);
        self.push(Tensor::scalar(value), Op::KlStdNormal { mu, logvar }, ng)
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(self.value(loss).shape(), vec![T::one()]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.ng(v) {
            self.acc(grads, v, f());
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.acc_with(grads, *a, || zip_map(g, vb, |x, y| x * y));
                self.acc_with(grads, *b, || zip_map(g, va, |x, y| x * y));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc_with(grads, *a, || g.map(|x| x * c));
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                self.acc_with(grads, *a, || {
                    zip_map(g, va, |x, y| if y > T::zero() { x } else { T::zero() })
                });
            }
            Op::Exp(a) => {
                self.acc_with(grads, *a, || zip_map(g, &node.value, |x, y| x * y));
            }
            Op::StraightThrough(enc) => {
                self.acc_with(grads, *enc, || g.clone());
            }
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, *w, *b, geom, g, grads),
            Op::Upsample2 { x, w, b } => self.upsample_backward(*x, *w, *b, g, grads),
            Op::Gather { table, indices } => {
                self.acc_with(grads, *table, || {
                    let tv = self.value(*table);
                    let d = tv.dim(1);
                    let p = indices.len();
                    let mut out = Tensor::zeros(tv.shape());
                    let od = out.data_mut();
                    let gd = g.data();
                    for (pi, &idx) in indices.iter().enumerate() {
                        for di in 0..d {
                            od[idx * d + di] += gd[di * p + pi];
                        }
                    }
                    out
                });
            }
            Op::ShiftRaster(x) => {
                self.acc_with(grads, *x, || {
                    let s = g.shape();
                    let l = s[2] * s[3];
                    let mut out = vec![T::zero(); g.len()];
                    for (dst, src) in out.chunks_mut(l).zip(g.data().chunks(l)) {
                        dst[..l - 1].copy_from_slice(&src[1..]);
                    }
                    Tensor::from_vec(s, out)
                });
            }
            Op::CondAffine {
                x,
                scale,
                shift,
                positions,
            } => {
                self.acc_with(grads, *x, || g.clone());
                let s = g.shape();
                let (c, n, l) = (s[0], s[1], s[2] * s[3]);
                let gd = g.data();
                let block_sums = || {
                    let mut sums = vec![T::zero(); c * n];
                    for (idx, chunk) in gd.chunks(l).enumerate() {
                        sums[idx] = chunk.iter().copied().sum();
                    }
                    sums
                };
                if self.ng(*scale) || self.ng(*shift) {
                    let sums = block_sums();
                    self.acc_with(grads, *scale, || {
                        let data = (0..c)
                            .map(|ci| (0..n).map(|ni| sums[ci * n + ni] * positions[ni]).sum())
                            .collect();
                        Tensor::from_vec(&[c], data)
                    });
                    self.acc_with(grads, *shift, || {
                        let data = (0..c).map(|ci| sums[ci * n..][..n].iter().copied().sum()).collect();
                        Tensor::from_vec(&[c], data)
                    });
                }
            }
            Op::CausalAttention { q, k, v, probs } => self.attention_backward(*q, *k, *v, probs, g, grads),
            Op::ToRows(x) => {
                self.acc_with(grads, *x, || {
                    let xs = self.value(*x).shape();
                    let (c, n, l) = (xs[0], xs[1], xs[2] * xs[3]);
                    let mut out = vec![T::zero(); g.len()];
                    for ci in 0..c {
                        for ni in 0..n {
                            out[(ci * n + ni) * l..][..l].copy_from_slice(&g.data()[(ni * c + ci) * l..][..l]);
                        }
                    }
                    Tensor::from_vec(xs, out)
                });
            }
            Op::FromRows(x) => {
                self.acc_with(grads, *x, || {
                    let s = g.shape();
                    let (c, n, l) = (s[0], s[1], s[2] * s[3]);
                    let mut out = vec![T::zero(); g.len()];
                    for ci in 0..c {
                        for ni in 0..n {
                            out[(ni * c + ci) * l..][..l].copy_from_slice(&g.data()[(ci * n + ni) * l..][..l]);
                        }
                    }
                    Tensor::from_vec(&[n, c * l], out)
                });
            }
            Op::Dense { x, w, b } => {
                let (n, fout) = (g.dim(0), g.dim(1));
                let fin = self.value(*x).dim(1);
                self.acc_with(grads, *x, || {
                    let mut out = vec![T::zero(); n * fin];
                    gemm(
                        MatRef::new(g.data(), n, fout),
                        MatRef::new(self.value(*w).data(), fout, fin),
                        T::zero(),
                        &mut out,
                    );
                    Tensor::from_vec(&[n, fin], out)
                });
                self.acc_with(grads, *w, || {
                    let mut out = vec![T::zero(); fout * fin];
                    gemm(
                        MatRef::new(g.data(), n, fout).t(),
                        MatRef::new(self.value(*x).data(), n, fin),
                        T::zero(),
                        &mut out,
                    );
                    Tensor::from_vec(&[fout, fin], out)
                });
                self.acc_with(grads, *b, || {
                    let mut out = vec![T::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (o, &x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    Tensor::from_vec(&[fout], out)
                });
            }
            Op::SoftmaxXent { logits, targets } => {
                self.acc_with(grads, *logits, || {
                    let lv = self.value(*logits);
                    let k = lv.dim(0);
                    let p = lv.len() / k;
                    let scale = g.item() / T::from_f64_lossy(p as f64);
                    let ld = lv.data();
                    let mut out = vec![T::zero(); lv.len()];
                    for (pi, &t) in targets.iter().enumerate() {
                        if column_nll(ld, k, p, pi, t).to_f64_lossy() >= NLL_CAP {
                            continue;
                        }
                        let max = (0..k).map(|c| ld[c * p + pi]).fold(T::neg_infinity(), T::max);
                        let z: T = (0..k).map(|c| (ld[c * p + pi] - max).exp()).sum();
                        for c in 0..k {
                            let prob = (ld[c * p + pi] - max).exp() / z;
                            let onehot = if c == t { T::one() } else { T::zero() };
                            out[c * p + pi] = scale * (prob - onehot);
                        }
                    }
                    Tensor::from_vec(lv.shape(), out)
                });
            }
            Op::L1Mean(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let scale = g.item() / T::from_f64_lossy(va.len() as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                self.acc_with(grads, *a, || zip_map(va, vb, |x, y| sign(x - y)));
                self.acc_with(grads, *b, || zip_map(va, vb, |x, y| -sign(x - y)));
            }
            Op::SqDistMean(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let positions = va.len() / va.dim(0);
                let scale = g.item() * T::from_f64_lossy(2.0 / positions as f64);
                self.acc_with(grads, *a, || zip_map(va, vb, |x, y| scale * (x - y)));
                self.acc_with(grads, *b, || zip_map(va, vb, |x, y| scale * (y - x)));
            }
            Op::KlStdNormal { mu, logvar } => {
                let (m, lv) = (self.value(*mu), self.value(*logvar));
                let scale = g.item() / T::from_f64_lossy(m.dim(0) as f64);
                let half = T::from_f64_lossy(0.5);
                self.acc_with(grads, *mu, || m.map(|u| u * scale));
                self.acc_with(grads, *logvar, || lv.map(|l| half * (l.exp() - T::one()) * scale));
            }
        }
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, n, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        let p = g.len() / cout;
        let ck = cin * geom.kernel_h * geom.kernel_w;
        let gd = g.data();
        if let Some(b) = b {
            self.acc_with(grads, b, || {
                let data = gd.chunks(p).map(|row| row.iter().copied().sum()).collect();
                Tensor::from_vec(&[cout], data)
            });
        }
        let pointwise = geom.is_pointwise();
        if self.ng(w) {
            let mut dw = vec![T::zero(); cout * ck];
            if pointwise {
                gemm(
                    MatRef::new(gd, cout, p),
                    MatRef::new(self.value(x).data(), ck, p).t(),
                    T::zero(),
                    &mut dw,
                );
            } else {
                let col = im2col(self.value(x).data(), cin, n, h, wd, geom);
                gemm(
                    MatRef::new(gd, cout, p),
                    MatRef::new(&col, ck, p).t(),
                    T::zero(),
                    &mut dw,
                );
            }
            self.acc(grads, w, Tensor::from_vec(&ws, dw));
        }
        if self.ng(x) {
            let mut dcol = vec![T::zero(); ck * p];
            gemm(
                MatRef::new(self.value(w).data(), cout, ck).t(),
                MatRef::new(gd, cout, p),
                T::zero(),
                &mut dcol,
            );
            let dx = if pointwise {
                dcol
            } else {
                col2im(&dcol, cin, n, h, wd, geom)
            };
            self.acc(grads, x, Tensor::from_vec(&xs, dx));
        }
    }

    fn upsample_backward(&self, x: Var, w: Var, b: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let (cin, n, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[1];
        let p = n * h * wd;
        let (h2, w2) = (2 * h, 2 * wd);
        let gd = g.data();
        self.acc_with(grads, b, || {
            let data = gd.chunks(n * h2 * w2).map(|row| row.iter().copied().sum()).collect();
            Tensor::from_vec(&[cout], data)
        });
        if !self.ng(x) && !self.ng(w) {
            return;
        }
        let mut dtmp = vec![T::zero(); cout * 4 * p];
        for co in 0..cout {
            for di in 0..2 {
                for dj in 0..2 {
                    let row = &mut dtmp[(co * 4 + di * 2 + dj) * p..][..p];
                    for ni in 0..n {
                        for hi in 0..h {
                            let src = &gd[((co * n + ni) * h2 + 2 * hi + di) * w2..][..w2];
                            let dst = &mut row[(ni * h + hi) * wd..][..wd];
                            for (wi, d) in dst.iter_mut().enumerate() {
                                *d = src[2 * wi + dj];
                            }
                        }
                    }
                }
            }
        }
        self.acc_with(grads, w, || {
            let mut dw = vec![T::zero(); cin * cout * 4];
            gemm(
                MatRef::new(self.value(x).data(), cin, p),
                MatRef::new(&dtmp, cout * 4, p).t(),
                T::zero(),
                &mut dw,
            );
            Tensor::from_vec(&ws, dw)
        });
        self.acc_with(grads, x, || {
            let mut dx = vec![T::zero(); cin * p];
            gemm(
                MatRef::new(self.value(w).data(), cin, cout * 4),
                MatRef::new(&dtmp, cout * 4, p),
                T::zero(),
                &mut dx,
            );
            Tensor::from_vec(&xs, dx)
        });
    }

    fn attention_backward(&self, q: Var, k: Var, v: Var, probs: &[T], g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let qs = self.value(q).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        let (ca, n, l) = (qs[0], qs[1], qs[2] * qs[3]);
        let cv = vs[0];
        let scale = T::one() / T::from_f64_lossy(ca as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let gd = g.data();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = vec![T::zero(); l];
        for ni in 0..n {
            for i in 1..l {
                let prow = &probs[(ni * l + i) * l..][..l];
                for (j, d) in dp[..i].iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for c in 0..cv {
                        let base = (c * n + ni) * l;
                        acc += gd[base + i] * vv[base + j];
                        dv[base + j] += prow[j] * gd[base + i];
                    }
                    *d = acc;
                }
                let dot: T = (0..i).map(|j| prow[j] * dp[j]).sum();
                for j in 0..i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..ca {
                        let base = (c * n + ni) * l;
                        dq[base + i] += ds * kv[base + j];
                        dk[base + j] += ds * qv[base + i];
                    }
                }
            }
        }
        self.acc(grads, q, Tensor::from_vec(&qs, dq));
        self.acc(grads, k, Tensor::from_vec(&qs, dk));
        self.acc(grads, v, Tensor::from_vec(&vs, dv));
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// `-log softmax(column)[target]` for column `pi` of a `[K, P]` matrix.
pub(crate) fn column_nll<T: Scalar>(data: &[T], k: usize, p: usize, pi: usize, target: usize) -> T {
    let max = (0..k).map(|c| data[c * p + pi]).fold(T::neg_infinity(), T::max);
    let z: T = (0..k).map(|c| (data[c * p + pi] - max).exp()).sum();
    max + z.ln() - data[target * p + pi]
}

fn im2col<T: Scalar>(x: &[T], c: usize, n: usize, h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_dims(h, w);
    let p = n * ho * wo;
    let mut col = vec![T::zero(); c * g.kernel_h * g.kernel_w * p];
    let pad = g.pad as isize;
    for ci in 0..c {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let dst_row = &mut col[row * p..][..p];
                for ni in 0..n {
                    let src = &x[(ci * n + ni) * h * w..][..h * w];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * w..][..w];
                        let dst = &mut dst_row[(ni * ho + oh) * wo..][..wo];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - pad;
                            if iw >= 0 && iw < w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Scalar>(col: &[T], c: usize, n: usize, h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_dims(h, w);
    let p = n * ho * wo;
    let mut x = vec![T::zero(); c * n * h * w];
    let pad = g.pad as isize;
    for ci in 0..c {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (ci * g.kernel_h + ki) * g.kernel_w + kj;
                let src_row = &col[row * p..][..p];
                for ni in 0..n {
                    let dst = &mut x[(ci * n + ni) * h * w..][..h * w];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[ih as usize * w..][..w];
                        let src = &src_row[(ni * ho + oh) * wo..][..wo];
                        for (ow, &s) in src.iter().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - pad;
                            if iw >= 0 && iw < w as isize {
                                dst_row[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for every input element.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|x| t.leaf(x.clone(), false)).collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        };
        let eps = 1e-6;
        for (ii, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[ii])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            for j in 0..input.len() {
                let mut plus = inputs.clone();
                plus[ii].data_mut()[j] += eps;
                let mut minus = inputs.clone();
                minus[ii].data_mut()[j] -= eps;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-4, "input {ii} elem {j}: analytic {a} vs fd {fd}");
            }
        }
    }

    /// Reduce a tensor to a smooth scalar: sum of squares of a random reweighting.
    fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
        let shape = tape.value(v).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(rand_tensor(&mut rng, &shape));
        let prod = tape.mul(v, w);
        let zero = tape.constant(Tensor::zeros(&shape));
        tape.sq_dist_mean(prod, zero)
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for geom in [ConvGeom::same(3), ConvGeom::pointwise(), ConvGeom::patch(2)] {
            let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
            let w = rand_tensor(&mut rng, &[3, 2, geom.kernel_h, geom.kernel_w]);
            let b = rand_tensor(&mut rng, &[3]);
            check(vec![x, w, b], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), geom);
                project(t, y, 7)
            });
        }
    }

    #[test]
    fn upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let w = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let b = rand_tensor(&mut rng, &[3]);
        check(vec![x, w, b], |t, v| {
            let y = t.upsample2(v[0], v[1], v[2]);
            project(t, y, 8)
        });
    }

    #[test]
    fn attention_and_conditioning_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_tensor(&mut rng, &[3, 2, 2, 3]);
        let k = rand_tensor(&mut rng, &[3, 2, 2, 3]);
        let v = rand_tensor(&mut rng, &[2, 2, 2, 3]);
        let a = rand_tensor(&mut rng, &[2]);
        let c = rand_tensor(&mut rng, &[2]);
        check(vec![q, k, v, a, c], |t, vs| {
            let y = t.causal_attention(vs[0], vs[1], vs[2]);
            let s = t.shift_raster(y);
            let z = t.cond_affine(s, vs[3], vs[4], &[0.3, -0.4]);
            project(t, z, 9)
        });
    }

    #[test]
    fn dense_rows_and_losses_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let w = rand_tensor(&mut rng, &[3, 8]);
        let b = rand_tensor(&mut rng, &[3]);
        let table = rand_tensor(&mut rng, &[4, 2]);
        check(vec![x, w, b, table], |t, v| {
            let rows = t.to_rows(v[0]);
            let y = t.dense(rows, v[1], v[2]);
            let e = t.exp(y);
            let kl = t.kl_std_normal(y, e);
            let back = t.from_rows(rows, 2, 2, 2);
            let g = t.gather(v[3], &[0, 3, 3, 1, 2, 0, 1, 1], &[2, 2, 2]);
            let sq = t.sq_dist_mean(back, g);
            let logits = t.relu(back);
            let xe = t.softmax_xent(logits, &[0, 1, 1, 0, 1, 0, 0, 1]);
            let s1 = t.add(kl, sq);
            let s2 = t.sub(s1, xe);
            t.scale(s2, 0.7)
        });
    }

    #[test]
    fn attention_is_strictly_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let q = tape.leaf(rand_tensor(&mut rng, &[4, 1, 3, 3]), false);
        let k = tape.leaf(rand_tensor(&mut rng, &[4, 1, 3, 3]), false);
        let v = tape.leaf(rand_tensor(&mut rng, &[2, 1, 3, 3]), false);
        let y = tape.causal_attention(q, k, v);
        let probs = tape.attention_probs(y).unwrap();
        for i in 0..9 {
            let row = &probs[i * 9..][..9];
            for (j, &p) in row.iter().enumerate() {
                if j >= i {
                    assert_eq!(p, 0.0);
                }
            }
            if i > 0 {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(tape.value(y).data()[0] == 0.0);
    }

    #[test]
    fn xent_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[32, 4]), false);
        let x = tape.softmax_xent(l, &[0, 5, 31, 7]);
        assert!((tape.value(x).item() - 32f64.ln()).abs() < 1e-12);
    }
}
