//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward pass records a fresh [`Graph`]. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Shape contract violations
//! panic with a message naming the offending shapes.

use crate::kernels::{self, ConvGeom, ConvSpec, PoolGeom};
use crate::tensor::{numel, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddN(Vec<Var>),
    Sum(Var),
    Relu(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    ShiftCrop(Var),
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<F>,
        labels: Vec<usize>,
    },
    Row {
        x: Var,
        row: usize,
    },
    MaskedSoftmax {
        x: Var,
        probs: Vec<F>,
        scale: F,
    },
    StraightThrough {
        logits: Var,
        soft: Vec<F>,
        inv_temp: F,
    },
    PickScale {
        x: Var,
        w: Var,
        idx: usize,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Result of a straight-through Gumbel-softmax draw recorded on the graph.
#[derive(Clone, Debug)]
pub struct StraightThroughSample<F> {
    /// One-hot in value, soft in gradient.
    pub weights: Var,
    pub index: usize,
    pub soft: Vec<F>,
}

pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Var {
        assert_eq!(
            numel(&shape),
            data.len(),
            "leaf shape {shape:?} does not match data length {}",
            data.len()
        );
        self.push(shape, data, Op::Leaf, requires_grad)
    }

    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n = numel(&shape);
        self.leaf(shape, vec![F::zero(); n], false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), rg)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "add_n of nothing");
        if xs.len() == 1 {
            return xs[0];
        }
        for &x in &xs[1..] {
            self.same_shape(xs[0], x, "add_n");
        }
        let mut v = self.value(xs[0]).to_vec();
        for &x in &xs[1..] {
            for (a, &b) in v.iter_mut().zip(self.value(x)) {
                *a += b;
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(self.shape(xs[0]).to_vec(), v, Op::AddN(xs.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<F>();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .iter()
            .map(|&x| if x > F::zero() { x } else { F::zero() })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), v, Op::Relu(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), &spec);
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[geom.cout], "conv bias shape");
        }
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom, &spec);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            vec![geom.n, geom.cout, geom.oh, geom.ow],
            out,
            Op::Conv { x, w, b, spec },
            rg,
        )
    }

    fn channel_stats(&self, x: Var) -> (usize, usize, usize) {
        let s = self.shape(x);
        assert_eq!(s.len(), 4, "expected NCHW, got {s:?}");
        (s[0], s[1], s[2] * s[3])
    }

    /// Batch normalization using the statistics of this batch. Returns the
    /// output together with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: F) -> (Var, Vec<F>, Vec<F>) {
        let (n, c, plane) = self.channel_stats(x);
        let m = n * plane;
        assert!(m >= 2, "batch norm in training mode needs N*H*W >= 2, got {m}");
        let xv = self.value(x);
        let mut mean = vec![F::zero(); c];
        let mut var = vec![F::zero(); c];
        for ni in 0..n {
            for (ci, m) in mean.iter_mut().enumerate() {
                let base = (ni * c + ci) * plane;
                *m += xv[base..base + plane].iter().copied().sum::<F>();
            }
        }
        let mf = F::of(m as f64);
        mean.iter_mut().for_each(|v| *v /= mf);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                var[ci] += xv[base..base + plane]
                    .iter()
                    .map(|&v| (v - mean[ci]) * (v - mean[ci]))
                    .sum::<F>();
            }
        }
        var.iter_mut().for_each(|v| *v /= mf);
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let out = self.normalize(x, &mean, &inv_std, gamma, beta, true);
        (out, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        mean: &[F],
        var: &[F],
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: F,
    ) -> Var {
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        self.normalize(x, mean, &inv_std, gamma, beta, false)
    }

    fn normalize(
        &mut self,
        x: Var,
        mean: &[F],
        inv_std: &[F],
        gamma: Option<Var>,
        beta: Option<Var>,
        batch_stats: bool,
    ) -> Var {
        let (n, c, plane) = self.channel_stats(x);
        assert_eq!(
            mean.len(),
            c,
            "batch norm statistics cover {} channels, input has {c}",
            mean.len()
        );
        for p in [gamma, beta].into_iter().flatten() {
            assert_eq!(self.shape(p), &[c], "batch norm affine parameter shape");
        }
        let xv = self.value(x);
        let mut xhat = Vec::with_capacity(xv.len());
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                xhat.extend(xv[base..base + plane].iter().map(|&v| (v - mean[ci]) * inv_std[ci]));
            }
        }
        let mut out = xhat.clone();
        if gamma.is_some() || beta.is_some() {
            let g = gamma.map(|g| self.value(g).to_vec());
            let b = beta.map(|b| self.value(b).to_vec());
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let gv = g.as_ref().map_or(F::one(), |g| g[ci]);
                    let bv = b.as_ref().map_or(F::zero(), |b| b[ci]);
                    out[base..base + plane].iter_mut().for_each(|v| *v = *v * gv + bv);
                }
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                batch_stats,
            },
            rg,
        )
    }

    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let geom = PoolGeom::new(self.shape(x), k, stride, pad);
        let (out, argmax) = kernels::max_pool_forward(self.value(x), &geom);
        let rg = self.rg(x);
        self.push(
            vec![geom.n, geom.c, geom.oh, geom.ow],
            out,
            Op::MaxPool { x, argmax },
            rg,
        )
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let geom = PoolGeom::new(self.shape(x), k, stride, pad);
        let out = kernels::avg_pool_forward(self.value(x), &geom);
        let rg = self.rg(x);
        self.push(vec![geom.n, geom.c, geom.oh, geom.ow], out, Op::AvgPool { x, geom }, rg)
    }

    /// `out[.., i, j] = x[.., i + 1, j + 1]`, zero past the bottom/right edge.
    pub fn shift_crop(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4, "shift_crop expects NCHW");
        let (h, w) = (s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for p in 0..s[0] * s[1] {
            let base = p * h * w;
            for i in 0..h.saturating_sub(1) {
                for j in 0..w.saturating_sub(1) {
                    out[base + i * w + j] = xv[base + (i + 1) * w + j + 1];
                }
            }
        }
        let rg = self.rg(x);
        self.push(s, out, Op::ShiftCrop(x), rg)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let s0 = self.shape(xs[0]).to_vec();
        assert_eq!(s0.len(), 4, "concat expects NCHW");
        let mut c_total = 0;
        for &x in xs {
            let s = self.shape(x);
            assert!(
                s[0] == s0[0] && s[2] == s0[2] && s[3] == s0[3],
                "concat: incompatible shapes {s0:?} vs {s:?}"
            );
            c_total += s[1];
        }
        let plane = s0[2] * s0[3];
        let mut out = Vec::with_capacity(s0[0] * c_total * plane);
        for n in 0..s0[0] {
            for &x in xs {
                let c = self.shape(x)[1];
                let base = n * c * plane;
                out.extend_from_slice(&self.value(x)[base..base + c * plane]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(vec![s0[0], c_total, s0[2], s0[3]], out, Op::Concat(xs.to_vec()), rg)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, plane) = self.channel_stats(x);
        let pf = F::of(plane as f64);
        let xv = self.value(x);
        let out = (0..n * c)
            .map(|p| xv[p * plane..(p + 1) * plane].iter().copied().sum::<F>() / pf)
            .collect();
        let rg = self.rg(x);
        self.push(vec![n, c], out, Op::GlobalAvgPool(x), rg)
    }

    /// `y = x W^T + b` with `x: [N, I]`, `W: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            "linear: input {xs:?} incompatible with weight {ws:?}"
        );
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let (xv, wv) = (self.value(x), self.value(w));
        let mut out = vec![F::zero(); n * o];
        for r in 0..n {
            let xr = &xv[r * i..(r + 1) * i];
            for c in 0..o {
                let wr = &wv[c * i..(c + 1) * i];
                out[r * o + c] = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<F>();
            }
        }
        if let Some(b) = b {
            assert_eq!(self.shape(b), &[o], "linear bias shape");
            let bv = self.value(b);
            for r in 0..n {
                for c in 0..o {
                    out[r * o + c] += bv[c];
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(vec![n, o], out, Op::Linear { x, w, b }, rg)
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(
            s.len() == 2 && s[0] == labels.len(),
            "cross entropy: logits {s:?} vs {} labels",
            labels.len()
        );
        let (n, k) = (s[0], s[1]);
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = F::zero();
        for (r, &label) in labels.iter().enumerate() {
            assert!(label < k, "label {label} out of range for {k} classes");
            let row = &lv[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&v| (v - mx).exp()).collect();
            let z = exps.iter().copied().sum::<F>();
            loss += z.ln() + mx - row[label];
            probs.extend(exps.iter().map(|&e| e / z));
        }
        let loss = loss / F::of(n as f64);
        let rg = self.rg(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Row `row` of a 2-d tensor.
    pub fn row(&mut self, x: Var, row: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 2 && row < s[0], "row {row} of shape {s:?}");
        let v = self.value(x)[row * s[1]..(row + 1) * s[1]].to_vec();
        let rg = self.rg(x);
        self.push(vec![s[1]], v, Op::Row { x, row }, rg)
    }

    /// Softmax of `scale * x` over the entries where `mask` is true;
    /// masked-out entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool], scale: F) -> Var {
        assert_eq!(self.shape(x), &[mask.len()], "masked_softmax: mask length");
        let probs = masked_softmax_values(self.value(x), None, mask, scale);
        let rg = self.rg(x);
        self.push(
            vec![mask.len()],
            probs.clone(),
            Op::MaskedSoftmax { x, probs, scale },
            rg,
        )
    }

    /// Straight-through Gumbel-softmax: the soft weights are
    /// `softmax((logits + noise) / temperature)` over active entries; the
    /// recorded value is one-hot at their argmax while the backward pass
    /// differentiates the soft weights.
    pub fn straight_through(
        &mut self,
        logits: Var,
        noise: &[F],
        mask: &[bool],
        temperature: F,
    ) -> StraightThroughSample<F> {
        assert!(temperature > F::zero(), "temperature must be positive");
        let soft = masked_softmax_values(self.value(logits), Some(noise), mask, F::one() / temperature);
        let index = argmax_masked(&soft, mask);
        self.straight_through_at(logits, noise, mask, temperature, index)
    }

    /// [`Graph::straight_through`] with the hard choice fixed by the caller,
    /// for samples drawn outside the graph at a different precision.
    pub fn straight_through_at(
        &mut self,
        logits: Var,
        noise: &[F],
        mask: &[bool],
        temperature: F,
        index: usize,
    ) -> StraightThroughSample<F> {
        let n = mask.len();
        assert_eq!(self.shape(logits), &[n], "straight_through: logits shape");
        assert_eq!(noise.len(), n, "straight_through: noise length");
        assert!(temperature > F::zero(), "temperature must be positive");
        assert!(
            index < n && mask[index],
            "straight_through: index {index} is not active"
        );
        let inv_temp = F::one() / temperature;
        let soft = masked_softmax_values(self.value(logits), Some(noise), mask, inv_temp);
        let mut hard = vec![F::zero(); n];
        hard[index] = F::one();
        let rg = self.rg(logits);
        let weights = self.push(
            vec![n],
            hard,
            Op::StraightThrough {
                logits,
                soft: soft.clone(),
                inv_temp,
            },
            rg,
        );
        StraightThroughSample { weights, index, soft }
    }

    /// `w[idx] * x` for a weight vector `w`.
    pub fn pick_scale(&mut self, x: Var, w: Var, idx: usize) -> Var {
        assert!(
            self.shape(w).len() == 1 && idx < self.shape(w)[0],
            "pick_scale index {idx} out of range for {:?}",
            self.shape(w)
        );
        let s = self.value(w)[idx];
        let v = self.value(x).iter().map(|&a| a * s).collect();
        let rg = self.rg(x) || self.rg(w);
        self.push(self.shape(x).to_vec(), v, Op::PickScale { x, w, idx }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every recorded node
    /// are kept and can be read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
    }

    fn backward_node(&self, i: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, g: Vec<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (a, b) in existing.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.to_vec());
                acc(*b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                acc(*b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, c) => acc(*a, gy.iter().map(|&g| g * *c).collect()),
            Op::AddN(xs) => {
                for &x in xs {
                    acc(x, gy.to_vec());
                }
            }
            Op::Sum(a) => acc(*a, vec![gy[0]; self.value(*a).len()]),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(
                    *a,
                    gy.iter()
                        .zip(av)
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                        .collect(),
                );
            }
            Op::Conv { x, w, b, spec } => {
                let geom = ConvGeom::new(self.shape(*x), self.shape(*w), spec);
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    gy,
                    &geom,
                    spec,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if let Some(gw) = gw {
                    acc(*w, gw);
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    acc(*b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, plane) = self.channel_stats(*x);
                let gvals = gamma.map(|g| self.value(g).to_vec());
                if let Some(g) = gamma {
                    if self.rg(*g) {
                        let mut gg = vec![F::zero(); c];
                        for ni in 0..n {
                            for (ci, slot) in gg.iter_mut().enumerate() {
                                let base = (ni * c + ci) * plane;
                                for p in base..base + plane {
                                    *slot += gy[p] * xhat[p];
                                }
                            }
                        }
                        acc(*g, gg);
                    }
                }
                if let Some(b) = beta {
                    if self.rg(*b) {
                        let mut gb = vec![F::zero(); c];
                        for ni in 0..n {
                            for (ci, slot) in gb.iter_mut().enumerate() {
                                let base = (ni * c + ci) * plane;
                                *slot += gy[base..base + plane].iter().copied().sum::<F>();
                            }
                        }
                        acc(*b, gb);
                    }
                }
                if self.rg(*x) {
                    let mut gx = vec![F::zero(); gy.len()];
                    let m = F::of((n * plane) as f64);
                    for ci in 0..c {
                        let gs = gvals.as_ref().map_or(F::one(), |g| g[ci]);
                        if *batch_stats {
                            let mut sum_d = F::zero();
                            let mut sum_dx = F::zero();
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for p in base..base + plane {
                                    let d = gy[p] * gs;
                                    sum_d += d;
                                    sum_dx += d * xhat[p];
                                }
                            }
                            let k = inv_std[ci] / m;
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for p in base..base + plane {
                                    let d = gy[p] * gs;
                                    gx[p] = k * (m * d - sum_d - xhat[p] * sum_dx);
                                }
                            }
                        } else {
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for p in base..base + plane {
                                    gx[p] = gy[p] * gs * inv_std[ci];
                                }
                            }
                        }
                    }
                    acc(*x, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![F::zero(); self.value(*x).len()];
                for (&g, &src) in gy.iter().zip(argmax) {
                    gx[src] += g;
                }
                acc(*x, gx);
            }
            Op::AvgPool { x, geom } => acc(*x, kernels::avg_pool_backward(gy, geom)),
            Op::ShiftCrop(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let mut gx = vec![F::zero(); gy.len()];
                for p in 0..s[0] * s[1] {
                    let base = p * h * w;
                    for r in 0..h.saturating_sub(1) {
                        for c in 0..w.saturating_sub(1) {
                            gx[base + (r + 1) * w + c + 1] = gy[base + r * w + c];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(xs) => {
                let s = &node.shape;
                let plane = s[2] * s[3];
                let c_total = s[1];
                let mut c_off = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.rg(x) {
                        let mut gx = Vec::with_capacity(s[0] * c * plane);
                        for n in 0..s[0] {
                            let base = (n * c_total + c_off) * plane;
                            gx.extend_from_slice(&gy[base..base + c * plane]);
                        }
                        acc(x, gx);
                    }
                    c_off += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, plane) = self.channel_stats(*x);
                let pf = F::of(plane as f64);
                let mut gx = Vec::with_capacity(gy.len() * plane);
                for &g in gy {
                    gx.extend(std::iter::repeat_n(g / pf, plane));
                }
                acc(*x, gx);
            }
            Op::Linear { x, w, b } => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*x) {
                    let mut gx = vec![F::zero(); n * i];
                    for r in 0..n {
                        for c in 0..o {
                            let g = gy[r * o + c];
                            for (gxv, &wvv) in gx[r * i..(r + 1) * i].iter_mut().zip(&wv[c * i..(c + 1) * i]) {
                                *gxv += g * wvv;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if self.rg(*w) {
                    let mut gw = vec![F::zero(); o * i];
                    for r in 0..n {
                        for c in 0..o {
                            let g = gy[r * o + c];
                            for (gwv, &xvv) in gw[c * i..(c + 1) * i].iter_mut().zip(&xv[r * i..(r + 1) * i]) {
                                *gwv += g * xvv;
                            }
                        }
                    }
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![F::zero(); o];
                        for r in 0..n {
                            for c in 0..o {
                                gb[c] += gy[r * o + c];
                            }
                        }
                        acc(*b, gb);
                    }
                }
            }
            Op::SoftmaxXent { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gy[0] / F::of(n as f64);
                let mut gl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &label) in labels.iter().enumerate() {
                    gl[r * k + label] -= scale;
                }
                acc(*logits, gl);
            }
            Op::Row { x, row } => {
                let s = self.shape(*x);
                let mut gx = vec![F::zero(); s[0] * s[1]];
                gx[row * s[1]..(row + 1) * s[1]].copy_from_slice(gy);
                acc(*x, gx);
            }
            Op::MaskedSoftmax { x, probs, scale } => {
                acc(*x, softmax_vjp(probs, gy, *scale));
            }
            Op::StraightThrough { logits, soft, inv_temp } => {
                acc(*logits, softmax_vjp(soft, gy, *inv_temp));
            }
            Op::PickScale { x, w, idx } => {
                let s = self.value(*w)[*idx];
                if self.rg(*x) {
                    acc(*x, gy.iter().map(|&g| g * s).collect());
                }
                if self.rg(*w) {
                    let mut gw = vec![F::zero(); self.value(*w).len()];
                    gw[*idx] = gy.iter().zip(self.value(*x)).map(|(&g, &v)| g * v).sum::<F>();
                    acc(*w, gw);
                }
            }
        }
    }
}

/// Vector-Jacobian product of `p = softmax(scale * z)`; masked entries have
/// `p == 0` and therefore receive zero gradient.
fn softmax_vjp<F: Real>(p: &[F], gy: &[F], scale: F) -> Vec<F> {
    let dot = p.iter().zip(gy).map(|(&a, &b)| a * b).sum::<F>();
    p.iter().zip(gy).map(|(&pi, &gi)| scale * pi * (gi - dot)).collect()
}

pub(crate) fn masked_softmax_values<F: Real>(x: &[F], noise: Option<&[F]>, mask: &[bool], scale: F) -> Vec<F> {
    assert_eq!(x.len(), mask.len());
    assert!(mask.iter().any(|&m| m), "softmax over an empty mask");
    let z: Vec<F> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| (v + noise.map_or(F::zero(), |n| n[i])) * scale)
        .collect();
    let mx = z
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(F::neg_infinity(), F::max);
    let mut out: Vec<F> = z
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - mx).exp() } else { F::zero() })
        .collect();
    let total = out.iter().copied().sum::<F>();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Index of the largest active entry; ties resolve to the lowest index.
pub(crate) fn argmax_masked<F: Real>(v: &[F], mask: &[bool]) -> usize {
    let mut best: Option<usize> = None;
    for (i, (&x, &m)) in v.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best.expect("argmax over an empty mask")
}
