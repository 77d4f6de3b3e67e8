use super::conv::{batch_to_channel_major, channel_major_to_batch, col2im, im2col, Geometry};
use super::{shape_err, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

const SIGNED_SQRT_EPS: f64 = 1e-6;
const L2_NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Graph`]. Handles are tied to one
/// forward pass; after `backward` they become stale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    generation: u64,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        geo: Geometry,
        batch: usize,
        cols: Vec<T>,
    },
    ConvTranspose2d {
        x: usize,
        w: usize,
        b: usize,
        /// Geometry of the adjoint convolution, i.e. over the output image.
        geo: Geometry,
        batch: usize,
        cin: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    ChannelPool {
        x: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    GateChannels {
        mask: usize,
        x: usize,
    },
    Add(usize, usize),
    Mul(usize, usize),
    Concat {
        a: usize,
        b: usize,
        ca: usize,
        cb: usize,
        inner: usize,
    },
    Outer(usize, usize),
    SignedSqrt(usize),
    L2Normalize(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        a: usize,
        b: usize,
        per_element: bool,
    },
    Sum(usize),
    WeightedSum(Vec<(usize, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// the tape is topologically sorted by construction.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    generation: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            generation: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn id(&self, v: Var) -> Result<usize> {
        if v.generation != self.generation || v.id >= self.nodes.len() {
            return Err(TensorError::StaleVar);
        }
        Ok(v.id)
    }

    fn node(&self, v: Var) -> Result<(usize, &Tensor<T>)> {
        let id = self.id(v)?;
        Ok((id, &self.nodes[id].value))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        self.node(v).map(|(_, t)| t)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.id(v)?].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Learnable leaf. Its gradient is accumulated into the store on
    /// `backward`.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), &[])
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v)?.clone();
        Ok(self.input(value))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let (wi, wt) = self.node(w)?;
        let (bi, bt) = self.node(b)?;
        let [n, cin, h, wd] = xt.dims4("conv2d")?;
        let [cout, wcin, kh, kw] = wt.dims4("conv2d")?;
        if wcin != cin {
            return shape_err("conv2d", format!("weight expects {wcin} input channels, input has {cin}"));
        }
        if kh != kw {
            return shape_err("conv2d", "only square kernels are supported");
        }
        if bt.shape() != [cout] {
            return shape_err("conv2d", format!("bias shape {:?}, expected [{cout}]", bt.shape()));
        }
        let geo = Geometry::conv(cin, h, wd, kh, stride, padding)
            .ok_or_else(|| TensorError::Shape {
                op: "conv2d",
                detail: format!("kernel {kh} stride {stride} pad {padding} does not fit {h}×{wd}"),
            })?;
        let p = geo.positions();
        let ld = n * p;
        let rows = geo.rows();
        let mut cols = vec![T::zero(); rows * ld];
        let plane = cin * h * wd;
        for s in 0..n {
            im2col(&xt.data()[s * plane..(s + 1) * plane], &geo, &mut cols, ld, s * p);
        }
        let mut ycm = vec![T::zero(); cout * ld];
        for (co, row) in ycm.chunks_mut(ld).enumerate() {
            row.iter_mut().for_each(|v| *v = bt.data()[co]);
        }
        T::gemm(cout, rows, ld, wt.data(), rows as isize, 1, &cols, ld as isize, 1, T::one(), &mut ycm);
        let y = channel_major_to_batch(&ycm, n, cout, p);
        let value = Tensor::new(vec![n, cout, geo.oh, geo.ow], y)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x: xi,
                w: wi,
                b: bi,
                geo,
                batch: n,
                cols,
            },
            &[xi, wi, bi],
        ))
    }

    /// Transposed convolution with weight laid out `Cin×Cout×k×k`; the
    /// adjoint of `conv2d` with respect to its input.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let (wi, wt) = self.node(w)?;
        let (bi, bt) = self.node(b)?;
        let [n, cin, h, wd] = xt.dims4("conv_transpose2d")?;
        let [wcin, cout, kh, kw] = wt.dims4("conv_transpose2d")?;
        if wcin != cin {
            return shape_err(
                "conv_transpose2d",
                format!("weight expects {wcin} input channels, input has {cin}"),
            );
        }
        if kh != kw || stride == 0 {
            return shape_err("conv_transpose2d", "square kernel and stride ≥ 1 required");
        }
        if bt.shape() != [cout] {
            return shape_err("conv_transpose2d", format!("bias shape {:?}, expected [{cout}]", bt.shape()));
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * padding || full_w <= 2 * padding {
            return shape_err("conv_transpose2d", format!("padding {padding} leaves an empty output"));
        }
        let (oh, ow) = (full_h - 2 * padding, full_w - 2 * padding);
        let geo = Geometry::conv(cout, oh, ow, kh, stride, padding).ok_or_else(|| TensorError::Shape {
            op: "conv_transpose2d",
            detail: format!("kernel {kh} does not fit output {oh}×{ow}"),
        })?;
        debug_assert_eq!((geo.oh, geo.ow), (h, wd));
        let p = h * wd;
        let ld = n * p;
        let rows = geo.rows();
        let xcm = batch_to_channel_major(xt.data(), n, cin, p);
        let mut cols = vec![T::zero(); rows * ld];
        T::gemm(rows, cin, ld, wt.data(), 1, rows as isize, &xcm, ld as isize, 1, T::zero(), &mut cols);
        let out_plane = cout * oh * ow;
        let mut y = vec![T::zero(); n * out_plane];
        for s in 0..n {
            let img = &mut y[s * out_plane..(s + 1) * out_plane];
            for (co, chunk) in img.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bt.data()[co]);
            }
            col2im(&cols, &geo, ld, s * p, img);
        }
        let value = Tensor::new(vec![n, cout, oh, ow], y)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x: xi,
                w: wi,
                b: bi,
                geo,
                batch: n,
                cin,
            },
            &[xi, wi, bi],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let value = xt.map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(value, Op::Relu(xi), &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let value = xt.map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        Ok(self.push(value, Op::Sigmoid(xi), &[xi]))
    }

    /// Per-position channel mean and max, stacked as two planes.
    pub fn channel_pool(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let [n, c, h, w] = xt.dims4("channel_pool")?;
        if c == 0 {
            return shape_err("channel_pool", "no channels");
        }
        let p = h * w;
        let inv_c = T::one() / T::from_f64(c as f64);
        let mut out = vec![T::zero(); n * 2 * p];
        let mut argmax = vec![0usize; n * p];
        let d = xt.data();
        for s in 0..n {
            for pos in 0..p {
                let mut sum = T::zero();
                let mut best = d[s * c * p + pos];
                let mut best_c = 0;
                for ch in 0..c {
                    let v = d[(s * c + ch) * p + pos];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = ch;
                    }
                }
                out[s * 2 * p + pos] = sum * inv_c;
                out[s * 2 * p + p + pos] = best;
                argmax[s * p + pos] = best_c;
            }
        }
        let value = Tensor::new(vec![n, 2, h, w], out)?;
        Ok(self.push(value, Op::ChannelPool { x: xi, argmax }, &[xi]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let [n, c, h, w] = xt.dims4("global_avg_pool")?;
        let p = h * w;
        if p == 0 {
            return shape_err("global_avg_pool", "empty plane");
        }
        let inv = T::one() / T::from_f64(p as f64);
        let out = xt.data().chunks(p).map(|pl| pl.iter().copied().sum::<T>() * inv).collect();
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(xi), &[xi]))
    }

    /// `y = x·Wᵀ + b` with `W` laid out `out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let (wi, wt) = self.node(w)?;
        let (bi, bt) = self.node(b)?;
        let [n, d] = xt.dims2("linear")?;
        let [o, wd] = wt.dims2("linear")?;
        if wd != d || bt.shape() != [o] {
            return shape_err(
                "linear",
                format!("input width {d}, weight {:?}, bias {:?}", wt.shape(), bt.shape()),
            );
        }
        let mut y: Vec<T> = (0..n).flat_map(|_| bt.data().iter().copied()).collect();
        T::gemm(n, d, o, xt.data(), d as isize, 1, wt.data(), 1, d as isize, T::one(), &mut y);
        let value = Tensor::new(vec![n, o], y)?;
        Ok(self.push(value, Op::Linear { x: xi, w: wi, b: bi }, &[xi, wi, bi]))
    }

    /// `mask` (N×1×H×W) broadcast over the channels of `x` (N×C×H×W).
    pub fn gate_channels(&mut self, mask: Var, x: Var) -> Result<Var> {
        let (mi, mt) = self.node(mask)?;
        let (xi, xt) = self.node(x)?;
        let [n, c, h, w] = xt.dims4("gate_channels")?;
        if mt.shape() != [n, 1, h, w] {
            return shape_err("gate_channels", format!("mask {:?} vs features {:?}", mt.shape(), xt.shape()));
        }
        let p = h * w;
        let (m, d) = (mt.data(), xt.data());
        let mut out = vec![T::zero(); d.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * p;
                for pos in 0..p {
                    out[base + pos] = m[s * p + pos] * d[base + pos];
                }
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::GateChannels { mask: mi, x: xi }, &[mi, xi]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ai, at) = self.node(a)?;
        let (bi, bt) = self.node(b)?;
        if at.shape() != bt.shape() {
            return shape_err(op, format!("{:?} vs {:?}", at.shape(), bt.shape()));
        }
        Ok((ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("add", a, b)?;
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let out = at.data().iter().zip(bt.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = self.same_shape("mul", a, b)?;
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let out = at.data().iter().zip(bt.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(at.shape().to_vec(), out)?;
        Ok(self.push(value, Op::Mul(ai, bi), &[ai, bi]))
    }

    /// Stack along axis 1.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, at) = self.node(a)?;
        let (bi, bt) = self.node(b)?;
        let (sa, sb) = (at.shape(), bt.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err("concat", format!("{sa:?} vs {sb:?}"));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let inner: usize = sa[2..].iter().product();
        let mut out = Vec::with_capacity(at.len() + bt.len());
        for s in 0..n {
            out.extend_from_slice(&at.data()[s * ca * inner..(s + 1) * ca * inner]);
            out.extend_from_slice(&bt.data()[s * cb * inner..(s + 1) * cb * inner]);
        }
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                a: ai,
                b: bi,
                ca,
                cb,
                inner,
            },
            &[ai, bi],
        ))
    }

    /// Per-row outer product `a_i b_j`, flattened row-major to N×(C·D).
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, at) = self.node(a)?;
        let (bi, bt) = self.node(b)?;
        let [n, c] = at.dims2("outer")?;
        let [nb, d] = bt.dims2("outer")?;
        if n != nb {
            return shape_err("outer", format!("batch {n} vs {nb}"));
        }
        let mut out = Vec::with_capacity(n * c * d);
        for s in 0..n {
            let (ra, rb) = (&at.data()[s * c..(s + 1) * c], &bt.data()[s * d..(s + 1) * d]);
            for &x in ra {
                out.extend(rb.iter().map(|&y| x * y));
            }
        }
        let value = Tensor::new(vec![n, c * d], out)?;
        Ok(self.push(value, Op::Outer(ai, bi), &[ai, bi]))
    }

    /// `sign(x)·(sqrt(|x|+ε) − sqrt(ε))`: continuous through zero.
    pub fn signed_sqrt(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let eps = T::from_f64(SIGNED_SQRT_EPS);
        let value = xt.map(|v| {
            let mag = (v.abs() + eps).sqrt() - eps.sqrt();
            if v < T::zero() {
                -mag
            } else {
                mag
            }
        });
        Ok(self.push(value, Op::SignedSqrt(xi), &[xi]))
    }

    /// Normalize each row of an N×D tensor to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let [_, d] = xt.dims2("l2_normalize")?;
        let eps = T::from_f64(L2_NORM_EPS);
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(d) {
            let norm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::new(xt.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize(xi), &[xi]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (li, lt) = self.node(logits)?;
        let [n, k] = lt.dims2("cross_entropy")?;
        if labels.len() != n {
            return shape_err("cross_entropy", format!("{} labels for batch {n}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (s, row) in lt.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[labels[s]];
            for (p, &v) in probs[s * k..(s + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let loss = total / T::from_f64(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            &[li],
        ))
    }

    /// Squared error summed within each sample and averaged over the batch
    /// (axis 0). With `per_element` the sum becomes a mean over all elements.
    pub fn mse(&mut self, a: Var, b: Var, per_element: bool) -> Result<Var> {
        let (ai, bi) = self.same_shape("mse", a, b)?;
        let (at, bt) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let sse: T = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let denom = if per_element { at.len() } else { at.shape()[0] };
        let value = Tensor::scalar(sse / T::from_f64(denom as f64));
        Ok(self.push(
            value,
            Op::Mse {
                a: ai,
                b: bi,
                per_element,
            },
            &[ai, bi],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let (xi, xt) = self.node(x)?;
        let value = Tensor::scalar(xt.data().iter().copied().sum());
        Ok(self.push(value, Op::Sum(xi), &[xi]))
    }

    /// `Σ c_i · x_i` over scalar (one-element) inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut ids = Vec::with_capacity(terms.len());
        let mut acc = T::zero();
        for &(v, c) in terms {
            let (i, t) = self.node(v)?;
            if t.len() != 1 {
                return Err(TensorError::NotScalar(t.shape().to_vec()));
            }
            acc += c * t.item();
            ids.push((i, c));
        }
        let inputs: Vec<usize> = ids.iter().map(|&(i, _)| i).collect();
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(ids), &inputs))
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store`; the tape is cleared afterwards and every outstanding [`Var`]
    /// becomes stale.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let li = self.id(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(TensorError::NotScalar(self.nodes[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for id in (0..=li).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Param(pid) = self.nodes[id].op {
                store.accumulate(pid, &g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        self.nodes.clear();
        self.generation += 1;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |i: usize| nodes[i].requires_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            let buf = grads[i].get_or_insert_with(|| vec![T::zero(); nodes[i].value.len()]);
            f(buf);
        };
        let val = |i: usize| &nodes[i].value;
        match &nodes[id].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                geo,
                batch,
                cols,
            } => {
                let cout = val(*w).shape()[0];
                let p = geo.positions();
                let ld = batch * p;
                let rows = geo.rows();
                let gcm = batch_to_channel_major(g, *batch, cout, p);
                if want(*w) {
                    acc(*w, &mut |dw| {
                        T::gemm(cout, ld, rows, &gcm, ld as isize, 1, cols, 1, ld as isize, T::one(), dw)
                    });
                }
                if want(*b) {
                    acc(*b, &mut |db| {
                        for (co, row) in gcm.chunks(ld).enumerate() {
                            db[co] += row.iter().copied().sum::<T>();
                        }
                    });
                }
                if want(*x) {
                    let mut dcols = vec![T::zero(); rows * ld];
                    T::gemm(rows, cout, ld, val(*w).data(), 1, rows as isize, &gcm, ld as isize, 1, T::zero(), &mut dcols);
                    let plane = geo.channels * geo.h * geo.w;
                    acc(*x, &mut |dx| {
                        for s in 0..*batch {
                            col2im(&dcols, geo, ld, s * p, &mut dx[s * plane..(s + 1) * plane]);
                        }
                    });
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geo,
                batch,
                cin,
            } => {
                let p = geo.positions();
                let ld = batch * p;
                let rows = geo.rows();
                let out_plane = geo.channels * geo.h * geo.w;
                let mut dcols = vec![T::zero(); rows * ld];
                for s in 0..*batch {
                    im2col(&g[s * out_plane..(s + 1) * out_plane], geo, &mut dcols, ld, s * p);
                }
                if want(*x) {
                    let mut dxcm = vec![T::zero(); cin * ld];
                    T::gemm(*cin, rows, ld, val(*w).data(), rows as isize, 1, &dcols, ld as isize, 1, T::zero(), &mut dxcm);
                    let dx_batch = channel_major_to_batch(&dxcm, *batch, *cin, p);
                    acc(*x, &mut |dx| {
                        dx.iter_mut().zip(&dx_batch).for_each(|(a, &v)| *a += v);
                    });
                }
                if want(*w) {
                    let xcm = batch_to_channel_major(val(*x).data(), *batch, *cin, p);
                    acc(*w, &mut |dw| {
                        T::gemm(*cin, ld, rows, &xcm, ld as isize, 1, &dcols, 1, ld as isize, T::one(), dw)
                    });
                }
                if want(*b) {
                    let hw = geo.h * geo.w;
                    acc(*b, &mut |db| {
                        for (i, chunk) in g.chunks(hw).enumerate() {
                            db[i % geo.channels] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = nodes[id].value.data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * s * (T::one() - s);
                    }
                });
            }
            Op::ChannelPool { x, argmax } => {
                let [n, c, h, w] = val(*x).dims4("channel_pool").expect("recorded shape");
                let p = h * w;
                let inv_c = T::one() / T::from_f64(c as f64);
                acc(*x, &mut |dx| {
                    for s in 0..n {
                        for pos in 0..p {
                            let gm = g[s * 2 * p + pos] * inv_c;
                            for ch in 0..c {
                                dx[(s * c + ch) * p + pos] += gm;
                            }
                            dx[(s * c + argmax[s * p + pos]) * p + pos] += g[s * 2 * p + p + pos];
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let p = s[2] * s[3];
                let inv = T::one() / T::from_f64(p as f64);
                acc(*x, &mut |dx| {
                    for (plane, &gv) in dx.chunks_mut(p).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv * inv);
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let [n, d] = val(*x).dims2("linear").expect("recorded shape");
                let o = val(*w).shape()[0];
                if want(*x) {
                    acc(*x, &mut |dx| {
                        T::gemm(n, o, d, g, o as isize, 1, val(*w).data(), d as isize, 1, T::one(), dx)
                    });
                }
                if want(*w) {
                    acc(*w, &mut |dw| {
                        T::gemm(o, n, d, g, 1, o as isize, val(*x).data(), d as isize, 1, T::one(), dw)
                    });
                }
                if want(*b) {
                    acc(*b, &mut |db| {
                        for row in g.chunks(o) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                    });
                }
            }
            Op::GateChannels { mask, x } => {
                let [n, c, h, w] = val(*x).dims4("gate_channels").expect("recorded shape");
                let p = h * w;
                let (m, xv) = (val(*mask).data(), val(*x).data());
                if want(*mask) {
                    acc(*mask, &mut |dm| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * p;
                                for pos in 0..p {
                                    dm[s * p + pos] += g[base + pos] * xv[base + pos];
                                }
                            }
                        }
                    });
                }
                if want(*x) {
                    acc(*x, &mut |dx| {
                        for s in 0..n {
                            for ch in 0..c {
                                let base = (s * c + ch) * p;
                                for pos in 0..p {
                                    dx[base + pos] += g[base + pos] * m[s * p + pos];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for i in [*a, *b] {
                    if want(i) {
                        acc(i, &mut |d| d.iter_mut().zip(g).for_each(|(x, &v)| *x += v));
                    }
                }
            }
            Op::Mul(a, b) => {
                for (i, other) in [(*a, *b), (*b, *a)] {
                    if want(i) {
                        let o = val(other).data();
                        acc(i, &mut |d| {
                            for ((x, &gv), &ov) in d.iter_mut().zip(g).zip(o) {
                                *x += gv * ov;
                            }
                        });
                    }
                }
            }
            Op::Concat { a, b, ca, cb, inner } => {
                let stride = (ca + cb) * inner;
                let n = g.len() / stride;
                for (i, off, width) in [(*a, 0, ca * inner), (*b, ca * inner, cb * inner)] {
                    if want(i) {
                        acc(i, &mut |d| {
                            for s in 0..n {
                                let src = &g[s * stride + off..s * stride + off + width];
                                d[s * width..(s + 1) * width]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, &v)| *x += v);
                            }
                        });
                    }
                }
            }
            Op::Outer(a, b) => {
                let [n, c] = val(*a).dims2("outer").expect("recorded shape");
                let d = val(*b).shape()[1];
                let (av, bv) = (val(*a).data(), val(*b).data());
                if want(*a) {
                    acc(*a, &mut |da| {
                        for s in 0..n {
                            for i in 0..c {
                                let row = &g[s * c * d + i * d..s * c * d + (i + 1) * d];
                                da[s * c + i] +=
                                    row.iter().zip(&bv[s * d..(s + 1) * d]).map(|(&x, &y)| x * y).sum::<T>();
                            }
                        }
                    });
                }
                if want(*b) {
                    acc(*b, &mut |db| {
                        for s in 0..n {
                            for i in 0..c {
                                let ai = av[s * c + i];
                                let row = &g[s * c * d + i * d..s * c * d + (i + 1) * d];
                                db[s * d..(s + 1) * d]
                                    .iter_mut()
                                    .zip(row)
                                    .for_each(|(x, &v)| *x += v * ai);
                            }
                        }
                    });
                }
            }
            Op::SignedSqrt(x) => {
                let eps = T::from_f64(SIGNED_SQRT_EPS);
                let two = T::from_f64(2.0);
                let xv = val(*x).data();
                acc(*x, &mut |dx| {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv / (two * (v.abs() + eps).sqrt());
                    }
                });
            }
            Op::L2Normalize(x) => {
                let xv = val(*x).data();
                let y = nodes[id].value.data();
                let d = val(*x).shape()[1];
                let eps = T::from_f64(L2_NORM_EPS);
                acc(*x, &mut |dx| {
                    for s in 0..xv.len() / d {
                        let r = s * d..(s + 1) * d;
                        let norm = (xv[r.clone()].iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                        let dot: T = y[r.clone()].iter().zip(&g[r.clone()]).map(|(&a, &b)| a * b).sum();
                        for j in r {
                            dx[j] += (g[j] - y[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / T::from_f64(n as f64);
                acc(*logits, &mut |dl| {
                    for s in 0..n {
                        for j in 0..k {
                            let onehot = if j == labels[s] { T::one() } else { T::zero() };
                            dl[s * k + j] += scale * (probs[s * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse { a, b, per_element } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let denom = if *per_element { av.len() } else { val(*a).shape()[0] };
                let scale = T::from_f64(2.0) * g[0] / T::from_f64(denom as f64);
                for (i, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if want(i) {
                        acc(i, &mut |d| {
                            for ((x, &p), &q) in d.iter_mut().zip(av).zip(bv) {
                                *x += sign * scale * (p - q);
                            }
                        });
                    }
                }
            }
            Op::Sum(x) => {
                acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::WeightedSum(terms) => {
                for &(i, c) in terms {
                    if want(i) {
                        acc(i, &mut |d| d[0] += c * g[0]);
                    }
                }
            }
        }
    }
}
