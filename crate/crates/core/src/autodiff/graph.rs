use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, F),
    Square(Var),
    Abs(Var),
    LeakyRelu(Var, F),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    InstanceNorm {
        x: Var,
        eps: F,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: F,
    },
    MeanTime(Var),
    RepeatTime(Var, usize),
    TimeUpsample(Var),
    ConcatChannels(Var, Var),
    SliceChannels(Var, usize, usize),
    StopGrad(Var),
    Quantize {
        v: Var,
        codebook: Var,
        assign: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    Linear {
        w: Var,
        b: Var,
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        softmax: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// Eager reverse-mode tape. Operations append nodes in topological order;
/// [`Graph::backward`] sweeps them once in reverse.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    consumed: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass, if the node participated.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Column-to-code assignments recorded by a `quantize` node.
    pub fn quantize_assignments(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::Quantize { assign, .. } => Some(assign),
            _ => None,
        }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, ng, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, ng, Op::ScalarMul(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(out, ng, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        let ng = self.needs(a);
        self.push(out, ng, Op::Abs(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let out = self
            .value(a)
            .map(|x| if x >= F::zero() { x } else { x * slope });
        let ng = self.needs(a);
        self.push(out, ng, Op::LeakyRelu(a, slope))
    }

    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, false, Op::StopGrad(a))
    }

    /// Kernel-3 cross-correlation along time with "same" zero padding.
    /// `x: C_in x T`, `w: C_out x C_in x 3`, `b: C_out`; output time extent
    /// is `ceil(T / stride)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::shape("conv1d", format!("stride {stride} not in {{1,2}}")));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 2 || wv.rank() != 3 || bv.rank() != 1 {
            return Err(Error::shape(
                "conv1d",
                format!(
                    "ranks x{:?} w{:?} b{:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let (c_in, t) = (xv.shape()[0], xv.shape()[1]);
        let (c_out, w_cin, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if w_cin != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c_in} channels but weight expects {w_cin}"),
            ));
        }
        if k != 3 {
            return Err(Error::shape("conv1d", format!("kernel width {k}, expected 3")));
        }
        if bv.shape()[0] != c_out {
            return Err(Error::shape(
                "conv1d",
                format!("bias length {} vs {c_out} output channels", bv.shape()[0]),
            ));
        }
        if t == 0 {
            return Err(Error::shape("conv1d", "empty time axis".to_string()));
        }
        let t_out = (t - 1) / stride + 1;

        let xp = pad_rows(xv, c_in, t);
        let mut out = vec![F::zero(); c_out * t_out];
        let wd = wv.data();
        let bd = bv.data();
        for o in 0..c_out {
            let orow = &mut out[o * t_out..(o + 1) * t_out];
            let bias = bd[o];
            for v in orow.iter_mut() {
                *v = bias;
            }
            for i in 0..c_in {
                let xr = &xp[i * (t + 2)..(i + 1) * (t + 2)];
                let wb = &wd[(o * c_in + i) * 3..(o * c_in + i) * 3 + 3];
                let (w0, w1, w2) = (wb[0], wb[1], wb[2]);
                if stride == 1 {
                    for (tt, v) in orow.iter_mut().enumerate() {
                        *v = *v + w0 * xr[tt] + w1 * xr[tt + 1] + w2 * xr[tt + 2];
                    }
                } else {
                    for (tt, v) in orow.iter_mut().enumerate() {
                        let j = 2 * tt;
                        *v = *v + w0 * xr[j] + w1 * xr[j + 1] + w2 * xr[j + 2];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::from_vec(vec![c_out, t_out], out),
            ng,
            Op::Conv1d { x, w, b, stride },
        ))
    }

    /// Per-channel standardization over time, population variance, no affine.
    pub fn instance_norm(&mut self, x: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("instance_norm", format!("{:?}", xv.shape())));
        }
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        if t < 2 {
            return Err(Error::shape(
                "instance_norm",
                format!("time extent {t} < 2, variance undefined"),
            ));
        }
        let mut out = vec![F::zero(); c * t];
        for ch in 0..c {
            let row = xv.row(ch);
            let (mean, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for (tt, v) in out[ch * t..(ch + 1) * t].iter_mut().enumerate() {
                *v = (row[tt] - mean) * inv;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![c, t], out),
            ng,
            Op::InstanceNorm { x, eps },
        ))
    }

    /// Group normalization over (channels-in-group x time) with learnable
    /// per-channel scale and shift.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: F,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("group_norm", format!("{:?}", xv.shape())));
        }
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{groups} groups do not divide {c} channels"),
            ));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "group_norm",
                format!(
                    "scale/shift {:?}/{:?} vs {c} channels",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let cg = c / groups;
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let xv = self.value(x);
        let mut out = vec![F::zero(); c * t];
        for g in 0..groups {
            let lo = g * cg * t;
            let hi = (g + 1) * cg * t;
            let (mean, var) = mean_var(&xv.data()[lo..hi]);
            let inv = (var + eps).sqrt().recip();
            for ch in g * cg..(g + 1) * cg {
                let row = xv.row(ch);
                let (ga, be) = (gv[ch], bv[ch]);
                for (tt, v) in out[ch * t..(ch + 1) * t].iter_mut().enumerate() {
                    *v = (row[tt] - mean) * inv * ga + be;
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::from_vec(vec![c, t], out),
            ng,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            },
        ))
    }

    /// Arithmetic mean along time: `C x T -> C`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("mean_time", format!("{:?}", xv.shape())));
        }
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        let tf = F::from_f64(t as f64);
        let data = (0..c)
            .map(|ch| xv.row(ch).iter().fold(F::zero(), |a, &b| a + b) / tf)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(vec![c], data), ng, Op::MeanTime(x)))
    }

    /// Broadcast a `C` vector to `C x T`.
    pub fn repeat_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::shape("repeat_time", format!("{:?}", xv.shape())));
        }
        let c = xv.shape()[0];
        let mut data = vec![F::zero(); c * t];
        for ch in 0..c {
            let v = xv.data()[ch];
            for slot in &mut data[ch * t..(ch + 1) * t] {
                *slot = v;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(vec![c, t], data), ng, Op::RepeatTime(x, t)))
    }

    /// Duplicate each time column: `C x T -> C x 2T`.
    pub fn time_upsample(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("time_upsample", format!("{:?}", xv.shape())));
        }
        let (c, t) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![F::zero(); c * 2 * t];
        for ch in 0..c {
            let row = xv.row(ch);
            let orow = &mut data[ch * 2 * t..(ch + 1) * 2 * t];
            for tt in 0..t {
                orow[2 * tt] = row[tt];
                orow[2 * tt + 1] = row[tt];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_vec(vec![c, 2 * t], data), ng, Op::TimeUpsample(x)))
    }

    /// Stack `a` on top of `b` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let t = av.shape()[1];
        let c = av.shape()[0] + bv.shape()[0];
        let mut data = Vec::with_capacity(c * t);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(vec![c, t], data), ng, Op::ConcatChannels(a, b)))
    }

    /// Channel range `from..to` of a `C x T` tensor.
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || from >= to || to > xv.shape()[0] {
            return Err(Error::shape(
                "slice_channels",
                format!("{from}..{to} of {:?}", xv.shape()),
            ));
        }
        let t = xv.shape()[1];
        let data = xv.data()[from * t..to * t].to_vec();
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_vec(vec![to - from, t], data),
            ng,
            Op::SliceChannels(x, from, to),
        ))
    }

    /// Replace every time column by its nearest code under squared L2,
    /// ties broken by lowest code index. Gradients are straight-through to
    /// `v`; selected codebook rows accumulate the output gradient.
    pub fn quantize(&mut self, v: Var, codebook: Var) -> Result<Var> {
        let (vv, cb) = (self.value(v), self.value(codebook));
        if vv.rank() != 2 || cb.rank() != 2 {
            return Err(Error::shape(
                "quantize",
                format!("{:?} vs codebook {:?}", vv.shape(), cb.shape()),
            ));
        }
        let (c, t) = (vv.shape()[0], vv.shape()[1]);
        let (k, d) = (cb.shape()[0], cb.shape()[1]);
        if k == 0 {
            return Err(Error::InvalidArgument("empty codebook".to_string()));
        }
        if d != c {
            return Err(Error::shape(
                "quantize",
                format!("codebook dim {d} vs {c} channels"),
            ));
        }
        // Column-major scratch so each distance scan is contiguous.
        let mut cols = vec![F::zero(); t * c];
        for ch in 0..c {
            let row = vv.row(ch);
            for tt in 0..t {
                cols[tt * c + ch] = row[tt];
            }
        }
        let cbd = cb.data();
        let mut assign = Vec::with_capacity(t);
        for tt in 0..t {
            let col = &cols[tt * c..(tt + 1) * c];
            let mut best = 0usize;
            let mut best_d = F::infinity();
            for kk in 0..k {
                let code = &cbd[kk * c..(kk + 1) * c];
                let mut dist = F::zero();
                for ch in 0..c {
                    let diff = col[ch] - code[ch];
                    dist = dist + diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = kk;
                }
            }
            assign.push(best);
        }
        let mut out = vec![F::zero(); c * t];
        for (tt, &kk) in assign.iter().enumerate() {
            let code = &cbd[kk * c..(kk + 1) * c];
            for ch in 0..c {
                out[ch * t + tt] = code[ch];
            }
        }
        let ng = self.needs(v) || self.needs(codebook);
        Ok(self.push(
            Tensor::from_vec(vec![c, t], out),
            ng,
            Op::Quantize {
                v,
                codebook,
                assign,
            },
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |a, &b| a + b);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), ng, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(F::zero(), |a, &b| a + b)
            / F::from_f64(n as f64);
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), ng, Op::MeanAll(x))
    }

    /// Fully connected: `w: N x M`, `b: N`, `x: M` -> `N`.
    pub fn linear(&mut self, w: Var, b: Var, x: Var) -> Result<Var> {
        let (wv, bv, xv) = (self.value(w), self.value(b), self.value(x));
        if wv.rank() != 2 || bv.rank() != 1 || xv.rank() != 1 {
            return Err(Error::shape(
                "linear",
                format!("w{:?} b{:?} x{:?}", wv.shape(), bv.shape(), xv.shape()),
            ));
        }
        let (n, m) = (wv.shape()[0], wv.shape()[1]);
        if xv.shape()[0] != m || bv.shape()[0] != n {
            return Err(Error::shape(
                "linear",
                format!("w{:?} b{:?} x{:?}", wv.shape(), bv.shape(), xv.shape()),
            ));
        }
        let wd = wv.data();
        let xd = xv.data();
        let data: Vec<F> = (0..n)
            .map(|i| {
                let row = &wd[i * m..(i + 1) * m];
                let mut acc = bv.data()[i];
                for (a, b) in row.iter().zip(xd) {
                    acc = acc + *a * *b;
                }
                acc
            })
            .collect();
        let ng = self.needs(w) || self.needs(b) || self.needs(x);
        Ok(self.push(Tensor::from_vec(vec![n], data), ng, Op::Linear { w, b, x }))
    }

    /// Cross entropy of a logit vector against a class index (stable
    /// log-softmax form).
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 || target >= lv.shape()[0] {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {:?}, target {target}", lv.shape()),
            ));
        }
        let d = lv.data();
        let m = d.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut z = F::zero();
        for &v in d {
            z = z + (v - m).exp();
        }
        let lse = m + z.ln();
        let loss = lse - d[target];
        let softmax: Vec<F> = d.iter().map(|&v| (v - m).exp() / z).collect();
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            ng,
            Op::CrossEntropy {
                logits,
                target,
                softmax,
            },
        ))
    }

    /// Mean absolute difference of two same-shape tensors (scalar).
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean_all(d))
    }

    /// Mean squared difference of two same-shape tensors (scalar).
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean_all(d))
    }

    /// Reverse sweep from a scalar loss. Populates gradients readable via
    /// [`Graph::grad`]; a graph can only be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Backward("graph already consumed".to_string()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(F::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn dispatch_backward(&mut self, id: usize, g: &Tensor<F>) {
        // Split borrows: values are read from `nodes`, accumulation happens
        // in the parallel `grads` vector.
        macro_rules! acc {
            ($v:expr, $shape:expr, $f:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].needs_grad {
                    let slot = self.grads[v.0]
                        .get_or_insert_with(|| Tensor::zeros($shape));
                    #[allow(clippy::redundant_closure_call)]
                    ($f)(slot.data_mut());
                }
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc!(a, &shape, |d: &mut [F]| axpy(d, g.data(), F::one()));
                acc!(b, &shape, |d: &mut [F]| axpy(d, g.data(), F::one()));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc!(a, &shape, |d: &mut [F]| axpy(d, g.data(), F::one()));
                acc!(b, &shape, |d: &mut [F]| axpy(d, g.data(), -F::one()));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let shape = self.nodes[a.0].value.shape().to_vec();
                let av: Vec<F> = self.nodes[a.0].value.data().to_vec();
                let bv: Vec<F> = self.nodes[b.0].value.data().to_vec();
                acc!(a, &shape, |d: &mut [F]| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g.data()[i] * bv[i];
                    }
                });
                acc!(b, &shape, |d: &mut [F]| {
                    for i in 0..d.len() {
                        d[i] = d[i] + g.data()[i] * av[i];
                    }
                });
            }
            Op::ScalarMul(a, c) => {
                let (a, c) = (*a, *c);
                let shape = self.nodes[a.0].value.shape().to_vec();
                acc!(a, &shape, |d: &mut [F]| axpy(d, g.data(), c));
            }
            Op::Square(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let av: Vec<F> = self.nodes[a.0].value.data().to_vec();
                let two = F::from_f64(2.0);
                acc!(a, &shape, |d: &mut [F]| {
                    for i in 0..d.len() {
                        d[i] = d[i] + two * av[i] * g.data()[i];
                    }
                });
            }
            Op::Abs(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let av: Vec<F> = self.nodes[a.0].value.data().to_vec();
                acc!(a, &shape, |d: &mut [F]| {
                    for i in 0..d.len() {
                        let s = if av[i] > F::zero() {
                            F::one()
                        } else if av[i] < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        };
                        d[i] = d[i] + s * g.data()[i];
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let shape = self.nodes[a.0].value.shape().to_vec();
                let av: Vec<F> = self.nodes[a.0].value.data().to_vec();
                acc!(a, &shape, |d: &mut [F]| {
                    for i in 0..d.len() {
                        let s = if av[i] >= F::zero() { F::one() } else { slope };
                        d[i] = d[i] + s * g.data()[i];
                    }
                });
            }
            Op::Conv1d { x, w, b, stride } => {
                let (x, w, b, stride) = (*x, *w, *b, *stride);
                self.conv1d_backward(x, w, b, stride, g);
            }
            Op::InstanceNorm { x, eps } => {
                let (x, eps) = (*x, *eps);
                let xv = &self.nodes[x.0].value;
                let (c, t) = (xv.shape()[0], xv.shape()[1]);
                let tf = F::from_f64(t as f64);
                let mut dx = vec![F::zero(); c * t];
                for ch in 0..c {
                    let row = xv.row(ch);
                    let (mean, var) = mean_var(row);
                    let inv = (var + eps).sqrt().recip();
                    let grow = &g.data()[ch * t..(ch + 1) * t];
                    let mut mg = F::zero();
                    let mut mgy = F::zero();
                    for tt in 0..t {
                        let y = (row[tt] - mean) * inv;
                        mg = mg + grow[tt];
                        mgy = mgy + grow[tt] * y;
                    }
                    mg = mg / tf;
                    mgy = mgy / tf;
                    let drow = &mut dx[ch * t..(ch + 1) * t];
                    for tt in 0..t {
                        let y = (row[tt] - mean) * inv;
                        drow[tt] = inv * (grow[tt] - mg - y * mgy);
                    }
                }
                let shape = vec![c, t];
                acc!(x, &shape, |d: &mut [F]| axpy(d, &dx, F::one()));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                eps,
            } => {
                let (x, gamma, beta, groups, eps) = (*x, *gamma, *beta, *groups, *eps);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gamma.0].value;
                let (c, t) = (xv.shape()[0], xv.shape()[1]);
                let cg = c / groups;
                let m = F::from_f64((cg * t) as f64);
                let mut dx = vec![F::zero(); c * t];
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for grp in 0..groups {
                    let lo = grp * cg * t;
                    let hi = (grp + 1) * cg * t;
                    let (mean, var) = mean_var(&xv.data()[lo..hi]);
                    let inv = (var + eps).sqrt().recip();
                    // du = g * gamma, reduced within the group
                    let mut mdu = F::zero();
                    let mut mduu = F::zero();
                    for ch in grp * cg..(grp + 1) * cg {
                        let ga = gv.data()[ch];
                        let row = xv.row(ch);
                        let grow = &g.data()[ch * t..(ch + 1) * t];
                        for tt in 0..t {
                            let u = (row[tt] - mean) * inv;
                            let du = grow[tt] * ga;
                            mdu = mdu + du;
                            mduu = mduu + du * u;
                            dgamma[ch] = dgamma[ch] + grow[tt] * u;
                            dbeta[ch] = dbeta[ch] + grow[tt];
                        }
                    }
                    mdu = mdu / m;
                    mduu = mduu / m;
                    for ch in grp * cg..(grp + 1) * cg {
                        let ga = gv.data()[ch];
                        let row = xv.row(ch);
                        let grow = &g.data()[ch * t..(ch + 1) * t];
                        let drow = &mut dx[ch * t..(ch + 1) * t];
                        for tt in 0..t {
                            let u = (row[tt] - mean) * inv;
                            let du = grow[tt] * ga;
                            drow[tt] = inv * (du - mdu - u * mduu);
                        }
                    }
                }
                let shape = vec![c, t];
                acc!(x, &shape, |d: &mut [F]| axpy(d, &dx, F::one()));
                acc!(gamma, &[c], |d: &mut [F]| axpy(d, &dgamma, F::one()));
                acc!(beta, &[c], |d: &mut [F]| axpy(d, &dbeta, F::one()));
            }
            Op::MeanTime(a) => {
                let a = *a;
                let (c, t) = {
                    let v = &self.nodes[a.0].value;
                    (v.shape()[0], v.shape()[1])
                };
                let inv_t = F::from_f64(t as f64).recip();
                acc!(a, &[c, t], |d: &mut [F]| {
                    for ch in 0..c {
                        let gc = g.data()[ch] * inv_t;
                        for slot in &mut d[ch * t..(ch + 1) * t] {
                            *slot = *slot + gc;
                        }
                    }
                });
            }
            Op::RepeatTime(a, t) => {
                let (a, t) = (*a, *t);
                let c = self.nodes[a.0].value.shape()[0];
                acc!(a, &[c], |d: &mut [F]| {
                    for ch in 0..c {
                        let mut s = F::zero();
                        for &gv in &g.data()[ch * t..(ch + 1) * t] {
                            s = s + gv;
                        }
                        d[ch] = d[ch] + s;
                    }
                });
            }
            Op::TimeUpsample(a) => {
                let a = *a;
                let (c, t) = {
                    let v = &self.nodes[a.0].value;
                    (v.shape()[0], v.shape()[1])
                };
                acc!(a, &[c, t], |d: &mut [F]| {
                    for ch in 0..c {
                        let grow = &g.data()[ch * 2 * t..(ch + 1) * 2 * t];
                        let drow = &mut d[ch * t..(ch + 1) * t];
                        for tt in 0..t {
                            drow[tt] = drow[tt] + grow[2 * tt] + grow[2 * tt + 1];
                        }
                    }
                });
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let (ca, t) = {
                    let v = &self.nodes[a.0].value;
                    (v.shape()[0], v.shape()[1])
                };
                let cb = self.nodes[b.0].value.shape()[0];
                acc!(a, &[ca, t], |d: &mut [F]| {
                    axpy(d, &g.data()[..ca * t], F::one())
                });
                acc!(b, &[cb, t], |d: &mut [F]| {
                    axpy(d, &g.data()[ca * t..], F::one())
                });
            }
            Op::SliceChannels(a, from, to) => {
                let (a, from, to) = (*a, *from, *to);
                let (c, t) = {
                    let v = &self.nodes[a.0].value;
                    (v.shape()[0], v.shape()[1])
                };
                let _ = to;
                acc!(a, &[c, t], |d: &mut [F]| {
                    axpy(&mut d[from * t..from * t + g.len()], g.data(), F::one())
                });
            }
            Op::Quantize {
                v,
                codebook,
                assign,
            } => {
                let (v, codebook) = (*v, *codebook);
                let assign = assign.clone();
                let (c, t) = {
                    let val = &self.nodes[v.0].value;
                    (val.shape()[0], val.shape()[1])
                };
                let k = self.nodes[codebook.0].value.shape()[0];
                // Straight-through to the input.
                acc!(v, &[c, t], |d: &mut [F]| axpy(d, g.data(), F::one()));
                // Selected rows accumulate the output gradient.
                acc!(codebook, &[k, c], |d: &mut [F]| {
                    for (tt, &kk) in assign.iter().enumerate() {
                        for ch in 0..c {
                            d[kk * c + ch] = d[kk * c + ch] + g.data()[ch * t + tt];
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let gs = g.item();
                acc!(a, &shape, |d: &mut [F]| {
                    for slot in d.iter_mut() {
                        *slot = *slot + gs;
                    }
                });
            }
            Op::MeanAll(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n = self.nodes[a.0].value.len();
                let gs = g.item() / F::from_f64(n as f64);
                acc!(a, &shape, |d: &mut [F]| {
                    for slot in d.iter_mut() {
                        *slot = *slot + gs;
                    }
                });
            }
            Op::Linear { w, b, x } => {
                let (w, b, x) = (*w, *b, *x);
                let (n, m) = {
                    let v = &self.nodes[w.0].value;
                    (v.shape()[0], v.shape()[1])
                };
                let wd: Vec<F> = self.nodes[w.0].value.data().to_vec();
                let xd: Vec<F> = self.nodes[x.0].value.data().to_vec();
                acc!(w, &[n, m], |d: &mut [F]| {
                    for i in 0..n {
                        let gi = g.data()[i];
                        let drow = &mut d[i * m..(i + 1) * m];
                        for j in 0..m {
                            drow[j] = drow[j] + gi * xd[j];
                        }
                    }
                });
                acc!(b, &[n], |d: &mut [F]| axpy(d, g.data(), F::one()));
                acc!(x, &[m], |d: &mut [F]| {
                    for i in 0..n {
                        let gi = g.data()[i];
                        let wrow = &wd[i * m..(i + 1) * m];
                        for j in 0..m {
                            d[j] = d[j] + gi * wrow[j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                softmax,
            } => {
                let (logits, target) = (*logits, *target);
                let softmax = softmax.clone();
                let n = softmax.len();
                let gs = g.item();
                acc!(logits, &[n], |d: &mut [F]| {
                    for i in 0..n {
                        let onehot = if i == target { F::one() } else { F::zero() };
                        d[i] = d[i] + gs * (softmax[i] - onehot);
                    }
                });
            }
        }
    }

    fn conv1d_backward(&mut self, x: Var, w: Var, b: Var, stride: usize, g: &Tensor<F>) {
        let (c_in, t) = {
            let v = &self.nodes[x.0].value;
            (v.shape()[0], v.shape()[1])
        };
        let c_out = self.nodes[w.0].value.shape()[0];
        let t_out = g.shape()[1];
        let xp = pad_rows(&self.nodes[x.0].value, c_in, t);
        let wd: Vec<F> = self.nodes[w.0].value.data().to_vec();

        if self.nodes[b.0].needs_grad {
            let slot = self.grads[b.0].get_or_insert_with(|| Tensor::zeros(&[c_out]));
            let d = slot.data_mut();
            for o in 0..c_out {
                let mut s = F::zero();
                for &gv in &g.data()[o * t_out..(o + 1) * t_out] {
                    s = s + gv;
                }
                d[o] = d[o] + s;
            }
        }
        if self.nodes[w.0].needs_grad {
            let slot = self.grads[w.0].get_or_insert_with(|| Tensor::zeros(&[c_out, c_in, 3]));
            let d = slot.data_mut();
            for o in 0..c_out {
                let grow = &g.data()[o * t_out..(o + 1) * t_out];
                for i in 0..c_in {
                    let xr = &xp[i * (t + 2)..(i + 1) * (t + 2)];
                    let mut s0 = F::zero();
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for (tt, &gv) in grow.iter().enumerate() {
                        let j = stride * tt;
                        s0 = s0 + gv * xr[j];
                        s1 = s1 + gv * xr[j + 1];
                        s2 = s2 + gv * xr[j + 2];
                    }
                    let base = (o * c_in + i) * 3;
                    d[base] = d[base] + s0;
                    d[base + 1] = d[base + 1] + s1;
                    d[base + 2] = d[base + 2] + s2;
                }
            }
        }
        if self.nodes[x.0].needs_grad {
            let mut dxp = vec![F::zero(); c_in * (t + 2)];
            for o in 0..c_out {
                let grow = &g.data()[o * t_out..(o + 1) * t_out];
                for i in 0..c_in {
                    let base = (o * c_in + i) * 3;
                    let (w0, w1, w2) = (wd[base], wd[base + 1], wd[base + 2]);
                    let drow = &mut dxp[i * (t + 2)..(i + 1) * (t + 2)];
                    for (tt, &gv) in grow.iter().enumerate() {
                        let j = stride * tt;
                        drow[j] = drow[j] + w0 * gv;
                        drow[j + 1] = drow[j + 1] + w1 * gv;
                        drow[j + 2] = drow[j + 2] + w2 * gv;
                    }
                }
            }
            let slot = self.grads[x.0].get_or_insert_with(|| Tensor::zeros(&[c_in, t]));
            let d = slot.data_mut();
            for i in 0..c_in {
                let src = &dxp[i * (t + 2) + 1..i * (t + 2) + 1 + t];
                axpy(&mut d[i * t..(i + 1) * t], src, F::one());
            }
        }
    }
}

fn axpy<F: Real>(dst: &mut [F], src: &[F], scale: F) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + scale * s;
    }
}

fn mean_var<F: Real>(xs: &[F]) -> (F, F) {
    let n = F::from_f64(xs.len() as f64);
    let mut s = F::zero();
    for &x in xs {
        s = s + x;
    }
    let mean = s / n;
    let mut v = F::zero();
    for &x in xs {
        let d = x - mean;
        v = v + d * d;
    }
    (mean, v / n)
}

fn pad_rows<F: Real>(x: &Tensor<F>, c: usize, t: usize) -> Vec<F> {
    let mut xp = vec![F::zero(); c * (t + 2)];
    for i in 0..c {
        xp[i * (t + 2) + 1..i * (t + 2) + 1 + t].copy_from_slice(x.row(i));
    }
    xp
}
