use crate::conv::{col2im, gemm, gemm_at, gemm_bt, im2col};
use crate::{Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics used by [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum BatchNormStats<'a> {
    /// Normalize with the statistics of the current batch (biased variance).
    Batch,
    /// Normalize with externally supplied running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    PRelu {
        x: Var,
        slope: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    DepthToSpace {
        x: Var,
        r: usize,
    },
    RepeatChannels(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MulBroadcast {
        x: Var,
        gate: Var,
    },
    AddScalar(Var),
    Scale(Var, f64),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Mean(Var),
    MeanSpatial(Var),
    GaussianValid {
        x: Var,
        kernel: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Every operation eagerly computes its value and records what it needs for
/// the backward pass. Nodes that do not depend on any trainable leaf are
/// skipped during [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(msg: impl Into<String>) -> TensorError {
    TensorError::Shape(msg.into())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch mean and biased variance computed by a batch-statistics norm node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mean,
                var,
                batch_stats: true,
                ..
            } => Some((mean.clone(), var.clone())),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(format!("{what}: shape {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ---------------------------------------------------------------------
    // layers

    /// Stride-1 convolution with odd square kernel and zero "same" padding.
    ///
    /// `weight` is `(cout, cin, k, k)`, `bias` is `(cout, 1, 1, 1)`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let [n, cin, h, w] = self.shape(x);
        let [cout, wcin, k, k2] = self.shape(weight);
        if wcin != cin || k != k2 || k % 2 == 0 {
            return Err(shape_err(format!(
                "conv2d: input {:?} incompatible with kernel {:?}",
                self.shape(x),
                self.shape(weight)
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout, 1, 1, 1] {
                return Err(shape_err(format!("conv2d: bias shape {:?}", self.shape(b))));
            }
        }
        let hw = h * w;
        let kk = cin * k * k;
        let mut out = Tensor::zeros([n, cout, h, w]);
        let mut cols = if k == 1 {
            Vec::new()
        } else {
            vec![0.0; kk * hw]
        };
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[weight.0].value.data();
            for s in 0..n {
                let xs = &xv.data()[s * cin * hw..(s + 1) * cin * hw];
                let src = if k == 1 {
                    xs
                } else {
                    im2col(xs, cin, h, w, k, &mut cols);
                    &cols
                };
                let os = &mut out.data_mut()[s * cout * hw..(s + 1) * cout * hw];
                gemm(cout, kk, hw, wv, src, 0.0, os);
            }
        }
        if let Some(b) = bias {
            let bv = self.nodes[b.0].value.data().to_vec();
            for s in 0..n {
                for (c, bc) in bv.iter().enumerate() {
                    for v in out.plane_mut(s, c) {
                        *v += bc;
                    }
                }
            }
        }
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(out, Op::Conv2d { x, weight, bias }, rg))
    }

    /// Per-channel normalization followed by `gamma * xhat + beta`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BatchNormStats<'_>,
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(gamma) != [c, 1, 1, 1] || self.shape(beta) != [c, 1, 1, 1] {
            return Err(shape_err(format!(
                "batch_norm: affine params must be ({c},1,1,1)"
            )));
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let xv = &self.nodes[x.0].value;
        let (mean, var, batch_stats) = match stats {
            BatchNormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for smp in 0..n {
                        s += xv.plane(smp, ch).iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for smp in 0..n {
                        v += xv
                            .plane(smp, ch)
                            .iter()
                            .map(|a| (a - m) * (a - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count;
                }
                (mean, var, true)
            }
            BatchNormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm: running stats length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let mut out = Tensor::zeros([n, c, h, w]);
        for smp in 0..n {
            for ch in 0..c {
                let (m, is, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                let src = xv.plane(smp, ch);
                for (o, v) in out.plane_mut(smp, ch).iter_mut().zip(src) {
                    *o = gg * (v - m) * is + bb;
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    /// Parametric ReLU with one shared slope (`slope` is a `(1,1,1,1)` tensor).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.shape(slope) != [1, 1, 1, 1] {
            return Err(shape_err("prelu: slope must be a single value"));
        }
        let a = self.value(slope).data()[0];
        let out = self.value(x).map(|v| if v > 0.0 { v } else { a * v });
        let rg = self.rg(&[x, slope]);
        Ok(self.push(out, Op::PRelu { x, slope }, rg))
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err(format!("max_pool2: odd spatial dims {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut argmax = vec![0usize; n * c * ho * wo];
        let xv = &self.nodes[x.0].value;
        let mut o = 0;
        for smp in 0..n {
            for ch in 0..c {
                let base = xv.index(smp, ch, 0, 0);
                let plane = xv.plane(smp, ch);
                for yy in 0..ho {
                    for xx in 0..wo {
                        let cands = [
                            2 * yy * w + 2 * xx,
                            2 * yy * w + 2 * xx + 1,
                            (2 * yy + 1) * w + 2 * xx,
                            (2 * yy + 1) * w + 2 * xx + 1,
                        ];
                        let mut best = cands[0];
                        for &cand in &cands[1..] {
                            if plane[cand] > plane[best] {
                                best = cand;
                            }
                        }
                        out.data_mut()[o] = plane[best];
                        argmax[o] = base + best;
                        o += 1;
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(shape_err(format!("avg_pool2: input {h}x{w} too small")));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for smp in 0..n {
            for ch in 0..c {
                let p = xv.plane(smp, ch);
                let dst = out.plane_mut(smp, ch);
                for yy in 0..ho {
                    for xx in 0..wo {
                        let i = 2 * yy * w + 2 * xx;
                        dst[yy * wo + xx] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for smp in 0..n {
            for ch in 0..c {
                let p = xv.plane(smp, ch).to_vec();
                let dst = out.plane_mut(smp, ch);
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        dst[yy * 2 * w + xx] = p[(yy / 2) * w + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err("concat: no inputs"))?;
        let [n, _, h, w] = self.shape(first);
        let mut total_c = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.shape(v);
            if (vn, vh, vw) != (n, h, w) {
                return Err(shape_err(format!(
                    "concat: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(v)
                )));
            }
            total_c += vc;
        }
        let mut out = Tensor::zeros([n, total_c, h, w]);
        for smp in 0..n {
            let mut c0 = 0;
            for &v in xs {
                let t = &self.nodes[v.0].value;
                for ch in 0..t.c() {
                    out.plane_mut(smp, c0 + ch)
                        .copy_from_slice(t.plane(smp, ch));
                }
                c0 += t.c();
            }
        }
        let rg = self.rg(xs);
        Ok(self.push(out, Op::Concat(xs.to_vec()), rg))
    }

    /// Rearranges `(N, r*r, H, W)` into `(N, 1, r*H, r*W)`:
    /// `out[r*h + dy][r*w + dx] = in[r*dy + dx][h][w]`.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = depth_to_space(self.value(x), r)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::DepthToSpace { x, r }, rg))
    }

    /// Replicates a single-channel tensor into `channels` identical channels.
    pub fn repeat_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if c != 1 {
            return Err(shape_err(format!(
                "repeat_channels: expected 1 channel, got {c}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros([n, channels, h, w]);
        for smp in 0..n {
            for ch in 0..channels {
                out.plane_mut(smp, ch).copy_from_slice(xv.plane(smp, 0));
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RepeatChannels(x), rg))
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `x * gate` where `gate` has a single channel broadcast over `x`'s channels.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(gate) != [n, 1, h, w] {
            return Err(shape_err(format!(
                "mul_broadcast: gate {:?} does not match {:?}",
                self.shape(gate),
                self.shape(x)
            )));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gate.0].value;
        let mut out = Tensor::zeros([n, c, h, w]);
        for smp in 0..n {
            let gp = gv.plane(smp, 0);
            for ch in 0..c {
                let src = xv.plane(smp, ch);
                for ((o, a), g) in out.plane_mut(smp, ch).iter_mut().zip(src).zip(gp) {
                    *o = a * g;
                }
            }
        }
        let rg = self.rg(&[x, gate]);
        Ok(self.push(out, Op::MulBroadcast { x, gate }, rg))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.powf(x, 2.0)
    }

    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let out = self.value(x).map(|v| v.powf(p));
        let rg = self.rg(&[x]);
        self.push(out, Op::Powf(x, p), rg)
    }

    /// `max(x, floor)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).map(|v| v.max(floor));
        let rg = self.rg(&[x]);
        self.push(out, Op::ClampMin(x, floor), rg)
    }

    // ---------------------------------------------------------------------
    // reductions and filters

    /// Mean over all elements, as a `(1,1,1,1)` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean over H and W, giving `(N, C, 1, 1)`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for smp in 0..n {
            for ch in 0..c {
                out.set(
                    smp,
                    ch,
                    0,
                    0,
                    xv.plane(smp, ch).iter().sum::<f64>() / (h * w) as f64,
                );
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanSpatial(x), rg)
    }

    /// Separable depthwise filter with "valid" boundaries: the output shrinks
    /// by `kernel.len() - 1` along each spatial axis.
    pub fn gaussian_valid(&mut self, x: Var, kernel: &[f64]) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        let k = kernel.len();
        if k == 0 || h < k || w < k {
            return Err(shape_err(format!(
                "gaussian_valid: input {h}x{w} smaller than window {k}"
            )));
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let xv = &self.nodes[x.0].value;
        let mut out = Tensor::zeros([n, c, ho, wo]);
        let mut tmp = vec![0.0; ho * w];
        for smp in 0..n {
            for ch in 0..c {
                let p = xv.plane(smp, ch);
                // vertical pass
                for yy in 0..ho {
                    let row = &mut tmp[yy * w..(yy + 1) * w];
                    row.fill(0.0);
                    for (i, kv) in kernel.iter().enumerate() {
                        let src = &p[(yy + i) * w..(yy + i + 1) * w];
                        for (r, s) in row.iter_mut().zip(src) {
                            *r += kv * s;
                        }
                    }
                }
                let dst = out.plane_mut(smp, ch);
                for yy in 0..ho {
                    for xx in 0..wo {
                        let src = &tmp[yy * w + xx..yy * w + xx + k];
                        dst[yy * wo + xx] = src.iter().zip(kernel).map(|(a, b)| a * b).sum();
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GaussianValid {
                x,
                kernel: kernel.to_vec(),
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // backward

    /// Reverse pass from a scalar node. Returns gradients for every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != [1, 1, 1, 1] {
            return Err(shape_err(format!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, weight, bias } => {
                let xv = self.value(*x);
                let wv = self.value(*weight);
                let [n, cin, h, w] = xv.shape();
                let [cout, _, k, _] = wv.shape();
                let hw = h * w;
                let kk = cin * k * k;
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let mut gb = Tensor::zeros([cout, 1, 1, 1]);
                        for s in 0..n {
                            for c in 0..cout {
                                gb.data_mut()[c] += gy.plane(s, c).iter().sum::<f64>();
                            }
                        }
                        self.acc(grads, *b, gb);
                    }
                }
                let want_w = self.wants(*weight);
                let want_x = self.wants(*x);
                let mut gw = Tensor::zeros(wv.shape());
                let mut gx = Tensor::zeros(xv.shape());
                let mut cols = if k == 1 {
                    Vec::new()
                } else {
                    vec![0.0; kk * hw]
                };
                let mut dcols = vec![0.0; kk * hw];
                for s in 0..n {
                    let gys = &gy.data()[s * cout * hw..(s + 1) * cout * hw];
                    let xs = &xv.data()[s * cin * hw..(s + 1) * cin * hw];
                    if want_w {
                        let src = if k == 1 {
                            xs
                        } else {
                            im2col(xs, cin, h, w, k, &mut cols);
                            &cols
                        };
                        gemm_bt(cout, hw, kk, gys, src, gw.data_mut());
                    }
                    if want_x {
                        gemm_at(kk, cout, hw, wv.data(), gys, &mut dcols);
                        let gxs = &mut gx.data_mut()[s * cin * hw..(s + 1) * cin * hw];
                        if k == 1 {
                            for (a, b) in gxs.iter_mut().zip(&dcols) {
                                *a += b;
                            }
                        } else {
                            col2im(&dcols, cin, h, w, k, gxs);
                        }
                    }
                }
                if want_w {
                    self.acc(grads, *weight, gw);
                }
                if want_x {
                    self.acc(grads, *x, gx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
                ..
            } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.shape();
                let g = self.value(*gamma).data();
                let count = (n * h * w) as f64;
                let mut gg = Tensor::zeros([c, 1, 1, 1]);
                let mut gb = Tensor::zeros([c, 1, 1, 1]);
                let mut gx = Tensor::zeros(xv.shape());
                for ch in 0..c {
                    let (m, is) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = 0.0;
                    let mut sum_dy_xhat = 0.0;
                    for s in 0..n {
                        for (d, v) in gy.plane(s, ch).iter().zip(xv.plane(s, ch)) {
                            sum_dy += d;
                            sum_dy_xhat += d * (v - m) * is;
                        }
                    }
                    gg.data_mut()[ch] = sum_dy_xhat;
                    gb.data_mut()[ch] = sum_dy;
                    if self.wants(*x) {
                        for s in 0..n {
                            let dy = gy.plane(s, ch);
                            let xs = xv.plane(s, ch).to_vec();
                            let dst = gx.plane_mut(s, ch);
                            for i in 0..dy.len() {
                                dst[i] = if *batch_stats {
                                    let xhat = (xs[i] - m) * is;
                                    g[ch] * is / count
                                        * (count * dy[i] - sum_dy - xhat * sum_dy_xhat)
                                } else {
                                    g[ch] * is * dy[i]
                                };
                            }
                        }
                    }
                }
                self.acc(grads, *gamma, gg);
                self.acc(grads, *beta, gb);
                if self.wants(*x) {
                    self.acc(grads, *x, gx);
                }
            }
            Op::Relu(x) => {
                let gx = zip_map(gy, y, |d, o| if o > 0.0 { d } else { 0.0 });
                self.acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(gy, y, |d, s| d * s * (1.0 - s));
                self.acc(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = zip_map(gy, self.value(*x), |d, v| {
                    if v > 0.0 {
                        d
                    } else if v < 0.0 {
                        -d
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::PRelu { x, slope } => {
                let xv = self.value(*x);
                let a = self.value(*slope).data()[0];
                if self.wants(*slope) {
                    let ga: f64 = gy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .filter(|(_, v)| **v <= 0.0)
                        .map(|(d, v)| d * v)
                        .sum();
                    self.acc(grads, *slope, Tensor::scalar(ga));
                }
                let gx = zip_map(gy, xv, |d, v| if v > 0.0 { d } else { a * d });
                self.acc(grads, *x, gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                for (d, &idx) in gy.data().iter().zip(argmax) {
                    gx.data_mut()[idx] += d;
                }
                self.acc(grads, *x, gx);
            }
            Op::AvgPool2(x) => {
                let [n, c, h, w] = self.shape(*x);
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let d = gy.plane(s, ch).to_vec();
                        let dst = gx.plane_mut(s, ch);
                        for yy in 0..ho {
                            for xx in 0..wo {
                                let v = 0.25 * d[yy * wo + xx];
                                let i = 2 * yy * w + 2 * xx;
                                dst[i] += v;
                                dst[i + 1] += v;
                                dst[i + w] += v;
                                dst[i + w + 1] += v;
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Upsample2(x) => {
                let [n, c, h, w] = self.shape(*x);
                let mut gx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let d = gy.plane(s, ch).to_vec();
                        let dst = gx.plane_mut(s, ch);
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                dst[(yy / 2) * w + xx / 2] += d[yy * 2 * w + xx];
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let n = gy.n();
                let mut c0 = 0;
                for &v in xs {
                    let shape = self.shape(v);
                    if self.wants(v) {
                        let mut gv = Tensor::zeros(shape);
                        for s in 0..n {
                            for ch in 0..shape[1] {
                                gv.plane_mut(s, ch).copy_from_slice(gy.plane(s, c0 + ch));
                            }
                        }
                        self.acc(grads, v, gv);
                    }
                    c0 += shape[1];
                }
            }
            Op::DepthToSpace { x, r } => {
                let gx = space_to_depth(gy, *r);
                self.acc(grads, *x, gx);
            }
            Op::RepeatChannels(x) => {
                let [n, _, h, w] = self.shape(*x);
                let mut gx = Tensor::zeros([n, 1, h, w]);
                for s in 0..n {
                    for ch in 0..gy.c() {
                        let src = gy.plane(s, ch).to_vec();
                        for (a, b) in gx.plane_mut(s, 0).iter_mut().zip(&src) {
                            *a += b;
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, gy.clone());
                }
                if self.wants(*b) {
                    self.acc(grads, *b, gy.map(|d| -d));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(gy, self.value(*b), |d, v| d * v));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, zip_map(gy, self.value(*a), |d, v| d * v));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.wants(*a) {
                    self.acc(grads, *a, zip_map(gy, bv, |d, v| d / v));
                }
                if self.wants(*b) {
                    // d(a/b)/db = -y / b
                    let tmp = zip_map(gy, y, |d, o| -d * o);
                    self.acc(grads, *b, zip_map(&tmp, bv, |t, v| t / v));
                }
            }
            Op::MulBroadcast { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let [n, c, h, w] = xv.shape();
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    for s in 0..n {
                        let gp = gv.plane(s, 0);
                        for ch in 0..c {
                            let d = gy.plane(s, ch);
                            for ((o, a), b) in gx.plane_mut(s, ch).iter_mut().zip(d).zip(gp) {
                                *o = a * b;
                            }
                        }
                    }
                    self.acc(grads, *x, gx);
                }
                if self.wants(*gate) {
                    let mut gg = Tensor::zeros([n, 1, h, w]);
                    for s in 0..n {
                        for ch in 0..c {
                            let d = gy.plane(s, ch);
                            let xs = xv.plane(s, ch);
                            for ((o, a), b) in gg.plane_mut(s, 0).iter_mut().zip(d).zip(xs) {
                                *o += a * b;
                            }
                        }
                    }
                    self.acc(grads, *gate, gg);
                }
            }
            Op::AddScalar(x) => self.acc(grads, *x, gy.clone()),
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, gy.map(|d| d * c));
            }
            Op::Powf(x, p) => {
                let p = *p;
                let gx = zip_map(gy, self.value(*x), |d, v| d * p * v.powf(p - 1.0));
                self.acc(grads, *x, gx);
            }
            Op::ClampMin(x, floor) => {
                let f = *floor;
                let gx = zip_map(gy, self.value(*x), |d, v| if v > f { d } else { 0.0 });
                self.acc(grads, *x, gx);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let d = gy.data()[0] / xv.len() as f64;
                self.acc(grads, *x, Tensor::full(xv.shape(), d));
            }
            Op::MeanSpatial(x) => {
                let [n, c, h, w] = self.shape(*x);
                let mut gx = Tensor::zeros([n, c, h, w]);
                for s in 0..n {
                    for ch in 0..c {
                        let d = gy.get(s, ch, 0, 0) / (h * w) as f64;
                        gx.plane_mut(s, ch).fill(d);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::GaussianValid { x, kernel } => {
                let [n, c, h, w] = self.shape(*x);
                let k = kernel.len();
                let (ho, wo) = (h - k + 1, w - k + 1);
                let mut gx = Tensor::zeros([n, c, h, w]);
                let mut tmp = vec![0.0; ho * w];
                for s in 0..n {
                    for ch in 0..c {
                        let d = gy.plane(s, ch);
                        // adjoint of the horizontal pass
                        tmp.fill(0.0);
                        for yy in 0..ho {
                            for xx in 0..wo {
                                let v = d[yy * wo + xx];
                                for (j, kv) in kernel.iter().enumerate() {
                                    tmp[yy * w + xx + j] += kv * v;
                                }
                            }
                        }
                        // adjoint of the vertical pass
                        let dst = gx.plane_mut(s, ch);
                        for yy in 0..ho {
                            let row = &tmp[yy * w..(yy + 1) * w];
                            for (i, kv) in kernel.iter().enumerate() {
                                let out = &mut dst[(yy + i) * w..(yy + i + 1) * w];
                                for (o, r) in out.iter_mut().zip(row) {
                                    *o += kv * r;
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
    }
}

pub(crate) const BN_EPS: f64 = 1e-5;

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Pixel-shuffle rearrangement, see [`Graph::depth_to_space`].
pub fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if r == 0 || c != r * r {
        return Err(shape_err(format!(
            "depth_to_space: {c} channels cannot form a {r}x{r} block"
        )));
    }
    let mut out = Tensor::zeros([n, 1, r * h, r * w]);
    let ow = r * w;
    for s in 0..n {
        for dy in 0..r {
            for dx in 0..r {
                let src = x.plane(s, r * dy + dx).to_vec();
                let dst = out.plane_mut(s, 0);
                for yy in 0..h {
                    for xx in 0..w {
                        dst[(r * yy + dy) * ow + r * xx + dx] = src[yy * w + xx];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`depth_to_space`].
pub fn space_to_depth(y: &Tensor, r: usize) -> Tensor {
    let [n, _, rh, rw] = y.shape();
    let (h, w) = (rh / r, rw / r);
    let mut out = Tensor::zeros([n, r * r, h, w]);
    for s in 0..n {
        let src = y.plane(s, 0).to_vec();
        for dy in 0..r {
            for dx in 0..r {
                let dst = out.plane_mut(s, r * dy + dx);
                for yy in 0..h {
                    for xx in 0..w {
                        dst[yy * w + xx] = src[(r * yy + dy) * rw + r * xx + dx];
                    }
                }
            }
        }
    }
    out
}
