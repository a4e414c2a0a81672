//! Attention-gated encoder-decoder with a pixel-shuffle upsampling head.
//!
//! The `V` views enter as channels of one image. Each encoder block is two
//! 3x3 conv → batch-norm → ReLU layers with 2x2 max-pooling between blocks.
//! Each decoder stage upsamples, convolves, gates the matching encoder skip
//! with its own output and fuses the two with another double conv. The head
//! maps to `r²` channels, applies PReLU, rearranges them into an `r`-times
//! larger image and finishes with a 1x1 convolution.

use std::collections::BTreeMap;

use misr4d_tensor::{BatchNormStats, Gradients, Graph, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use misr4d_tensor::{depth_to_space, space_to_depth};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_views: usize,
    pub encoder_channels: Vec<usize>,
    pub r: usize,
    pub f_int_ratio: f64,
    pub prelu_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_views: 16,
            encoder_channels: vec![64, 128, 256, 512, 1024],
            r: 3,
            f_int_ratio: 0.5,
            prelu_init: 0.25,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_views == 0 {
            return bad("in_views must be positive".into());
        }
        if self.encoder_channels.is_empty() || self.encoder_channels[0] == 0 {
            return bad("encoder_channels must be non-empty and positive".into());
        }
        if self.encoder_channels.windows(2).any(|p| p[1] <= p[0]) {
            return bad(format!(
                "encoder_channels must be strictly increasing, got {:?}",
                self.encoder_channels
            ));
        }
        if self.r == 0 {
            return bad("r must be >= 1".into());
        }
        if !(self.f_int_ratio > 0.0 && self.f_int_ratio <= 1.0) {
            return bad(format!(
                "f_int_ratio must be in (0, 1], got {}",
                self.f_int_ratio
            ));
        }
        if !self.prelu_init.is_finite() {
            return bad("prelu_init must be finite".into());
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << (self.encoder_channels.len() - 1)
    }

    fn f_int(&self, channels: usize) -> usize {
        ((channels as f64 * self.f_int_ratio).round() as usize).max(1)
    }

    /// Checks an `(H, W)` input, naming the first pooling stage it cannot pass.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let (mut ch, mut cw) = (h, w);
        for stage in 1..self.encoder_channels.len() {
            if ch % 2 != 0 || cw % 2 != 0 || ch == 0 || cw == 0 {
                return Err(Error::Shape(format!(
                    "input {h}x{w} cannot be pooled at encoder stage {stage} ({ch}x{cw} is not even); \
                     H and W must be divisible by {}",
                    self.divisor()
                )));
            }
            ch /= 2;
            cw /= 2;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    HeUniform,
    Const(f64),
}

struct Slot {
    name: String,
    shape: [usize; 4],
    init: Init,
    trainable: bool,
}

fn push_conv(slots: &mut Vec<Slot>, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
    slots.push(Slot {
        name: format!("{name}.weight"),
        shape: [cout, cin, k, k],
        init: Init::HeUniform,
        trainable: true,
    });
    if bias {
        slots.push(Slot {
            name: format!("{name}.bias"),
            shape: [cout, 1, 1, 1],
            init: Init::Const(0.0),
            trainable: true,
        });
    }
}

fn push_bn(slots: &mut Vec<Slot>, name: &str, c: usize) {
    for (suffix, value, trainable) in [
        ("gamma", 1.0, true),
        ("beta", 0.0, true),
        ("running_mean", 0.0, false),
        ("running_var", 1.0, false),
    ] {
        slots.push(Slot {
            name: format!("{name}.{suffix}"),
            shape: [c, 1, 1, 1],
            init: Init::Const(value),
            trainable,
        });
    }
}

/// Every array of the model, in initialization order.
fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let chs = &cfg.encoder_channels;
    let mut s = Vec::new();
    for (i, &out) in chs.iter().enumerate() {
        let cin = if i == 0 { cfg.in_views } else { chs[i - 1] };
        push_conv(&mut s, &format!("enc{i}.conv1"), out, cin, 3, false);
        push_bn(&mut s, &format!("enc{i}.bn1"), out);
        push_conv(&mut s, &format!("enc{i}.conv2"), out, out, 3, false);
        push_bn(&mut s, &format!("enc{i}.bn2"), out);
    }
    for i in (0..chs.len() - 1).rev() {
        let (c, deep) = (chs[i], chs[i + 1]);
        let f = cfg.f_int(c);
        push_conv(&mut s, &format!("dec{i}.up"), c, deep, 3, false);
        push_bn(&mut s, &format!("dec{i}.up_bn"), c);
        push_conv(&mut s, &format!("dec{i}.att.wg"), f, c, 1, false);
        push_bn(&mut s, &format!("dec{i}.att.wg_bn"), f);
        push_conv(&mut s, &format!("dec{i}.att.wx"), f, c, 1, false);
        push_bn(&mut s, &format!("dec{i}.att.wx_bn"), f);
        push_conv(&mut s, &format!("dec{i}.att.psi"), 1, f, 1, true);
        push_conv(&mut s, &format!("dec{i}.conv1"), c, 2 * c, 3, false);
        push_bn(&mut s, &format!("dec{i}.bn1"), c);
        push_conv(&mut s, &format!("dec{i}.conv2"), c, c, 3, false);
        push_bn(&mut s, &format!("dec{i}.bn2"), c);
    }
    push_conv(&mut s, "head.conv", cfg.r * cfg.r, chs[0], 3, true);
    s.push(Slot {
        name: "head.prelu".into(),
        shape: [1, 1, 1, 1],
        init: Init::Const(cfg.prelu_init),
        trainable: true,
    });
    s.push(Slot {
        name: "head.out.weight".into(),
        shape: [1, 1, 1, 1],
        init: Init::Const(1.0),
        trainable: true,
    });
    s.push(Slot {
        name: "head.out.bias".into(),
        shape: [1, 1, 1, 1],
        init: Init::Const(0.0),
        trainable: true,
    });
    s
}

/// All model arrays by name: trainable parameters and batch-norm running
/// statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// Array names and shapes implied by `cfg`, with a trainable flag.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, [usize; 4], bool)> {
        layout(cfg)
            .into_iter()
            .map(|s| (s.name, s.shape, s.trainable))
            .collect()
    }

    /// Rebuilds a set from named arrays, checking them against `config`.
    pub fn from_arrays(config: ModelConfig, mut arrays: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for slot in layout(&config) {
            let t = arrays
                .remove(&slot.name)
                .ok_or_else(|| Error::Config(format!("missing array {}", slot.name)))?;
            if t.shape() != slot.shape {
                return Err(Error::Config(format!(
                    "array {} has shape {:?}, expected {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!(
                    "array {} is not finite",
                    slot.name
                )));
            }
            if slot.trainable {
                params.insert(slot.name, t);
            } else {
                buffers.insert(slot.name, t);
            }
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Config(format!("unexpected array {extra}")));
        }
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .values()
            .chain(self.buffers.values())
            .all(Tensor::is_finite)
    }

    /// Copy with every array rounded to single precision, the checkpoint storage type.
    pub fn round_to_f32(&self) -> Self {
        let round = |m: &BTreeMap<String, Tensor>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.map(|x| x as f32 as f64)))
                .collect()
        };
        Self {
            config: self.config.clone(),
            params: round(&self.params),
            buffers: round(&self.buffers),
        }
    }

    /// Registers every trainable array in `g`.
    pub fn bind(&self, g: &mut Graph) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect()
    }

    /// Exponential moving update of running statistics from the batch-norm
    /// nodes of a training-mode pass. Variances are stored unbiased.
    pub fn update_running_stats(&mut self, g: &Graph, pass: &ForwardPass, momentum: f64) {
        for (name, node) in &pass.batch_norms {
            let Some((mean, var)) = g.batch_norm_stats(*node) else {
                continue;
            };
            let [n, _, h, w] = g.shape(pass.bn_inputs[name]);
            let count = (n * h * w) as f64;
            let unbias = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            let rm = self
                .buffers
                .get_mut(&format!("{name}.running_mean"))
                .unwrap();
            for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - momentum) * *r + momentum * m;
            }
            let rv = self
                .buffers
                .get_mut(&format!("{name}.running_var"))
                .unwrap();
            for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - momentum) * *r + momentum * v * unbias;
            }
        }
    }
}

/// Fan-in-scaled uniform initialization, deterministic in `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for slot in layout(cfg) {
        let t = match slot.init {
            Init::Const(v) => Tensor::full(slot.shape, v),
            Init::HeUniform => {
                let [_, cin, k, _] = slot.shape;
                let bound = (6.0 / (cin * k * k) as f64).sqrt();
                let n: usize = slot.shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::from_vec(slot.shape, data)
            }
        };
        if slot.trainable {
            params.insert(slot.name, t);
        } else {
            buffers.insert(slot.name, t);
        }
    }
    Ok(ParameterSet {
        config: cfg.clone(),
        params,
        buffers,
    })
}

/// Batch-norm behaviour of a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics; running statistics can be updated
    /// from the pass afterwards.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Graph nodes of one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `(N, 1, rH, rW)`.
    pub output: Var,
    /// Batch-norm output node per layer name (training mode only).
    pub batch_norms: Vec<(String, Var)>,
    bn_inputs: BTreeMap<String, Var>,
    /// Sigmoid attention map per decoder stage, `(N, 1, h, w)`.
    pub attention: Vec<Var>,
}

struct Builder<'a> {
    g: &'a mut Graph,
    params: &'a ParameterSet,
    vars: &'a BTreeMap<String, Var>,
    mode: Mode,
    batch_norms: Vec<(String, Var)>,
    bn_inputs: BTreeMap<String, Var>,
    attention: Vec<Var>,
}

impl Builder<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }

    fn conv(&mut self, x: Var, name: &str, bias: bool) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"))?;
        let b = if bias {
            Some(self.var(&format!("{name}.bias"))?)
        } else {
            None
        };
        Ok(self.g.conv2d(x, w, b)?)
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.var(&format!("{name}.gamma"))?;
        let beta = self.var(&format!("{name}.beta"))?;
        match self.mode {
            Mode::Train => {
                let y = self.g.batch_norm(x, gamma, beta, BatchNormStats::Batch)?;
                self.batch_norms.push((name.to_string(), y));
                self.bn_inputs.insert(name.to_string(), x);
                Ok(y)
            }
            Mode::Eval => {
                let buf = |suffix: &str| {
                    self.params
                        .buffers
                        .get(&format!("{name}.{suffix}"))
                        .ok_or_else(|| Error::Config(format!("missing {name}.{suffix}")))
                };
                let (mean, var) = (buf("running_mean")?, buf("running_var")?);
                Ok(self.g.batch_norm(
                    x,
                    gamma,
                    beta,
                    BatchNormStats::Running {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?)
            }
        }
    }

    fn conv_bn_relu(&mut self, x: Var, conv: &str, bn: &str) -> Result<Var> {
        let y = self.conv(x, conv, false)?;
        let y = self.bn(y, bn)?;
        Ok(self.g.relu(y))
    }

    fn double_conv(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.conv_bn_relu(x, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"))?;
        self.conv_bn_relu(y, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"))
    }

    fn gate(&mut self, x: Var, gating: Var, stage: usize) -> Result<Var> {
        let (sx, sg) = (self.g.shape(x), self.g.shape(gating));
        if sx[2..] != sg[2..] {
            return Err(Error::Shape(format!(
                "attention gate at decoder stage {stage}: skip {sx:?} and gate {sg:?} differ spatially"
            )));
        }
        let p = format!("dec{stage}.att");
        let wg = self.conv(gating, &format!("{p}.wg"), false)?;
        let wg = self.bn(wg, &format!("{p}.wg_bn"))?;
        let wx = self.conv(x, &format!("{p}.wx"), false)?;
        let wx = self.bn(wx, &format!("{p}.wx_bn"))?;
        let sum = self.g.add(wg, wx)?;
        let act = self.g.relu(sum);
        let psi = self.conv(act, &format!("{p}.psi"), true)?;
        let alpha = self.g.sigmoid(psi);
        self.attention.push(alpha);
        Ok(self.g.mul_broadcast(x, alpha)?)
    }
}

/// Builds the forward pass for an `(N, V, H, W)` input node.
pub fn build_forward(
    g: &mut Graph,
    params: &ParameterSet,
    vars: &BTreeMap<String, Var>,
    input: Var,
    mode: Mode,
) -> Result<ForwardPass> {
    let cfg = &params.config;
    let [_, v, h, w] = g.shape(input);
    if v != cfg.in_views {
        return Err(Error::Shape(format!(
            "model expects {} input views, got {v}",
            cfg.in_views
        )));
    }
    cfg.check_input(h, w)?;
    let levels = cfg.encoder_channels.len();
    let mut b = Builder {
        g,
        params,
        vars,
        mode,
        batch_norms: Vec::new(),
        bn_inputs: BTreeMap::new(),
        attention: Vec::new(),
    };
    let mut skips = Vec::with_capacity(levels);
    let mut x = input;
    for i in 0..levels {
        if i > 0 {
            x = b.g.max_pool2(x)?;
        }
        x = b.double_conv(x, &format!("enc{i}"))?;
        skips.push(x);
    }
    for i in (0..levels - 1).rev() {
        let up = b.g.upsample2(x);
        let up = b.conv_bn_relu(up, &format!("dec{i}.up"), &format!("dec{i}.up_bn"))?;
        let gated = b.gate(skips[i], up, i)?;
        let cat = b.g.concat(&[gated, up])?;
        x = b.double_conv(cat, &format!("dec{i}"))?;
    }
    let y = b.conv(x, "head.conv", true)?;
    let slope = b.var("head.prelu")?;
    let y = b.g.prelu(y, slope)?;
    let y = b.g.depth_to_space(y, cfg.r)?;
    let output = b.conv(y, "head.out", true)?;
    Ok(ForwardPass {
        output,
        batch_norms: b.batch_norms,
        bn_inputs: b.bn_inputs,
        attention: b.attention,
    })
}

fn stack_input(views: &Array3<f64>) -> Tensor {
    let (v, h, w) = views.dim();
    Tensor::from_vec([1, v, h, w], views.iter().copied().collect())
}

/// Inference on one `(V, H, W)` view stack with frozen batch statistics;
/// returns the `(rH, rW)` image.
pub fn forward(params: &ParameterSet, views: &Array3<f64>) -> Result<Array2<f64>> {
    let out = forward_tensor(params, &stack_input(views), Mode::Eval)?;
    let [_, _, oh, ow] = out.shape();
    Ok(Array2::from_shape_vec((oh, ow), out.into_vec()).expect("shape matches"))
}

/// Forward pass on an `(N, V, H, W)` batch without gradient bookkeeping.
pub fn forward_tensor(params: &ParameterSet, input: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .params
        .iter()
        .map(|(k, v)| (k.clone(), g.constant(v.clone())))
        .collect();
    let x = g.constant(input.clone());
    let pass = build_forward(&mut g, params, &vars, x, mode)?;
    let out = g.value(pass.output).clone();
    if !out.is_finite() {
        return Err(Error::Numerical("network output is not finite".into()));
    }
    Ok(out)
}

/// Applies the attention gate of decoder `stage` to skip features `x` with
/// gating features `gate`. Returns the gated features and the attention map.
pub fn attention_gate(
    params: &ParameterSet,
    stage: usize,
    x: &Tensor,
    gate: &Tensor,
    mode: Mode,
) -> Result<(Tensor, Tensor)> {
    if stage + 1 >= params.config.encoder_channels.len() {
        return Err(Error::InvalidParameter(format!("no decoder stage {stage}")));
    }
    let mut g = Graph::new();
    let vars: BTreeMap<String, Var> = params
        .params
        .iter()
        .filter(|(k, _)| k.starts_with(&format!("dec{stage}.att.")))
        .map(|(k, v)| (k.clone(), g.constant(v.clone())))
        .collect();
    let xv = g.constant(x.clone());
    let gv = g.constant(gate.clone());
    let mut b = Builder {
        g: &mut g,
        params,
        vars: &vars,
        mode,
        batch_norms: Vec::new(),
        bn_inputs: BTreeMap::new(),
        attention: Vec::new(),
    };
    let out = b.gate(xv, gv, stage)?;
    let alpha = b.attention[0];
    Ok((g.value(out).clone(), g.value(alpha).clone()))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    m: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-4, (0.9, 0.999))
    }
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            betas,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn update(
        &mut self,
        params: &mut ParameterSet,
        vars: &BTreeMap<String, Var>,
        grads: &mut Gradients,
    ) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, var) in vars {
            let Some(grad) = grads.take(*var) else {
                continue;
            };
            let p = params.params.get_mut(name).expect("bound parameter exists");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            for (((w, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            in_views: 2,
            encoder_channels: vec![2, 4],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let mut c = tiny();
        c.encoder_channels = vec![4, 4];
        assert!(c.validate().is_err());
        c.encoder_channels = vec![];
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::default().divisor(), 16);
    }

    #[test]
    fn indivisible_input_names_stage() {
        let c = ModelConfig::default();
        let err = c.check_input(40, 64).unwrap_err().to_string();
        assert!(err.contains("stage 4"), "{err}");
        assert!(c.check_input(32, 48).is_ok());
    }

    #[test]
    fn layout_round_trips_through_arrays() {
        let p = init_model(&tiny(), 3).unwrap();
        let mut all = p.params.clone();
        all.extend(p.buffers.clone());
        let back = ParameterSet::from_arrays(tiny(), all.clone()).unwrap();
        assert_eq!(back, p);
        all.remove("head.prelu");
        assert!(ParameterSet::from_arrays(tiny(), all).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = init_model(&tiny(), 0).unwrap();
        let before = p.params["head.out.bias"].data()[0];
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let b = vars["head.out.bias"];
        let loss = g.scale(b, 3.0);
        let loss = g.mean(loss);
        let mut grads = g.backward(loss).unwrap();
        let mut opt = Adam::new(0.01, (0.9, 0.999));
        opt.update(&mut p, &vars, &mut grads);
        let after = p.params["head.out.bias"].data()[0];
        assert!((before - after - 0.01).abs() < 1e-9);
    }
}
