//! Candidate operations and the layers they are assembled from.
//!
//! Separable convolutions are `ReLU -> depthwise -> pointwise -> BN` applied
//! twice (stride on the first depthwise); dilated separable convolutions are
//! a single `ReLU -> depthwise(dilation 2) -> pointwise -> BN`. A strided
//! identity is a factorized reduction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::kernels::ConvSpec;
use crate::params::{Group, ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum OpKind {
    Identity,
    Zero,
    SepConv3x3,
    DilSepConv3x3,
    SepConv5x5,
    DilSepConv5x5,
    AvgPool3x3,
    MaxPool3x3,
}

impl OpKind {
    /// Canonical order; the position is the column index of every
    /// per-operation table.
    pub const ALL: [OpKind; 8] = [
        OpKind::Identity,
        OpKind::Zero,
        OpKind::SepConv3x3,
        OpKind::DilSepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilSepConv5x5,
        OpKind::AvgPool3x3,
        OpKind::MaxPool3x3,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Identity => "skip_connect",
            OpKind::Zero => "none",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::DilSepConv3x3 => "dil_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilSepConv5x5 => "dil_conv_5x5",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::MaxPool3x3 => "max_pool_3x3",
        }
    }

    pub fn is_conv(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3x3 | OpKind::DilSepConv3x3 | OpKind::SepConv5x5 | OpKind::DilSepConv5x5
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Genotype(format!(
                "unknown operation `{s}`; expected one of {}",
                OpKind::ALL.map(|k| k.name()).join(", ")
            ))
        })
    }
}

impl From<OpKind> for String {
    fn from(k: OpKind) -> Self {
        k.name().to_string()
    }
}

impl TryFrom<String> for OpKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Running totals for parameter and multiply-add counting. Only convolution
/// and linear layers contribute multiply-adds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Profile {
    pub params: u64,
    pub madds: u64,
}

pub type Chw = [usize; 3];

pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin / spec.groups * k * k;
        let weight = store.add_uniform(
            format!("{name}.weight"),
            vec![cout, cin / spec.groups, k, k],
            fan_in,
            rng,
        );
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), vec![cout], fan_in, rng));
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            spec,
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.graph.conv2d(x, w, b, self.spec)
    }

    pub fn profile(&self, [c, h, w]: Chw, p: &mut Profile) -> Chw {
        assert_eq!(c, self.cin, "conv expects {} channels, got {c}", self.cin);
        let (oh, ow) = (self.spec.out_size(h, self.k), self.spec.out_size(w, self.k));
        let per_out = (self.cin / self.spec.groups * self.k * self.k) as u64;
        p.params += self.cout as u64 * per_out + if self.bias.is_some() { self.cout as u64 } else { 0 };
        p.madds += self.cout as u64 * per_out * (oh * ow) as u64;
        [self.cout, oh, ow]
    }
}

pub struct BatchNorm2d {
    pub channels: usize,
    pub affine: Option<(ParamId, ParamId)>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                store.add(
                    format!("{name}.gamma"),
                    Group::Weight,
                    Tensor::full(vec![channels], F::one()),
                ),
                store.add(format!("{name}.beta"), Group::Weight, Tensor::zeros(vec![channels])),
            )
        });
        Self {
            channels,
            affine,
            running_mean: store.add(
                format!("{name}.running_mean"),
                Group::Buffer,
                Tensor::zeros(vec![channels]),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Group::Buffer,
                Tensor::full(vec![channels], F::one()),
            ),
        }
    }

    /// Batch statistics in training mode (and a running-average update),
    /// running statistics otherwise.
    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let (gamma, beta) = match self.affine {
            Some((g, b)) => (Some(s.param(g)), Some(s.param(b))),
            None => (None, None),
        };
        let eps = F::of(BN_EPS);
        if s.training {
            let (out, mean, var) = s.graph.batch_norm_train(x, gamma, beta, eps);
            let shape = s.graph.shape(x);
            let m = (shape[0] * shape[2] * shape[3]) as f64;
            let mom = F::of(BN_MOMENTUM);
            let unbias = F::of(m / (m - 1.0));
            let rm = s.store.get_mut(self.running_mean).data_mut();
            for (r, &b) in rm.iter_mut().zip(&mean) {
                *r = (F::one() - mom) * *r + mom * b;
            }
            let rv = s.store.get_mut(self.running_var).data_mut();
            for (r, &b) in rv.iter_mut().zip(&var) {
                *r = (F::one() - mom) * *r + mom * b * unbias;
            }
            out
        } else {
            let mean = s.store.get(self.running_mean).data().to_vec();
            let var = s.store.get(self.running_var).data().to_vec();
            s.graph.batch_norm_eval(x, &mean, &var, gamma, beta, eps)
        }
    }

    pub fn profile(&self, shape: Chw, p: &mut Profile) -> Chw {
        assert_eq!(shape[0], self.channels);
        if self.affine.is_some() {
            p.params += 2 * self.channels as u64;
        }
        shape
    }
}

pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), vec![outputs, inputs], inputs, rng),
            bias: store.add_uniform(format!("{name}.bias"), vec![outputs], inputs, rng),
            inputs,
            outputs,
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.graph.linear(x, w, Some(b))
    }

    pub fn profile(&self, p: &mut Profile) {
        p.params += (self.inputs * self.outputs + self.outputs) as u64;
        p.madds += (self.inputs * self.outputs) as u64;
    }
}

/// `ReLU -> conv -> BN`, used to align cell inputs.
pub struct ReluConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                cin,
                cout,
                k,
                ConvSpec::new(stride, pad, 1, 1),
                false,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, affine),
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let r = s.graph.relu(x);
        let y = self.conv.forward(s, r);
        self.bn.forward(s, y)
    }

    pub fn profile(&self, shape: Chw, p: &mut Profile) -> Chw {
        let shape = self.conv.profile(shape, p);
        self.bn.profile(shape, p)
    }
}

/// Halves spatial size with two 1x1 stride-2 convolutions on pixel grids
/// offset by one, concatenated along channels.
pub struct FactorizedReduce {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
    pub bn: BatchNorm2d,
}

impl FactorizedReduce {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        cin: usize,
        cout: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            cout.is_multiple_of(2),
            "factorized reduce needs an even output width, got {cout}"
        );
        let spec = ConvSpec::new(2, 0, 1, 1);
        Self {
            conv_a: Conv2d::new(store, &format!("{name}.conv_a"), cin, cout / 2, 1, spec, false, rng),
            conv_b: Conv2d::new(store, &format!("{name}.conv_b"), cin, cout / 2, 1, spec, false, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout, affine),
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let r = s.graph.relu(x);
        let a = self.conv_a.forward(s, r);
        let shifted = s.graph.shift_crop(r);
        let b = self.conv_b.forward(s, shifted);
        let cat = s.graph.concat_channels(&[a, b]);
        self.bn.forward(s, cat)
    }

    pub fn profile(&self, shape: Chw, p: &mut Profile) -> Chw {
        let a = self.conv_a.profile(shape, p);
        let b = self.conv_b.profile(shape, p);
        self.bn.profile([a[0] + b[0], a[1], a[2]], p)
    }
}

/// `(ReLU -> depthwise -> pointwise -> BN)` repeated `stages` times.
pub struct SepConv {
    pub stages: Vec<(Conv2d, Conv2d, BatchNorm2d)>,
}

impl SepConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        stages: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let pad = dilation * (k - 1) / 2;
        let stages = (0..stages)
            .map(|i| {
                let st = if i == 0 { stride } else { 1 };
                (
                    Conv2d::new(
                        store,
                        &format!("{name}.{i}.dw"),
                        c,
                        c,
                        k,
                        ConvSpec::new(st, pad, dilation, c),
                        false,
                        rng,
                    ),
                    Conv2d::new(
                        store,
                        &format!("{name}.{i}.pw"),
                        c,
                        c,
                        1,
                        ConvSpec::new(1, 0, 1, 1),
                        false,
                        rng,
                    ),
                    BatchNorm2d::new(store, &format!("{name}.{i}.bn"), c, affine),
                )
            })
            .collect();
        Self { stages }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, mut x: Var) -> Var {
        for (dw, pw, bn) in &self.stages {
            let r = s.graph.relu(x);
            let d = dw.forward(s, r);
            let p = pw.forward(s, d);
            x = bn.forward(s, p);
        }
        x
    }

    pub fn profile(&self, mut shape: Chw, p: &mut Profile) -> Chw {
        for (dw, pw, bn) in &self.stages {
            shape = dw.profile(shape, p);
            shape = pw.profile(shape, p);
            shape = bn.profile(shape, p);
        }
        shape
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

pub enum OpBody {
    Identity,
    Zero,
    Reduce(FactorizedReduce),
    Sep(SepConv),
    Pool { kind: PoolKind, bn: Option<BatchNorm2d> },
}

/// One candidate operation on one edge, with its own weights.
pub struct OpInstance {
    pub kind: OpKind,
    pub stride: usize,
    pub channels: usize,
    pub body: OpBody,
}

/// How operations are assembled: search networks run BN without affine
/// parameters and follow pools with BN; evaluation networks use affine BN
/// and bare pools.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpStyle {
    pub affine: bool,
    pub pool_bn: bool,
}

impl OpStyle {
    pub const SEARCH: OpStyle = OpStyle {
        affine: false,
        pool_bn: true,
    };
    pub const EVAL: OpStyle = OpStyle {
        affine: true,
        pool_bn: false,
    };
}

impl OpInstance {
    pub fn new<F: Real>(
        kind: OpKind,
        channels: usize,
        stride: usize,
        style: OpStyle,
        store: &mut ParamStore<F>,
        name: &str,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2, got {stride}");
        let c = channels;
        let body = match kind {
            OpKind::Identity if stride == 1 => OpBody::Identity,
            OpKind::Identity => OpBody::Reduce(FactorizedReduce::new(store, name, c, c, style.affine, rng)),
            OpKind::Zero => OpBody::Zero,
            OpKind::SepConv3x3 => OpBody::Sep(SepConv::new(store, name, c, 3, stride, 1, 2, style.affine, rng)),
            OpKind::SepConv5x5 => OpBody::Sep(SepConv::new(store, name, c, 5, stride, 1, 2, style.affine, rng)),
            OpKind::DilSepConv3x3 => OpBody::Sep(SepConv::new(store, name, c, 3, stride, 2, 1, style.affine, rng)),
            OpKind::DilSepConv5x5 => OpBody::Sep(SepConv::new(store, name, c, 5, stride, 2, 1, style.affine, rng)),
            OpKind::AvgPool3x3 | OpKind::MaxPool3x3 => OpBody::Pool {
                kind: if kind == OpKind::AvgPool3x3 {
                    PoolKind::Avg
                } else {
                    PoolKind::Max
                },
                bn: style
                    .pool_bn
                    .then(|| BatchNorm2d::new(store, &format!("{name}.bn"), c, false)),
            },
        };
        Self {
            kind,
            stride,
            channels,
            body,
        }
    }

    fn check_input(&self, shape: &[usize]) {
        assert!(
            shape.len() == 4 && shape[1] == self.channels,
            "contract violation: {} expects {} channels, input shape {shape:?}",
            self.kind,
            self.channels
        );
        assert!(
            shape[2].is_multiple_of(self.stride) && shape[3].is_multiple_of(self.stride),
            "contract violation: spatial size {}x{} not divisible by stride {}",
            shape[2],
            shape[3],
            self.stride
        );
    }

    /// Maps `[N, C, H, W]` to `[N, C, H / stride, W / stride]`.
    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let shape = s.graph.shape(x).to_vec();
        self.check_input(&shape);
        match &self.body {
            OpBody::Identity => x,
            OpBody::Zero => s
                .graph
                .zeros(vec![shape[0], shape[1], shape[2] / self.stride, shape[3] / self.stride]),
            OpBody::Reduce(fr) => fr.forward(s, x),
            OpBody::Sep(sc) => sc.forward(s, x),
            OpBody::Pool { kind, bn } => {
                let y = match kind {
                    PoolKind::Avg => s.graph.avg_pool(x, 3, self.stride, 1),
                    PoolKind::Max => s.graph.max_pool(x, 3, self.stride, 1),
                };
                match bn {
                    Some(bn) => bn.forward(s, y),
                    None => y,
                }
            }
        }
    }

    pub fn profile(&self, shape: Chw, p: &mut Profile) -> Chw {
        match &self.body {
            OpBody::Identity => shape,
            OpBody::Zero => [shape[0], shape[1] / self.stride, shape[2] / self.stride],
            OpBody::Reduce(fr) => fr.profile(shape, p),
            OpBody::Sep(sc) => sc.profile(shape, p),
            OpBody::Pool { bn, .. } => {
                let out = [shape[0], shape[1] / self.stride, shape[2] / self.stride];
                match bn {
                    Some(bn) => bn.profile(out, p),
                    None => out,
                }
            }
        }
    }

    pub fn num_params(&self) -> u64 {
        let mut p = Profile::default();
        // spatial size is irrelevant for parameter counts
        self.profile([self.channels, 4, 4], &mut p);
        p.params
    }
}

/// Global average pool, linear layer and softmax cross-entropy.
pub struct ClassifierHead {
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, channels: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, "classifier", channels, classes, rng),
        }
    }

    pub fn logits<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let pooled = s.graph.global_avg_pool(x);
        self.linear.forward(s, pooled)
    }

    /// Returns the mean loss variable and the batch accuracy.
    pub fn loss<F: Real>(&self, s: &mut Session<F>, x: Var, labels: &[usize]) -> (Var, f64) {
        let logits = self.logits(s, x);
        let acc = accuracy(s.graph.value(logits), self.linear.outputs, labels);
        (s.graph.softmax_cross_entropy(logits, labels), acc)
    }
}

/// Fraction of rows whose argmax (first maximum) equals the label.
pub fn accuracy<F: Real>(logits: &[F], classes: usize, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &label)| {
            let row = &logits[r * classes..(r + 1) * classes];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn names_round_trip_in_canonical_order() {
        for (i, k) in OpKind::ALL.into_iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert!("conv_7x7".parse::<OpKind>().is_err());
    }

    #[test]
    fn zero_op_outputs_zero_and_blocks_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let op = OpInstance::new(OpKind::Zero, 4, 1, OpStyle::SEARCH, &mut store, "z", &mut rng);
        let x = rand_tensor(vec![2, 4, 8, 8], &mut rng);
        let mut s = Session::new(&mut store, true);
        let xv = s.graph.leaf(x.shape().to_vec(), x.data().to_vec(), true);
        let y = op.forward(&mut s, xv);
        assert_eq!(s.graph.shape(y), &[2, 4, 8, 8]);
        assert!(s.graph.value(y).iter().all(|&v| v == 0.0));
        let l = s.graph.sum(y);
        s.graph.backward(l);
        assert!(s.graph.grad(xv).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let op = OpInstance::new(OpKind::Identity, 4, 1, OpStyle::SEARCH, &mut store, "id", &mut rng);
        let x = rand_tensor(vec![2, 4, 8, 8], &mut rng).cast::<f32>();
        let mut s = Session::new(&mut store, true);
        let xv = s.input(&x);
        let y = op.forward(&mut s, xv);
        assert_eq!(s.graph.value(y), x.data());
    }

    #[test]
    fn parameter_free_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        for kind in [OpKind::Identity, OpKind::Zero, OpKind::AvgPool3x3, OpKind::MaxPool3x3] {
            let op = OpInstance::new(kind, 8, 1, OpStyle::SEARCH, &mut store, "p", &mut rng);
            assert_eq!(op.num_params(), 0, "{kind}");
        }
        assert_eq!(store.numel(Group::Weight), 0);
    }

    #[test]
    fn batch_norm_training_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3, false);
        let mut x = rand_tensor(vec![4, 3, 5, 5], &mut rng);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 0.7);
        let mut s = Session::new(&mut store, true);
        let xv = s.input(&x);
        let y = bn.forward(&mut s, xv);
        let yv = s.graph.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| yv[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn batch_norm_constant_channel_is_zero() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2, false);
        let x = Tensor::full(vec![2, 2, 3, 3], 4.25);
        let mut s = Session::new(&mut store, true);
        let xv = s.input(&x);
        let y = bn.forward(&mut s, xv);
        assert!(s.graph.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_inference_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2, false);
        store.replace_data(bn.running_mean, vec![0.5, -1.0]);
        store.replace_data(bn.running_var, vec![4.0, 0.25]);
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, -4.0]);
        let mut s = Session::new(&mut store, false);
        let xv = s.input(&x);
        let y = bn.forward(&mut s, xv);
        let expect = [
            (1.0 - 0.5) / (4.0f64 + 1e-5).sqrt(),
            (2.0 - 0.5) / (4.0f64 + 1e-5).sqrt(),
            (3.0 + 1.0) / (0.25f64 + 1e-5).sqrt(),
            (-4.0 + 1.0) / (0.25f64 + 1e-5).sqrt(),
        ];
        for (a, b) in s.graph.value(y).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn classifier_uniform_logits_give_ln_classes() {
        let mut g = crate::graph::Graph::<f64>::new();
        let z = g.leaf(vec![10, 10], vec![0.0; 100], false);
        let labels: Vec<usize> = (0..10).collect();
        let l = g.softmax_cross_entropy(z, &labels);
        assert!((g.value(l)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_give_full_accuracy() {
        let labels = [3usize, 0, 2, 1];
        let mut logits = vec![0.0f64; 16];
        for (r, &l) in labels.iter().enumerate() {
            logits[r * 4 + l] = 100.0;
        }
        assert_eq!(accuracy(&logits, 4, &labels), 1.0);
        let mut g = crate::graph::Graph::<f64>::new();
        let z = g.leaf(vec![4, 4], logits, false);
        let l = g.softmax_cross_entropy(z, &labels);
        assert!(g.value(l)[0] < 1e-30);
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels = [4usize, 0, 2];
        let mut expect = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            let row = &logits[r * 5..r * 5 + 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[l].exp() / z).ln();
        }
        expect /= 3.0;
        let mut g = crate::graph::Graph::<f64>::new();
        let z = g.leaf(vec![3, 5], logits, false);
        let l = g.softmax_cross_entropy(z, &labels);
        assert!((g.value(l)[0] - expect).abs() < 1e-12);
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let op = OpInstance::new(OpKind::MaxPool3x3, 4, 1, OpStyle::SEARCH, &mut store, "m", &mut rng);
        let mut s = Session::new(&mut store, true);
        let x = s.graph.zeros(vec![1, 3, 4, 4]);
        op.forward(&mut s, x);
    }

    #[test]
    #[should_panic(expected = "not divisible by stride")]
    fn odd_spatial_size_rejected_at_stride_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let op = OpInstance::new(OpKind::AvgPool3x3, 2, 2, OpStyle::SEARCH, &mut store, "a", &mut rng);
        let mut s = Session::new(&mut store, true);
        let x = s.graph.zeros(vec![1, 2, 5, 5]);
        op.forward(&mut s, x);
    }
}
