//! Evaluation networks stacked from a genotype: construction, parameter and
//! multiply-add counting, and plain SGD training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::genotype::{CellGenotype, Genotype};
use crate::graph::Var;
use crate::kernels::ConvSpec;
use crate::ops::{
    accuracy, BatchNorm2d, Chw, ClassifierHead, Conv2d, FactorizedReduce, OpInstance, OpStyle, Profile, ReluConvBn,
};
use crate::optim::{cosine_lr, Sgd};
use crate::params::{Group, ParamStore, Session};
use crate::space::{is_reduction, CellType, Preprocess, INPUT_NODES, INTERMEDIATE_NODES, STEM_MULTIPLIER};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemKind {
    /// One 3x3 convolution to `3C` channels at full resolution.
    Cifar,
    /// Three stride-2 3x3 convolutions, for 224-pixel inputs.
    Imagenet,
}

impl StemKind {
    /// The stem normally used for inputs of this side length.
    pub fn for_resolution(resolution: usize) -> Self {
        if resolution > 64 {
            StemKind::Imagenet
        } else {
            StemKind::Cifar
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub cells: usize,
    pub init_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub resolution: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub stem: StemKind,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cells: 20,
            init_channels: 36,
            epochs: 600,
            batch_size: 96,
            lr_max: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            resolution: 32,
            in_channels: 3,
            classes: 10,
            stem: StemKind::Cifar,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("eval config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells < 3 {
            return Err(Error::Config(format!(
                "an evaluation network needs at least 3 cells, got {}",
                self.cells
            )));
        }
        if self.init_channels == 0 || !self.init_channels.is_multiple_of(2) {
            return Err(Error::Config("init_channels must be positive and even".into()));
        }
        if self.in_channels == 0 || self.classes < 2 || self.batch_size == 0 {
            return Err(Error::Config(format!("degenerate evaluation config {self:?}")));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "learning rates {} -> {}",
                self.lr_max, self.lr_min
            )));
        }
        let shrink = match self.stem {
            StemKind::Cifar => 4,
            StemKind::Imagenet => 32,
        };
        if self.resolution == 0 || !self.resolution.is_multiple_of(shrink) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by the network's total stride {shrink}",
                self.resolution
            )));
        }
        Ok(())
    }
}

#[allow(clippy::large_enum_variant)]
enum Stem {
    Cifar(Conv2d, BatchNorm2d),
    Imagenet {
        conv_a: Conv2d,
        bn_a: BatchNorm2d,
        conv_b: Conv2d,
        bn_b: BatchNorm2d,
        conv_c: Conv2d,
        bn_c: BatchNorm2d,
    },
}

impl Stem {
    fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> (Var, Var) {
        match self {
            Stem::Cifar(conv, bn) => {
                let y = conv.forward(s, x);
                let y = bn.forward(s, y);
                (y, y)
            }
            Stem::Imagenet {
                conv_a,
                bn_a,
                conv_b,
                bn_b,
                conv_c,
                bn_c,
            } => {
                let y = conv_a.forward(s, x);
                let y = bn_a.forward(s, y);
                let y = s.graph.relu(y);
                let y = conv_b.forward(s, y);
                let s0 = bn_b.forward(s, y);
                let y = s.graph.relu(s0);
                let y = conv_c.forward(s, y);
                let s1 = bn_c.forward(s, y);
                (s0, s1)
            }
        }
    }

    fn profile(&self, shape: Chw, p: &mut Profile) -> (Chw, Chw) {
        match self {
            Stem::Cifar(conv, bn) => {
                let y = conv.profile(shape, p);
                let y = bn.profile(y, p);
                (y, y)
            }
            Stem::Imagenet {
                conv_a,
                bn_a,
                conv_b,
                bn_b,
                conv_c,
                bn_c,
            } => {
                let y = bn_a.profile(conv_a.profile(shape, p), p);
                let s0 = bn_b.profile(conv_b.profile(y, p), p);
                let s1 = bn_c.profile(conv_c.profile(s0, p), p);
                (s0, s1)
            }
        }
    }
}

/// A cell with exactly the edges and ops named by a genotype.
pub struct EvalCell {
    pub cell_type: CellType,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    /// `(intermediate node, predecessor, op)`, two per node.
    pub edges: Vec<(usize, usize, OpInstance)>,
}

impl EvalCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        genotype: &CellGenotype,
        c_prev_prev: usize,
        c_prev: usize,
        c: usize,
        reduction: bool,
        reduction_prev: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let style = OpStyle::EVAL;
        let pre0 = if reduction_prev {
            Preprocess::Reduce(FactorizedReduce::new(
                store,
                &format!("{name}.pre0"),
                c_prev_prev,
                c,
                style.affine,
                rng,
            ))
        } else {
            Preprocess::Conv(ReluConvBn::new(
                store,
                &format!("{name}.pre0"),
                c_prev_prev,
                c,
                1,
                1,
                0,
                style.affine,
                rng,
            ))
        };
        let pre1 = Preprocess::Conv(ReluConvBn::new(
            store,
            &format!("{name}.pre1"),
            c_prev,
            c,
            1,
            1,
            0,
            style.affine,
            rng,
        ));
        let edges = genotype
            .inputs()
            .map(|(node, input)| {
                let stride = if reduction && input.from < INPUT_NODES { 2 } else { 1 };
                let op_name = format!("{name}.n{node}.from{}.{}", input.from, input.op.name());
                (
                    node,
                    input.from,
                    OpInstance::new(input.op, c, stride, style, store, &op_name, rng),
                )
            })
            .collect();
        Self {
            cell_type: if reduction { CellType::Reduce } else { CellType::Normal },
            pre0,
            pre1,
            edges,
        }
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, s0: Var, s1: Var) -> Var {
        let mut states = vec![self.pre0.forward(s, s0), self.pre1.forward(s, s1)];
        for j in 0..INTERMEDIATE_NODES {
            let node = j + INPUT_NODES;
            let terms: Vec<Var> = self
                .edges
                .iter()
                .filter(|(n, _, _)| *n == node)
                .map(|(_, from, op)| op.forward(s, states[*from]))
                .collect();
            let sum = s.graph.add_n(&terms);
            states.push(sum);
        }
        s.graph.concat_channels(&states[INPUT_NODES..])
    }

    pub fn profile(&self, s0: Chw, s1: Chw, p: &mut Profile) -> Chw {
        let mut states = vec![self.pre0.profile(s0, p), self.pre1.profile(s1, p)];
        for j in 0..INTERMEDIATE_NODES {
            let node = j + INPUT_NODES;
            let mut out = None;
            for (_, from, op) in self.edges.iter().filter(|(n, _, _)| *n == node) {
                out = Some(op.profile(states[*from], p));
            }
            states.push(out.expect("every node has inputs"));
        }
        let [_, h, w] = states[INPUT_NODES];
        [states[INPUT_NODES..].iter().map(|s| s[0]).sum(), h, w]
    }
}

/// Stem, genotype cells with channel doubling at the two reduction
/// positions, global average pooling and a linear classifier.
pub struct EvalNetwork<F: Real> {
    pub config: EvalConfig,
    pub store: ParamStore<F>,
    stem: Stem,
    pub cells: Vec<EvalCell>,
    pub head: ClassifierHead,
}

impl<F: Real> EvalNetwork<F> {
    pub fn new(genotype: &Genotype, config: EvalConfig, rng: &mut impl Rng) -> Result<Self> {
        genotype.validate()?;
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config.init_channels;
        let (stem, mut c_pp, mut c_p, mut reduction_prev) = match config.stem {
            StemKind::Cifar => {
                let c_stem = STEM_MULTIPLIER * c;
                let conv = Conv2d::new(
                    &mut store,
                    "stem.conv",
                    config.in_channels,
                    c_stem,
                    3,
                    ConvSpec::new(1, 1, 1, 1),
                    false,
                    rng,
                );
                let bn = BatchNorm2d::new(&mut store, "stem.bn", c_stem, true);
                (Stem::Cifar(conv, bn), c_stem, c_stem, false)
            }
            StemKind::Imagenet => {
                let s2 = ConvSpec::new(2, 1, 1, 1);
                let stem = Stem::Imagenet {
                    conv_a: Conv2d::new(&mut store, "stem.conv_a", config.in_channels, c / 2, 3, s2, false, rng),
                    bn_a: BatchNorm2d::new(&mut store, "stem.bn_a", c / 2, true),
                    conv_b: Conv2d::new(&mut store, "stem.conv_b", c / 2, c, 3, s2, false, rng),
                    bn_b: BatchNorm2d::new(&mut store, "stem.bn_b", c, true),
                    conv_c: Conv2d::new(&mut store, "stem.conv_c", c, c, 3, s2, false, rng),
                    bn_c: BatchNorm2d::new(&mut store, "stem.bn_c", c, true),
                };
                (stem, c, c, true)
            }
        };
        let mut c_cur = c;
        let mut cells = Vec::with_capacity(config.cells);
        for i in 0..config.cells {
            let reduction = is_reduction(i, config.cells);
            if reduction {
                c_cur *= 2;
            }
            let cell_genotype = genotype.cell(if reduction { CellType::Reduce } else { CellType::Normal });
            cells.push(EvalCell::new(
                &mut store,
                &format!("cell{i}"),
                cell_genotype,
                c_pp,
                c_p,
                c_cur,
                reduction,
                reduction_prev,
                rng,
            ));
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = INTERMEDIATE_NODES * c_cur;
        }
        let head = ClassifierHead::new(&mut store, c_p, config.classes, rng);
        Ok(Self {
            config,
            store,
            stem,
            cells,
            head,
        })
    }

    pub fn forward(&mut self, training: bool, x: &Tensor<F>) -> (Session<'_, F>, Var) {
        let Self {
            store,
            stem,
            cells,
            head,
            ..
        } = self;
        let mut s = Session::new(store, training);
        let xv = s.input(x);
        let (mut s0, mut s1) = stem.forward(&mut s, xv);
        for cell in cells.iter() {
            let out = cell.forward(&mut s, s0, s1);
            s0 = s1;
            s1 = out;
        }
        let logits = head.logits(&mut s, s1);
        (s, logits)
    }

    /// Closed-form parameter and multiply-add totals for one image at the
    /// configured resolution.
    pub fn profile(&self) -> Profile {
        let mut p = Profile::default();
        let r = self.config.resolution;
        let (mut s0, mut s1) = self.stem.profile([self.config.in_channels, r, r], &mut p);
        for cell in &self.cells {
            let out = cell.profile(s0, s1, &mut p);
            s0 = s1;
            s1 = out;
        }
        self.head.linear.profile(&mut p);
        p
    }

    pub fn count_params(&self) -> u64 {
        self.profile().params
    }

    pub fn count_madds(&self) -> u64 {
        self.profile().madds
    }

    /// Number of learnable scalars held in the parameter store.
    pub fn stored_params(&self) -> usize {
        self.store.numel(Group::Weight)
    }
}

/// Builds the network once and returns its closed-form parameter count.
pub fn count_params(genotype: &Genotype, config: &EvalConfig) -> Result<u64> {
    Ok(profile(genotype, config)?.params)
}

pub fn count_madds(genotype: &Genotype, config: &EvalConfig) -> Result<u64> {
    Ok(profile(genotype, config)?.madds)
}

fn profile(genotype: &Genotype, config: &EvalConfig) -> Result<Profile> {
    let net = EvalNetwork::<f32>::new(genotype, config.clone(), &mut ChaCha8Rng::seed_from_u64(config.seed))?;
    Ok(net.profile())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub test_acc: f64,
    pub params: u64,
    pub history: Vec<EvalEpoch>,
}

/// Accuracy on `data` with running BN statistics.
pub fn evaluate<F: Real>(net: &mut EvalNetwork<F>, data: &Dataset, batch_size: usize) -> f64 {
    let classes = net.config.classes;
    let mut hits = 0.0;
    for idx in data.eval_batches(batch_size) {
        let (x, y) = data.batch::<F>(&idx);
        let (s, logits) = net.forward(false, &x);
        hits += accuracy(s.graph.value(logits), classes, &y) * y.len() as f64;
    }
    if data.is_empty() {
        0.0
    } else {
        hits / data.len() as f64
    }
}

/// Trains with SGD and a cosine schedule, reporting test accuracy after
/// every epoch. A non-finite loss stops training with
/// [`Error::Diverged`]; `on_epoch` has seen every completed epoch by then.
pub fn train_eval_network(
    net: &mut EvalNetwork<f32>,
    train: &Dataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&EvalEpoch),
) -> Result<EvalReport> {
    let c = net.config.clone();
    if train.shape != [c.in_channels, c.resolution, c.resolution] || train.classes != c.classes {
        return Err(Error::Config(format!(
            "dataset shape {:?} with {} classes does not match the network ({} x {r} x {r}, {} classes)",
            train.shape,
            train.classes,
            c.in_channels,
            c.classes,
            r = c.resolution
        )));
    }
    let mut opt = Sgd::<f32>::new(c.momentum, c.weight_decay);
    let ids = net.store.ids(Group::Weight);
    let mut history = Vec::with_capacity(c.epochs);
    for epoch in 1..=c.epochs {
        let lr = cosine_lr(epoch - 1, c.epochs, c.lr_max, c.lr_min)?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(epoch as u64);
        let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0usize);
        for idx in train.batches(c.batch_size, Some(&mut rng)) {
            let (x, y) = train.batch::<f32>(&idx);
            let (mut s, logits) = net.forward(true, &x);
            let acc = accuracy(s.graph.value(logits), c.classes, &y);
            let loss = s.graph.softmax_cross_entropy(logits, &y);
            let lv = s.graph.value(loss)[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            s.backward(loss);
            drop(s);
            opt.step(&mut net.store, &ids, lr)?;
            net.store.zero_grad();
            loss_sum += lv;
            acc_sum += acc;
            n += 1;
        }
        let row = EvalEpoch {
            epoch,
            lr,
            train_loss: loss_sum / n.max(1) as f64,
            train_acc: acc_sum / n.max(1) as f64,
            test_acc: evaluate(net, test, c.batch_size),
        };
        on_epoch(&row);
        history.push(row);
    }
    let test_acc = match history.last() {
        Some(r) => r.test_acc,
        None => evaluate(net, test, c.batch_size),
    };
    Ok(EvalReport {
        test_acc,
        params: net.count_params(),
        history,
    })
}
