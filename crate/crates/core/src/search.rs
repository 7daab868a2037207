//! The search loop: weight-only warmup, alternating weight and architecture
//! steps on sampled sub-graphs, temperature annealing and gradual pruning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{contract, Error, Result};
use crate::genotype::{decode_genotype, Genotype};
use crate::importance::{ImportanceState, IndicatorTable};
use crate::metrics::{MetricsRow, Phase, PruneEvent, SnapshotRow, SnapshotStage};
use crate::ops::{accuracy, OpKind};
use crate::optim::{cosine_lr, Adam, Sgd};
use crate::params::Session;
use crate::space::{ArchParams, CellType, Mixing, Supernet, SupernetConfig, NUM_EDGES};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub prune_interval: usize,
    pub lambda: f64,
    pub t0: f64,
    pub t_floor: f64,
    pub cells: usize,
    pub init_channels: usize,
    pub batch_size: usize,
    /// Caps the iterations per epoch; 0 uses every full batch.
    pub batches_per_epoch: usize,
    pub ops: Vec<OpKind>,
    pub w_lr_max: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub arch_weight_decay: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            epochs: 160,
            warmup_epochs: 20,
            prune_interval: 20,
            lambda: 0.5,
            t0: 5.0,
            t_floor: 0.01,
            cells: 8,
            init_channels: 16,
            batch_size: 64,
            batches_per_epoch: 0,
            ops: OpKind::ALL.to_vec(),
            w_lr_max: 0.025,
            w_lr_min: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            arch_lr: 3e-4,
            arch_beta1: 0.5,
            arch_beta2: 0.999,
            arch_weight_decay: 1e-3,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Epochs after which pruning happens: past warmup and a multiple of
    /// the prune interval.
    pub fn prune_epochs(&self) -> Vec<usize> {
        let k = self.prune_interval.max(1);
        (self.warmup_epochs + 1..=self.epochs).filter(|e| e % k == 0).collect()
    }

    pub fn is_prune_epoch(&self, epoch: usize) -> bool {
        epoch > self.warmup_epochs && self.prune_interval > 0 && epoch.is_multiple_of(self.prune_interval)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.epochs < self.warmup_epochs {
            return bad(format!(
                "epochs ({}) must be positive and at least warmup_epochs ({})",
                self.epochs, self.warmup_epochs
            ));
        }
        if self.prune_interval == 0 {
            return bad("prune_interval must be at least 1".into());
        }
        if !(self.t_floor > 0.0 && self.t0 > self.t_floor) {
            return bad(format!(
                "need t0 > t_floor > 0, got t0 = {}, t_floor = {}",
                self.t0, self.t_floor
            ));
        }
        if !self.lambda.is_finite() {
            return bad("lambda must be finite".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch statistics".into());
        }
        let positive = [("w_lr_max", self.w_lr_max), ("arch_lr", self.arch_lr)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        let nonneg = [
            ("w_lr_min", self.w_lr_min),
            ("w_momentum", self.w_momentum),
            ("w_weight_decay", self.w_weight_decay),
            ("arch_weight_decay", self.arch_weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        for (name, v) in [("arch_beta1", self.arch_beta1), ("arch_beta2", self.arch_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        self.supernet(1, 2).validate()?;
        let events = self.prune_epochs().len();
        if events + 1 < self.ops.len() {
            return bad(format!(
                "{} ops need {} prune events but epochs {}..={} with interval {} give only {events}",
                self.ops.len(),
                self.ops.len() - 1,
                self.warmup_epochs + 1,
                self.epochs,
                self.prune_interval
            ));
        }
        Ok(())
    }

    pub fn supernet(&self, in_channels: usize, classes: usize) -> SupernetConfig {
        SupernetConfig {
            cells: self.cells,
            init_channels: self.init_channels,
            in_channels,
            classes,
            ops: self.ops.clone(),
        }
    }

    /// `t0 * (t_floor / t0)^(epoch / epochs)`, never below `t_floor`.
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        let frac = epoch as f64 / self.epochs as f64;
        (self.t0 * (self.t_floor / self.t0).powf(frac)).max(self.t_floor)
    }
}

/// Training data split into the weight half and the architecture half.
#[derive(Clone, Debug)]
pub struct SearchData {
    pub train: Dataset,
    pub val: Dataset,
}

impl SearchData {
    pub fn from_halves(all: &Dataset) -> Self {
        let (train, val) = all.split_halves();
        Self { train, val }
    }
}

/// Masks the lowest-indicator op of every edge with more than one active op.
/// Ties go to the lower op index. Returns `(cell type, edge, column)` for
/// each masked op.
pub fn prune_step(arch: &mut ArchParams, indicator: &IndicatorTable) -> Result<Vec<(CellType, usize, usize)>> {
    let mut pruned = Vec::new();
    for t in CellType::BOTH {
        for e in 0..NUM_EDGES {
            if arch.active_count(t, e) < 2 {
                continue;
            }
            let row = indicator.edge(t, e);
            let mut worst: Option<(usize, f64)> = None;
            for (col, &active) in arch.mask(t, e).iter().enumerate() {
                if !active {
                    continue;
                }
                let v = row[col].ok_or_else(|| contract(format!("no indicator for active op {col} on edge {e}")))?;
                if worst.is_none_or(|(_, w)| v < w) {
                    worst = Some((col, v));
                }
            }
            let (col, _) = worst.expect("edge has active ops");
            arch.deactivate(t, e, col)?;
            pruned.push((t, e, col));
        }
    }
    Ok(pruned)
}

/// Per-epoch generator: a fixed function of the seed and the epoch, so a
/// resumed run draws exactly what an uninterrupted one would.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub indicator: IndicatorTable,
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<SnapshotRow>,
    pub prune_log: Vec<PruneEvent>,
}

pub struct Searcher {
    pub config: SearchConfig,
    pub net: Supernet<f32>,
    pub importance: ImportanceState,
    pub w_opt: Sgd<f32>,
    pub arch_opt: Adam<f32>,
    /// Number of completed epochs.
    pub epoch: usize,
    pub metrics: Vec<MetricsRow>,
    pub snapshots: Vec<SnapshotRow>,
    pub prune_log: Vec<PruneEvent>,
}

impl Searcher {
    pub fn new(config: SearchConfig, in_channels: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        // the weight initialiser owns stream 0; epochs use streams 1..
        let mut init = epoch_rng(config.seed, 0);
        let net = Supernet::new(config.supernet(in_channels, classes), &mut init)?;
        Ok(Self {
            importance: ImportanceState::new(config.ops.len(), config.lambda),
            w_opt: Sgd::new(config.w_momentum, config.w_weight_decay),
            arch_opt: Adam::new(
                config.arch_lr,
                config.arch_beta1,
                config.arch_beta2,
                config.arch_weight_decay,
            ),
            config,
            net,
            epoch: 0,
            metrics: Vec::new(),
            snapshots: Vec::new(),
            prune_log: Vec::new(),
        })
    }

    pub fn for_data(config: SearchConfig, data: &SearchData) -> Result<Self> {
        check_data(data)?;
        Self::new(config, data.train.shape[0], data.train.classes)
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn indicator_table(&self) -> IndicatorTable {
        let arch = &self.net.arch;
        IndicatorTable {
            values: CellType::BOTH.map(|t| {
                (0..NUM_EDGES)
                    .map(|e| {
                        let beta = arch.beta(&self.net.store, t, e);
                        self.importance.compute_indicator(t, e, &beta, arch.mask(t, e))
                    })
                    .collect()
            }),
        }
    }

    fn snapshot(&self, epoch: usize, stage: SnapshotStage) -> Vec<SnapshotRow> {
        let arch = &self.net.arch;
        let mut rows = Vec::new();
        for t in CellType::BOTH {
            for e in 0..NUM_EDGES {
                let mask = arch.mask(t, e);
                let alpha = arch.alpha_row(&self.net.store, t, e);
                let beta = arch.beta(&self.net.store, t, e);
                let c_norm = self.importance.compute_ratio(t, e, mask);
                let ind = self.importance.compute_indicator(t, e, &beta, mask);
                for (col, &kind) in arch.ops.iter().enumerate() {
                    if !mask[col] {
                        continue;
                    }
                    rows.push(SnapshotRow {
                        epoch,
                        stage,
                        cell: t.name().into(),
                        edge: e,
                        op: kind.name().into(),
                        alpha: alpha[col],
                        beta: beta[col],
                        train_iters: self.importance.train_iters[t.index()][e][col],
                        val_accuracy: self.importance.val_accuracy[t.index()][e][col],
                        c_norm: c_norm[col].expect("active"),
                        indicator: ind[col].expect("active"),
                    });
                }
            }
        }
        rows
    }

    fn active_counts(&self, t: CellType) -> String {
        (0..NUM_EDGES)
            .map(|e| self.net.arch.active_count(t, e).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One weight step on a training batch under a fresh sample.
    fn weight_step(
        &mut self,
        x: &Tensor<f32>,
        y: &[usize],
        temperature: f64,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64)> {
        let draw = self.net.draw(temperature, rng)?;
        let weight_ids = self.net.weight_ids();
        let alpha_ids = self.net.arch_ids();
        let (parts, store) = self.net.parts();
        let (loss, acc) = {
            let mut s = Session::new(store, true).with_grads(true, false);
            let xv = s.input(x);
            let logits = Supernet::forward(
                &mut s,
                &parts,
                xv,
                Mixing::Sampled {
                    draw: &draw,
                    temperature,
                },
            );
            let acc = accuracy(s.graph.value(logits), parts.head.linear.outputs, y);
            let loss = s.graph.softmax_cross_entropy(logits, y);
            let lv = s.graph.value(loss)[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch: self.epoch + 1 });
            }
            s.backward(loss);
            (lv, acc)
        };
        for id in alpha_ids {
            if store.get(id).grad().is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
                return Err(contract("architecture gradient during a weight step"));
            }
        }
        self.w_opt.step(store, &weight_ids, lr)?;
        store.zero_grad();
        for t in CellType::BOTH {
            self.importance
                .record_train_step(t, &draw.chosen(t), &self.net.arch.masks[t.index()])?;
        }
        Ok((loss, acc))
    }

    /// One architecture step on a validation batch under a fresh sample.
    fn arch_step(
        &mut self,
        x: &Tensor<f32>,
        y: &[usize],
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64)> {
        let draw = self.net.draw(temperature, rng)?;
        let alpha_ids = self.net.arch_ids();
        let (parts, store) = self.net.parts();
        let (loss, acc) = {
            let mut s = Session::new(store, true).with_grads(false, true);
            let xv = s.input(x);
            let logits = Supernet::forward(
                &mut s,
                &parts,
                xv,
                Mixing::Sampled {
                    draw: &draw,
                    temperature,
                },
            );
            let acc = accuracy(s.graph.value(logits), parts.head.linear.outputs, y);
            let loss = s.graph.softmax_cross_entropy(logits, y);
            let lv = s.graph.value(loss)[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch: self.epoch + 1 });
            }
            s.backward(loss);
            (lv, acc)
        };
        self.arch_opt.step(store, &alpha_ids)?;
        store.zero_grad();
        for t in CellType::BOTH {
            self.importance
                .record_val_step(t, &draw.chosen(t), acc, &self.net.arch.masks[t.index()])?;
        }
        Ok((loss, acc))
    }

    /// Runs the next epoch, including any pruning that follows it.
    pub fn run_epoch(&mut self, data: &SearchData) -> Result<&MetricsRow> {
        if self.is_finished() {
            return Err(contract("search already finished"));
        }
        let c = &self.config;
        let epoch = self.epoch + 1;
        let warmup = epoch <= c.warmup_epochs;
        let temperature = c.temperature_at(epoch - 1);
        let lr = cosine_lr(epoch - 1, c.epochs, c.w_lr_max, c.w_lr_min)?;
        let mut rng = epoch_rng(c.seed, epoch);
        let mut train_batches = data.train.batches(c.batch_size, Some(&mut rng));
        let mut val_batches = data.val.batches(c.batch_size, Some(&mut rng));
        let mut iters = if warmup {
            train_batches.len()
        } else {
            train_batches.len().min(val_batches.len())
        };
        if c.batches_per_epoch > 0 {
            iters = iters.min(c.batches_per_epoch);
        }
        if iters == 0 {
            return Err(Error::Config(format!(
                "batch_size {} exceeds a dataset half ({} / {} samples)",
                c.batch_size,
                data.train.len(),
                data.val.len()
            )));
        }
        train_batches.truncate(iters);
        val_batches.truncate(iters);

        let (mut tl, mut ta, mut vl, mut va) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..iters {
            let (x, y) = data.train.batch::<f32>(&train_batches[i]);
            let (l, a) = self.weight_step(&x, &y, temperature, lr, &mut rng)?;
            tl += l;
            ta += a;
            if !warmup {
                let (x, y) = data.val.batch::<f32>(&val_batches[i]);
                let (l, a) = self.arch_step(&x, &y, temperature, &mut rng)?;
                vl += l;
                va += a;
            }
        }
        let n = iters as f64;

        let mut pruned = 0;
        let prune = self.config.is_prune_epoch(epoch);
        if prune {
            let snap = self.snapshot(epoch, SnapshotStage::Prune);
            self.snapshots.extend(snap);
            let table = self.indicator_table();
            for (t, e, col) in prune_step(&mut self.net.arch, &table)? {
                self.prune_log.push(PruneEvent {
                    epoch,
                    cell: t.name().into(),
                    edge: e,
                    op: self.net.arch.ops[col].name().into(),
                });
                pruned += 1;
            }
        }
        self.epoch = epoch;
        let row = MetricsRow {
            epoch,
            phase: if warmup { Phase::Warmup } else { Phase::Search },
            lr,
            temperature,
            train_loss: tl / n,
            train_acc: ta / n,
            val_loss: (!warmup).then_some(vl / n),
            val_acc: (!warmup).then_some(va / n),
            active_normal: self.active_counts(CellType::Normal),
            active_reduce: self.active_counts(CellType::Reduce),
            pruned,
            snapshot: prune,
        };
        self.metrics.push(row);
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Runs epochs until `last_epoch` (capped at the configured total),
    /// calling `after_epoch` once each epoch completes.
    pub fn run_until(
        &mut self,
        data: &SearchData,
        last_epoch: usize,
        mut after_epoch: impl FnMut(&Searcher) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < last_epoch.min(self.config.epochs) {
            self.run_epoch(data)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    /// Decodes the current state. Appends the final snapshot once.
    pub fn finish(&mut self) -> Result<SearchOutcome> {
        if !self
            .snapshots
            .last()
            .is_some_and(|r| r.stage == SnapshotStage::Final && r.epoch == self.epoch)
        {
            let snap = self.snapshot(self.epoch, SnapshotStage::Final);
            self.snapshots.extend(snap);
        }
        let indicator = self.indicator_table();
        let genotype = decode_genotype(&self.net.arch.ops, &indicator)?;
        Ok(SearchOutcome {
            genotype,
            indicator,
            metrics: self.metrics.clone(),
            snapshots: self.snapshots.clone(),
            prune_log: self.prune_log.clone(),
        })
    }
}

fn check_data(data: &SearchData) -> Result<()> {
    let (a, b) = (&data.train, &data.val);
    if a.shape != b.shape || a.classes != b.classes {
        return Err(contract("training and validation halves differ in shape"));
    }
    let [_, h, w] = a.shape;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Config(format!(
            "image size {h}x{w} must be divisible by 4 for two reduction cells"
        )));
    }
    Ok(())
}

/// Full search from scratch.
pub fn run_search(config: SearchConfig, data: &SearchData) -> Result<SearchOutcome> {
    let mut s = Searcher::for_data(config, data)?;
    let last = s.config.epochs;
    s.run_until(data, last, |_| Ok(()))?;
    s.finish()
}
