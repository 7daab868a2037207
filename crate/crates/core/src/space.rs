//! Cell DAG, architecture parameters, Gumbel-softmax sampling and the
//! weight-sharing supernet.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::graph::Var;
use crate::kernels::ConvSpec;
use crate::ops::{
    BatchNorm2d, ClassifierHead, Conv2d, FactorizedReduce, OpInstance, OpKind, OpStyle, Profile, ReluConvBn,
};
use crate::params::{Group, ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const INPUT_NODES: usize = 2;
pub const INTERMEDIATE_NODES: usize = 4;
pub const NUM_EDGES: usize = 14;
pub const STEM_MULTIPLIER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Normal,
    Reduce,
}

impl CellType {
    pub const BOTH: [CellType; 2] = [CellType::Normal, CellType::Reduce];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduce => "reduce",
        }
    }
}

/// An edge of the cell DAG. Nodes 0 and 1 are the cell inputs, nodes
/// `2..6` the intermediate nodes; `to` is always an intermediate node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

/// The fixed 7-node cell: 2 inputs, 4 intermediate nodes each fed by every
/// earlier node, and an output concatenating the intermediate nodes.
pub struct CellTopology;

impl CellTopology {
    pub fn edges() -> impl Iterator<Item = Edge> {
        (0..INTERMEDIATE_NODES).flat_map(|j| {
            (0..j + INPUT_NODES).map(move |i| Edge {
                from: i,
                to: j + INPUT_NODES,
            })
        })
    }

    /// Index of the edge `from -> node` where `node` is an intermediate node
    /// number (`2..6`).
    pub fn edge_index(from: usize, node: usize) -> usize {
        let j = node - INPUT_NODES;
        assert!(j < INTERMEDIATE_NODES && from < node, "no edge {from} -> {node}");
        // edges into intermediate node j start at 2 + 3 + ... (j terms)
        j * (j + 3) / 2 + from
    }

    /// Edge indices feeding an intermediate node, in predecessor order.
    pub fn incoming(node: usize) -> std::ops::Range<usize> {
        let start = Self::edge_index(0, node);
        start..start + node
    }

    pub fn edge(index: usize) -> Edge {
        Self::edges().nth(index).expect("edge index out of range")
    }
}

/// Reduction cells sit at one and two thirds of the depth.
pub fn reduction_positions(cells: usize) -> [usize; 2] {
    [cells / 3, 2 * cells / 3]
}

pub fn is_reduction(position: usize, cells: usize) -> bool {
    reduction_positions(cells).contains(&position)
}

/// Softmax over the active entries of one edge's logits; inactive entries
/// are exactly zero.
pub fn edge_beta(alpha_row: &[f64], mask_row: &[bool]) -> Result<Vec<f64>> {
    if alpha_row.len() != mask_row.len() {
        return Err(contract(format!(
            "alpha row has {} entries, mask has {}",
            alpha_row.len(),
            mask_row.len()
        )));
    }
    if !mask_row.iter().any(|&m| m) {
        return Err(contract("edge has no active operation"));
    }
    Ok(crate::graph::masked_softmax_values(alpha_row, None, mask_row, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelDraw {
    /// Argmax of the perturbed logits among active entries.
    pub index: usize,
    /// `softmax((alpha + noise) / T)` over active entries.
    pub soft: Vec<f64>,
    /// Gumbel(0, 1) noise, one value per entry (inactive ones unused).
    pub noise: Vec<f64>,
}

/// Draws Gumbel noise for every entry and returns the hard choice and the
/// tempered soft weights. The hard choice follows `edge_beta` in
/// distribution for every temperature.
pub fn gumbel_sample(alpha_row: &[f64], mask_row: &[bool], temperature: f64, rng: &mut impl Rng) -> Result<GumbelDraw> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard gumbel");
    let noise: Vec<f64> = (0..alpha_row.len()).map(|_| gumbel.sample(rng)).collect();
    gumbel_with_noise(alpha_row, mask_row, temperature, noise)
}

/// Same as [`gumbel_sample`] with caller-supplied noise.
pub fn gumbel_with_noise(
    alpha_row: &[f64],
    mask_row: &[bool],
    temperature: f64,
    noise: Vec<f64>,
) -> Result<GumbelDraw> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(contract(format!("temperature must be positive, got {temperature}")));
    }
    edge_beta(alpha_row, mask_row)?;
    if noise.len() != alpha_row.len() {
        return Err(contract("noise length differs from alpha row"));
    }
    let soft = crate::graph::masked_softmax_values(alpha_row, Some(&noise), mask_row, 1.0 / temperature);
    let index = crate::graph::argmax_masked(&soft, mask_row);
    Ok(GumbelDraw { index, soft, noise })
}

/// Result of comparing repeated hard draws against `edge_beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleCheck {
    pub expected: Vec<f64>,
    pub empirical: Vec<f64>,
    /// `max |empirical - expected|`
    pub linf: f64,
}

/// Draws `draws` hard samples from one alpha row (all ops active) and
/// reports the observed frequencies next to the softmax probabilities.
pub fn sample_check(alpha_row: &[f64], temperature: f64, draws: usize, rng: &mut impl Rng) -> Result<SampleCheck> {
    if draws == 0 {
        return Err(contract("need at least one draw"));
    }
    let mask = vec![true; alpha_row.len()];
    let expected = edge_beta(alpha_row, &mask)?;
    let mut counts = vec![0usize; alpha_row.len()];
    for _ in 0..draws {
        counts[gumbel_sample(alpha_row, &mask, temperature, rng)?.index] += 1;
    }
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    let linf = expected
        .iter()
        .zip(&empirical)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(SampleCheck {
        expected,
        empirical,
        linf,
    })
}

/// Architecture logits and active-operation masks, one table per cell type.
/// Columns follow `ops`, which is a subset of [`OpKind::ALL`] in canonical
/// order.
#[derive(Clone, Debug)]
pub struct ArchParams {
    pub ops: Vec<OpKind>,
    pub alpha: [ParamId; 2],
    pub masks: [Vec<Vec<bool>>; 2],
}

impl ArchParams {
    fn new<F: Real>(ops: &[OpKind], store: &mut ParamStore<F>) -> Self {
        let alpha = CellType::BOTH.map(|t| {
            store.add(
                format!("alpha.{}", t.name()),
                Group::Arch,
                Tensor::zeros(vec![NUM_EDGES, ops.len()]),
            )
        });
        Self {
            ops: ops.to_vec(),
            alpha,
            masks: [
                vec![vec![true; ops.len()]; NUM_EDGES],
                vec![vec![true; ops.len()]; NUM_EDGES],
            ],
        }
    }

    pub fn alpha_row<F: Real>(&self, store: &ParamStore<F>, t: CellType, edge: usize) -> Vec<f64> {
        let n = self.ops.len();
        store.get(self.alpha[t.index()]).data()[edge * n..(edge + 1) * n]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    }

    pub fn mask(&self, t: CellType, edge: usize) -> &[bool] {
        &self.masks[t.index()][edge]
    }

    pub fn active_count(&self, t: CellType, edge: usize) -> usize {
        self.mask(t, edge).iter().filter(|&&m| m).count()
    }

    pub fn beta<F: Real>(&self, store: &ParamStore<F>, t: CellType, edge: usize) -> Vec<f64> {
        edge_beta(&self.alpha_row(store, t, edge), self.mask(t, edge)).expect("masks keep one active op")
    }

    /// Masks column `col` on an edge. Refuses to remove the last active op.
    pub fn deactivate(&mut self, t: CellType, edge: usize, col: usize) -> Result<()> {
        if self.active_count(t, edge) <= 1 {
            return Err(contract(format!(
                "edge {edge} of {} cell has a single active op",
                t.name()
            )));
        }
        self.masks[t.index()][edge][col] = false;
        Ok(())
    }

    pub fn column(&self, kind: OpKind) -> Option<usize> {
        self.ops.iter().position(|&k| k == kind)
    }
}

/// One hard sample per edge, shared by every cell of a type.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchDraw {
    pub draws: [Vec<GumbelDraw>; 2],
}

impl ArchDraw {
    pub fn chosen(&self, t: CellType) -> Vec<usize> {
        self.draws[t.index()].iter().map(|d| d.index).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Mixing<'a> {
    /// Each edge runs only its sampled op; straight-through gradients reach
    /// alpha.
    Sampled { draw: &'a ArchDraw, temperature: f64 },
    /// Each edge runs the softmax-weighted sum of its active ops.
    Mixed,
}

#[derive(Clone, Copy, Debug)]
pub enum EdgeWeights {
    Sampled { weights: Var, index: usize },
    Mixed { weights: Var },
}

pub enum Preprocess {
    Reduce(FactorizedReduce),
    Conv(ReluConvBn),
}

impl Preprocess {
    pub fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        match self {
            Preprocess::Reduce(r) => r.forward(s, x),
            Preprocess::Conv(c) => c.forward(s, x),
        }
    }

    pub fn profile(&self, shape: [usize; 3], p: &mut Profile) -> [usize; 3] {
        match self {
            Preprocess::Reduce(r) => r.profile(shape, p),
            Preprocess::Conv(c) => c.profile(shape, p),
        }
    }
}

pub struct SearchCell {
    pub cell_type: CellType,
    pub channels: usize,
    pub pre0: Preprocess,
    pub pre1: Preprocess,
    /// `[edge][column]`, one instance per candidate op.
    pub edges: Vec<Vec<OpInstance>>,
}

impl SearchCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        ops: &[OpKind],
        c_prev_prev: usize,
        c_prev: usize,
        c: usize,
        reduction: bool,
        reduction_prev: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let style = OpStyle::SEARCH;
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
        let edges = CellTopology::edges()
            .enumerate()
            .map(|(e, edge)| {
                let stride = if reduction && edge.from < INPUT_NODES { 2 } else { 1 };
                ops.iter()
                    .map(|&k| OpInstance::new(k, c, stride, style, store, &format!("{name}.edge{e}.{}", k.name()), rng))
                    .collect()
            })
            .collect();
        Self {
            cell_type: if reduction { CellType::Reduce } else { CellType::Normal },
            channels: c,
            pre0,
            pre1,
            edges,
        }
    }

    pub fn forward<F: Real>(
        &self,
        s: &mut Session<F>,
        s0: Var,
        s1: Var,
        weights: &[EdgeWeights],
        masks: &[Vec<bool>],
    ) -> Var {
        let mut states = vec![self.pre0.forward(s, s0), self.pre1.forward(s, s1)];
        for j in 0..INTERMEDIATE_NODES {
            let node = j + INPUT_NODES;
            let mut terms = Vec::new();
            for (from, e) in CellTopology::incoming(node).enumerate() {
                let x = states[from];
                match weights[e] {
                    EdgeWeights::Sampled { weights, index } => {
                        let y = self.edges[e][index].forward(s, x);
                        terms.push(s.graph.pick_scale(y, weights, index));
                    }
                    EdgeWeights::Mixed { weights } => {
                        for (col, op) in self.edges[e].iter().enumerate() {
                            if !masks[e][col] {
                                continue;
                            }
                            let y = op.forward(s, x);
                            terms.push(s.graph.pick_scale(y, weights, col));
                        }
                    }
                }
            }
            let sum = s.graph.add_n(&terms);
            states.push(sum);
        }
        s.graph.concat_channels(&states[INPUT_NODES..])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub cells: usize,
    pub init_channels: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub ops: Vec<OpKind>,
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.init_channels == 0 || self.in_channels == 0 || self.classes < 2 {
            return Err(crate::error::Error::Config(format!("degenerate supernet {self:?}")));
        }
        if self.ops.is_empty() {
            return Err(crate::error::Error::Config("empty operation set".into()));
        }
        if self.ops.windows(2).any(|w| w[0] >= w[1]) {
            return Err(crate::error::Error::Config(
                "operation set must list distinct ops in canonical order".into(),
            ));
        }
        if !self.init_channels.is_multiple_of(2) {
            return Err(crate::error::Error::Config("init_channels must be even".into()));
        }
        Ok(())
    }
}

/// Stem convolution, a stack of search cells sharing one set of
/// architecture logits per cell type, and a classifier.
pub struct Supernet<F: Real> {
    pub config: SupernetConfig,
    pub store: ParamStore<F>,
    pub arch: ArchParams,
    pub stem: (Conv2d, BatchNorm2d),
    pub cells: Vec<SearchCell>,
    pub head: ClassifierHead,
}

impl<F: Real> Supernet<F> {
    pub fn new(config: SupernetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let arch = ArchParams::new(&config.ops, &mut store);
        let c = config.init_channels;
        let c_stem = STEM_MULTIPLIER * c;
        let stem = (
            Conv2d::new(
                &mut store,
                "stem.conv",
                config.in_channels,
                c_stem,
                3,
                ConvSpec::new(1, 1, 1, 1),
                false,
                rng,
            ),
            BatchNorm2d::new(&mut store, "stem.bn", c_stem, false),
        );
        let (mut c_pp, mut c_p, mut c_cur) = (c_stem, c_stem, c);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(config.cells);
        for i in 0..config.cells {
            let reduction = is_reduction(i, config.cells);
            if reduction {
                c_cur *= 2;
            }
            cells.push(SearchCell::new(
                &mut store,
                &format!("cell{i}"),
                &config.ops,
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
            arch,
            stem,
            cells,
            head,
        })
    }

    pub fn weight_ids(&self) -> Vec<ParamId> {
        self.store.ids(Group::Weight)
    }

    pub fn arch_ids(&self) -> Vec<ParamId> {
        self.arch.alpha.to_vec()
    }

    /// Fresh Gumbel noise for every edge of both cell types.
    pub fn draw(&self, temperature: f64, rng: &mut impl Rng) -> Result<ArchDraw> {
        let mut draws: [Vec<GumbelDraw>; 2] = [Vec::new(), Vec::new()];
        for t in CellType::BOTH {
            for e in 0..NUM_EDGES {
                let row = self.arch.alpha_row(&self.store, t, e);
                draws[t.index()].push(gumbel_sample(&row, self.arch.mask(t, e), temperature, rng)?);
            }
        }
        Ok(ArchDraw { draws })
    }

    /// Records a forward pass and returns the logits.
    pub fn forward(s: &mut Session<F>, net: &SupernetParts<'_>, x: Var, mixing: Mixing<'_>) -> Var {
        let mut weights: [Vec<EdgeWeights>; 2] = [Vec::new(), Vec::new()];
        for t in CellType::BOTH {
            let alpha = s.param(net.arch.alpha[t.index()]);
            for e in 0..NUM_EDGES {
                let row = s.graph.row(alpha, e);
                let mask = &net.arch.masks[t.index()][e];
                let w = match mixing {
                    Mixing::Sampled { draw, temperature } => {
                        let d = &draw.draws[t.index()][e];
                        assert!(mask[d.index], "contract violation: sampled op is inactive");
                        let noise: Vec<F> = d.noise.iter().map(|&v| F::of(v)).collect();
                        let st = s
                            .graph
                            .straight_through_at(row, &noise, mask, F::of(temperature), d.index);
                        EdgeWeights::Sampled {
                            weights: st.weights,
                            index: d.index,
                        }
                    }
                    Mixing::Mixed => EdgeWeights::Mixed {
                        weights: s.graph.masked_softmax(row, mask, F::one()),
                    },
                };
                weights[t.index()].push(w);
            }
        }
        let stem = net.stem.0.forward(s, x);
        let stem = net.stem.1.forward(s, stem);
        let (mut s0, mut s1) = (stem, stem);
        for cell in net.cells {
            let t = cell.cell_type.index();
            let out = cell.forward(s, s0, s1, &weights[t], &net.arch.masks[t]);
            s0 = s1;
            s1 = out;
        }
        net.head.logits(s, s1)
    }

    /// Splits the network into its immutable structure and its mutable
    /// store so a [`Session`] can borrow the store.
    pub fn parts(&mut self) -> (SupernetParts<'_>, &mut ParamStore<F>) {
        (
            SupernetParts {
                arch: &self.arch,
                stem: &self.stem,
                cells: &self.cells,
                head: &self.head,
            },
            &mut self.store,
        )
    }
}

pub struct SupernetParts<'a> {
    pub arch: &'a ArchParams,
    pub stem: &'a (Conv2d, BatchNorm2d),
    pub cells: &'a [SearchCell],
    pub head: &'a ClassifierHead,
}
