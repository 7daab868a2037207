//! Discrete cell architectures: decoding from the indicator table, the JSON
//! genotype file, and Graphviz export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::IndicatorTable;
use crate::ops::OpKind;
use crate::space::{CellTopology, CellType, INPUT_NODES, INTERMEDIATE_NODES};

pub const GENOTYPE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeInput {
    pub from: usize,
    pub op: OpKind,
}

/// Two inputs per intermediate node, listed in ascending predecessor order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellGenotype {
    pub nodes: Vec<[NodeInput; 2]>,
}

impl CellGenotype {
    pub fn validate(&self, which: &str) -> Result<()> {
        if self.nodes.len() != INTERMEDIATE_NODES {
            return Err(Error::Genotype(format!(
                "{which} cell lists {} nodes, expected {INTERMEDIATE_NODES}",
                self.nodes.len()
            )));
        }
        for (j, pair) in self.nodes.iter().enumerate() {
            let node = j + INPUT_NODES;
            for input in pair {
                if input.from >= node {
                    return Err(Error::Genotype(format!(
                        "{which} node {node} takes input from node {}, which does not precede it",
                        input.from
                    )));
                }
                if input.op == OpKind::Zero {
                    return Err(Error::Genotype(format!("{which} node {node} uses the zero op")));
                }
            }
            if pair[0].from == pair[1].from {
                return Err(Error::Genotype(format!(
                    "{which} node {node} repeats predecessor {}",
                    pair[0].from
                )));
            }
        }
        Ok(())
    }

    pub fn inputs(&self) -> impl Iterator<Item = (usize, NodeInput)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(j, pair)| pair.iter().map(move |&i| (j + INPUT_NODES, i)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Genotype {
    pub normal: CellGenotype,
    pub reduce: CellGenotype,
}

#[derive(Serialize, Deserialize)]
struct GenotypeFile {
    version: u32,
    normal: CellGenotype,
    reduce: CellGenotype,
}

impl Genotype {
    pub fn cell(&self, t: CellType) -> &CellGenotype {
        match t {
            CellType::Normal => &self.normal,
            CellType::Reduce => &self.reduce,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.normal.validate("normal")?;
        self.reduce.validate("reduce")
    }

    pub fn to_json(&self) -> String {
        let file = GenotypeFile {
            version: GENOTYPE_VERSION,
            normal: self.normal.clone(),
            reduce: self.reduce.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GenotypeFile = serde_json::from_str(text).map_err(|e| Error::Format {
            what: "genotype file",
            reason: e.to_string(),
        })?;
        if file.version != GENOTYPE_VERSION {
            return Err(Error::Format {
                what: "genotype file",
                reason: format!("unsupported version {}", file.version),
            });
        }
        let g = Genotype {
            normal: file.normal,
            reduce: file.reduce,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Graphviz digraph with one cluster per cell type. Output depends only
    /// on the genotype.
    pub fn to_dot(&self) -> String {
        let mut out = String::new();
        out.push_str("digraph genotype {\n  rankdir=LR;\n  node [style=filled, shape=rect];\n");
        for t in CellType::BOTH {
            let p = t.name();
            let cell = self.cell(t);
            let name = |n: usize| match n {
                0 => format!("{p}_c_k_2"),
                1 => format!("{p}_c_k_1"),
                n => format!("{p}_n{}", n - INPUT_NODES),
            };
            let _ = writeln!(out, "  subgraph cluster_{p} {{");
            let _ = writeln!(out, "    label=\"{p} cell\";");
            let _ = writeln!(out, "    {p}_anchor [shape=point, label=\"\"];");
            let _ = writeln!(out, "    {} [label=\"c_{{k-2}}\", fillcolor=darkseagreen2];", name(0));
            let _ = writeln!(out, "    {} [label=\"c_{{k-1}}\", fillcolor=darkseagreen2];", name(1));
            for j in 0..INTERMEDIATE_NODES {
                let _ = writeln!(
                    out,
                    "    {} [label=\"{j}\", fillcolor=lightblue];",
                    name(j + INPUT_NODES)
                );
            }
            let _ = writeln!(out, "    {p}_c_k [label=\"c_{{k}}\", fillcolor=palegoldenrod];");
            let _ = writeln!(out, "    {p}_anchor -> {} [label=\"input\"];", name(0));
            let _ = writeln!(out, "    {p}_anchor -> {} [label=\"input\"];", name(1));
            for (node, input) in cell.inputs() {
                let _ = writeln!(
                    out,
                    "    {} -> {} [label=\"{}\"];",
                    name(input.from),
                    name(node),
                    input.op
                );
            }
            for j in 0..INTERMEDIATE_NODES {
                let _ = writeln!(out, "    {} -> {p}_c_k [label=\"concat\"];", name(j + INPUT_NODES));
            }
            out.push_str("  }\n");
        }
        out.push_str("}\n");
        out
    }
}

/// Keeps the two strongest incoming edges of every intermediate node, where
/// an edge's strength is the largest indicator value of its active non-zero
/// ops, and labels each kept edge with its best non-zero op. Ties go to the
/// lower predecessor and the lower op index.
pub fn decode_genotype(ops: &[OpKind], indicator: &IndicatorTable) -> Result<Genotype> {
    let decode_cell = |t: CellType| -> Result<CellGenotype> {
        let mut nodes = Vec::with_capacity(INTERMEDIATE_NODES);
        for j in 0..INTERMEDIATE_NODES {
            let node = j + INPUT_NODES;
            let mut candidates: Vec<(usize, f64, OpKind)> = Vec::new();
            for (from, e) in CellTopology::incoming(node).enumerate() {
                let best = indicator
                    .edge(t, e)
                    .iter()
                    .zip(ops)
                    .filter(|(v, &k)| v.is_some() && k != OpKind::Zero)
                    .map(|(v, &k)| (v.unwrap(), k))
                    .fold(None::<(f64, OpKind)>, |acc, (v, k)| match acc {
                        Some((bv, _)) if bv >= v => acc,
                        _ => Some((v, k)),
                    });
                if let Some((strength, op)) = best {
                    candidates.push((from, strength, op));
                }
            }
            if candidates.len() < 2 {
                return Err(Error::Decode(format!(
                    "{} cell node {node} has {} incoming edge(s) with a non-zero op; two are required",
                    t.name(),
                    candidates.len()
                )));
            }
            // stable sort keeps lower predecessors first among equal strengths
            candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite indicator"));
            let mut kept = [candidates[0], candidates[1]];
            kept.sort_by_key(|c| c.0);
            nodes.push(kept.map(|(from, _, op)| NodeInput { from, op }));
        }
        Ok(CellGenotype { nodes })
    };
    let g = Genotype {
        normal: decode_cell(CellType::Normal)?,
        reduce: decode_cell(CellType::Reduce)?,
    };
    g.validate()?;
    Ok(g)
}
