//! Per-operation training and validation counters and the importance
//! indicator built from them.
//!
//! For every cell type, edge and candidate op the state keeps
//! `C_e` (training iterations in which the op was the sampled one) and
//! `C_a` (mean validation batch accuracy over the iterations in which it was
//! sampled). The raw ratio `C_a / C_e` is min-max normalised over an edge's
//! active ops and combined with the architecture weights as
//! `I = beta + lambda * C_norm`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::space::{CellType, NUM_EDGES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceState {
    pub lambda: f64,
    pub num_ops: usize,
    /// `[cell type][edge][op]`
    pub train_iters: [Vec<Vec<u64>>; 2],
    pub val_accuracy: [Vec<Vec<f64>>; 2],
    pub val_count: [Vec<Vec<u64>>; 2],
}

impl ImportanceState {
    pub fn new(num_ops: usize, lambda: f64) -> Self {
        let z = || vec![vec![0u64; num_ops]; NUM_EDGES];
        Self {
            lambda,
            num_ops,
            train_iters: [z(), z()],
            val_accuracy: [vec![vec![0.0; num_ops]; NUM_EDGES], vec![vec![0.0; num_ops]; NUM_EDGES]],
            val_count: [z(), z()],
        }
    }

    fn check_sample(&self, sampled: &[usize], masks: &[Vec<bool>]) -> Result<()> {
        if sampled.len() != NUM_EDGES || masks.len() != NUM_EDGES {
            return Err(contract(format!(
                "expected one sampled op for each of {NUM_EDGES} edges"
            )));
        }
        for (e, (&op, mask)) in sampled.iter().zip(masks).enumerate() {
            if op >= self.num_ops || !mask[op] {
                return Err(contract(format!("edge {e}: sampled op {op} is not active")));
            }
        }
        Ok(())
    }

    /// Counts one training iteration for every sampled (edge, op) pair.
    pub fn record_train_step(&mut self, t: CellType, sampled: &[usize], masks: &[Vec<bool>]) -> Result<()> {
        self.check_sample(sampled, masks)?;
        for (e, &op) in sampled.iter().enumerate() {
            self.train_iters[t.index()][e][op] += 1;
        }
        Ok(())
    }

    /// Folds a validation batch accuracy into the running mean of every
    /// sampled (edge, op) pair.
    pub fn record_val_step(
        &mut self,
        t: CellType,
        sampled: &[usize],
        accuracy: f64,
        masks: &[Vec<bool>],
    ) -> Result<()> {
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(contract(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.check_sample(sampled, masks)?;
        for (e, &op) in sampled.iter().enumerate() {
            let n = &mut self.val_count[t.index()][e][op];
            let mean = &mut self.val_accuracy[t.index()][e][op];
            *n += 1;
            *mean += (accuracy - *mean) / *n as f64;
        }
        Ok(())
    }

    /// Raw `C_a / C_e` for every active op of an edge (`0` when never
    /// trained), min-max normalised to `[0, 1]`. Constant rows map to 0.5.
    /// Inactive ops are `None`.
    pub fn compute_ratio(&self, t: CellType, edge: usize, mask: &[bool]) -> Vec<Option<f64>> {
        let raw: Vec<Option<f64>> = (0..self.num_ops)
            .map(|op| {
                mask[op].then(|| {
                    let iters = self.train_iters[t.index()][edge][op];
                    if iters == 0 {
                        0.0
                    } else {
                        self.val_accuracy[t.index()][edge][op] / iters as f64
                    }
                })
            })
            .collect();
        min_max(&raw)
    }

    /// `I = beta + lambda * C_norm` over the active ops of one edge.
    pub fn compute_indicator(&self, t: CellType, edge: usize, beta: &[f64], mask: &[bool]) -> Vec<Option<f64>> {
        combine(beta, &self.compute_ratio(t, edge, mask), self.lambda)
    }

    pub fn raw_ratio(&self, t: CellType, edge: usize, op: usize) -> f64 {
        let iters = self.train_iters[t.index()][edge][op];
        if iters == 0 {
            0.0
        } else {
            self.val_accuracy[t.index()][edge][op] / iters as f64
        }
    }
}

pub fn min_max(raw: &[Option<f64>]) -> Vec<Option<f64>> {
    let vals = raw.iter().flatten();
    let lo = vals.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.copied().fold(f64::NEG_INFINITY, f64::max);
    raw.iter()
        .map(|r| r.map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 }))
        .collect()
}

pub fn combine(beta: &[f64], c_norm: &[Option<f64>], lambda: f64) -> Vec<Option<f64>> {
    beta.iter()
        .zip(c_norm)
        .map(|(&b, c)| c.map(|c| b + lambda * c))
        .collect()
}

/// Indicator values for every cell type, edge and op (`None` = pruned).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTable {
    pub values: [Vec<Vec<Option<f64>>>; 2],
}

impl IndicatorTable {
    pub fn edge(&self, t: CellType, edge: usize) -> &[Option<f64>] {
        &self.values[t.index()][edge]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [bool; 8] = [true; 8];

    fn masks() -> Vec<Vec<bool>> {
        vec![ALL.to_vec(); NUM_EDGES]
    }

    #[test]
    fn one_train_step_touches_one_counter_per_edge() {
        let mut s = ImportanceState::new(8, 0.5);
        let mut sampled = vec![0; NUM_EDGES];
        sampled[0] = 3;
        s.record_train_step(CellType::Normal, &sampled, &masks()).unwrap();
        assert_eq!(s.train_iters[0][0][3], 1);
        assert_eq!(s.train_iters[0][0].iter().sum::<u64>(), 1);
        assert_eq!(s.train_iters[0][1][0], 1);
        assert!(s.train_iters[1].iter().flatten().all(|&c| c == 0));
        for _ in 0..9 {
            s.record_train_step(CellType::Normal, &sampled, &masks()).unwrap();
        }
        assert_eq!(s.train_iters[0][0][3], 10);
    }

    #[test]
    fn inactive_sample_is_rejected() {
        let mut s = ImportanceState::new(8, 0.5);
        let mut m = masks();
        m[4][2] = false;
        let mut sampled = vec![0; NUM_EDGES];
        sampled[4] = 2;
        assert!(s.record_train_step(CellType::Reduce, &sampled, &m).is_err());
        assert!(s.record_val_step(CellType::Reduce, &sampled, 0.5, &m).is_err());
        assert!(s.train_iters[1].iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn validation_accuracy_is_running_mean() {
        let mut s = ImportanceState::new(8, 0.5);
        let sampled = vec![1; NUM_EDGES];
        s.record_val_step(CellType::Normal, &sampled, 0.4, &masks()).unwrap();
        s.record_val_step(CellType::Normal, &sampled, 0.6, &masks()).unwrap();
        assert!((s.val_accuracy[0][0][1] - 0.5).abs() < 1e-15);

        let mut s = ImportanceState::new(8, 0.5);
        s.record_val_step(CellType::Normal, &sampled, 0.9, &masks()).unwrap();
        assert_eq!(s.val_accuracy[0][3][1], 0.9);

        let mut s = ImportanceState::new(8, 0.5);
        for _ in 0..37 {
            s.record_val_step(CellType::Normal, &sampled, 0.625, &masks()).unwrap();
        }
        assert_eq!(s.val_accuracy[0][7][1], 0.625);
        assert!(s.record_val_step(CellType::Normal, &sampled, 1.5, &masks()).is_err());
    }

    #[test]
    fn ratio_division_and_normalisation() {
        let mut s = ImportanceState::new(2, 0.5);
        s.train_iters[0][0] = vec![100, 100];
        s.val_accuracy[0][0] = vec![0.5, 0.2];
        assert!((s.raw_ratio(CellType::Normal, 0, 0) - 0.005).abs() < 1e-15);

        s.val_accuracy[0][0] = vec![0.2, 0.6];
        let r = s.compute_ratio(CellType::Normal, 0, &[true, true]);
        assert_eq!(r, vec![Some(0.0), Some(1.0)]);
    }

    #[test]
    fn untrained_edge_normalises_to_half() {
        let s = ImportanceState::new(8, 0.5);
        let r = s.compute_ratio(CellType::Reduce, 5, &ALL);
        assert!(r.iter().all(|&v| v == Some(0.5)));
        let mut mask = ALL;
        mask[2] = false;
        let r = s.compute_ratio(CellType::Reduce, 5, &mask);
        assert_eq!(r[2], None);
    }

    #[test]
    fn indicator_arithmetic() {
        let i = combine(&[0.2], &[Some(0.6)], 0.5);
        assert!((i[0].unwrap() - 0.5).abs() < 1e-15);
    }
}
