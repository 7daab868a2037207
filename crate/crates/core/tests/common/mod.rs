//! Finite-difference gradient checking shared by the integration tests.
#![allow(dead_code)]

pub mod criteria;

use cellnas_core::graph::Var;
use cellnas_core::params::{Group, ParamStore, Session};
use cellnas_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct weight.
pub fn projected_loss(s: &mut Session<f64>, y: Var, seed: u64) -> Var {
    let r = rand_tensor(s.graph.shape(y).to_vec(), &mut rng(seed));
    let rv = s.graph.constant(&r);
    let p = s.graph.mul(y, rv);
    s.graph.sum(p)
}

#[derive(Debug)]
pub struct FdResult {
    pub name: String,
    pub coords: usize,
    /// Coordinates whose `±h` interval crossed a kink (ReLU, max) and were
    /// re-estimated with a step of `h / 100`.
    pub refined: usize,
    /// `|a - n| / max(|a|, |n|)` over the checked coordinates (L2 norms).
    pub rel_error: f64,
    pub analytic_norm: f64,
}

impl FdResult {
    pub fn ok(&self) -> bool {
        self.rel_error < FD_TOLERANCE
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> (f64, f64) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        (0.0, norm(a))
    } else {
        (norm(&diff) / scale, norm(a))
    }
}

/// Central difference of `f` around `v` at step `h`; if the estimates at
/// `h` and `h / 10` disagree by more than smooth truncation allows, the
/// interval holds a kink and the `h / 100` estimate is returned instead.
fn central(mut f: impl FnMut(f64) -> f64, v: f64) -> (f64, bool) {
    let mut at = |h: f64| (f(v + h) - f(v - h)) / (2.0 * h);
    let coarse = at(FD_STEP);
    let fine = at(FD_STEP / 10.0);
    if (coarse - fine).abs() <= 1e-7 * coarse.abs().max(fine.abs()).max(1e-3) {
        (coarse, false)
    } else {
        (at(FD_STEP / 100.0), true)
    }
}

fn pick(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares reverse-mode gradients of `loss(session, x)` with central
/// differences for the input and every learnable stored tensor. At most
/// `max_coords` coordinates per tensor are perturbed.
pub fn check_gradients(
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    max_coords: usize,
    loss: impl Fn(&mut Session<f64>, Var) -> Var,
) -> Vec<FdResult> {
    let mut sampler = rng(99);
    store.zero_grad();
    let x_grad = {
        let mut s = Session::new(store, true).with_grads(true, true);
        let xv = s.graph.leaf(x.shape().to_vec(), x.data().to_vec(), true);
        let l = loss(&mut s, xv);
        s.backward(l);
        s.graph
            .grad(xv)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |store: &mut ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut s = Session::new(store, true).with_grads(false, false);
        let xv = s.graph.constant(x);
        let l = loss(&mut s, xv);
        s.graph.value(l)[0]
    };

    let mut out = Vec::new();
    let coords = pick(x.len(), max_coords, &mut sampler);
    let mut numeric = Vec::with_capacity(coords.len());
    let mut refined = 0;
    let mut xp = x.clone();
    for &i in &coords {
        let v = xp.data()[i];
        let (n, kink) = central(
            |t| {
                xp.data_mut()[i] = t;
                eval(store, &xp)
            },
            v,
        );
        xp.data_mut()[i] = v;
        numeric.push(n);
        refined += kink as usize;
    }
    let analytic: Vec<f64> = coords.iter().map(|&i| x_grad[i]).collect();
    let (rel, norm) = rel_error(&analytic, &numeric);
    out.push(FdResult {
        name: "input".into(),
        coords: coords.len(),
        refined,
        rel_error: rel,
        analytic_norm: norm,
    });

    let learnable: Vec<_> = [Group::Weight, Group::Arch]
        .iter()
        .flat_map(|&g| store.ids(g))
        .collect();
    for id in learnable {
        let grad = store
            .get(id)
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let coords = pick(grad.len(), max_coords, &mut sampler);
        let mut numeric = Vec::with_capacity(coords.len());
        let mut refined = 0;
        for &i in &coords {
            let v = store.get(id).data()[i];
            let (n, kink) = central(
                |t| {
                    store.get_mut(id).data_mut()[i] = t;
                    eval(store, x)
                },
                v,
            );
            store.get_mut(id).data_mut()[i] = v;
            numeric.push(n);
            refined += kink as usize;
        }
        let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        let (rel, norm) = rel_error(&analytic, &numeric);
        out.push(FdResult {
            name: store.name(id).to_string(),
            coords: coords.len(),
            refined,
            rel_error: rel,
            analytic_norm: norm,
        });
    }
    store.zero_grad();
    out
}

pub fn worst(results: &[FdResult]) -> &FdResult {
    results
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("at least the input is checked")
}

use cellnas_core::ops::{OpInstance, OpStyle};
use cellnas_core::space::Mixing;
use cellnas_core::{OpKind, Supernet, SupernetConfig};

/// Every candidate op at both strides, in search and evaluation style, on a
/// random `[2, 4, 8, 8]` input.
pub fn op_gradient_checks() -> Vec<(String, FdResult)> {
    let mut out = Vec::new();
    let mut r = rng(5);
    for style in [OpStyle::SEARCH, OpStyle::EVAL] {
        for kind in OpKind::ALL {
            for stride in [1, 2] {
                let mut store = ParamStore::<f64>::new();
                let op = OpInstance::new(kind, 4, stride, style, &mut store, "op", &mut r);
                let x = rand_tensor(vec![2, 4, 8, 8], &mut r);
                let res = check_gradients(&mut store, &x, 64, |s, xv| {
                    let y = op.forward(s, xv);
                    projected_loss(s, y, 17)
                });
                let label = format!("{kind} stride {stride} affine={}", style.affine);
                for f in res {
                    out.push((label.clone(), f));
                }
            }
        }
    }
    out
}

/// A small supernet under softmax mixing: gradients for the input, every
/// weight tensor and both architecture tables. Two cells are both
/// reduction cells; three cells add a normal cell in front.
pub fn supernet_gradient_check(cells: usize, max_coords: usize) -> Vec<FdResult> {
    let mut r = rng(8);
    let cfg = SupernetConfig {
        cells,
        init_channels: 4,
        in_channels: 4,
        classes: 3,
        ops: OpKind::ALL.to_vec(),
    };
    let mut net = Supernet::<f64>::new(cfg, &mut r).expect("valid supernet");
    // move alpha away from zero so the softmax is not symmetric
    for id in net.arch_ids() {
        let t = rand_tensor(net.store.get(id).shape().to_vec(), &mut r);
        net.store.replace_data(id, t.into_data());
    }
    let x = rand_tensor(vec![2, 4, 8, 8], &mut r);
    let (parts, store) = net.parts();
    check_gradients(store, &x, max_coords, |s, xv| {
        let logits = Supernet::forward(s, &parts, xv, Mixing::Mixed);
        s.graph.softmax_cross_entropy(logits, &[0, 2])
    })
}
