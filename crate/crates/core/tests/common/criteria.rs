//! One function per acceptance criterion. Each returns a verdict with a
//! short detail line; the topic test files assert on them and the
//! acceptance binary prints them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cellnas_core::data::{gen_synthetic, load_cifar10, Split};
use cellnas_core::eval::train_eval_network;
use cellnas_core::importance::{combine, min_max};
use cellnas_core::search::prune_step;
use cellnas_core::space::{edge_beta, sample_check, NUM_EDGES};
use cellnas_core::{
    count_madds, count_params, run_search, CellType, EvalConfig, EvalNetwork, Genotype, ImportanceState,
    IndicatorTable, OpKind, SearchConfig, SearchData, Searcher, StemKind, SyntheticSpec, SyntheticVariant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{op_gradient_checks, supernet_gradient_check, worst};

pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/reference_genotype.json")
}

pub fn reference_genotype() -> Genotype {
    Genotype::load(&fixture_path()).expect("fixture genotype loads")
}

pub const SUPERNET_FD_COORDS: usize = 6;

pub fn gradients() -> Verdict {
    let t = Instant::now();
    let ops = op_gradient_checks();
    let failing: Vec<String> = ops
        .iter()
        .filter(|(_, f)| !f.ok())
        .map(|(label, f)| format!("{label} {} {:.2e}", f.name, f.rel_error))
        .collect();
    let net = supernet_gradient_check(2, SUPERNET_FD_COORDS);
    let net_worst = worst(&net);
    let secs = t.elapsed().as_secs_f64();
    let op_worst = ops.iter().map(|(_, f)| f.rel_error).fold(0.0, f64::max);
    let pass = failing.is_empty() && net.iter().all(|f| f.ok()) && secs < 120.0;
    let mut detail = format!(
        "{} op tensors worst {op_worst:.2e}, supernet {} tensors worst {:.2e}, {secs:.0}s",
        ops.len(),
        net.len(),
        net_worst.rel_error
    );
    if !failing.is_empty() {
        detail.push_str(&format!("; failing: {}", failing.join(", ")));
    }
    Verdict::new(pass, detail)
}

pub const SAMPLE_DRAWS: usize = 200_000;
pub const SAMPLE_TOLERANCE: f64 = 0.005;

pub fn gumbel_fidelity() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let alpha: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for temp in [5.0, 1.0, 0.1] {
        let r = sample_check(&alpha, temp, SAMPLE_DRAWS, &mut rng).expect("valid alpha");
        worst = worst.max(r.linf);
        parts.push(format!("T={temp}: {:.4}", r.linf));
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict::new(
        worst < SAMPLE_TOLERANCE && secs < 60.0,
        format!("L-inf {} ({secs:.1}s)", parts.join(", ")),
    )
}

pub fn tiny_search_data(samples: usize, size: usize, seed: u64) -> SearchData {
    let spec = SyntheticSpec {
        samples,
        size,
        classes: 2,
        ..SyntheticSpec::default()
    };
    SearchData::from_halves(&gen_synthetic(&spec, seed).expect("valid spec"))
}

/// Full operation set and the default schedule, one batch per epoch.
pub fn dry_run_config() -> SearchConfig {
    SearchConfig {
        cells: 3,
        init_channels: 4,
        batch_size: 2,
        batches_per_epoch: 1,
        seed: 3,
        ..SearchConfig::default()
    }
}

pub fn pruning_schedule() -> Verdict {
    let config = dry_run_config();
    let expected: Vec<usize> = (2..=8).map(|i| 20 * i).collect();
    let ok_config =
        config.ops.len() == 8 && (config.epochs, config.warmup_epochs, config.prune_interval) == (160, 20, 20);
    let data = tiny_search_data(4, 8, 0);
    let mut out = match Searcher::for_data(config, &data) {
        Ok(s) => s,
        Err(e) => return Verdict::new(false, format!("invalid setup: {e}")),
    };
    if let Err(e) = out.run_until(&data, usize::MAX, |_| Ok(())) {
        return Verdict::new(false, format!("search failed: {e}"));
    }
    let mut problems = Vec::new();
    for t in CellType::BOTH {
        for e in 0..NUM_EDGES {
            let epochs: Vec<usize> = out
                .prune_log
                .iter()
                .filter(|p| p.cell == t.name() && p.edge == e)
                .map(|p| p.epoch)
                .collect();
            if epochs != expected {
                problems.push(format!("{} edge {e} pruned at {epochs:?}", t.name()));
            }
        }
    }
    let last = out.metrics.last().expect("rows");
    let all_single = [&last.active_normal, &last.active_reduce]
        .iter()
        .all(|s| s.split(' ').all(|c| c == "1"));
    if !all_single {
        problems.push(format!(
            "final active counts {} / {}",
            last.active_normal, last.active_reduce
        ));
    }
    let counts = |s: &str| s.split(' ').map(|c| c.parse::<usize>().unwrap()).collect::<Vec<_>>();
    for w in out.metrics.windows(2) {
        for (a, b) in [
            (&w[0].active_normal, &w[1].active_normal),
            (&w[0].active_reduce, &w[1].active_reduce),
        ] {
            if counts(a).iter().zip(counts(b)).any(|(x, y)| y > *x || y == 0) {
                problems.push(format!("active counts grew at epoch {}", w[1].epoch));
            }
        }
    }
    let pass = ok_config && problems.is_empty() && out.prune_log.len() == 7 * 2 * NUM_EDGES;
    let detail = if pass {
        format!(
            "{} prune events, 7 per edge at epochs 40..=160, one op left everywhere",
            out.prune_log.len()
        )
    } else {
        problems.truncate(4);
        problems.join("; ")
    };
    Verdict::new(pass, detail)
}

fn one_edge(beta: &[f64], ratio: &[f64], lambda: f64) -> Vec<f64> {
    let c: Vec<Option<f64>> = ratio.iter().map(|&r| Some(r)).collect();
    combine(beta, &min_max(&c), lambda)
        .into_iter()
        .map(Option::unwrap)
        .collect()
}

fn ranking(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

/// Counters on normal edge 0: op 1 was sampled often at mediocre accuracy,
/// op 0 rarely at high accuracy.
pub fn adversarial_counters(lambda: f64) -> ImportanceState {
    let mut s = ImportanceState::new(4, lambda);
    s.train_iters[0][0] = vec![20, 400, 150, 150];
    s.val_accuracy[0][0] = vec![0.90, 0.60, 0.50, 0.50];
    s
}

pub const FLIP_BETA: [f64; 4] = [0.26, 0.28, 0.23, 0.23];

pub fn indicator_behaviour() -> Verdict {
    let mut problems = Vec::new();

    // (a) without the counter term the indicator is beta itself
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let alpha: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        let beta = edge_beta(&alpha, &[true; 8]).unwrap();
        let ratio: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..0.05)).collect();
        let ind = one_edge(&beta, &ratio, 0.0);
        if ranking(&ind) != ranking(&beta) || ind != beta {
            problems.push("lambda = 0 changed the beta ranking".to_string());
            break;
        }
    }

    // (b) counters reverse the order of two close architecture weights
    let mask = [true; 4];
    let s = adversarial_counters(0.5);
    let ind: Vec<f64> = s
        .compute_indicator(CellType::Normal, 0, &FLIP_BETA, &mask)
        .into_iter()
        .map(Option::unwrap)
        .collect();
    let beta_first = ranking(&FLIP_BETA)[0];
    let ind_first = ranking(&ind)[0];
    if !(beta_first == 1 && ind_first == 0) {
        problems.push(format!(
            "no rank flip: beta best {beta_first}, indicator best {ind_first} ({ind:?})"
        ));
    }
    let zero = adversarial_counters(0.0);
    let plain = zero.compute_indicator(CellType::Normal, 0, &FLIP_BETA, &mask);
    if ranking(&plain.into_iter().map(Option::unwrap).collect::<Vec<_>>())[0] != 1 {
        problems.push("lambda = 0 did not restore the beta winner".into());
    }

    // (c) strict increase in each argument
    'grid: for lambda in [0.1, 0.5, 1.0] {
        for i in 0..=10 {
            for j in 0..=10 {
                let (b, c) = (i as f64 / 10.0, j as f64 / 10.0);
                let f = |b: f64, c: f64| combine(&[b], &[Some(c)], lambda)[0].unwrap();
                if !(f(b + 1e-3, c) > f(b, c) && f(b, c + 1e-3) > f(b, c)) {
                    problems.push(format!("not strictly increasing at beta {b}, c {c}, lambda {lambda}"));
                    break 'grid;
                }
            }
        }
    }

    // ties prune the lower index
    let mut net = Searcher::new(
        SearchConfig {
            cells: 1,
            init_channels: 2,
            ops: vec![OpKind::Identity, OpKind::SepConv3x3],
            epochs: 2,
            warmup_epochs: 0,
            prune_interval: 1,
            ..SearchConfig::default()
        },
        1,
        2,
    )
    .expect("config");
    let tie = IndicatorTable {
        values: [
            vec![vec![Some(0.5), Some(0.5)]; NUM_EDGES],
            vec![vec![Some(0.5), Some(0.5)]; NUM_EDGES],
        ],
    };
    let pruned = prune_step(&mut net.net.arch, &tie).expect("prune");
    if !pruned.iter().all(|&(_, _, col)| col == 0) {
        problems.push("tie did not prune the lower index".into());
    }

    let pass = problems.is_empty();
    let detail = if pass {
        format!(
            "lambda=0 keeps beta order; beta {FLIP_BETA:?} ranks op 1 first, indicator {:?} ranks op 0 first; strictly increasing",
            ind.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        )
    } else {
        problems.join("; ")
    };
    Verdict::new(pass, detail)
}

pub const REPORTED_PARAMS: f64 = 3.4e6;
pub const REPORTED_MADDS: f64 = 570e6;

pub fn cifar_size_config() -> EvalConfig {
    EvalConfig {
        cells: 20,
        init_channels: 36,
        ..EvalConfig::default()
    }
}

pub fn imagenet_size_config() -> EvalConfig {
    EvalConfig {
        cells: 14,
        init_channels: 48,
        resolution: 224,
        classes: 1000,
        stem: StemKind::Imagenet,
        ..EvalConfig::default()
    }
}

pub fn model_size() -> Verdict {
    let t = Instant::now();
    let g = reference_genotype();
    let params = count_params(&g, &cifar_size_config()).expect("count params");
    let madds = count_madds(&g, &imagenet_size_config()).expect("count madds");
    let secs = t.elapsed().as_secs_f64();
    let dp = params as f64 / REPORTED_PARAMS - 1.0;
    let dm = madds as f64 / REPORTED_MADDS - 1.0;
    Verdict::new(
        dp.abs() <= 0.10 && dm.abs() <= 0.15 && secs < 10.0,
        format!(
            "params {params} ({:+.1}% of 3.4M), mult-adds {madds} ({:+.1}% of 570M), {secs:.2}s",
            100.0 * dp,
            100.0 * dm
        ),
    )
}

pub const PLANTED_SEEDS: u64 = 10;
pub const PLANTED_REQUIRED: usize = 8;

pub fn planted_spec() -> SyntheticSpec {
    SyntheticSpec {
        variant: SyntheticVariant::Texture,
        classes: 4,
        samples: 1024,
        channels: 3,
        size: 8,
        noise: 3.0,
    }
}

pub fn planted_config(seed: u64) -> SearchConfig {
    SearchConfig {
        epochs: 32,
        warmup_epochs: 4,
        prune_interval: 4,
        cells: 4,
        init_channels: 8,
        batch_size: 16,
        batches_per_epoch: 16,
        ops: vec![
            OpKind::Identity,
            OpKind::SepConv3x3,
            OpKind::AvgPool3x3,
            OpKind::MaxPool3x3,
        ],
        arch_lr: 0.05,
        seed,
        ..SearchConfig::default()
    }
}

/// Whether the planted family holds a majority of the decoded inputs of
/// the first intermediate node of the normal cell.
pub fn planted_recovered(g: &Genotype) -> bool {
    let node = &g.normal.nodes[0];
    2 * node.iter().filter(|i| i.op.is_conv()).count() > node.len()
}

pub fn planted_recovery() -> Verdict {
    let t = Instant::now();
    let mut hits = 0;
    let mut picks = Vec::new();
    for seed in 1..=PLANTED_SEEDS {
        let data = gen_synthetic(&planted_spec(), 100 + seed).expect("valid spec");
        match run_search(planted_config(seed), &SearchData::from_halves(&data)) {
            Ok(out) => {
                let n = &out.genotype.normal.nodes[0];
                if planted_recovered(&out.genotype) {
                    hits += 1;
                }
                picks.push(format!("{}/{}", n[0].op, n[1].op));
            }
            Err(e) => picks.push(format!("error: {e}")),
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict::new(
        hits >= PLANTED_REQUIRED && secs < 600.0,
        format!(
            "{hits}/{PLANTED_SEEDS} seeds (need {PLANTED_REQUIRED}), {secs:.0}s; node 0: {}",
            picks.join(" ")
        ),
    )
}

pub fn small_search_config(seed: u64) -> SearchConfig {
    SearchConfig {
        epochs: 8,
        warmup_epochs: 2,
        prune_interval: 2,
        cells: 3,
        init_channels: 4,
        batch_size: 8,
        batches_per_epoch: 2,
        ops: vec![
            OpKind::Identity,
            OpKind::SepConv3x3,
            OpKind::AvgPool3x3,
            OpKind::MaxPool3x3,
        ],
        arch_lr: 0.01,
        seed,
        ..SearchConfig::default()
    }
}

pub const RESUME_AT: usize = 5;

pub fn determinism_and_resume() -> Verdict {
    let data = tiny_search_data(64, 8, 11);
    let a = run_search(small_search_config(7), &data).expect("search");
    let b = run_search(small_search_config(7), &data).expect("search");
    let same = a.genotype.to_json() == b.genotype.to_json() && a.metrics == b.metrics && a.snapshots == b.snapshots;

    let mut first = Searcher::for_data(small_search_config(7), &data).expect("searcher");
    first.run_until(&data, RESUME_AT, |_| Ok(())).expect("first leg");
    let text = first.to_checkpoint();
    drop(first);
    let mut resumed = Searcher::from_checkpoint(&text).expect("checkpoint loads");
    resumed.run_until(&data, usize::MAX, |_| Ok(())).expect("second leg");
    let r = resumed.finish().expect("decode");
    let resumed_same =
        r.genotype.to_json() == a.genotype.to_json() && r.metrics == a.metrics && r.snapshots == a.snapshots;
    Verdict::new(
        same && resumed_same,
        format!("repeat run identical: {same}; resumed at epoch {RESUME_AT} identical: {resumed_same}"),
    )
}

pub const CIFAR_FLOOR: f64 = 0.45;
pub const CIFAR_SUBSET: usize = 4000;

pub fn cifar_config() -> EvalConfig {
    EvalConfig {
        cells: 5,
        init_channels: 16,
        epochs: 5,
        batch_size: 64,
        lr_max: 0.05,
        lr_min: 0.0,
        ..EvalConfig::default()
    }
}

pub fn cifar_sanity() -> Verdict {
    let Some(dir) = std::env::var_os("CIFAR10_DIR").map(PathBuf::from) else {
        return Verdict::new(
            false,
            "CIFAR10_DIR is not set; CIFAR-10 binaries are not available here",
        );
    };
    let t = Instant::now();
    let loaded = load_cifar10(&dir, Split::Train, Some(CIFAR_SUBSET), 0)
        .and_then(|train| Ok((train, load_cifar10(&dir, Split::Test, None, 0)?)));
    let (train, test) = match loaded {
        Ok(d) => d,
        Err(e) => return Verdict::new(false, format!("could not load CIFAR-10: {e}")),
    };
    let config = cifar_config();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = match EvalNetwork::<f32>::new(&reference_genotype(), config, &mut rng) {
        Ok(n) => n,
        Err(e) => return Verdict::new(false, format!("network: {e}")),
    };
    match train_eval_network(&mut net, &train, &test, |_| {}) {
        Ok(report) => {
            let secs = t.elapsed().as_secs_f64();
            Verdict::new(
                report.test_acc >= CIFAR_FLOOR && secs < 900.0,
                format!(
                    "test accuracy {:.3} after 5 epochs on {CIFAR_SUBSET} images, {secs:.0}s",
                    report.test_acc
                ),
            )
        }
        Err(e) => Verdict::new(false, format!("training failed: {e}")),
    }
}
