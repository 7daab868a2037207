mod common;

use cellnas_core::space::NUM_EDGES;
use cellnas_core::{run_search, CellType, Group, SearchConfig, Searcher};
use common::criteria::{self, small_search_config, tiny_search_data};

#[test]
fn dry_run_prunes_seven_times_per_edge() {
    let v = criteria::pruning_schedule();
    assert!(v.pass, "{}", v.detail);
}

#[test]
fn repeated_and_resumed_runs_match() {
    let v = criteria::determinism_and_resume();
    assert!(v.pass, "{}", v.detail);
}

#[test]
fn alpha_is_untouched_during_warmup() {
    let data = tiny_search_data(64, 8, 1);
    let config = small_search_config(2);
    let mut s = Searcher::for_data(config.clone(), &data).unwrap();
    s.run_until(&data, config.warmup_epochs, |_| Ok(())).unwrap();
    for id in s.net.store.ids(Group::Arch) {
        assert!(s.net.store.get(id).data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(s.arch_opt.step_count, 0);
    assert!(s.importance.val_count.iter().flatten().flatten().all(|&c| c == 0));

    s.run_epoch(&data).unwrap();
    let moved = s
        .net
        .store
        .ids(Group::Arch)
        .iter()
        .any(|&id| s.net.store.get(id).data().iter().any(|&v| v != 0.0));
    assert!(moved);
    assert_eq!(s.arch_opt.step_count, config.batches_per_epoch as u64);
}

#[test]
fn counters_cover_every_iteration_and_pruned_ops_freeze() {
    let data = tiny_search_data(64, 8, 3);
    let config = small_search_config(4);
    let mut s = Searcher::for_data(config.clone(), &data).unwrap();
    let mut iters = 0u64;
    while !s.is_finished() {
        let before = s.importance.clone();
        let masks = s.net.arch.masks.clone();
        s.run_epoch(&data).unwrap();
        iters += config.batches_per_epoch as u64;
        for t in CellType::BOTH {
            for (e, mask) in masks[t.index()].iter().enumerate() {
                let row = &s.importance.train_iters[t.index()][e];
                assert_eq!(row.iter().sum::<u64>(), iters);
                for (col, &active) in mask.iter().enumerate() {
                    if !active {
                        assert_eq!(row[col], before.train_iters[t.index()][e][col]);
                        assert_eq!(
                            s.importance.val_count[t.index()][e][col],
                            before.val_count[t.index()][e][col]
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn prune_events_per_edge_follow_the_schedule() {
    let data = tiny_search_data(32, 8, 5);
    for (epochs, warmup, k) in [(8, 2, 2), (12, 3, 3), (10, 0, 1)] {
        let config = SearchConfig {
            epochs,
            warmup_epochs: warmup,
            prune_interval: k,
            batches_per_epoch: 1,
            ..small_search_config(6)
        };
        let windows = config.prune_epochs().len();
        let expected = (config.ops.len() - 1).min(windows);
        let mut s = Searcher::for_data(config.clone(), &data).unwrap();
        s.run_until(&data, epochs, |_| Ok(())).unwrap();
        for t in CellType::BOTH {
            for e in 0..NUM_EDGES {
                let n = s.prune_log.iter().filter(|p| p.cell == t.name() && p.edge == e).count();
                assert_eq!(n, expected, "{epochs}/{warmup}/{k} {} edge {e}", t.name());
                assert_eq!(s.net.arch.active_count(t, e), config.ops.len() - expected);
            }
        }
    }
}

#[test]
fn different_seeds_diverge() {
    let data = tiny_search_data(64, 8, 11);
    let a = run_search(small_search_config(1), &data).unwrap();
    let b = run_search(small_search_config(2), &data).unwrap();
    assert_ne!(a.metrics, b.metrics);
}

#[test]
fn checkpoint_file_round_trip() {
    let data = tiny_search_data(64, 8, 11);
    let mut s = Searcher::for_data(small_search_config(9), &data).unwrap();
    s.run_until(&data, 3, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    s.save_checkpoint(&path).unwrap();
    let back = Searcher::load_checkpoint(&path).unwrap();
    assert_eq!(back.epoch, 3);
    assert_eq!(back.importance, s.importance);
    assert_eq!(back.to_checkpoint(), s.to_checkpoint());
}

fn edited(text: &str, f: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
    f(&mut v);
    v.to_string()
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let data = tiny_search_data(64, 8, 11);
    let mut s = Searcher::for_data(small_search_config(9), &data).unwrap();
    s.run_until(&data, 3, |_| Ok(())).unwrap();
    let text = s.to_checkpoint();
    let cases = [
        ("truncated", text[..text.len() / 2].to_string()),
        ("format", edited(&text, |v| v["header"]["format"] = "other".into())),
        ("version", edited(&text, |v| v["header"]["version"] = 99.into())),
        ("unknown field", edited(&text, |v| v["extra"] = 1.into())),
        ("stream", edited(&text, |v| v["rng"]["next_stream"] = 1.into())),
        ("epoch", edited(&text, |v| v["epoch"] = 1000.into())),
        (
            "tensor bytes",
            edited(&text, |v| v["tensors"][0]["data"] = "AAAA".into()),
        ),
        (
            "tensor shape",
            edited(&text, |v| v["tensors"][0]["shape"] = serde_json::json!([1])),
        ),
        (
            "tensor name",
            edited(&text, |v| v["tensors"][0]["name"] = "nope".into()),
        ),
        (
            "missing tensor",
            edited(&text, |v| {
                v["tensors"].as_array_mut().unwrap().pop();
            }),
        ),
        (
            "empty edge",
            edited(&text, |v| {
                v["masks"][0][0] = serde_json::json!([false, false, false, false]);
            }),
        ),
        (
            "counter width",
            edited(&text, |v| v["importance"]["num_ops"] = 8.into()),
        ),
    ];
    for (what, bad) in cases {
        assert!(Searcher::from_checkpoint(&bad).is_err(), "{what} accepted");
    }
    let missing = tempfile::tempdir().unwrap().path().join("absent.json");
    assert!(Searcher::load_checkpoint(&missing).is_err());
}

#[test]
fn resume_after_every_epoch_matches() {
    let data = tiny_search_data(32, 8, 13);
    let config = SearchConfig {
        batches_per_epoch: 1,
        ..small_search_config(3)
    };
    let reference = run_search(config.clone(), &data).unwrap();
    let mut s = Searcher::for_data(config, &data).unwrap();
    while !s.is_finished() {
        s.run_epoch(&data).unwrap();
        s = Searcher::from_checkpoint(&s.to_checkpoint()).unwrap();
    }
    let out = s.finish().unwrap();
    assert_eq!(out.genotype, reference.genotype);
    assert_eq!(out.metrics, reference.metrics);
    assert_eq!(out.prune_log, reference.prune_log);
}
