use dida::config::parse_config;
use dida::pipeline::{build_dataset, run_control, run_dida, run_paired, RunConfig};

fn tiny() -> RunConfig {
    let sets: Vec<String> = [
        "dataset.sizes=[80, 20]",
        "model.channels=[4, 8]",
        "da.epochs=1",
        "di.epochs=1",
        "dida_iterations=3",
        "eval.probe.epochs=1",
        "eval.export_features=false",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    parse_config("", &sets).unwrap()
}

#[test]
fn paired_arms_match_standalone_runs() {
    let cfg = tiny();
    let data = build_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (pd, pc) = (dir.path().join("pd"), dir.path().join("pc"));
    let (sd, sc) = (dir.path().join("sd"), dir.path().join("sc"));
    run_paired(&cfg, &data, Some(&pd), Some(&pc)).unwrap();
    run_dida(&cfg, &data, Some(&sd)).unwrap();
    run_control(&cfg, &data, Some(&sc)).unwrap();
    let read = |d: &std::path::Path| std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&pd), read(&sd));
    assert_eq!(read(&pc), read(&sc));
}

#[test]
fn arms_share_prefix_and_equal_budget() {
    let cfg = tiny();
    let data = build_dataset(&cfg).unwrap();
    let (a, b) = run_paired(&cfg, &data, None, None).unwrap();
    assert_eq!(a.records.len(), 4);
    assert_eq!(b.records.len(), 4);
    assert_eq!(a.total_da_epochs, b.total_da_epochs);
    for i in 0..2 {
        assert_eq!(a.records[i].target_acc, b.records[i].target_acc);
    }
    assert_eq!(a.records[0].pool_size, 0);
    assert!(a.records[1..].iter().all(|r| r.pool_size > 0 && r.di.is_some()));
    assert!(b.records[2..].iter().all(|r| r.di.is_none() && r.pool_size == b.records[1].pool_size));
}

#[test]
fn degenerate_iteration_counts() {
    let mut cfg = tiny();
    let data = build_dataset(&cfg).unwrap();
    cfg.dida_iterations = 0;
    let r = run_dida(&cfg, &data, None).unwrap();
    assert_eq!(r.records.len(), 1);
    assert!(r.records[0].di.is_none());

    cfg.dida_iterations = 1;
    let a = run_dida(&cfg, &data, None).unwrap();
    let b = run_control(&cfg, &data, None).unwrap();
    let acc = |r: &dida::pipeline::RunReport| r.records.iter().map(|x| x.target_acc).collect::<Vec<_>>();
    assert_eq!(acc(&a), acc(&b));
}
