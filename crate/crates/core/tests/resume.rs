mod common;

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;

use dsclone::generation::{run_plan, MockBackend, RunOptions};
use dsclone::par::Parallelism;
use dsclone::store::{read_manifest, verify, MANIFEST_FILE};
use dsclone::Error;

/// Entry identity without timing-dependent fields.
fn entry_set(root: &std::path::Path) -> BTreeSet<String> {
    read_manifest(root)
        .unwrap()
        .entries
        .iter()
        .map(|e| format!("{} {} {} {}", e.key(), e.seed, e.file_path, e.sha256))
        .collect()
}

#[test]
fn killed_run_resumes_to_the_same_manifest() {
    let plan = common::plan(6, 11, 48, 32);
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    let killed = dir.path().join("killed");

    let store = common::create_store(&clean, &plan);
    let report = run_plan(&plan, &MockBackend, &store, &RunOptions::default()).unwrap();
    assert_eq!(report.completed, plan.records.len());
    drop(store);

    // Interrupt after a third of the records, with a torn final line.
    let store = common::create_store(&killed, &plan);
    let opts = RunOptions {
        workers: 8,
        stop_after: Some(plan.records.len() / 3),
        ..RunOptions::default()
    };
    let first = run_plan(&plan, &MockBackend, &store, &opts).unwrap();
    assert!(first.completed < plan.records.len());
    drop(store);
    OpenOptions::new()
        .append(true)
        .open(killed.join(MANIFEST_FILE))
        .unwrap()
        .write_all(b"{\"wnid\":\"n0")
        .unwrap();

    let store = common::open_store(&killed, &plan);
    let opts = RunOptions {
        workers: 8,
        resume: true,
        ..RunOptions::default()
    };
    let second = run_plan(&plan, &MockBackend, &store, &opts).unwrap();
    assert_eq!(second.skipped, first.completed);
    assert_eq!(first.completed + second.completed, plan.records.len());
    drop(store);

    assert_eq!(entry_set(&clean), entry_set(&killed));
    for root in [&clean, &killed] {
        let v = verify(root, Parallelism::Auto).unwrap();
        assert_eq!(v.integrity_errors(), 0, "{v:?}");
        assert_eq!(v.ok, plan.records.len());
    }
}

#[test]
fn fresh_run_refuses_to_overwrite() {
    let plan = common::plan(1, 0, 32, 32);
    let dir = tempfile::tempdir().unwrap();
    let store = common::create_store(dir.path(), &plan);
    run_plan(&plan, &MockBackend, &store, &RunOptions::default()).unwrap();
    drop(store);
    let again = dsclone::store::DatasetStore::create(dir.path(), common::header(&plan));
    assert!(matches!(again, Err(Error::WouldOverwrite(_))));
}

#[test]
fn sequential_and_parallel_runs_write_identical_images() {
    let plan = common::plan(3, 5, 40, 30);
    let dir = tempfile::tempdir().unwrap();
    let mut sets = Vec::new();
    for workers in [1, 8] {
        let root = dir.path().join(format!("w{workers}"));
        let store = common::create_store(&root, &plan);
        let opts = RunOptions {
            workers,
            ..RunOptions::default()
        };
        run_plan(&plan, &MockBackend, &store, &opts).unwrap();
        sets.push(entry_set(&root));
    }
    assert_eq!(sets[0], sets[1]);
}
