//! Deterministic-mode checks; kept in their own binary because they set
//! process environment.

mod common;

use common::small_config;
use panogen_cli::config::DETERMINISTIC_ENV;
use panogen_cli::hashing::sha256_file;
use panogen_cli::train::checkpoint_dir;
use panogen_cli::{gen_data, train};
use panogen_core::diffusion::Checkpoint;

#[test]
fn resumed_run_matches_uninterrupted_run() {
    std::env::set_var(DETERMINISTIC_ENV, "1");
    let tmp = tempfile::tempdir().unwrap();
    let mut c = small_config(2, 200);
    c.train.log_every = 20;
    c.train.checkpoint_every = 100;
    let data = tmp.path().join("data");
    gen_data(&c, &data).unwrap();

    let full = train(&c, &data, &tmp.path().join("full"), None).unwrap();

    let mut first = c.clone();
    first.train.steps = 100;
    let half = train(&first, &data, &tmp.path().join("split"), None).unwrap();
    let resumed = train(&c, &data, &tmp.path().join("split"), Some(&half.checkpoint)).unwrap();

    assert_eq!(sha256_file(&full.checkpoint).unwrap(), sha256_file(&resumed.checkpoint).unwrap());
    let tail: Vec<_> = full.logs[100..].iter().map(|l| l.loss.to_bits()).collect();
    let again: Vec<_> = resumed.logs.iter().map(|l| l.loss.to_bits()).collect();
    assert_eq!(tail, again);
    // the numbered checkpoints hold the same state; their metadata differs
    // only in the configured step budget
    let name = "step-00000100.pgt";
    let load = |run: &str| Checkpoint::<f64>::load(&checkpoint_dir(&tmp.path().join(run)).join(name)).unwrap();
    let (a, b) = (load("full"), load("split"));
    assert_eq!(a.state, b.state);
    assert_eq!((a.train.steps, b.train.steps), (200, 100));
}
