use std::fs;
use std::path::Path;

use ssame::datagen::{generate_corpus, Corpus, CorpusConfig, Split};
use ssame::saliency::PipelineConfig;
use ssame::train::{load_checkpoint, run_training, Mode, StepMetrics, TrainConfig};

fn corpus(dir: &Path, n_train: usize) -> Corpus {
    let cfg = CorpusConfig { n_train, n_eval: 0, seed: 2, ..CorpusConfig::default() };
    generate_corpus(&cfg, &PipelineConfig::default(), dir).unwrap();
    Corpus::load(dir, Split::Train, None, &TrainConfig::default().model).unwrap()
}

fn metrics(path: &Path) -> Vec<StepMetrics> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn one_step_writes_one_metrics_line() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("c"), 16);
    let cfg = TrainConfig { steps: 1, batch_size: 8, ..TrainConfig::default() };
    let out = run_training(&cfg, &c, &dir.path().join("r"), None).unwrap();
    let m = metrics(&out.metrics);
    assert_eq!(m.len(), 1);
    assert_eq!(m[0].step, 1);
    assert!(out.checkpoint.is_file());
}

#[test]
fn loss_falls_over_the_first_two_hundred_steps() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("c"), 400);
    let cfg = TrainConfig { steps: 200, ..TrainConfig::default() };
    let out = run_training(&cfg, &c, &dir.path().join("r"), None).unwrap();
    let m = metrics(&out.metrics);
    let window = |s: &[StepMetrics]| s.iter().map(|m| m.l_total).sum::<f64>() / s.len() as f64;
    let (first, last) = (window(&m[..20]), window(&m[180..]));
    assert!(last < first, "first window {first:.4}, last window {last:.4}");
}

#[test]
fn equal_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("c"), 24);
    let cfg = TrainConfig { steps: 3, batch_size: 8, seed: 4, ..TrainConfig::default() };
    let a = run_training(&cfg, &c, &dir.path().join("a"), None).unwrap();
    let b = run_training(&cfg, &c, &dir.path().join("b"), None).unwrap();
    assert_eq!(fs::read(a.checkpoint).unwrap(), fs::read(b.checkpoint).unwrap());
    assert_eq!(fs::read(a.metrics).unwrap(), fs::read(b.metrics).unwrap());
    let other = TrainConfig { seed: 5, ..cfg };
    let o = run_training(&other, &c, &dir.path().join("o"), None).unwrap();
    assert_ne!(fs::read(dir.path().join("a/model.ckpt")).unwrap(), fs::read(o.checkpoint).unwrap());
}

#[test]
fn resuming_continues_the_step_counter() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&dir.path().join("c"), 24);
    let full = TrainConfig { steps: 6, batch_size: 8, ..TrainConfig::default() };
    let straight = run_training(&full, &c, &dir.path().join("s"), None).unwrap();

    let half = TrainConfig { steps: 3, ..full.clone() };
    let first = run_training(&half, &c, &dir.path().join("r"), None).unwrap();
    let resumed = run_training(&full, &c, &dir.path().join("r"), Some(&first.checkpoint)).unwrap();
    let m = metrics(&resumed.metrics);
    assert_eq!(m.iter().map(|x| x.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);
    assert_eq!(load_checkpoint(&resumed.checkpoint).unwrap().optimizer.unwrap().step, 6);

    // same batches, weights differ only by the f32 rounding of the checkpoint
    let s = metrics(&straight.metrics);
    for (a, b) in s.iter().zip(&m) {
        assert_eq!(a.valid_targets, b.valid_targets);
        assert!((a.l_total - b.l_total).abs() <= 1e-4 * a.l_total.abs().max(1.0), "step {}", a.step);
    }

    let again = run_training(&full, &c, &dir.path().join("r"), Some(&resumed.checkpoint));
    assert!(again.is_err(), "nothing left to train");
}

#[test]
fn alignment_modes_need_targets_before_the_first_step() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("c");
    corpus(&root, 12);
    let empty = dir.path().join("no-targets");
    fs::create_dir_all(&empty).unwrap();
    let c = Corpus::load(&root, Split::Train, Some(&empty), &TrainConfig::default().model).unwrap();
    for mode in [Mode::SgaOnly, Mode::Full] {
        let cfg = TrainConfig { steps: 2, batch_size: 4, mode, ..TrainConfig::default() };
        let out = dir.path().join(format!("r-{mode}"));
        assert!(run_training(&cfg, &c, &out, None).is_err());
        assert!(!out.join("metrics.jsonl").exists());
    }
    let cfg = TrainConfig { steps: 1, batch_size: 4, mode: Mode::SdrOnly, ..TrainConfig::default() };
    assert!(run_training(&cfg, &c, &dir.path().join("ok"), None).is_ok());
}
