use std::fs;

use stepground::corpus::{generate_synthetic, read_corpus, write_corpus, SynthConfig};

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        num_tasks: 2,
        videos_per_task: 4,
        frames_range: (16, 40),
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn write_then_read_is_identity() {
    let corpus = generate_synthetic(&small(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    assert_eq!(read_corpus(dir.path()).unwrap(), corpus);
}

#[test]
fn same_seed_writes_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&generate_synthetic(&small(2)).unwrap(), a.path()).unwrap();
    write_corpus(&generate_synthetic(&small(2)).unwrap(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let pa = a.path().join(&name);
        if pa.is_dir() {
            for e in fs::read_dir(&pa).unwrap() {
                let f = e.unwrap().file_name();
                assert_eq!(fs::read(pa.join(&f)).unwrap(), fs::read(b.path().join(&name).join(&f)).unwrap());
            }
        } else {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
    }
}

#[test]
fn mean_realized_steps_under_heavy_dropout() {
    let corpus = generate_synthetic(&SynthConfig {
        num_tasks: 1,
        steps_per_task: 6,
        min_steps_per_task: None,
        videos_per_task: 1000,
        frames_range: (32, 48),
        p_miss_step: 0.5,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let mean = corpus
        .videos
        .iter()
        .map(|v| v.gt_step_segments.as_ref().unwrap().len() as f64)
        .sum::<f64>()
        / 1000.0;
    // Binomial(6, 0.5) with an empty draw replaced by one step:
    // 3 + P(X = 0) = 3 + 1/64.
    let expected = 3.0 + 0.5f64.powi(6);
    assert!((mean - 3.0).abs() <= 0.2, "mean {mean}");
    assert!((mean - expected).abs() <= 0.1, "mean {mean} vs {expected}");
}

#[test]
fn missing_article_fails_validation() {
    let mut corpus = generate_synthetic(&small(4)).unwrap();
    corpus.videos[0].task_id = Some("no-such-task".into());
    assert!(corpus.validate().is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(write_corpus(&corpus, dir.path()).is_err() || read_corpus(dir.path()).is_err());
}
