use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use stepground::corpus::read_corpus;
use stepground::evalkit::{align_corpus, corpus_step_r_at_1, StepMatrix};
use stepground::Mat;
use stepground_cli::emit::{csv_to_matrix, matrix_to_csv, matrix_to_pgm, pixel};
use stepground_cli::{
    evaluate_checkpoint, load_checkpoint_params, run, Protocol, RunConfig, EXIT_CONFIG, EXIT_DATA, EXIT_OK,
    EXIT_PROTOCOL,
};

fn small_config() -> Value {
    json!({
        "synth": {
            "num_tasks": 2,
            "steps_per_task": 3,
            "min_steps_per_task": null,
            "videos_per_task": 5,
            "frames_range": [16, 24],
            "dims": {"video": 8, "narration": 6, "step": 6},
            "latent_dim": 4,
            "seed": 1
        },
        "model": {
            "video_dim": 8, "narration_dim": 6, "step_dim": 6,
            "d_model": 8, "layers": 1, "heads": 2, "max_frames": 32
        },
        "train": {
            "epochs": 3, "batch_size": 4, "base_lr": 2e-3, "teacher_pre_epochs": 1,
            "max_frames": 32, "seed": 4,
            "pseudo": {"burn_in_epochs": 1, "refresh_every": 1}
        },
        "eval": {"max_frames": 32},
        "holdout_every": 0
    })
}

fn cli(wd: &Path, args: &[&str]) -> i32 {
    let mut all = vec!["stepground", "--workdir", wd.to_str().unwrap()];
    all.extend_from_slice(args);
    run(all)
}

/// Writes the config, a corpus and a trained model into a fresh workdir.
fn trained_workdir() -> tempfile::TempDir {
    let wd = tempfile::tempdir().unwrap();
    fs::write(wd.path().join("cfg.json"), small_config().to_string()).unwrap();
    assert_eq!(cli(wd.path(), &["generate", "--config", "cfg.json", "--out", "corpus"]), EXIT_OK);
    assert_eq!(
        cli(wd.path(), &["train", "--config", "cfg.json", "--corpus", "corpus", "--out", "run"]),
        EXIT_OK
    );
    wd
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn malformed_config_exits_with_config_code() {
    let wd = tempfile::tempdir().unwrap();
    fs::write(wd.path().join("bad.json"), "{\"synth\": {\"num_tasks\": ").unwrap();
    assert_eq!(cli(wd.path(), &["generate", "--config", "bad.json", "--out", "c"]), EXIT_CONFIG);
    fs::write(wd.path().join("unknown.json"), "{\"no_such_field\": 1}").unwrap();
    assert_eq!(cli(wd.path(), &["generate", "--config", "unknown.json", "--out", "c"]), EXIT_CONFIG);
    assert_eq!(cli(wd.path(), &["generate", "--out", "c", "--bogus-flag"]), EXIT_CONFIG);
}

#[test]
fn seed_flag_overrides_config() {
    let wd = tempfile::tempdir().unwrap();
    fs::write(wd.path().join("cfg.json"), small_config().to_string()).unwrap();
    let gen = |out: &str, seed: Option<&str>| {
        let mut args = vec!["generate", "--config", "cfg.json", "--out", out];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert_eq!(cli(wd.path(), &args), EXIT_OK);
        read_corpus(&wd.path().join(out)).unwrap()
    };
    let from_file = gen("a", None);
    let same = gen("b", Some("1"));
    let other = gen("c", Some("2"));
    assert_eq!(from_file, same);
    assert_ne!(from_file, other);
}

#[test]
fn eval_reports_match_library_and_exit_codes() {
    let wd = trained_workdir();
    let p = wd.path();
    for flag in ["true", "false"] {
        assert_eq!(
            cli(
                p,
                &[
                    "eval", "--config", "cfg.json", "--checkpoint", "run", "--corpus", "corpus", "--protocol",
                    "step_r1", "--use-narrations", flag
                ]
            ),
            EXIT_OK
        );
    }
    let with = read_json(&p.join("eval_step_r1_with_narrations.json"));
    let without = read_json(&p.join("eval_step_r1_without_narrations.json"));
    assert_eq!(with["use_narrations"], true);
    assert_eq!(without["use_narrations"], false);

    let cfg = RunConfig::load(&p.join("cfg.json")).unwrap();
    let params = load_checkpoint_params(&p.join("run")).unwrap();
    let corpus = read_corpus(&p.join("corpus")).unwrap();
    let aligned = align_corpus(&corpus, &params, None, cfg.eval.max_frames, false).unwrap();
    let want = corpus_step_r_at_1(&corpus, &aligned, StepMatrix::Direct).unwrap();
    let got = &without["reports"][0];
    assert_eq!(got["hits"].as_u64().unwrap() as usize, want.micro.hits);
    assert_eq!(got["total"].as_u64().unwrap() as usize, want.micro.total);
    assert_eq!(got["value"].as_f64().unwrap(), want.micro.value);
    let lib = evaluate_checkpoint(&cfg, &params, &corpus, Protocol::StepR1, true).unwrap();
    assert_eq!(with["reports"][0]["value"].as_f64().unwrap(), lib.reports[0].value);

    assert_eq!(
        cli(
            p,
            &[
                "eval", "--checkpoint", "run", "--corpus", "corpus", "--protocol", "narration_r1", "--use-narrations",
                "false"
            ]
        ),
        EXIT_PROTOCOL
    );
    assert_eq!(
        cli(p, &["eval", "--checkpoint", "run", "--corpus", "no_corpus_here", "--protocol", "auc"]),
        EXIT_DATA
    );
    assert_eq!(
        cli(p, &["infer", "--checkpoint", "run", "--corpus", "corpus", "--video", "no-such-video", "--out", "inf"]),
        EXIT_DATA
    );

    // A corpus stripped of ground truth cannot be scored.
    let stripped = p.join("corpus_nogt");
    let mut c = corpus.clone();
    for v in &mut c.videos {
        v.gt_step_segments = None;
    }
    stepground::corpus::write_corpus(&c, &stripped).unwrap();
    assert_eq!(
        cli(p, &["eval", "--checkpoint", "run", "--corpus", "corpus_nogt", "--protocol", "step_r1"]),
        EXIT_PROTOCOL
    );
}

#[test]
fn infer_writes_matrices_that_round_trip() {
    let wd = trained_workdir();
    let p = wd.path();
    let corpus = read_corpus(&p.join("corpus")).unwrap();
    let video = corpus.videos[0].id.clone();
    assert_eq!(
        cli(
            p,
            &["infer", "--config", "cfg.json", "--checkpoint", "run", "--corpus", "corpus", "--video", &video, "--out", "inf"]
        ),
        EXIT_OK
    );
    let params = load_checkpoint_params(&p.join("run")).unwrap();
    let single = stepground::corpus::Corpus {
        videos: vec![corpus.videos[0].clone()],
        ..corpus.clone()
    };
    let al = &align_corpus(&single, &params, None, 32, true).unwrap()[0].alignments;
    for (name, m) in [("sv", &al.sv), ("fused", &al.fused), ("nv", &al.nv)] {
        let text = fs::read_to_string(p.join("inf").join(format!("{video}_{name}.csv"))).unwrap();
        let back = csv_to_matrix(&text).unwrap();
        assert_eq!((back.rows(), back.cols()), (m.rows(), m.cols()));
        assert!(back.max_abs_diff(m) <= 5e-7 + 1e-12);

        let pgm = fs::read(p.join("inf").join(format!("{video}_{name}.pgm"))).unwrap();
        let header = format!("P5\n{} {}\n255\n", m.cols(), m.rows());
        assert!(pgm.starts_with(header.as_bytes()));
        let body = &pgm[header.len()..];
        assert_eq!(body.len(), m.len());
        for (b, &x) in body.iter().zip(m.as_slice()) {
            assert_eq!(*b, pixel(x));
        }
    }
    let segs = fs::read_to_string(p.join("inf").join(format!("{video}_segments.jsonl"))).unwrap();
    assert_eq!(segs.lines().count(), al.sv.rows());
}

#[test]
fn golden_csv_and_pgm_bytes() {
    let m = Mat::from_rows(&[vec![-1.0, -0.5, 0.0], vec![0.25, 1.0, 0.1234567]]);
    assert_eq!(
        matrix_to_csv(&m),
        "-1.000000,-0.500000,0.000000\n0.250000,1.000000,0.123457\n"
    );
    let mut want = b"P5\n3 2\n255\n".to_vec();
    want.extend([0u8, 64, 128, 159, 255, 143]);
    assert_eq!(matrix_to_pgm(&m), want);
}

#[test]
fn resume_continues_the_epoch_counter() {
    let wd = trained_workdir();
    let p = wd.path();
    let full = fs::read(p.join("run").join("student.bin")).unwrap();
    let full_log = fs::read_to_string(p.join("run").join("train_log.jsonl")).unwrap();

    let ckpts = p.join("run").join("checkpoints");
    let mut dirs: Vec<_> = fs::read_dir(&ckpts).unwrap().map(|e| e.unwrap().path()).collect();
    dirs.sort();
    fs::remove_dir_all(dirs.last().unwrap()).unwrap();
    fs::remove_file(p.join("run").join("student.bin")).unwrap();

    assert_eq!(
        cli(p, &["train", "--config", "cfg.json", "--corpus", "corpus", "--out", "run", "--resume"]),
        EXIT_OK
    );
    assert_eq!(fs::read(p.join("run").join("student.bin")).unwrap(), full);
    let last = |log: &str| -> Value { serde_json::from_str(log.lines().last().unwrap()).unwrap() };
    let resumed_log = fs::read_to_string(p.join("run").join("train_log.jsonl")).unwrap();
    assert_eq!(last(&resumed_log)["epoch"], last(&full_log)["epoch"]);
    assert_eq!(last(&resumed_log)["epoch"], 2);
}

#[test]
fn top1_strategy_records_agreement() {
    let wd = tempfile::tempdir().unwrap();
    let p = wd.path();
    fs::write(p.join("cfg.json"), small_config().to_string()).unwrap();
    assert_eq!(cli(p, &["generate", "--config", "cfg.json", "--out", "corpus"]), EXIT_OK);
    assert_eq!(
        cli(
            p,
            &["train", "--config", "cfg.json", "--corpus", "corpus", "--out", "run", "--task-strategy", "top1"]
        ),
        EXIT_OK
    );
    let a = read_json(&p.join("run").join("assignment.json"));
    assert_eq!(a["strategy"], "top1");
    let agreement = a["agreement_with_metadata"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&agreement));
    assert_eq!(a["assignment"].as_object().unwrap().len(), 10);
}
