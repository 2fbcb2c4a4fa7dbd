use std::collections::HashMap;
use std::path::Path;
use std::process::Command;

use enkt::cli::formats::{format_trials, parse_scores, parse_trials};

const SMALL: &str = "\
data.train_speakers = 8
data.eval_speakers = 4
data.utterances = 7
data.min_frames = 20
data.max_frames = 28
trials.enroll_counts = 1, 2, 5
encoder.layers = -1,0,1:16; -2,0,2:16
encoder.embedding_dim = 8
attention.sdsa_heads = 2
attention.ffsa_heads = 2
attention.ffsa_hidden = 8
pretrain.epochs = 3
pretrain.batch_size = 16
finetune.epochs = 2
finetune.batches_per_epoch = 3
finetune.speakers = 4
finetune.utts = 3
nplda.epochs = 2
nplda.batches_per_epoch = 2
plda.rank = 3
";

fn enkt(dir: &Path, args: &[&str]) -> i32 {
    let cfg = dir.join("small.cfg");
    if !cfg.exists() {
        std::fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_enkt"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir)
        .args(args)
        .status()
        .unwrap()
        .code()
        .unwrap()
}

fn pipeline(dir: &Path, extra: &[&str]) {
    for cmd in ["gen-data", "pretrain", "finetune", "score", "eval", "det"] {
        let mut args = extra.to_vec();
        args.insert(0, cmd);
        assert_eq!(enkt(dir, &args), 0, "{cmd} failed");
    }
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn attention_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d, &[]);
    for f in ["train.fea", "eval.fea", "trials.txt", "encoder.enkt", "model.enkt", "eval.emb", "det.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let trials = parse_trials(&read(d, "trials.txt")).unwrap();
    let scores = parse_scores(&read(d, "scores.txt")).unwrap();
    assert_eq!(trials.len(), scores.len());
    // attention scores are probabilities
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(&s.score)));
    let report = read(d, "report.txt");
    for k in ["\n1\t", "\n2\t", "\n>=5\t", "EER(%)\t", "minDCF(0.01)\t"] {
        assert!(report.contains(k), "{report}");
    }
    assert!(report.contains("\n3\t0\tn/a\tn/a\n"), "{report}");
    assert!(read(d, "det.csv").starts_with("p_fa,p_miss\n"));
    let log = read(d, "finetune.log");
    assert!(log.contains("# finetune.epochs = 2"));
    assert!(log.contains("finetune epoch=1"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), &["--seed", "11"]);
    pipeline(b.path(), &["--seed", "11"]);
    for f in ["train.fea", "trials.txt", "encoder.enkt", "model.enkt", "scores.txt", "report.txt", "det.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // logs differ at most in the timestamp header
    let strip = |p: &Path| read(p, "pretrain.log").lines().skip(1).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(a.path()), strip(b.path()));
}

#[test]
fn shuffled_trials_score_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d, &[]);
    let trials = parse_trials(&read(d, "trials.txt")).unwrap();
    let scores = parse_scores(&read(d, "scores.txt")).unwrap();
    let key = |t: &enkt::backend::TrialPair| format!("{:?}{}", t.enroll, t.test);
    let base: HashMap<String, f64> = scores.iter().map(|s| (key(&trials[s.index]), s.score)).collect();

    let mut shuffled = trials.clone();
    shuffled.reverse();
    shuffled.swap(0, 7);
    let sub = d.join("shuffled");
    std::fs::create_dir(&sub).unwrap();
    std::fs::write(sub.join("trials.txt"), format_trials(&shuffled).unwrap()).unwrap();
    let model = d.join("model.enkt");
    let fea = d.join("eval.fea");
    let code = enkt(
        &sub,
        &["score", "--model", model.to_str().unwrap(), "--features", fea.to_str().unwrap()],
    );
    assert_eq!(code, 0);
    for s in parse_scores(&read(&sub, "scores.txt")).unwrap() {
        assert_eq!(base[&key(&shuffled[s.index])].to_bits(), s.score.to_bits());
    }

    // precomputed embeddings give the same scores as the features they came from
    let emb = d.join("eval.emb");
    let sub2 = d.join("from_emb");
    std::fs::create_dir(&sub2).unwrap();
    let trials_path = d.join("trials.txt");
    let code = enkt(
        &sub2,
        &[
            "score",
            "--model",
            model.to_str().unwrap(),
            "--embeddings",
            emb.to_str().unwrap(),
            "--trials",
            trials_path.to_str().unwrap(),
        ],
    );
    assert_eq!(code, 0);
    for (a, b) in parse_scores(&read(&sub2, "scores.txt")).unwrap().iter().zip(&scores) {
        // the embedding file stores f32
        assert!((a.score - b.score).abs() < 1e-5);
    }
}

#[test]
fn baseline_backends_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(enkt(d, &["gen-data"]), 0);
    assert_eq!(enkt(d, &["pretrain"]), 0);
    for (backend, scorer) in [("plda", "auto"), ("nplda", "auto"), ("cosine", "cosine"), ("cosine", "cosine-concat")] {
        let set_b = format!("finetune.backend={backend}");
        let set_s = format!("score.backend={scorer}");
        for cmd in ["finetune", "score", "eval"] {
            assert_eq!(enkt(d, &["--set", &set_b, "--set", &set_s, cmd]), 0, "{backend}/{scorer} {cmd}");
        }
        assert!(read(d, "report.txt").contains("EER(%)"));
    }
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(enkt(d, &["--set", "nonsense=1", "gen-data"]), 1);
    assert_eq!(enkt(d, &["no-such-command"]), 1);
    assert_eq!(enkt(d, &["eval"]), 2);
    assert_eq!(enkt(d, &["gen-data"]), 0);
    assert_eq!(enkt(d, &["pretrain"]), 0);
    assert_eq!(enkt(d, &["finetune"]), 0);

    std::fs::write(d.join("bad_trials.txt"), "spk0008-g0-u000\tghost\t1\n").unwrap();
    assert_eq!(enkt(d, &["score", "--trials", d.join("bad_trials.txt").to_str().unwrap()]), 2);
    std::fs::write(d.join("bad_trials.txt"), "a,a\tb\t1\n").unwrap();
    assert_eq!(enkt(d, &["score", "--trials", d.join("bad_trials.txt").to_str().unwrap()]), 2);

    // altered architecture no longer matches the saved model
    assert_eq!(enkt(d, &["--set", "encoder.embedding_dim=4", "score"]), 2);
    std::fs::write(d.join("empty.enkt"), b"ENKT\0\0\0\0").unwrap();
    assert_eq!(enkt(d, &["score", "--model", d.join("empty.enkt").to_str().unwrap()]), 2);
}
