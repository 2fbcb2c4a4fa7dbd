//! The six subcommands as library functions over explicit paths.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super::config::RunConfig;
use super::formats::{
    format_det, format_scores, format_trials, parse_scores, parse_trials, read_embeddings, read_features, read_text,
    write_embeddings, write_features, write_file, ScoreLine,
};
use super::model::SavedModel;
use crate::backend::{
    cosine_concat_score, nplda_init_from_plda, plda_fit_em, score_trials, EmbeddingRecord, ScoredTrial,
    TrialPair,
};
use crate::encoder::{EncoderParams, FeatureSequence};
use crate::error::{Error, Result};
use crate::objectives::{dcf_beta, det_points, eer, min_dcf};
use crate::pipeline::{embed_corpus, finetune_joint, pretrain_encoder, train_nplda, TrainingLog};
use crate::synthdata::{gen_feature_corpus, gen_trials};

/// Default artifact names inside the output directory.
pub const TRAIN_FEATURES: &str = "train.fea";
pub const EVAL_FEATURES: &str = "eval.fea";
pub const TRIALS: &str = "trials.txt";
pub const ENCODER: &str = "encoder.enkt";
pub const MODEL: &str = "model.enkt";
pub const EVAL_EMBEDDINGS: &str = "eval.emb";
pub const SCORES: &str = "scores.txt";
pub const REPORT: &str = "report.txt";
pub const DET: &str = "det.csv";

/// Log text: one timestamp header line, the resolved config, then `body`.
fn write_log(path: &Path, command: &str, cfg: &RunConfig, body: &str) -> Result<()> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut s = format!("# {command} started at unix time {secs}\n");
    for line in cfg.resolved().lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str(body);
    write_file(path, s)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes train and eval feature corpora and the trial list.
///
/// Both corpora come from one generated set so they share genre offsets;
/// the first `data.train_speakers` speakers train, the rest evaluate.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let spec = cfg.corpus_spec()?;
    let n_train = cfg.usize("data.train_speakers")?;
    let (train, eval): (Vec<FeatureSequence>, Vec<FeatureSequence>) =
        gen_feature_corpus(&spec)?.into_iter().partition(|x| x.label < n_train);
    let mut trials = Vec::new();
    for k in cfg.enroll_counts()? {
        trials.extend(gen_trials(&eval, k, cfg.seed()?.wrapping_add(k as u64))?);
    }
    write_features(&out.join(TRAIN_FEATURES), &train)?;
    write_features(&out.join(EVAL_FEATURES), &eval)?;
    write_file(&out.join(TRIALS), format_trials(&trials)?)?;
    let body = format!(
        "train utterances={} eval utterances={} trials={}\n",
        train.len(),
        eval.len(),
        trials.len()
    );
    write_log(&out.join("gen-data.log"), "gen-data", cfg, &body)
}

/// Stage 1: classification pretraining of the encoder.
pub fn pretrain(cfg: &RunConfig, train: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ecfg = cfg.encoder()?;
    let corpus = read_features(train, Some(ecfg.input_dim))?;
    let (params, log) = pretrain_encoder(&corpus, &ecfg, &cfg.pretrain()?)?;
    SavedModel {
        encoder: Some(params),
        ..Default::default()
    }
    .save(&out.join(ENCODER), cfg)?;
    write_log(&out.join("pretrain.log"), "pretrain", cfg, &log.to_text())
}

/// Stage 2: fits the back-end named by `finetune.backend` on top of the
/// pretrained encoder.
pub fn finetune(cfg: &RunConfig, train: &Path, encoder: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let ecfg = cfg.encoder()?;
    let corpus = read_features(train, Some(ecfg.input_dim))?;
    let enc = SavedModel::load(encoder, cfg)?
        .encoder
        .ok_or_else(|| Error::Compatibility(format!("{} holds no encoder", encoder.display())))?;
    let mut model = SavedModel::default();
    let mut log = TrainingLog::default();
    match cfg.get("finetune.backend") {
        "attention" => {
            let (e, a, l) = finetune_joint(&enc, &ecfg, &corpus, &cfg.finetune()?)?;
            model.encoder = Some(e);
            model.attention = Some(a);
            log = l;
        }
        "plda" | "nplda" => {
            let records = embed_corpus(&corpus, &ecfg, &enc)?;
            let pre = cfg.preproc()?;
            let dim = pre.lda_dim.unwrap_or(ecfg.embedding_dim);
            let plda = plda_fit_em(&records, pre, cfg.plda_rank(dim)?, cfg.usize("plda.iters")?)?.model;
            if cfg.get("finetune.backend") == "nplda" {
                let (m, l) = train_nplda(&nplda_init_from_plda(&plda), &records, &cfg.nplda()?)?;
                model.nplda = Some(m);
                log = l;
            } else {
                model.plda = Some(plda);
            }
            model.encoder = Some(enc);
        }
        "cosine" => model.encoder = Some(enc),
        other => {
            return Err(Error::Config(format!(
                "finetune.backend `{other}`: expected attention, plda, nplda or cosine"
            )))
        }
    }
    model.save(&out.join(MODEL), cfg)?;
    write_log(&out.join("finetune.log"), "finetune", cfg, &log.to_text())
}

/// Scoring input: precomputed embeddings or features to embed.
#[derive(Debug, Clone)]
pub enum ScoreInput {
    Embeddings(PathBuf),
    Features(PathBuf),
}

fn check_ids(trials: &[TrialPair], ids: &HashMap<&str, usize>) -> Result<()> {
    let mut bad = Vec::new();
    let mut seen = BTreeSet::new();
    for t in trials {
        for id in t.enroll.iter().chain(std::iter::once(&t.test)) {
            if !ids.contains_key(id.as_str()) && seen.insert(id.as_str()) {
                bad.push(id.clone());
            }
        }
    }
    if bad.is_empty() {
        return Ok(());
    }
    let count = bad.len();
    bad.truncate(10);
    Err(Error::Integrity { count, ids: bad })
}

fn need<T>(part: Option<T>, what: &str) -> Result<T> {
    part.ok_or_else(|| Error::Compatibility(format!("model holds no {what}")))
}

fn cosine_concat(
    cfg: &RunConfig,
    encoder: &EncoderParams,
    corpus: &[FeatureSequence],
    trials: &[TrialPair],
) -> Result<Vec<ScoredTrial>> {
    let ecfg = cfg.encoder()?;
    let mut index = HashMap::new();
    for (i, x) in corpus.iter().enumerate() {
        if index.insert(x.utterance_id.as_str(), i).is_some() {
            return Err(Error::Integrity {
                count: 1,
                ids: vec![x.utterance_id.clone()],
            });
        }
    }
    check_ids(trials, &index)?;
    trials
        .iter()
        .map(|t| {
            let enroll: Vec<&FeatureSequence> = t.enroll.iter().map(|e| &corpus[index[e.as_str()]]).collect();
            let raw = cosine_concat_score(&enroll, &corpus[index[t.test.as_str()]], &ecfg, encoder)?;
            Ok(ScoredTrial {
                trial: t.clone(),
                raw,
                probability: None,
            })
        })
        .collect()
}

/// Scores every trial with the `score.backend` choice and writes the score file.
pub fn score(cfg: &RunConfig, model: &Path, trials: &Path, input: &ScoreInput, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let m = SavedModel::load(model, cfg)?;
    let trial_list = parse_trials(&read_text(trials)?)?;
    let ecfg = cfg.encoder()?;
    let choice = cfg.get("score.backend");
    let scored = if choice == "cosine-concat" && !m.is_empty() {
        let ScoreInput::Features(path) = input else {
            return Err(Error::Config("cosine-concat scoring needs feature input".into()));
        };
        let corpus = read_features(path, Some(ecfg.input_dim))?;
        cosine_concat(cfg, need(m.encoder.as_ref(), "encoder")?, &corpus, &trial_list)?
    } else {
        let backend = m.backend(choice)?;
        let records: Vec<EmbeddingRecord> = match input {
            ScoreInput::Embeddings(path) => read_embeddings(path, Some(ecfg.embedding_dim))?,
            ScoreInput::Features(path) => {
                let corpus = read_features(path, Some(ecfg.input_dim))?;
                let recs = embed_corpus(&corpus, &ecfg, need(m.encoder.as_ref(), "encoder")?)?;
                write_embeddings(&out.join(EVAL_EMBEDDINGS), &recs)?;
                recs
            }
        };
        score_trials(&backend, &trial_list, &records)?
    };
    write_file(&out.join(SCORES), format_scores(&scored))
}

/// Scores matched with their trials by line index.
fn aligned(scores: &[ScoreLine], trials: &[TrialPair]) -> Result<Vec<(f64, bool, usize)>> {
    if scores.len() != trials.len() {
        return Err(Error::Format(format!(
            "{} scores for {} trials",
            scores.len(),
            trials.len()
        )));
    }
    scores
        .iter()
        .map(|s| {
            let t = trials
                .get(s.index)
                .ok_or_else(|| Error::Format(format!("score index {} has no trial", s.index)))?;
            if t.target != s.target {
                return Err(Error::Format(format!("label of score {} disagrees with its trial", s.index)));
            }
            Ok((s.score, s.target, t.enroll.len()))
        })
        .collect()
}

fn metrics_line(rows: &[&(f64, bool, usize)], beta: f64) -> Result<Option<(f64, f64)>> {
    let pos = rows.iter().filter(|r| r.1).count();
    if pos == 0 || pos == rows.len() {
        return Ok(None);
    }
    let s: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
    Ok(Some((eer(&s, &y)?, min_dcf(&s, &y, beta)?)))
}

/// Report text for scores and their trials.
pub fn report_text(cfg: &RunConfig, scores: &[ScoreLine], trials: &[TrialPair]) -> Result<String> {
    let rows = aligned(scores, trials)?;
    let dcf = cfg.dcf()?;
    let beta = dcf_beta(&dcf)?;
    let all: Vec<_> = rows.iter().collect();
    let (e, d) = metrics_line(&all, beta)?
        .ok_or_else(|| Error::EmptyInput("evaluation needs both target and non-target trials"))?;
    let pos = rows.iter().filter(|r| r.1).count();
    let pt = dcf.p_target;
    let mut s = String::new();
    let _ = writeln!(s, "trials\t{}", rows.len());
    let _ = writeln!(s, "targets\t{pos}");
    let _ = writeln!(s, "nontargets\t{}", rows.len() - pos);
    let _ = writeln!(s, "p_target\t{pt}");
    let _ = writeln!(s, "EER(%)\t{:.4}", 100.0 * e);
    let _ = writeln!(s, "minDCF({pt})\t{d:.4}");
    let _ = writeln!(s, "K\ttrials\tEER(%)\tminDCF({pt})");
    for k in 1..=5usize {
        let bucket: Vec<_> = rows.iter().filter(|r| if k < 5 { r.2 == k } else { r.2 >= 5 }).collect();
        let label = if k < 5 { k.to_string() } else { ">=5".into() };
        match metrics_line(&bucket, beta)? {
            Some((e, d)) => {
                let _ = writeln!(s, "{label}\t{}\t{:.4}\t{d:.4}", bucket.len(), 100.0 * e);
            }
            None => {
                let _ = writeln!(s, "{label}\t{}\tn/a\tn/a", bucket.len());
            }
        }
    }
    Ok(s)
}

pub fn eval(cfg: &RunConfig, scores: &Path, trials: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let s = parse_scores(&read_text(scores)?)?;
    let t = parse_trials(&read_text(trials)?)?;
    write_file(&out.join(REPORT), report_text(cfg, &s, &t)?)
}

pub fn det(scores: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let s = parse_scores(&read_text(scores)?)?;
    let (v, y): (Vec<f64>, Vec<bool>) = s.iter().map(|l| (l.score, l.target)).unzip();
    write_file(&out.join(DET), format_det(&det_points(&v, &y)?))
}
