use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use super::optim::{LrSchedule, OptimizerKind, OptimizerState, ScheduleKind};
use super::sampler::{sample_trial_batch, TrialBatchPlan};
use crate::backend::{
    batch_cell_probabilities, nplda_score_set, AttentionConfig, AttentionParams, AttentionVars, EmbeddingRecord,
    NpldaModel,
};
use crate::encoder::{
    class_cosines, forward_embedding, logits, mixup_features, EncoderConfig, EncoderParams, EncoderVars,
    FeatureSequence,
};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::objectives::{
    adcf_soft, age2e_loss, am_softmax, focal_loss, softmax_ce, AmSoftmaxConfig, DcfConfig, FocalConfig,
};

/// RNG streams derived from one seed.
const STREAM_INIT: u64 = 0;
const STREAM_ORDER: u64 = 1;
const STREAM_MIXUP: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub stage: &'static str,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub age2e: Option<f64>,
    pub focal: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            let _ = write!(s, "{} epoch={} lr={:.6e} loss={:.8e}", e.stage, e.epoch, e.lr, e.loss);
            if let Some(v) = e.age2e {
                let _ = write!(s, " age2e={v:.8e}");
            }
            if let Some(v) = e.focal {
                let _ = write!(s, " focal={v:.8e}");
            }
            if let Some(v) = e.accuracy {
                let _ = write!(s, " acc={v:.4}");
            }
            s.push('\n');
        }
        s
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

fn check_finite(loss: f64, stage: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{stage}: loss became {loss} in epoch {epoch}")))
    }
}

fn mixup_weight(alpha: f64, fixed: Option<f64>, rng: &mut impl Rng) -> Result<f64> {
    match fixed {
        Some(b) => Ok(b),
        None => {
            let d = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup Beta({alpha}, {alpha}): {e}")))?;
            Ok(d.sample(rng))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassifierLoss {
    Softmax,
    AmSoftmax(AmSoftmaxConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub loss: ClassifierLoss,
    pub mixup: bool,
    /// Beta(ψ, ψ) parameter of the mixing weight.
    pub mixup_alpha: f64,
    /// Replaces the Beta draw when set.
    pub mixup_fixed_beta: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: OptimizerKind::adamw(1e-4),
            schedule: LrSchedule {
                lr0: 3e-3,
                kind: ScheduleKind::CosineRestarts {
                    t0: 3,
                    mult: 2,
                    lr_min: 1e-5,
                },
            },
            loss: ClassifierLoss::Softmax,
            mixup: false,
            mixup_alpha: 1.0,
            mixup_fixed_beta: None,
            seed: 0,
        }
    }
}

fn check_corpus(corpus: &[FeatureSequence], cfg: &EncoderConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    for x in corpus {
        if x.channels() != cfg.input_dim {
            return Err(Error::dim(
                "training corpus",
                format!("{} has {} channels, encoder expects {}", x.utterance_id, x.channels(), cfg.input_dim),
            ));
        }
        if x.num_frames() < cfg.min_frames() {
            return Err(Error::Length {
                frames: x.num_frames(),
                span: cfg.min_frames(),
            });
        }
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

/// Classification loss of one (possibly mixed) item; returns the loss and the
/// class scores used for accuracy.
fn item_loss(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    w: &EncoderVars,
    frames: Tensor,
    labels: (usize, usize, f64),
    loss: ClassifierLoss,
) -> Result<(Var, Vec<f64>)> {
    let x = tape.constant(frames);
    let e = forward_embedding(tape, cfg, w, x)?;
    let out = match loss {
        ClassifierLoss::Softmax => logits(tape, w, e)?,
        ClassifierLoss::AmSoftmax(_) => class_cosines(tape, w, e)?,
    };
    let one = |tape: &mut Tape, y: usize| match loss {
        ClassifierLoss::Softmax => softmax_ce(tape, out, y),
        ClassifierLoss::AmSoftmax(c) => am_softmax(tape, out, y, c),
    };
    let (y1, y2, beta) = labels;
    let mut l = one(tape, y1)?;
    if beta != 1.0 {
        let l1 = tape.scale(l, beta)?;
        let l2 = one(tape, y2)?;
        let l2 = tape.scale(l2, 1.0 - beta)?;
        l = tape.add(l1, l2)?;
    }
    Ok((l, tape.value(out).data().to_vec()))
}

/// Stage 1: speaker classification training of the encoder.
pub fn pretrain_encoder(
    corpus: &[FeatureSequence],
    cfg: &EncoderConfig,
    tcfg: &PretrainConfig,
) -> Result<(EncoderParams, TrainingLog)> {
    cfg.validate()?;
    check_corpus(corpus, cfg)?;
    if let Some(x) = corpus.iter().find(|x| x.label >= cfg.num_classes) {
        return Err(Error::contract(format!(
            "{} has label {} but the classifier has {} classes",
            x.utterance_id, x.label, cfg.num_classes
        )));
    }
    if tcfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = EncoderParams::init(cfg, &mut stream(tcfg.seed, STREAM_INIT))?;
    let mut order_rng = stream(tcfg.seed, STREAM_ORDER);
    let mut mix_rng = stream(tcfg.seed, STREAM_MIXUP);
    let mut opt = OptimizerState::new(tcfg.optimizer, tcfg.schedule.lr0)?;
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    for epoch in 0..tcfg.epochs {
        opt.lr = tcfg.schedule.at(epoch);
        order.shuffle(&mut order_rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(tcfg.batch_size) {
            let mut tape = Tape::new();
            let w = params.bind(&mut tape, true);
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let x = &corpus[i];
                let (frames, labels) = if tcfg.mixup {
                    let j = mix_rng.random_range(0..corpus.len());
                    let beta = mixup_weight(tcfg.mixup_alpha, tcfg.mixup_fixed_beta, &mut mix_rng)?;
                    let (f, y) = mixup_features(&x.frames, x.label, &corpus[j].frames, corpus[j].label, beta)?;
                    (f, (y.first, y.second, y.weight))
                } else {
                    (x.frames.clone(), (x.label, x.label, 1.0))
                };
                let dominant = if labels.2 >= 0.5 { labels.0 } else { labels.1 };
                let (l, scores) = item_loss(&mut tape, cfg, &w, frames, labels, tcfg.loss)?;
                if argmax(&scores) == dominant {
                    correct += 1;
                }
                losses.push(l);
            }
            let stacked = tape.concat(&losses)?;
            let sum = tape.sum(stacked)?;
            let mean = tape.scale(sum, 1.0 / batch.len() as f64)?;
            let value = tape.scalar_value(mean);
            check_finite(value, "pretrain", epoch)?;
            total += tape.scalar_value(sum);
            let grads = tape.backward(mean)?;
            let g: Vec<Tensor> = w.named().iter().map(|(_, v)| grads.wrt(**v)).collect();
            opt.apply(params.values_mut(), &g)?;
        }
        log.epochs.push(EpochLog {
            stage: "pretrain",
            epoch,
            lr: opt.lr,
            loss: total / corpus.len() as f64,
            age2e: None,
            focal: None,
            accuracy: Some(correct as f64 / corpus.len() as f64),
        });
    }
    Ok((params, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Encoder learning rate relative to the back-end's.
    pub encoder_lr_scale: f64,
    pub lambda: f64,
    pub focal: FocalConfig,
    /// Share of test-branch items mixed per batch.
    pub mixup_fraction: f64,
    pub mixup_alpha: f64,
    pub mixup_fixed_beta: Option<f64>,
    pub frozen_encoder: bool,
    pub attention: AttentionConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batches_per_epoch: 10,
            speakers_per_batch: 8,
            utts_per_speaker: 4,
            optimizer: OptimizerKind::sgd(0.9),
            schedule: LrSchedule {
                lr0: 1e-4,
                kind: ScheduleKind::Exp { gamma: 0.95 },
            },
            encoder_lr_scale: 1.0,
            lambda: 0.6,
            focal: FocalConfig::default(),
            mixup_fraction: 0.5,
            mixup_alpha: 1.0,
            mixup_fixed_beta: None,
            frozen_encoder: false,
            attention: AttentionConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Shortened schedule with learning rates suited to desk-scale corpora;
    /// the pretrained encoder moves at 0.3× the back-end rate.
    pub fn desk() -> Self {
        Self {
            epochs: 20,
            batches_per_epoch: 40,
            schedule: LrSchedule {
                lr0: 0.1,
                kind: ScheduleKind::Exp { gamma: 0.95 },
            },
            encoder_lr_scale: 0.3,
            ..Self::default()
        }
    }
}

/// Test-branch mixing and soft speaker targets for an `S × U` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    /// `[R × S·U]` row mixing of the batch embeddings; `None` means tests = embeddings.
    pub mixing: Option<Tensor>,
    /// `[R × S]` speaker distribution per test row.
    pub targets: Tensor,
}

impl BatchTargets {
    /// Each test row `n·U + m` has its own speaker as target; a `fraction`
    /// of rows is mixed with utterance `m` of another random batch speaker.
    pub fn draw(
        speakers: usize,
        utts: usize,
        fraction: f64,
        alpha: f64,
        fixed_beta: Option<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Config(format!("mixup fraction {fraction} outside [0, 1]")));
        }
        let r = speakers * utts;
        let mut targets = Tensor::zeros(&[r, speakers]);
        let mut mixing = Tensor::zeros(&[r, r]);
        let mut any = false;
        for n in 0..speakers {
            for m in 0..utts {
                let row = n * utts + m;
                if fraction > 0.0 && rng.random_bool(fraction) {
                    let other = (n + 1 + rng.random_range(0..speakers - 1)) % speakers;
                    let beta = mixup_weight(alpha, fixed_beta, rng)?;
                    mixing.set(row, row, beta);
                    mixing.set(row, other * utts + m, 1.0 - beta);
                    targets.set(row, n, beta);
                    targets.set(row, other, 1.0 - beta);
                    any = true;
                } else {
                    mixing.set(row, row, 1.0);
                    targets.set(row, n, 1.0);
                }
            }
        }
        Ok(Self {
            mixing: any.then_some(mixing),
            targets,
        })
    }

    pub fn unmixed(speakers: usize, utts: usize) -> Self {
        let mut targets = Tensor::zeros(&[speakers * utts, speakers]);
        for n in 0..speakers {
            for m in 0..utts {
                targets.set(n * utts + m, n, 1.0);
            }
        }
        Self { mixing: None, targets }
    }
}

/// Loss terms for one batch, all divided by the number of test rows.
#[derive(Debug, Clone, Copy)]
pub struct BatchLoss {
    pub total: Var,
    pub age2e: Var,
    pub focal: Var,
}

/// Combined loss of the attention back-end over every cell of an `S × U` batch.
pub fn attention_batch_loss(
    tape: &mut Tape,
    w: &AttentionVars,
    emb: Var,
    speakers: usize,
    utts: usize,
    bt: &BatchTargets,
    lambda: f64,
    focal: FocalConfig,
) -> Result<BatchLoss> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    let tests = match &bt.mixing {
        Some(m) => {
            let m = tape.constant(m.clone());
            tape.matmul(m, emb)?
        }
        None => emb,
    };
    let test_utt: Vec<usize> = (0..speakers * utts).map(|r| r % utts).collect();
    let (_, probs) = batch_cell_probabilities(tape, w, emb, speakers, utts, tests, &test_utt)?;
    let rows = 1.0 / (speakers * utts) as f64;
    let a = age2e_loss(tape, probs, &bt.targets)?;
    let a = tape.scale(a, rows)?;
    let f = focal_loss(tape, probs, &bt.targets, focal)?;
    let f = tape.scale(f, rows)?;
    let la = tape.scale(a, lambda)?;
    let lf = tape.scale(f, 1.0 - lambda)?;
    Ok(BatchLoss {
        total: tape.add(la, lf)?,
        age2e: a,
        focal: f,
    })
}

/// Embeddings of the batch rows `n·U + m` through the encoder on the tape.
pub fn encode_batch(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    w: &EncoderVars,
    corpus: &[FeatureSequence],
    plan: &TrialBatchPlan,
) -> Result<Var> {
    let rows = plan
        .flat_items()
        .into_iter()
        .map(|i| {
            let x = tape.constant(corpus[i].frames.clone());
            forward_embedding(tape, cfg, w, x)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.stack_rows(&rows)
}

enum Embedder<'a> {
    Fixed(&'a [EmbeddingRecord]),
    Joint {
        cfg: &'a EncoderConfig,
        corpus: &'a [FeatureSequence],
        params: EncoderParams,
        opt: OptimizerState,
    },
}

fn backend_loop(mut src: Embedder<'_>, fcfg: &FinetuneConfig, stage: &'static str) -> Result<(AttentionParams, Option<EncoderParams>, TrainingLog)> {
    fcfg.attention.validate()?;
    let (s, u) = (fcfg.speakers_per_batch, fcfg.utts_per_speaker);
    let mut backend = AttentionParams::init(&fcfg.attention, &mut stream(fcfg.seed, STREAM_INIT))?;
    let mut order_rng = stream(fcfg.seed, STREAM_ORDER);
    let mut mix_rng = stream(fcfg.seed, STREAM_MIXUP);
    let mut opt = OptimizerState::new(fcfg.optimizer, fcfg.schedule.lr0)?;
    let mut log = TrainingLog::default();
    for epoch in 0..fcfg.epochs {
        opt.lr = fcfg.schedule.at(epoch);
        if let Embedder::Joint { opt: eopt, .. } = &mut src {
            eopt.lr = opt.lr * fcfg.encoder_lr_scale;
        }
        let (mut total, mut age, mut foc) = (0.0, 0.0, 0.0);
        for _ in 0..fcfg.batches_per_epoch {
            let mut tape = Tape::new();
            let w = backend.bind(&mut tape, true);
            let (plan, emb, enc_vars) = match &src {
                Embedder::Fixed(records) => {
                    let plan = sample_trial_batch(records, s, u, &mut order_rng)?;
                    let rows: Vec<Vec<f64>> = plan
                        .flat_items()
                        .into_iter()
                        .map(|i| records[i].vector.data().to_vec())
                        .collect();
                    let emb = tape.constant(Tensor::from_rows(&rows)?);
                    (plan, emb, None)
                }
                Embedder::Joint { cfg, corpus, params, .. } => {
                    let plan = sample_trial_batch(corpus, s, u, &mut order_rng)?;
                    let ev = params.bind(&mut tape, true);
                    let emb = encode_batch(&mut tape, cfg, &ev, corpus, &plan)?;
                    (plan, emb, Some(ev))
                }
            };
            if tape.value(emb).cols() != fcfg.attention.dim {
                return Err(Error::dim(
                    "fine-tuning",
                    format!("embeddings have dim {}, back-end expects {}", tape.value(emb).cols(), fcfg.attention.dim),
                ));
            }
            let bt = BatchTargets::draw(s, u, fcfg.mixup_fraction, fcfg.mixup_alpha, fcfg.mixup_fixed_beta, &mut mix_rng)?;
            let l = attention_batch_loss(&mut tape, &w, emb, plan.speakers, plan.utts, &bt, fcfg.lambda, fcfg.focal)?;
            let value = tape.scalar_value(l.total);
            check_finite(value, stage, epoch)?;
            total += value;
            age += tape.scalar_value(l.age2e);
            foc += tape.scalar_value(l.focal);
            let grads = tape.backward(l.total)?;
            let g: Vec<Tensor> = w.named().iter().map(|(_, v)| grads.wrt(**v)).collect();
            opt.apply(backend.values_mut(), &g)?;
            if let (Some(ev), Embedder::Joint { params, opt: eopt, .. }) = (enc_vars, &mut src) {
                let g: Vec<Tensor> = ev.named().iter().map(|(_, v)| grads.wrt(**v)).collect();
                eopt.apply(params.values_mut(), &g)?;
            }
        }
        let nb = fcfg.batches_per_epoch.max(1) as f64;
        log.epochs.push(EpochLog {
            stage,
            epoch,
            lr: opt.lr,
            loss: total / nb,
            age2e: Some(age / nb),
            focal: Some(foc / nb),
            accuracy: None,
        });
    }
    let encoder = match src {
        Embedder::Joint { params, .. } => Some(params),
        Embedder::Fixed(_) => None,
    };
    Ok((backend, encoder, log))
}

/// Trains a freshly initialised attention back-end on fixed embeddings.
pub fn train_backend(embeddings: &[EmbeddingRecord], fcfg: &FinetuneConfig) -> Result<(AttentionParams, TrainingLog)> {
    if embeddings.is_empty() {
        return Err(Error::EmptyInput("embedding corpus"));
    }
    let (b, _, log) = backend_loop(Embedder::Fixed(embeddings), fcfg, "backend")?;
    Ok((b, log))
}

/// Stage 2: a new attention back-end on top of the pretrained encoder,
/// trained end to end, or back-end only when `frozen_encoder` is set.
pub fn finetune_joint(
    encoder: &EncoderParams,
    cfg: &EncoderConfig,
    corpus: &[FeatureSequence],
    fcfg: &FinetuneConfig,
) -> Result<(EncoderParams, AttentionParams, TrainingLog)> {
    cfg.validate()?;
    encoder.check_shapes(cfg)?;
    check_corpus(corpus, cfg)?;
    if fcfg.frozen_encoder {
        let records = embed_corpus(corpus, cfg, encoder)?;
        let (b, log) = train_backend(&records, fcfg)?;
        return Ok((encoder.clone(), b, log));
    }
    let eopt = OptimizerState::new(fcfg.optimizer, fcfg.schedule.lr0 * fcfg.encoder_lr_scale)?;
    let src = Embedder::Joint {
        cfg,
        corpus,
        params: encoder.clone(),
        opt: eopt,
    };
    let (b, e, log) = backend_loop(src, fcfg, "finetune")?;
    Ok((e.expect("joint mode returns the encoder"), b, log))
}

/// Embeds every sequence with the given encoder.
pub fn embed_corpus(corpus: &[FeatureSequence], cfg: &EncoderConfig, params: &EncoderParams) -> Result<Vec<EmbeddingRecord>> {
    corpus
        .iter()
        .map(|x| {
            Ok(EmbeddingRecord {
                speaker_id: x.speaker_id.clone(),
                utterance_id: x.utterance_id.clone(),
                vector: crate::encoder::encode(x, cfg, params)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpldaTrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub dcf: DcfConfig,
    pub seed: u64,
}

impl Default for NpldaTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batches_per_epoch: 10,
            speakers_per_batch: 8,
            utts_per_speaker: 4,
            optimizer: OptimizerKind::adamw(0.0),
            lr: 1e-3,
            dcf: DcfConfig::default(),
            seed: 0,
        }
    }
}

/// Discriminative NPLDA training with the soft detection cost on sampled trial batches.
pub fn train_nplda(
    init: &NpldaModel,
    records: &[EmbeddingRecord],
    tcfg: &NpldaTrainConfig,
) -> Result<(NpldaModel, TrainingLog)> {
    let mut model = init.clone();
    let mut rng = stream(tcfg.seed, STREAM_ORDER);
    let mut opt = OptimizerState::new(tcfg.optimizer, tcfg.lr)?;
    let mut log = TrainingLog::default();
    for epoch in 0..tcfg.epochs {
        let mut total = 0.0;
        for _ in 0..tcfg.batches_per_epoch {
            let plan = sample_trial_batch(records, tcfg.speakers_per_batch, tcfg.utts_per_speaker, &mut rng)?;
            let mut tape = Tape::new();
            let w = model.params.bind(&mut tape, true);
            let mut scores = Vec::with_capacity(plan.cells.len());
            let mut labels = Vec::with_capacity(plan.cells.len());
            for c in &plan.cells {
                let test = tape.constant(records[plan.items[c.test_speaker][c.test_utt]].vector.clone());
                let enroll: Vec<Var> = c
                    .enroll_utts
                    .iter()
                    .map(|&m| tape.constant(records[plan.items[c.enroll_speaker][m]].vector.clone()))
                    .collect();
                scores.push(nplda_score_set(&mut tape, &w, model.length_norm, &enroll, test)?);
                labels.push(c.target());
            }
            let s = tape.concat(&scores)?;
            let (l, _) = adcf_soft(&mut tape, s, &labels, &tcfg.dcf)?;
            let value = tape.scalar_value(l);
            check_finite(value, "nplda", epoch)?;
            total += value;
            let grads = tape.backward(l)?;
            let g: Vec<Tensor> = w.named().iter().map(|(_, v)| grads.wrt(**v)).collect();
            opt.apply(model.params.values_mut(), &g)?;
        }
        log.epochs.push(EpochLog {
            stage: "nplda",
            epoch,
            lr: opt.lr,
            loss: total / tcfg.batches_per_epoch.max(1) as f64,
            age2e: None,
            focal: None,
            accuracy: None,
        });
    }
    Ok((model, log))
}
