//! Scoring back-ends: cosine, Gaussian PLDA, neural PLDA and the
//! multi-enrollment attention back-end.

mod attention;
mod nplda;
mod plda;

pub use attention::{
    aggregate, batch_cell_probabilities, ffsa_aggregate, sdsa_forward, AttentionConfig, AttentionParams,
    AttentionVars, AttentionWeights, FfsaHead, SdsaHead,
};
pub use nplda::{nplda_init_from_plda, nplda_pair_score, nplda_score, nplda_score_set, nplda_transform, NpldaModel, NpldaParams, NpldaVars, NpldaWeights};
#[cfg(test)]
pub(crate) use plda::{quadratic_score, scoring_matrices};
pub use plda::{lda_fit, plda_fit_em, plda_score, plda_score_multi, Lda, PldaFit, PldaModel, Preproc, PreprocConfig};

use std::collections::{BTreeSet, HashMap};

use crate::encoder::{encode, EncoderConfig, EncoderParams, FeatureSequence};
use crate::error::{Error, Result};
use crate::numkernel::{sigmoid, Tape, Tensor, Var};

/// One embedding with its speaker and utterance ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub speaker_id: String,
    pub utterance_id: String,
    pub vector: Tensor,
}

/// Enrollment id set, test id and ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialPair {
    pub enroll: Vec<String>,
    pub test: String,
    pub target: bool,
}

/// A trial with its raw back-end score and, where defined, a calibrated probability.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: TrialPair,
    pub raw: f64,
    pub probability: Option<f64>,
}

impl ScoredTrial {
    /// The value thresholded for decisions.
    pub fn score(&self) -> f64 {
        self.probability.unwrap_or(self.raw)
    }
}

/// `x / ‖x‖₂` on the tape.
pub fn l2_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.dot(x, x)?;
    if tape.scalar_value(sq) <= 0.0 {
        return Err(Error::contract("cannot normalize a zero vector"));
    }
    let n = tape.sqrt(sq)?;
    let inv = tape.powf(n, -1.0)?;
    tape.mul(x, inv)
}

/// Cosine similarity on the tape.
pub fn cosine_var(tape: &mut Tape, q: Var, h: Var) -> Result<Var> {
    let qn = l2_normalize(tape, q)?;
    let hn = l2_normalize(tape, h)?;
    tape.dot(qn, hn)
}

pub fn cosine_score(q: &[f64], h: &[f64]) -> Result<f64> {
    if q.len() != h.len() {
        return Err(Error::dim("cosine_score", format!("{} vs {}", q.len(), h.len())));
    }
    let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nh = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nq == 0.0 || nh == 0.0 {
        return Err(Error::contract("cosine of a zero vector"));
    }
    let dot: f64 = q.iter().zip(h).map(|(a, b)| a * b).sum();
    Ok((dot / (nq * nh)).clamp(-1.0, 1.0))
}

/// Logistic calibration `σ(a·score + b)`.
pub fn calibrate_lr(score: f64, a: f64, b: f64) -> f64 {
    sigmoid(a * score + b)
}

pub(crate) fn mean_vector(vs: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vs.first().ok_or_else(|| Error::contract("empty enrollment set"))?;
    let mut out = vec![0.0; first.len()];
    for v in vs {
        if v.len() != out.len() {
            return Err(Error::dim("enrollment mean", "embeddings differ in dimension"));
        }
        out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += x);
    }
    let k = vs.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// Back-end selection for [`score_trial`].
#[derive(Debug, Clone)]
pub enum Backend {
    CosineMean,
    Plda(PldaModel),
    Nplda(NpldaModel),
    Attention(AttentionParams),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::CosineMean => "cosine-mean",
            Backend::Plda(_) => "plda",
            Backend::Nplda(_) => "nplda",
            Backend::Attention(_) => "attention",
        }
    }
}

/// Scores one trial from its enrollment and test embeddings.
pub fn score_trial(backend: &Backend, trial: &TrialPair, enroll: &[&[f64]], test: &[f64]) -> Result<ScoredTrial> {
    if enroll.is_empty() {
        return Err(Error::contract("empty enrollment set"));
    }
    let (raw, probability) = match backend {
        Backend::CosineMean => (cosine_score(&mean_vector(enroll)?, test)?, None),
        Backend::Plda(m) => (plda_score_multi(m, enroll, test)?, None),
        Backend::Nplda(m) => (m.score_multi(enroll, test)?, None),
        Backend::Attention(p) => {
            let (cos, prob) = p.score(enroll, test)?;
            (cos, Some(prob))
        }
    };
    Ok(ScoredTrial {
        trial: trial.clone(),
        raw,
        probability,
    })
}

/// Cosine between the embedding of time-concatenated enrollment features and the test embedding.
pub fn cosine_concat_score(
    enroll: &[&FeatureSequence],
    test: &FeatureSequence,
    cfg: &EncoderConfig,
    params: &EncoderParams,
) -> Result<f64> {
    let first = enroll.first().ok_or_else(|| Error::contract("empty enrollment set"))?;
    let c = first.channels();
    let total: usize = enroll.iter().map(|s| s.num_frames()).sum();
    let mut frames = Tensor::zeros(&[c, total]);
    let mut at = 0;
    for s in enroll {
        if s.channels() != c {
            return Err(Error::dim("cosine_concat", "feature channels differ"));
        }
        for r in 0..c {
            for t in 0..s.num_frames() {
                frames.set(r, at + t, s.frames.at(r, t));
            }
        }
        at += s.num_frames();
    }
    let joined = FeatureSequence {
        speaker_id: first.speaker_id.clone(),
        utterance_id: first.utterance_id.clone(),
        label: first.label,
        frames,
    };
    let e = encode(&joined, cfg, params)?;
    let q = encode(test, cfg, params)?;
    cosine_score(q.data(), e.data())
}

/// Scores every trial, resolving ids against `records`. Unknown or
/// duplicated ids fail with an integrity error listing the first ten.
pub fn score_trials(backend: &Backend, trials: &[TrialPair], records: &[EmbeddingRecord]) -> Result<Vec<ScoredTrial>> {
    let mut index: HashMap<&str, usize> = HashMap::with_capacity(records.len());
    let mut dup = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        if index.insert(r.utterance_id.as_str(), i).is_some() {
            dup.insert(r.utterance_id.as_str());
        }
    }
    let mut bad: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for t in trials {
        for id in t.enroll.iter().chain(std::iter::once(&t.test)) {
            if (!index.contains_key(id.as_str()) || dup.contains(id.as_str())) && seen.insert(id.as_str()) {
                bad.push(id.clone());
            }
        }
    }
    if !bad.is_empty() {
        let count = bad.len();
        bad.truncate(10);
        return Err(Error::Integrity { count, ids: bad });
    }
    let vec = |id: &str| records[index[id]].vector.data();
    trials
        .iter()
        .map(|t| {
            let enroll: Vec<&[f64]> = t.enroll.iter().map(|e| vec(e)).collect();
            score_trial(backend, t, &enroll, vec(&t.test))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let e = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        assert!((cosine_score(&e, &e).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_score(&e, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        let scaled: Vec<f64> = e.iter().map(|v| 7.5 * v).collect();
        let h = [1.0, 0.5, -0.25];
        assert!((cosine_score(&scaled, &h).unwrap() - cosine_score(&e, &h).unwrap()).abs() < 1e-12);
    }

    fn rec(spk: &str, utt: &str, v: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            speaker_id: spk.into(),
            utterance_id: utt.into(),
            vector: Tensor::vector(v),
        }
    }

    #[test]
    fn batch_scoring_checks_ids() {
        let recs = vec![rec("a", "a1", vec![1.0, 0.0]), rec("a", "a2", vec![0.9, 0.1]), rec("b", "b1", vec![0.0, 1.0])];
        let t = |e: &[&str], test: &str| TrialPair {
            enroll: e.iter().map(|s| s.to_string()).collect(),
            test: test.into(),
            target: false,
        };
        let ok = score_trials(&Backend::CosineMean, &[t(&["a1", "a2"], "b1")], &recs).unwrap();
        assert_eq!(ok.len(), 1);
        let bad: Vec<TrialPair> = (0..12).map(|i| t(&[&format!("x{i}")], "a1")).collect();
        match score_trials(&Backend::CosineMean, &bad, &recs) {
            Err(Error::Integrity { count, ids }) => {
                assert_eq!(count, 12);
                assert_eq!(ids.len(), 10);
                assert_eq!(ids[0], "x0");
            }
            other => panic!("{other:?}"),
        }
        let mut dup = recs.clone();
        dup.push(rec("b", "b1", vec![1.0, 1.0]));
        assert!(matches!(
            score_trials(&Backend::CosineMean, &[t(&["a1"], "b1")], &dup),
            Err(Error::Integrity { count: 1, .. })
        ));
    }

    #[test]
    fn calibration_examples() {
        assert_eq!(calibrate_lr(0.0, 1.0, 0.0), 0.5);
        assert_eq!(calibrate_lr(0.5, 2.0, -1.0), 0.5);
        let mut prev = 0.0;
        for i in -10..=10 {
            let p = calibrate_lr(i as f64 * 0.1, 3.0, 0.2);
            assert!(p > prev && p < 1.0);
            prev = p;
        }
    }

    #[test]
    fn cosine_mean_identical_enrollments() {
        let trial = TrialPair {
            enroll: vec![],
            test: "t".into(),
            target: true,
        };
        let e = [1.0, 2.0, -0.5];
        let q = [0.2, 1.0, 0.1];
        let one = score_trial(&Backend::CosineMean, &trial, &[&e], &q).unwrap();
        let many = score_trial(&Backend::CosineMean, &trial, &[&e, &e, &e, &e], &q).unwrap();
        assert!((one.raw - many.raw).abs() < 1e-15);
        assert!(score_trial(&Backend::CosineMean, &trial, &[], &q).is_err());
    }
}
