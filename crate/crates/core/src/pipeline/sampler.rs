use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::backend::EmbeddingRecord;
use crate::encoder::{FeatureSequence, MixedLabel};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

/// Anything carrying speaker and utterance ids.
pub trait SpeakerItem {
    fn speaker(&self) -> &str;
    fn utterance(&self) -> &str;
}

impl SpeakerItem for FeatureSequence {
    fn speaker(&self) -> &str {
        &self.speaker_id
    }
    fn utterance(&self) -> &str {
        &self.utterance_id
    }
}

impl SpeakerItem for EmbeddingRecord {
    fn speaker(&self) -> &str {
        &self.speaker_id
    }
    fn utterance(&self) -> &str {
        &self.utterance_id
    }
}

/// Test utterance `(l, m)` against enrollment speaker `n` with the
/// enrollment utterance indices (all of speaker `n`'s except `m`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialCell {
    pub test_speaker: usize,
    pub test_utt: usize,
    pub enroll_speaker: usize,
    pub enroll_utts: Vec<usize>,
}

impl TrialCell {
    pub fn target(&self) -> bool {
        self.test_speaker == self.enroll_speaker
    }
}

/// `S` speakers × `U` utterances drawn for one batch, and every trial cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialBatchPlan {
    pub speakers: usize,
    pub utts: usize,
    /// Corpus speaker id of each batch speaker.
    pub speaker_ids: Vec<String>,
    /// `items[n][m]`: corpus index of utterance `m` of batch speaker `n`.
    pub items: Vec<Vec<usize>>,
    pub cells: Vec<TrialCell>,
}

impl TrialBatchPlan {
    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.target()).count()
    }

    pub fn negatives(&self) -> usize {
        self.cells.len() - self.positives()
    }

    /// Corpus indices in batch row order `n·U + m`.
    pub fn flat_items(&self) -> Vec<usize> {
        self.items.iter().flatten().copied().collect()
    }
}

/// All `S²·U` cells of an `S × U` batch, ordered by `(l, m, n)`.
pub fn plan_cells(speakers: usize, utts: usize) -> Result<Vec<TrialCell>> {
    if speakers < 2 {
        return Err(Error::Sampling("a trial batch needs at least two speakers".into()));
    }
    if utts < 2 {
        return Err(Error::Sampling("a trial batch needs at least two utterances per speaker".into()));
    }
    let mut cells = Vec::with_capacity(speakers * speakers * utts);
    for l in 0..speakers {
        for m in 0..utts {
            for n in 0..speakers {
                cells.push(TrialCell {
                    test_speaker: l,
                    test_utt: m,
                    enroll_speaker: n,
                    enroll_utts: (0..utts).filter(|&u| u != m).collect(),
                });
            }
        }
    }
    Ok(cells)
}

/// Corpus indices grouped by speaker id, in id order.
pub fn group_by_speaker<T: SpeakerItem>(corpus: &[T]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, x) in corpus.iter().enumerate() {
        groups.entry(x.speaker()).or_default().push(i);
    }
    groups
}

/// Draws `S` distinct speakers with `U` distinct utterances each.
pub fn sample_trial_batch<T: SpeakerItem>(
    corpus: &[T],
    speakers: usize,
    utts: usize,
    rng: &mut impl Rng,
) -> Result<TrialBatchPlan> {
    let cells = plan_cells(speakers, utts)?;
    let eligible: Vec<(&str, Vec<usize>)> = group_by_speaker(corpus)
        .into_iter()
        .filter(|(_, v)| v.len() >= utts)
        .collect();
    if eligible.len() < speakers {
        return Err(Error::Sampling(format!(
            "need {speakers} speakers with at least {utts} utterances, corpus has {}",
            eligible.len()
        )));
    }
    let mut speaker_ids = Vec::with_capacity(speakers);
    let mut items = Vec::with_capacity(speakers);
    for s in sample(rng, eligible.len(), speakers) {
        let (id, pool) = &eligible[s];
        speaker_ids.push(id.to_string());
        items.push(sample(rng, pool.len(), utts).into_iter().map(|k| pool[k]).collect());
    }
    Ok(TrialBatchPlan {
        speakers,
        utts,
        speaker_ids,
        items,
        cells,
    })
}

/// `β·q1 + (1−β)·q2` with the two labels kept apart for the mixed loss.
pub fn mixup_embeddings(q1: &Tensor, y1: usize, q2: &Tensor, y2: usize, beta: f64) -> Result<(Tensor, MixedLabel)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::contract(format!("mixup weight {beta} outside [0, 1]")));
    }
    if q1.shape() != q2.shape() {
        return Err(Error::contract(format!(
            "mixup of embeddings with shapes {:?} and {:?}",
            q1.shape(),
            q2.shape()
        )));
    }
    Ok((
        q1.scale(beta).add(&q2.scale(1.0 - beta))?,
        MixedLabel {
            first: y1,
            second: y2,
            weight: beta,
        },
    ))
}
