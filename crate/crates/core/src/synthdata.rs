//! Synthetic corpora with known generating parameters, plus brute-force
//! reference implementations used to check the back-ends and metrics.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backend::{EmbeddingRecord, TrialPair};
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::numkernel::{cholesky, cholesky_solve, Tensor};
use crate::pipeline::{group_by_speaker, SpeakerItem};

/// Gaussian PLDA generator `e = μ + Fω + ε`, `ω ~ N(0, I_R)`, `ε ~ N(0, Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeSpec {
    pub mu: Tensor,
    pub f: Tensor,
    pub sigma: Tensor,
    pub speakers: usize,
    pub utterances: usize,
    pub seed: u64,
}

impl GenerativeSpec {
    /// Random loading matrix with entries `N(0, f_scale²)` and a diagonal
    /// residual with standard deviations drawn from `[0.5, 1.5)`.
    pub fn random(dim: usize, rank: usize, f_scale: f64, speakers: usize, utterances: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_91da);
        let mu = Tensor::vector((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let f = Tensor::new(
            vec![dim, rank],
            (0..dim * rank).map(|_| f_scale * rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .expect("shape");
        let mut sigma = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            let sd: f64 = rng.random_range(0.5..1.5);
            sigma.set(i, i, sd * sd);
        }
        Self {
            mu,
            f,
            sigma,
            speakers,
            utterances,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    pub fn rank(&self) -> usize {
        self.f.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.f.rows() != d || self.sigma.shape() != [d, d] {
            return Err(Error::dim(
                "generative spec",
                format!("mu {d}, F {:?}, Sigma {:?}", self.f.shape(), self.sigma.shape()),
            ));
        }
        if self.rank() > d {
            return Err(Error::Config(format!("latent rank {} exceeds dimension {d}", self.rank())));
        }
        let asym = self.sigma.asymmetry();
        if asym > 1e-12 {
            return Err(Error::Symmetry(asym));
        }
        cholesky(&self.sigma)?;
        Ok(())
    }

    /// `FFᵀ + Σ`.
    pub fn total_covariance(&self) -> Result<Tensor> {
        self.f.matmul(&self.f.transpose())?.add(&self.sigma)
    }
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn speaker_name(s: usize) -> String {
    format!("spk{s:04}")
}

/// Draws `speakers × utterances` records from the generator.
pub fn gen_plda_embeddings(spec: &GenerativeSpec) -> Result<Vec<EmbeddingRecord>> {
    spec.validate()?;
    let d = spec.dim();
    let l = cholesky(&spec.sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.speakers * spec.utterances);
    for s in 0..spec.speakers {
        let omega = normal_vec(&mut rng, spec.rank());
        let centre = spec.mu.add(&Tensor::vector(spec.f.matvec(&omega)))?;
        for u in 0..spec.utterances {
            let eps = l.matvec(&normal_vec(&mut rng, d));
            let v: Vec<f64> = centre.data().iter().zip(&eps).map(|(c, e)| c + e).collect();
            out.push(EmbeddingRecord {
                speaker_id: speaker_name(s),
                utterance_id: format!("{}-u{u:03}", speaker_name(s)),
                vector: Tensor::vector(v),
            });
        }
    }
    Ok(out)
}

/// Same/different-speaker log-likelihood-ratio statistic under the true
/// generator, built directly from the joint Gaussian of the pair.
#[derive(Debug, Clone)]
pub struct LlrOracle {
    mu: Vec<f64>,
    total: Tensor,
    joint: Tensor,
}

impl LlrOracle {
    pub fn new(spec: &GenerativeSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim();
        let tot = spec.total_covariance()?;
        let ac = spec.f.matmul(&spec.f.transpose())?;
        let mut joint = Tensor::zeros(&[2 * d, 2 * d]);
        for i in 0..d {
            for j in 0..d {
                joint.set(i, j, tot.at(i, j));
                joint.set(d + i, d + j, tot.at(i, j));
                joint.set(i, d + j, ac.at(i, j));
                joint.set(d + i, j, ac.at(i, j));
            }
        }
        Ok(Self {
            mu: spec.mu.data().to_vec(),
            total: tot,
            joint,
        })
    }

    /// `xᵀT⁻¹x + yᵀT⁻¹y − zᵀJ⁻¹z` on centered `x`, `y`, `z = [x; y]`:
    /// twice the LLR with the log-determinant constant dropped.
    pub fn llr(&self, e_i: &[f64], e_j: &[f64]) -> Result<f64> {
        let d = self.mu.len();
        if e_i.len() != d || e_j.len() != d {
            return Err(Error::dim("oracle_llr", format!("{} / {} vs {d}", e_i.len(), e_j.len())));
        }
        let x: Vec<f64> = e_i.iter().zip(&self.mu).map(|(a, m)| a - m).collect();
        let y: Vec<f64> = e_j.iter().zip(&self.mu).map(|(a, m)| a - m).collect();
        let z: Vec<f64> = x.iter().chain(&y).copied().collect();
        let quad = |a: &Tensor, v: &[f64]| -> Result<f64> {
            let s = cholesky_solve(a, &Tensor::vector(v.to_vec()))?;
            Ok(v.iter().zip(s.data()).map(|(p, q)| p * q).sum())
        };
        Ok(quad(&self.total, &x)? + quad(&self.total, &y)? - quad(&self.joint, &z)?)
    }
}

pub fn oracle_llr(spec: &GenerativeSpec, e_i: &[f64], e_j: &[f64]) -> Result<f64> {
    LlrOracle::new(spec)?.llr(e_i, e_j)
}

/// Frame-level corpus: speaker mean + genre offset + frame noise.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCorpusSpec {
    pub speakers: usize,
    pub utterances: usize,
    pub channels: usize,
    pub speaker_scale: f64,
    pub noise_scale: f64,
    pub genres: usize,
    pub genre_scale: f64,
    /// Genre `g` uses frame noise `noise_scale·(1 + g·genre_noise_step)`.
    pub genre_noise_step: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for FeatureCorpusSpec {
    fn default() -> Self {
        Self {
            speakers: 10,
            utterances: 10,
            channels: 23,
            speaker_scale: 1.0,
            noise_scale: 1.0,
            genres: 3,
            genre_scale: 1.0,
            genre_noise_step: 0.0,
            min_frames: 30,
            max_frames: 50,
            seed: 0,
        }
    }
}

impl FeatureCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.utterances == 0 || self.channels == 0 {
            return Err(Error::Config("speakers, utterances and channels must be positive".into()));
        }
        if self.genres == 0 {
            return Err(Error::Config("at least one genre offset is required".into()));
        }
        for (name, v) in [
            ("speaker_scale", self.speaker_scale),
            ("noise_scale", self.noise_scale),
            ("genre_scale", self.genre_scale),
            ("genre_noise_step", self.genre_noise_step),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} = {v} must be a finite nonnegative number")));
            }
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "frame range [{}, {}] is empty",
                self.min_frames, self.max_frames
            )));
        }
        Ok(())
    }
}

/// Genre index encoded in a generated utterance id (`spkNNNN-gG-uUUU`).
pub fn genre_of(utterance_id: &str) -> Option<usize> {
    utterance_id.split('-').find_map(|p| p.strip_prefix('g')?.parse().ok())
}

pub fn gen_feature_corpus(spec: &FeatureCorpusSpec) -> Result<Vec<FeatureSequence>> {
    spec.validate()?;
    let c = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let offsets: Vec<Vec<f64>> = (0..spec.genres)
        .map(|_| normal_vec(&mut rng, c).into_iter().map(|v| v * spec.genre_scale).collect())
        .collect();
    let mut out = Vec::with_capacity(spec.speakers * spec.utterances);
    for s in 0..spec.speakers {
        let mean: Vec<f64> = normal_vec(&mut rng, c).into_iter().map(|v| v * spec.speaker_scale).collect();
        for u in 0..spec.utterances {
            let g = rng.random_range(0..spec.genres);
            let t = rng.random_range(spec.min_frames..=spec.max_frames);
            let noise_scale = spec.noise_scale * (1.0 + g as f64 * spec.genre_noise_step);
            let mut frames = Tensor::zeros(&[c, t]);
            for k in 0..t {
                for r in 0..c {
                    let noise: f64 = rng.sample(StandardNormal);
                    frames.set(r, k, mean[r] + offsets[g][r] + noise_scale * noise);
                }
            }
            out.push(FeatureSequence {
                speaker_id: speaker_name(s),
                utterance_id: format!("{}-g{g}-u{u:03}", speaker_name(s)),
                label: s,
                frames,
            });
        }
    }
    Ok(out)
}

/// Trial list over `corpus`: every utterance is tested against every
/// speaker, each enrollment being `k` random utterances of that speaker
/// other than the test utterance.
pub fn gen_trials<T: SpeakerItem>(corpus: &[T], k: usize, seed: u64) -> Result<Vec<TrialPair>> {
    if k == 0 {
        return Err(Error::Config("enrollment count must be positive".into()));
    }
    let groups = group_by_speaker(corpus);
    if let Some((spk, v)) = groups.iter().find(|(_, v)| v.len() <= k) {
        return Err(Error::Sampling(format!(
            "speaker {spk} has {} utterances, {k} enrollments plus a test need more",
            v.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(corpus.len() * groups.len());
    for (t, item) in corpus.iter().enumerate() {
        for (spk, pool) in &groups {
            let others: Vec<usize> = pool.iter().copied().filter(|&i| i != t).collect();
            let enroll = sample(&mut rng, others.len(), k)
                .into_iter()
                .map(|j| corpus[others[j]].utterance().to_string())
                .collect();
            out.push(TrialPair {
                enroll,
                test: item.utterance().to_string(),
                target: *spk == item.speaker(),
            });
        }
    }
    Ok(out)
}

/// Exhaustive sweep of the step-function error rates over every threshold
/// interval. Returns `(eer, min_dcf)`; the EER is `(P_miss + P_fa)/2` at the
/// threshold where the two rates are closest.
pub fn oracle_eer_dcf(scores: &[f64], labels: &[bool], beta: f64) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::dim("oracle_eer_dcf", "scores and labels differ in length"));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("both classes must be present"));
    }
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    // one threshold per interval: below all, at each value, between values, above all
    let mut thresholds = vec![f64::NEG_INFINITY];
    for (i, &s) in distinct.iter().enumerate() {
        thresholds.push(s);
        if let Some(&next) = distinct.get(i + 1) {
            thresholds.push(s + (next - s) / 2.0);
        }
    }
    thresholds.push(f64::INFINITY);

    let mut best_dcf = f64::INFINITY;
    let mut best_gap = (f64::INFINITY, 0.0);
    for &eta in &thresholds {
        let miss = scores.iter().zip(labels).filter(|(&s, &y)| y && !(s >= eta)).count();
        let fa = scores.iter().zip(labels).filter(|(&s, &y)| !y && s >= eta).count();
        let pm = miss as f64 / pos as f64;
        let pf = fa as f64 / neg as f64;
        best_dcf = best_dcf.min(pm + beta * pf);
        let gap = (pm - pf).abs();
        if gap < best_gap.0 {
            best_gap = (gap, (pm + pf) / 2.0);
        }
    }
    Ok((best_gap.1, best_dcf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::plda_fit_em;
    use crate::backend::PreprocConfig;
    use crate::encoder::{encode, EncoderConfig, EncoderParams};
    use crate::objectives::{eer, min_dcf};

    fn sample_cov(records: &[EmbeddingRecord]) -> Tensor {
        let d = records[0].vector.numel();
        let n = records.len() as f64;
        let mut mean = vec![0.0; d];
        for r in records {
            mean.iter_mut().zip(r.vector.data()).for_each(|(m, v)| *m += v / n);
        }
        let mut c = Tensor::zeros(&[d, d]);
        for r in records {
            let x = r.vector.data();
            for i in 0..d {
                for j in 0..d {
                    c.set(i, j, c.at(i, j) + (x[i] - mean[i]) * (x[j] - mean[j]) / n);
                }
            }
        }
        c
    }

    fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().frobenius() / b.frobenius()
    }

    #[test]
    fn zero_loading_gives_iid_draws() {
        let mut spec = GenerativeSpec::random(4, 2, 0.0, 1000, 10, 3);
        spec.sigma = Tensor::eye(4);
        let recs = gen_plda_embeddings(&spec).unwrap();
        assert_eq!(recs.len(), 10_000);
        let c = sample_cov(&recs);
        // sampling error of a unit-variance covariance at n = 1e4 is ~1e-2 per entry
        assert!(c.sub(&Tensor::eye(4)).unwrap().max_abs() < 0.05, "{c:?}");
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = GenerativeSpec::random(6, 3, 1.0, 5, 4, 11);
        assert_eq!(gen_plda_embeddings(&spec).unwrap(), gen_plda_embeddings(&spec).unwrap());
        let other = GenerativeSpec { seed: 12, ..spec.clone() };
        assert_ne!(gen_plda_embeddings(&spec).unwrap(), gen_plda_embeddings(&other).unwrap());
    }

    #[test]
    fn total_covariance_recovered_at_scale() {
        let spec = GenerativeSpec::random(8, 4, 1.0, 500, 20, 5);
        let recs = gen_plda_embeddings(&spec).unwrap();
        let err = rel_frobenius(&sample_cov(&recs), &spec.total_covariance().unwrap());
        assert!(err < 0.10, "{err}");
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = GenerativeSpec::random(3, 2, 1.0, 2, 2, 0);
        spec.sigma.set(0, 1, 0.5);
        assert!(spec.validate().is_err());
        let spec = GenerativeSpec::random(2, 3, 1.0, 2, 2, 0);
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn llr_symmetric_and_zero_at_mean() {
        let spec = GenerativeSpec::random(5, 2, 1.0, 1, 1, 9);
        let o = LlrOracle::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = normal_vec(&mut rng, 5);
        let b = normal_vec(&mut rng, 5);
        assert!((o.llr(&a, &b).unwrap() - o.llr(&b, &a).unwrap()).abs() < 1e-10);
        let mu = spec.mu.data().to_vec();
        assert!(o.llr(&mu, &mu).unwrap().abs() < 1e-12);
        assert!(o.llr(&a, &[0.0; 4]).is_err());
    }

    #[test]
    fn llr_matches_two_covariance_quadratic_form() {
        let spec = GenerativeSpec::random(6, 3, 1.0, 1, 1, 2);
        let (p, q) = crate::backend::scoring_matrices(&spec.f, &spec.sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let a = normal_vec(&mut rng, 6);
            let b = normal_vec(&mut rng, 6);
            let x: Vec<f64> = a.iter().zip(spec.mu.data()).map(|(v, m)| v - m).collect();
            let y: Vec<f64> = b.iter().zip(spec.mu.data()).map(|(v, m)| v - m).collect();
            let qf = crate::backend::quadratic_score(&p, &q, &x, &y);
            let o = oracle_llr(&spec, &a, &b).unwrap();
            assert!((qf - o).abs() < 1e-8 * (1.0 + o.abs()), "{qf} vs {o}");
        }
    }

    fn eer_of(scores: &[f64], labels: &[bool]) -> f64 {
        eer(scores, labels).unwrap()
    }

    #[test]
    fn oracle_beats_cosine_on_generated_data() {
        let spec = GenerativeSpec::random(8, 4, 1.0, 60, 6, 21);
        let recs = gen_plda_embeddings(&spec).unwrap();
        let o = LlrOracle::new(&spec).unwrap();
        let (mut so, mut sc, mut lab) = (vec![], vec![], vec![]);
        for i in 0..recs.len() {
            for j in (i + 1)..recs.len() {
                if (i + j) % 7 != 0 {
                    continue;
                }
                let (a, b) = (recs[i].vector.data(), recs[j].vector.data());
                so.push(o.llr(a, b).unwrap());
                sc.push(crate::backend::cosine_score(a, b).unwrap());
                lab.push(recs[i].speaker_id == recs[j].speaker_id);
            }
        }
        assert!(eer_of(&so, &lab) < eer_of(&sc, &lab));
    }

    #[test]
    fn em_scores_track_oracle() {
        let spec = GenerativeSpec::random(6, 3, 1.0, 200, 8, 8);
        let recs = gen_plda_embeddings(&spec).unwrap();
        let fit = plda_fit_em(&recs, PreprocConfig::default(), 3, 5).unwrap();
        let o = LlrOracle::new(&spec).unwrap();
        let (mut a, mut b) = (vec![], vec![]);
        for k in 0..300 {
            let (x, y) = (&recs[(k * 13) % recs.len()], &recs[(k * 29 + 3) % recs.len()]);
            let tx = fit.model.transform(x.vector.data()).unwrap();
            let ty = fit.model.transform(y.vector.data()).unwrap();
            a.push(crate::backend::plda_score(&fit.model, &tx, &ty).unwrap());
            b.push(o.llr(x.vector.data(), y.vector.data()).unwrap());
        }
        assert!(pearson(&a, &b) > 0.99);
    }

    pub(crate) fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn noiseless_single_genre_frames_are_constant_per_speaker() {
        let spec = FeatureCorpusSpec {
            speakers: 3,
            utterances: 4,
            channels: 5,
            noise_scale: 0.0,
            genres: 1,
            ..Default::default()
        };
        let corpus = gen_feature_corpus(&spec).unwrap();
        for s in 0..3 {
            let utts: Vec<_> = corpus.iter().filter(|x| x.label == s).collect();
            let reference: Vec<f64> = (0..5).map(|r| utts[0].frames.at(r, 0)).collect();
            for u in utts {
                for t in 0..u.num_frames() {
                    for (r, &v) in reference.iter().enumerate() {
                        assert_eq!(u.frames.at(r, t), v);
                    }
                }
            }
        }
    }

    #[test]
    fn feature_corpus_deterministic_and_labelled() {
        let spec = FeatureCorpusSpec::default();
        let a = gen_feature_corpus(&spec).unwrap();
        assert_eq!(a, gen_feature_corpus(&spec).unwrap());
        assert_eq!(a.len(), 100);
        for x in &a {
            assert_eq!(x.speaker_id, speaker_name(x.label));
            assert!((30..=50).contains(&x.num_frames()));
            assert!(genre_of(&x.utterance_id).unwrap() < 3);
        }
        let bad = FeatureCorpusSpec { genres: 0, ..spec };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn genre_mismatch_visible_to_random_encoder() {
        let spec = FeatureCorpusSpec {
            speakers: 8,
            utterances: 12,
            channels: 10,
            genres: 3,
            genre_scale: 1.5,
            seed: 4,
            ..Default::default()
        };
        let corpus = gen_feature_corpus(&spec).unwrap();
        let cfg = EncoderConfig {
            input_dim: 10,
            num_classes: 8,
            ..Default::default()
        };
        let params = EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let emb: Vec<Tensor> = corpus.iter().map(|x| encode(x, &cfg, &params).unwrap()).collect();
        let (mut same, mut cross) = ((0.0, 0), (0.0, 0));
        for i in 0..corpus.len() {
            for j in (i + 1)..corpus.len() {
                if corpus[i].label != corpus[j].label {
                    continue;
                }
                let d = emb[i].sub(&emb[j]).unwrap().norm();
                if genre_of(&corpus[i].utterance_id) == genre_of(&corpus[j].utterance_id) {
                    same = (same.0 + d, same.1 + 1);
                } else {
                    cross = (cross.0 + d, cross.1 + 1);
                }
            }
        }
        assert!(cross.0 / cross.1 as f64 > same.0 / same.1 as f64);
    }

    #[test]
    fn trial_lists() {
        let spec = GenerativeSpec::random(3, 1, 1.0, 4, 6, 1);
        let recs = gen_plda_embeddings(&spec).unwrap();
        let trials = gen_trials(&recs, 4, 3).unwrap();
        assert_eq!(trials.len(), 24 * 4);
        assert_eq!(trials.iter().filter(|t| t.target).count(), 24);
        for t in &trials {
            assert_eq!(t.enroll.len(), 4);
            assert!(!t.enroll.contains(&t.test));
            let mut e = t.enroll.clone();
            e.sort();
            e.dedup();
            assert_eq!(e.len(), 4);
        }
        assert_eq!(trials, gen_trials(&recs, 4, 3).unwrap());
        assert!(matches!(gen_trials(&recs, 6, 3), Err(Error::Sampling(_))));
    }

    #[test]
    fn sweep_examples() {
        let (e, d) = oracle_eer_dcf(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false], 99.0).unwrap();
        assert_eq!((e, d), (0.0, 0.0));
        let s = [0.9, 0.8, 0.85, 0.1];
        let l = [true, true, false, false];
        let (_, d) = oracle_eer_dcf(&s, &l, 99.0).unwrap();
        assert_eq!(d, 0.5);
        assert_eq!(d, min_dcf(&s, &l, 99.0).unwrap());
        assert!(oracle_eer_dcf(&[0.1, 0.2], &[true, true], 99.0).is_err());
    }

    #[test]
    fn sweep_agrees_with_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..200 {
            let n = rng.random_range(2..60);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            labels[0] = true;
            labels[1] = false;
            let scores: Vec<f64> = labels
                .iter()
                .map(|&y| {
                    let s: f64 = rng.sample(StandardNormal);
                    let s = s + if y { 1.0 } else { 0.0 };
                    // coarse rounding on odd trials creates ties
                    if trial % 2 == 1 { (s * 4.0).round() / 4.0 } else { s }
                })
                .collect();
            let pos = labels.iter().filter(|&&y| y).count();
            let tol = 1.0 / (2.0 * pos.min(n - pos) as f64);
            let (oe, od) = oracle_eer_dcf(&scores, &labels, 99.0).unwrap();
            assert_eq!(od, min_dcf(&scores, &labels, 99.0).unwrap());
            if trial % 2 == 0 {
                assert!((oe - eer(&scores, &labels).unwrap()).abs() <= tol + 1e-12);
            }
        }
    }
}
