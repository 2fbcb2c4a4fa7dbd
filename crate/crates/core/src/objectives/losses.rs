use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self { alpha: 0.75, gamma: 2.0 }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal needs alpha in (0,1) and gamma >= 0, got {} / {}",
                self.alpha, self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmSoftmaxConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AmSoftmaxConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin: 0.2 }
    }
}

/// Cross-entropy of a logit vector against class `target`.
pub fn softmax_ce(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let m = tape.value(logits).numel();
    if target >= m {
        return Err(Error::contract(format!("class {target} outside {m} logits")));
    }
    let row = tape.reshape(logits, &[1, m])?;
    let lsm = tape.log_softmax_rows(row)?;
    let pick = tape.pick(lsm, target)?;
    tape.scale(pick, -1.0)
}

/// Additive-margin softmax over cosines to L2-normalized class weights.
pub fn am_softmax(tape: &mut Tape, cosines: Var, target: usize, cfg: AmSoftmaxConfig) -> Result<Var> {
    let m = tape.value(cosines).numel();
    if target >= m {
        return Err(Error::contract(format!("class {target} outside {m} cosines")));
    }
    let mut margin = Tensor::zeros(&[m]);
    margin.data_mut()[target] = cfg.margin;
    let margin = tape.constant(margin);
    let shifted = tape.sub(cosines, margin)?;
    let logits = tape.scale(shifted, cfg.scale)?;
    softmax_ce(tape, logits, target)
}

fn check_targets(tape: &Tape, probs: Var, targets: &Tensor, op: &'static str) -> Result<()> {
    if tape.value(probs).numel() != targets.numel() {
        return Err(Error::dim(
            op,
            format!("{} probabilities, {} targets", tape.value(probs).numel(), targets.numel()),
        ));
    }
    if targets.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::contract(format!("{op}: targets must lie in [0, 1]")));
    }
    Ok(())
}

/// `(log p, log(1 − p))` with the probability clamp.
fn clamped_logs(tape: &mut Tape, probs: Var) -> Result<(Var, Var, Var)> {
    let n = tape.value(probs).numel();
    let flat = tape.reshape(probs, &[n])?;
    let p = tape.clamp(flat, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let one_minus = tape.scale(p, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let log_q = tape.log(one_minus)?;
    Ok((p, log_p, log_q))
}

/// Summed binary cross-entropy of calibrated probabilities against (soft) labels.
pub fn bce_loss(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    check_targets(tape, probs, targets, "bce")?;
    let n = targets.numel();
    let (_, log_p, log_q) = clamped_logs(tape, probs)?;
    let y = tape.constant(targets.clone().reshape(&[n])?);
    let ny = tape.constant(targets.map(|v| 1.0 - v).reshape(&[n])?);
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(ny, log_q)?;
    let s = tape.add(a, b)?;
    let s = tape.sum(s)?;
    tape.scale(s, -1.0)
}

/// Summed focal loss with class balance `α` and focusing exponent `γ`.
pub fn focal_loss(tape: &mut Tape, probs: Var, targets: &Tensor, cfg: FocalConfig) -> Result<Var> {
    cfg.validate()?;
    check_targets(tape, probs, targets, "focal")?;
    let n = targets.numel();
    let (p, log_p, log_q) = clamped_logs(tape, probs)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let q_g = tape.powf(q, cfg.gamma)?;
    let p_g = tape.powf(p, cfg.gamma)?;
    let y = tape.constant(targets.map(|v| cfg.alpha * v).reshape(&[n])?);
    let ny = tape.constant(targets.map(|v| (1.0 - cfg.alpha) * (1.0 - v)).reshape(&[n])?);
    let pos = tape.mul(q_g, log_p)?;
    let pos = tape.mul(pos, y)?;
    let neg = tape.mul(p_g, log_q)?;
    let neg = tape.mul(neg, ny)?;
    let s = tape.add(pos, neg)?;
    let s = tape.sum(s)?;
    tape.scale(s, -1.0)
}

/// Attention-based GE2E over an `[R × N]` grid: each row is one test item's
/// probabilities against all N batch speakers; `targets` rows are the
/// (possibly mixed) speaker distributions and must sum to 1.
pub fn age2e_loss(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    let shape = tape.shape(probs).to_vec();
    if shape.len() != 2 || targets.shape() != shape.as_slice() {
        return Err(Error::dim(
            "age2e",
            format!("probabilities {shape:?} vs targets {:?}", targets.shape()),
        ));
    }
    for r in 0..targets.rows() {
        let s: f64 = targets.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-9 || targets.row(r).iter().any(|&v| v < 0.0) {
            return Err(Error::contract(format!("age2e: target row {r} is not a distribution")));
        }
    }
    let lsm = tape.log_softmax_rows(probs)?;
    let y = tape.constant(targets.clone());
    let w = tape.mul(lsm, y)?;
    let s = tape.sum(w)?;
    tape.scale(s, -1.0)
}

/// `λ·AGE2E + (1 − λ)·focal` on the same grid.
pub fn combined_loss(tape: &mut Tape, probs: Var, targets: &Tensor, lambda: f64, focal: FocalConfig) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("lambda {lambda} outside [0, 1]")));
    }
    let a = age2e_loss(tape, probs, targets)?;
    let f = focal_loss(tape, probs, targets, focal)?;
    let a = tape.scale(a, lambda)?;
    let f = tape.scale(f, 1.0 - lambda)?;
    tape.add(a, f)
}

/// One scored cell: test utterance `(l, m)` against enrollment speaker `n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialScore {
    pub test_speaker: usize,
    pub test_utt: usize,
    pub enroll_speaker: usize,
    pub prob: f64,
    /// Target weight in `[0, 1]`; 1 for same-speaker cells.
    pub label: f64,
}

/// A batch of scored cells, in any order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialBatchScores {
    pub entries: Vec<TrialScore>,
}

impl TrialBatchScores {
    /// Independent trials with hard labels, as a flat list.
    pub fn from_pairs(probs: &[f64], labels: &[bool]) -> Self {
        Self {
            entries: probs
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(k, (&p, &y))| TrialScore {
                    test_speaker: k,
                    test_utt: 0,
                    enroll_speaker: k,
                    prob: p,
                    label: if y { 1.0 } else { 0.0 },
                })
                .collect(),
        }
    }

    fn flat(&self) -> (Tensor, Tensor) {
        (
            Tensor::vector(self.entries.iter().map(|e| e.prob).collect()),
            Tensor::vector(self.entries.iter().map(|e| e.label).collect()),
        )
    }

    /// Dense `[tests × speakers]` grids of probabilities and labels.
    pub fn grid(&self) -> Result<(Tensor, Tensor)> {
        let mut rows = BTreeMap::new();
        let mut cols = BTreeMap::new();
        for e in &self.entries {
            let nr = rows.len();
            rows.entry((e.test_speaker, e.test_utt)).or_insert(nr);
            let nc = cols.len();
            cols.entry(e.enroll_speaker).or_insert(nc);
        }
        // renumber in sorted order so entry order never matters
        for (i, v) in rows.values_mut().enumerate() {
            *v = i;
        }
        for (i, v) in cols.values_mut().enumerate() {
            *v = i;
        }
        let (r, c) = (rows.len(), cols.len());
        let mut p = Tensor::zeros(&[r, c]);
        let mut y = Tensor::zeros(&[r, c]);
        let mut seen = vec![false; r * c];
        for e in &self.entries {
            let (i, j) = (rows[&(e.test_speaker, e.test_utt)], cols[&e.enroll_speaker]);
            if seen[i * c + j] {
                return Err(Error::contract(format!(
                    "duplicate cell ({}, {}, {})",
                    e.test_speaker, e.test_utt, e.enroll_speaker
                )));
            }
            seen[i * c + j] = true;
            p.set(i, j, e.prob);
            y.set(i, j, e.label);
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            let (l, m) = *rows.iter().find(|(_, &v)| v == k / c).unwrap().0;
            let n = *cols.iter().find(|(_, &v)| v == k % c).unwrap().0;
            return Err(Error::contract(format!("missing cell (l={l}, m={m}, n={n})")));
        }
        Ok((p, y))
    }
}

fn eval(f: impl FnOnce(&mut Tape, Var) -> Result<Var>, probs: Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs);
    let l = f(&mut tape, p)?;
    Ok(tape.scalar_value(l))
}

pub fn bce(batch: &TrialBatchScores) -> Result<f64> {
    let (p, y) = batch.flat();
    eval(|t, v| bce_loss(t, v, &y), p)
}

pub fn focal(batch: &TrialBatchScores, cfg: FocalConfig) -> Result<f64> {
    let (p, y) = batch.flat();
    eval(|t, v| focal_loss(t, v, &y, cfg), p)
}

pub fn age2e(batch: &TrialBatchScores) -> Result<f64> {
    let (p, y) = batch.grid()?;
    eval(|t, v| age2e_loss(t, v, &y), p)
}

pub fn combined(batch: &TrialBatchScores, lambda: f64, cfg: FocalConfig) -> Result<f64> {
    let (p, y) = batch.grid()?;
    eval(|t, v| combined_loss(t, v, &y, lambda, cfg), p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::grad_check;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ce_value(logits: &[f64], target: usize) -> f64 {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(logits.to_vec()));
        let l = softmax_ce(&mut tape, z, target).unwrap();
        tape.scalar_value(l)
    }

    fn am_value(cos: &[f64], target: usize, cfg: AmSoftmaxConfig) -> f64 {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(cos.to_vec()));
        let l = am_softmax(&mut tape, z, target, cfg).unwrap();
        tape.scalar_value(l)
    }

    #[test]
    fn softmax_ce_examples() {
        assert_eq!(ce_value(&[3.7], 0), 0.0);
        assert!((ce_value(&[0.4; 7], 3) - 7f64.ln()).abs() < 1e-12);
        // wᵀe equals ‖w‖‖e‖cosθ
        let w = [Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![-0.5, 0.3])];
        let e = Tensor::vector(vec![0.7, -1.1]);
        let direct: Vec<f64> = w.iter().map(|wj| wj.dot(&e)).collect();
        let via_cos: Vec<f64> = w
            .iter()
            .map(|wj| wj.norm() * e.norm() * crate::backend::cosine_score(wj.data(), e.data()).unwrap())
            .collect();
        assert!((ce_value(&direct, 1) - ce_value(&via_cos, 1)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::vector((0..5).map(|_| rng.random_range(-2.0..2.0)).collect());
        let r = grad_check(|t, p| softmax_ce(t, p[0], 2), &[z], 1e-5).unwrap();
        assert!(r.within(1e-4));
    }

    #[test]
    fn am_softmax_examples() {
        let cos = [0.3, -0.2, 0.8, 0.1];
        let plain = am_value(&cos, 2, AmSoftmaxConfig { scale: 1.0, margin: 0.0 });
        assert!((plain - ce_value(&cos, 2)).abs() <= 1e-12);
        let sharp = am_value(&[1.0, -1.0, -1.0], 0, AmSoftmaxConfig { scale: 30.0, margin: 0.2 });
        assert!(sharp < 1e-9, "{sharp}");
        let mut prev = 0.0;
        for k in 0..6 {
            let l = am_value(&cos, 1, AmSoftmaxConfig { scale: 5.0, margin: 0.1 * k as f64 });
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn bce_examples() {
        let b = TrialBatchScores::from_pairs(&[1.0 - 1e-12], &[true]);
        assert!(bce(&b).unwrap() < 1e-11);
        let b = TrialBatchScores::from_pairs(&[0.5], &[true]);
        assert!((bce(&b).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = Tensor::vector(vec![0.2, 0.7, 0.9, 0.4]);
        let y = Tensor::vector(vec![1.0, 0.0, 1.0, 0.3]);
        let r = grad_check(|t, v| bce_loss(t, v[0], &y), &[p], 1e-6).unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    #[test]
    fn focal_examples() {
        let cfg = FocalConfig { alpha: 0.75, gamma: 2.0 };
        let b = TrialBatchScores::from_pairs(&[0.5], &[true]);
        assert!((focal(&b, cfg).unwrap() - 0.75 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((focal(&b, cfg).unwrap() - 0.129965).abs() < 1e-6);
        let b = TrialBatchScores::from_pairs(&[1.0], &[true]);
        assert!(focal(&b, cfg).unwrap().abs() < 1e-20);
        let p = Tensor::vector(vec![0.2, 0.7, 0.9, 0.4]);
        let y = Tensor::vector(vec![1.0, 0.0, 1.0, 0.0]);
        let r = grad_check(|t, v| focal_loss(t, v[0], &y, cfg), &[p], 1e-6).unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    fn hard_grid(s: usize, u: usize, f: impl Fn(usize, usize, usize) -> f64) -> TrialBatchScores {
        let mut entries = Vec::new();
        for l in 0..s {
            for m in 0..u {
                for n in 0..s {
                    entries.push(TrialScore {
                        test_speaker: l,
                        test_utt: m,
                        enroll_speaker: n,
                        prob: f(l, m, n),
                        label: if l == n { 1.0 } else { 0.0 },
                    });
                }
            }
        }
        TrialBatchScores { entries }
    }

    #[test]
    fn age2e_examples() {
        let b = hard_grid(3, 4, |l, _, n| if l == n { 1.0 } else { 0.0 });
        let per = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((per - 0.551445).abs() < 1e-6);
        let total = age2e(&b).unwrap();
        assert!((total - 12.0 * per).abs() < 1e-12);
        assert!((total - 6.61734).abs() < 1e-5);

        let flat = hard_grid(4, 2, |_, _, _| 0.3);
        assert!((age2e(&flat).unwrap() - 8.0 * 4f64.ln()).abs() < 1e-12);

        let base = age2e(&hard_grid(3, 2, |l, m, n| 0.1 * (l + 2 * m + 3 * n) as f64 % 0.9)).unwrap();
        let bumped = age2e(&hard_grid(3, 2, |l, m, n| {
            let v = 0.1 * (l + 2 * m + 3 * n) as f64 % 0.9;
            if (l, m, n) == (1, 0, 1) { v + 0.05 } else { v }
        }))
        .unwrap();
        assert!(bumped < base);

        let mut missing = hard_grid(2, 2, |_, _, _| 0.5);
        missing.entries.pop();
        assert!(matches!(age2e(&missing), Err(Error::Contract(_))));
    }

    #[test]
    fn combined_endpoints_and_gradient() {
        let cfg = FocalConfig::default();
        let b = hard_grid(3, 2, |l, m, n| 0.15 + 0.1 * ((l * 7 + m * 3 + n * 5) % 8) as f64);
        assert!((combined(&b, 1.0, cfg).unwrap() - age2e(&b).unwrap()).abs() < 1e-12);
        assert!((combined(&b, 0.0, cfg).unwrap() - focal(&b, cfg).unwrap()).abs() < 1e-12);
        let (p, y) = b.grid().unwrap();
        let r = grad_check(|t, v| combined_loss(t, v[0], &y, 0.6, cfg), &[p], 1e-6).unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    #[test]
    fn losses_ignore_entry_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = hard_grid(3, 3, |_, _, _| 0.0);
        let mut b = b;
        for e in &mut b.entries {
            e.prob = rng.random_range(0.05..0.95);
        }
        let mut shuffled = b.clone();
        shuffled.entries.shuffle(&mut rng);
        let cfg = FocalConfig::default();
        for (x, y) in [
            (bce(&b).unwrap(), bce(&shuffled).unwrap()),
            (focal(&b, cfg).unwrap(), focal(&shuffled, cfg).unwrap()),
            (age2e(&b).unwrap(), age2e(&shuffled).unwrap()),
            (combined(&b, 0.6, cfg).unwrap(), combined(&shuffled, 0.6, cfg).unwrap()),
        ] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn focal_gamma0_half_alpha_is_half_bce(
            ps in prop::collection::vec(0.0f64..=1.0, 1..20),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<bool> = ps.iter().map(|_| rng.random()).collect();
            let b = TrialBatchScores::from_pairs(&ps, &labels);
            let f = focal(&b, FocalConfig { alpha: 0.5, gamma: 0.0 }).unwrap();
            prop_assert!((f - 0.5 * bce(&b).unwrap()).abs() <= 1e-12);
        }

        #[test]
        fn am_softmax_reduces_to_ce(cos in prop::collection::vec(-1.0f64..=1.0, 2..10), t in 0usize..10) {
            let t = t % cos.len();
            let a = am_value(&cos, t, AmSoftmaxConfig { scale: 1.0, margin: 0.0 });
            prop_assert!((a - ce_value(&cos, t)).abs() <= 1e-12);
        }
    }
}
