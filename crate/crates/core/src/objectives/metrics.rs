use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Detection cost parameters; `delta` is the sigmoid warp of the soft version.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfConfig {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
    pub delta: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            c_miss: 1.0,
            c_fa: 1.0,
            p_target: 0.01,
            delta: 10.0,
        }
    }
}

/// `β = C_fa(1 − P_target) / (C_miss·P_target)`.
pub fn dcf_beta(cfg: &DcfConfig) -> Result<f64> {
    if !(cfg.p_target > 0.0 && cfg.p_target < 1.0) {
        return Err(Error::contract(format!("P_target {} outside (0, 1)", cfg.p_target)));
    }
    if !(cfg.c_miss > 0.0) || !(cfg.c_fa >= 0.0) {
        return Err(Error::contract("costs must be nonnegative with C_miss > 0"));
    }
    Ok(cfg.c_fa * (1.0 - cfg.p_target) / (cfg.c_miss * cfg.p_target))
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim("metric", format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "metric input" });
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::contract("metrics need at least one target and one non-target trial"));
    }
    Ok((pos, neg))
}

/// `(P_miss, P_fa)` operating points, accept iff score ≥ η, for η running
/// from −∞ through every distinct score to +∞.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut miss, mut fa) = (0usize, neg);
    let mut pts = vec![(0.0, 1.0)];
    let mut i = 0;
    while i < order.len() {
        // η = scores[order[i]]: everything strictly below is rejected
        pts.push((miss as f64 / pos as f64, fa as f64 / neg as f64));
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                miss += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
    }
    pts.push((1.0, 0.0));
    pts.dedup();
    Ok(pts)
}

/// Minimum over thresholds of `P_miss + β·P_fa`.
pub fn min_dcf(scores: &[f64], labels: &[bool], beta: f64) -> Result<f64> {
    let pts = operating_points(scores, labels)?;
    Ok(pts.iter().map(|&(m, f)| m + beta * f).fold(f64::INFINITY, f64::min))
}

/// Equal error rate with linear interpolation at the crossing.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pts = operating_points(scores, labels)?;
    for w in pts.windows(2) {
        let (m0, f0) = w[0];
        let (m1, f1) = w[1];
        if m0 - f0 == 0.0 {
            return Ok(m0);
        }
        if m1 - f1 >= 0.0 {
            let t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
            return Ok(m0 + t * (m1 - m0));
        }
    }
    unreachable!("the last operating point has P_miss = 1 > P_fa = 0")
}

/// DET curve as `(P_fa, P_miss)` pairs, P_fa descending.
pub fn det_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    Ok(operating_points(scores, labels)?
        .into_iter()
        .map(|(m, f)| (f, m))
        .collect())
}

/// Soft counts at threshold `eta` on the tape: `(P_miss, P_fa)`.
fn soft_rates(tape: &mut Tape, scores: Var, labels: &[bool], eta: f64, delta: f64) -> Result<(Var, Var)> {
    let n = labels.len();
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n as f64 - pos;
    let s = tape.reshape(scores, &[n])?;
    // miss: σ(δ(η − s)), false alarm: σ(δ(s − η))
    let miss_arg = tape.scale(s, -delta)?;
    let miss_arg = tape.add_scalar(miss_arg, delta * eta)?;
    let miss = tape.sigmoid(miss_arg)?;
    let fa_arg = tape.scale(s, delta)?;
    let fa_arg = tape.add_scalar(fa_arg, -delta * eta)?;
    let fa = tape.sigmoid(fa_arg)?;
    let pos_w = tape.constant(Tensor::vector(
        labels.iter().map(|&y| if y { 1.0 / pos } else { 0.0 }).collect(),
    ));
    let neg_w = tape.constant(Tensor::vector(
        labels.iter().map(|&y| if y { 0.0 } else { 1.0 / neg }).collect(),
    ));
    let p_miss = tape.dot(miss, pos_w)?;
    let p_fa = tape.dot(fa, neg_w)?;
    Ok((p_miss, p_fa))
}

/// Soft `P_miss + β·P_fa` at a fixed threshold.
pub fn adcf_soft_at(tape: &mut Tape, scores: Var, labels: &[bool], eta: f64, cfg: &DcfConfig) -> Result<Var> {
    let beta = dcf_beta(cfg)?;
    let (m, f) = soft_rates(tape, scores, labels, eta, cfg.delta)?;
    let f = tape.scale(f, beta)?;
    tape.add(m, f)
}

/// Threshold grid: observed scores, 32 uniform points on `[min, max]`, and
/// one point beyond each end so accept-all and reject-all are reachable.
pub fn soft_dcf_grid(scores: &[f64], delta: f64) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut grid: Vec<f64> = scores.to_vec();
    for k in 0..31 {
        grid.push(lo + (hi - lo) * k as f64 / 31.0);
    }
    grid.push(hi);
    let margin = 50.0 / delta;
    grid.push(lo - margin);
    grid.push(hi + margin);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Soft cost as a function of the threshold alone: `(f, f', f'')` at `eta`.
fn soft_curve(scores: &[f64], labels: &[bool], beta: f64, delta: f64, eta: f64) -> (f64, f64, f64) {
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = labels.len() as f64 - pos;
    let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for (&s, &y) in scores.iter().zip(labels) {
        // miss uses σ(δ(η − s)), false alarm σ(δ(s − η)); d/dη flips sign for the latter
        let (w, u, sign) = if y {
            (1.0 / pos, delta * (eta - s), 1.0)
        } else {
            (beta / neg, delta * (s - eta), -1.0)
        };
        let p = crate::numkernel::sigmoid(u);
        let dp = p * (1.0 - p);
        f += w * p;
        d1 += sign * w * delta * dp;
        d2 += w * delta * delta * dp * (1.0 - 2.0 * p);
    }
    (f, d1, d2)
}

/// Continuous minimizer of the soft cost inside `[a, b]`, starting from the
/// grid point `x0`: golden-section search, then Newton steps on `f'`.
fn refine_threshold(curve: impl Fn(f64) -> (f64, f64, f64), a: f64, b: f64, x0: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut lo, mut hi) = (a, b);
    let mut best = (curve(x0).0, x0);
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (curve(x1).0, curve(x2).0);
    for _ in 0..200 {
        if hi - lo <= 1e-15 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - INV_PHI * (hi - lo);
            f1 = curve(x1).0;
        } else {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + INV_PHI * (hi - lo);
            f2 = curve(x2).0;
        }
    }
    for (f, x) in [(f1, x1), (f2, x2)] {
        if f < best.0 {
            best = (f, x);
        }
    }
    let mut x = best.1;
    for _ in 0..8 {
        let (_, d1, d2) = curve(x);
        if d1 == 0.0 || !(d2 > 0.0) {
            break;
        }
        let next = x - d1 / d2;
        if !(next >= a && next <= b) || curve(next).0 > best.0 + 1e-15 * best.0.abs() {
            break;
        }
        x = next;
        best.0 = best.0.min(curve(x).0);
    }
    x
}

/// Differentiable soft DCF minimized over the threshold. A grid search
/// locates the basin, a 1-D refinement finds the stationary threshold, and
/// the gradient is taken with η* held fixed (exact there, since ∂f/∂η = 0).
/// Returns `(loss, η*)`.
pub fn adcf_soft(tape: &mut Tape, scores: Var, labels: &[bool], cfg: &DcfConfig) -> Result<(Var, f64)> {
    if !(cfg.delta > 0.0) {
        return Err(Error::contract("soft DCF warp must be positive"));
    }
    let beta = dcf_beta(cfg)?;
    let values = tape.value(scores).data().to_vec();
    class_counts(&values, labels)?;
    let curve = |eta: f64| soft_curve(&values, labels, beta, cfg.delta, eta);
    let grid = soft_dcf_grid(&values, cfg.delta);
    let mut best = (f64::INFINITY, 0);
    for (i, &eta) in grid.iter().enumerate() {
        let c = curve(eta).0;
        if c < best.0 {
            best = (c, i);
        }
    }
    let i = best.1;
    let (mut lo, mut hi) = (i.saturating_sub(1), (i + 1).min(grid.len() - 1));
    let mut eta = grid[i];
    // widen the bracket while the minimizer sits on an edge with the slope
    // pointing outward (near-coincident grid points give tiny brackets)
    loop {
        eta = refine_threshold(&curve, grid[lo], grid[hi], eta);
        let d1 = curve(eta).1;
        let near = |g: f64| (eta - g).abs() <= 1e-9 * (1.0 + g.abs());
        if near(grid[lo]) && d1 > 0.0 && lo > 0 {
            lo -= 1;
        } else if near(grid[hi]) && d1 < 0.0 && hi + 1 < grid.len() {
            hi += 1;
        } else {
            break;
        }
    }
    Ok((adcf_soft_at(tape, scores, labels, eta, cfg)?, eta))
}

/// Soft DCF value without gradients.
pub fn adcf_soft_value(scores: &[f64], labels: &[bool], cfg: &DcfConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(scores.to_vec()));
    let (l, _) = adcf_soft(&mut tape, s, labels, cfg)?;
    Ok(tape.scalar_value(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::grad_check;
    use proptest::prelude::*;

    fn split(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let mut s = pos.to_vec();
        s.extend_from_slice(neg);
        let mut l = vec![true; pos.len()];
        l.extend(vec![false; neg.len()]);
        (s, l)
    }

    #[test]
    fn beta_examples() {
        let mut cfg = DcfConfig {
            p_target: 0.5,
            ..DcfConfig::default()
        };
        assert_eq!(dcf_beta(&cfg).unwrap(), 1.0);
        cfg.p_target = 0.01;
        assert!((dcf_beta(&cfg).unwrap() - 99.0).abs() < 1e-12);
        let doubled = DcfConfig { c_fa: 2.0, ..cfg };
        assert!((dcf_beta(&doubled).unwrap() - 2.0 * dcf_beta(&cfg).unwrap()).abs() < 1e-12);
        for p in [0.0, 1.0] {
            cfg.p_target = p;
            assert!(dcf_beta(&cfg).is_err());
        }
    }

    #[test]
    fn min_dcf_examples() {
        let (s, l) = split(&[0.9, 0.8], &[0.3, 0.1]);
        assert_eq!(min_dcf(&s, &l, 99.0).unwrap(), 0.0);
        let (s, l) = split(&[0.5, 0.5], &[0.5, 0.5, 0.5]);
        assert_eq!(min_dcf(&s, &l, 99.0).unwrap(), 1.0);
        let (s, l) = split(&[0.9, 0.8], &[0.85, 0.1]);
        assert_eq!(min_dcf(&s, &l, 99.0).unwrap(), 0.5);
        assert!(min_dcf(&[0.1, 0.2], &[true, true], 99.0).is_err());
    }

    #[test]
    fn eer_examples() {
        let (s, l) = split(&[0.9, 0.8, 0.7], &[0.6, 0.2]);
        assert_eq!(eer(&s, &l).unwrap(), 0.0);
        let (s, l) = split(&[0.9, 0.8, 0.7], &[0.75, 0.2, 0.1]);
        assert!((eer(&s, &l).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(eer(&[0.3], &[false]).is_err());
    }

    #[test]
    fn det_endpoints() {
        let (s, l) = split(&[0.9, 0.4], &[0.5, 0.1]);
        let det = det_points(&s, &l).unwrap();
        assert_eq!(det.first(), Some(&(1.0, 0.0)));
        assert_eq!(det.last(), Some(&(0.0, 1.0)));
        for w in det.windows(2) {
            assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn soft_dcf_approaches_hard_on_separated_scores() {
        let (s, l) = split(&[0.9, 0.85, 0.7, 0.66], &[0.4, 0.3, 0.1, 0.05, 0.0]);
        let cfg = DcfConfig::default();
        let hard = min_dcf(&s, &l, dcf_beta(&cfg).unwrap()).unwrap();
        let mut prev = f64::INFINITY;
        for delta in [10.0, 100.0, 1e4] {
            let soft = adcf_soft_value(&s, &l, &DcfConfig { delta, ..cfg }).unwrap();
            let gap = (soft - hard).abs();
            assert!(gap <= prev);
            prev = gap;
        }
        assert!(prev < 1e-3, "{prev}");
    }

    #[test]
    fn soft_miss_monotone_in_positive_scores() {
        let (s, l) = split(&[0.6, 0.2], &[0.5, 0.1]);
        let rate = |scores: Vec<f64>| {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::vector(scores));
            let (m, _) = soft_rates(&mut tape, v, &l, 0.4, 10.0).unwrap();
            tape.scalar_value(m)
        };
        let base = rate(s.clone());
        assert!(base > 0.0 && base < 1.0);
        let mut up = s;
        up[1] += 0.1;
        assert!(rate(up) < base);
    }

    #[test]
    fn soft_dcf_gradient_at_fixed_threshold() {
        let (s, l) = split(&[0.6, 0.2, 0.9], &[0.5, 0.1, 0.45]);
        let cfg = DcfConfig::default();
        let r = grad_check(
            |t, p| adcf_soft_at(t, p[0], &l, 0.47, &cfg),
            &[Tensor::vector(s)],
            1e-6,
        )
        .unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    #[test]
    fn soft_dcf_gradient_through_threshold_search() {
        let (s, l) = split(&[0.6, 0.2, 0.9, 0.35], &[0.5, 0.1, 0.45, -0.3, 0.0]);
        let cfg = DcfConfig::default();
        let r = grad_check(|t, p| Ok(adcf_soft(t, p[0], &l, &cfg)?.0), &[Tensor::vector(s)], 1e-6).unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    #[test]
    fn soft_dcf_gradient_when_optimum_passes_max_score() {
        use rand::{Rng, SeedableRng};
        let labels: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(60 + seed);
            let s: Vec<f64> = labels
                .iter()
                .map(|&y| rng.random_range(-1.0..1.0) + if y { 0.4 } else { 0.0 })
                .collect();
            let cfg = DcfConfig::default();
            let r = grad_check(|t, p| Ok(adcf_soft(t, p[0], &labels, &cfg)?.0), &[Tensor::vector(s)], 1e-6).unwrap();
            assert!(r.within(1e-4), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn soft_curve_derivatives_match_differences() {
        let (s, l) = split(&[0.6, 0.2, 0.9], &[0.5, 0.1, 0.45]);
        let h = 1e-6;
        for eta in [-0.2, 0.3, 0.47, 1.1] {
            let (_, d1, d2) = soft_curve(&s, &l, 99.0, 10.0, eta);
            let (fp, dp, _) = soft_curve(&s, &l, 99.0, 10.0, eta + h);
            let (fm, dm, _) = soft_curve(&s, &l, 99.0, 10.0, eta - h);
            assert!((d1 - (fp - fm) / (2.0 * h)).abs() < 1e-6 * (1.0 + d1.abs()));
            assert!((d2 - (dp - dm) / (2.0 * h)).abs() < 1e-5 * (1.0 + d2.abs()));
        }
    }

    fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-3.0f64..3.0, n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter("both classes", |(_, l)| l.iter().any(|&y| y) && l.iter().any(|&y| !y))
        })
    }

    proptest! {
        #[test]
        fn metrics_depend_only_on_order((s, l) in scores_and_labels()) {
            let e = eer(&s, &l).unwrap();
            let d = min_dcf(&s, &l, 99.0).unwrap();
            let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let aff: Vec<f64> = s.iter().map(|v| 3.0 * v - 7.0).collect();
            for t in [exp, aff] {
                prop_assert!((eer(&t, &l).unwrap() - e).abs() < 1e-12);
                prop_assert_eq!(min_dcf(&t, &l, 99.0).unwrap(), d);
            }
        }

        #[test]
        fn eer_label_swap_symmetry((s, l) in scores_and_labels()) {
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let flipped: Vec<bool> = l.iter().map(|y| !y).collect();
            prop_assert!((eer(&s, &l).unwrap() - eer(&neg, &flipped).unwrap()).abs() < 1e-12);
        }
    }
}
