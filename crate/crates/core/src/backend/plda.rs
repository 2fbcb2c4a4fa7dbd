use std::collections::BTreeMap;

use super::{mean_vector, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::numkernel::{spd_inverse, spd_log_det, sym_eig_jacobi, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EIG_FLOOR: f64 = 1e-8;

/// Which preprocessing stages to fit. Centering always runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreprocConfig {
    pub lda_dim: Option<usize>,
    pub length_norm: bool,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            lda_dim: None,
            length_norm: false,
        }
    }
}

/// Fitted centering, optional LDA projection and optional length normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Preproc {
    pub mean: Tensor,
    /// `[D × D']`; applied as `xᵀ · lda`.
    pub lda: Option<Tensor>,
    pub length_norm: bool,
}

impl Preproc {
    pub fn fit(records: &[EmbeddingRecord], cfg: PreprocConfig) -> Result<Self> {
        let vs: Vec<&[f64]> = records.iter().map(|r| r.vector.data()).collect();
        let mean = Tensor::vector(mean_vector(&vs)?);
        let lda = match cfg.lda_dim {
            Some(d) => Some(lda_fit(records, d)?.projection),
            None => None,
        };
        Ok(Self {
            mean,
            lda,
            length_norm: cfg.length_norm,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[dim]),
            lda: None,
            length_norm: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mean.numel()
    }

    pub fn output_dim(&self) -> usize {
        self.lda.as_ref().map_or(self.input_dim(), |l| l.cols())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(
                "preprocess",
                format!("embedding dim {}, expected {}", x.len(), self.input_dim()),
            ));
        }
        let centered: Vec<f64> = x.iter().zip(self.mean.data()).map(|(a, m)| a - m).collect();
        let mut y = match &self.lda {
            Some(l) => l.transpose().matvec(&centered),
            None => centered,
        };
        if self.length_norm {
            let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                y.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(y)
    }

    pub fn apply_all(&self, records: &[EmbeddingRecord]) -> Result<Vec<EmbeddingRecord>> {
        records
            .iter()
            .map(|r| {
                Ok(EmbeddingRecord {
                    speaker_id: r.speaker_id.clone(),
                    utterance_id: r.utterance_id.clone(),
                    vector: Tensor::vector(self.apply(r.vector.data())?),
                })
            })
            .collect()
    }
}

fn group_by_speaker(records: &[EmbeddingRecord]) -> BTreeMap<&str, Vec<usize>> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.speaker_id.as_str()).or_default().push(i);
    }
    groups
}

/// LDA from within-class whitening followed by an eigenbasis of the whitened between-class scatter.
#[derive(Debug, Clone)]
pub struct Lda {
    /// `W` with `Wᵀ S_w W = I`.
    pub whitening: Tensor,
    /// Eigenvectors of `Wᵀ S_b W` as columns, descending.
    pub rotation: Tensor,
    pub eigenvalues: Tensor,
    /// `W · rotation[:, ..d']`.
    pub projection: Tensor,
}

pub fn lda_fit(records: &[EmbeddingRecord], out_dim: usize) -> Result<Lda> {
    let groups = group_by_speaker(records);
    if groups.len() < 2 {
        return Err(Error::contract("LDA needs at least two speakers"));
    }
    let d = records[0].vector.numel();
    if out_dim == 0 || out_dim > d {
        return Err(Error::Config(format!("LDA dimension {out_dim} outside 1..={d}")));
    }
    let n = records.len() as f64;
    let all: Vec<&[f64]> = records.iter().map(|r| r.vector.data()).collect();
    let global = mean_vector(&all)?;
    let mut sw = Tensor::zeros(&[d, d]);
    let mut sb = Tensor::zeros(&[d, d]);
    for idx in groups.values() {
        let vs: Vec<&[f64]> = idx.iter().map(|&i| records[i].vector.data()).collect();
        let m = mean_vector(&vs)?;
        for v in &vs {
            outer_acc(&mut sw, v, &m, 1.0 / n);
        }
        outer_acc(&mut sb, &m, &global, idx.len() as f64 / n);
    }
    let trace: f64 = (0..d).map(|i| sw.at(i, i)).sum();
    let lambda = 1e-6 * trace / d as f64;
    for i in 0..d {
        sw.set(i, i, sw.at(i, i) + lambda.max(f64::MIN_POSITIVE));
    }
    let (wv, wvec) = sym_eig_jacobi(&sw)?;
    let mut whitening = wvec.clone();
    for c in 0..d {
        let s = 1.0 / wv.data()[c].max(EIG_FLOOR).sqrt();
        for r in 0..d {
            whitening.set(r, c, wvec.at(r, c) * s);
        }
    }
    let sbw = whitening
        .transpose()
        .matmul(&sb)?
        .matmul(&whitening)?
        .symmetrize();
    let (eigenvalues, rotation) = sym_eig_jacobi(&sbw)?;
    let full = whitening.matmul(&rotation)?;
    let mut projection = Tensor::zeros(&[d, out_dim]);
    for r in 0..d {
        for c in 0..out_dim {
            projection.set(r, c, full.at(r, c));
        }
    }
    Ok(Lda {
        whitening,
        rotation,
        eigenvalues,
        projection,
    })
}

/// `acc += w · (x − c)(x − c)ᵀ`
fn outer_acc(acc: &mut Tensor, x: &[f64], c: &[f64], w: f64) {
    let d = x.len();
    for i in 0..d {
        let di = x[i] - c[i];
        for j in 0..d {
            let v = acc.at(i, j) + w * di * (x[j] - c[j]);
            acc.set(i, j, v);
        }
    }
}

/// Gaussian PLDA `x = μ + Fω + ε` with precomputed pair-scoring matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    pub preproc: Preproc,
    pub mu: Tensor,
    pub f: Tensor,
    pub sigma: Tensor,
    pub p: Tensor,
    pub q: Tensor,
}

/// `P` and `Q` of the two-covariance pair score for loading `F` and residual `Σ`.
pub(crate) fn scoring_matrices(f: &Tensor, sigma: &Tensor) -> Result<(Tensor, Tensor)> {
    let ac = f.matmul(&f.transpose())?;
    let tot = ac.add(sigma)?;
    let tot_inv = spd_inverse(&tot)?;
    let inner = tot.sub(&ac.matmul(&tot_inv)?.matmul(&ac)?)?.symmetrize();
    let inner_inv = spd_inverse(&inner)?;
    let p = tot_inv.matmul(&ac)?.matmul(&inner_inv)?.symmetrize();
    let q = tot_inv.sub(&inner_inv)?.symmetrize();
    Ok((p, q))
}

pub(crate) fn quadratic_score(p: &Tensor, q: &Tensor, x: &[f64], y: &[f64]) -> f64 {
    q.bilinear(x, x) + q.bilinear(y, y) + 2.0 * p.bilinear(x, y)
}

impl PldaModel {
    pub fn new(preproc: Preproc, mu: Tensor, f: Tensor, sigma: Tensor) -> Result<Self> {
        if f.rows() != sigma.rows() || mu.numel() != f.rows() || preproc.output_dim() != f.rows() {
            return Err(Error::dim(
                "plda",
                format!(
                    "mu {:?}, F {:?}, Sigma {:?}, preproc out {}",
                    mu.shape(),
                    f.shape(),
                    sigma.shape(),
                    preproc.output_dim()
                ),
            ));
        }
        let (p, q) = scoring_matrices(&f, &sigma)?;
        Ok(Self {
            preproc,
            mu,
            f,
            sigma,
            p,
            q,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.numel()
    }

    /// Raw embedding to the centered PLDA space.
    pub fn transform(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let y = self.preproc.apply(raw)?;
        Ok(y.iter().zip(self.mu.data()).map(|(a, m)| a - m).collect())
    }
}

/// Pair score of two vectors already in the centered PLDA space.
pub fn plda_score(model: &PldaModel, x: &[f64], y: &[f64]) -> Result<f64> {
    let d = model.dim();
    if x.len() != d || y.len() != d {
        return Err(Error::dim("plda_score", format!("{} / {} vs {d}", x.len(), y.len())));
    }
    Ok(quadratic_score(&model.p, &model.q, x, y))
}

/// Transforms raw embeddings, averages the enrollment side, then scores.
pub fn plda_score_multi(model: &PldaModel, enroll: &[&[f64]], test: &[f64]) -> Result<f64> {
    if enroll.is_empty() {
        return Err(Error::contract("empty enrollment set"));
    }
    let t: Vec<Vec<f64>> = enroll.iter().map(|e| model.transform(e)).collect::<Result<_>>()?;
    let refs: Vec<&[f64]> = t.iter().map(Vec::as_slice).collect();
    let e = mean_vector(&refs)?;
    plda_score(model, &e, &model.transform(test)?)
}

/// Fitted model and the data log-likelihood before EM and after each iteration.
#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: PldaModel,
    pub log_likelihood: Vec<f64>,
}

struct SpeakerStats {
    n: f64,
    sum: Vec<f64>,
}

fn floor_eigenvalues(s: &Tensor) -> Result<Tensor> {
    let (w, v) = sym_eig_jacobi(&s.symmetrize())?;
    if w.data().iter().all(|&l| l >= EIG_FLOOR) {
        return Ok(s.symmetrize());
    }
    let d = s.rows();
    let mut scaled = v.clone();
    for c in 0..d {
        let l = w.data()[c].max(EIG_FLOOR);
        for r in 0..d {
            scaled.set(r, c, v.at(r, c) * l);
        }
    }
    Ok(scaled.matmul(&v.transpose())?.symmetrize())
}

/// Posterior precision `L = I + n FᵀΣ⁻¹F` and `b = FᵀΣ⁻¹ f`.
fn posterior(ftsi: &Tensor, ftsif: &Tensor, st: &SpeakerStats) -> (Tensor, Vec<f64>) {
    let r = ftsif.rows();
    let mut l = ftsif.scale(st.n);
    for i in 0..r {
        l.set(i, i, l.at(i, i) + 1.0);
    }
    (l, ftsi.matvec(&st.sum))
}

fn log_likelihood(stats: &[SpeakerStats], xx: &Tensor, f: &Tensor, sigma: &Tensor, total: f64) -> Result<f64> {
    let d = sigma.rows() as f64;
    let si = spd_inverse(sigma)?;
    let ftsi = f.transpose().matmul(&si)?;
    let ftsif = ftsi.matmul(f)?;
    let log_det_sigma = spd_log_det(sigma)?;
    let trace: f64 = si.data().iter().zip(xx.data()).map(|(a, b)| a * b).sum();
    let mut ll = -0.5 * total * d * LN_2PI - 0.5 * total * log_det_sigma - 0.5 * trace;
    for st in stats {
        let (l, b) = posterior(&ftsi, &ftsif, st);
        let lb = crate::numkernel::cholesky_solve(&l, &Tensor::vector(b.clone()))?;
        ll += -0.5 * spd_log_det(&l)? + 0.5 * b.iter().zip(lb.data()).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok(ll)
}

/// EM fit with known speaker labels on preprocessed, centered data.
pub fn plda_fit_em(records: &[EmbeddingRecord], preproc_cfg: PreprocConfig, rank: usize, iters: usize) -> Result<PldaFit> {
    let groups = group_by_speaker(records);
    if groups.len() < 2 {
        return Err(Error::contract("PLDA needs at least two speakers"));
    }
    let preproc = Preproc::fit(records, preproc_cfg)?;
    let data = preproc.apply_all(records)?;
    let d = preproc.output_dim();
    if rank == 0 || rank > d {
        return Err(Error::Config(format!("PLDA rank {rank} outside 1..={d}")));
    }
    let all: Vec<&[f64]> = data.iter().map(|r| r.vector.data()).collect();
    let mu = Tensor::vector(mean_vector(&all)?);
    let centered: Vec<Vec<f64>> = all
        .iter()
        .map(|v| v.iter().zip(mu.data()).map(|(a, m)| a - m).collect())
        .collect();
    let total = centered.len() as f64;

    let mut xx = Tensor::zeros(&[d, d]);
    let zero = vec![0.0; d];
    for x in &centered {
        outer_acc(&mut xx, x, &zero, 1.0);
    }
    let mut stats = Vec::with_capacity(groups.len());
    let mut sb = Tensor::zeros(&[d, d]);
    let mut sw = xx.clone();
    for idx in groups.values() {
        let mut sum = vec![0.0; d];
        for &i in idx {
            sum.iter_mut().zip(&centered[i]).for_each(|(s, x)| *s += x);
        }
        let n = idx.len() as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        outer_acc(&mut sb, &mean, &zero, 1.0 / groups.len() as f64);
        outer_acc(&mut sw, &mean, &zero, -n);
        stats.push(SpeakerStats { n, sum });
    }

    // start from the between-speaker principal directions
    let (bw, bv) = sym_eig_jacobi(&sb.symmetrize())?;
    let mut f = Tensor::zeros(&[d, rank]);
    for c in 0..rank {
        let s = bw.data()[c].max(1e-6).sqrt();
        for r in 0..d {
            f.set(r, c, bv.at(r, c) * s);
        }
    }
    let mut sigma = floor_eigenvalues(&sw.scale(1.0 / total))?;

    let mut lls = vec![log_likelihood(&stats, &xx, &f, &sigma, total)?];
    for _ in 0..iters {
        let si = spd_inverse(&sigma)?;
        let ftsi = f.transpose().matmul(&si)?;
        let ftsif = ftsi.matmul(&f)?;
        let mut c = Tensor::zeros(&[d, rank]);
        let mut rm = Tensor::zeros(&[rank, rank]);
        for st in &stats {
            let (l, b) = posterior(&ftsi, &ftsif, st);
            let cov = spd_inverse(&l)?;
            let w = cov.matvec(&b);
            for i in 0..d {
                for j in 0..rank {
                    c.set(i, j, c.at(i, j) + st.sum[i] * w[j]);
                }
            }
            for i in 0..rank {
                for j in 0..rank {
                    rm.set(i, j, rm.at(i, j) + st.n * (cov.at(i, j) + w[i] * w[j]));
                }
            }
        }
        let rm_inv = spd_inverse(&rm.symmetrize())?;
        f = c.matmul(&rm_inv)?;
        let s = xx.sub(&f.matmul(&c.transpose())?)?.scale(1.0 / total);
        sigma = floor_eigenvalues(&s)?;
        lls.push(log_likelihood(&stats, &xx, &f, &sigma, total)?);
    }
    Ok(PldaFit {
        model: PldaModel::new(preproc, mu, f, sigma)?,
        log_likelihood: lls,
    })
}
