use rand::Rng;

use super::{calibrate_lr, cosine_score};
use crate::encoder::uniform;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub sdsa_heads: usize,
    pub ffsa_heads: usize,
    pub ffsa_hidden: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            sdsa_heads: 4,
            ffsa_heads: 4,
            ffsa_hidden: 64,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ffsa_hidden == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        for (name, h) in [("SDSA", self.sdsa_heads), ("FFSA", self.ffsa_heads)] {
            if h == 0 || self.dim % h != 0 {
                return Err(Error::Config(format!(
                    "{name} head count {h} does not divide embedding dim {}",
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdsaHead<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfsaHead<T> {
    /// `[D2 × D/d2]`
    pub w: T,
    /// `[D2]`
    pub v: T,
}

/// Attention back-end weights, generic over storage or tape handles.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub sdsa: Vec<SdsaHead<T>>,
    /// `[D × D]`
    pub wo: T,
    pub ffsa: Vec<FfsaHead<T>>,
    pub a: T,
    pub b: T,
}

pub type AttentionParams = AttentionWeights<Tensor>;
pub type AttentionVars = AttentionWeights<Var>;

impl<T> AttentionWeights<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, h) in self.sdsa.iter().enumerate() {
            out.push((format!("sdsa{i}.wq"), &h.wq));
            out.push((format!("sdsa{i}.wk"), &h.wk));
            out.push((format!("sdsa{i}.wv"), &h.wv));
        }
        out.push(("sdsa.wo".into(), &self.wo));
        for (j, h) in self.ffsa.iter().enumerate() {
            out.push((format!("ffsa{j}.w"), &h.w));
            out.push((format!("ffsa{j}.v"), &h.v));
        }
        out.push(("calib.a".into(), &self.a));
        out.push(("calib.b".into(), &self.b));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for h in &mut self.sdsa {
            out.extend([&mut h.wq, &mut h.wk, &mut h.wv]);
        }
        out.push(&mut self.wo);
        for h in &mut self.ffsa {
            out.extend([&mut h.w, &mut h.v]);
        }
        out.push(&mut self.a);
        out.push(&mut self.b);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            sdsa: self
                .sdsa
                .iter()
                .map(|h| SdsaHead {
                    wq: f(&h.wq),
                    wk: f(&h.wk),
                    wv: f(&h.wv),
                })
                .collect(),
            wo: f(&self.wo),
            ffsa: self
                .ffsa
                .iter()
                .map(|h| FfsaHead { w: f(&h.w), v: f(&h.v) })
                .collect(),
            a: f(&self.a),
            b: f(&self.b),
        }
    }
}

impl AttentionParams {
    pub fn init(cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let dh = d / cfg.sdsa_heads;
        let df = d / cfg.ffsa_heads;
        let sdsa = (0..cfg.sdsa_heads)
            .map(|_| SdsaHead {
                wq: uniform(rng, &[d, dh], d),
                wk: uniform(rng, &[d, dh], d),
                wv: uniform(rng, &[d, dh], d),
            })
            .collect();
        let wo = uniform(rng, &[d, d], d);
        let ffsa = (0..cfg.ffsa_heads)
            .map(|_| FfsaHead {
                w: uniform(rng, &[cfg.ffsa_hidden, df], df),
                v: uniform(rng, &[cfg.ffsa_hidden], cfg.ffsa_hidden),
            })
            .collect();
        Ok(Self {
            sdsa,
            wo,
            ffsa,
            a: Tensor::scalar(1.0),
            b: Tensor::scalar(0.0),
        })
    }

    pub fn config(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.wo.rows(),
            sdsa_heads: self.sdsa.len(),
            ffsa_heads: self.ffsa.len(),
            ffsa_hidden: self.ffsa.first().map_or(0, |h| h.w.rows()),
        }
    }

    pub fn check_shapes(&self, cfg: &AttentionConfig) -> Result<()> {
        let want = Self::init(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let (mine, want) = (self.named(), want.named());
        if mine.len() != want.len() {
            return Err(Error::Compatibility(format!(
                "attention back-end has {} tensors, config expects {}",
                mine.len(),
                want.len()
            )));
        }
        for ((n, t), (_, w)) in mine.iter().zip(&want) {
            if t.shape() != w.shape() {
                return Err(Error::Compatibility(format!(
                    "{n}: shape {:?}, config expects {:?}",
                    t.shape(),
                    w.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttentionVars {
        self.map(|t| tape.leaf(t.clone(), trainable))
    }

    /// Aggregated speaker vector `h` for an enrollment set.
    pub fn aggregate_set(&self, enroll: &[&[f64]]) -> Result<Vec<f64>> {
        if enroll.is_empty() {
            return Err(Error::contract("empty enrollment set"));
        }
        let d = self.wo.rows();
        if enroll.iter().any(|e| e.len() != d) {
            return Err(Error::dim("attention", format!("enrollment embeddings must have dim {d}")));
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let data = enroll.iter().flat_map(|e| e.iter().copied()).collect();
        let e = tape.constant(Tensor::matrix(enroll.len(), d, data)?);
        let h = aggregate(&mut tape, &w, e)?;
        Ok(tape.value(h).data().to_vec())
    }

    /// Raw cosine and calibrated probability for one trial.
    pub fn score(&self, enroll: &[&[f64]], test: &[f64]) -> Result<(f64, f64)> {
        let h = self.aggregate_set(enroll)?;
        let cos = cosine_score(test, &h)?;
        Ok((cos, calibrate_lr(cos, self.a.item(), self.b.item())))
    }
}

/// Multi-head scaled dot self-attention with a residual connection; `E` is `[K × D]`.
pub fn sdsa_forward(tape: &mut Tape, w: &AttentionVars, e: Var) -> Result<Var> {
    let d = tape.value(e).cols();
    let heads = w.sdsa.len();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} SDSA heads for dim {d}")));
    }
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in &w.sdsa {
        let q = tape.matmul(e, h.wq)?;
        let k = tape.matmul(e, h.wk)?;
        let v = tape.matmul(e, h.wv)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let logits = tape.scale(logits, scale)?;
        let att = tape.softmax_rows(logits)?;
        outs.push(tape.matmul(att, v)?);
    }
    let cat = tape.concat_cols(&outs)?;
    let proj = tape.matmul(cat, w.wo)?;
    tape.add(proj, e)
}

/// Multi-head feed-forward self-attention pooling of `H` (`[K × D]`) into `[D]`.
pub fn ffsa_aggregate(tape: &mut Tape, w: &AttentionVars, h: Var) -> Result<Var> {
    let d = tape.value(h).cols();
    let heads = w.ffsa.len();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} FFSA heads for dim {d}")));
    }
    let dd = d / heads;
    let mut parts = Vec::with_capacity(heads);
    for (j, head) in w.ffsa.iter().enumerate() {
        let hj = tape.slice_cols(h, j * dd, (j + 1) * dd)?;
        let hjt = tape.transpose(hj)?;
        let z = tape.matmul(head.w, hjt)?;
        let z = tape.tanh(z)?;
        let d2 = tape.value(head.v).numel();
        let v = tape.reshape(head.v, &[1, d2])?;
        let logits = tape.matmul(v, z)?;
        let att = tape.softmax_rows(logits)?;
        parts.push(tape.matmul(att, hj)?);
    }
    tape.concat(&parts)
}

/// SDSA followed by FFSA.
pub fn aggregate(tape: &mut Tape, w: &AttentionVars, e: Var) -> Result<Var> {
    let h = sdsa_forward(tape, w, e)?;
    ffsa_aggregate(tape, w, h)
}

fn normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    let n2 = tape.row_sums(sq)?;
    let n = tape.sqrt(n2)?;
    let inv = tape.powf(n, -1.0)?;
    tape.scale_rows(x, inv)
}

/// Calibrated probabilities for every (test, enrollment speaker) cell of an S×U batch.
///
/// `emb` is `[S·U × D]` with row `n·U + m` holding utterance `m` of speaker
/// `n`. Speaker `n`'s enrollment for test utterance index `m` is its other
/// `U − 1` utterances. `tests` is `[R × D]` and `test_utt[r]` is the
/// utterance index of test row `r`. Returns `(cosines, probabilities)`,
/// both `[R × S]`.
pub fn batch_cell_probabilities(
    tape: &mut Tape,
    w: &AttentionVars,
    emb: Var,
    speakers: usize,
    utts: usize,
    tests: Var,
    test_utt: &[usize],
) -> Result<(Var, Var)> {
    if utts < 2 {
        return Err(Error::contract("trial batches need at least two utterances per speaker"));
    }
    let d = tape.value(emb).cols();
    if tape.value(emb).rows() != speakers * utts {
        return Err(Error::dim(
            "batch_cell_probabilities",
            format!("{} rows for {speakers}x{utts}", tape.value(emb).rows()),
        ));
    }
    let r_count = tape.value(tests).rows();
    if test_utt.len() != r_count || test_utt.iter().any(|&m| m >= utts) {
        return Err(Error::contract("test utterance indices do not match the test rows"));
    }
    let mut hs = Vec::with_capacity(speakers * utts);
    for n in 0..speakers {
        for m in 0..utts {
            let idx: Vec<usize> = (0..utts)
                .filter(|&u| u != m)
                .flat_map(|u| {
                    let row = n * utts + u;
                    (row * d..(row + 1) * d).collect::<Vec<_>>()
                })
                .collect();
            let e = tape.gather(emb, idx, &[utts - 1, d])?;
            hs.push(aggregate(tape, w, e)?);
        }
    }
    let h = tape.stack_rows(&hs)?;
    let hn = normalize_rows(tape, h)?;
    let qn = normalize_rows(tape, tests)?;
    let hnt = tape.transpose(hn)?;
    let all = tape.matmul(qn, hnt)?;
    let cols = speakers * utts;
    let idx = (0..r_count)
        .flat_map(|r| (0..speakers).map(move |n| r * cols + n * utts + test_utt[r]))
        .collect();
    let cos = tape.gather(all, idx, &[r_count, speakers])?;
    let z = tape.mul(cos, w.a)?;
    let z = tape.add(z, w.b)?;
    let p = tape.sigmoid(z)?;
    Ok((cos, p))
}
