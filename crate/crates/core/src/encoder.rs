//! Small TDNN speaker encoder: spliced-context frame layers, optional SE
//! channel gating, statistics or attentive statistics pooling, and an
//! embedding layer followed by a classifier head used only for pretraining.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{mean_std_over_time, Tape, Tensor, Var};

/// Channels × frames feature matrix with its speaker label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub speaker_id: String,
    pub utterance_id: String,
    pub label: usize,
    pub frames: Tensor,
}

impl FeatureSequence {
    pub fn channels(&self) -> usize {
        self.frames.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub offsets: Vec<i32>,
    pub channels: usize,
}

impl LayerSpec {
    pub fn new(offsets: &[i32], channels: usize) -> Self {
        Self {
            offsets: offsets.to_vec(),
            channels,
        }
    }

    /// Frames consumed by this layer (max − min offset).
    pub fn span(&self) -> usize {
        (self.offsets[self.offsets.len() - 1] - self.offsets[0]) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Stats,
    Attentive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub pooling: Pooling,
    /// Hidden size of the attention scorer in attentive pooling.
    pub asp_hidden: usize,
    /// SE bottleneck ratio; `None` disables SE gating.
    pub se_ratio: Option<usize>,
    pub embedding_dim: usize,
    /// Extra hidden layers between the embedding and the classifier.
    pub fc_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 23,
            layers: vec![
                LayerSpec::new(&[-2, -1, 0, 1, 2], 64),
                LayerSpec::new(&[-3, 0, 3], 64),
            ],
            pooling: Pooling::Stats,
            asp_hidden: 16,
            se_ratio: None,
            embedding_dim: 32,
            fc_hidden: Vec::new(),
            num_classes: 50,
        }
    }
}

impl EncoderConfig {
    /// Five-layer x-vector frame stack with configurable widths.
    pub fn xvector(input_dim: usize, channels: usize, embedding_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            layers: vec![
                LayerSpec::new(&[-2, -1, 0, 1, 2], channels),
                LayerSpec::new(&[-2, 0, 2], channels),
                LayerSpec::new(&[-3, 0, 3], channels),
                LayerSpec::new(&[0], channels),
                LayerSpec::new(&[0], channels),
            ],
            pooling: Pooling::Stats,
            asp_hidden: 16,
            se_ratio: None,
            embedding_dim,
            fc_hidden: vec![embedding_dim],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("encoder needs at least one TDNN layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.offsets.is_empty() || l.offsets.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(format!(
                    "layer {i}: context offsets must be strictly increasing"
                )));
            }
            if l.channels == 0 {
                return Err(Error::Config(format!("layer {i}: zero channels")));
            }
            if let Some(r) = self.se_ratio {
                if r == 0 || l.channels % r != 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: SE ratio {r} does not divide {} channels",
                        l.channels
                    )));
                }
            }
        }
        if self.input_dim == 0 || self.embedding_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Frames lost to valid-mode splicing across all layers.
    pub fn context_reduction(&self) -> usize {
        self.layers.iter().map(LayerSpec::span).sum()
    }

    pub fn min_frames(&self) -> usize {
        self.context_reduction() + 1
    }

    fn last_channels(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.channels)
    }

    fn head_input_dim(&self) -> usize {
        *self.fc_hidden.last().unwrap_or(&self.embedding_dim)
    }
}

/// Affine layer weights `[in × out]` and bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspParams<T> {
    pub w: T,
    pub b: T,
    pub v: T,
    pub k: T,
}

/// Encoder weights, generic over storage (`Tensor`) or tape handles (`Var`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub tdnn: Vec<Affine<T>>,
    pub se: Vec<SeParams<T>>,
    pub asp: Option<AspParams<T>>,
    pub embedding: Affine<T>,
    pub hidden: Vec<Affine<T>>,
    /// Classifier matrix `[head_in × classes]`, no bias.
    pub classifier: T,
}

pub type EncoderParams = EncoderWeights<Tensor>;
pub type EncoderVars = EncoderWeights<Var>;

impl<T> EncoderWeights<T> {
    /// All weights with stable names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (i, l) in self.tdnn.iter().enumerate() {
            out.push((format!("tdnn{i}.weight"), &l.weight));
            out.push((format!("tdnn{i}.bias"), &l.bias));
        }
        for (i, s) in self.se.iter().enumerate() {
            out.push((format!("se{i}.w1"), &s.w1));
            out.push((format!("se{i}.b1"), &s.b1));
            out.push((format!("se{i}.w2"), &s.w2));
            out.push((format!("se{i}.b2"), &s.b2));
        }
        if let Some(a) = &self.asp {
            out.push(("asp.w".into(), &a.w));
            out.push(("asp.b".into(), &a.b));
            out.push(("asp.v".into(), &a.v));
            out.push(("asp.k".into(), &a.k));
        }
        out.push(("embedding.weight".into(), &self.embedding.weight));
        out.push(("embedding.bias".into(), &self.embedding.bias));
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), &l.weight));
            out.push((format!("hidden{i}.bias"), &l.bias));
        }
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Mutable weights in the same order as [`Self::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for l in &mut self.tdnn {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for s in &mut self.se {
            out.extend([&mut s.w1, &mut s.b1, &mut s.w2, &mut s.b2]);
        }
        if let Some(a) = &mut self.asp {
            out.extend([&mut a.w, &mut a.b, &mut a.v, &mut a.k]);
        }
        out.push(&mut self.embedding.weight);
        out.push(&mut self.embedding.bias);
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderWeights<U> {
        let aff = |a: &Affine<T>, f: &mut dyn FnMut(&T) -> U| Affine {
            weight: f(&a.weight),
            bias: f(&a.bias),
        };
        EncoderWeights {
            tdnn: self.tdnn.iter().map(|a| aff(a, &mut f)).collect(),
            se: self
                .se
                .iter()
                .map(|s| SeParams {
                    w1: f(&s.w1),
                    b1: f(&s.b1),
                    w2: f(&s.w2),
                    b2: f(&s.b2),
                })
                .collect(),
            asp: self.asp.as_ref().map(|a| AspParams {
                w: f(&a.w),
                b: f(&a.b),
                v: f(&a.v),
                k: f(&a.k),
            }),
            embedding: aff(&self.embedding, &mut f),
            hidden: self.hidden.iter().map(|a| aff(a, &mut f)).collect(),
            classifier: f(&self.classifier),
        }
    }
}

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape")
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tdnn = Vec::new();
        let mut se = Vec::new();
        let mut c_in = cfg.input_dim;
        for l in &cfg.layers {
            let fan_in = c_in * l.offsets.len();
            tdnn.push(Affine {
                weight: uniform(rng, &[fan_in, l.channels], fan_in),
                bias: Tensor::zeros(&[l.channels]),
            });
            if let Some(r) = cfg.se_ratio {
                let bottleneck = l.channels / r;
                se.push(SeParams {
                    w1: uniform(rng, &[l.channels, bottleneck], l.channels),
                    b1: Tensor::zeros(&[bottleneck]),
                    w2: uniform(rng, &[bottleneck, l.channels], bottleneck),
                    b2: Tensor::zeros(&[l.channels]),
                });
            }
            c_in = l.channels;
        }
        let c = cfg.last_channels();
        let asp = match cfg.pooling {
            Pooling::Stats => None,
            Pooling::Attentive => Some(AspParams {
                w: uniform(rng, &[c, cfg.asp_hidden], c),
                b: Tensor::zeros(&[cfg.asp_hidden]),
                v: uniform(rng, &[cfg.asp_hidden], cfg.asp_hidden),
                k: Tensor::scalar(0.0),
            }),
        };
        let embedding = Affine {
            weight: uniform(rng, &[2 * c, cfg.embedding_dim], 2 * c),
            bias: Tensor::zeros(&[cfg.embedding_dim]),
        };
        let mut hidden = Vec::new();
        let mut h_in = cfg.embedding_dim;
        for &h in &cfg.fc_hidden {
            hidden.push(Affine {
                weight: uniform(rng, &[h_in, h], h_in),
                bias: Tensor::zeros(&[h]),
            });
            h_in = h;
        }
        let classifier = uniform(rng, &[cfg.head_input_dim(), cfg.num_classes], cfg.head_input_dim());
        Ok(Self {
            tdnn,
            se,
            asp,
            embedding,
            hidden,
            classifier,
        })
    }

    /// Records every weight on `tape`; `trainable` controls gradient flow.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        self.map(|t| tape.leaf(t.clone(), trainable))
    }

    /// Checks every tensor shape against what `cfg` would allocate.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let reference = Self::init(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mine = self.named();
        let want = reference.named();
        if mine.len() != want.len() {
            return Err(Error::Compatibility(format!(
                "encoder has {} tensors, config expects {}",
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
}

/// Stacks frames at each context offset (valid mode, no padding).
pub fn context_splice(tape: &mut Tape, x: Var, offsets: &[i32]) -> Result<Var> {
    let (c, t) = (tape.value(x).rows(), tape.value(x).cols());
    let lo = offsets[0];
    let span = (offsets[offsets.len() - 1] - lo) as usize;
    if t <= span {
        return Err(Error::Length {
            frames: t,
            span: span + 1,
        });
    }
    let t_out = t - span;
    let rows = c * offsets.len();
    let mut idx = Vec::with_capacity(rows * t_out);
    for off in offsets {
        let shift = (off - lo) as usize;
        for ch in 0..c {
            idx.extend((0..t_out).map(|tp| ch * t + tp + shift));
        }
    }
    tape.gather(x, idx, &[rows, t_out])
}

/// `ReLU(Wᵀ · splice(x) + b)` per frame.
pub fn tdnn_layer(tape: &mut Tape, x: Var, offsets: &[i32], layer: &Affine<Var>) -> Result<Var> {
    let spliced = context_splice(tape, x, offsets)?;
    let w = tape.value(layer.weight);
    if w.rows() != tape.value(spliced).rows() {
        return Err(Error::dim(
            "tdnn_layer",
            format!(
                "weight {:?} for {} spliced channels",
                w.shape(),
                tape.value(spliced).rows()
            ),
        ));
    }
    let wt = tape.transpose(layer.weight)?;
    let pre = tape.matmul(wt, spliced)?;
    let pre = tape.add_column(pre, layer.bias)?;
    tape.relu(pre)
}

/// `x · W + b` for a vector `x`.
pub fn affine_vec(tape: &mut Tape, x: Var, layer: &Affine<Var>) -> Result<Var> {
    let n = tape.value(x).numel();
    let out = tape.value(layer.weight).cols();
    let row = tape.reshape(x, &[1, n])?;
    let y = tape.matmul(row, layer.weight)?;
    let y = tape.reshape(y, &[out])?;
    tape.add(y, layer.bias)
}

/// Concatenated time mean and standard deviation.
pub fn stats_pool(tape: &mut Tape, m: Var) -> Result<Var> {
    let (mean, std) = mean_std_over_time(tape, m, None)?;
    tape.concat(&[mean, std])
}

/// Attention weights over frames: softmax_t(vᵀ tanh(Wᵀ m_t + b) + k).
pub fn attention_weights(tape: &mut Tape, m: Var, p: &AspParams<Var>) -> Result<Var> {
    let t = tape.value(m).cols();
    let a = tape.value(p.v).numel();
    let wt = tape.transpose(p.w)?;
    let hidden = tape.matmul(wt, m)?;
    let hidden = tape.add_column(hidden, p.b)?;
    let hidden = tape.tanh(hidden)?;
    let v = tape.reshape(p.v, &[1, a])?;
    let logits = tape.matmul(v, hidden)?;
    let logits = tape.add(logits, p.k)?;
    let alpha = tape.softmax_rows(logits)?;
    tape.reshape(alpha, &[t])
}

/// Attention-weighted mean and standard deviation, concatenated.
pub fn attentive_stats_pool(tape: &mut Tape, m: Var, p: &AspParams<Var>) -> Result<Var> {
    let alpha = attention_weights(tape, m, p)?;
    let (mean, std) = mean_std_over_time(tape, m, Some(alpha))?;
    tape.concat(&[mean, std])
}

/// Squeeze-and-excitation channel gating of a C×T map.
pub fn se_block(tape: &mut Tape, m: Var, p: &SeParams<Var>) -> Result<Var> {
    let t = tape.value(m).cols();
    let c = tape.value(m).rows();
    let avg = tape.constant(Tensor::filled(&[t, 1], 1.0 / t as f64));
    let z = tape.matmul(m, avg)?;
    let z = tape.reshape(z, &[c])?;
    let h = affine_vec(
        tape,
        z,
        &Affine {
            weight: p.w1,
            bias: p.b1,
        },
    )?;
    let h = tape.relu(h)?;
    let s = affine_vec(
        tape,
        h,
        &Affine {
            weight: p.w2,
            bias: p.b2,
        },
    )?;
    let s = tape.sigmoid(s)?;
    tape.scale_rows(m, s)
}

/// Frame stack plus pooling plus embedding layer; returns the D-dim embedding.
pub fn forward_embedding(tape: &mut Tape, cfg: &EncoderConfig, w: &EncoderVars, frames: Var) -> Result<Var> {
    let (c, t) = (tape.value(frames).rows(), tape.value(frames).cols());
    if c != cfg.input_dim {
        return Err(Error::dim(
            "encode",
            format!("{c} feature channels, encoder expects {}", cfg.input_dim),
        ));
    }
    if t < cfg.min_frames() {
        return Err(Error::Length {
            frames: t,
            span: cfg.min_frames(),
        });
    }
    let mut x = frames;
    for (i, spec) in cfg.layers.iter().enumerate() {
        x = tdnn_layer(tape, x, &spec.offsets, &w.tdnn[i])?;
        if let Some(se) = w.se.get(i) {
            x = se_block(tape, x, se)?;
        }
    }
    let pooled = match (&cfg.pooling, &w.asp) {
        (Pooling::Attentive, Some(asp)) => attentive_stats_pool(tape, x, asp)?,
        (Pooling::Stats, _) => stats_pool(tape, x)?,
        (Pooling::Attentive, None) => {
            return Err(Error::Config("attentive pooling without ASP weights".into()))
        }
    };
    affine_vec(tape, pooled, &w.embedding)
}

/// Classifier-head input from an embedding (hidden FC layers, ReLU between).
pub fn head_input(tape: &mut Tape, w: &EncoderVars, embedding: Var) -> Result<Var> {
    let mut g = embedding;
    for layer in &w.hidden {
        let act = tape.relu(g)?;
        g = affine_vec(tape, act, layer)?;
    }
    Ok(g)
}

/// Class logits `gᵀ W` for the plain softmax head.
pub fn logits(tape: &mut Tape, w: &EncoderVars, embedding: Var) -> Result<Var> {
    let g = head_input(tape, w, embedding)?;
    let n = tape.value(g).numel();
    let classes = tape.value(w.classifier).cols();
    let row = tape.reshape(g, &[1, n])?;
    let out = tape.matmul(row, w.classifier)?;
    tape.reshape(out, &[classes])
}

/// Cosines between the head input and each class weight column.
pub fn class_cosines(tape: &mut Tape, w: &EncoderVars, embedding: Var) -> Result<Var> {
    let g = head_input(tape, w, embedding)?;
    let n = tape.value(g).numel();
    let classes = tape.value(w.classifier).cols();
    let gn = crate::backend::l2_normalize(tape, g)?;
    let row = tape.reshape(gn, &[1, n])?;
    let sq = tape.mul(w.classifier, w.classifier)?;
    let wt = tape.transpose(sq)?;
    let col_norm2 = tape.row_sums(wt)?;
    let col_norm = tape.sqrt(col_norm2)?;
    let raw = tape.matmul(row, w.classifier)?;
    let raw = tape.reshape(raw, &[classes])?;
    tape.div(raw, col_norm)
}

/// Deterministic inference: D-dim embedding of one feature sequence.
pub fn encode(x: &FeatureSequence, cfg: &EncoderConfig, params: &EncoderParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let frames = tape.constant(x.frames.clone());
    let e = forward_embedding(&mut tape, cfg, &w, frames)?;
    Ok(tape.value(e).clone())
}

/// Label pair and mixing weight produced by feature-level mixup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedLabel {
    pub first: usize,
    pub second: usize,
    /// Weight on `first`; `1 − weight` goes to `second`.
    pub weight: f64,
}

/// `β·x1 + (1−β)·x2` after cropping both to the shorter length.
pub fn mixup_features(x1: &Tensor, y1: usize, x2: &Tensor, y2: usize, beta: f64) -> Result<(Tensor, MixedLabel)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::contract(format!("mixup weight {beta} outside [0, 1]")));
    }
    if x1.rows() != x2.rows() {
        return Err(Error::dim(
            "mixup_features",
            format!("{} vs {} channels", x1.rows(), x2.rows()),
        ));
    }
    let (c, t) = (x1.rows(), x1.cols().min(x2.cols()));
    let mut out = Tensor::zeros(&[c, t]);
    for r in 0..c {
        for k in 0..t {
            out.set(r, k, beta * x1.at(r, k) + (1.0 - beta) * x2.at(r, k));
        }
    }
    Ok((
        out,
        MixedLabel {
            first: y1,
            second: y2,
            weight: beta,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        uniform(rng, shape, 1)
    }

    #[test]
    fn splice_lengths_and_indices() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 10], (0..10).map(f64::from).collect()).unwrap());
        let id = context_splice(&mut tape, x, &[0]).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
        let s = context_splice(&mut tape, x, &[-2, -1, 0, 1, 2]).unwrap();
        assert_eq!(tape.shape(s), &[5, 6]);

        let x15 = tape.constant(Tensor::new(vec![2, 15], (0..30).map(f64::from).collect()).unwrap());
        let s = context_splice(&mut tape, x15, &[-3, 0, 3]).unwrap();
        assert_eq!(tape.shape(s), &[6, 9]);
        // column 0 stacks frames 0, 3, 6 of each channel
        let col0: Vec<f64> = (0..6).map(|r| tape.value(s).at(r, 0)).collect();
        assert_eq!(col0, vec![0.0, 15.0, 3.0, 18.0, 6.0, 21.0]);

        let short = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            context_splice(&mut tape, short, &[-2, 0, 2]),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn tdnn_trivial_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_tensor(&mut rng, &[3, 6]);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let zero = Affine {
            weight: tape.constant(Tensor::zeros(&[9, 4])),
            bias: tape.constant(Tensor::zeros(&[4])),
        };
        let y = tdnn_layer(&mut tape, x, &[-1, 0, 1], &zero).unwrap();
        assert_eq!(tape.value(y).max_abs(), 0.0);

        let ident = Affine {
            weight: tape.constant(Tensor::eye(3)),
            bias: tape.constant(Tensor::zeros(&[3])),
        };
        let y = tdnn_layer(&mut tape, x, &[0], &ident).unwrap();
        assert_eq!(tape.value(y), &x0.map(|v| v.max(0.0)));
    }

    #[test]
    fn tdnn_two_layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 12]);
        let params = vec![
            rand_tensor(&mut rng, &[9, 4]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[12, 5]),
            rand_tensor(&mut rng, &[5]),
        ];
        let r = grad_check(
            |tape, p| {
                let xv = tape.constant(x.clone());
                let l1 = Affine { weight: p[0], bias: p[1] };
                let l2 = Affine { weight: p[2], bias: p[3] };
                let h = tdnn_layer(tape, xv, &[-1, 0, 1], &l1)?;
                let h = tdnn_layer(tape, h, &[-2, 0, 2], &l2)?;
                let sq = tape.mul(h, h)?;
                tape.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    #[test]
    fn stats_pool_constant_and_single_frame() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::from_rows(&[vec![2.0; 4], vec![-3.0; 4]]).unwrap());
        let p = stats_pool(&mut tape, m).unwrap();
        let v = tape.value(p).data();
        assert!((v[0] - 2.0).abs() < 1e-12 && (v[1] + 3.0).abs() < 1e-12);
        assert!(v[2] <= 1e-4 && v[3] <= 1e-4);
    }

    fn asp_vars(tape: &mut Tape, rng: &mut ChaCha8Rng, c: usize, a: usize, zero_v: bool) -> AspParams<Var> {
        AspParams {
            w: tape.constant(rand_tensor(rng, &[c, a])),
            b: tape.constant(rand_tensor(rng, &[a])),
            v: tape.constant(if zero_v { Tensor::zeros(&[a]) } else { rand_tensor(rng, &[a]) }),
            k: tape.constant(Tensor::scalar(0.37)),
        }
    }

    #[test]
    fn asp_with_zero_v_reduces_to_stats_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let m = tape.constant(rand_tensor(&mut rng, &[5, 11]));
        let p = asp_vars(&mut tape, &mut rng, 5, 4, true);
        let a = attentive_stats_pool(&mut tape, m, &p).unwrap();
        let s = stats_pool(&mut tape, m).unwrap();
        assert!(tape.value(a).sub(tape.value(s)).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn asp_weights_normalized_and_single_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let m = tape.constant(rand_tensor(&mut rng, &[5, 13]));
        let p = asp_vars(&mut tape, &mut rng, 5, 4, false);
        let alpha = attention_weights(&mut tape, m, &p).unwrap();
        let total: f64 = tape.value(alpha).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let x1 = rand_tensor(&mut rng, &[5, 1]);
        let m1 = tape.constant(x1.clone());
        let alpha1 = attention_weights(&mut tape, m1, &p).unwrap();
        assert_eq!(tape.value(alpha1).data(), &[1.0]);
        let out = attentive_stats_pool(&mut tape, m1, &p).unwrap();
        let v = tape.value(out).data();
        assert_eq!(&v[..5], x1.data());
        assert!(v[5..].iter().all(|&s| s <= 1e-4));
    }

    #[test]
    fn se_block_zero_weights_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&mut rng, &[4, 7]);
        let mut tape = Tape::new();
        let m = tape.constant(x0.clone());
        let p = SeParams {
            w1: tape.constant(Tensor::zeros(&[4, 2])),
            b1: tape.constant(rand_tensor(&mut rng, &[2])),
            w2: tape.constant(Tensor::zeros(&[2, 4])),
            b2: tape.constant(Tensor::zeros(&[4])),
        };
        let y = se_block(&mut tape, m, &p).unwrap();
        assert!(tape.value(y).sub(&x0.scale(0.5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn se_block_gates_in_unit_interval_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_tensor(&mut rng, &[4, 7]);
        let params = vec![
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[2, 4]),
            rand_tensor(&mut rng, &[4]),
        ];
        {
            let mut tape = Tape::new();
            let m = tape.constant(x0.clone());
            let v: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
            let p = SeParams { w1: v[0], b1: v[1], w2: v[2], b2: v[3] };
            let y = se_block(&mut tape, m, &p).unwrap();
            let out = tape.value(y);
            for r in 0..4 {
                let ratio = out.at(r, 0) / x0.at(r, 0);
                assert!(ratio > 0.0 && ratio < 1.0);
                for c in 1..7 {
                    assert!((out.at(r, c) / x0.at(r, c) - ratio).abs() < 1e-12);
                }
            }
        }
        let r = grad_check(
            |tape, p| {
                let m = tape.param(x0.clone());
                let se = SeParams { w1: p[0], b1: p[1], w2: p[2], b2: p[3] };
                let y = se_block(tape, m, &se)?;
                let t = tape.tanh(y)?;
                tape.sum(t)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    fn micro_cfg(pooling: Pooling, se: Option<usize>) -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            layers: vec![LayerSpec::new(&[-1, 0, 1], 4), LayerSpec::new(&[-2, 0, 2], 4)],
            pooling,
            asp_hidden: 3,
            se_ratio: se,
            embedding_dim: 5,
            fc_hidden: vec![4],
            num_classes: 3,
        }
    }

    #[test]
    fn encode_is_deterministic_with_configured_dim() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let seq = FeatureSequence {
            speaker_id: "s".into(),
            utterance_id: "u".into(),
            label: 0,
            frames: rand_tensor(&mut rng, &[23, 30]),
        };
        let a = encode(&seq, &cfg, &params).unwrap();
        let b = encode(&seq.clone(), &cfg, &params).unwrap();
        assert_eq!(a.numel(), cfg.embedding_dim);
        assert_eq!(a.data(), b.data());

        let short = FeatureSequence {
            frames: Tensor::zeros(&[23, cfg.context_reduction()]),
            ..seq
        };
        assert!(matches!(encode(&short, &cfg, &params), Err(Error::Length { .. })));
    }

    #[test]
    fn asp_zero_v_encoding_equals_stats_encoding() {
        let cfg_asp = micro_cfg(Pooling::Attentive, None);
        let cfg_sp = micro_cfg(Pooling::Stats, None);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p_asp = EncoderParams::init(&cfg_asp, &mut rng).unwrap();
        p_asp.asp.as_mut().unwrap().v = Tensor::zeros(&[3]);
        let mut p_sp = p_asp.clone();
        p_sp.asp = None;
        let frames = rand_tensor(&mut rng, &[3, 15]);
        let seq = FeatureSequence {
            speaker_id: "s".into(),
            utterance_id: "u".into(),
            label: 0,
            frames,
        };
        let a = encode(&seq, &cfg_asp, &p_asp).unwrap();
        let b = encode(&seq, &cfg_sp, &p_sp).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn classification_gradient_through_encoder() {
        let cfg = micro_cfg(Pooling::Attentive, Some(2));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let frames = rand_tensor(&mut rng, &[3, 12]);
        let flat: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
        let template = params.clone();
        let r = grad_check(
            |tape, p| {
                let mut it = p.iter().copied();
                let w = template.map(|_| it.next().unwrap());
                let x = tape.constant(frames.clone());
                let e = forward_embedding(tape, &cfg, &w, x)?;
                let z = logits(tape, &w, e)?;
                let lsm = tape.reshape(z, &[1, 3])?;
                let lsm = tape.log_softmax_rows(lsm)?;
                let pick = tape.pick(lsm, 1)?;
                tape.scale(pick, -1.0)
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(r.within(1e-4), "{r:?}");
    }

    #[test]
    fn valid_mode_reduction_matches_xvector_context() {
        // x-vector stack: total context 15 frames, so 14 are consumed
        let cfg = EncoderConfig::xvector(23, 8, 8, 4);
        assert_eq!(cfg.context_reduction(), 14);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = EncoderParams::init(&cfg, &mut rng).unwrap();
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false);
        let mut x = tape.constant(rand_tensor(&mut rng, &[23, 20]));
        for (i, spec) in cfg.layers.iter().enumerate() {
            x = tdnn_layer(&mut tape, x, &spec.offsets, &w.tdnn[i]).unwrap();
        }
        assert_eq!(tape.value(x).cols(), 20 - 14);
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        cfg.layers[0].offsets = vec![0, -1];
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.se_ratio = Some(5);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mixup_feature_endpoints() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0]]).unwrap();
        let (x, y) = mixup_features(&a, 0, &b, 1, 1.0).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
        assert_eq!((y.first, y.weight), (0, 1.0));
        let (x, y) = mixup_features(&a, 0, &b, 1, 0.0).unwrap();
        assert_eq!(x.data(), &[5.0, 6.0]);
        assert_eq!(1.0 - y.weight, 1.0);
        let (x, _) = mixup_features(&a, 0, &b, 1, 0.5).unwrap();
        assert_eq!(x.data(), &[3.0, 4.0]);
        assert!(mixup_features(&a, 0, &b, 1, 1.5).is_err());
    }
}
