use super::plda::{quadratic_score, PldaModel};
use super::{l2_normalize, mean_vector};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};

/// Two affine layers in place of centering and LDA, then the quadratic pair score.
#[derive(Debug, Clone, PartialEq)]
pub struct NpldaWeights<T> {
    /// `[D × D']`
    pub w1: T,
    pub b1: T,
    /// `[D' × D']`
    pub w2: T,
    pub b2: T,
    pub p: T,
    pub q: T,
}

pub type NpldaParams = NpldaWeights<Tensor>;
pub type NpldaVars = NpldaWeights<Var>;

impl<T> NpldaWeights<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        vec![
            ("nplda.w1".into(), &self.w1),
            ("nplda.b1".into(), &self.b1),
            ("nplda.w2".into(), &self.w2),
            ("nplda.b2".into(), &self.b2),
            ("nplda.p".into(), &self.p),
            ("nplda.q".into(), &self.q),
        ]
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.p,
            &mut self.q,
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> NpldaWeights<U> {
        NpldaWeights {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
            p: f(&self.p),
            q: f(&self.q),
        }
    }
}

impl NpldaParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> NpldaVars {
        self.map(|t| tape.leaf(t.clone(), trainable))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpldaModel {
    pub params: NpldaParams,
    /// Length-normalize between the two affine layers.
    pub length_norm: bool,
}

pub fn nplda_init_from_plda(plda: &PldaModel) -> NpldaModel {
    let pre = &plda.preproc;
    let w1 = pre
        .lda
        .clone()
        .unwrap_or_else(|| Tensor::eye(pre.input_dim()));
    let b1 = Tensor::vector(w1.transpose().matvec(pre.mean.data()).iter().map(|v| -v).collect());
    let d = plda.dim();
    NpldaModel {
        params: NpldaParams {
            w1,
            b1,
            w2: Tensor::eye(d),
            b2: plda.mu.scale(-1.0),
            p: plda.p.clone(),
            q: plda.q.clone(),
        },
        length_norm: pre.length_norm,
    }
}

impl NpldaModel {
    pub fn input_dim(&self) -> usize {
        self.params.w1.rows()
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = &self.params;
        if x.len() != self.input_dim() {
            return Err(Error::dim(
                "nplda",
                format!("embedding dim {}, expected {}", x.len(), self.input_dim()),
            ));
        }
        let mut h: Vec<f64> = p
            .w1
            .transpose()
            .matvec(x)
            .iter()
            .zip(p.b1.data())
            .map(|(a, b)| a + b)
            .collect();
        if self.length_norm {
            let n = h.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                h.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(p.w2
            .transpose()
            .matvec(&h)
            .iter()
            .zip(p.b2.data())
            .map(|(a, b)| a + b)
            .collect())
    }

    /// Averages transformed enrollment embeddings, then scores against the test.
    pub fn score_multi(&self, enroll: &[&[f64]], test: &[f64]) -> Result<f64> {
        let t: Vec<Vec<f64>> = enroll.iter().map(|e| self.transform(e)).collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = t.iter().map(Vec::as_slice).collect();
        let e = mean_vector(&refs)?;
        Ok(quadratic_score(&self.params.p, &self.params.q, &e, &self.transform(test)?))
    }
}

/// Both affine layers on the tape.
pub fn nplda_transform(tape: &mut Tape, w: &NpldaVars, length_norm: bool, x: Var) -> Result<Var> {
    let d_in = tape.value(x).numel();
    let d1 = tape.value(w.w1).cols();
    let d2 = tape.value(w.w2).cols();
    let row = tape.reshape(x, &[1, d_in])?;
    let h = tape.matmul(row, w.w1)?;
    let h = tape.reshape(h, &[d1])?;
    let mut h = tape.add(h, w.b1)?;
    if length_norm {
        h = l2_normalize(tape, h)?;
    }
    let row = tape.reshape(h, &[1, d1])?;
    let y = tape.matmul(row, w.w2)?;
    let y = tape.reshape(y, &[d2])?;
    tape.add(y, w.b2)
}

fn bilinear(tape: &mut Tape, x: Var, m: Var, y: Var) -> Result<Var> {
    let d = tape.value(x).numel();
    let xr = tape.reshape(x, &[1, d])?;
    let yc = tape.reshape(y, &[d, 1])?;
    let xm = tape.matmul(xr, m)?;
    let s = tape.matmul(xm, yc)?;
    tape.reshape(s, &[])
}

/// `xᵀQx + yᵀQy + 2xᵀPy` on transformed vectors.
pub fn nplda_pair_score(tape: &mut Tape, w: &NpldaVars, x: Var, y: Var) -> Result<Var> {
    let qx = bilinear(tape, x, w.q, x)?;
    let qy = bilinear(tape, y, w.q, y)?;
    let pxy = bilinear(tape, x, w.p, y)?;
    let pxy = tape.scale(pxy, 2.0)?;
    let s = tape.add(qx, qy)?;
    tape.add(s, pxy)
}

/// Multi-enrollment score on the tape: transformed enrollments are averaged,
/// as in [`NpldaModel::score_multi`].
pub fn nplda_score_set(tape: &mut Tape, w: &NpldaVars, length_norm: bool, enroll: &[Var], test: Var) -> Result<Var> {
    if enroll.is_empty() {
        return Err(Error::contract("empty enrollment set"));
    }
    let t = enroll
        .iter()
        .map(|&e| nplda_transform(tape, w, length_norm, e))
        .collect::<Result<Vec<_>>>()?;
    let stacked = tape.stack_rows(&t)?;
    let cols = tape.transpose(stacked)?;
    let sums = tape.row_sums(cols)?;
    let x = tape.scale(sums, 1.0 / enroll.len() as f64)?;
    let y = nplda_transform(tape, w, length_norm, test)?;
    nplda_pair_score(tape, w, x, y)
}

/// Score of an enrollment-mean embedding against a test embedding on the tape.
pub fn nplda_score(tape: &mut Tape, w: &NpldaVars, length_norm: bool, enroll_mean: Var, test: Var) -> Result<Var> {
    let x = nplda_transform(tape, w, length_norm, enroll_mean)?;
    let y = nplda_transform(tape, w, length_norm, test)?;
    nplda_pair_score(tape, w, x, y)
}
