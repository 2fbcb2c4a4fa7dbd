//! Binary and text file formats: embeddings (EMB1), features (FEA1),
//! model containers (ENKT), trial lists, score files and DET CSV.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::backend::{EmbeddingRecord, ScoredTrial, TrialPair};
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
pub const FEA_MAGIC: &[u8; 4] = b"FEA1";
pub const MODEL_MAGIC: &[u8; 4] = b"ENKT";
/// Metadata tensor holding the config hash as two u32 halves.
pub const HASH_TENSOR: &str = "meta.config_hash";

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "{} truncated at offset {}: need {n} more bytes, {} left",
                self.what,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length"))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.array::<4>()?;
        if &got != want {
            return Err(Error::Format(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid UTF-8 string at offset {at}", self.what)))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes at offset {}",
                self.what,
                self.buf.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::Format(format!("id of {} bytes exceeds u16", s.len())))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_embeddings(records: &[EmbeddingRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.vector.numel());
    let mut out = Vec::with_capacity(12 + records.len() * (24 + 4 * dim));
    out.extend_from_slice(EMB_MAGIC);
    put_u32(&mut out, records.len(), "record count")?;
    put_u32(&mut out, dim, "dimension")?;
    for r in records {
        if r.vector.numel() != dim {
            return Err(Error::dim(
                "embedding file",
                format!("{} has dim {}, file dim {dim}", r.utterance_id, r.vector.numel()),
            ));
        }
        put_string(&mut out, &r.speaker_id)?;
        put_string(&mut out, &r.utterance_id)?;
        for &v in r.vector.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes an EMB1 file; `expected_dim` is checked against the header
/// whenever the file holds records.
pub fn decode_embeddings(bytes: &[u8], expected_dim: Option<usize>) -> Result<Vec<EmbeddingRecord>> {
    let mut r = Reader::new(bytes, "embedding file");
    r.magic(EMB_MAGIC)?;
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if let Some(want) = expected_dim {
        if count > 0 && dim != want {
            return Err(Error::Format(format!("embedding file has dim {dim}, config expects {want}")));
        }
    }
    let mut out = Vec::with_capacity(count.min(bytes.len() / 8));
    for _ in 0..count {
        let speaker_id = r.string()?;
        let utterance_id = r.string()?;
        let data = (0..dim).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord {
            speaker_id,
            utterance_id,
            vector: Tensor::vector(data),
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    write_file(path, encode_embeddings(records)?)
}

pub fn read_embeddings(path: &Path, expected_dim: Option<usize>) -> Result<Vec<EmbeddingRecord>> {
    decode_embeddings(&read_file(path)?, expected_dim)
}

/// FEA1: magic, u32 count, u32 channels; per record speaker id, utterance
/// id, u32 label, u32 frames, then `channels × frames` f32 row-major.
pub fn encode_features(corpus: &[FeatureSequence]) -> Result<Vec<u8>> {
    let c = corpus.first().map_or(0, FeatureSequence::channels);
    let mut out = Vec::new();
    out.extend_from_slice(FEA_MAGIC);
    put_u32(&mut out, corpus.len(), "record count")?;
    put_u32(&mut out, c, "channels")?;
    for x in corpus {
        if x.channels() != c {
            return Err(Error::dim(
                "feature file",
                format!("{} has {} channels, file has {c}", x.utterance_id, x.channels()),
            ));
        }
        put_string(&mut out, &x.speaker_id)?;
        put_string(&mut out, &x.utterance_id)?;
        put_u32(&mut out, x.label, "label")?;
        put_u32(&mut out, x.num_frames(), "frame count")?;
        for &v in x.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], expected_channels: Option<usize>) -> Result<Vec<FeatureSequence>> {
    let mut r = Reader::new(bytes, "feature file");
    r.magic(FEA_MAGIC)?;
    let count = r.u32()? as usize;
    let c = r.u32()? as usize;
    if let Some(want) = expected_channels {
        if count > 0 && c != want {
            return Err(Error::Format(format!("feature file has {c} channels, config expects {want}")));
        }
    }
    let mut out = Vec::with_capacity(count.min(bytes.len() / 16));
    for _ in 0..count {
        let speaker_id = r.string()?;
        let utterance_id = r.string()?;
        let label = r.u32()? as usize;
        let t = r.u32()? as usize;
        let data = (0..c * t).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        out.push(FeatureSequence {
            speaker_id,
            utterance_id,
            label,
            frames: Tensor::new(vec![c, t], data)?,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_features(path: &Path, corpus: &[FeatureSequence]) -> Result<()> {
    write_file(path, encode_features(corpus)?)
}

pub fn read_features(path: &Path, expected_channels: Option<usize>) -> Result<Vec<FeatureSequence>> {
    decode_features(&read_file(path)?, expected_channels)
}

/// Stores the config hash as two u32 halves, each exact in f64.
pub fn hash_tensor(hash: u64) -> Tensor {
    Tensor::vector(vec![(hash >> 32) as f64, (hash & 0xffff_ffff) as f64])
}

pub fn hash_from_tensor(t: &Tensor) -> Result<u64> {
    let d = t.data();
    let half = |v: f64| {
        if v >= 0.0 && v <= u32::MAX as f64 && v.fract() == 0.0 {
            Ok(v as u64)
        } else {
            Err(Error::Format(format!("{HASH_TENSOR} holds {v}, not a u32")))
        }
    };
    if t.shape() != [2] {
        return Err(Error::Format(format!("{HASH_TENSOR} has shape {:?}, expected [2]", t.shape())));
    }
    Ok((half(d[0])? << 32) | half(d[1])?)
}

pub fn encode_model(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    put_u32(&mut out, tensors.len(), "tensor count")?;
    let mut names = BTreeSet::new();
    for (name, t) in tensors {
        if !names.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        put_string(&mut out, name)?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("{name}: rank {} exceeds u8", t.rank())))?;
        out.push(rank);
        for &d in t.shape() {
            put_u32(&mut out, d, "dimension")?;
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader::new(bytes, "model file");
    r.magic(MODEL_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(bytes.len() / 8));
    let mut names = BTreeSet::new();
    for _ in 0..count {
        let name = r.string()?;
        if !names.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 8)
            .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} larger than the file")))?;
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)?));
    }
    r.finish()?;
    Ok(out)
}

fn check_id(id: &str, line: usize) -> Result<()> {
    if id.is_empty() || id.contains([',', '\t', '\n', '\r']) {
        return Err(Error::Parse {
            line,
            msg: format!("invalid id `{id}`"),
        });
    }
    Ok(())
}

/// `e1,e2,...<TAB>test<TAB>{0|1}` per line.
pub fn parse_trials(text: &str) -> Result<Vec<TrialPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let bad = |msg: String| Error::Parse { line: n, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        let [enroll, test, label] = fields[..] else {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let enroll: Vec<String> = enroll.split(',').map(str::to_string).collect();
        let mut seen = BTreeSet::new();
        for e in &enroll {
            check_id(e, n)?;
            if !seen.insert(e.as_str()) {
                return Err(bad(format!("duplicate enrollment id `{e}`")));
            }
        }
        check_id(test, n)?;
        let target = match label {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
        };
        out.push(TrialPair {
            enroll,
            test: test.to_string(),
            target,
        });
    }
    Ok(out)
}

pub fn format_trials(trials: &[TrialPair]) -> Result<String> {
    let mut s = String::new();
    for (i, t) in trials.iter().enumerate() {
        for id in t.enroll.iter().chain(std::iter::once(&t.test)) {
            check_id(id, i + 1)?;
        }
        let _ = writeln!(s, "{}\t{}\t{}", t.enroll.join(","), t.test, u8::from(t.target));
    }
    Ok(s)
}

/// One line of a score file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreLine {
    pub index: usize,
    pub score: f64,
    pub target: bool,
}

/// `lineIndex<TAB>score<TAB>label`, score at 9 significant digits.
pub fn format_scores(scored: &[ScoredTrial]) -> String {
    let mut s = String::new();
    for (i, t) in scored.iter().enumerate() {
        let _ = writeln!(s, "{i}\t{:.8e}\t{}", t.score(), u8::from(t.trial.target));
    }
    s
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoreLine>> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let bad = |msg: String| Error::Parse { line: n, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        let [idx, score, label] = fields[..] else {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        let index: usize = idx.parse().map_err(|_| bad(format!("bad index `{idx}`")))?;
        if !seen.insert(index) {
            return Err(bad(format!("duplicate index {index}")));
        }
        let score: f64 = score.parse().map_err(|_| bad(format!("bad score `{score}`")))?;
        if !score.is_finite() {
            return Err(bad(format!("non-finite score `{score}`")));
        }
        let target = match label {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
        };
        out.push(ScoreLine { index, score, target });
    }
    Ok(out)
}

/// `p_fa,p_miss` rows.
pub fn format_det(points: &[(f64, f64)]) -> String {
    let mut s = String::from("p_fa,p_miss\n");
    for (fa, miss) in points {
        let _ = writeln!(s, "{fa:.8e},{miss:.8e}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, u: &str, v: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            speaker_id: s.into(),
            utterance_id: u.into(),
            vector: Tensor::vector(v),
        }
    }

    #[test]
    fn embedding_round_trip() {
        let recs = vec![rec("a", "a-1", vec![0.5, -1.25, 3.0]), rec("bé", "bé-2", vec![1e-3, 2.0, -7.5])];
        let bytes = encode_embeddings(&recs).unwrap();
        let back = decode_embeddings(&bytes, Some(3)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!((&a.speaker_id, &a.utterance_id), (&b.speaker_id, &b.utterance_id));
            for (x, y) in a.vector.data().iter().zip(b.vector.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // already f32-exact values survive a second pass bitwise
        assert_eq!(encode_embeddings(&back).unwrap(), bytes);
    }

    #[test]
    fn empty_embedding_file_is_twelve_bytes() {
        let bytes = encode_embeddings(&[]).unwrap();
        assert_eq!(bytes, b"EMB1\0\0\0\0\0\0\0\0");
        assert!(decode_embeddings(&bytes, Some(32)).unwrap().is_empty());
    }

    #[test]
    fn embedding_errors() {
        let bytes = encode_embeddings(&[rec("a", "a-1", vec![1.0, 2.0])]).unwrap();
        assert!(matches!(decode_embeddings(&bytes, Some(3)), Err(Error::Format(_))));
        assert!(matches!(decode_embeddings(&bytes[..bytes.len() - 1], None), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_embeddings(&bad, None), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_embeddings(&long, None), Err(Error::Format(_))));
    }

    #[test]
    fn feature_round_trip() {
        let x = FeatureSequence {
            speaker_id: "s".into(),
            utterance_id: "s-g1-u000".into(),
            label: 4,
            frames: Tensor::new(vec![2, 3], vec![0.5, 1.0, -2.0, 0.25, 8.0, -0.125]).unwrap(),
        };
        let bytes = encode_features(std::slice::from_ref(&x)).unwrap();
        assert_eq!(decode_features(&bytes, Some(2)).unwrap(), vec![x]);
        assert!(decode_features(&bytes, Some(3)).is_err());
    }

    #[test]
    fn model_round_trip_is_bitwise() {
        let ts = vec![
            ("w".to_string(), Tensor::new(vec![2, 2], vec![0.1, -0.2, 1.0 / 3.0, f64::MIN_POSITIVE]).unwrap()),
            ("s".to_string(), Tensor::scalar(std::f64::consts::PI)),
            (HASH_TENSOR.to_string(), hash_tensor(0xdead_beef_0123_4567)),
        ];
        let back = decode_model(&encode_model(&ts).unwrap()).unwrap();
        assert_eq!(back, ts);
        assert_eq!(hash_from_tensor(&back[2].1).unwrap(), 0xdead_beef_0123_4567);
        assert_eq!(decode_model(&encode_model(&[]).unwrap()).unwrap(), vec![]);
        let dup = vec![ts[0].clone(), ts[0].clone()];
        assert!(encode_model(&dup).is_err());
    }

    #[test]
    fn trial_lines() {
        let t = parse_trials("a1\tb1\t0\na1,a2,a3\tb2\t1\n").unwrap();
        assert_eq!(t[0].enroll, vec!["a1"]);
        assert_eq!(t[1].enroll.len(), 3);
        assert!(t[1].target);
        assert_eq!(parse_trials(&format_trials(&t).unwrap()).unwrap(), t);
        match parse_trials("a\tb\t1\na,a\tb\t1\n") {
            Err(Error::Parse { line: 2, msg }) => assert!(msg.contains("duplicate")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_trials("a\tb\t2"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trials("a b 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_trials("a,\tb\t1"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn score_lines() {
        let mk = |raw, target| ScoredTrial {
            trial: TrialPair {
                enroll: vec!["e".into()],
                test: "t".into(),
                target,
            },
            raw,
            probability: None,
        };
        let text = format_scores(&[mk(0.123456789123, true), mk(-42.0, false)]);
        assert_eq!(text, "0\t1.23456789e-1\t1\n1\t-4.20000000e1\t0\n");
        let back = parse_scores(&text).unwrap();
        assert_eq!(back[0].score, 0.123456789);
        assert!(!back[1].target);
        assert!(matches!(parse_scores("0\t1\t1\n0\t2\t0\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_scores("0\tx\t1\n"), Err(Error::Parse { line: 1, .. })));
    }
}
