//! Synthetic stylized-trajectory corpus with planted sub-styles.
//!
//! Channels 0 and 1 carry a content program (line, arc or zigzag path).
//! The remaining "posture" channels carry the style transform: a per-style
//! Walsh sign pattern of offsets, plus a sub-style dependent offset shift and
//! sinusoidal modulation whose amplitude and frequency are drawn from disjoint
//! per-sub-style intervals.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::Config;
use crate::error::{Error, Result};

pub const TRAJECTORY_CHANNELS: usize = 2;
const STYLE_OFFSET: f64 = 0.8;
const SUBSTYLE_SHIFT: f64 = 0.35;
const AMP_BASE: f64 = 0.25;
const AMP_STEP: f64 = 0.5;
const AMP_WIDTH: f64 = 0.1;
const FREQ_BASE: f64 = 1.0;
const FREQ_STEP: f64 = 1.0;
const FREQ_WIDTH: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    /// L×D frames.
    pub frames: Tensor,
    pub content_id: usize,
    pub style_id: usize,
    /// Hidden label, used for evaluation only.
    pub substyle_id: usize,
    pub seed: u64,
}

impl MotionSequence {
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn unlabeled(frames: Tensor) -> Self {
        Self { frames, content_id: 0, style_id: 0, substyle_id: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_content: usize,
    pub n_style: usize,
    pub n_substyle: usize,
    pub n_per_cell: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub window: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_content: 3,
            n_style: 4,
            n_substyle: 3,
            n_per_cell: 10,
            seq_len: 64,
            channels: 8,
            window: 8,
            noise_level: 0.01,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let cfg = Self {
            n_content: c.get("n_content")?,
            n_style: c.get("n_style")?,
            n_substyle: c.get("n_substyle")?,
            n_per_cell: c.get("n_per_cell")?,
            seq_len: c.get("seq_len")?,
            channels: c.get("channels")?,
            window: c.get("window")?,
            noise_level: c.get("noise_level")?,
            seed: c.get("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_content", self.n_content),
            ("n_style", self.n_style),
            ("n_substyle", self.n_substyle),
            ("n_per_cell", self.n_per_cell),
            ("seq_len", self.seq_len),
            ("window", self.window),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.channels <= TRAJECTORY_CHANNELS {
            return Err(Error::config("channels", "need at least one posture channel (>= 3)"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::config("noise_level", "must be finite and >= 0"));
        }
        if self.seq_len % self.window != 0 {
            return Err(Error::config("seq_len", format!("must be a multiple of window {}", self.window)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_content * self.n_style * self.n_substyle * self.n_per_cell
    }
}

/// Parameter cell of one sub-style: disjoint amplitude and frequency intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstyleCell {
    pub amp: (f64, f64),
    pub freq: (f64, f64),
    pub shift: f64,
}

pub fn substyle_cell(substyle: usize, n_substyle: usize) -> SubstyleCell {
    let m = substyle as f64;
    let amp_lo = AMP_BASE + AMP_STEP * m;
    let freq_lo = FREQ_BASE + FREQ_STEP * m;
    SubstyleCell {
        amp: (amp_lo, amp_lo + AMP_WIDTH),
        freq: (freq_lo, freq_lo + FREQ_WIDTH),
        shift: SUBSTYLE_SHIFT * (m - (n_substyle as f64 - 1.0) / 2.0),
    }
}

/// Walsh sign pattern for the style offsets: (-1)^popcount((s+1) & (q+1)).
pub fn style_offset(style: usize, posture_channel: usize) -> f64 {
    let bits = ((style + 1) & (posture_channel + 1)).count_ones();
    if bits % 2 == 0 {
        STYLE_OFFSET
    } else {
        -STYLE_OFFSET
    }
}

/// Content program parameters; `None` picks the interval midpoints.
fn content_program(content: usize, len: usize, mut rng: Option<&mut ChaCha8Rng>) -> Tensor {
    let mut draw = |lo: f64, hi: f64| match rng.as_mut() {
        Some(r) => r.random_range(lo..hi),
        None => 0.5 * (lo + hi),
    };
    let rotation = (content / 3) as f64 * 0.7;
    let mut out = Tensor::zeros((len, TRAJECTORY_CHANNELS));
    let (a, b, c) = (draw(0.8, 1.2), draw(-0.25, 0.25), draw(0.8, 1.2));
    for i in 0..len {
        let t = i as f64 / len as f64;
        let (x, y) = match content % 3 {
            0 => (a * (t - 0.5) * b.cos(), a * (t - 0.5) * b.sin()),
            1 => {
                let r = 0.5 * a;
                let sweep = PI * c;
                (r * (sweep * t).sin() - 0.5 * r, r * (1.0 - (sweep * t).cos()) - 0.5 * r)
            }
            _ => {
                let phase = 4.0 * t;
                let tri = 2.0 * (phase - (phase + 0.5).floor()).abs();
                (a * (t - 0.5), 0.3 * c * (tri - 0.5) + b)
            }
        };
        out[[i, 0]] = x * rotation.cos() - y * rotation.sin();
        out[[i, 1]] = x * rotation.sin() + y * rotation.cos();
    }
    out
}

/// Canonical (mid-parameter) trajectory of a content class, L×2.
pub fn content_template(content: usize, len: usize) -> Tensor {
    content_program(content, len, None)
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

pub fn generate_sequence(
    cfg: &CorpusConfig,
    content: usize,
    style: usize,
    substyle: usize,
    idx: usize,
) -> MotionSequence {
    let seed = mix_seed(&[cfg.seed, style as u64, substyle as u64, content as u64, idx as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cfg.seq_len;
    let mut frames = Tensor::zeros((len, cfg.channels));
    let traj = content_program(content, len, Some(&mut rng));
    frames.slice_mut(ndarray::s![.., ..TRAJECTORY_CHANNELS]).assign(&traj);

    let cell = substyle_cell(substyle, cfg.n_substyle);
    let amp = rng.random_range(cell.amp.0..cell.amp.1);
    let freq = rng.random_range(cell.freq.0..cell.freq.1);
    for q in 0..cfg.channels - TRAJECTORY_CHANNELS {
        let offset = style_offset(style, q) + cell.shift * if q % 2 == 0 { 1.0 } else { -1.0 };
        let phase = q as f64 * PI / 3.0;
        for i in 0..len {
            let t = i as f64 / len as f64;
            frames[[i, TRAJECTORY_CHANNELS + q]] = offset + amp * (2.0 * PI * freq * t + phase).sin();
        }
    }
    if cfg.noise_level > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_level).expect("validated noise level");
        frames.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    MotionSequence { frames, content_id: content, style_id: style, substyle_id: substyle, seed }
}

/// Generates all C·S·M·n_per_cell sequences, ordered by (style, substyle, content, idx).
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<MotionSequence>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.total());
    for s in 0..cfg.n_style {
        for m in 0..cfg.n_substyle {
            for c in 0..cfg.n_content {
                for i in 0..cfg.n_per_cell {
                    out.push(generate_sequence(cfg, c, s, m, i));
                }
            }
        }
    }
    Ok(out)
}

/// Deterministic split, stratified per (style, substyle) cell.
pub fn split_corpus(
    corpus: &[MotionSequence],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<MotionSequence>, Vec<MotionSequence>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::config("split_ratio", format!("{ratio} is outside (0, 1)")));
    }
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> = Default::default();
    for (i, s) in corpus.iter().enumerate() {
        cells.entry((s.style_id, s.substyle_id)).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for ((style, sub), mut members) in cells {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5911, style as u64, sub as u64]));
        // Fisher-Yates
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        let n_train = (ratio * members.len() as f64).round() as usize;
        let (a, b) = members.split_at(n_train);
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        train.extend(a.into_iter().map(|i| corpus[i].clone()));
        eval.extend(b.into_iter().map(|i| corpus[i].clone()));
    }
    Ok((train, eval))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub style: usize,
    pub substyle: usize,
    pub content: usize,
    pub idx: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: CorpusConfig,
    pub count: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub content_programs: Vec<String>,
    pub style_offsets: Vec<Vec<f64>>,
    pub substyle_cells: Vec<SubstyleCell>,
    pub files: Vec<FileEntry>,
}

/// Corpus description written next to the `.f32` files.
pub const CORPUS_MANIFEST: &str = "corpus.json";

pub fn sequence_file_name(s: &MotionSequence, idx: usize) -> String {
    format!("{}_{}_{}_{}.f32", s.style_id, s.substyle_id, s.content_id, idx)
}

/// Row-major little-endian f32.
pub fn encode_frames(frames: &Tensor) -> Vec<u8> {
    frames.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

pub fn decode_frames(bytes: &[u8], seq_len: usize, channels: usize) -> Result<Tensor> {
    let expected = seq_len
        .checked_mul(channels)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("sequence", "shape overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            "sequence",
            format!("{} bytes, expected {expected} for {seq_len}x{channels}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("sequence", "non-finite frame value"));
    }
    Tensor::from_shape_vec((seq_len, channels), data).map_err(|e| Error::format("sequence", e.to_string()))
}

/// Infers the row count from the byte length for a known channel count.
pub fn decode_frames_any_len(bytes: &[u8], channels: usize) -> Result<Tensor> {
    if channels == 0 || bytes.len() % (4 * channels) != 0 || bytes.is_empty() {
        return Err(Error::format("sequence", format!("{} bytes is not a whole number of frames", bytes.len())));
    }
    decode_frames(bytes, bytes.len() / (4 * channels), channels)
}

pub fn write_corpus(dir: &Path, cfg: &CorpusConfig, corpus: &[MotionSequence]) -> Result<CorpusManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(corpus.len());
    for (n, s) in corpus.iter().enumerate() {
        let idx = n % cfg.n_per_cell;
        let file = sequence_file_name(s, idx);
        fs::write(dir.join(&file), encode_frames(&s.frames))?;
        files.push(FileEntry {
            file,
            style: s.style_id,
            substyle: s.substyle_id,
            content: s.content_id,
            idx,
            seed: s.seed,
        });
    }
    let manifest = CorpusManifest {
        config: *cfg,
        count: corpus.len(),
        seq_len: cfg.seq_len,
        channels: cfg.channels,
        content_programs: (0..cfg.n_content)
            .map(|c| format!("{}#{}", ["line", "arc", "zigzag"][c % 3], c / 3))
            .collect(),
        style_offsets: (0..cfg.n_style)
            .map(|s| (0..cfg.channels - TRAJECTORY_CHANNELS).map(|q| style_offset(s, q)).collect())
            .collect(),
        substyle_cells: (0..cfg.n_substyle).map(|m| substyle_cell(m, cfg.n_substyle)).collect(),
        files,
    };
    fs::write(dir.join(CORPUS_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn parse_manifest(text: &str) -> Result<CorpusManifest> {
    let m: CorpusManifest = serde_json::from_str(text)?;
    m.config.validate()?;
    if m.files.len() != m.count {
        return Err(Error::format("corpus manifest", format!("count {} but {} files", m.count, m.files.len())));
    }
    if m.seq_len != m.config.seq_len || m.channels != m.config.channels {
        return Err(Error::format("corpus manifest", "dimension fields disagree with config"));
    }
    for f in &m.files {
        if f.file.contains('/') || f.file.contains('\\') || f.file.contains("..") {
            return Err(Error::format("corpus manifest", format!("unsafe file name {}", f.file)));
        }
        if f.style >= m.config.n_style || f.substyle >= m.config.n_substyle || f.content >= m.config.n_content {
            return Err(Error::format("corpus manifest", format!("label out of range in {}", f.file)));
        }
    }
    Ok(m)
}

pub fn read_corpus(dir: &Path) -> Result<(CorpusConfig, Vec<MotionSequence>)> {
    let text = fs::read_to_string(dir.join(CORPUS_MANIFEST))
        .map_err(|e| Error::Missing(format!("{}/{CORPUS_MANIFEST}: {e}", dir.display())))?;
    let m = parse_manifest(&text)?;
    let mut out = Vec::with_capacity(m.count);
    for f in &m.files {
        let frames = decode_frames(&fs::read(dir.join(&f.file))?, m.seq_len, m.channels)?;
        out.push(MotionSequence {
            frames,
            content_id: f.content,
            style_id: f.style,
            substyle_id: f.substyle,
            seed: f.seed,
        });
    }
    Ok((m.config, out))
}

pub fn flatten(frames: &Tensor) -> Vec<f64> {
    frames.iter().copied().collect()
}

pub fn frame_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig { n_content: 2, n_style: 4, n_substyle: 3, n_per_cell: 5, ..Default::default() }
    }

    #[test]
    fn counts_and_labels() {
        let c = generate_corpus(&small()).unwrap();
        assert_eq!(c.len(), 120);
        for s in 0..4 {
            assert_eq!(c.iter().filter(|x| x.style_id == s).count(), 30);
        }
        assert!(c.iter().all(|x| x.frames.iter().all(|v| v.is_finite())));
        assert!(c.iter().all(|x| x.len() % 8 == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let bytes_a: Vec<u8> = a.iter().flat_map(|s| encode_frames(&s.frames)).collect();
        let bytes_b: Vec<u8> = b.iter().flat_map(|s| encode_frames(&s.frames)).collect();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases = [
            (CorpusConfig { n_style: 0, ..small() }, "n_style"),
            (CorpusConfig { noise_level: -1.0, ..small() }, "noise_level"),
            (CorpusConfig { seq_len: 60, ..small() }, "seq_len"),
            (CorpusConfig { channels: 2, ..small() }, "channels"),
        ];
        for (cfg, field) in cases {
            match generate_corpus(&cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn split_halves_every_cell() {
        let c = generate_corpus(&small()).unwrap();
        let (train, eval) = split_corpus(&c, 0.5, 7).unwrap();
        assert_eq!((train.len(), eval.len()), (60, 60));
        for s in 0..4 {
            for m in 0..3 {
                let n = |v: &[MotionSequence]| v.iter().filter(|x| x.style_id == s && x.substyle_id == m).count();
                assert_eq!(n(&train), 5);
                assert_eq!(n(&eval), 5);
            }
        }
        let (train2, eval2) = split_corpus(&c, 0.5, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
    }

    #[test]
    fn split_ratio_point_eight() {
        let c = generate_corpus(&small()).unwrap();
        let (train, eval) = split_corpus(&c, 0.8, 7).unwrap();
        for s in 0..4 {
            assert_eq!(train.iter().filter(|x| x.style_id == s).count(), 24);
            assert_eq!(eval.iter().filter(|x| x.style_id == s).count(), 6);
        }
        // disjoint
        for e in &eval {
            assert!(!train.contains(e));
        }
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let c = generate_corpus(&small()).unwrap();
        assert!(split_corpus(&c, 0.0, 1).is_err());
        assert!(split_corpus(&c, 1.0, 1).is_err());
    }

    #[test]
    fn substyle_cells_are_disjoint() {
        for m in 0..4 {
            let a = substyle_cell(m, 4);
            let b = substyle_cell(m + 1, 5);
            assert!(a.amp.1 < b.amp.0 && a.freq.1 < b.freq.0);
        }
    }

    #[test]
    fn sub_styles_are_planted_with_factor_two() {
        // brute force: within each style compare mean pairwise distance across
        // vs within sub-styles
        let cfg = CorpusConfig { noise_level: 0.01, ..Default::default() };
        let corpus = generate_corpus(&cfg).unwrap();
        for s in 0..cfg.n_style {
            let members: Vec<_> = corpus.iter().filter(|x| x.style_id == s).collect();
            let (mut within, mut nw, mut across, mut na) = (0.0, 0usize, 0.0, 0usize);
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    let d = frame_distance(&members[i].frames, &members[j].frames);
                    if members[i].substyle_id == members[j].substyle_id {
                        within += d;
                        nw += 1;
                    } else {
                        across += d;
                        na += 1;
                    }
                }
            }
            let ratio = (across / na as f64) / (within / nw as f64);
            assert!(ratio >= 2.0, "style {s}: across/within = {ratio:.3}");
        }
    }

    #[test]
    fn serialized_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let corpus = generate_corpus(&cfg).unwrap();
        write_corpus(dir.path(), &cfg, &corpus).unwrap();
        let (cfg2, back) = read_corpus(dir.path()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back.len(), corpus.len());
        for (a, b) in corpus.iter().zip(&back) {
            assert_eq!(encode_frames(&a.frames), encode_frames(&b.frames));
            assert_eq!((a.style_id, a.substyle_id, a.content_id), (b.style_id, b.substyle_id, b.content_id));
        }
        assert!(dir.path().join("2_1_0_3.f32").exists());
    }

    #[test]
    fn decode_rejects_wrong_size() {
        assert!(decode_frames(&[0u8; 12], 2, 2).is_err());
        assert!(decode_frames_any_len(&[0u8; 10], 2).is_err());
        assert_eq!(decode_frames_any_len(&[0u8; 16], 2).unwrap().dim(), (2, 2));
    }
}
