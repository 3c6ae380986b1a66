//! Dataset ingestion and synthesis: JSONL manifests with raw little-endian
//! f32 feature files, padded batch construction with validity masks, word
//! masking for the reconstruction task, and a concept-based synthetic
//! generator that makes grounding learnable at desk scale.

use crate::span::{seconds_to_frame_span, FrameIndexSpan, SpanError, TemporalSpan};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {source}")]
    ManifestParse { line: usize, source: serde_json::Error },
    #[error("record {id}: feature file {path} holds {actual} floats, expected {expected}")]
    ShapeMismatch { id: String, path: PathBuf, expected: usize, actual: usize },
    #[error("record {id}: non-finite value in features at index {index}")]
    NonFinite { id: String, index: usize },
    #[error("record {id}: {source}")]
    BadSpan { id: String, source: SpanError },
    #[error("record {id}: {msg}")]
    BadRecord { id: String, msg: String },
    #[error("generator config: {0}")]
    BadGeneratorConfig(String),
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestQuery {
    pub qid: String,
    pub tokens: Vec<usize>,
    pub token_strings: Vec<String>,
    pub feature_file: String,
    #[serde(rename = "L_w")]
    pub l_w: usize,
    #[serde(rename = "D_q")]
    pub d_q: usize,
    /// One or more [start_s, end_s] ground-truth spans.
    pub spans: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub video_id: String,
    pub duration_s: f64,
    pub feature_file: String,
    #[serde(rename = "L_v")]
    pub l_v: usize,
    #[serde(rename = "D_v")]
    pub d_v: usize,
    pub queries: Vec<ManifestQuery>,
}

// ---------------------------------------------------------------------------
// Loaded records
// ---------------------------------------------------------------------------

/// Frame-level features of one video.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub id: String,
    /// L_v x D_v raw features.
    pub frames: Tensor,
    pub duration: f64,
}

/// One sentence of a video: token ids, word features, and ground truth.
#[derive(Debug, Clone)]
pub struct QueryRecord {
    pub qid: String,
    pub tokens: Vec<usize>,
    pub token_strings: Vec<String>,
    /// L_w x D_q raw word features.
    pub words: Tensor,
    /// Ground-truth moments in seconds; at least one.
    pub gt_spans: Vec<TemporalSpan>,
}

/// One trainable unit: a video, its full sentence set, and the index of the
/// sentence currently being grounded.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video: std::sync::Arc<VideoFeatures>,
    pub queries: std::sync::Arc<Vec<QueryRecord>>,
    /// Index of the current query within `queries`.
    pub current: usize,
    /// Frame-index form of the current query's first ground-truth span.
    pub gt_frame_span: FrameIndexSpan,
}

impl Sample {
    pub fn current_query(&self) -> &QueryRecord {
        &self.queries[self.current]
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }
}

/// Dataset held in memory, grouped per video so every sentence of a video is
/// available to the segment-sentence branch.
#[derive(Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub warnings: Vec<String>,
    pub d_v: usize,
    pub d_q: usize,
    /// FNV fingerprint over the manifest and every feature file.
    pub fingerprint: u64,
}

// ---------------------------------------------------------------------------
// Feature file IO: raw little-endian f32, row-major
// ---------------------------------------------------------------------------

pub fn write_f32_features(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let mut w = BufWriter::new(file);
    for &v in t.data() {
        w.write_all(&(v as f32).to_le_bytes())
            .map_err(|source| DataError::Io { path: path.into(), source })?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.into(), source })?;
    Ok(())
}

pub fn read_f32_features(path: &Path, rows: usize, cols: usize, id: &str) -> Result<Tensor, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io { path: path.into(), source })?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|source| DataError::Io { path: path.into(), source })?;
    let expected = rows * cols;
    if bytes.len() != expected * 4 {
        return Err(DataError::ShapeMismatch {
            id: id.to_string(),
            path: path.into(),
            expected,
            actual: bytes.len() / 4,
        });
    }
    let mut data = Vec::with_capacity(expected);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(DataError::NonFinite { id: id.to_string(), index });
    }
    Ok(Tensor::from_vec(rows, cols, data))
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Read a JSONL manifest and its feature files into Samples, one per
/// (video, query) pair, grouped per video. Validation failures name the
/// offending record; a ground-truth end past the video duration is clamped
/// with a recorded warning.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(manifest_path)
        .map_err(|source| DataError::Io { path: manifest_path.into(), source })?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    let mut d_v = 0;
    let mut d_q = 0;
    let mut hash = Fingerprint::new();

    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: manifest_path.into(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        hash.update(line.as_bytes());
        let video: ManifestVideo = serde_json::from_str(&line)
            .map_err(|source| DataError::ManifestParse { line: lineno + 1, source })?;
        if video.l_v == 0 {
            return Err(DataError::BadRecord { id: video.video_id.clone(), msg: "L_v must be at least 1".into() });
        }
        if video.duration_s <= 0.0 {
            return Err(DataError::BadRecord {
                id: video.video_id.clone(),
                msg: format!("non-positive duration {}", video.duration_s),
            });
        }
        let frames_path = base.join(&video.feature_file);
        let frames = read_f32_features(&frames_path, video.l_v, video.d_v, &video.video_id)?;
        hash.update_file(&frames_path)?;
        d_v = check_dim(d_v, video.d_v, &video.video_id, "D_v")?;

        let mut queries = Vec::with_capacity(video.queries.len());
        for q in &video.queries {
            if q.tokens.len() != q.l_w {
                return Err(DataError::BadRecord {
                    id: q.qid.clone(),
                    msg: format!("{} tokens but L_w = {}", q.tokens.len(), q.l_w),
                });
            }
            let words_path = base.join(&q.feature_file);
            let words = read_f32_features(&words_path, q.l_w, q.d_q, &q.qid)?;
            hash.update_file(&words_path)?;
            d_q = check_dim(d_q, q.d_q, &q.qid, "D_q")?;
            if q.spans.is_empty() {
                return Err(DataError::BadRecord { id: q.qid.clone(), msg: "no ground-truth span".into() });
            }
            let mut gt_spans = Vec::with_capacity(q.spans.len());
            for &[start, end] in &q.spans {
                let mut end = end;
                if end > video.duration_s {
                    warnings.push(format!(
                        "query {}: ground-truth end {end} exceeds duration {}; clamped",
                        q.qid, video.duration_s
                    ));
                    end = video.duration_s;
                }
                let span = TemporalSpan::seconds(start, end)
                    .map_err(|source| DataError::BadSpan { id: q.qid.clone(), source })?;
                gt_spans.push(span);
            }
            queries.push(QueryRecord {
                qid: q.qid.clone(),
                tokens: q.tokens.clone(),
                token_strings: q.token_strings.clone(),
                words,
                gt_spans,
            });
        }

        let video_rec = std::sync::Arc::new(VideoFeatures {
            id: video.video_id.clone(),
            frames,
            duration: video.duration_s,
        });
        let queries = std::sync::Arc::new(queries);
        for current in 0..queries.len() {
            let gt = queries[current].gt_spans[0];
            let gt_frame_span = seconds_to_frame_span(&gt, video_rec.duration, video.l_v)
                .map_err(|source| DataError::BadSpan { id: queries[current].qid.clone(), source })?;
            samples.push(Sample {
                video: video_rec.clone(),
                queries: queries.clone(),
                current,
                gt_frame_span,
            });
        }
    }

    Ok(Dataset { samples, warnings, d_v, d_q, fingerprint: hash.finish() })
}

fn check_dim(seen: usize, new: usize, id: &str, what: &str) -> Result<usize, DataError> {
    if seen == 0 || seen == new {
        Ok(new)
    } else {
        Err(DataError::BadRecord { id: id.to_string(), msg: format!("{what} = {new} differs from {seen}") })
    }
}

struct Fingerprint(u64);

impl Fingerprint {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    fn update_file(&mut self, path: &Path) -> Result<(), DataError> {
        let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.into(), source })?;
        self.update(&bytes);
        Ok(())
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Word masking
// ---------------------------------------------------------------------------

/// Positions chosen for the word-reconstruction task. The replacement by the
/// learnable mask embedding happens inside the model so gradients reach it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
}

/// Choose `ceil(L_w * ratio)` positions uniformly without replacement,
/// reproducibly from the seed.
pub fn mask_words(l_w: usize, ratio: f64, seed: u64) -> MaskPlan {
    assert!(l_w >= 1, "cannot mask an empty sentence");
    let count = ((l_w as f64) * ratio).ceil() as usize;
    let count = count.clamp(1, l_w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..l_w).collect();
    positions.shuffle(&mut rng);
    positions.truncate(count);
    positions.sort_unstable();
    MaskPlan { positions }
}

// ---------------------------------------------------------------------------
// Batch
// ---------------------------------------------------------------------------

/// One padded batch element: everything the model needs for a single
/// (video, current query) pair, plus the context sentences.
#[derive(Debug, Clone)]
pub struct BatchElement {
    pub video_id: String,
    pub qid: String,
    pub duration: f64,
    /// L_v^max x D_v, padded rows zeroed at construction but re-flagged by
    /// `frame_mask`; the model must never read invalid rows.
    pub frames: Tensor,
    pub frame_mask: Vec<bool>,
    /// Current query words, L_w^max x D_q.
    pub words: Tensor,
    pub word_mask: Vec<bool>,
    /// Token ids of the current query, one per valid word.
    pub token_ids: Vec<usize>,
    /// All K sentences of the video (including the current one), each
    /// L_w^max x D_q with its own word mask.
    pub sentences: Vec<Tensor>,
    pub sentence_word_masks: Vec<Vec<bool>>,
    /// Validity per padded sentence slot.
    pub sentence_mask: Vec<bool>,
    /// Index of the current sentence within `sentences`.
    pub current_sentence: usize,
    /// Ground truth in seconds.
    pub gt_spans: Vec<TemporalSpan>,
    /// Frame-index form of the primary ground-truth span.
    pub gt_frame_span: FrameIndexSpan,
    /// Word positions masked for reconstruction.
    pub mlm_positions: Vec<usize>,
}

/// A padded batch with exact validity masks. Every padded position is
/// flagged invalid; attention and pooling never read it.
#[derive(Debug, Clone)]
pub struct Batch {
    pub elements: Vec<BatchElement>,
    pub max_frames: usize,
    pub max_words: usize,
    pub max_sentences: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

fn pad_rows(src: &Tensor, rows: usize) -> (Tensor, Vec<bool>) {
    let mut out = Tensor::zeros(rows, src.cols());
    let mut mask = vec![false; rows];
    for r in 0..src.rows() {
        out.row_mut(r).copy_from_slice(src.row(r));
        mask[r] = true;
    }
    (out, mask)
}

/// Pad samples to per-batch maxima with deterministic masks and draw the
/// reconstruction mask positions from `mask_seed`.
pub fn make_batch(samples: &[Sample], mask_ratio: f64, mask_seed: u64) -> Batch {
    assert!(!samples.is_empty(), "make_batch requires at least one sample");
    let max_frames = samples.iter().map(|s| s.video.frames.rows()).max().unwrap();
    let max_words = samples
        .iter()
        .flat_map(|s| s.queries.iter().map(|q| q.words.rows()))
        .max()
        .unwrap();
    let max_sentences = samples.iter().map(|s| s.queries.len()).max().unwrap();

    let mut elements = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let (frames, frame_mask) = pad_rows(&sample.video.frames, max_frames);
        let query = sample.current_query();
        let (words, word_mask) = pad_rows(&query.words, max_words);
        let mut sentences = Vec::with_capacity(max_sentences);
        let mut sentence_word_masks = Vec::with_capacity(max_sentences);
        let mut sentence_mask = vec![false; max_sentences];
        for (k, q) in sample.queries.iter().enumerate() {
            let (padded, mask) = pad_rows(&q.words, max_words);
            sentences.push(padded);
            sentence_word_masks.push(mask);
            sentence_mask[k] = true;
        }
        while sentences.len() < max_sentences {
            sentences.push(Tensor::zeros(max_words, query.words.cols()));
            sentence_word_masks.push(vec![false; max_words]);
        }
        let plan = mask_words(query.words.rows(), mask_ratio, mask_seed.wrapping_add(i as u64));
        elements.push(BatchElement {
            video_id: sample.video.id.clone(),
            qid: query.qid.clone(),
            duration: sample.video.duration,
            frames,
            frame_mask,
            words,
            word_mask,
            token_ids: query.tokens.clone(),
            sentences,
            sentence_word_masks,
            sentence_mask,
            current_sentence: sample.current,
            gt_spans: query.gt_spans.clone(),
            gt_frame_span: sample.gt_frame_span,
            mlm_positions: plan.positions,
        });
    }
    Batch { elements, max_frames, max_words, max_sentences }
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

/// Configuration of the concept-based synthetic dataset. Each video is a
/// sequence of segments; each segment carries a set of concepts; frame
/// features are the sum of the segment's concept vectors plus noise; each
/// query names a subset of its segment's concepts (some withheld, so the
/// complement branch has real work to do) and is grounded at the segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub segments_per_video: usize,
    pub frames_per_segment: usize,
    /// Global concept vocabulary size C.
    pub num_concepts: usize,
    pub concepts_per_segment: usize,
    /// Sentences per video (K); query i grounds segment i mod segments.
    pub queries_per_video: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Fraction of a segment's concepts withheld from its query's tokens.
    pub withheld_fraction: f64,
    pub seconds_per_frame: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 10,
            segments_per_video: 3,
            frames_per_segment: 8,
            num_concepts: 50,
            concepts_per_segment: 3,
            queries_per_video: 3,
            feature_dim: 64,
            noise_sigma: 0.1,
            withheld_fraction: 0.25,
            seconds_per_frame: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.concepts_per_segment > self.num_concepts {
            return Err(DataError::BadGeneratorConfig(format!(
                "concepts_per_segment {} exceeds vocabulary {}",
                self.concepts_per_segment, self.num_concepts
            )));
        }
        for (name, v) in [
            ("num_videos", self.num_videos),
            ("segments_per_video", self.segments_per_video),
            ("frames_per_segment", self.frames_per_segment),
            ("num_concepts", self.num_concepts),
            ("concepts_per_segment", self.concepts_per_segment),
            ("queries_per_video", self.queries_per_video),
            ("feature_dim", self.feature_dim),
        ] {
            if v == 0 {
                return Err(DataError::BadGeneratorConfig(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.withheld_fraction) {
            return Err(DataError::BadGeneratorConfig(format!(
                "withheld_fraction {} outside [0, 1]",
                self.withheld_fraction
            )));
        }
        if self.noise_sigma < 0.0 || self.seconds_per_frame <= 0.0 {
            return Err(DataError::BadGeneratorConfig("noise_sigma >= 0 and seconds_per_frame > 0 required".into()));
        }
        Ok(())
    }
}

/// Generate a dataset on disk: `manifest.jsonl`, `vocab.txt`, and a
/// `features/` directory. Deterministic per seed, byte for byte.
pub fn synth_generate(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<PathBuf, DataError> {
    config.validate()?;
    let features_dir = out_dir.join("features");
    std::fs::create_dir_all(&features_dir)
        .map_err(|source| DataError::Io { path: features_dir.clone(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Fixed random unit concept vectors, shared by frames and words so the
    // two modalities are geometrically alignable.
    let d = config.feature_dim;
    let concepts: Vec<Vec<f64>> = (0..config.num_concepts)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| gaussian(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();

    let vocab_path = out_dir.join("vocab.txt");
    {
        let file = std::fs::File::create(&vocab_path)
            .map_err(|source| DataError::Io { path: vocab_path.clone(), source })?;
        let mut w = BufWriter::new(file);
        for i in 0..config.num_concepts {
            writeln!(w, "concept_{i:04}").map_err(|source| DataError::Io { path: vocab_path.clone(), source })?;
        }
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let manifest_file = std::fs::File::create(&manifest_path)
        .map_err(|source| DataError::Io { path: manifest_path.clone(), source })?;
    let mut manifest = BufWriter::new(manifest_file);

    let frames_per_video = config.segments_per_video * config.frames_per_segment;
    let duration = frames_per_video as f64 * config.seconds_per_frame;

    for vi in 0..config.num_videos {
        let video_id = format!("v{vi:04}");
        // Segment boundaries: equal lengths in frames.
        let mut segment_concepts: Vec<Vec<usize>> = Vec::new();
        for _ in 0..config.segments_per_video {
            let mut ids: Vec<usize> = (0..config.num_concepts).collect();
            ids.shuffle(&mut rng);
            ids.truncate(config.concepts_per_segment);
            ids.sort_unstable();
            segment_concepts.push(ids);
        }

        let mut frames = Tensor::zeros(frames_per_video, d);
        for (si, ids) in segment_concepts.iter().enumerate() {
            for f in 0..config.frames_per_segment {
                let row = frames.row_mut(si * config.frames_per_segment + f);
                for &cid in ids {
                    for (r, &c) in row.iter_mut().zip(&concepts[cid]) {
                        *r += c;
                    }
                }
                for r in row.iter_mut() {
                    *r += config.noise_sigma * gaussian(&mut rng);
                }
            }
        }
        let frame_file = format!("features/{video_id}_frames.f32");
        write_f32_features(&out_dir.join(&frame_file), &frames)?;

        let mut queries = Vec::new();
        for qi in 0..config.queries_per_video {
            let qid = format!("{video_id}_q{qi:02}");
            let segment = qi % config.segments_per_video;
            let ids = &segment_concepts[segment];
            // Withhold a fraction of the segment's concepts, always keeping
            // at least one token.
            let mut kept: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|_| rng.gen::<f64>() >= config.withheld_fraction)
                .collect();
            if kept.is_empty() {
                kept.push(ids[rng.gen_range(0..ids.len())]);
            }
            let mut words = Tensor::zeros(kept.len(), d);
            for (w, &cid) in kept.iter().enumerate() {
                let row = words.row_mut(w);
                for (r, &c) in row.iter_mut().zip(&concepts[cid]) {
                    *r = c + config.noise_sigma * gaussian(&mut rng);
                }
            }
            let word_file = format!("features/{qid}_words.f32");
            write_f32_features(&out_dir.join(&word_file), &words)?;
            let start = (segment * config.frames_per_segment) as f64 * config.seconds_per_frame;
            let end = ((segment + 1) * config.frames_per_segment) as f64 * config.seconds_per_frame;
            queries.push(ManifestQuery {
                qid,
                token_strings: kept.iter().map(|&c| format!("concept_{c:04}")).collect(),
                tokens: kept,
                feature_file: word_file,
                l_w: words.rows(),
                d_q: d,
                spans: vec![[start, end]],
            });
        }

        let video = ManifestVideo {
            video_id,
            duration_s: duration,
            feature_file: frame_file,
            l_v: frames_per_video,
            d_v: d,
            queries,
        };
        let line = serde_json::to_string(&video).expect("manifest record serializes");
        writeln!(manifest, "{line}").map_err(|source| DataError::Io { path: manifest_path.clone(), source })?;
    }
    manifest
        .flush()
        .map_err(|source| DataError::Io { path: manifest_path.clone(), source })?;
    Ok(manifest_path)
}

/// Box-Muller standard normal.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
