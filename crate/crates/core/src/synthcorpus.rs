//! Synthetic parallel corpus with planted subject and content factors.
//!
//! Every stimulus owns a set of smoothed-noise source signals. Each subject
//! observes those sources through its own fixed linear mixing plus a constant
//! per-channel offset, and independent sensor noise is added on top. Every
//! subject hears every stimulus, so recordings of one stimulus are parallel:
//! windows at the same offset share a content label.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::rng;

/// Frames per segment used throughout (500 ms at 64 Hz).
pub const SEGMENT_FRAMES: usize = 32;

/// Floor applied to per-channel standard deviations.
pub const NORM_STD_FLOOR: f64 = 1e-8;

/// Relative size of the per-subject mixing perturbation with respect to the
/// shared mixing matrix, per unit of `subject_mix_strength`.
const MIXING_PERTURBATION: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_subjects: usize,
    pub n_stimuli: usize,
    pub stimulus_duration_s: f64,
    pub sample_rate_hz: usize,
    pub n_channels: usize,
    /// Scale of the subject-specific offset and mixing perturbation.
    pub subject_mix_strength: f64,
    pub content_source_count: usize,
    pub noise_std: f64,
    /// Moving-average length used to band-limit the content sources.
    pub smoothing_frames: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_stimuli: 2,
            stimulus_duration_s: 64.0,
            sample_rate_hz: 64,
            n_channels: 8,
            subject_mix_strength: 1.0,
            content_source_count: 4,
            noise_std: 0.3,
            smoothing_frames: 6,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn frames_per_recording(&self) -> usize {
        (self.stimulus_duration_s * self.sample_rate_hz as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("n_stimuli", self.n_stimuli),
            ("sample_rate_hz", self.sample_rate_hz),
            ("n_channels", self.n_channels),
            ("content_source_count", self.content_source_count),
            ("smoothing_frames", self.smoothing_frames),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.stimulus_duration_s.is_finite() && self.stimulus_duration_s > 0.0) {
            return Err(Error::Config("stimulus_duration_s must be positive".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(self.subject_mix_strength.is_finite() && self.subject_mix_strength >= 0.0) {
            return Err(Error::Config("subject_mix_strength must be non-negative".into()));
        }
        if self.frames_per_recording() < SEGMENT_FRAMES {
            return Err(Error::Config(format!(
                "recordings of {} frames are shorter than one {SEGMENT_FRAMES}-frame segment",
                self.frames_per_recording()
            )));
        }
        Ok(())
    }
}

/// One uninterrupted recording of one subject hearing one stimulus.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub sequence_id: usize,
    pub subject_id: usize,
    pub stimulus_id: usize,
    /// `T x C` frames.
    pub frames: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub sequence_id: usize,
    pub subject_id: usize,
    pub stimulus_id: usize,
    /// Position of the window within its recording.
    pub index: usize,
    pub content_label: usize,
    /// `seg_len x C` frames.
    pub data: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub stimulus_id: usize,
    /// Window offset within the stimulus, in segments.
    pub offset: usize,
    /// Number of segments carrying this label.
    pub count: usize,
}

/// Dense content-label table; label `l` is `labels[l]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelIndex {
    pub labels: Vec<LabelInfo>,
}

impl LabelIndex {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Occurrence count S(l).
    pub fn count(&self, label: usize) -> usize {
        self.labels[label].count
    }

    /// Label pairs `(l_k, l_{k+1})` adjacent in time within one stimulus.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let lookup: BTreeMap<(usize, usize), usize> = self
            .labels
            .iter()
            .enumerate()
            .map(|(l, info)| ((info.stimulus_id, info.offset), l))
            .collect();
        lookup
            .iter()
            .filter_map(|(&(stim, off), &l)| lookup.get(&(stim, off + 1)).map(|&next| (l, next)))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn normal_matrix(rng: &mut rng::StreamRng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

/// Smoothed white noise with unit marginal variance, `frames x sources`.
fn content_sources(cfg: &CorpusConfig, stimulus: usize) -> Array2<f64> {
    let t = cfg.frames_per_recording();
    let w = cfg.smoothing_frames;
    let p = cfg.content_source_count;
    let mut rng = rng::stream(cfg.seed, "corpus/source", &[stimulus as u64]);
    let white = normal_matrix(&mut rng, t + w - 1, p, 1.0);
    let gain = 1.0 / (w as f64).sqrt();
    let mut out = Array2::zeros((t, p));
    for j in 0..p {
        let col = white.column(j);
        let mut acc: f64 = col.slice(s![..w]).sum();
        out[[0, j]] = acc * gain;
        for i in 1..t {
            acc += col[i + w - 1] - col[i - 1];
            out[[i, j]] = acc * gain;
        }
    }
    out
}

struct SubjectFactor {
    mixing: Array2<f64>,
    offset: Array1<f64>,
}

fn subject_factor(cfg: &CorpusConfig, shared: &Array2<f64>, subject: usize) -> SubjectFactor {
    let p = cfg.content_source_count;
    let c = cfg.n_channels;
    let mut rng = rng::stream(cfg.seed, "corpus/subject", &[subject as u64]);
    let scale = cfg.subject_mix_strength;
    let perturb = normal_matrix(&mut rng, p, c, MIXING_PERTURBATION * scale / (p as f64).sqrt());
    let offset = normal_matrix(&mut rng, 1, c, scale).row(0).to_owned();
    SubjectFactor {
        mixing: shared + &perturb,
        offset,
    }
}

/// Generates `n_subjects * n_stimuli` recordings; sequence ids are
/// `subject * n_stimuli + stimulus`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Recording>> {
    cfg.validate()?;
    let p = cfg.content_source_count;
    let c = cfg.n_channels;
    let t = cfg.frames_per_recording();
    let mut shared_rng = rng::stream(cfg.seed, "corpus/shared-mixing", &[]);
    let shared = normal_matrix(&mut shared_rng, p, c, 1.0 / (p as f64).sqrt());
    let sources: Vec<Array2<f64>> = (0..cfg.n_stimuli).map(|m| content_sources(cfg, m)).collect();
    let subjects: Vec<SubjectFactor> = (0..cfg.n_subjects)
        .map(|j| subject_factor(cfg, &shared, j))
        .collect();

    let mut recordings = Vec::with_capacity(cfg.n_subjects * cfg.n_stimuli);
    for (j, subject) in subjects.iter().enumerate() {
        for (m, src) in sources.iter().enumerate() {
            let mut noise_rng = rng::stream(cfg.seed, "corpus/noise", &[j as u64, m as u64]);
            let mut clean = src.dot(&subject.mixing);
            clean += &subject.offset;
            let frames = Array2::from_shape_fn((t, c), |(i, k)| {
                let eps: f64 = StandardNormal.sample(&mut noise_rng);
                (clean[[i, k]] + cfg.noise_std * eps) as f32
            });
            recordings.push(Recording {
                sequence_id: j * cfg.n_stimuli + m,
                subject_id: j,
                stimulus_id: m,
                frames,
            });
        }
    }
    Ok(recordings)
}

/// Cuts non-overlapping windows and assigns dense content labels keyed by
/// `(stimulus, window offset)`, ordered by that key.
pub fn segment_and_label(recordings: &[Recording], seg_len: usize) -> (Vec<Segment>, LabelIndex) {
    assert!(seg_len >= 1, "segment length must be positive");
    let mut keys: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for rec in recordings {
        for n in 0..rec.frames.nrows() / seg_len {
            *keys.entry((rec.stimulus_id, n)).or_insert(0) += 1;
        }
    }
    let mut dense = BTreeMap::new();
    let mut labels = Vec::with_capacity(keys.len());
    for (l, (&(stimulus_id, offset), &count)) in keys.iter().enumerate() {
        dense.insert((stimulus_id, offset), l);
        labels.push(LabelInfo {
            stimulus_id,
            offset,
            count,
        });
    }
    let mut segments = Vec::new();
    for rec in recordings {
        for n in 0..rec.frames.nrows() / seg_len {
            segments.push(Segment {
                sequence_id: rec.sequence_id,
                subject_id: rec.subject_id,
                stimulus_id: rec.stimulus_id,
                index: n,
                content_label: dense[&(rec.stimulus_id, n)],
                data: rec.frames.slice(s![n * seg_len..(n + 1) * seg_len, ..]).to_owned(),
            });
        }
    }
    (segments, LabelIndex { labels })
}

/// First and last 40% of a recording's segments train; the middle block is
/// halved into validation then test, with any rounding leftover going to test.
pub fn split_recording(n_segments: usize) -> Result<SplitAssignment> {
    if n_segments < 5 {
        return Err(Error::Split(n_segments));
    }
    let edge = 2 * n_segments / 5;
    let middle = n_segments - 2 * edge;
    let n_val = middle / 2;
    Ok(SplitAssignment {
        train: (0..edge).chain(n_segments - edge..n_segments).collect(),
        val: (edge..edge + n_val).collect(),
        test: (edge + n_val..n_segments - edge).collect(),
    })
}

impl SplitAssignment {
    pub fn split_of(&self, index: usize) -> Option<Split> {
        if self.train.binary_search(&index).is_ok() {
            Some(Split::Train)
        } else if self.val.binary_search(&index).is_ok() {
            Some(Split::Val)
        } else if self.test.binary_search(&index).is_ok() {
            Some(Split::Test)
        } else {
            None
        }
    }
}

impl NormStats {
    /// Per-channel mean and population standard deviation over all frames.
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a Segment>) -> Result<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut n = 0usize;
        for seg in segments {
            let data = seg.data.mapv(f64::from);
            let s1 = data.sum_axis(Axis(0));
            let s2 = data.mapv(|v| v * v).sum_axis(Axis(0));
            match (&mut sum, &mut sq) {
                (Some(a), Some(b)) => {
                    if a.len() != s1.len() {
                        return Err(Error::Dimension("segments differ in channel count".into()));
                    }
                    *a += &s1;
                    *b += &s2;
                }
                _ => {
                    sum = Some(s1);
                    sq = Some(s2);
                }
            }
            n += seg.data.nrows();
        }
        let (sum, sq) = match (sum, sq) {
            (Some(a), Some(b)) if n > 0 => (a, b),
            _ => return Err(Error::Data("no frames to compute normalization statistics".into())),
        };
        let n = n as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s2, m)| (s2 / n - m * m).max(0.0).sqrt())
            .collect();
        Ok(Self { mean, std })
    }
}

/// Applies `(x - mean) / max(std, floor)` per channel.
pub fn normalize(segments: &[Segment], stats: &NormStats) -> Vec<Segment> {
    segments
        .iter()
        .map(|seg| {
            let mut out = seg.clone();
            for mut row in out.data.rows_mut() {
                for (k, v) in row.iter_mut().enumerate() {
                    let denom = stats.std[k].max(NORM_STD_FLOOR);
                    *v = ((f64::from(*v) - stats.mean[k]) / denom) as f32;
                }
            }
            out
        })
        .collect()
}

/// Segmented, labelled, split and normalized corpus ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n_channels: usize,
    pub seg_len: usize,
    pub n_sequences: usize,
    pub n_subjects: usize,
    /// Normalized segments, grouped by recording in recording order.
    pub segments: Vec<Segment>,
    pub split_of: Vec<Split>,
    pub labels: LabelIndex,
    /// Split per sequence id.
    pub splits: Vec<SplitAssignment>,
    pub norm: NormStats,
    /// Training segments per sequence, N(i).
    pub train_counts: Vec<usize>,
}

impl Dataset {
    pub fn build(recordings: &[Recording], seg_len: usize) -> Result<Self> {
        if recordings.is_empty() {
            return Err(Error::Data("corpus contains no recordings".into()));
        }
        let n_channels = recordings[0].frames.ncols();
        if recordings.iter().any(|r| r.frames.ncols() != n_channels) {
            return Err(Error::Dimension("recordings differ in channel count".into()));
        }
        let n_sequences = recordings.iter().map(|r| r.sequence_id).max().unwrap_or(0) + 1;
        let mut seen = vec![false; n_sequences];
        for r in recordings {
            if std::mem::replace(&mut seen[r.sequence_id], true) {
                return Err(Error::Data(format!("duplicate sequence id {}", r.sequence_id)));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data("sequence ids must be dense".into()));
        }
        let n_subjects = recordings.iter().map(|r| r.subject_id).max().unwrap_or(0) + 1;

        let (raw, labels) = segment_and_label(recordings, seg_len);
        let mut splits = vec![SplitAssignment::default(); n_sequences];
        for r in recordings {
            splits[r.sequence_id] = split_recording(r.frames.nrows() / seg_len)?;
        }
        let split_of: Vec<Split> = raw
            .iter()
            .map(|seg| splits[seg.sequence_id].split_of(seg.index).expect("split covers every segment"))
            .collect();
        let norm = NormStats::from_segments(
            raw.iter().zip(&split_of).filter(|(_, s)| **s == Split::Train).map(|(seg, _)| seg),
        )?;
        let segments = normalize(&raw, &norm);
        let train_counts = splits.iter().map(|s| s.train.len()).collect();
        Ok(Self {
            n_channels,
            seg_len,
            n_sequences,
            n_subjects,
            segments,
            split_of,
            labels,
            splits,
            norm,
            train_counts,
        })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split_of
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select(&self, split: Split) -> Vec<&Segment> {
        self.indices(split).into_iter().map(|i| &self.segments[i]).collect()
    }
}

// ---------------------------------------------------------------------------
// Persistence

const RECORDING_MAGIC: &[u8; 4] = b"FHVC";
const RECORDING_VERSION: u32 = 1;
pub const CORPUS_MANIFEST: &str = "corpus.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RecordingEntry {
    sequence_id: usize,
    subject_id: usize,
    stimulus_id: usize,
    n_frames: usize,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SplitEntry {
    sequence_id: usize,
    #[serde(flatten)]
    split: SplitAssignment,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CorpusManifest {
    config: CorpusConfig,
    seg_len: usize,
    recordings: Vec<RecordingEntry>,
    labels: LabelIndex,
    splits: Vec<SplitEntry>,
}

pub fn encode_recording(frames: &Array2<f32>) -> Vec<u8> {
    let (t, c) = frames.dim();
    let mut out = Vec::with_capacity(16 + 4 * t * c);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&RECORDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    for v in frames.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_recording(bytes: &[u8], path: &Path) -> Result<Array2<f32>> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format(path, "truncated header"))
    };
    if bytes.get(..4) != Some(RECORDING_MAGIC.as_slice()) {
        return Err(Error::format(path, "bad magic, expected FHVC"));
    }
    let version = word(4)?;
    if version != RECORDING_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let t = word(8)? as usize;
    let c = word(12)? as usize;
    let payload = &bytes[16..];
    if payload.len() != 4 * t * c {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header implies {}", payload.len(), 4 * t * c),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((t, c), values).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `corpus.json` and one `.fhvc` file per recording into `dir`.
pub fn save_corpus(dir: &Path, cfg: &CorpusConfig, recordings: &[Recording]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dataset = Dataset::build(recordings, SEGMENT_FRAMES)?;
    let mut entries = Vec::with_capacity(recordings.len());
    for rec in recordings {
        let file = format!("rec_{:05}.fhvc", rec.sequence_id);
        fsio::write_atomic(&dir.join(&file), &encode_recording(&rec.frames))?;
        entries.push(RecordingEntry {
            sequence_id: rec.sequence_id,
            subject_id: rec.subject_id,
            stimulus_id: rec.stimulus_id,
            n_frames: rec.frames.nrows(),
            file,
        });
    }
    let manifest = CorpusManifest {
        config: cfg.clone(),
        seg_len: SEGMENT_FRAMES,
        recordings: entries,
        labels: dataset.labels,
        splits: dataset
            .splits
            .into_iter()
            .enumerate()
            .map(|(sequence_id, split)| SplitEntry { sequence_id, split })
            .collect(),
    };
    fsio::write_json(&dir.join(CORPUS_MANIFEST), &manifest)
}

/// A corpus read back from disk, with its stored label table and splits
/// checked against the ones recomputed from the frames.
#[derive(Clone, Debug)]
pub struct StoredCorpus {
    pub config: CorpusConfig,
    pub recordings: Vec<Recording>,
    pub dataset: Dataset,
}

pub fn load_corpus(dir: &Path) -> Result<StoredCorpus> {
    let manifest_path: PathBuf = dir.join(CORPUS_MANIFEST);
    let manifest: CorpusManifest = fsio::read_json(&manifest_path)?;
    let mut recordings = Vec::with_capacity(manifest.recordings.len());
    for entry in &manifest.recordings {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let frames = decode_recording(&bytes, &path)?;
        if frames.nrows() != entry.n_frames {
            return Err(Error::format(&path, "frame count disagrees with corpus.json"));
        }
        recordings.push(Recording {
            sequence_id: entry.sequence_id,
            subject_id: entry.subject_id,
            stimulus_id: entry.stimulus_id,
            frames,
        });
    }
    let dataset = Dataset::build(&recordings, manifest.seg_len)?;
    if dataset.labels != manifest.labels {
        return Err(Error::format(&manifest_path, "label table does not match recordings"));
    }
    for entry in &manifest.splits {
        if dataset.splits.get(entry.sequence_id) != Some(&entry.split) {
            return Err(Error::format(&manifest_path, "split table does not match recordings"));
        }
    }
    Ok(StoredCorpus {
        config: manifest.config,
        recordings,
        dataset,
    })
}
