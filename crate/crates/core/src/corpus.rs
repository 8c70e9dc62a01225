//! Deterministic synthetic audio-visual corpus.
//!
//! Each subword unit owns an audio template (one `D`-dim row per HMM state)
//! and a visual template (one `H x W` image per state). An utterance is a
//! random unit sequence; every unit occupies a random multiple of four audio
//! frames split into three contiguous state segments, so the 100 frames/sec
//! audio and 25 frames/sec video line up exactly and the per-frame state
//! labels are known.
//!
//! `visual_informativeness` makes some units share an audio template while
//! keeping distinct visual templates: those units can only be told apart by
//! looking at the video.

use std::fmt::Write as _;
use std::path::Path;

use avsr_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{Container, NamedArray};
use crate::{Error, Result};

pub const AUDIO_FPS: usize = 100;
pub const VIDEO_FPS: usize = 25;
/// Audio frames per video frame.
pub const RATE_RATIO: usize = AUDIO_FPS / VIDEO_FPS;
pub const STATES_PER_UNIT: usize = 3;
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_units: usize,
    pub feature_dim: usize,
    pub video_height: usize,
    pub video_width: usize,
    pub num_utterances: usize,
    /// Inclusive range of units per utterance.
    pub utterance_length_range: (usize, usize),
    /// Inclusive range of audio frames per unit; only multiples of 4 are drawn.
    pub duration_range: (usize, usize),
    pub noise_std: f64,
    pub video_noise_std: f64,
    pub visual_informativeness: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_units: 8,
            feature_dim: 80,
            video_height: 32,
            video_width: 32,
            num_utterances: 100,
            utterance_length_range: (3, 6),
            duration_range: (12, 20),
            noise_std: 0.3,
            video_noise_std: 0.05,
            visual_informativeness: 0.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_units < 2 {
            return bad(format!("num_units must be >= 2, got {}", self.num_units));
        }
        if self.feature_dim == 0 || self.video_height == 0 || self.video_width == 0 {
            return bad("feature_dim and video dimensions must be positive".into());
        }
        let (lo, hi) = self.utterance_length_range;
        if lo == 0 || lo > hi {
            return bad(format!("invalid utterance_length_range ({lo}, {hi})"));
        }
        let (dlo, dhi) = self.duration_range;
        if dlo < 4 * STATES_PER_UNIT || dlo > dhi {
            return bad(format!(
                "duration_range ({dlo}, {dhi}) must start at >= {} frames",
                4 * STATES_PER_UNIT
            ));
        }
        if self.durations().is_empty() {
            return bad(format!("duration_range ({dlo}, {dhi}) holds no multiple of 4"));
        }
        if !(0.0..=1.0).contains(&self.visual_informativeness) {
            return bad(format!(
                "visual_informativeness {} outside [0, 1]",
                self.visual_informativeness
            ));
        }
        if !(self.noise_std >= 0.0 && self.video_noise_std >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }

    fn durations(&self) -> Vec<usize> {
        (self.duration_range.0..=self.duration_range.1)
            .filter(|d| d % RATE_RATIO == 0)
            .collect()
    }

    pub fn num_senones(&self) -> usize {
        self.num_units * STATES_PER_UNIT
    }

    /// Unit whose audio template `unit` reuses. Units outside the ambiguous
    /// group map to themselves; ambiguous units are paired `(0,1), (2,3), ...`
    /// with an odd leftover joining the previous pair.
    pub fn audio_template_owner(&self, unit: usize) -> usize {
        let k = self.num_ambiguous_units();
        if unit >= k {
            return unit;
        }
        if unit % 2 == 1 {
            unit - 1
        } else if unit == k - 1 && k % 2 == 1 {
            unit - 2
        } else {
            unit
        }
    }

    pub fn num_ambiguous_units(&self) -> usize {
        if self.visual_informativeness <= 0.0 {
            return 0;
        }
        let k = (self.visual_informativeness * self.num_units as f64).round() as usize;
        k.clamp(2, self.num_units)
    }
}

/// `T x D` acoustic feature frames at 100 frames/sec.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence(Tensor);

impl FeatureSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 2 || frames.rows() == 0 {
            return Err(Error::Degenerate(format!(
                "feature sequence needs shape [T>=1, D], got {:?}",
                frames.shape()
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Degenerate("non-finite feature values".into()));
        }
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }
}

/// `T_v x H x W` grayscale frames in `[0, 1]` at 25 frames/sec.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence(Tensor);

impl VideoSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.shape().len() != 3 || frames.rows() == 0 {
            return Err(Error::Degenerate(format!(
                "video needs shape [T_v>=1, H, W], got {:?}",
                frames.shape()
            )));
        }
        Ok(Self(frames))
    }

    pub fn frames(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio: FeatureSequence,
    pub video: VideoSequence,
    pub transcript: Vec<usize>,
    /// Ground-truth senone id (`unit * 3 + state`) for every audio frame.
    pub gold_alignment: Vec<usize>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if self.transcript.is_empty() {
            return Err(Error::Empty(format!("{}: empty transcript", self.id)));
        }
        let (t, tv) = (self.audio.len(), self.video.len());
        if t / RATE_RATIO != tv && t.abs_diff(RATE_RATIO * tv) >= RATE_RATIO {
            return Err(Error::LengthMismatch {
                what: format!("{} video", self.id),
                expected: t / RATE_RATIO,
                got: tv,
            });
        }
        if !self.gold_alignment.is_empty() && self.gold_alignment.len() != t {
            return Err(Error::LengthMismatch {
                what: format!("{} gold alignment", self.id),
                expected: t,
                got: self.gold_alignment.len(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    /// Per unit, `[3, D]`.
    pub audio_templates: Vec<Tensor>,
    /// Per unit, `[3, H, W]`.
    pub visual_templates: Vec<Tensor>,
    pub utterances: Vec<Utterance>,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generates the corpus described by `spec`. Values are rounded to `f32`
/// precision so that persisting and reloading is lossless.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    generate_split(spec, 0, "utt", spec.num_utterances)
}

/// Draws `count` utterances sharing the templates of `spec`. Split 0 is the
/// training corpus; other splits use independent random streams.
pub fn generate_split(spec: &CorpusSpec, split: u64, prefix: &str, count: usize) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, h, w) = (spec.feature_dim, spec.video_height, spec.video_width);

    let own_templates: Vec<Tensor> = (0..spec.num_units)
        .map(|_| {
            let data = (0..STATES_PER_UNIT * d)
                .map(|_| round_f32(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            Tensor::new(&[STATES_PER_UNIT, d], data)
        })
        .collect::<std::result::Result<_, _>>()?;
    let audio_templates: Vec<Tensor> = (0..spec.num_units)
        .map(|u| own_templates[spec.audio_template_owner(u)].clone())
        .collect();
    let visual_templates: Vec<Tensor> = (0..spec.num_units)
        .map(|_| {
            let data = (0..STATES_PER_UNIT * h * w)
                .map(|_| round_f32(rng.random_range(0.1..0.9)))
                .collect();
            Tensor::new(&[STATES_PER_UNIT, h, w], data)
        })
        .collect::<std::result::Result<_, _>>()?;
    if split != 0 {
        rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(split);
    }

    let durations = spec.durations();
    let width = count.max(1).to_string().len();
    let mut utterances = Vec::with_capacity(count);
    for i in 0..count {
        let len = rng.random_range(spec.utterance_length_range.0..=spec.utterance_length_range.1);
        let transcript: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.num_units)).collect();
        let mut gold = Vec::new();
        for &u in &transcript {
            let dur = durations[rng.random_range(0..durations.len())];
            for (s, n) in split_states(dur, &mut rng).into_iter().enumerate() {
                gold.extend(std::iter::repeat_n(u * STATES_PER_UNIT + s, n));
            }
        }
        let t = gold.len();
        let mut audio = Vec::with_capacity(t * d);
        for &sen in &gold {
            let tmpl = audio_templates[sen / STATES_PER_UNIT].row(sen % STATES_PER_UNIT);
            for &v in tmpl {
                let noise: f64 = rng.sample(StandardNormal);
                audio.push(round_f32(v + spec.noise_std * noise));
            }
        }
        let tv = t / RATE_RATIO;
        let mut video = Vec::with_capacity(tv * h * w);
        for j in 0..tv {
            let sen = gold[j * RATE_RATIO + RATE_RATIO / 2];
            let tmpl = visual_templates[sen / STATES_PER_UNIT].row(sen % STATES_PER_UNIT);
            for &v in tmpl {
                let noise: f64 = rng.sample(StandardNormal);
                video.push(round_f32((v + spec.video_noise_std * noise).clamp(0.0, 1.0)));
            }
        }
        let utt = Utterance {
            id: format!("{prefix}{i:0width$}"),
            audio: FeatureSequence::new(Tensor::new(&[t, d], audio)?)?,
            video: VideoSequence::new(Tensor::new(&[tv, h, w], video)?)?,
            transcript,
            gold_alignment: gold,
        };
        utt.validate()?;
        utterances.push(utt);
    }
    Ok(Corpus {
        spec: spec.clone(),
        audio_templates,
        visual_templates,
        utterances,
    })
}

/// Splits `dur` frames into three contiguous state segments, each at least
/// `max(2, dur / 6)` long.
fn split_states(dur: usize, rng: &mut ChaCha8Rng) -> [usize; STATES_PER_UNIT] {
    let min = (dur / 6).max(2);
    let free = dur - STATES_PER_UNIT * min;
    let mut a = rng.random_range(0..=free);
    let mut b = rng.random_range(0..=free);
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }
    [min + a, min + b - a, min + free - b]
}

/// Per-dimension standardization over the utterance.
pub fn normalize_utterance(f: &FeatureSequence) -> Result<FeatureSequence> {
    let x = f.frames();
    let (t, d) = (x.rows(), x.cols());
    if t < 2 {
        return Err(Error::Degenerate(format!(
            "normalization needs at least 2 frames, got {t}"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..t {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; d];
    for i in 0..t {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|s| 1.0 / (s / t as f64).max(VARIANCE_FLOOR).sqrt())
        .collect();
    let mut out = x.clone();
    for i in 0..t {
        for ((v, m), s) in out.row_mut(i).iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - m) * s;
        }
    }
    FeatureSequence::new(out)
}

/// Frequency and time masking policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugPolicy {
    pub freq_masks: usize,
    /// Inclusive range of mask widths in feature bins.
    pub freq_width: (usize, usize),
    pub time_masks: usize,
    /// Inclusive range of mask widths as a fraction of the utterance length.
    pub time_ratio: (f64, f64),
}

impl Default for SpecAugPolicy {
    fn default() -> Self {
        Self {
            freq_masks: 2,
            freq_width: (0, 10),
            time_masks: 2,
            time_ratio: (0.0, 0.05),
        }
    }
}

impl SpecAugPolicy {
    pub fn none() -> Self {
        Self {
            freq_masks: 0,
            freq_width: (0, 0),
            time_masks: 0,
            time_ratio: (0.0, 0.0),
        }
    }
}

/// Zeroes random frequency bands and time spans. Widths larger than the
/// axis are clipped.
pub fn spec_augment(f: &FeatureSequence, policy: &SpecAugPolicy, rng: &mut impl Rng) -> FeatureSequence {
    let mut x = f.frames().clone();
    let (t, d) = (x.rows(), x.cols());
    for _ in 0..policy.freq_masks {
        let (lo, hi) = policy.freq_width;
        let width = rng.random_range(lo.min(hi)..=hi).min(d);
        let start = rng.random_range(0..=d - width);
        for i in 0..t {
            x.row_mut(i)[start..start + width].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    for _ in 0..policy.time_masks {
        let lo = (policy.time_ratio.0 * t as f64).round() as usize;
        let hi = (policy.time_ratio.1 * t as f64).round() as usize;
        let width = rng.random_range(lo.min(hi)..=hi).min(t);
        let start = rng.random_range(0..=t - width);
        for i in start..start + width {
            x.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
    }
    FeatureSequence(x)
}

pub const MANIFEST: &str = "manifest.tsv";
pub const GOLD_ALIGNMENT: &str = "gold_alignment.txt";
pub const HASH_PREFIX: &str = "# config_hash=";

/// One manifest record.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub transcript: Vec<usize>,
}

pub fn format_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn parse_tokens(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|t| t.parse().map_err(|_| format!("bad token `{t}`")))
        .collect()
}

/// Splits a leading `# config_hash=` line off text artifacts.
pub fn split_hash(text: &str) -> (Option<String>, impl Iterator<Item = &str>) {
    let mut lines = text.lines().peekable();
    let hash = match lines.peek() {
        Some(l) if l.starts_with(HASH_PREFIX) => {
            let h = l[HASH_PREFIX.len()..].trim().to_string();
            lines.next();
            Some(h)
        }
        _ => None,
    };
    (hash, lines.filter(|l| !l.trim().is_empty() && !l.starts_with('#')))
}

fn hash_header(hash: Option<&str>) -> String {
    hash.map(|h| format!("{HASH_PREFIX}{h}\n")).unwrap_or_default()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry], hash: Option<&str>) -> Result<()> {
    let mut s = hash_header(hash);
    for e in entries {
        writeln!(s, "{}\t{}\t{}", e.id, e.path, format_tokens(&e.transcript)).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<(Option<String>, Vec<ManifestEntry>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (hash, lines) = split_hash(&text);
    let mut out = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(path, format!("expected 3 tab-separated fields: `{line}`")));
        }
        out.push(ManifestEntry {
            id: cols[0].to_string(),
            path: cols[1].to_string(),
            transcript: parse_tokens(cols[2]).map_err(|m| Error::format(path, m))?,
        });
    }
    Ok((hash, out))
}

/// Writes `<utt-id> <state-id>*T` lines.
pub fn write_alignments(path: &Path, rows: &[(String, Vec<usize>)], hash: Option<&str>) -> Result<()> {
    let mut s = hash_header(hash);
    for (id, labels) in rows {
        s.push_str(id);
        for l in labels {
            write!(s, " {l}").unwrap();
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_alignments(path: &Path) -> Result<(Option<String>, Vec<(String, Vec<usize>)>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (hash, lines) = split_hash(&text);
    let mut out = Vec::new();
    for line in lines {
        let (id, rest) = line.split_once(' ').unwrap_or((line, ""));
        out.push((id.to_string(), parse_tokens(rest).map_err(|m| Error::format(path, m))?));
    }
    Ok((hash, out))
}

impl Corpus {
    /// Persists utterances as `<dir>/utts/<id>.avna` plus manifest and gold
    /// alignments.
    pub fn save(&self, dir: &Path, hash: Option<&str>) -> Result<()> {
        save_utterances(dir, &self.utterances, hash)
    }
}

pub fn save_utterances(dir: &Path, utts: &[Utterance], hash: Option<&str>) -> Result<()> {
    let utt_dir = dir.join("utts");
    std::fs::create_dir_all(&utt_dir).map_err(|e| Error::io(&utt_dir, e))?;
    let mut entries = Vec::with_capacity(utts.len());
    let mut gold = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = format!("utts/{}.avna", u.id);
        let mut c = Container::new();
        if let Some(h) = hash {
            c = c.with_meta("config_hash", h);
        }
        c.push(NamedArray::f32_from("audio", u.audio.frames()));
        c.push(NamedArray::f32_from("video", u.video.frames()));
        c.write(dir.join(&rel))?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            path: rel,
            transcript: u.transcript.clone(),
        });
        gold.push((u.id.clone(), u.gold_alignment.clone()));
    }
    write_manifest(&dir.join(MANIFEST), &entries, hash)?;
    write_alignments(&dir.join(GOLD_ALIGNMENT), &gold, hash)
}

/// Loads a directory written by [`save_utterances`]. Returns the manifest's
/// config hash alongside the utterances.
pub fn load_utterances(dir: &Path) -> Result<(Option<String>, Vec<Utterance>)> {
    let manifest = dir.join(MANIFEST);
    if !manifest.exists() {
        return Err(Error::MissingArtifact {
            path: manifest,
            hint: "run `make-data` first".into(),
        });
    }
    let (hash, entries) = read_manifest(&manifest)?;
    let gold_path = dir.join(GOLD_ALIGNMENT);
    let gold = if gold_path.exists() {
        read_alignments(&gold_path)?.1
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let c = Container::read(dir.join(&e.path))?;
        let gold_alignment = gold
            .iter()
            .find(|(id, _)| *id == e.id)
            .map(|(_, l)| l.clone())
            .unwrap_or_default();
        let utt = Utterance {
            audio: FeatureSequence::new(c.tensor("audio")?)?,
            video: VideoSequence::new(c.tensor("video")?)?,
            id: e.id,
            transcript: e.transcript,
            gold_alignment,
        };
        utt.validate()?;
        out.push(utt);
    }
    Ok((hash, out))
}
