//! Vocabulary, synthetic utterances and padded batches.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::losses::ctc_min_frames;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<sos>", "<eos>"];
/// Content token rendered as a space between words.
pub const WORD_BOUNDARY: &str = "|";

/// Ordered token list. Ids 0..3 are pad, sos, eos; the CTC blank is the last id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    content: Vec<String>,
}

impl Vocab {
    pub fn new(content: Vec<String>) -> Result<Self> {
        if content.len() < 2 {
            return Err(Error::Config("vocabulary needs at least 2 content tokens".into()));
        }
        for (i, t) in content.iter().enumerate() {
            if t.is_empty() || t.contains('\n') || RESERVED.contains(&t.as_str()) {
                return Err(Error::Config(format!("invalid vocabulary token {t:?}")));
            }
            if content[..i].contains(t) {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { content })
    }

    /// `n` single-letter tokens starting at `a`, with the last one replaced by the word boundary.
    pub fn letters(n: usize) -> Result<Self> {
        if n > 26 {
            return Err(Error::Config("at most 26 letter tokens".into()));
        }
        let mut content: Vec<String> = (0..n).map(|i| ((b'a' + i as u8) as char).to_string()).collect();
        if let Some(last) = content.last_mut() {
            *last = WORD_BOUNDARY.to_string();
        }
        Self::new(content)
    }

    pub fn size(&self) -> usize {
        RESERVED.len() + self.content.len() + 1
    }

    pub fn blank(&self) -> usize {
        self.size() - 1
    }

    pub fn num_content(&self) -> usize {
        self.content.len()
    }

    /// Ids of the content tokens.
    pub fn content_ids(&self) -> std::ops::Range<usize> {
        RESERVED.len()..RESERVED.len() + self.content.len()
    }

    pub fn is_content(&self, id: usize) -> bool {
        self.content_ids().contains(&id)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            0..=2 => Some(RESERVED[id]),
            _ if self.is_content(id) => Some(&self.content[id - RESERVED.len()]),
            _ if id == self.blank() => Some("<blank>"),
            _ => None,
        }
    }

    /// Renders content ids as text; the word-boundary token becomes a space.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| self.is_content(id))
            .map(|&id| {
                let t = &self.content[id - RESERVED.len()];
                if t == WORD_BOUNDARY {
                    " "
                } else {
                    t.as_str()
                }
            })
            .collect()
    }

    /// Reserved tokens on the first three lines, then one content token per line.
    pub fn to_text(&self) -> String {
        RESERVED
            .iter()
            .copied()
            .chain(self.content.iter().map(String::as_str))
            .map(|t| format!("{t}\n"))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Config(
                "vocabulary file must start with <pad>, <sos>, <eos>".into(),
            ));
        }
        Self::new(lines[RESERVED.len()..].iter().map(|s| s.to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// One utterance: `T × F` feature frames and its content-token target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Tensor,
    pub target: Vec<usize>,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Frames left after the frontend's 4× subsampling.
    pub fn encoder_frames(&self) -> usize {
        self.frames() / 4
    }

    /// `T ≥ 4` and the target fits a CTC alignment over the subsampled frames.
    pub fn check_feasible(&self) -> Result<()> {
        if self.frames() < 4 {
            return Err(Error::Contract(format!(
                "utterance has {} frames, at least 4 are needed",
                self.frames()
            )));
        }
        let needed = ctc_min_frames(&self.target);
        if needed > self.encoder_frames() {
            return Err(Error::InfeasibleAlignment {
                target: self.target.len(),
                needed,
                frames: self.encoder_frames(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fails if any token id is outside the content range of `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(&bad) = s.target.iter().find(|&&t| !vocab.is_content(t)) {
                return Err(Error::Contract(format!(
                    "sample {i} has token id {bad}, outside the vocabulary's content ids"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic transduction task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub feature_dim: usize,
    pub content_tokens: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_span: usize,
    pub max_span: usize,
    pub noise: f64,
    /// Seed of the token→template mapping; shared by train and eval sets.
    pub template_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 500,
            feature_dim: 16,
            content_tokens: 12,
            min_tokens: 2,
            max_tokens: 8,
            min_span: 8,
            max_span: 12,
            noise: 0.3,
            template_seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.content_tokens < 2 {
            return Err(Error::Config("need at least 2 content tokens".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config("token count range is empty".into()));
        }
        if self.min_span == 0 || self.min_span > self.max_span {
            return Err(Error::Config("span range is empty".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise amplitude must be non-negative".into()));
        }
        // Worst case: every neighbour repeated and every span minimal.
        for u in self.min_tokens..=self.max_tokens {
            if (u * self.min_span) / 4 < 2 * u - 1 {
                return Err(Error::Config(format!(
                    "{u} tokens with spans of {} frames cannot carry a CTC alignment after 4x subsampling",
                    self.min_span
                )));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::letters(self.content_tokens)
    }
}

/// Per-token feature templates (one `F`-vector per content token).
#[derive(Clone, Debug, PartialEq)]
pub struct Templates {
    pub vectors: Vec<Vec<f64>>,
}

impl Templates {
    pub fn generate(config: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.template_seed);
        let vectors = (0..config.content_tokens)
            .map(|_| {
                (0..config.feature_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Self { vectors }
    }

    /// Smallest Euclidean distance between two different templates.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.vectors.len() {
            for j in i + 1..self.vectors.len() {
                let d = self.vectors[i]
                    .iter()
                    .zip(&self.vectors[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

/// Summary of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthReport {
    pub samples: usize,
    pub total_frames: usize,
    pub total_tokens: usize,
    pub min_template_distance: f64,
}

/// Draws `config.num_samples` utterances.
///
/// Each token contributes its template repeated over 8–12 frames (by default)
/// plus Gaussian noise of amplitude `config.noise`.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<(Dataset, SynthReport)> {
    config.validate()?;
    let vocab = config.vocab()?;
    let templates = Templates::generate(config);
    let min_dist = templates.min_pairwise_distance();
    if !(min_dist > 0.0) {
        return Err(Error::Config("token templates are not distinct".into()));
    }
    let ids: Vec<usize> = vocab.content_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = config.feature_dim;
    let mut samples = Vec::with_capacity(config.num_samples);
    for _ in 0..config.num_samples {
        let u = rng.random_range(config.min_tokens..=config.max_tokens);
        let target: Vec<usize> = (0..u).map(|_| ids[rng.random_range(0..ids.len())]).collect();
        let mut frames = Vec::new();
        for &tok in &target {
            let span = rng.random_range(config.min_span..=config.max_span);
            let template = &templates.vectors[tok - vocab.content_ids().start];
            for _ in 0..span {
                for &v in template {
                    let n: f64 = rng.sample(StandardNormal);
                    frames.push(v + config.noise * n);
                }
            }
        }
        let t = frames.len() / f;
        let sample = Sample {
            features: Tensor::matrix(t, f, frames)?,
            target,
        };
        sample.check_feasible()?;
        samples.push(sample);
    }
    let report = SynthReport {
        samples: samples.len(),
        total_frames: samples.iter().map(Sample::frames).sum(),
        total_tokens: samples.iter().map(|s| s.target.len()).sum(),
        min_template_distance: min_dist,
    };
    Ok((
        Dataset {
            feature_dim: f,
            samples,
        },
        report,
    ))
}

/// Padded batch. `features` is `[B × T_max × F]`, `targets` is `[B × U_max]` filled with [`PAD`].
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub feature_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub features: Vec<f64>,
    pub frame_lengths: Vec<usize>,
    pub targets: Vec<usize>,
    pub target_lengths: Vec<usize>,
    pub frame_mask: Vec<bool>,
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], indices: Vec<usize>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let f = first.feature_dim();
        let b = samples.len();
        let max_frames = samples.iter().map(|s| s.frames()).max().unwrap_or(0);
        let max_tokens = samples.iter().map(|s| s.target.len()).max().unwrap_or(0);
        let mut features = vec![0.0; b * max_frames * f];
        let mut targets = vec![PAD; b * max_tokens];
        let mut frame_mask = vec![false; b * max_frames];
        let mut target_mask = vec![false; b * max_tokens];
        for (i, s) in samples.iter().enumerate() {
            if s.feature_dim() != f {
                return Err(Error::Shape {
                    op: "batch",
                    lhs: first.features.shape().to_vec(),
                    rhs: s.features.shape().to_vec(),
                });
            }
            let base = i * max_frames * f;
            features[base..base + s.features.numel()].copy_from_slice(s.features.data());
            frame_mask[i * max_frames..i * max_frames + s.frames()].fill(true);
            targets[i * max_tokens..i * max_tokens + s.target.len()].copy_from_slice(&s.target);
            target_mask[i * max_tokens..i * max_tokens + s.target.len()].fill(true);
        }
        Ok(Self {
            indices,
            feature_dim: f,
            max_frames,
            max_tokens,
            features,
            frame_lengths: samples.iter().map(|s| s.frames()).collect(),
            targets,
            target_lengths: samples.iter().map(|s| s.target.len()).collect(),
            frame_mask,
            target_mask,
        })
    }

    pub fn len(&self) -> usize {
        self.frame_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_lengths.is_empty()
    }

    /// The unpadded frames of utterance `i`.
    pub fn sample_features(&self, i: usize) -> Result<Tensor> {
        let f = self.feature_dim;
        let base = i * self.max_frames * f;
        let t = self.frame_lengths[i];
        Tensor::matrix(t, f, self.features[base..base + t * f].to_vec())
    }

    /// The unpadded target of utterance `i`.
    pub fn sample_target(&self, i: usize) -> &[usize] {
        let base = i * self.max_tokens;
        &self.targets[base..base + self.target_lengths[i]]
    }
}

/// Shuffles `dataset` with `seed` and cuts it into padded batches of at most `batch_size`.
pub fn make_batches(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|idx| {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &dataset.samples[i]).collect();
            Batch::from_samples(&samples, idx.to_vec())
        })
        .collect()
}

pub(crate) fn format_err(path: &Path, kind: FormatError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        kind,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            num_samples: n,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::letters(12).unwrap();
        assert_eq!(v.size(), 16);
        assert_eq!(v.blank(), 15);
        assert_eq!(v.content_ids(), 3..15);
        assert_eq!(v.token(3), Some("a"));
        assert_eq!(v.token(14), Some(WORD_BOUNDARY));
        assert_eq!(v.render(&[3, 4, 14, 5]), "ab c");
        let parsed = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(parsed, v);
        assert!(Vocab::from_text("a\nb\n").is_err());
        assert!(Vocab::new(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn noiseless_features_are_template_concatenations() {
        let cfg = SynthConfig {
            noise: 0.0,
            ..small(5)
        };
        let (data, _) = generate_synthetic(&cfg, 3).unwrap();
        let templates = Templates::generate(&cfg);
        for s in &data.samples {
            let mut runs = s.target.clone();
            runs.dedup();
            let mut row = 0;
            for &tok in &runs {
                let tpl = &templates.vectors[tok - 3];
                assert_eq!(s.features.row(row), tpl.as_slice());
                while row < s.frames() && s.features.row(row) == tpl.as_slice() {
                    row += 1;
                }
            }
            assert_eq!(row, s.frames());
        }
    }

    #[test]
    fn same_seed_same_data() {
        let (a, _) = generate_synthetic(&small(20), 9).unwrap();
        let (b, _) = generate_synthetic(&small(20), 9).unwrap();
        let (c, _) = generate_synthetic(&small(20), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn every_sample_is_feasible() {
        let (d, report) = generate_synthetic(&small(200), 1).unwrap();
        assert!(report.min_template_distance > 0.0);
        for s in &d.samples {
            s.check_feasible().unwrap();
            assert!(s.target.iter().all(|&t| (3..15).contains(&t)));
            assert!((2..=8).contains(&s.target.len()));
        }
    }

    #[test]
    fn infeasible_config_is_rejected() {
        let cfg = SynthConfig {
            min_span: 1,
            max_span: 2,
            ..small(5)
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn batching_covers_every_sample_once() {
        let (d, _) = generate_synthetic(&small(23), 2).unwrap();
        let batches = make_batches(&d, 5, 4).unwrap();
        assert_eq!(batches.len(), 5);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        let real_frames: usize = d.samples.iter().map(Sample::frames).sum();
        let masked: usize = batches
            .iter()
            .map(|b| b.frame_mask.iter().filter(|&&m| m).count())
            .sum();
        assert_eq!(masked, real_frames);
        for b in &batches {
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(b.sample_features(k).unwrap(), d.samples[i].features);
                assert_eq!(b.sample_target(k), d.samples[i].target.as_slice());
            }
        }
        assert_eq!(make_batches(&d, 23, 0).unwrap().len(), 1);
        assert!(make_batches(&d, 0, 0).is_err());
    }

    #[test]
    fn shuffle_seeds_change_order_not_content() {
        let (d, _) = generate_synthetic(&small(30), 2).unwrap();
        let order = |seed| -> Vec<usize> {
            make_batches(&d, 7, seed)
                .unwrap()
                .iter()
                .flat_map(|b| b.indices.clone())
                .collect()
        };
        let (a, b) = (order(1), order(2));
        assert_ne!(a, b);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, sb);
    }
}
