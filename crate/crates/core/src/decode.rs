//! Autoregressive decoding: greedy and length-synchronous beam search.

use std::cmp::Ordering;

use crate::bayes::{KlMode, Noise};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Memory, Model, Pass};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Anything that can score the next token of a batch of prefixes.
pub trait StepScorer {
    /// Log-probabilities over the full vocabulary for the next token after each prefix.
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Special tokens and limits shared by every decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeSpec {
    pub sos: usize,
    pub eos: usize,
    /// Tokens that are never emitted (pad, sos, blank).
    pub forbidden: Vec<usize>,
    /// Maximum number of generated tokens, end-of-sequence included.
    pub max_len: usize,
}

/// Decoder prefix with its accumulated log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    fn start(sos: usize) -> Self {
        Self {
            tokens: vec![sos],
            log_prob: 0.0,
            finished: false,
        }
    }

    fn extend(&self, token: usize, log_prob: f64, eos: usize) -> Self {
        debug_assert!(!self.finished);
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Self {
            tokens,
            log_prob: self.log_prob + log_prob,
            finished: token == eos,
        }
    }
}

/// Final output of a decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Emitted tokens without start or end markers.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `true` when `max_len` was hit before end-of-sequence.
    pub truncated: bool,
}

impl Decoded {
    fn from_hypothesis(h: &Hypothesis, eos: usize) -> Self {
        let mut tokens = h.tokens[1..].to_vec();
        if tokens.last() == Some(&eos) {
            tokens.pop();
        }
        Self {
            tokens,
            log_prob: h.log_prob,
            truncated: !h.finished,
        }
    }
}

/// Higher score first, then the lexicographically smaller token sequence.
fn rank(a: &Hypothesis, b: &Hypothesis, length_norm: bool) -> Ordering {
    let score = |h: &Hypothesis| {
        if length_norm {
            h.log_prob / (h.tokens.len() - 1).max(1) as f64
        } else {
            h.log_prob
        }
    };
    score(b)
        .partial_cmp(&score(a))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_row(row: &[f64], spec: &DecodeSpec) -> Result<()> {
    if spec.eos >= row.len() || spec.forbidden.iter().any(|&t| t >= row.len()) {
        return Err(Error::Contract(
            "special token id outside the scored vocabulary".into(),
        ));
    }
    Ok(())
}

/// Appends the highest-scoring allowed token until end-of-sequence or `max_len`.
pub fn greedy_decode(scorer: &mut dyn StepScorer, spec: &DecodeSpec) -> Result<Decoded> {
    let mut hyp = Hypothesis::start(spec.sos);
    for _ in 0..spec.max_len {
        let row = scorer
            .next_log_probs(std::slice::from_ref(&hyp.tokens))?
            .pop()
            .ok_or_else(|| Error::Contract("scorer returned no rows".into()))?;
        check_row(&row, spec)?;
        let (best, lp) = row
            .iter()
            .enumerate()
            .filter(|(t, _)| !spec.forbidden.contains(t))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (t, &lp)| {
                if acc.0 == usize::MAX || lp > acc.1 {
                    (t, lp)
                } else {
                    acc
                }
            });
        hyp = hyp.extend(best, lp, spec.eos);
        if hyp.finished {
            break;
        }
    }
    Ok(Decoded::from_hypothesis(&hyp, spec.eos))
}

/// Length-synchronous beam search.
///
/// At every step each unfinished hypothesis is expanded by every allowed
/// token; finished hypotheses stay in the same pool and the best `width`
/// survive. Returns the best finished hypothesis, or the best unfinished
/// one if nothing finished within `max_len` steps.
pub fn beam_search(
    scorer: &mut dyn StepScorer,
    spec: &DecodeSpec,
    width: usize,
    length_norm: bool,
) -> Result<Decoded> {
    if width == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    let mut beam = vec![Hypothesis::start(spec.sos)];
    for _ in 0..spec.max_len {
        let open: Vec<&Hypothesis> = beam.iter().filter(|h| !h.finished).collect();
        if open.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = open.iter().map(|h| h.tokens.clone()).collect();
        let rows = scorer.next_log_probs(&prefixes)?;
        if rows.len() != prefixes.len() {
            return Err(Error::Contract("scorer returned the wrong number of rows".into()));
        }
        let mut pool: Vec<Hypothesis> = beam.iter().filter(|h| h.finished).cloned().collect();
        for (h, row) in open.iter().zip(&rows) {
            check_row(row, spec)?;
            for (t, &lp) in row.iter().enumerate() {
                if !spec.forbidden.contains(&t) {
                    pool.push(h.extend(t, lp, spec.eos));
                }
            }
        }
        pool.sort_by(|a, b| rank(a, b, length_norm));
        pool.truncate(width);
        beam = pool;
    }
    let best = beam
        .iter()
        .filter(|h| h.finished)
        .min_by(|a, b| rank(a, b, length_norm))
        .or_else(|| beam.iter().min_by(|a, b| rank(a, b, length_norm)))
        .expect("beam is never empty");
    Ok(Decoded::from_hypothesis(best, spec.eos))
}

/// Scores prefixes with the model's decoder against one encoded utterance.
pub struct ModelScorer<'a, 'n> {
    model: &'a Model,
    store: &'a ParamStore,
    memory: Tensor,
    noise: Option<Noise<'n>>,
    kl_mode: KlMode,
}

impl<'a, 'n> ModelScorer<'a, 'n> {
    /// Encodes `features` once; every step reuses the encoder output.
    pub fn new(
        model: &'a Model,
        store: &'a ParamStore,
        features: &Tensor,
        noise: Noise<'n>,
        kl_mode: KlMode,
    ) -> Result<Self> {
        let mut graph = Graph::new();
        let mut pass = Pass::new(&mut graph, store, noise, kl_mode);
        let memory = model.encode(&mut pass, &[features])?;
        let value = pass.graph.value(memory.stacked).clone();
        Ok(Self {
            model,
            store,
            memory: value,
            noise: Some(pass.noise),
            kl_mode,
        })
    }
}

impl StepScorer for ModelScorer<'_, '_> {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut graph = Graph::new();
        let stacked = graph.constant(self.memory.clone());
        let memory = Memory {
            stacked,
            lengths: vec![self.memory.shape()[0]],
        };
        let noise = self.noise.take().unwrap_or(Noise::Off);
        let mut pass = Pass::new(&mut graph, self.store, noise, self.kl_mode);
        let sources = vec![0; prefixes.len()];
        let logits = self.model.decode_forward(&mut pass, &memory, prefixes, &sources);
        let graph = pass.graph;
        self.noise = Some(pass.noise);
        let mut rows = Vec::with_capacity(prefixes.len());
        for l in logits? {
            let lp = graph.log_softmax(l);
            let value = graph.value(lp);
            let (len, _) = value.dims2();
            rows.push(value.row(len - 1).to_vec());
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token log-probabilities looked up from the last token only.
    struct Bigram(Vec<Vec<f64>>);

    impl StepScorer for Bigram {
        fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| self.0[*p.last().unwrap()].clone())
                .collect())
        }
    }

    fn spec(max_len: usize) -> DecodeSpec {
        DecodeSpec {
            sos: 0,
            eos: 1,
            forbidden: vec![0],
            max_len,
        }
    }

    fn ln(p: &[f64]) -> Vec<f64> {
        p.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn immediate_end_gives_empty_transcript() {
        let mut s = Bigram(vec![ln(&[0.01, 0.9, 0.09]); 3]);
        let out = greedy_decode(&mut s, &spec(5)).unwrap();
        assert!(out.tokens.is_empty() && !out.truncated);
        let out = beam_search(&mut s, &spec(5), 3, false).unwrap();
        assert!(out.tokens.is_empty());
    }

    #[test]
    fn truncation_is_flagged() {
        let mut s = Bigram(vec![ln(&[0.01, 0.09, 0.9]); 3]);
        let out = greedy_decode(&mut s, &spec(4)).unwrap();
        assert_eq!(out.tokens, vec![2, 2, 2, 2]);
        assert!(out.truncated);
    }

    #[test]
    fn beam_finds_path_greedy_misses() {
        // greedy takes token 2 (0.6) then is forced through a poor tail;
        // token 3 (0.4) leads to a near-certain end.
        let table = vec![
            ln(&[1e-9, 1e-9, 0.6, 0.4]),
            ln(&[0.25, 0.25, 0.25, 0.25]),
            ln(&[1e-9, 0.3, 0.35, 0.35]),
            ln(&[1e-9, 0.999, 5e-4, 5e-4]),
        ];
        let mut s = Bigram(table);
        let greedy = greedy_decode(&mut s, &spec(2)).unwrap();
        let beam = beam_search(&mut s, &spec(2), 2, false).unwrap();
        assert_eq!(beam.tokens, vec![3]);
        assert!(beam.log_prob > greedy.log_prob);
    }

    #[test]
    fn forbidden_tokens_never_emitted() {
        let mut s = Bigram(vec![ln(&[0.7, 0.1, 0.2]); 3]);
        let out = beam_search(&mut s, &spec(3), 4, false).unwrap();
        assert!(!out.tokens.contains(&0));
    }

    #[test]
    fn zero_width_is_rejected() {
        let mut s = Bigram(vec![ln(&[0.5, 0.5]); 2]);
        assert!(beam_search(&mut s, &spec(3), 0, false).is_err());
    }
}
