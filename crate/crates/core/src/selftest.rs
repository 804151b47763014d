//! The oracle suite behind the `selftest` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bayes::{kl_gaussian_value, GaussianPrior, KlMode};
use crate::decode::{beam_search, greedy_decode, DecodeSpec};
use crate::error::Result;
use crate::losses::ctc_forward_backward;
use crate::oracle::{
    ctc_brute_force, end_to_end_gradcheck, exhaustive_search, gradcheck_case, kl_oracle,
    lrt_oracle, op_cases, random_layer, RandomTreeScorer,
};
use crate::tensor::Tensor;

pub const OP_GRAD_TOL: f64 = 1e-4;
pub const END_TO_END_GRAD_TOL: f64 = 1e-3;
pub const KL_MC_TOL: f64 = 0.01;
pub const LRT_TOL: f64 = 0.05;
pub const CTC_TOL: f64 = 1e-10;

/// Result of one oracle.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl OracleReport {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

/// Sizes of the oracle runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SelftestOptions {
    pub grad_trials: usize,
    pub kl_settings: usize,
    pub kl_samples: usize,
    pub lrt_samples: usize,
    pub ctc_instances: usize,
    pub beam_instances: usize,
    pub seed: u64,
}

impl SelftestOptions {
    pub fn full() -> Self {
        Self {
            grad_trials: 100,
            kl_settings: 20,
            kl_samples: 1_000_000,
            lrt_samples: 100_000,
            ctc_instances: 200,
            beam_instances: 50,
            seed: 7,
        }
    }

    pub fn quick() -> Self {
        Self {
            grad_trials: 10,
            kl_settings: 6,
            kl_samples: 400_000,
            lrt_samples: 50_000,
            ctc_instances: 40,
            beam_instances: 10,
            seed: 7,
        }
    }
}

pub fn gradient_oracle(opts: &SelftestOptions) -> Result<OracleReport> {
    let mut worst = (String::new(), 0.0f64);
    let mut failed = Vec::new();
    for (i, case) in op_cases().iter().enumerate() {
        let r = gradcheck_case(case, opts.grad_trials, opts.seed + i as u64)?;
        if !(r.max_rel_error <= OP_GRAD_TOL) {
            failed.push(format!("{} ({:.2e})", r.name, r.max_rel_error));
        }
        if r.max_rel_error > worst.1 {
            worst = (r.name, r.max_rel_error);
        }
    }
    let e2e = end_to_end_gradcheck(opts.grad_trials, opts.seed)?;
    if !(e2e.max_rel_error <= END_TO_END_GRAD_TOL) {
        failed.push(format!("end_to_end ({:.2e})", e2e.max_rel_error));
    }
    let detail = format!(
        "{} ops x {} trials, worst op {} at {:.2e}; end-to-end {:.2e}{}",
        op_cases().len(),
        opts.grad_trials,
        worst.0,
        worst.1,
        e2e.max_rel_error,
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failed: {}", failed.join(", "))
        }
    );
    Ok(OracleReport::new("gradients", failed.is_empty(), detail))
}

/// Checks `kl` (per element) against Monte-Carlo estimates and the `q = p` zero.
pub fn kl_report(
    name: &str,
    kl: &dyn Fn(f64, f64, GaussianPrior) -> f64,
    opts: &SelftestOptions,
) -> OracleReport {
    let checks = kl_oracle(kl, opts.kl_settings, opts.kl_samples, opts.seed);
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let zero = kl(0.0, 1.0, crate::bayes::WEIGHT_PRIOR);
    let zero_b = kl(0.0, 0.1, crate::bayes::BIAS_PRIOR);
    let passed = worst <= KL_MC_TOL && zero == 0.0 && zero_b == 0.0;
    OracleReport::new(
        name,
        passed,
        format!(
            "{} settings x {} samples, worst relative error {:.2e}; KL(p||p) = {zero}, {zero_b}",
            checks.len(),
            opts.kl_samples,
            worst
        ),
    )
}

pub fn standard_kl(mu: f64, sigma: f64, prior: GaussianPrior) -> f64 {
    kl_gaussian_value(
        &Tensor::scalar(mu),
        &Tensor::scalar(sigma),
        prior,
        KlMode::Standard,
    )
    .unwrap_or(f64::NAN)
}

pub fn lrt_report(opts: &SelftestOptions) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let layers = 3;
    for k in 0..layers {
        let (store, layer, x) = random_layer(4, 3, &mut rng)?;
        let c = lrt_oracle(&store, &layer, &x, opts.lrt_samples, opts.seed + k)?;
        worst_mean = worst_mean.max(c.mean_rel_error());
        worst_var = worst_var.max(c.variance_rel_error());
    }
    Ok(OracleReport::new(
        "lrt-moments",
        worst_mean <= LRT_TOL && worst_var <= LRT_TOL,
        format!(
            "{layers} layers x {} samples, mean error {worst_mean:.2e}, variance error {worst_var:.2e}",
            opts.lrt_samples
        ),
    ))
}

/// Random CTC instances with `T ≤ 6`, at most 4 classes (blank included) and `U ≤ 3`.
pub fn ctc_instances(count: usize, seed: u64) -> Vec<(usize, usize, Vec<f64>, Vec<usize>)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let frames = rng.random_range(1..=6);
        let classes = rng.random_range(2..=4);
        let u = rng.random_range(0..=3usize.min(frames));
        let target: Vec<usize> = (0..u).map(|_| rng.random_range(0..classes - 1)).collect();
        if crate::losses::ctc_min_frames(&target) > frames {
            continue;
        }
        let mut lp = Vec::with_capacity(frames * classes);
        for _ in 0..frames {
            let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            lp.extend(logits.iter().map(|l| l - lse));
        }
        out.push((frames, classes, lp, target));
    }
    out
}

pub fn ctc_report(opts: &SelftestOptions) -> Result<OracleReport> {
    let mut worst: f64 = 0.0;
    let instances = ctc_instances(opts.ctc_instances, opts.seed);
    for (frames, classes, lp, target) in &instances {
        let blank = classes - 1;
        let (fast, _) = ctc_forward_backward(lp, *frames, *classes, target, blank)?;
        let slow = ctc_brute_force(lp, *frames, *classes, target, blank);
        worst = worst.max((fast - slow).abs());
    }
    Ok(OracleReport::new(
        "ctc-exhaustive",
        worst <= CTC_TOL,
        format!("{} instances, worst absolute error {worst:.2e}", instances.len()),
    ))
}

/// Toy decoding problem: 5 ids (0 = start, 1 = end), 3 steps.
pub fn toy_beam_problem(seed: u64) -> (RandomTreeScorer, DecodeSpec) {
    (
        RandomTreeScorer {
            vocab: 5,
            seed,
            spread: 2.0,
        },
        DecodeSpec {
            sos: 0,
            eos: 1,
            forbidden: vec![0],
            max_len: 3,
        },
    )
}

/// Beam search against exhaustive search, plus the greedy and width-1 agreement.
pub fn beam_report(opts: &SelftestOptions) -> Result<OracleReport> {
    let mut mismatches = 0;
    for i in 0..opts.beam_instances {
        let (mut scorer, spec) = toy_beam_problem(opts.seed * 1000 + i as u64);
        let width = scorer.vocab.pow(spec.max_len as u32);
        let beam = beam_search(&mut scorer, &spec, width, false)?;
        let exact = exhaustive_search(&mut scorer, &spec)?;
        let greedy = greedy_decode(&mut scorer, &spec)?;
        let one = beam_search(&mut scorer, &spec, 1, false)?;
        if beam != exact || greedy != one {
            mismatches += 1;
        }
    }
    Ok(OracleReport::new(
        "beam-exhaustive",
        mismatches == 0,
        format!("{} toy models, {mismatches} mismatches", opts.beam_instances),
    ))
}

/// Feeds a KL with a flipped log-ratio sign to the KL oracle; passes when the oracle rejects it.
pub fn kl_mutation_report(opts: &SelftestOptions) -> OracleReport {
    let mutant = |mu: f64, sigma: f64, p: GaussianPrior| {
        -(p.sigma / sigma).ln() + (sigma * sigma + (mu - p.mu).powi(2)) / (2.0 * p.sigma * p.sigma)
            - 0.5
    };
    let caught = !kl_report("mutant", &mutant, opts).passed;
    OracleReport::new(
        "kl-mutation",
        caught,
        if caught {
            "sign error in the log term was detected".into()
        } else {
            "sign error in the log term went unnoticed".into()
        },
    )
}

pub fn run_selftest(opts: &SelftestOptions) -> Result<Vec<OracleReport>> {
    Ok(vec![
        gradient_oracle(opts)?,
        kl_report("kl-monte-carlo", &standard_kl, opts),
        lrt_report(opts)?,
        ctc_report(opts)?,
        beam_report(opts)?,
        kl_mutation_report(opts),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let reports = run_selftest(&SelftestOptions::quick()).unwrap();
        assert_eq!(reports.len(), 6);
        for r in &reports {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
