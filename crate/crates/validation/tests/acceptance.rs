//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use bayes_transformer::bayes::{kl_gaussian_value, KlMode, BIAS_PRIOR, WEIGHT_PRIOR};
use bayes_transformer::checkpoint::Checkpoint;
use bayes_transformer::config::TrainConfig;
use bayes_transformer::data::{generate_synthetic, SynthConfig};
use bayes_transformer::decode::beam_search;
use bayes_transformer::losses::{
    ctc_forward_backward, minibatch_weight, JointWeights, KlWeightForm,
};
use bayes_transformer::oracle::{
    ctc_brute_force, end_to_end_gradcheck, exhaustive_search, gradcheck_case, kl_oracle,
    lrt_oracle, op_cases, random_layer, tiny_model_config,
};
use bayes_transformer::selftest::{ctc_instances, standard_kl, toy_beam_problem};
use bayes_transformer::tensor::Tensor;
use bayes_transformer::train::{
    eval_set, evaluate, read_jsonl, train_set, EpochRecord, EvalOptions, MetricsSink, StepRecord,
    Trainer, EPOCHS_JSONL, STEPS_JSONL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn record(&mut self, id: u32, name: &str, started: Instant, outcome: Outcome) {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("criterion {id} ({name}): FAIL [{secs:.1}s] {detail}");
            }
        }
    }
}

fn within(started: Instant, limit: Duration, detail: String) -> Outcome {
    if started.elapsed() <= limit {
        Ok(detail)
    } else {
        Err(format!("{detail}; exceeded {}s", limit.as_secs()))
    }
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    let cases = op_cases();
    for (i, case) in cases.iter().enumerate() {
        let r = gradcheck_case(case, 100, 100 + i as u64).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_rel_error);
        if !(r.max_rel_error <= 1e-4) {
            failed.push(format!("{} {:.2e}", r.name, r.max_rel_error));
        }
    }
    let e2e = end_to_end_gradcheck(100, 3).map_err(|e| e.to_string())?;
    if !(e2e.max_rel_error <= 1e-3) {
        failed.push(format!("end-to-end {:.2e}", e2e.max_rel_error));
    }
    let detail = format!(
        "{} ops x 100 trials, worst {worst:.2e}; end-to-end x 100 trials {:.2e}",
        cases.len(),
        e2e.max_rel_error
    );
    if !failed.is_empty() {
        return Err(format!("{detail}; failed: {}", failed.join(", ")));
    }
    within(started, Duration::from_secs(120), detail)
}

fn kl() -> Outcome {
    let started = Instant::now();
    let checks = kl_oracle(&standard_kl, 20, 1_000_000, 11);
    let worst = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);

    // q = p on whole random-sized tensors, for both priors.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut nonzero = Vec::new();
    for prior in [WEIGHT_PRIOR, BIAS_PRIOR] {
        for _ in 0..5 {
            let n = rng.random_range(1..50);
            let mu = Tensor::filled(&[n], prior.mu);
            let sigma = Tensor::filled(&[n], prior.sigma);
            let v = kl_gaussian_value(&mu, &sigma, prior, KlMode::Standard)
                .map_err(|e| e.to_string())?;
            if v != 0.0 {
                nonzero.push(v);
            }
        }
    }
    let detail = format!(
        "20 settings x 1e6 samples, worst relative error {worst:.2e}; KL(p||p) nonzero in {} of 10",
        nonzero.len()
    );
    if worst > 0.01 || !nonzero.is_empty() {
        return Err(detail);
    }
    within(started, Duration::from_secs(60), detail)
}

fn lrt() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut mean_err, mut var_err) = (0.0f64, 0.0f64);
    for k in 0..4 {
        let (store, layer, x) = random_layer(5, 4, &mut rng).map_err(|e| e.to_string())?;
        let c = lrt_oracle(&store, &layer, &x, 100_000, 22 + k).map_err(|e| e.to_string())?;
        mean_err = mean_err.max(c.mean_rel_error());
        var_err = var_err.max(c.variance_rel_error());
    }
    let detail = format!(
        "4 layers x 1e5 samples, mean error {mean_err:.2e}, variance error {var_err:.2e}"
    );
    if mean_err > 0.05 || var_err > 0.05 {
        return Err(detail);
    }
    within(started, Duration::from_secs(120), detail)
}

fn ctc() -> Outcome {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut check = |frames: usize, classes: usize, lp: &[f64], target: &[usize]| -> Result<(), String> {
        let blank = classes - 1;
        let (fast, _) =
            ctc_forward_backward(lp, frames, classes, target, blank).map_err(|e| e.to_string())?;
        let slow = ctc_brute_force(lp, frames, classes, target, blank);
        worst = worst.max((fast - slow).abs());
        count += 1;
        Ok(())
    };
    for (frames, classes, lp, target) in ctc_instances(200, 31) {
        check(frames, classes, &lp, &target)?;
    }
    // Every (T, vocab, U) combination at least once.
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for frames in 1..=6 {
        for classes in 2..=4usize {
            for u in 0..=3usize {
                let target: Vec<usize> = (0..u).map(|_| rng.random_range(0..classes - 1)).collect();
                if bayes_transformer::losses::ctc_min_frames(&target) > frames {
                    continue;
                }
                let lp: Vec<f64> = (0..frames)
                    .flat_map(|_| {
                        let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
                        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
                        logits.into_iter().map(move |l| l - lse)
                    })
                    .collect();
                check(frames, classes, &lp, &target)?;
            }
        }
    }
    let detail = format!("{count} instances, worst absolute log-domain error {worst:.2e}");
    if worst > 1e-10 {
        return Err(detail);
    }
    within(started, Duration::from_secs(60), detail)
}

fn beam() -> Outcome {
    let started = Instant::now();
    let mut mismatches = 0;
    let mut violations = Vec::new();
    for i in 0..50u64 {
        let (mut scorer, spec) = toy_beam_problem(500 + i);
        let full = scorer.vocab.pow(spec.max_len as u32);
        let beam = beam_search(&mut scorer, &spec, full, false).map_err(|e| e.to_string())?;
        let exact = exhaustive_search(&mut scorer, &spec).map_err(|e| e.to_string())?;
        if beam != exact {
            mismatches += 1;
        }
        let mut prev = f64::NEG_INFINITY;
        for w in 1..=8 {
            let d = beam_search(&mut scorer, &spec, w, false).map_err(|e| e.to_string())?;
            if d.log_prob < prev {
                violations.push(format!(
                    "instance {i}: width {} {prev:.4} > width {w} {:.4}",
                    w - 1,
                    d.log_prob
                ));
            }
            prev = d.log_prob;
        }
    }
    let detail = format!(
        "50 toy models: {mismatches} exhaustive mismatches, {} width-monotonicity violations{}",
        violations.len(),
        if violations.is_empty() {
            String::new()
        } else {
            format!(" ({})", violations.join(", "))
        }
    );
    if mismatches > 0 || !violations.is_empty() {
        return Err(detail);
    }
    within(started, Duration::from_secs(60), detail)
}

/// `2^(n−e) / (2^n − e)` in exact integer arithmetic, converted once.
fn printed_weight(e: u32, n: u32) -> f64 {
    (1u64 << (n - e)) as f64 / ((1u64 << n) - e as u64) as f64
}

fn schedule(epochs: &[EpochRecord], config: &TrainConfig) -> Outcome {
    let started = Instant::now();
    let mut bad = Vec::new();
    for n in 0..=20 {
        for e in 0..=n {
            let w = minibatch_weight(e, n, KlWeightForm::Printed).map_err(|e| e.to_string())?;
            if w.to_bits() != printed_weight(e, n).to_bits() {
                bad.push(format!("w({e},{n})"));
            }
        }
        if minibatch_weight(0, n, KlWeightForm::Printed).ok() != Some(1.0) {
            bad.push(format!("w(0,{n}) != 1"));
        }
    }
    let d = config.schedule_divisor;
    let n_e = config.epochs / d;
    for r in epochs {
        if r.kl_weight.to_bits() != printed_weight(r.epoch / d, n_e).to_bits() {
            bad.push(format!("logged epoch {}", r.epoch));
        }
    }
    let detail = format!(
        "231 (e, n_e) pairs and {} logged epochs checked bit-exactly, {} mismatches",
        epochs.len(),
        bad.len()
    );
    if epochs.len() != config.epochs as usize || !bad.is_empty() {
        return Err(format!("{detail}: {}", bad.join(", ")));
    }
    within(started, Duration::from_secs(60), detail)
}

struct ReferenceRun {
    config: TrainConfig,
    epochs: Vec<EpochRecord>,
    steps: Vec<StepRecord>,
    cer: f64,
    wer: f64,
    elapsed: Duration,
}

fn reference_run() -> Result<ReferenceRun, String> {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = TrainConfig::default();
    let train = train_set(&config).map_err(|e| e.to_string())?;
    let eval = eval_set(&config).map_err(|e| e.to_string())?;
    let vocab = config.synth.vocab().map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    {
        let mut sink = MetricsSink::open(dir.path(), false).map_err(|e| e.to_string())?;
        trainer
            .run(&train, None, Some(&mut sink))
            .map_err(|e| e.to_string())?;
        sink.flush().map_err(|e| e.to_string())?;
    }
    let report = evaluate(
        &trainer.model,
        &trainer.store,
        &vocab,
        &eval,
        &EvalOptions::from_config(&config),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    Ok(ReferenceRun {
        epochs: read_jsonl(&dir.path().join(EPOCHS_JSONL)).map_err(|e| e.to_string())?,
        steps: read_jsonl(&dir.path().join(STEPS_JSONL)).map_err(|e| e.to_string())?,
        config,
        cer: report.cer,
        wer: report.wer,
        elapsed,
    })
}

fn learning(run: &ReferenceRun) -> Outcome {
    let totals: Vec<f64> = run.epochs.iter().take(5).map(|r| r.total).collect();
    let decreasing = totals.len() == 5 && totals.windows(2).all(|w| w[1] < w[0]);
    let detail = format!(
        "{} epochs, held-out CER {:.4} WER {:.4} over {} utterances, wall {:.0}s, first-5 totals {}",
        run.epochs.len(),
        run.cer,
        run.wer,
        run.config.eval_samples,
        run.elapsed.as_secs_f64(),
        totals
            .iter()
            .map(|t| format!("{t:.1}"))
            .collect::<Vec<_>>()
            .join(" > ")
    );
    if run.cer < 0.10
        && decreasing
        && run.epochs.len() <= 30
        && run.elapsed < Duration::from_secs(20 * 60)
    {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn joint_loss(run: &ReferenceRun) -> Outcome {
    let w = JointWeights::default();
    let mut worst: f64 = 0.0;
    for s in &run.steps {
        let recomputed = s.kl_weight * s.kl_raw + 0.3 * s.ctc + 0.7 * s.ce;
        worst = worst.max((s.total - recomputed).abs());
    }
    let detail = format!(
        "{} steps, weights ({}, {}), worst |total - recomputed| {worst:.1e}",
        run.steps.len(),
        w.ctc,
        w.ce
    );
    if run.steps.is_empty() || worst > 1e-12 || (w.ctc, w.ce) != (0.3, 0.7) {
        Err(detail)
    } else {
        Ok(detail)
    }
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig {
        epochs: 10,
        batch_size: 4,
        seed: 5,
        synth: SynthConfig {
            num_samples: 12,
            feature_dim: 8,
            content_tokens: 3,
            max_tokens: 3,
            ..SynthConfig::default()
        },
        ..TrainConfig::default()
    };
    c.model = tiny_model_config();
    c.model.max_source_len = 64;
    c.model.max_target_len = 32;
    c.model.vocab_size = c.synth.content_tokens + 4;
    c
}

fn steps_of(trainer: &mut Trainer, data: &bayes_transformer::data::Dataset, epochs: u32) -> Result<Vec<u8>, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    {
        let mut sink = MetricsSink::open(dir.path(), false).map_err(|e| e.to_string())?;
        trainer
            .run(data, Some(epochs), Some(&mut sink))
            .map_err(|e| e.to_string())?;
        sink.flush().map_err(|e| e.to_string())?;
    }
    std::fs::read(dir.path().join(STEPS_JSONL)).map_err(|e| e.to_string())
}

fn determinism() -> Outcome {
    let config = small_config();
    let (data, _) = generate_synthetic(&config.synth, config.seed).map_err(|e| e.to_string())?;

    let mut a = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    let steps_a = steps_of(&mut a, &data, 10)?;
    let mut b = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    let steps_b = steps_of(&mut b, &data, 10)?;
    let reproducible = steps_a == steps_b && a.checkpoint().encode() == b.checkpoint().encode();

    let mut first = Trainer::new(config.clone()).map_err(|e| e.to_string())?;
    let mut steps_c = steps_of(&mut first, &data, 5)?;
    let bytes = first.checkpoint().encode();
    drop(first);
    let restored = Checkpoint::decode(&bytes).map_err(|e| e.to_string())?;
    let mut second = Trainer::resume(config, restored).map_err(|e| e.to_string())?;
    steps_c.extend(steps_of(&mut second, &data, 5)?);
    let resumed = steps_c == steps_a && second.checkpoint().encode() == a.checkpoint().encode();

    let detail = format!(
        "two seeded 10-epoch runs identical: {reproducible}; 5 + checkpoint + 5 identical to 10 straight: {resumed}"
    );
    if reproducible && resumed {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    let t = Instant::now();
    report.record(1, "gradient oracle", t, gradients());
    let t = Instant::now();
    report.record(2, "KL oracle", t, kl());
    let t = Instant::now();
    report.record(3, "LRT equivalence", t, lrt());
    let t = Instant::now();
    report.record(4, "CTC oracle", t, ctc());
    let t = Instant::now();
    report.record(5, "beam oracle", t, beam());

    let t = Instant::now();
    match reference_run() {
        Ok(run) => {
            let t6 = Instant::now();
            report.record(6, "schedule fidelity", t6, schedule(&run.epochs, &run.config));
            report.record(7, "learning demonstration", t, learning(&run));
            let t8 = Instant::now();
            report.record(8, "joint-loss weighting", t8, joint_loss(&run));
        }
        Err(e) => {
            for (id, name) in [
                (6, "schedule fidelity"),
                (7, "learning demonstration"),
                (8, "joint-loss weighting"),
            ] {
                report.record(id, name, t, Err(format!("reference run failed: {e}")));
            }
        }
    }
    let t = Instant::now();
    report.record(9, "determinism and resume", t, determinism());

    println!(
        "acceptance: {} of 9 criteria passed",
        9 - report.failures
    );
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
