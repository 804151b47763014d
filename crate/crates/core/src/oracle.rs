//! Independent reference computations used to check the fast paths.
//!
//! Finite differences for gradients, Monte-Carlo estimates for the KL and the
//! local reparameterization trick, brute-force path enumeration for CTC and
//! exhaustive search for beam decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bayes::{
    kl_gaussian, GaussianPrior, GaussianVariationalLayer, KlAccumulator, KlMode, Noise,
};
use crate::decode::{DecodeSpec, Decoded, StepScorer};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::losses::{cross_entropy, ctc_loss, total_loss, JointWeights};
use crate::model::{Model, ModelConfig, Pass};
use crate::train::batch_data_losses;
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Step of the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`], so that two near-zero values compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Uniform on [−2, 2], kept away from 0 so kinks are never straddled.
    Symmetric,
    /// Uniform on [0.1, 2].
    Positive,
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable operation with fixed input shapes.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    build: Build,
}

impl OpCase {
    pub fn new(
        name: &'static str,
        inputs: Vec<(Vec<usize>, Domain)>,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        self.inputs
            .iter()
            .map(|(shape, domain)| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| match domain {
                        Domain::Symmetric => loop {
                            let v: f64 = rng.random_range(-2.0..2.0);
                            if v.abs() > 1e-3 {
                                break v;
                            }
                        },
                        Domain::Positive => rng.random_range(0.1..2.0),
                    })
                    .collect();
                Tensor::new(shape.clone(), data).expect("valid shape")
            })
            .collect()
    }
}

fn output_len(case: &OpCase, inputs: &[Tensor]) -> Result<usize> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    Ok(g.value(out).numel())
}

/// `Σ op(inputs) ∘ r` and its gradient with respect to every input.
fn weighted_output(case: &OpCase, inputs: &[Tensor], r: &[f64]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let w = g.constant(Tensor::new(g.shape(out).to_vec(), r.to_vec())?);
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
        .collect();
    Ok((value, per_input))
}

/// Outcome of a gradient check over many random trials.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
}

/// Compares reverse-mode and central-difference gradients of `case` on `trials` random inputs.
pub fn gradcheck_case(case: &OpCase, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inputs = case.sample(&mut rng);
        let weights: Vec<f64> = (0..output_len(case, &inputs)?)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (_, analytic) = weighted_output(case, &inputs, &weights)?;
        for k in 0..inputs.len() {
            let numeric = numeric_gradient(
                |x| {
                    let mut perturbed = inputs.clone();
                    perturbed[k] = Tensor::new(inputs[k].shape().to_vec(), x.to_vec()).unwrap();
                    weighted_output(case, &perturbed, &weights)
                        .map(|(v, _)| v)
                        .unwrap_or(f64::NAN)
                },
                inputs[k].data(),
                FD_STEP,
            );
            for (a, n) in analytic[k].iter().zip(&numeric) {
                let e = relative_error(*a, *n);
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
            }
        }
    }
    Ok(GradCheckReport {
        name: case.name.to_string(),
        trials,
        max_rel_error: worst,
    })
}

/// Every differentiable primitive, each with small fixed shapes.
pub fn op_cases() -> Vec<OpCase> {
    use Domain::{Positive as P, Symmetric as S};
    let v = |s: &[usize], d: Domain| (s.to_vec(), d);
    vec![
        OpCase::new("matmul", vec![v(&[3, 4], S), v(&[4, 2], S)], |g, x| g.matmul(x[0], x[1])),
        OpCase::new("matmul_nt", vec![v(&[3, 4], S), v(&[2, 4], S)], |g, x| g.matmul_nt(x[0], x[1])),
        OpCase::new("transpose", vec![v(&[3, 2], S)], |g, x| g.transpose(x[0])),
        OpCase::new("add", vec![v(&[2, 3], S), v(&[2, 3], S)], |g, x| g.add(x[0], x[1])),
        OpCase::new("add_row", vec![v(&[3, 4], S), v(&[4], S)], |g, x| g.add_row(x[0], x[1])),
        OpCase::new("sub", vec![v(&[2, 3], S), v(&[2, 3], S)], |g, x| g.sub(x[0], x[1])),
        OpCase::new("mul", vec![v(&[2, 3], S), v(&[2, 3], S)], |g, x| g.mul(x[0], x[1])),
        OpCase::new("scale", vec![v(&[2, 3], S)], |g, x| Ok(g.scale(x[0], -1.7))),
        OpCase::new("add_scalar", vec![v(&[2, 3], S)], |g, x| Ok(g.add_scalar(x[0], 0.3))),
        OpCase::new("relu", vec![v(&[3, 4], S)], |g, x| Ok(g.relu(x[0]))),
        OpCase::new("softplus", vec![v(&[3, 4], S)], |g, x| Ok(g.softplus(x[0]))),
        OpCase::new("log", vec![v(&[3, 4], P)], |g, x| g.log(x[0])),
        OpCase::new("exp", vec![v(&[3, 4], S)], |g, x| Ok(g.exp(x[0]))),
        OpCase::new("sqrt", vec![v(&[3, 4], P)], |g, x| g.sqrt(x[0])),
        OpCase::new("sum", vec![v(&[2, 3], S)], |g, x| Ok(g.sum(x[0]))),
        OpCase::new("softmax", vec![v(&[3, 5], S)], |g, x| Ok(g.softmax(x[0]))),
        OpCase::new("log_softmax", vec![v(&[3, 5], S)], |g, x| Ok(g.log_softmax(x[0]))),
        OpCase::new(
            "layer_norm",
            vec![v(&[3, 4], S), v(&[4], S), v(&[4], S)],
            |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5),
        ),
        OpCase::new("reshape", vec![v(&[2, 3], S)], |g, x| g.reshape(x[0], &[3, 2])),
        OpCase::new("slice_rows", vec![v(&[4, 3], S)], |g, x| g.slice_rows(x[0], 1, 2)),
        OpCase::new("concat_rows", vec![v(&[2, 3], S), v(&[1, 3], S)], |g, x| {
            g.concat_rows(&[x[0], x[1]])
        }),
        OpCase::new("slice_cols", vec![v(&[3, 4], S)], |g, x| g.slice_cols(x[0], 1, 2)),
        OpCase::new("concat_cols", vec![v(&[2, 2], S), v(&[2, 3], S)], |g, x| {
            g.concat_cols(&[x[0], x[1]])
        }),
        OpCase::new("gather_rows", vec![v(&[4, 3], S)], |g, x| g.gather_rows(x[0], &[2, 0, 2])),
        OpCase::new("pick", vec![v(&[3, 4], S)], |g, x| g.pick(x[0], &[1, 3, 0])),
        OpCase::new(
            "conv2d_3x3",
            vec![v(&[2, 4, 5], S), v(&[3, 2, 3, 3], S), v(&[3], S)],
            |g, x| g.conv2d_3x3(x[0], x[1], x[2]),
        ),
        OpCase::new("avg_pool2", vec![v(&[2, 5, 6], S)], |g, x| g.avg_pool2(x[0])),
        OpCase::new("channels_to_frames", vec![v(&[2, 3, 4], S)], |g, x| g.channels_to_frames(x[0])),
        OpCase::new("kl_standard", vec![v(&[5], S), v(&[5], P)], |g, x| {
            kl_gaussian(g, x[0], x[1], GaussianPrior { mu: 0.2, sigma: 0.7 }, KlMode::Standard)
        }),
        OpCase::new("kl_paper_verbatim", vec![v(&[5], S), v(&[5], P)], |g, x| {
            kl_gaussian(g, x[0], x[1], GaussianPrior { mu: 0.2, sigma: 0.7 }, KlMode::PaperVerbatim)
        }),
        OpCase::new("ctc_loss", vec![v(&[5, 4], S)], |g, x| {
            let lp = g.log_softmax(x[0]);
            ctc_loss(g, lp, &[0, 1], 3)
        }),
        OpCase::new("ctc_loss_repeat", vec![v(&[6, 3], S)], |g, x| {
            let lp = g.log_softmax(x[0]);
            ctc_loss(g, lp, &[1, 1], 2)
        }),
        OpCase::new("cross_entropy", vec![v(&[4, 5], S)], |g, x| {
            cross_entropy(g, x[0], &[1, 4, 0, 2], &[true, true, false, true])
        }),
    ]
}

/// Directional-derivative check of a scalar function of every parameter in `store`.
///
/// Each trial draws a random unit direction `v` and compares `∇f·v` with
/// `(f(θ + hv) − f(θ − hv)) / 2h`.
pub fn gradcheck_params(
    store: &ParamStore,
    f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>,
    trials: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let out = f(&mut g, &bound)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let out = f(&mut g, &bound)?;
    let grads = g.backward(out)?;
    let mut tmp = store.clone();
    tmp.store_grads(&bound, &grads);
    let grad: Vec<f64> = tmp.iter().flat_map(|(_, t)| t.grad().unwrap().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut dir: Vec<f64> = (0..grad.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);
        let shifted = |sign: f64| -> ParamStore {
            let mut s = store.clone();
            let mut k = 0;
            let ids: Vec<_> = s.ids().collect();
            for id in ids {
                for w in s.get_mut(id).data_mut() {
                    *w += sign * FD_STEP * dir[k];
                    k += 1;
                }
            }
            s
        };
        let numeric = (eval(&shifted(1.0))? - eval(&shifted(-1.0))?) / (2.0 * FD_STEP);
        let analytic: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(GradCheckReport {
        name: "parameters".into(),
        trials,
        max_rel_error: worst,
    })
}

/// Small model used by the end-to-end gradient check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_ff: 16,
        n_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        vocab_size: 7,
        feature_dim: 8,
        max_target_len: 16,
        max_source_len: 16,
        conv_channels: 2,
        ..ModelConfig::desk()
    }
}

/// Full objective (`w·KL + 0.3·CTC + 0.7·CE`) of a tiny model on two fixed
/// utterances, with `ε` redrawn from the same seed on every evaluation.
pub fn end_to_end_gradcheck(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::init(tiny_model_config(), &mut store, &mut rng)?;
    let features: Vec<Tensor> = [12, 20]
        .iter()
        .map(|&t| {
            let data = (0..t * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            Tensor::matrix(t, 8, data)
        })
        .collect::<Result<_>>()?;
    let targets: [&[usize]; 2] = [&[3, 4], &[5, 5, 3]];
    let objective = |g: &mut Graph, bound: &Bound| -> Result<Var> {
        let mut eps_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe5);
        let mut pass = Pass {
            graph: g,
            params: bound.clone(),
            noise: Noise::Gaussian(&mut eps_rng),
            kl: KlAccumulator::new(),
            kl_mode: KlMode::Standard,
        };
        let feats: Vec<&Tensor> = features.iter().collect();
        let (ctc, ce) = batch_data_losses(&model, &mut pass, &feats, &targets)?;
        let (loss, _) = total_loss(pass.graph, &pass.kl, ctc, ce, 0.5, JointWeights::default())?;
        Ok(loss)
    };
    let mut report = gradcheck_params(&store, &objective, trials, seed)?;
    report.name = "end_to_end".into();
    Ok(report)
}

/// Monte-Carlo estimate of `E_q[log q(w) − log p(w)]` for one element, with its standard error.
pub fn kl_monte_carlo(
    mu_q: f64,
    sigma_q: f64,
    prior: GaussianPrior,
    samples: usize,
    rng: &mut impl Rng,
) -> (f64, f64) {
    let log_normal = |w: f64, mu: f64, sigma: f64| {
        let z = (w - mu) / sigma;
        -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let eps: f64 = rng.sample(StandardNormal);
        let w = mu_q + sigma_q * eps;
        let d = log_normal(w, mu_q, sigma_q) - log_normal(w, prior.mu, prior.sigma);
        sum += d;
        sum2 += d * d;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum2 / n - mean * mean).max(0.0);
    (mean, (var / n).sqrt())
}

/// One KL setting checked against its Monte-Carlo estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct KlCheck {
    pub mu_q: f64,
    pub sigma_q: f64,
    pub prior: GaussianPrior,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub std_error: f64,
    pub rel_error: f64,
}

/// Compares a closed-form per-element KL against Monte-Carlo estimates on random settings.
///
/// Half the settings use the weight prior scale, half the bias prior scale.
pub fn kl_oracle(
    kl: &dyn Fn(f64, f64, GaussianPrior) -> f64,
    settings: usize,
    samples: usize,
    seed: u64,
) -> Vec<KlCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..settings)
        .map(|i| {
            let prior = if i % 2 == 0 {
                crate::bayes::WEIGHT_PRIOR
            } else {
                crate::bayes::BIAS_PRIOR
            };
            let s = prior.sigma;
            let mu_q = prior.mu + s * rng.random_range(-2.0..2.0);
            let sigma_q = s * rng.random_range(0.2..2.5);
            let closed_form = kl(mu_q, sigma_q, prior);
            let (monte_carlo, std_error) = kl_monte_carlo(mu_q, sigma_q, prior, samples, &mut rng);
            KlCheck {
                mu_q,
                sigma_q,
                prior,
                closed_form,
                monte_carlo,
                std_error,
                rel_error: (closed_form - monte_carlo).abs() / monte_carlo.abs(),
            }
        })
        .collect()
}

/// Per-activation output moments of a single Gaussian variational layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LrtCheck {
    /// Analytic `γ` and `δ`.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub lrt_mean: Vec<f64>,
    pub lrt_variance: Vec<f64>,
    pub weight_space_mean: Vec<f64>,
    pub weight_space_variance: Vec<f64>,
}

impl LrtCheck {
    /// Largest `|m_lrt − m_ws| / max(|m_ws|, sd)`, so outputs with near-zero
    /// mean are measured against their spread.
    pub fn mean_rel_error(&self) -> f64 {
        self.lrt_mean
            .iter()
            .zip(&self.weight_space_mean)
            .zip(&self.variance)
            .map(|((a, b), v)| (a - b).abs() / b.abs().max(v.sqrt()))
            .fold(0.0, f64::max)
    }

    pub fn variance_rel_error(&self) -> f64 {
        self.lrt_variance
            .iter()
            .zip(&self.weight_space_variance)
            .map(|(a, b)| (a - b).abs() / b.abs())
            .fold(0.0, f64::max)
    }
}

fn moments(samples: &[f64], n: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    for row in samples.chunks(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    for row in samples.chunks(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    (mean, var)
}

/// A random layer with moderate `σ` and a random input row.
pub fn random_layer(
    d_in: usize,
    d_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamStore, GaussianVariationalLayer, Vec<f64>)> {
    let mut store = ParamStore::new();
    let layer = GaussianVariationalLayer::init(&mut store, "layer", d_in, d_out, rng)?;
    for (id, lo, hi) in [
        (layer.w_mu, -1.0, 1.0),
        (layer.b_mu, -1.0, 1.0),
        (layer.w_rho, -2.0, 0.0),
        (layer.b_rho, -2.0, 0.0),
    ] {
        for w in store.get_mut(id).data_mut() {
            *w = rng.random_range(lo..hi);
        }
    }
    let x = (0..d_in).map(|_| rng.random_range(-2.0..2.0)).collect();
    Ok((store, layer, x))
}

/// Samples one input row through the LRT forward pass and through explicit
/// weight-space sampling (`W = W_μ + W_σ∘ε_w`), `samples` times each.
pub fn lrt_oracle(
    store: &ParamStore,
    layer: &GaussianVariationalLayer,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<LrtCheck> {
    let (d_in, d_out) = (layer.d_in, layer.d_out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let rows: Vec<f64> = x.iter().copied().cycle().take(samples * d_in).collect();
    let xs = g.constant(Tensor::matrix(samples, d_in, rows)?);
    let mut kl = KlAccumulator::new();
    let out = layer.forward_lrt(
        &mut g,
        &bound,
        xs,
        &mut Noise::Gaussian(&mut rng),
        &mut kl,
        KlMode::Standard,
    )?;
    let (lrt_mean, lrt_variance) = moments(g.value(out).data(), samples, d_out);

    let w_mu = store.get(layer.w_mu).data();
    let b_mu = store.get(layer.b_mu).data();
    let w_sigma = crate::bayes::sigma_from_rho(store.get(layer.w_rho));
    let b_sigma = crate::bayes::sigma_from_rho(store.get(layer.b_rho));
    let (w_sigma, b_sigma) = (w_sigma.data(), b_sigma.data());

    let mean: Vec<f64> = (0..d_out)
        .map(|o| (0..d_in).map(|i| x[i] * w_mu[o * d_in + i]).sum::<f64>() + b_mu[o])
        .collect();
    let variance: Vec<f64> = (0..d_out)
        .map(|o| {
            (0..d_in)
                .map(|i| x[i] * x[i] * w_sigma[o * d_in + i].powi(2))
                .sum::<f64>()
                + b_sigma[o].powi(2)
        })
        .collect();

    let mut ws = Vec::with_capacity(samples * d_out);
    for _ in 0..samples {
        for o in 0..d_out {
            let mut y = b_mu[o] + b_sigma[o] * rng.sample::<f64, _>(StandardNormal);
            for i in 0..d_in {
                let w = w_mu[o * d_in + i] + w_sigma[o * d_in + i] * rng.sample::<f64, _>(StandardNormal);
                y += w * x[i];
            }
            ws.push(y);
        }
    }
    let (weight_space_mean, weight_space_variance) = moments(&ws, samples, d_out);
    Ok(LrtCheck {
        mean,
        variance,
        lrt_mean,
        lrt_variance,
        weight_space_mean,
        weight_space_variance,
    })
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// CTC negative log-likelihood by enumerating all `classes^frames` label paths.
pub fn ctc_brute_force(log_probs: &[f64], frames: usize, classes: usize, target: &[usize], blank: usize) -> f64 {
    let mut total = f64::NEG_INFINITY;
    let mut path = vec![0usize; frames];
    loop {
        let mut collapsed = Vec::with_capacity(frames);
        let mut prev = None;
        for &c in &path {
            if Some(c) != prev && c != blank {
                collapsed.push(c);
            }
            prev = Some(c);
        }
        if collapsed == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &c)| log_probs[t * classes + c])
                .sum();
            total = log_sum_exp(total, lp);
        }
        // Odometer increment.
        let mut k = frames;
        loop {
            if k == 0 {
                return -total;
            }
            k -= 1;
            path[k] += 1;
            if path[k] < classes {
                break;
            }
            path[k] = 0;
        }
    }
}

/// Deterministic toy decoder: next-token log-probabilities are a random
/// function of the whole prefix.
#[derive(Clone, Debug)]
pub struct RandomTreeScorer {
    pub vocab: usize,
    pub seed: u64,
    /// Standard deviation of the logits.
    pub spread: f64,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RandomTreeScorer {
    pub fn row(&self, prefix: &[usize]) -> Vec<f64> {
        let key = prefix
            .iter()
            .fold(splitmix(self.seed), |h, &t| splitmix(h ^ (t as u64 + 1)));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| self.spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        logits.iter().map(|l| l - lse).collect()
    }
}

impl StepScorer for RandomTreeScorer {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

/// Best finished sequence over every allowed continuation up to `spec.max_len`.
///
/// Ties go to the lexicographically smaller sequence. Falls back to the best
/// unfinished sequence of full length when nothing can finish.
pub fn exhaustive_search(scorer: &mut dyn StepScorer, spec: &DecodeSpec) -> Result<Decoded> {
    fn better(a: &(Vec<usize>, f64), b: &Option<(Vec<usize>, f64)>) -> bool {
        match b {
            None => true,
            Some((bt, bl)) => a.1 > *bl || (a.1 == *bl && a.0 < *bt),
        }
    }
    let mut best_finished: Option<(Vec<usize>, f64)> = None;
    let mut best_open: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(vec![spec.sos], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = scorer.next_log_probs(std::slice::from_ref(&prefix))?.remove(0);
        for (tok, &l) in row.iter().enumerate() {
            if spec.forbidden.contains(&tok) {
                continue;
            }
            let mut next = prefix.clone();
            next.push(tok);
            let cand = (next, lp + l);
            let generated = cand.0.len() - 1;
            if tok == spec.eos {
                if better(&cand, &best_finished) {
                    best_finished = Some(cand);
                }
            } else if generated == spec.max_len {
                if better(&cand, &best_open) {
                    best_open = Some(cand);
                }
            } else {
                stack.push(cand);
            }
        }
    }
    let (tokens, log_prob, finished) = match (best_finished, best_open) {
        (Some((t, l)), _) => (t, l, true),
        (None, Some((t, l))) => (t, l, false),
        (None, None) => (vec![spec.sos], 0.0, false),
    };
    let mut out = tokens[1..].to_vec();
    if finished {
        out.pop();
    }
    Ok(Decoded {
        tokens: out,
        log_prob,
        truncated: !finished,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let g = numeric_gradient(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn brute_force_ctc_two_frames() {
        // T=2, target [a]: paths aa, a-, -a.
        let p: [[f64; 2]; 2] = [[0.6, 0.4], [0.3, 0.7]];
        let lp: Vec<f64> = p.iter().flatten().map(|v| v.ln()).collect();
        let expected = -(0.6 * 0.3 + 0.6 * 0.7 + 0.4 * 0.3f64).ln();
        assert!((ctc_brute_force(&lp, 2, 2, &[0], 1) - expected).abs() < 1e-14);
    }

    #[test]
    fn random_tree_rows_are_normalized_and_stable() {
        let s = RandomTreeScorer { vocab: 5, seed: 3, spread: 1.0 };
        let r = s.row(&[0, 2]);
        assert!((r.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r, s.row(&[0, 2]));
        assert_ne!(r, s.row(&[0, 3]));
    }
}
