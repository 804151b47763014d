//! Gaussian variational linear layer trained with the local
//! reparameterization trick.
//!
//! Each weight and bias has a mean `μ` and an unconstrained scale `ρ`,
//! with standard deviation `σ = softplus(ρ)`. Instead of sampling a
//! weight matrix, the forward pass propagates the first two moments of the
//! pre-activations and samples those directly:
//!
//! ```text
//! γ = x·W_μᵀ + b_μ
//! δ = (x∘x)·(W_σ∘W_σ)ᵀ + b_σ∘b_σ
//! y = γ + √δ ∘ ε,   ε ~ N(0, 1) per output element
//! ```
//!
//! Every sampled forward adds the closed-form KL divergence of the
//! weight and bias posteriors from their fixed priors to a [`KlAccumulator`].

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softplus_scalar, Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fixed Gaussian prior `N(mu, sigma²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPrior {
    pub mu: f64,
    pub sigma: f64,
}

pub const WEIGHT_PRIOR: GaussianPrior = GaussianPrior { mu: 0.0, sigma: 1.0 };
pub const BIAS_PRIOR: GaussianPrior = GaussianPrior { mu: 0.0, sigma: 0.1 };

/// Initial value of every `ρ`; softplus(-5) ≈ 0.0067.
pub const RHO_INIT: f64 = -5.0;

/// Which closed form of the Gaussian KL divergence to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMode {
    /// `Σ log(σp/σq) + (σq² + (μq−μp)²)/(2σp²) − ½`; non-negative, zero iff q = p.
    #[default]
    Standard,
    /// `½ Σ 2 log(σp/σq) − (1 + (σp/σq)²) + ((μp−μq)/σp)²`, evaluated as written.
    /// Equals −1 per element when q = p, so it is not a divergence.
    PaperVerbatim,
}

/// Source of the per-activation noise `ε`.
pub enum Noise<'a> {
    /// Posterior-mean pass: no sampling and no KL.
    Off,
    Gaussian(&'a mut dyn RngCore),
}

impl Noise<'_> {
    pub fn is_off(&self) -> bool {
        matches!(self, Noise::Off)
    }

    pub(crate) fn draw(&mut self, n: usize) -> Option<Vec<f64>> {
        match self {
            Noise::Off => None,
            Noise::Gaussian(rng) => Some((0..n).map(|_| rng.sample(StandardNormal)).collect()),
        }
    }
}

/// `σ = log(1 + exp(ρ))`, elementwise, on plain values.
pub fn sigma_from_rho(rho: &Tensor) -> Tensor {
    let data = rho.data().iter().map(|&r| softplus_scalar(r)).collect();
    Tensor::new(rho.shape().to_vec(), data).expect("same shape")
}

/// Closed-form KL(q‖p) between a factorized Gaussian `q` and a shared scalar prior `p`,
/// summed over every element, recorded on `graph`.
pub fn kl_gaussian(
    graph: &mut Graph,
    mu_q: Var,
    sigma_q: Var,
    prior: GaussianPrior,
    mode: KlMode,
) -> Result<Var> {
    if !(prior.sigma > 0.0) {
        return Err(Error::Domain {
            op: "kl_gaussian",
            detail: format!("prior sigma {} must be positive", prior.sigma),
        });
    }
    if graph.shape(mu_q) != graph.shape(sigma_q) {
        return Err(Error::Shape {
            op: "kl_gaussian",
            lhs: graph.shape(mu_q).to_vec(),
            rhs: graph.shape(sigma_q).to_vec(),
        });
    }
    // Per element, with r = σq/σp and z = (μq−μp)/σp; summing only at the end
    // keeps KL(p‖p) at exactly 0.
    let inv_sp = 1.0 / prior.sigma;
    let r = graph.scale(sigma_q, inv_sp);
    let log_r = graph.log(r).map_err(|_| Error::Domain {
        op: "kl_gaussian",
        detail: "posterior sigma must be positive".into(),
    })?;
    let z = graph.add_scalar(mu_q, -prior.mu);
    let z = graph.scale(z, inv_sp);
    let z2 = graph.mul(z, z)?;
    let elems = match mode {
        KlMode::Standard => {
            // −log r + (r² + z²)/2 − 1/2
            let r2 = graph.mul(r, r)?;
            let quad = graph.add(r2, z2)?;
            let quad = graph.scale(quad, 0.5);
            let e = graph.sub(quad, log_r)?;
            graph.add_scalar(e, -0.5)
        }
        KlMode::PaperVerbatim => {
            // ½ (−2 log r − (1 + r⁻²) + z²), with r⁻² = exp(−2 log r)
            let m2 = graph.scale(log_r, -2.0);
            let inv_r2 = graph.exp(m2);
            let e = graph.sub(m2, inv_r2)?;
            let e = graph.add(e, z2)?;
            let e = graph.add_scalar(e, -1.0);
            graph.scale(e, 0.5)
        }
    };
    Ok(graph.sum(elems))
}

/// Evaluates [`kl_gaussian`] on plain values.
pub fn kl_gaussian_value(
    mu_q: &Tensor,
    sigma_q: &Tensor,
    prior: GaussianPrior,
    mode: KlMode,
) -> Result<f64> {
    let mut g = Graph::new();
    let mu = g.constant(mu_q.clone());
    let sigma = g.constant(sigma_q.clone());
    let kl = kl_gaussian(&mut g, mu, sigma, prior, mode)?;
    Ok(g.value(kl).item())
}

/// Running sum of the KL terms of every Bayesian layer in one forward pass.
#[derive(Debug, Default)]
pub struct KlAccumulator {
    total: Option<Var>,
    terms: usize,
}

impl KlAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.total = None;
        self.terms = 0;
    }

    pub fn add(&mut self, graph: &mut Graph, kl: Var) -> Result<()> {
        self.total = Some(match self.total {
            Some(t) => graph.add(t, kl)?,
            None => kl,
        });
        self.terms += 1;
        Ok(())
    }

    /// Number of layer contributions since the last reset.
    pub fn terms(&self) -> usize {
        self.terms
    }

    /// The accumulated KL node. Fails if nothing was added since the last reset.
    pub fn total(&self) -> Result<Var> {
        self.total.ok_or_else(|| {
            Error::Contract("KL accumulator is stale: no sampled forward since reset".into())
        })
    }

    pub fn value(&self, graph: &Graph) -> f64 {
        self.total.map_or(0.0, |t| graph.value(t).item())
    }
}

/// Handles to the four trainable tensors of a variational linear layer.
#[derive(Clone, Debug)]
pub struct GaussianVariationalLayer {
    pub w_mu: ParamId,
    pub w_rho: ParamId,
    pub b_mu: ParamId,
    pub b_rho: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub prior_w: GaussianPrior,
    pub prior_b: GaussianPrior,
}

impl GaussianVariationalLayer {
    /// Registers `<prefix>.w_mu`, `.w_rho`, `.b_mu` and `.b_rho` in `store`.
    ///
    /// `W_μ ~ U(−1/√d_in, 1/√d_in)`, `b_μ = 0`, every `ρ` = [`RHO_INIT`].
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w: Vec<f64> = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            w_mu: store.add(format!("{prefix}.w_mu"), Tensor::matrix(d_out, d_in, w)?)?,
            w_rho: store.add(
                format!("{prefix}.w_rho"),
                Tensor::filled(&[d_out, d_in], RHO_INIT),
            )?,
            b_mu: store.add(format!("{prefix}.b_mu"), Tensor::zeros(&[d_out]))?,
            b_rho: store.add(format!("{prefix}.b_rho"), Tensor::filled(&[d_out], RHO_INIT))?,
            d_in,
            d_out,
            prior_w: WEIGHT_PRIOR,
            prior_b: BIAS_PRIOR,
        })
    }

    fn check_input(&self, graph: &Graph, x: Var) -> Result<usize> {
        match *graph.shape(x) {
            [b, d] if d == self.d_in => Ok(b),
            _ => Err(Error::Shape {
                op: "bayes_linear",
                lhs: graph.shape(x).to_vec(),
                rhs: vec![self.d_out, self.d_in],
            }),
        }
    }

    /// KL of this layer's weight and bias posteriors from their priors.
    pub fn kl(&self, graph: &mut Graph, params: &Bound, mode: KlMode) -> Result<Var> {
        let w_sigma = graph.softplus(params.var(self.w_rho));
        let b_sigma = graph.softplus(params.var(self.b_rho));
        let kw = kl_gaussian(graph, params.var(self.w_mu), w_sigma, self.prior_w, mode)?;
        let kb = kl_gaussian(graph, params.var(self.b_mu), b_sigma, self.prior_b, mode)?;
        graph.add(kw, kb)
    }

    /// Sampled forward pass with one `ε` per output activation.
    ///
    /// With [`Noise::Off`] this falls back to [`Self::forward_deterministic`]
    /// and leaves `kl` untouched.
    pub fn forward_lrt(
        &self,
        graph: &mut Graph,
        params: &Bound,
        x: Var,
        noise: &mut Noise<'_>,
        kl: &mut KlAccumulator,
        mode: KlMode,
    ) -> Result<Var> {
        let batch = self.check_input(graph, x)?;
        let Some(eps) = noise.draw(batch * self.d_out) else {
            return self.forward_deterministic(graph, params, x);
        };
        let gamma = self.forward_deterministic(graph, params, x)?;

        let w_sigma = graph.softplus(params.var(self.w_rho));
        let b_sigma = graph.softplus(params.var(self.b_rho));
        let x2 = graph.mul(x, x)?;
        let w_var = graph.mul(w_sigma, w_sigma)?;
        let b_var = graph.mul(b_sigma, b_sigma)?;
        let delta = graph.matmul_nt(x2, w_var)?;
        let delta = graph.add_row(delta, b_var)?;
        let std = graph.sqrt(delta)?;
        let eps = graph.constant(Tensor::matrix(batch, self.d_out, eps)?);
        let noise_term = graph.mul(std, eps)?;
        let out = graph.add(gamma, noise_term)?;

        let kw = kl_gaussian(graph, params.var(self.w_mu), w_sigma, self.prior_w, mode)?;
        let kb = kl_gaussian(graph, params.var(self.b_mu), b_sigma, self.prior_b, mode)?;
        let layer_kl = graph.add(kw, kb)?;
        kl.add(graph, layer_kl)?;
        Ok(out)
    }

    /// Posterior-mean pass `x·W_μᵀ + b_μ`.
    pub fn forward_deterministic(&self, graph: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        self.check_input(graph, x)?;
        let y = graph.matmul_nt(x, params.var(self.w_mu))?;
        graph.add_row(y, params.var(self.b_mu))
    }
}
