//! Linear layers with Gaussian-distributed weights and biases.
//!
//! Each weight is parameterized as (mu, rho) with std sigma = softplus(rho),
//! sampled per forward pass via the reparameterization w = mu + sigma * eps,
//! eps ~ N(0,1). Keeping eps fixed makes the sampled weights a deterministic
//! function of (mu, rho), so the variational loss differentiates through both
//! the density terms and the network output.
//!
//! The variational objective per step is
//! `kl_scale * (sum log q(w|theta) - sum log p(w)) + nll`, with the density
//! sums estimated at the single drawn sample.

use rand::Rng;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::rng;
use crate::tape::{NodeId, Tape};

const HALF_LN_2PI: f64 = 0.9189385332046727;

/// Gaussian-weight linear layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesianLinear {
    pub mu_w: Matrix,
    pub rho_w: Matrix,
    pub mu_b: Matrix,
    pub rho_b: Matrix,
    pub prior_mean: f64,
    pub prior_std: f64,
}

/// Concrete weights drawn for one forward pass, with the eps draws retained.
#[derive(Debug, Clone)]
pub struct WeightSample {
    pub w: Matrix,
    pub b: Matrix,
    pub eps_w: Matrix,
    pub eps_b: Matrix,
}

/// Tape nodes for one sampled layer: parameter leaves, realized weights, and
/// the two density sums.
pub struct BayesLayerNodes {
    pub mu_w: NodeId,
    pub rho_w: NodeId,
    pub mu_b: NodeId,
    pub rho_b: NodeId,
    pub w: NodeId,
    pub b: NodeId,
    pub log_q: NodeId,
    pub log_p: NodeId,
}

impl BayesianLinear {
    /// Glorot-range means, rho = -5 (sigma ~ 6.7e-3) so the layer starts
    /// near-deterministic.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        BayesianLinear {
            mu_w: rng::random_matrix(rng, inputs, outputs, bound),
            rho_w: Matrix::zeros(inputs, outputs).map(|_| -5.0),
            mu_b: Matrix::zeros(1, outputs),
            rho_b: Matrix::zeros(1, outputs).map(|_| -5.0),
            prior_mean: 0.0,
            prior_std: 1.0,
        }
    }

    pub fn inputs(&self) -> usize {
        self.mu_w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.mu_w.cols()
    }

    pub fn num_weights(&self) -> usize {
        self.mu_w.data().len() + self.mu_b.data().len()
    }

    /// Draw w = mu + softplus(rho) * eps with fresh eps ~ N(0,1).
    pub fn sample(&self, rng: &mut impl Rng) -> WeightSample {
        let eps_w = rng::normal_matrix(rng, self.mu_w.rows(), self.mu_w.cols(), 1.0);
        let eps_b = rng::normal_matrix(rng, 1, self.mu_b.cols(), 1.0);
        self.sample_with_eps(eps_w, eps_b)
    }

    /// Realize the weights for given eps draws (eps = 0 yields exactly mu).
    pub fn sample_with_eps(&self, eps_w: Matrix, eps_b: Matrix) -> WeightSample {
        let w = self
            .mu_w
            .add(&self.rho_w.softplus().hadamard(&eps_w).expect("shape"))
            .expect("shape");
        let b = self
            .mu_b
            .add(&self.rho_b.softplus().hadamard(&eps_b).expect("shape"))
            .expect("shape");
        WeightSample { w, b, eps_w, eps_b }
    }

    /// Sum over weights and biases of log N(w; mu, sigma^2).
    pub fn log_q(&self, sample: &WeightSample) -> f64 {
        gaussian_log_density_sum(&sample.w, &self.mu_w, &self.rho_w.softplus())
            + gaussian_log_density_sum(&sample.b, &self.mu_b, &self.rho_b.softplus())
    }

    /// Sum over weights and biases of log N(w; prior_mean, prior_std^2).
    pub fn log_p(&self, sample: &WeightSample) -> f64 {
        let n = self.num_weights() as f64;
        let inv_two_var = 1.0 / (2.0 * self.prior_std * self.prior_std);
        let dev_sq: f64 = sample
            .w
            .data()
            .iter()
            .chain(sample.b.data())
            .map(|&w| (w - self.prior_mean) * (w - self.prior_mean))
            .sum();
        -n * (HALF_LN_2PI + self.prior_std.ln()) - dev_sq * inv_two_var
    }

    /// Record the layer on a tape: parameter leaves, reparameterized weights
    /// for the given eps draws, and in-graph log q / log p sums. Values match
    /// [`Self::log_q`]/[`Self::log_p`] at the same sample; gradients flow to
    /// mu and rho through both the densities and the realized weights.
    pub fn build_graph(&self, tape: &Tape, eps_w: Matrix, eps_b: Matrix) -> Result<BayesLayerNodes> {
        let mu_w = tape.leaf(self.mu_w.clone());
        let rho_w = tape.leaf(self.rho_w.clone());
        let mu_b = tape.leaf(self.mu_b.clone());
        let rho_b = tape.leaf(self.rho_b.clone());

        let (w, logq_w) = build_sampled(tape, mu_w, rho_w, eps_w)?;
        let (b, logq_b) = build_sampled(tape, mu_b, rho_b, eps_b)?;
        let log_q = tape.add(logq_w, logq_b)?;

        let logp_w = build_prior(tape, w, self.prior_mean, self.prior_std)?;
        let logp_b = build_prior(tape, b, self.prior_mean, self.prior_std)?;
        let log_p = tape.add(logp_w, logp_b)?;

        Ok(BayesLayerNodes {
            mu_w,
            rho_w,
            mu_b,
            rho_b,
            w,
            b,
            log_q,
            log_p,
        })
    }
}

/// w = mu + softplus(rho) * eps plus the in-graph log q sum for (w, mu, rho).
fn build_sampled(tape: &Tape, mu: NodeId, rho: NodeId, eps: Matrix) -> Result<(NodeId, NodeId)> {
    let count = eps.data().len() as f64;
    let eps = tape.constant(eps);
    let sigma = tape.softplus(rho)?;
    let w = tape.add(mu, tape.hadamard(sigma, eps)?)?;

    // log q = -sum ln sigma - 1/2 sum ((w - mu)/sigma)^2 - n/2 ln 2pi
    let ln_sigma = tape.log(sigma)?;
    let inv_sigma = tape.exp(tape.scale(ln_sigma, -1.0)?)?;
    let z = tape.hadamard(tape.sub(w, mu)?, inv_sigma)?;
    let z_sq = tape.hadamard(z, z)?;
    let log_q = tape.add(
        tape.add(
            tape.scale(tape.sum(z_sq)?, -0.5)?,
            tape.scale(tape.sum(ln_sigma)?, -1.0)?,
        )?,
        tape.constant(Matrix::scalar(-count * HALF_LN_2PI)),
    )?;
    Ok((w, log_q))
}

/// In-graph log p sum: Gaussian prior density at the realized weights.
fn build_prior(tape: &Tape, w: NodeId, prior_mean: f64, prior_std: f64) -> Result<NodeId> {
    let (rows, cols) = tape.shape(w);
    let count = (rows * cols) as f64;
    let dev = if prior_mean == 0.0 {
        w
    } else {
        let mean = tape.constant(Matrix::zeros(rows, cols).map(|_| prior_mean));
        tape.sub(w, mean)?
    };
    let dev_sq = tape.hadamard(dev, dev)?;
    let scaled = tape.scale(tape.sum(dev_sq)?, -1.0 / (2.0 * prior_std * prior_std))?;
    let constant = tape.constant(Matrix::scalar(-count * (HALF_LN_2PI + prior_std.ln())));
    tape.add(scaled, constant)
}

fn gaussian_log_density_sum(w: &Matrix, mu: &Matrix, sigma: &Matrix) -> f64 {
    let mut total = 0.0;
    for ((&wv, &mv), &sv) in w.data().iter().zip(mu.data()).zip(sigma.data()) {
        let z = (wv - mv) / sv;
        total += -HALF_LN_2PI - sv.ln() - 0.5 * z * z;
    }
    total
}

/// Composite variational loss: kl_scale * (log_q - log_p) + nll.
pub fn bayes_loss(log_q: f64, log_p: f64, nll: f64, kl_scale: f64) -> f64 {
    kl_scale * (log_q - log_p) + nll
}

/// The same composition on tape nodes.
pub fn bayes_loss_graph(tape: &Tape, log_q: NodeId, log_p: NodeId, nll: NodeId, kl_scale: f64) -> Result<NodeId> {
    let kl = tape.scale(tape.sub(log_q, log_p)?, kl_scale)?;
    tape.add(kl, nll)
}
