//! Synthetic spiking benchmark with a known 2D latent.
//!
//! A behavior variable `c` on `[0, 2π]` drives a Gaussian latent
//! `z ~ N((c, 2 sin c), diag(0.6 - 0.3|sin c|, 0.3|sin c|))`. The latent is
//! lifted to `n_neurons` dimensions by a seeded linear map, pushed through
//! affine coupling blocks, made nonnegative with softplus and finally
//! Poisson-sampled into spike counts.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::data::{SplitPlan, Session};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::stream;

const TWO_PI: f64 = 2.0 * PI;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub latent_dim: usize,
    pub n_neurons: usize,
    pub n_coupling_blocks: usize,
    /// Hidden width of the scale and shift networks.
    pub hidden: usize,
    /// Standard deviation of one step of the behavior walk, in radians.
    pub walk_step: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 15_000,
            latent_dim: 2,
            n_neurons: 100,
            n_coupling_blocks: 4,
            hidden: 16,
            walk_step: 0.1,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim != 2 {
            return Err(Error::Unsupported(format!(
                "the latent model is two-dimensional, got latent_dim = {}",
                self.latent_dim
            )));
        }
        if self.n_samples == 0 || self.n_neurons < 2 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "n_samples and hidden must be positive and n_neurons at least 2".into(),
            ));
        }
        if !(self.walk_step.is_finite() && self.walk_step >= 0.0) {
            return Err(Error::InvalidConfig(format!("walk_step {} must be finite and >= 0", self.walk_step)));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::InvalidConfig(format!(
                "train_fraction {} outside [0, 1]",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// Mean of the latent given behavior `c`.
pub fn latent_mean(c: f64) -> [f64; 2] {
    [c, 2.0 * libm::sin(c)]
}

/// Diagonal of the latent covariance given behavior `c`.
pub fn latent_variance(c: f64) -> [f64; 2] {
    let s = libm::fabs(libm::sin(c));
    [0.6 - 0.3 * s, 0.3 * s]
}

pub fn sample_latent<R: Rng + ?Sized>(c: f64, rng: &mut R) -> [f64; 2] {
    let (mu, var) = (latent_mean(c), latent_variance(c));
    let e0: f64 = StandardNormal.sample(rng);
    let e1: f64 = StandardNormal.sample(rng);
    [mu[0] + libm::sqrt(var[0]) * e0, mu[1] + libm::sqrt(var[1]) * e1]
}

/// Gaussian random walk on `[0, 2π]` with reflecting ends, started uniformly.
/// Reflection keeps the uniform law invariant, so each sample is marginally
/// uniform while neighbouring samples stay close.
pub fn behavior_walk<R: Rng + ?Sized>(len: usize, step: f64, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    if len == 0 {
        return out;
    }
    let mut c = rng.random_range(0.0..TWO_PI);
    out.push(c);
    for _ in 1..len {
        let e: f64 = StandardNormal.sample(rng);
        c = reflect(c + step * e);
        out.push(c);
    }
    out
}

fn reflect(mut x: f64) -> f64 {
    x = libm::fmod(x, 2.0 * TWO_PI);
    if x < 0.0 {
        x += 2.0 * TWO_PI;
    }
    if x > TWO_PI {
        x = 2.0 * TWO_PI - x;
    }
    x
}

/// `x -> W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// hidden x in
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// out x hidden
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut gauss = |rows: usize, cols: usize, fan_in: usize| {
            let sd = 1.0 / libm::sqrt(fan_in as f64);
            let data = (0..rows * cols)
                .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            Matrix::from_vec(rows, cols, data).expect("sized buffer")
        };
        let w1 = gauss(hidden, input, input);
        let w2 = gauss(output, hidden, hidden);
        Self {
            w1,
            b1: alloc::vec![0.0; hidden],
            w2,
            b2: alloc::vec![0.0; output],
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, input),
            b1: alloc::vec![0.0; hidden],
            w2: Matrix::zeros(output, hidden),
            b2: alloc::vec![0.0; output],
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let h: Vec<f64> = self
            .w1
            .iter_rows()
            .zip(&self.b1)
            .map(|(w, b)| libm::tanh(dot(w, x) + b))
            .collect();
        for ((o, w), b) in out.iter_mut().zip(self.w2.iter_rows()).zip(&self.b2) {
            *o = dot(w, &h) + b;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine coupling: coordinates in `kept` pass through unchanged and condition
/// the scale `s` and shift `t` applied to the coordinates in `moved`.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    pub kept: Vec<usize>,
    pub moved: Vec<usize>,
    pub scale: Mlp,
    pub shift: Mlp,
}

impl CouplingBlock {
    /// Block over `dim` coordinates keeping those whose index has the parity of `parity`.
    pub fn random<R: Rng + ?Sized>(dim: usize, parity: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let (kept, moved) = alternating(dim, parity)?;
        let scale = Mlp::random(kept.len(), hidden, moved.len(), rng);
        let shift = Mlp::random(kept.len(), hidden, moved.len(), rng);
        Ok(Self { kept, moved, scale, shift })
    }

    /// `s = 0, t = 0`: the identity map.
    pub fn identity(dim: usize, parity: usize, hidden: usize) -> Result<Self> {
        let (kept, moved) = alternating(dim, parity)?;
        let (k, m) = (kept.len(), moved.len());
        Ok(Self {
            kept,
            moved,
            scale: Mlp::zeros(k, hidden, m),
            shift: Mlp::zeros(k, hidden, m),
        })
    }

    pub fn dim(&self) -> usize {
        self.kept.len() + self.moved.len()
    }

    fn conditioners(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = self.kept.iter().map(|&i| z[i]).collect();
        let mut s = alloc::vec![0.0; self.moved.len()];
        let mut t = alloc::vec![0.0; self.moved.len()];
        self.scale.apply(&x, &mut s);
        self.shift.apply(&x, &mut t);
        (s, t)
    }

    /// Maps `z` in place and returns `log |det J|`.
    pub fn forward(&self, z: &mut [f64]) -> f64 {
        let (s, t) = self.conditioners(z);
        for ((&i, s), t) in self.moved.iter().zip(&s).zip(&t) {
            z[i] = z[i] * libm::exp(*s) + t;
        }
        s.iter().sum()
    }

    pub fn inverse(&self, y: &mut [f64]) {
        let (s, t) = self.conditioners(y);
        for ((&i, s), t) in self.moved.iter().zip(&s).zip(&t) {
            y[i] = (y[i] - t) * libm::exp(-s);
        }
    }
}

fn alternating(dim: usize, parity: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if dim < 2 {
        return Err(Error::InvalidConfig("a coupling block needs at least two coordinates".into()));
    }
    Ok((0..dim).partition(|i| i % 2 == parity % 2))
}

/// Seeded map from the latent to nonnegative firing rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixing {
    /// n_neurons x latent_dim
    pub lift: Matrix,
    pub blocks: Vec<CouplingBlock>,
}

impl Mixing {
    pub fn random(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let (n, d) = (config.n_neurons, config.latent_dim);
        let mut rng = stream(config.seed, 2);
        let sd = libm::sqrt(1.0 / d as f64);
        let lift = Matrix::from_vec(
            n,
            d,
            (0..n * d)
                .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect(),
        )?;
        let blocks = (0..config.n_coupling_blocks)
            .map(|b| CouplingBlock::random(n, b, config.hidden, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { lift, blocks })
    }

    /// Lifted and coupled pre-activations, one row per latent row.
    pub fn pre_rates(&self, latent: &Matrix) -> Result<Matrix> {
        let mut y = latent.matmul(&self.lift.transpose())?;
        for row in 0..y.rows() {
            let r = y.row_mut(row);
            for block in &self.blocks {
                block.forward(r);
            }
        }
        Ok(y)
    }

    pub fn rates(&self, latent: &Matrix) -> Result<Matrix> {
        let mut y = self.pre_rates(latent)?;
        for v in y.as_mut_slice() {
            *v = softplus(*v);
        }
        Ok(y)
    }
}

/// Runs a coupling stack forward in place, returning the summed log-determinant.
pub fn flow_forward(blocks: &[CouplingBlock], z: &mut [f64]) -> f64 {
    blocks.iter().map(|b| b.forward(z)).sum()
}

pub fn flow_inverse(blocks: &[CouplingBlock], y: &mut [f64]) {
    for b in blocks.iter().rev() {
        b.inverse(y);
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Independent Poisson counts, one per rate.
pub fn poissonize<R: Rng + ?Sized>(rates: &Matrix, rng: &mut R) -> Result<Matrix> {
    let mut out = Matrix::zeros(rates.rows(), rates.cols());
    for (o, &lambda) in out.as_mut_slice().iter_mut().zip(rates.as_slice()) {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("Poisson rate {lambda} must be finite and >= 0")));
        }
        if lambda > 0.0 {
            let p = Poisson::new(lambda).map_err(|e| Error::InvalidConfig(format!("Poisson rate {lambda}: {e}")))?;
            *o = p.sample(rng);
        }
    }
    Ok(out)
}

/// A generated benchmark. The session carries the spike counts as signal and
/// the behavior as a one-column continuous context.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub session: Session,
    /// T x 2 ground-truth latent.
    pub latent: Matrix,
    pub split: SplitPlan,
    pub mixing: Mixing,
}

impl SynthDataset {
    pub fn spikes(&self) -> &Matrix {
        self.session.signal()
    }

    pub fn behavior(&self) -> &Matrix {
        self.session.continuous().expect("synthetic sessions carry behavior")
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let t = config.n_samples;
    let behavior = behavior_walk(t, config.walk_step, &mut stream(config.seed, 0));
    let mut latent_rng = stream(config.seed, 1);
    let mut latent = Matrix::zeros(t, 2);
    for (i, &c) in behavior.iter().enumerate() {
        latent.row_mut(i).copy_from_slice(&sample_latent(c, &mut latent_rng));
    }
    let mixing = Mixing::random(config)?;
    let rates = mixing.rates(&latent)?;
    if !rates.is_finite() {
        return Err(Error::NonFinite("synthetic firing rates overflowed".into()));
    }
    let spikes = poissonize(&rates, &mut stream(config.seed, 3))?;
    let session = Session::new(spikes, Some(Matrix::from_vec(t, 1, behavior)?), None)?;
    Ok(SynthDataset {
        session,
        latent,
        split: SplitPlan::train_validation(t, config.train_fraction)?,
        mixing,
    })
}

/// Shorthand for a seeded default-shaped dataset of `n_samples` points.
pub fn generate_seeded(n_samples: usize, seed: u64) -> Result<SynthDataset> {
    generate(&SynthConfig {
        n_samples,
        seed,
        ..SynthConfig::default()
    })
}
