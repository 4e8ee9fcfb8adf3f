//! Bounded, zero-mean noise with a prescribed covariance, and the
//! sample-driven GTD noise.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::{symmetric_eigen, DenseMatrix, DenseVector, NumericsError};
use crate::problem::{BlockSystem, GtdModel};

/// Eigenvalues of `Γ` below `-INDEFINITE_TOL` are rejected.
pub const INDEFINITE_TOL: f64 = 1e-10;
/// Relative slack added to `C` so floating-point rounding in `‖z‖` cannot
/// exceed it.
pub const BOUND_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NoiseError {
    #[error("covariance must be 2d×2d with d ≥ 1, got {0:?}")]
    Shape((usize, usize)),
    #[error("covariance is not symmetric")]
    Asymmetric,
    #[error("covariance is indefinite: smallest eigenvalue {0}")]
    Indefinite(f64),
    #[error("no samples supplied")]
    Empty,
    #[error("sample dimensions are inconsistent")]
    Dimension,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Joint covariance `Γ` of `(ξ; ψ)` with its square root and hard bound `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    d: usize,
    gamma: DenseMatrix,
    sqrt_gamma: DenseMatrix,
    c: f64,
}

pub fn make_noise_model(gamma: &DenseMatrix) -> Result<NoiseModel, NoiseError> {
    let (rows, cols) = gamma.shape();
    if rows != cols || rows == 0 || rows % 2 != 0 {
        return Err(NoiseError::Shape(gamma.shape()));
    }
    if !gamma.is_symmetric(1e-12 * gamma.max_abs().max(1.0)) {
        return Err(NoiseError::Asymmetric);
    }
    let eig = symmetric_eigen(gamma)?;
    let min = eig.values[0];
    if min < -INDEFINITE_TOL {
        return Err(NoiseError::Indefinite(min));
    }
    let sqrt_gamma = eig.reconstruct_with(|v| v.max(0.0).sqrt());
    let top = eig.values.last().copied().unwrap_or(0.0).max(0.0).sqrt();
    let c = top * (rows as f64).sqrt() * (1.0 + BOUND_GUARD);
    Ok(NoiseModel {
        d: rows / 2,
        gamma: gamma.clone(),
        sqrt_gamma,
        c,
    })
}

impl NoiseModel {
    /// `Γ = v·I`.
    pub fn iso(d: usize, v: f64) -> Result<Self, NoiseError> {
        make_noise_model(&DenseMatrix::identity(2 * d).scale(v))
    }

    pub fn zero(d: usize) -> Self {
        make_noise_model(&DenseMatrix::zeros(2 * d, 2 * d)).expect("zero covariance is valid")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn gamma(&self) -> &DenseMatrix {
        &self.gamma
    }

    pub fn sqrt_gamma(&self) -> &DenseMatrix {
        &self.sqrt_gamma
    }

    /// Sure bound on `‖(ξ; ψ)‖`.
    pub fn bound(&self) -> f64 {
        self.c
    }

    pub fn is_zero(&self) -> bool {
        self.c == 0.0
    }

    /// One `z = √Γ u` with independent fair signs `u`, written into `xi` and `psi`.
    pub fn sample_into<R: RngCore + ?Sized>(&self, rng: &mut R, xi: &mut [f64], psi: &mut [f64]) {
        let n = 2 * self.d;
        let mut stack = [0.0f64; 64];
        let mut heap;
        let signs: &mut [f64] = if n <= 64 {
            &mut stack[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        for chunk in signs.chunks_mut(64) {
            let bits = rng.next_u64();
            for (b, s) in chunk.iter_mut().enumerate() {
                *s = if (bits >> b) & 1 == 1 { 1.0 } else { -1.0 };
            }
        }
        for row in 0..n {
            let v: f64 = self
                .sqrt_gamma
                .row(row)
                .iter()
                .zip(signs.iter())
                .map(|(a, s)| a * s)
                .sum();
            if row < self.d {
                xi[row] = v;
            } else {
                psi[row - self.d] = v;
            }
        }
    }

    /// `u64` words consumed by one sample.
    fn words_per_sample(&self) -> u64 {
        (2 * self.d).div_ceil(64) as u64
    }
}

/// `N` independent `(ξⁱ, ψⁱ)` pairs.
pub fn sample_noise<R: RngCore + ?Sized>(
    model: &NoiseModel,
    rng: &mut R,
    n: usize,
) -> Vec<(DenseVector, DenseVector)> {
    (0..n)
        .map(|_| {
            let mut xi = vec![0.0; model.d];
            let mut psi = vec![0.0; model.d];
            model.sample_into(rng, &mut xi, &mut psi);
            (
                DenseVector::new(xi).expect("finite"),
                DenseVector::new(psi).expect("finite"),
            )
        })
        .collect()
}

/// Second-moment matrix `(1/n) Σ z zᵀ` with `z = (ξ; ψ)`; the mean is not
/// subtracted.
pub fn empirical_covariance(
    samples: &[(DenseVector, DenseVector)],
) -> Result<DenseMatrix, NoiseError> {
    let (first_xi, first_psi) = samples.first().ok_or(NoiseError::Empty)?;
    let d1 = first_xi.dim();
    let n = d1 + first_psi.dim();
    let mut acc = DenseMatrix::zeros(n, n);
    let mut z = vec![0.0; n];
    for (xi, psi) in samples {
        if xi.dim() != d1 || xi.dim() + psi.dim() != n {
            return Err(NoiseError::Dimension);
        }
        z[..d1].copy_from_slice(xi.as_slice());
        z[d1..].copy_from_slice(psi.as_slice());
        for i in 0..n {
            for j in 0..n {
                acc[(i, j)] += z[i] * z[j];
            }
        }
    }
    Ok(acc.scale(1.0 / samples.len() as f64))
}

/// Source of the per-iteration noise matrices `Ξ_k` and `Ψ_k` (rows are nodes).
pub trait NoiseProcess: Send {
    /// Fills `xi` and `psi` for iteration `k`. The result depends only on
    /// the process seed, `k` and the current iterates.
    fn draw(
        &mut self,
        k: usize,
        x: &DenseMatrix,
        y: &DenseMatrix,
        xi: &mut DenseMatrix,
        psi: &mut DenseMatrix,
    );

    /// Sure bound on every node's `‖(ξ; ψ)‖`, when one exists.
    fn bound(&self) -> Option<f64>;
}

/// No noise at all.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl NoiseProcess for ZeroNoise {
    fn draw(
        &mut self,
        _k: usize,
        _x: &DenseMatrix,
        _y: &DenseMatrix,
        xi: &mut DenseMatrix,
        psi: &mut DenseMatrix,
    ) {
        for m in [xi, psi] {
            for i in 0..m.rows() {
                m.row_mut(i).fill(0.0);
            }
        }
    }

    fn bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Independent draws from a [`NoiseModel`], one ChaCha substream per node
/// with a fixed word offset per iteration.
#[derive(Debug, Clone)]
pub struct SyntheticNoise {
    model: NoiseModel,
    rng: ChaCha8Rng,
}

impl SyntheticNoise {
    pub fn new(model: NoiseModel, seed: u64) -> Self {
        Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }
}

impl NoiseProcess for SyntheticNoise {
    fn draw(
        &mut self,
        k: usize,
        x: &DenseMatrix,
        y: &DenseMatrix,
        xi: &mut DenseMatrix,
        psi: &mut DenseMatrix,
    ) {
        if self.model.is_zero() {
            ZeroNoise.draw(k, x, y, xi, psi);
            return;
        }
        // Word positions count 32-bit words; each sample uses whole u64s.
        let stride = 2 * self.model.words_per_sample() as u128;
        for node in 0..xi.rows() {
            self.rng.set_stream(node as u64);
            self.rng.set_word_pos(k as u128 * stride);
            self.model
                .sample_into(&mut self.rng, xi.row_mut(node), psi.row_mut(node));
        }
    }

    fn bound(&self) -> Option<f64> {
        Some(self.model.bound())
    }
}

const GTD_STREAM: u64 = u64::MAX;
const GTD_WORDS_PER_STEP: u128 = 4;

/// Noise that turns the expected-operator update into sampled GTD: one
/// transition `(s, s′)` from the stationary law per iteration, shared by all
/// agents, and each agent's own reward.
///
/// The noise depends on the iterates, so it carries no sure bound.
#[derive(Debug, Clone)]
pub struct GtdNoise {
    model: GtdModel,
    system: BlockSystem,
    scale: f64,
    rng: ChaCha8Rng,
}

impl GtdNoise {
    /// `system` must be the GTD system of `model` multiplied by `scale`.
    pub fn new(model: GtdModel, system: BlockSystem, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(GTD_STREAM);
        Self {
            model,
            system,
            scale,
            rng,
        }
    }

    fn transition(&mut self, k: usize) -> (usize, usize) {
        self.rng.set_word_pos(k as u128 * GTD_WORDS_PER_STEP);
        let rng: &mut ChaCha8Rng = &mut self.rng;
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        self.model.sample_from_uniforms(u1, u2)
    }
}

impl NoiseProcess for GtdNoise {
    fn draw(
        &mut self,
        k: usize,
        x: &DenseMatrix,
        y: &DenseMatrix,
        xi: &mut DenseMatrix,
        psi: &mut DenseMatrix,
    ) {
        let (s, s_next) = self.transition(k);
        let (h11, h12) = self.model.sample_blocks(s, s_next);
        let c = self.scale;
        let d = self.model.d();
        let sys = &self.system;
        let e11 = DenseMatrix::from_fn(d, d, |i, j| c * h11[(i, j)] - sys.a11()[(i, j)]);
        let e12 = DenseMatrix::from_fn(d, d, |i, j| c * h12[(i, j)] - sys.a12()[(i, j)]);
        // Sampled A21 is −(sampled A12)ᵀ.
        let e21 = DenseMatrix::from_fn(d, d, |i, j| -c * h12[(j, i)] - sys.a21()[(i, j)]);
        let phi = self.model.feature(s);
        for node in 0..x.rows() {
            let xr = x.row(node);
            let yr = y.row(node);
            let reward = self.model.reward(node, s);
            let b1 = &sys.b1()[node];
            let xi_row = xi.row_mut(node);
            for i in 0..d {
                let mut v = 0.0;
                for j in 0..d {
                    v += e11[(i, j)] * xr[j] + e12[(i, j)] * yr[j];
                }
                xi_row[i] = v - (c * reward * phi[i] - b1[i]);
            }
            let psi_row = psi.row_mut(node);
            for i in 0..d {
                psi_row[i] = (0..d).map(|j| e21[(i, j)] * xr[j]).sum();
            }
        }
    }

    fn bound(&self) -> Option<f64> {
        None
    }
}
