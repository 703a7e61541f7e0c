//! Exponential-family and Bregman-divergence numerics for diagonal Gaussians.
//!
//! The latent family is a product of K independent Gaussians in natural form,
//! with sufficient statistics t(z) = (z, z²) per dimension and base measure
//! h(z) = (2π)^(-1/2) carried explicitly. The log normalizer
//!
//!   B(λ) = Σ_k [ -λ₁ₖ²/(4 λ₂ₖ) - ½ log(-2 λ₂ₖ) ]
//!
//! is the quantity everything else is built from: Legendre maps, the dual
//! B*, conjugate posterior updates, and two-path log-density identities.

use crate::error::{Error, Result};
use crate::rng::Stream;
use rand_distr::{Distribution, StandardNormal};

/// Absolute tolerance for the two-path density identity and the
/// Fenchel-Young equality. Fixed library constant, not user-configurable.
pub const IDENTITY_TOL: f64 = 1e-10;

/// Absolute tolerance for agreement between closed-form log normalizers and
/// adaptive quadrature. Fixed library constant, not user-configurable.
pub const QUADRATURE_TOL: f64 = 1e-6;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_74;

/// Natural parameters (λ₁, λ₂) of a K-dimensional diagonal Gaussian.
/// Every λ₂ₖ must be strictly negative for the family to normalize.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNaturalParams {
    lam1: Vec<f64>,
    lam2: Vec<f64>,
}

impl GaussianNaturalParams {
    pub fn new(lam1: Vec<f64>, lam2: Vec<f64>) -> Result<Self> {
        if lam1.len() != lam2.len() {
            return Err(Error::shape(
                "GaussianNaturalParams::new",
                format!("lam2 of length {}", lam1.len()),
                format!("length {}", lam2.len()),
            ));
        }
        if lam1.is_empty() {
            return Err(Error::invalid("lam1", "dimension must be at least 1"));
        }
        for (k, (&a, &b)) in lam1.iter().zip(&lam2).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::invalid("lam", format!("non-finite entry at {k}")));
            }
            if b >= 0.0 {
                return Err(Error::invalid(
                    "lam2",
                    format!("entry {k} is {b}; must be strictly negative"),
                ));
            }
        }
        Ok(Self { lam1, lam2 })
    }

    /// Bias of the spherical standard Gaussian, λ = (0, -1/2) in every
    /// dimension.
    pub fn standard(dim: usize) -> Self {
        Self {
            lam1: vec![0.0; dim],
            lam2: vec![-0.5; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lam1.len()
    }

    pub fn lam1(&self) -> &[f64] {
        &self.lam1
    }

    pub fn lam2(&self) -> &[f64] {
        &self.lam2
    }
}

/// Mean parameters (E[z], E[z²]) of a K-dimensional diagonal Gaussian.
/// Requires positive implied variance m2 - m1² in every dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeanParams {
    m1: Vec<f64>,
    m2: Vec<f64>,
}

impl GaussianMeanParams {
    pub fn new(m1: Vec<f64>, m2: Vec<f64>) -> Result<Self> {
        if m1.len() != m2.len() {
            return Err(Error::shape(
                "GaussianMeanParams::new",
                format!("m2 of length {}", m1.len()),
                format!("length {}", m2.len()),
            ));
        }
        if m1.is_empty() {
            return Err(Error::invalid("m1", "dimension must be at least 1"));
        }
        for (k, (&a, &b)) in m1.iter().zip(&m2).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::invalid("mean", format!("non-finite entry at {k}")));
            }
            if b - a * a <= 0.0 {
                return Err(Error::invalid(
                    "m2",
                    format!("entry {k} implies variance {} <= 0", b - a * a),
                ));
            }
        }
        Ok(Self { m1, m2 })
    }

    pub fn dim(&self) -> usize {
        self.m1.len()
    }

    pub fn m1(&self) -> &[f64] {
        &self.m1
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }

    /// Implied per-dimension variances m2 - m1².
    pub fn variances(&self) -> Vec<f64> {
        self.m1
            .iter()
            .zip(&self.m2)
            .map(|(&a, &b)| b - a * a)
            .collect()
    }
}

/// Log normalizer B(λ) = Σ_k [ -λ₁ₖ²/(4 λ₂ₖ) - ½ log(-2 λ₂ₖ) ].
///
/// With the h(z) = (2π)^(-1/2) base measure this makes
/// exp(⟨t(z), λ⟩ - B(λ)) · h(z) a normalized density.
pub fn log_normalizer_b(p: &GaussianNaturalParams) -> f64 {
    p.lam1
        .iter()
        .zip(&p.lam2)
        .map(|(&l1, &l2)| -l1 * l1 / (4.0 * l2) - 0.5 * (-2.0 * l2).ln())
        .sum()
}

/// Forward Legendre map μ(λ) = ∇B(λ): m1 = -λ₁/(2λ₂), m2 = m1² - 1/(2λ₂).
pub fn natural_to_mean(p: &GaussianNaturalParams) -> GaussianMeanParams {
    let m1: Vec<f64> = p
        .lam1
        .iter()
        .zip(&p.lam2)
        .map(|(&l1, &l2)| -l1 / (2.0 * l2))
        .collect();
    let m2: Vec<f64> = m1
        .iter()
        .zip(&p.lam2)
        .map(|(&a, &l2)| a * a - 1.0 / (2.0 * l2))
        .collect();
    // Validity is automatic: variance = -1/(2λ₂) > 0 whenever λ₂ < 0.
    GaussianMeanParams { m1, m2 }
}

/// Inverse Legendre map λ(μ) = ∇B*(μ): with σ² = m2 - m1²,
/// λ₁ = m1/σ², λ₂ = -1/(2σ²).
pub fn mean_to_natural(m: &GaussianMeanParams) -> GaussianNaturalParams {
    let mut lam1 = Vec::with_capacity(m.dim());
    let mut lam2 = Vec::with_capacity(m.dim());
    for (&a, &b) in m.m1.iter().zip(&m.m2) {
        let var = b - a * a;
        lam1.push(a / var);
        lam2.push(-1.0 / (2.0 * var));
    }
    GaussianNaturalParams { lam1, lam2 }
}

/// Convex conjugate B*(μ) = ⟨μ, η(μ)⟩ - B(η(μ)) with η(μ) = mean_to_natural.
pub fn dual_b_star(m: &GaussianMeanParams) -> f64 {
    let nat = mean_to_natural(m);
    let inner: f64 = m
        .m1
        .iter()
        .zip(&nat.lam1)
        .map(|(&u, &v)| u * v)
        .chain(m.m2.iter().zip(&nat.lam2).map(|(&u, &v)| u * v))
        .sum();
    inner - log_normalizer_b(&nat)
}

/// Conjugate posterior update λ̃ = λ + t(x), componentwise over the K pairs.
///
/// The summed second components must stay strictly negative; a violation is
/// reported as an encoder-output constraint failure.
pub fn posterior_params(
    bias: &GaussianNaturalParams,
    t1: &[f64],
    t2: &[f64],
) -> Result<GaussianNaturalParams> {
    if t1.len() != bias.dim() || t2.len() != bias.dim() {
        return Err(Error::shape(
            "posterior_params",
            format!("statistics of length {}", bias.dim()),
            format!("({}, {})", t1.len(), t2.len()),
        ));
    }
    let lam1: Vec<f64> = bias.lam1.iter().zip(t1).map(|(&l, &t)| l + t).collect();
    let mut lam2 = Vec::with_capacity(bias.dim());
    for (k, (&l, &t)) in bias.lam2.iter().zip(t2).enumerate() {
        let s = l + t;
        if !s.is_finite() || s >= 0.0 {
            return Err(Error::invalid(
                "stats",
                format!(
                    "posterior lam2[{k}] = {s}; encoder statistics must keep it negative"
                ),
            ));
        }
        lam2.push(s);
    }
    Ok(GaussianNaturalParams { lam1, lam2 })
}

/// Closed set of convex functions accepted by [`bregman_divergence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvexFunction {
    /// F(u) = ⟨u, u⟩.
    SquaredNorm,
    /// F(u) = Σ uᵢ log uᵢ with 0·log 0 = 0. The gradient needs strictly
    /// positive entries, so the second Bregman argument must stay interior.
    NegEntropy,
    /// F(u) = B*(u) for the diagonal Gaussian; u packs (m1 ‖ m2), even length.
    GaussianBStar,
}

impl ConvexFunction {
    pub fn value(&self, u: &[f64]) -> Result<f64> {
        match self {
            ConvexFunction::SquaredNorm => Ok(u.iter().map(|&x| x * x).sum()),
            ConvexFunction::NegEntropy => {
                let mut acc = 0.0;
                for (i, &x) in u.iter().enumerate() {
                    if x < 0.0 {
                        return Err(Error::invalid(
                            "u",
                            format!("entropy argument {i} is negative"),
                        ));
                    }
                    if x > 0.0 {
                        acc += x * x.ln();
                    }
                }
                Ok(acc)
            }
            ConvexFunction::GaussianBStar => Ok(dual_b_star(&split_mean(u)?)),
        }
    }

    pub fn grad(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            ConvexFunction::SquaredNorm => Ok(u.iter().map(|&x| 2.0 * x).collect()),
            ConvexFunction::NegEntropy => {
                let mut g = Vec::with_capacity(u.len());
                for (i, &x) in u.iter().enumerate() {
                    if x <= 0.0 {
                        return Err(Error::invalid(
                            "u",
                            format!("entropy gradient needs positive entries, got {x} at {i}"),
                        ));
                    }
                    g.push(x.ln() + 1.0);
                }
                Ok(g)
            }
            ConvexFunction::GaussianBStar => {
                // ∇B* = η(μ): the inverse Legendre map, packed (λ₁ ‖ λ₂).
                let nat = mean_to_natural(&split_mean(u)?);
                let mut g = nat.lam1;
                g.extend_from_slice(&nat.lam2);
                Ok(g)
            }
        }
    }
}

fn split_mean(u: &[f64]) -> Result<GaussianMeanParams> {
    if u.len() % 2 != 0 || u.is_empty() {
        return Err(Error::shape(
            "GaussianBStar",
            "even-length (m1 ‖ m2) packing".to_string(),
            format!("length {}", u.len()),
        ));
    }
    let k = u.len() / 2;
    GaussianMeanParams::new(u[..k].to_vec(), u[k..].to_vec())
}

/// Bregman divergence D_F(μ′, μ) = F(μ′) - F(μ) - ⟨μ′ - μ, ∇F(μ)⟩.
///
/// Non-negative for convex F; exactly zero when the arguments coincide.
pub fn bregman_divergence(f: ConvexFunction, mu_a: &[f64], mu_b: &[f64]) -> Result<f64> {
    if mu_a.len() != mu_b.len() {
        return Err(Error::shape(
            "bregman_divergence",
            format!("second point of length {}", mu_a.len()),
            format!("length {}", mu_b.len()),
        ));
    }
    let fa = f.value(mu_a)?;
    let fb = f.value(mu_b)?;
    let g = f.grad(mu_b)?;
    let cross: f64 = mu_a
        .iter()
        .zip(mu_b)
        .zip(&g)
        .map(|((&a, &b), &gi)| (a - b) * gi)
        .sum();
    Ok(fa - fb - cross)
}

/// Exponential families whose log densities ship with a two-path check.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpFamily {
    /// Diagonal Gaussian in natural form; t(z) = (z, z²), h = (2π)^(-K/2).
    Gaussian(GaussianNaturalParams),
    /// Gaussian likelihood with fixed variance; t(x) = x, natural parameter
    /// mean/σ², base measure exp(-x²/(2σ²)) / sqrt(2πσ²) per dimension.
    GaussianFixedVariance { natural: Vec<f64>, variance: f64 },
    /// Bernoulli with log-odds natural parameters; t(x) = x, h = 1.
    Bernoulli { natural: Vec<f64> },
}

/// Evaluation route for [`exp_family_log_density`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityRoute {
    /// ⟨t(x), η⟩ - A(η) + log h(x).
    Canonical,
    /// -D_{A*}(t(x), μ(η)) + A*(t(x)) + log h(x), evaluated through the dual.
    Bregman,
}

/// Normalized log density of `point` under `fam`, by either route.
///
/// Both routes agree to [`IDENTITY_TOL`]. For the full Gaussian the
/// statistics t(x) = (x, x²) sit on the boundary of the mean domain where
/// A*(t) alone diverges, so the Bregman route is evaluated in its cancelled
/// gradient form A*(μ) + ⟨t(x) - μ, ∇A*(μ)⟩, which is the same quantity.
pub fn exp_family_log_density(fam: &ExpFamily, point: &[f64], route: DensityRoute) -> Result<f64> {
    match fam {
        ExpFamily::Gaussian(p) => {
            if point.len() != p.dim() {
                return Err(Error::shape(
                    "exp_family_log_density",
                    format!("point of length {}", p.dim()),
                    format!("length {}", point.len()),
                ));
            }
            let log_h = -(p.dim() as f64) * HALF_LOG_2PI;
            match route {
                DensityRoute::Canonical => {
                    let inner: f64 = point
                        .iter()
                        .zip(p.lam1.iter().zip(&p.lam2))
                        .map(|(&z, (&l1, &l2))| l1 * z + l2 * z * z)
                        .sum();
                    Ok(inner - log_normalizer_b(p) + log_h)
                }
                DensityRoute::Bregman => {
                    let mean = natural_to_mean(p);
                    let back = mean_to_natural(&mean);
                    let astar = dual_b_star(&mean);
                    let cross: f64 = point
                        .iter()
                        .zip(mean.m1.iter().zip(&back.lam1))
                        .map(|(&z, (&m, &g))| (z - m) * g)
                        .chain(
                            point
                                .iter()
                                .zip(mean.m2.iter().zip(&back.lam2))
                                .map(|(&z, (&m, &g))| (z * z - m) * g),
                        )
                        .sum();
                    Ok(astar + cross + log_h)
                }
            }
        }
        ExpFamily::GaussianFixedVariance { natural, variance } => {
            if *variance <= 0.0 || !variance.is_finite() {
                return Err(Error::invalid("variance", "must be positive and finite"));
            }
            if point.len() != natural.len() {
                return Err(Error::shape(
                    "exp_family_log_density",
                    format!("point of length {}", natural.len()),
                    format!("length {}", point.len()),
                ));
            }
            let v = *variance;
            let log_h: f64 = point
                .iter()
                .map(|&x| -x * x / (2.0 * v) - 0.5 * (v).ln() - HALF_LOG_2PI)
                .sum();
            match route {
                DensityRoute::Canonical => {
                    // A(η) = σ² η² / 2 per dimension.
                    let val: f64 = point
                        .iter()
                        .zip(natural)
                        .map(|(&x, &e)| e * x - v * e * e / 2.0)
                        .sum();
                    Ok(val + log_h)
                }
                DensityRoute::Bregman => {
                    // A*(m) = m²/(2σ²); D_{A*}(x, m) = (x - m)²/(2σ²).
                    let val: f64 = point
                        .iter()
                        .zip(natural)
                        .map(|(&x, &e)| {
                            let m = v * e;
                            -(x - m) * (x - m) / (2.0 * v) + x * x / (2.0 * v)
                        })
                        .sum();
                    Ok(val + log_h)
                }
            }
        }
        ExpFamily::Bernoulli { natural } => {
            if point.len() != natural.len() {
                return Err(Error::shape(
                    "exp_family_log_density",
                    format!("point of length {}", natural.len()),
                    format!("length {}", point.len()),
                ));
            }
            for (i, &x) in point.iter().enumerate() {
                if x != 0.0 && x != 1.0 {
                    return Err(Error::invalid(
                        "point",
                        format!("Bernoulli support is {{0, 1}}, got {x} at {i}"),
                    ));
                }
            }
            match route {
                DensityRoute::Canonical => Ok(point
                    .iter()
                    .zip(natural)
                    .map(|(&x, &e)| e * x - softplus(e))
                    .sum()),
                DensityRoute::Bregman => {
                    // Route each dimension through the shipped negative
                    // entropy on the 2-simplex embedding (μ, 1-μ).
                    let mut acc = 0.0;
                    for (&x, &e) in point.iter().zip(natural) {
                        let mu = sigmoid(e);
                        let t = [x, 1.0 - x];
                        let m = [mu, 1.0 - mu];
                        let d = bregman_divergence(ConvexFunction::NegEntropy, &t, &m)?;
                        acc += -d + ConvexFunction::NegEntropy.value(&t)?;
                    }
                    Ok(acc)
                }
            }
        }
    }
}

/// Draw one z ~ p(z | λ) through the mean parameterization. Deterministic
/// given the stream state.
pub fn gaussian_sample(p: &GaussianNaturalParams, rng: &mut Stream) -> Vec<f64> {
    let mean = natural_to_mean(p);
    mean.m1
        .iter()
        .zip(mean.variances())
        .map(|(&m, v)| {
            let eps: f64 = StandardNormal.sample(rng);
            m + v.sqrt() * eps
        })
        .collect()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
