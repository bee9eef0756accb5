//! Spatially correlated Rayleigh downlink channels.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{GeometryLayout, ScenarioConfig};
use crate::error::{Error, Result};

/// Normalized sinc, `sin(pi x) / (pi x)`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Distance-dependent power gain `C_0 (D / D_0)^-n` with
/// `C_0 = (lambda / (4 pi D_0))^2`.
pub fn path_loss(
    distance: f64,
    wavelength: f64,
    exponent: f64,
    reference_distance: f64,
) -> Result<f64> {
    if !(distance > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "user distance must be positive, got {distance}"
        )));
    }
    let c0 = (wavelength / (4.0 * PI * reference_distance)).powi(2);
    Ok(c0 * (distance / reference_distance).powf(-exponent))
}

/// `[R]_{m,m'} = sinc(2 E_{m,m'} / lambda)` over the pairwise distances of
/// the given atoms.
pub fn spatial_correlation(atoms: &[Vector3<f64>], wavelength: f64) -> DMatrix<f64> {
    let n = atoms.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            sinc(2.0 * (atoms[i] - atoms[j]).norm() / wavelength)
        }
    })
}

/// Symmetric PSD square root, negative eigenvalues clamped to zero.
///
/// Also returns the smallest eigenvalue before clamping.
pub fn psd_sqrt(r: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let eig = SymmetricEigen::new(r.clone());
    let min_eig = eig.eigenvalues.min();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let sqrt = v * DMatrix::from_diagonal(&roots) * v.transpose();
    // symmetrize away rounding
    let sqrt = (&sqrt + sqrt.transpose()) * 0.5;
    (sqrt, min_eig)
}

/// Deterministic part of the channel model: path losses and correlation.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub upsilon: Vec<f64>,
    pub correlation: DMatrix<f64>,
    pub correlation_sqrt: DMatrix<f64>,
    /// Smallest eigenvalue of the correlation matrix before clamping.
    pub min_eigenvalue: f64,
}

impl ChannelModel {
    pub fn new(layout: &GeometryLayout, cfg: &ScenarioConfig) -> Result<Self> {
        let lambda = cfg.wavelength();
        let center = layout.output_center();
        let upsilon = cfg
            .user_positions
            .iter()
            .map(|p| {
                let d = (Vector3::new(p[0], p[1], p[2]) - center).norm();
                path_loss(d, lambda, cfg.path_loss_exponent, cfg.reference_distance)
            })
            .collect::<Result<Vec<_>>>()?;
        let correlation = spatial_correlation(layout.output_layer(), lambda);
        let (correlation_sqrt, min_eigenvalue) = psd_sqrt(&correlation);
        Ok(Self {
            upsilon,
            correlation,
            correlation_sqrt,
            min_eigenvalue,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelSet {
        ChannelSet {
            h: sample_channels(&self.upsilon, &self.correlation_sqrt, rng),
            upsilon: self.upsilon.clone(),
            correlation: self.correlation.clone(),
            correlation_sqrt: self.correlation_sqrt.clone(),
        }
    }
}

/// One channel realization.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    /// `K x M`; row `k` is `h_k^H`.
    pub h: DMatrix<Complex64>,
    pub upsilon: Vec<f64>,
    pub correlation: DMatrix<f64>,
    pub correlation_sqrt: DMatrix<f64>,
}

/// Draws `h_k = sqrt(upsilon_k) R^(1/2) z_k` with `z_k ~ CN(0, I)` and
/// returns the `K x M` matrix whose rows are `h_k^H`.
pub fn sample_channels<R: Rng + ?Sized>(
    upsilon: &[f64],
    correlation_sqrt: &DMatrix<f64>,
    rng: &mut R,
) -> DMatrix<Complex64> {
    let m = correlation_sqrt.nrows();
    let root_half = 0.5f64.sqrt();
    let mut h = DMatrix::zeros(upsilon.len(), m);
    for (k, &ups) in upsilon.iter().enumerate() {
        let z = DVector::<Complex64>::from_fn(m, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * root_half, im * root_half)
        });
        let scale = ups.sqrt();
        for i in 0..m {
            let mut acc = Complex64::new(0.0, 0.0);
            for j in 0..m {
                acc += z[j] * correlation_sqrt[(i, j)];
            }
            h[(k, i)] = (acc * scale).conj();
        }
    }
    h
}
