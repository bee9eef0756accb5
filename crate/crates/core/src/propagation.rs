//! Rayleigh–Sommerfeld transmission matrices between the antenna array and
//! the metasurface layers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64;

use crate::config::{GeometryLayout, ScenarioConfig};
use crate::error::{Error, Result};

/// Diffraction coefficient between two elements separated by `d` meters,
/// `cos_psi` being the cosine of the angle to the source-plane normal.
///
/// `w = (A_t cos(psi) / d) * (1 / (2 pi d) - j / lambda) * exp(j 2 pi d / lambda)`
pub fn rs_coefficient(d: f64, cos_psi: f64, wavelength: f64, atom_area: f64) -> Result<Complex64> {
    if !(d > 0.0) {
        return Err(Error::CoincidentElements(d));
    }
    let amplitude = atom_area * cos_psi / d;
    let bracket = Complex64::new(1.0 / (2.0 * PI * d), -1.0 / wavelength);
    let phase = Complex64::from_polar(1.0, 2.0 * PI * d / wavelength);
    Ok(bracket * phase * amplitude)
}

/// Fixed transmission matrices of one scenario.
#[derive(Debug, Clone)]
pub struct PropagationSet {
    /// `M x K`, antenna `k` to atom `m` of the first layer.
    pub w1: DMatrix<Complex64>,
    /// `M x M` matrices, entry `[q - 2]` maps layer `q - 1` onto layer `q`.
    pub inter: Vec<DMatrix<Complex64>>,
}

impl PropagationSet {
    pub fn layers(&self) -> usize {
        self.inter.len() + 1
    }

    pub fn atoms(&self) -> usize {
        self.w1.nrows()
    }

    pub fn users(&self) -> usize {
        self.w1.ncols()
    }

    /// `W_q` for 1-based `q` in `2..=Q`.
    pub fn layer_matrix(&self, q: usize) -> &DMatrix<Complex64> {
        &self.inter[q - 2]
    }
}

/// Entry `(r, s)` couples `sources[s]` to `receivers[r]`; both planes are
/// normal to `y`.
fn coupling_matrix(
    receivers: &[Vector3<f64>],
    sources: &[Vector3<f64>],
    wavelength: f64,
    atom_area: f64,
) -> Result<DMatrix<Complex64>> {
    let mut w = DMatrix::zeros(receivers.len(), sources.len());
    for (r, rx) in receivers.iter().enumerate() {
        for (s, tx) in sources.iter().enumerate() {
            let d = (rx - tx).norm();
            let gap = (rx.y - tx.y).abs();
            let cos_psi = if d > 0.0 { gap / d } else { 0.0 };
            w[(r, s)] = rs_coefficient(d, cos_psi, wavelength, atom_area)?;
        }
    }
    Ok(w)
}

pub fn build_propagation(layout: &GeometryLayout, cfg: &ScenarioConfig) -> Result<PropagationSet> {
    let lambda = cfg.wavelength();
    let area = cfg.atom_area;
    let w1 = coupling_matrix(
        &layout.atom_positions[0],
        &layout.antenna_positions,
        lambda,
        area,
    )?;
    let inter = layout
        .atom_positions
        .windows(2)
        .map(|pair| coupling_matrix(&pair[1], &pair[0], lambda, area))
        .collect::<Result<Vec<_>>>()?;
    Ok(PropagationSet { w1, inter })
}
