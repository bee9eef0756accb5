//! Wave-domain transfer function, transmit covariance, and the output-layer
//! steering vector and beampattern.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::propagation::PropagationSet;

/// Optimization variables: per-atom phases and per-user powers.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// `Q x M` phases in radians, row `q` is layer `q + 1`.
    pub omega: DMatrix<f64>,
    /// Per-user transmit powers, watts.
    pub p: DVector<f64>,
}

impl SimState {
    pub fn new(omega: DMatrix<f64>, p: DVector<f64>) -> Self {
        Self { omega, p }
    }

    pub fn layers(&self) -> usize {
        self.omega.nrows()
    }

    pub fn atoms(&self) -> usize {
        self.omega.ncols()
    }

    pub fn users(&self) -> usize {
        self.p.len()
    }

    /// `e^{j Omega}` for one layer (zero-based).
    pub fn layer_phasors(&self, layer: usize) -> Vec<Complex64> {
        self.omega
            .row(layer)
            .iter()
            .map(|&w| Complex64::from_polar(1.0, w))
            .collect()
    }

    fn check(&self, prop: &PropagationSet) -> Result<()> {
        if self.layers() != prop.layers() || self.atoms() != prop.atoms() {
            return Err(Error::Dimension(format!(
                "phases are {}x{}, propagation expects {}x{}",
                self.layers(),
                self.atoms(),
                prop.layers(),
                prop.atoms()
            )));
        }
        if self.users() != prop.users() {
            return Err(Error::Dimension(format!(
                "{} powers for {} antennas",
                self.users(),
                prop.users()
            )));
        }
        Ok(())
    }
}

/// `diag(e^{j Omega_1}, ..., e^{j Omega_M})`.
pub fn phase_matrix(omega: &[f64]) -> DMatrix<Complex64> {
    let diag = DVector::from_iterator(
        omega.len(),
        omega.iter().map(|&w| Complex64::from_polar(1.0, w)),
    );
    DMatrix::from_diagonal(&diag)
}

/// Multiplies the rows of `x` by the phasors in place, i.e. `x <- Phi x`.
pub(crate) fn scale_rows(x: &mut DMatrix<Complex64>, phasors: &[Complex64]) {
    for (mut row, &ph) in x.row_iter_mut().zip(phasors) {
        row.iter_mut().for_each(|z| *z *= ph);
    }
}

/// Multiplies the columns of `x` by the phasors in place, i.e. `x <- x Phi`.
pub(crate) fn scale_cols(x: &mut DMatrix<Complex64>, phasors: &[Complex64]) {
    for (mut col, &ph) in x.column_iter_mut().zip(phasors) {
        col.iter_mut().for_each(|z| *z *= ph);
    }
}

/// `G = Phi_Q W_Q ... Phi_2 W_2 Phi_1`.
pub fn transfer_function(omega: &DMatrix<f64>, prop: &PropagationSet) -> Result<DMatrix<Complex64>> {
    if omega.nrows() != prop.layers() || omega.ncols() != prop.atoms() {
        return Err(Error::Dimension(format!(
            "phases are {}x{}, propagation expects {}x{}",
            omega.nrows(),
            omega.ncols(),
            prop.layers(),
            prop.atoms()
        )));
    }
    let m = prop.atoms();
    let row: Vec<f64> = omega.row(0).iter().copied().collect();
    let mut g = phase_matrix(&row);
    for q in 2..=prop.layers() {
        g = prop.layer_matrix(q) * g;
        let phasors: Vec<Complex64> = omega
            .row(q - 1)
            .iter()
            .map(|&w| Complex64::from_polar(1.0, w))
            .collect();
        scale_rows(&mut g, &phasors);
    }
    debug_assert_eq!(g.shape(), (m, m));
    Ok(g)
}

/// `G W_1`, pushed through the layers without forming `G` (`M x K`).
pub fn effective_precoder(state: &SimState, prop: &PropagationSet) -> Result<DMatrix<Complex64>> {
    state.check(prop)?;
    let mut x = prop.w1.clone();
    for q in 1..=prop.layers() {
        if q > 1 {
            x = prop.layer_matrix(q) * x;
        }
        scale_rows(&mut x, &state.layer_phasors(q - 1));
    }
    Ok(x)
}

/// `R_t = G W_1 P P^H W_1^H G^H` with `P = diag(sqrt(p))`.
pub fn covariance(g: &DMatrix<Complex64>, w1: &DMatrix<Complex64>, p: &DVector<f64>) -> DMatrix<Complex64> {
    let mut b = g * w1;
    for (mut col, &pk) in b.column_iter_mut().zip(p.iter()) {
        col *= Complex64::from(pk.max(0.0).sqrt());
    }
    &b * b.adjoint()
}

/// Unit-norm response of the output-layer planar array.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    pub a: DVector<Complex64>,
    pub theta: f64,
    pub phi: f64,
}

/// `a(theta, phi) = a_x ⊗ a_z / sqrt(M_x M_z)` for a half-wavelength pitch.
pub fn steering_vector(theta: f64, phi: f64, atoms_x: usize, atoms_z: usize) -> Result<SteeringVector> {
    steering_vector_scaled(theta, phi, atoms_x, atoms_z, 1.0)
}

/// Same as [`steering_vector`], with the phase progression scaled by
/// `pitch_factor = 2 * atom_spacing / lambda`.
pub fn steering_vector_scaled(
    theta: f64,
    phi: f64,
    atoms_x: usize,
    atoms_z: usize,
    pitch_factor: f64,
) -> Result<SteeringVector> {
    if !(theta > 0.0 && theta < PI && phi > -PI / 2.0 && phi < PI / 2.0) {
        return Err(Error::AngleOutOfRange { theta, phi });
    }
    let ux = PI * pitch_factor * theta.sin() * phi.sin();
    let uz = PI * pitch_factor * theta.cos();
    let norm = 1.0 / ((atoms_x * atoms_z) as f64).sqrt();
    let mut a = DVector::zeros(atoms_x * atoms_z);
    for ix in 0..atoms_x {
        let ax = Complex64::from_polar(1.0, -(ix as f64) * ux);
        for iz in 0..atoms_z {
            let az = Complex64::from_polar(1.0, -(iz as f64) * uz);
            a[ix * atoms_z + iz] = ax * az * norm;
        }
    }
    Ok(SteeringVector { a, theta, phi })
}

/// `a^H R_t a`, imaginary rounding residue discarded.
pub fn beampattern_gain(a: &DVector<Complex64>, rt: &DMatrix<Complex64>) -> f64 {
    let v = rt * a;
    a.dotc(&v).re
}

/// `a^H R_t a` evaluated as `sum_k p_k |a^H b_k|^2` from the columns of `G W_1`.
pub fn gain_from_precoder(a: &DVector<Complex64>, b: &DMatrix<Complex64>, p: &DVector<f64>) -> f64 {
    b.column_iter()
        .zip(p.iter())
        .map(|(col, &pk)| pk * a.dotc(&col).norm_sqr())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{build_geometry, default_user_positions, ScenarioConfig};
    use crate::propagation::build_propagation;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_prop(q: usize, mx: usize, mz: usize, k: usize) -> PropagationSet {
        let mut cfg = ScenarioConfig::default();
        cfg.atoms_x = mx;
        cfg.atoms_z = mz;
        cfg.layers = q;
        cfg.users = k;
        cfg.user_positions = default_user_positions(k);
        build_propagation(&build_geometry(&cfg).unwrap(), &cfg).unwrap()
    }

    fn random_omega(q: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream(seed, 0);
        DMatrix::from_fn(q, m, |_, _| rng.random::<f64>() * 2.0 * PI)
    }

    fn max_diff(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn phase_matrix_cases() {
        assert_eq!(phase_matrix(&[0.0; 3]), DMatrix::identity(3, 3));
        let neg = phase_matrix(&[PI; 3]);
        assert!(max_diff(&neg, &(-DMatrix::<Complex64>::identity(3, 3))) < 1e-15);
        let w = [0.3, -1.2, 2.5];
        let wrapped: Vec<f64> = w.iter().map(|x| x + 2.0 * PI).collect();
        assert!(max_diff(&phase_matrix(&w), &phase_matrix(&wrapped)) < 1e-14);
        assert!(phase_matrix(&w).diagonal().iter().all(|z| (z.norm() - 1.0).abs() < 1e-15));
    }

    #[test]
    fn single_layer_transfer_is_phase_matrix() {
        let prop = small_prop(1, 2, 2, 2);
        let omega = random_omega(1, 4, 3);
        let g = transfer_function(&omega, &prop).unwrap();
        let row: Vec<f64> = omega.row(0).iter().copied().collect();
        assert_eq!(g, phase_matrix(&row));
    }

    #[test]
    fn zero_phases_give_product_of_layers() {
        let prop = small_prop(3, 2, 2, 2);
        let g = transfer_function(&DMatrix::zeros(3, 4), &prop).unwrap();
        let want = prop.layer_matrix(3) * prop.layer_matrix(2);
        assert!(max_diff(&g, &want) < 1e-14 * want.norm());
    }

    #[test]
    fn transfer_matches_scalar_accumulation() {
        let prop = small_prop(3, 2, 2, 2);
        let omega = random_omega(3, 4, 9);
        let g = transfer_function(&omega, &prop).unwrap();
        let e = |q: usize, m: usize| Complex64::from_polar(1.0, omega[(q, m)]);
        let w2 = prop.layer_matrix(2);
        let w3 = prop.layer_matrix(3);
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = Complex64::new(0.0, 0.0);
                for l in 0..4 {
                    acc += e(2, i) * w3[(i, l)] * e(1, l) * w2[(l, j)] * e(0, j);
                }
                assert!((g[(i, j)] - acc).norm() < 1e-14 * acc.norm().max(1e-300));
            }
        }
    }

    #[test]
    fn transfer_rejects_bad_shape() {
        let prop = small_prop(2, 2, 2, 2);
        assert!(matches!(
            transfer_function(&DMatrix::zeros(3, 4), &prop),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn effective_precoder_matches_full_product() {
        let prop = small_prop(4, 3, 2, 3);
        let omega = random_omega(4, 6, 1);
        let state = SimState::new(omega.clone(), DVector::from_element(3, 0.01));
        let b = effective_precoder(&state, &prop).unwrap();
        let want = transfer_function(&omega, &prop).unwrap() * &prop.w1;
        assert!(max_diff(&b, &want) < 1e-13 * want.norm());
    }

    #[test]
    fn covariance_properties() {
        let prop = small_prop(3, 2, 2, 2);
        let g = transfer_function(&random_omega(3, 4, 2), &prop).unwrap();
        let zero = covariance(&g, &prop.w1, &DVector::zeros(2));
        assert!(zero.iter().all(|z| z.norm() == 0.0));

        let p = DVector::from_vec(vec![0.3, 0.7]);
        let rt = covariance(&g, &prop.w1, &p);
        assert!((&rt - rt.adjoint()).norm() <= 1e-12 * rt.norm());
        let gw = &g * &prop.w1;
        let trace: f64 = (0..2).map(|k| p[k] * gw.column(k).norm_squared()).sum();
        assert_relative_eq!(rt.trace().re, trace, max_relative = 1e-12);
        let eig = rt.clone().symmetric_eigenvalues();
        let top = eig.max();
        assert!(eig.iter().all(|&l| l >= -1e-12 * top));
        assert!(eig.iter().filter(|&&l| l > 1e-10 * top).count() <= 2);

        // single user: rank-one outer product
        let single = small_prop(3, 2, 2, 1);
        let g1 = transfer_function(&random_omega(3, 4, 2), &single).unwrap();
        let rt1 = covariance(&g1, &single.w1, &DVector::from_element(1, 0.5));
        let v = &g1 * single.w1.column(0);
        let outer = (&v * v.adjoint()) * Complex64::from(0.5);
        assert!(max_diff(&rt1, &outer) < 1e-14 * outer.norm());
    }

    #[test]
    fn steering_vector_cases() {
        let s = steering_vector(PI / 2.0, 0.0, 3, 4).unwrap();
        let v = 1.0 / 12f64.sqrt();
        assert!(s.a.iter().all(|z| (z - Complex64::new(v, 0.0)).norm() < 1e-15));

        let one = steering_vector(1.0, 0.3, 1, 1).unwrap();
        assert_eq!(one.a.len(), 1);
        assert!((one.a[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);

        let s = steering_vector(PI / 2.0, PI / 2.0 - 1e-12, 2, 2).unwrap();
        let want = [0.5, 0.5, -0.5, -0.5];
        for (z, w) in s.a.iter().zip(want) {
            assert!((z - Complex64::new(w, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn steering_vector_rejects_out_of_range() {
        for (t, p) in [(0.0, 0.0), (PI, 0.0), (1.0, PI / 2.0), (1.0, -PI / 2.0), (f64::NAN, 0.0)] {
            assert!(steering_vector(t, p, 2, 2).is_err());
        }
    }

    #[test]
    fn steering_vector_unit_norm_on_grid() {
        for i in 1..10 {
            for j in 0..10 {
                let theta = i as f64 * PI / 10.0;
                let phi = -PI / 2.0 + (j as f64 + 0.5) * PI / 10.0;
                let s = steering_vector(theta, phi, 10, 10).unwrap();
                assert!((s.a.norm() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn beampattern_cases() {
        let a = steering_vector(1.1, 0.4, 2, 2).unwrap().a;
        let eye = DMatrix::<Complex64>::identity(4, 4);
        assert_relative_eq!(beampattern_gain(&a, &eye), 1.0, max_relative = 1e-14);
        let rt = (&a * a.adjoint()) * Complex64::from(3.5);
        assert_relative_eq!(beampattern_gain(&a, &rt), 3.5, max_relative = 1e-14);

        let mut rng = stream(4, 0);
        let x = DMatrix::from_fn(4, 3, |_, _| Complex64::new(rng.random(), rng.random()));
        let rt = &x * x.adjoint();
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..4 {
            for n in 0..4 {
                acc += a[m].conj() * rt[(m, n)] * a[n];
            }
        }
        assert!(acc.im.abs() <= 1e-10 * acc.re);
        assert_relative_eq!(beampattern_gain(&a, &rt), acc.re, max_relative = 1e-13);
    }

    #[test]
    fn gain_linear_in_power_and_matches_covariance() {
        let prop = small_prop(2, 2, 3, 2);
        let state = SimState::new(random_omega(2, 6, 8), DVector::from_vec(vec![0.2, 0.05]));
        let a = steering_vector(1.3, 0.2, 2, 3).unwrap().a;
        let b = effective_precoder(&state, &prop).unwrap();
        let g = transfer_function(&state.omega, &prop).unwrap();
        let direct = beampattern_gain(&a, &covariance(&g, &prop.w1, &state.p));
        let fast = gain_from_precoder(&a, &b, &state.p);
        assert_relative_eq!(direct, fast, max_relative = 1e-12);
        let doubled = gain_from_precoder(&a, &b, &(&state.p * 2.0));
        assert_relative_eq!(doubled, 2.0 * fast, max_relative = 1e-14);
    }

    #[test]
    fn singular_values_ignore_outer_layer_phases() {
        let prop = small_prop(3, 2, 2, 2);
        let omega = random_omega(3, 4, 21);
        let base = transfer_function(&omega, &prop).unwrap().singular_values();
        let mut other = omega.clone();
        let redraw = random_omega(3, 4, 22);
        other.set_row(0, &redraw.row(0));
        other.set_row(2, &redraw.row(2));
        let sv = transfer_function(&other, &prop).unwrap().singular_values();
        let mut a: Vec<f64> = base.iter().copied().collect();
        let mut b: Vec<f64> = sv.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10 * a[3]);
        }
    }
}
