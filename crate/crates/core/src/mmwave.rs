//! Reflecting-array far field, directional gains, cascaded gain, path loss and
//! spectral efficiency.
//!
//! Array quantities are written in the panel frame: `z` along the normal,
//! elements in the `x`-`y` plane with row index `m` along `x` and column
//! index `n` along `y`. For a direction `(theta, phi)` about the normal the
//! direction cosines are `u = sin(theta)cos(phi)`, `v = sin(theta)sin(phi)`,
//! `w = cos(theta)`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LerisError, Result};
use crate::geometry::{Frame, Vec3};
use crate::optical::VcselId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LerisPanel {
    pub id: u32,
    pub center: [f64; 3],
    pub normal: [f64; 3],
    pub m_rows: usize,
    pub n_cols: usize,
    pub element_side_m: f64,
    pub efficiency: f64,
    #[serde(default)]
    pub vcsel_ids: Vec<VcselId>,
}

impl LerisPanel {
    pub fn center(&self) -> Vec3 {
        Vec3::from(self.center)
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.normal).normalize()
    }

    pub fn frame(&self) -> Frame {
        Frame::from_normal(&Vec3::from(self.normal)).expect("panel normal validated")
    }

    /// Position of a world point in the panel frame, origin at the centre.
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.frame().to_local(&(p - self.center()))
    }

    pub fn elements(&self) -> usize {
        self.m_rows * self.n_cols
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.m_rows == 0 || self.n_cols == 0 {
            v.push(format!("panel {} needs at least one element per side", self.id));
        }
        if !(self.element_side_m > 0.0) {
            v.push(format!("panel {} element side must be positive", self.id));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            v.push(format!("panel {} efficiency must lie in (0, 1]", self.id));
        }
        if !(Vec3::from(self.normal).norm() > 0.0) {
            v.push(format!("panel {} normal must be non-zero", self.id));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmWaveParams {
    pub wavelength_m: f64,
    pub tx_power_w: f64,
    /// Linear AP antenna gain.
    pub tx_gain: f64,
    /// Linear noise power at the UE.
    pub noise_power: f64,
    /// Exponent per segment; the last entry repeats for longer routes.
    pub path_loss_exponents: Vec<f64>,
    pub ref_distance_m: f64,
    pub ue_directivity_rad: f64,
}

impl Default for MmWaveParams {
    fn default() -> Self {
        MmWaveParams {
            wavelength_m: 1e-2,
            tx_power_w: 1.0,
            tx_gain: 10.0,
            noise_power: 1e-13,
            path_loss_exponents: vec![2.0],
            ref_distance_m: 1.0,
            ue_directivity_rad: PI / 3.0,
        }
    }
}

impl MmWaveParams {
    pub fn k0(&self) -> f64 {
        2.0 * PI / self.wavelength_m
    }

    /// Transmit SNR `P_t / sigma^2`.
    pub fn gamma_t(&self) -> f64 {
        self.tx_power_w / self.noise_power
    }

    pub fn exponent(&self, segment: usize) -> f64 {
        let e = &self.path_loss_exponents;
        e[segment.min(e.len() - 1)]
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let pos = [
            ("wavelength_m", self.wavelength_m),
            ("tx_power_w", self.tx_power_w),
            ("tx_gain", self.tx_gain),
            ("noise_power", self.noise_power),
            ("ref_distance_m", self.ref_distance_m),
            ("ue_directivity_rad", self.ue_directivity_rad),
        ];
        for (n, x) in pos {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("mmwave parameter {n} must be positive"));
            }
        }
        if self.ue_directivity_rad > PI {
            v.push("UE directivity angle must not exceed pi".into());
        }
        if self.path_loss_exponents.is_empty() || self.path_loss_exponents.iter().any(|e| !(*e > 0.0)) {
            v.push("path loss exponents must be a non-empty list of positive values".into());
        }
        v
    }
}

/// Which index enters the third term of the element path delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PathDelay {
    /// Row index in both terms, as printed.
    #[default]
    Literal,
    /// Column index in the third term.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationDomain {
    /// Front half-space of the panel.
    #[default]
    Hemisphere,
    FullSphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RateFormula {
    /// `log2(1 + l_p G_t gamma_t G_r)`.
    #[default]
    Physical,
    /// Same with one more division by the noise power, as printed.
    Literal,
}

/// Uniform midpoint grid over the sphere or the front hemisphere.
///
/// The grid's polar axis is the panel column axis, so every grid row has a
/// constant column direction cosine. Halving from twice the step to the
/// step must change the pattern integral by less than `convergence_tol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub step_rad: f64,
    pub domain: IntegrationDomain,
    pub convergence_tol: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            step_rad: 0.5f64.to_radians(),
            domain: IntegrationDomain::Hemisphere,
            convergence_tol: 0.01,
        }
    }
}

/// One grid row: its column cosine, quadrature weight and the `(u, w)` pairs.
struct GridRow {
    v: f64,
    weight: f64,
    cols: Vec<(f64, f64)>,
}

impl GridSpec {
    pub fn with_step(self, step_rad: f64) -> Self {
        GridSpec { step_rad, ..self }
    }

    fn rows(&self) -> Result<Vec<GridRow>> {
        if !(self.step_rad > 0.0 && self.step_rad <= PI / 4.0) {
            return Err(LerisError::InvalidArgument(format!(
                "quadrature step {} rad outside (0, pi/4]",
                self.step_rad
            )));
        }
        let nr = (PI / self.step_rad).round().max(4.0) as usize;
        let dt = PI / nr as f64;
        let span = match self.domain {
            IntegrationDomain::Hemisphere => PI,
            IntegrationDomain::FullSphere => 2.0 * PI,
        };
        let nc = (span / dt).round() as usize;
        let dp = span / nc as f64;
        let cols: Vec<(f64, f64)> = (0..nc)
            .map(|j| ((j as f64 + 0.5) * dp).sin_cos())
            .map(|(s, c)| (c, s))
            .collect();
        Ok((0..nr)
            .map(|i| {
                let (st, ct) = ((i as f64 + 0.5) * dt).sin_cos();
                GridRow {
                    v: ct,
                    weight: st * dt * dp,
                    cols: cols.iter().map(|(cp, sp)| (st * cp, st * sp)).collect(),
                }
            })
            .collect())
    }
}

/// Element phases, row-major, zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseProfile {
    pub rows: usize,
    pub cols: usize,
    pub phases: Vec<f64>,
}

impl PhaseProfile {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        PhaseProfile {
            rows,
            cols,
            phases: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut phases = Vec::with_capacity(rows * cols);
        for m in 0..rows {
            for n in 0..cols {
                phases.push(f(m, n));
            }
        }
        PhaseProfile { rows, cols, phases }
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.phases[m * self.cols + n]
    }

    /// `Some((r, c))` when `phase(m, n) = r[m] + c * (n + 1)`.
    pub fn separable(&self) -> Option<(Vec<f64>, f64)> {
        let c = if self.cols > 1 { self.get(0, 1) - self.get(0, 0) } else { 0.0 };
        let mut r = Vec::with_capacity(self.rows);
        for m in 0..self.rows {
            let base = self.get(m, 0);
            for n in 1..self.cols {
                let want = base + c * n as f64;
                let got = self.get(m, n);
                if (got - want).abs() > 1e-9 * want.abs().max(1.0) {
                    return None;
                }
            }
            r.push(base - c);
        }
        Some((r, c))
    }

    pub fn shifted(&self, delta: f64) -> Self {
        PhaseProfile {
            rows: self.rows,
            cols: self.cols,
            phases: self.phases.iter().map(|p| p + delta).collect(),
        }
    }
}

/// A panel seen from one transmitting node toward one receiving node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArrayGeometry {
    pub m_rows: usize,
    pub n_cols: usize,
    pub element_side_m: f64,
    pub k0: f64,
    /// Transmitting node, panel frame.
    pub tx: Vec3,
    /// Receiving node centre, panel frame.
    pub rx: Vec3,
    pub path_delay: PathDelay,
}

impl ArrayGeometry {
    pub fn new(panel: &LerisPanel, wavelength_m: f64, tx: Vec3, rx: Vec3, path_delay: PathDelay) -> Self {
        ArrayGeometry {
            m_rows: panel.m_rows,
            n_cols: panel.n_cols,
            element_side_m: panel.element_side_m,
            k0: 2.0 * PI / wavelength_m,
            tx,
            rx,
            path_delay,
        }
    }

    /// Geometry for a panel fed from a world-frame source, with the panel
    /// centre as the receiving reference.
    pub fn for_source(panel: &LerisPanel, wavelength_m: f64, source: &Vec3, path_delay: PathDelay) -> Self {
        ArrayGeometry::new(panel, wavelength_m, panel.to_local(source), Vec3::zeros(), path_delay)
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        if m < 1 || m > self.m_rows || n < 1 || n > self.n_cols {
            return Err(LerisError::InvalidArgument(format!(
                "element ({m}, {n}) outside {}x{}",
                self.m_rows, self.n_cols
            )));
        }
        Ok(())
    }

    fn zeta_uvw(&self, m: usize, n: usize, u: f64, v: f64, w: f64) -> f64 {
        let d = self.element_side_m;
        let r = self.tx - self.rx;
        d * ((m as f64 - 0.5) * u + (n as f64 - 0.5) * v) + r.x * u + r.y * v + r.z * w
    }

    fn omega_uv(&self, m: usize, n: usize, u: f64, v: f64) -> f64 {
        let d = self.element_side_m;
        let r = self.tx - self.rx;
        let k = match self.path_delay {
            PathDelay::Literal => m,
            PathDelay::Symmetric => n,
        };
        let a = r.x - d * (m as f64 - 0.5) * u;
        let c = r.z - d * (k as f64 - 0.5) * v;
        self.k0 * (a * a + r.y * r.y + c * c).sqrt()
    }

    /// Array factor at direction cosines `(u, v, w)`.
    fn array_factor_uvw(&self, profile: &PhaseProfile, u: f64, v: f64, w: f64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 1..=self.m_rows {
            for n in 1..=self.n_cols {
                let ph = self.k0 * self.zeta_uvw(m, n, u, v, w)
                    + self.omega_uv(m, n, u, v)
                    + profile.get(m - 1, n - 1);
                acc += Complex64::from_polar(1.0, ph);
            }
        }
        acc
    }

    /// `|F|^2` for a separable profile, dropping the global phase.
    fn power_separable(&self, r: &[f64], c: f64, u: f64, v: f64) -> f64 {
        let d = self.element_side_m;
        let mut row = Complex64::new(0.0, 0.0);
        for (i, rm) in r.iter().enumerate() {
            let m = i + 1;
            let ph = self.k0 * d * (m as f64 - 0.5) * u + self.omega_uv(m, 1, u, v) + rm;
            row += Complex64::from_polar(1.0, ph);
        }
        row.norm_sqr() * dirichlet_sq(self.n_cols, self.k0 * d * v + c)
    }

    fn check_shape(&self, profile: &PhaseProfile) -> Result<()> {
        if profile.rows != self.m_rows || profile.cols != self.n_cols || profile.phases.len() != self.elements() {
            return Err(LerisError::InvalidArgument(format!(
                "profile shape {}x{} does not match panel {}x{}",
                profile.rows, profile.cols, self.m_rows, self.n_cols
            )));
        }
        if profile.phases.iter().any(|p| !p.is_finite()) {
            return Err(LerisError::InvalidArgument("profile has non-finite phases".into()));
        }
        Ok(())
    }

    fn elements(&self) -> usize {
        self.m_rows * self.n_cols
    }

    fn pattern_sum(&self, profile: &PhaseProfile, grid: &GridSpec) -> Result<f64> {
        let rows = grid.rows()?;
        let sep = match self.path_delay {
            PathDelay::Literal => profile.separable(),
            PathDelay::Symmetric => None,
        };
        let mut total = 0.0;
        for row in &rows {
            let mut acc = 0.0;
            for &(u, w) in &row.cols {
                acc += match &sep {
                    Some((r, c)) => self.power_separable(r, *c, u, row.v),
                    None => self.array_factor_uvw(profile, u, row.v, w).norm_sqr(),
                };
            }
            total += acc * row.weight;
        }
        Ok(total)
    }
}

/// `|sum_{n=1..N} e^{j n x}|^2`.
fn dirichlet_sq(n: usize, x: f64) -> f64 {
    let s = (0.5 * x).sin();
    if s.abs() < 1e-7 {
        // near a grating peak: sum the series directly
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 1..=n {
            acc += Complex64::from_polar(1.0, k as f64 * x);
        }
        return acc.norm_sqr();
    }
    let t = (0.5 * n as f64 * x).sin();
    t * t / (s * s)
}

fn uvw(theta: f64, phi: f64) -> (f64, f64, f64) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (st * cp, st * sp, ct)
}

/// Geometric phase term for element `(m, n)`, one-based.
pub fn geometric_phase(geom: &ArrayGeometry, m: usize, n: usize, theta: f64, phi: f64) -> Result<f64> {
    geom.check(m, n)?;
    let (u, v, w) = uvw(theta, phi);
    Ok(geom.zeta_uvw(m, n, u, v, w))
}

/// Path-delay phase for element `(m, n)`, one-based.
pub fn path_delay_phase(geom: &ArrayGeometry, m: usize, n: usize, theta: f64, phi: f64) -> Result<f64> {
    geom.check(m, n)?;
    let (u, v, _) = uvw(theta, phi);
    Ok(geom.omega_uv(m, n, u, v))
}

/// Phases that focus the array toward `(theta_hat, phi_hat)`.
pub fn steering_phase_profile(geom: &ArrayGeometry, theta_hat: f64, phi_hat: f64) -> PhaseProfile {
    let (u, v, _) = uvw(theta_hat, phi_hat);
    let kd = geom.k0 * geom.element_side_m;
    PhaseProfile::from_fn(geom.m_rows, geom.n_cols, |i, j| {
        let (m, n) = (i + 1, j + 1);
        -kd * (m as f64 * u + n as f64 * v) - geom.omega_uv(m, n, u, v)
    })
}

pub fn array_factor(geom: &ArrayGeometry, profile: &PhaseProfile, theta: f64, phi: f64) -> Result<Complex64> {
    geom.check_shape(profile)?;
    let (u, v, w) = uvw(theta, phi);
    Ok(geom.array_factor_uvw(profile, u, v, w))
}

/// `\iint |F|^2 dOmega` over the grid's domain, with the halving check.
pub fn pattern_integral(geom: &ArrayGeometry, profile: &PhaseProfile, grid: &GridSpec) -> Result<f64> {
    geom.check_shape(profile)?;
    let fine = geom.pattern_sum(profile, grid)?;
    let coarse = geom.pattern_sum(profile, &grid.with_step(2.0 * grid.step_rad))?;
    check_convergence(coarse, fine, grid.convergence_tol)?;
    Ok(fine)
}

fn check_convergence(coarse: f64, fine: f64, tol: f64) -> Result<()> {
    let rel = ((fine - coarse) / fine).abs();
    if !(rel < tol) {
        return Err(LerisError::Quadrature {
            coarse,
            fine,
            relative_change: rel,
        });
    }
    Ok(())
}

/// Normalized directional gain of a panel.
pub fn directional_gain(
    geom: &ArrayGeometry,
    profile: &PhaseProfile,
    theta: f64,
    phi: f64,
    efficiency: f64,
    grid: &GridSpec,
) -> Result<f64> {
    let f = array_factor(geom, profile, theta, phi)?;
    let i = pattern_integral(geom, profile, grid)?;
    Ok(efficiency * 4.0 * PI * f.norm_sqr() / i)
}

pub fn max_gain(panel: &LerisPanel) -> f64 {
    panel.efficiency * panel.elements() as f64
}

pub fn effective_aperture(panel: &LerisPanel, wavelength_m: f64) -> f64 {
    panel.elements() as f64 * wavelength_m * wavelength_m / (4.0 * PI)
}

/// Product of `A_eff * G_max` over the perfectly steered hops.
pub fn cascaded_gain(panels: &[&LerisPanel], wavelength_m: f64) -> f64 {
    panels
        .iter()
        .map(|p| effective_aperture(p, wavelength_m) * max_gain(p))
        .product()
}

pub fn ue_antenna_gain(theta_u: f64, theta_m: f64) -> f64 {
    if theta_u.abs() <= theta_m {
        2.0 * PI / theta_m
    } else {
        0.0
    }
}

/// Free-space loss at the reference distance.
pub fn reference_loss(params: &MmWaveParams) -> f64 {
    let x = params.wavelength_m / (4.0 * PI * params.ref_distance_m);
    x * x
}

pub fn path_loss(segment_lengths: &[f64], params: &MmWaveParams) -> Result<f64> {
    if segment_lengths.is_empty() {
        return Err(LerisError::InvalidArgument("route has no segments".into()));
    }
    let c0 = reference_loss(params);
    let mut l = 1.0;
    for (i, d) in segment_lengths.iter().enumerate() {
        if !(*d > 0.0) {
            return Err(LerisError::InvalidArgument(format!("segment {i} has length {d}")));
        }
        l *= c0 * (d / params.ref_distance_m).powf(-params.exponent(i));
    }
    Ok(l)
}

pub fn spectral_efficiency(route_gain: f64, path_loss: f64, params: &MmWaveParams, formula: RateFormula) -> f64 {
    spectral_efficiency_at(route_gain, path_loss, params.tx_gain, params.gamma_t(), params.noise_power, formula)
}

/// Rate with an explicit transmit SNR, for sweeps over `gamma_t`.
pub fn spectral_efficiency_at(
    route_gain: f64,
    path_loss: f64,
    tx_gain: f64,
    gamma_t: f64,
    noise_power: f64,
    formula: RateFormula,
) -> f64 {
    let snr = path_loss * tx_gain * gamma_t * route_gain;
    let snr = match formula {
        RateFormula::Physical => snr,
        RateFormula::Literal => snr / noise_power,
    };
    if !(snr > 0.0) {
        return 0.0;
    }
    snr.ln_1p() / std::f64::consts::LN_2
}

/// Per-row Gram matrices that make the pattern integral of any separable
/// profile on one panel an `O(rows * M^2)` evaluation.
///
/// For row `r` of the grid the stored matrix is
/// `Q_r = sum_cols weight * g g^H` with `g_m = exp(j(k0 D (m - 1/2) u + omega_m(u, v)))`;
/// the column sum of a separable profile depends only on `v` and contributes
/// a Dirichlet kernel factor.
pub struct RowGram {
    m: usize,
    kd: f64,
    n_cols: usize,
    /// Column cosine per grid row.
    rows: Vec<f64>,
    /// Packed upper triangles, off-diagonal entries doubled.
    re: Vec<f64>,
    im: Vec<f64>,
}

impl RowGram {
    pub fn build(geom: &ArrayGeometry, grid: &GridSpec) -> Result<RowGram> {
        if geom.path_delay != PathDelay::Literal {
            return Err(LerisError::InvalidArgument(
                "the cached pattern integral needs the row-only path delay".into(),
            ));
        }
        let m = geom.m_rows;
        let tri = m * (m + 1) / 2;
        let grid_rows = grid.rows()?;
        let mut re = vec![0.0; tri * grid_rows.len()];
        let mut im = vec![0.0; tri * grid_rows.len()];
        let mut rows = Vec::with_capacity(grid_rows.len());
        let kd = geom.k0 * geom.element_side_m;
        let mut gr = vec![0.0; m];
        let mut gi = vec![0.0; m];
        for (ri, row) in grid_rows.iter().enumerate() {
            let qre = &mut re[ri * tri..(ri + 1) * tri];
            let qim = &mut im[ri * tri..(ri + 1) * tri];
            for &(u, _) in &row.cols {
                for i in 0..m {
                    let ph = kd * (i as f64 + 0.5) * u + geom.omega_uv(i + 1, 1, u, row.v);
                    let (s, c) = ph.sin_cos();
                    gr[i] = c;
                    gi[i] = s;
                }
                let mut k = 0;
                for i in 0..m {
                    let (ar, ai) = (gr[i], gi[i]);
                    for j in i..m {
                        // g_i * conj(g_j)
                        qre[k] += ar * gr[j] + ai * gi[j];
                        qim[k] += ai * gr[j] - ar * gi[j];
                        k += 1;
                    }
                }
            }
            let mut k = 0;
            for i in 0..m {
                for j in i..m {
                    let f = if i == j { row.weight } else { 2.0 * row.weight };
                    qre[k] *= f;
                    qim[k] *= f;
                    k += 1;
                }
            }
            rows.push(row.v);
        }
        Ok(RowGram {
            m,
            kd,
            n_cols: geom.n_cols,
            rows,
            re,
            im,
        })
    }

    /// Pattern integral for `phase(m, n) = r[m] + c (n + 1)`.
    pub fn integral(&self, r: &[f64], c: f64) -> f64 {
        let m = self.m;
        let tri = m * (m + 1) / 2;
        let a: Vec<Complex64> = r.iter().map(|x| Complex64::from_polar(1.0, *x)).collect();
        let mut bre = Vec::with_capacity(tri);
        let mut bim = Vec::with_capacity(tri);
        for i in 0..m {
            for j in i..m {
                let b = a[i] * a[j].conj();
                bre.push(b.re);
                bim.push(b.im);
            }
        }
        let mut total = 0.0;
        for (ri, v) in self.rows.iter().enumerate() {
            let qre = &self.re[ri * tri..(ri + 1) * tri];
            let qim = &self.im[ri * tri..(ri + 1) * tri];
            let mut s = 0.0;
            for k in 0..tri {
                s += qre[k] * bre[k] - qim[k] * bim[k];
            }
            total += s * dirichlet_sq(self.n_cols, self.kd * v + c);
        }
        total
    }
}

/// Gain of a route's final panel toward the true UE when steered toward the
/// estimated one. Pattern integrals are cached per panel and source.
pub struct FinalGainEvaluator {
    pub grid: GridSpec,
    pub path_delay: PathDelay,
    wavelength_m: f64,
    cache: Mutex<HashMap<(u32, [u64; 3]), Arc<OnceLock<std::result::Result<Arc<RowGram>, LerisError>>>>>,
}

impl FinalGainEvaluator {
    pub fn new(wavelength_m: f64, grid: GridSpec, path_delay: PathDelay) -> Self {
        FinalGainEvaluator {
            grid,
            path_delay,
            wavelength_m,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn gram(&self, panel: &LerisPanel, geom: &ArrayGeometry) -> Result<Arc<RowGram>> {
        let key = (panel.id, [geom.tx.x.to_bits(), geom.tx.y.to_bits(), geom.tx.z.to_bits()]);
        let cell = {
            let mut map = self.cache.lock().expect("gain cache poisoned");
            map.entry(key).or_default().clone()
        };
        cell.get_or_init(|| {
            let fine = RowGram::build(geom, &self.grid)?;
            let coarse = RowGram::build(geom, &self.grid.with_step(2.0 * self.grid.step_rad))?;
            // validate on the broadside beam
            let p = steering_phase_profile(geom, 0.0, 0.0);
            let (r, c) = p.separable().expect("steering profile is separable");
            check_convergence(coarse.integral(&r, c), fine.integral(&r, c), self.grid.convergence_tol)?;
            Ok(Arc::new(fine))
        })
        .clone()
    }

    /// `G_L` for a panel fed from `source`, steered at `estimated` and
    /// evaluated toward `actual` (world coordinates).
    pub fn gain(&self, panel: &LerisPanel, source: &Vec3, estimated: &Vec3, actual: &Vec3) -> Result<f64> {
        let geom = ArrayGeometry::for_source(panel, self.wavelength_m, source, self.path_delay);
        let (th, ph) = crate::geometry::direction_angles(&panel.to_local(estimated));
        let (tu, pu) = crate::geometry::direction_angles(&panel.to_local(actual));
        let profile = steering_phase_profile(&geom, th, ph);
        let f = array_factor(&geom, &profile, tu, pu)?;
        let integral = match (self.path_delay, profile.separable()) {
            (PathDelay::Literal, Some((r, c))) => self.gram(panel, &geom)?.integral(&r, c),
            _ => pattern_integral(&geom, &profile, &self.grid)?,
        };
        Ok(panel.efficiency * 4.0 * PI * f.norm_sqr() / integral)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RouteGain {
    pub cascaded: f64,
    pub aperture: f64,
    pub final_gain: f64,
    pub ue_gain: f64,
}

impl RouteGain {
    pub fn total(&self) -> f64 {
        self.cascaded * self.aperture * self.final_gain * self.ue_gain
    }
}

/// Gain accumulated along `panels`, the last of which is fed from `source`
/// and steered at the estimated UE position.
pub fn total_route_gain(
    panels: &[&LerisPanel],
    source: &Vec3,
    estimated_ue: &Vec3,
    true_ue: &Vec3,
    theta_u: f64,
    params: &MmWaveParams,
    evaluator: &FinalGainEvaluator,
) -> Result<RouteGain> {
    let (last, head) = panels
        .split_last()
        .ok_or_else(|| LerisError::InvalidArgument("empty route".into()))?;
    let ue_gain = ue_antenna_gain(theta_u, params.ue_directivity_rad);
    let final_gain = if ue_gain > 0.0 {
        evaluator.gain(last, source, estimated_ue, true_ue)?
    } else {
        0.0
    };
    Ok(RouteGain {
        cascaded: cascaded_gain(head, params.wavelength_m),
        aperture: effective_aperture(last, params.wavelength_m),
        final_gain,
        ue_gain,
    })
}
