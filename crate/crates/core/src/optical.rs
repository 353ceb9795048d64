//! Gaussian-beam VCSEL emission, received optical power and receiver noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LerisError, Result};
use crate::ext::Ext;
use crate::geometry::{Frame, Vec3};

use std::f64::consts::{FRAC_PI_2, PI};

/// One transverse lasing mode of a VCSEL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VcselMode {
    pub transmit_power_w: f64,
    pub beam_waist_m: f64,
    pub wavelength_m: f64,
}

impl VcselMode {
    pub fn new(transmit_power_w: f64, beam_waist_m: f64, wavelength_m: f64) -> Result<Self> {
        let m = VcselMode {
            transmit_power_w,
            beam_waist_m,
            wavelength_m,
        };
        let v = m.validate();
        if v.is_empty() {
            Ok(m)
        } else {
            Err(LerisError::Validation(v))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.transmit_power_w > 0.0 && self.transmit_power_w.is_finite()) {
            v.push("VCSEL transmit power must be positive".into());
        }
        if !(self.beam_waist_m > 0.0 && self.beam_waist_m.is_finite()) {
            v.push("beam waist must be positive".into());
        }
        if !(self.wavelength_m > 0.0 && self.wavelength_m.is_finite()) {
            v.push("optical wavelength must be positive".into());
        }
        v
    }

    pub fn rayleigh_range_m(&self) -> f64 {
        PI * self.beam_waist_m * self.beam_waist_m / self.wavelength_m
    }

    pub fn divergence_rad(&self) -> f64 {
        self.wavelength_m / (PI * self.beam_waist_m)
    }
}

/// Beam radius at axial distance `d`.
pub fn spot_size(mode: &VcselMode, d: f64) -> Result<f64> {
    if !(d >= 0.0) {
        return Err(LerisError::InvalidArgument(format!("axial distance {d} is negative")));
    }
    let x = d / mode.rayleigh_range_m();
    Ok(mode.beam_waist_m * (1.0 + x * x).sqrt())
}

/// Intensity at radial offset `r` and axial distance `d`.
pub fn gaussian_intensity(mode: &VcselMode, r: f64, d: f64) -> Result<f64> {
    let w = spot_size(mode, d)?;
    Ok(2.0 * mode.transmit_power_w / (PI * w * w) * (-2.0 * r * r / (w * w)).exp())
}

/// Intensity at range `d` and angle `phi` off the beam axis.
pub fn angular_intensity(mode: &VcselMode, d: f64, phi: f64) -> Result<f64> {
    if !(phi.abs() < FRAC_PI_2) {
        return Err(LerisError::BehindEmitter { angle_rad: phi });
    }
    let (s, c) = phi.sin_cos();
    gaussian_intensity(mode, d * s, d * c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Photodetector {
    pub area_m2: f64,
    pub fov_half_angle_rad: f64,
    pub responsivity_a_per_w: f64,
    pub bandwidth_hz: f64,
    pub normal: [f64; 3],
}

impl Default for Photodetector {
    fn default() -> Self {
        Photodetector {
            area_m2: 1e-4,
            fov_half_angle_rad: FRAC_PI_2,
            responsivity_a_per_w: 0.7,
            bandwidth_hz: 1e9,
            normal: [1.0, 0.0, 0.0],
        }
    }
}

impl Photodetector {
    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.normal)
    }

    pub fn with_normal(mut self, n: &Vec3) -> Self {
        let n = n.normalize();
        self.normal = [n.x, n.y, n.z];
        self
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.area_m2 > 0.0) {
            v.push("PD area must be positive".into());
        }
        if !(self.fov_half_angle_rad > 0.0 && self.fov_half_angle_rad <= FRAC_PI_2) {
            v.push("PD field-of-view half angle must lie in (0, pi/2]".into());
        }
        if !(self.responsivity_a_per_w >= 0.0) || !(self.bandwidth_hz >= 0.0) {
            v.push("PD responsivity and bandwidth must be non-negative".into());
        }
        if !(Vec3::from(self.normal).norm() > 0.0) {
            v.push("PD normal must be non-zero".into());
        }
        v
    }
}

/// Line-of-sight optical power collected by the photodetector.
///
/// The field-of-view window is `psi <= Psi`.
pub fn received_los_power(
    mode: &VcselMode,
    d: f64,
    irradiance_angle: f64,
    pd: &Photodetector,
    incidence_angle: f64,
) -> Result<f64> {
    let psi = incidence_angle.abs();
    if psi > pd.fov_half_angle_rad {
        return Ok(0.0);
    }
    let i = angular_intensity(mode, d, irradiance_angle)?;
    Ok((i * pd.area_m2 * psi.cos()).max(0.0))
}

/// On-axis received power in double-double precision.
///
/// `d_sq` is the squared range and `cos_psi` the incidence cosine; the caller
/// applies the field-of-view test.
pub fn on_axis_power_ext(mode: &VcselMode, d_sq: Ext, area_m2: f64, cos_psi: Ext) -> Ext {
    let z = Ext::from(mode.rayleigh_range_m());
    let w0_sq = Ext::prod(mode.beam_waist_m, mode.beam_waist_m);
    let w_sq = w0_sq * (Ext::ONE + d_sq / (z * z));
    Ext::prod(2.0 * area_m2, mode.transmit_power_w) * cos_psi / (Ext::PI * w_sq)
}

/// Receiver noise constants. Zeros are allowed so that noise can be switched off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub boltzmann: f64,
    pub temperature_k: f64,
    /// Linear preamplifier noise figure.
    pub noise_figure: f64,
    pub load_ohms: f64,
    pub electron_charge: f64,
    /// Linear relative intensity noise, per hertz.
    pub rin_per_hz: f64,
    pub fixed_variance: Option<f64>,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            boltzmann: 1.380649e-23,
            temperature_k: 300.0,
            noise_figure: 10f64.powf(0.5),
            load_ohms: 50.0,
            electron_charge: 1.602_176_634e-19,
            rin_per_hz: 10f64.powf(-15.5),
            fixed_variance: Some(2.5e-12),
        }
    }
}

impl NoiseParams {
    pub fn thermal_term(&self) -> f64 {
        if self.load_ohms == 0.0 {
            return 0.0;
        }
        4.0 * self.boltzmann * self.temperature_k * self.noise_figure / self.load_ohms
    }

    pub fn validate(&self) -> Vec<String> {
        let fields = [
            ("boltzmann", self.boltzmann),
            ("temperature_k", self.temperature_k),
            ("noise_figure", self.noise_figure),
            ("load_ohms", self.load_ohms),
            ("electron_charge", self.electron_charge),
            ("rin_per_hz", self.rin_per_hz),
            ("fixed_variance", self.fixed_variance.unwrap_or(0.0)),
        ];
        fields
            .iter()
            .filter(|(_, x)| !(*x >= 0.0 && x.is_finite()))
            .map(|(n, _)| format!("noise parameter {n} must be finite and non-negative"))
            .collect()
    }
}

/// One-sided noise spectral density, split by origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoisePsd {
    pub thermal: f64,
    pub shot: f64,
    pub rin: f64,
}

impl NoisePsd {
    pub fn total(&self) -> f64 {
        self.thermal + self.shot + self.rin
    }
}

pub fn noise_psd(p_los: f64, pd: &Photodetector, noise: &NoiseParams) -> NoisePsd {
    let i = pd.responsivity_a_per_w * p_los;
    NoisePsd {
        thermal: noise.thermal_term(),
        shot: 2.0 * noise.electron_charge * i,
        rin: noise.rin_per_hz * i * i,
    }
}

/// How receiver noise enters the measured power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// No noise at all.
    Off,
    /// Adds `B_o * S` to the optical power as written, despite the unit mismatch.
    Literal,
    /// Adds the fixed variance as a deterministic bias.
    #[default]
    Fixed,
    /// Adds a zero-mean Gaussian draw with the fixed variance, clamped at zero.
    Stochastic,
}

impl NoiseMode {
    pub fn parse(s: &str) -> Option<NoiseMode> {
        match s {
            "off" => Some(NoiseMode::Off),
            "literal" => Some(NoiseMode::Literal),
            "fixed" => Some(NoiseMode::Fixed),
            "stochastic" => Some(NoiseMode::Stochastic),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::Off => "off",
            NoiseMode::Literal => "literal",
            NoiseMode::Fixed => "fixed",
            NoiseMode::Stochastic => "stochastic",
        }
    }
}

/// Noise power `P_n` used for the SNR `alpha = P_LoS / P_n`.
pub fn noise_power(p_los: f64, pd: &Photodetector, noise: &NoiseParams, mode: NoiseMode) -> f64 {
    match mode {
        NoiseMode::Off => 0.0,
        NoiseMode::Literal => pd.bandwidth_hz * noise_psd(p_los, pd, noise).total(),
        NoiseMode::Fixed | NoiseMode::Stochastic => noise.fixed_variance.unwrap_or(0.0),
    }
}

/// Power reported by the photodetector.
pub fn measured_power<R: Rng + ?Sized>(
    p_los: f64,
    pd: &Photodetector,
    noise: &NoiseParams,
    mode: NoiseMode,
    rng: Option<&mut R>,
) -> Result<f64> {
    if !(p_los >= 0.0) {
        return Err(LerisError::InvalidArgument(format!("negative LoS power {p_los}")));
    }
    match mode {
        NoiseMode::Stochastic => {
            let rng = rng.ok_or_else(|| {
                LerisError::Configuration("stochastic noise requires a seeded generator".into())
            })?;
            let var = noise.fixed_variance.unwrap_or(0.0);
            if var == 0.0 {
                return Ok(p_los);
            }
            let n = Normal::new(0.0, var.sqrt())
                .map_err(|e| LerisError::Configuration(e.to_string()))?;
            Ok((p_los + n.sample(rng)).max(0.0))
        }
        m => Ok(p_los + noise_power(p_los, pd, noise, m)),
    }
}

/// Identifier of one VCSEL: owning panel and index on that panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VcselId {
    pub panel: u32,
    pub index: u32,
}

impl std::fmt::Display for VcselId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "P{}-V{:02}", self.panel, self.index)
    }
}

/// A perimeter-mounted dual-mode VCSEL.
#[derive(Debug, Clone, PartialEq)]
pub struct Vcsel {
    pub id: VcselId,
    pub position: Vec3,
    pub boresight: Vec3,
    /// Owned azimuth sub-sector relative to the panel normal, radians.
    pub azimuth_sector: (f64, f64),
    /// Extra azimuth on each side of the owned sub-sector that is still lit.
    pub footprint_margin_rad: f64,
    /// Largest elevation (either sign) that is lit.
    pub elevation_limit_rad: f64,
    pub modes: (VcselMode, VcselMode),
    pub panel_id: u32,
    pub panel_frame: Frame,
}

impl Vcsel {
    /// True when the point lies inside this VCSEL's scanned footprint.
    pub fn illuminates(&self, p: &Vec3) -> bool {
        self.illuminates_with_tol(p, 0.0)
    }

    pub fn illuminates_with_tol(&self, p: &Vec3, tol: f64) -> bool {
        let d = p - self.position;
        let n = d.norm();
        if n <= 0.0 {
            return false;
        }
        let dir = d / n;
        if self.panel_frame.ez.dot(&dir) <= 0.0 {
            return false;
        }
        let (az, el) = self.panel_frame.azimuth_elevation(&dir);
        let lo = self.azimuth_sector.0 - self.footprint_margin_rad - tol;
        let hi = self.azimuth_sector.1 + self.footprint_margin_rad + tol;
        az >= lo && az <= hi && el.abs() <= self.elevation_limit_rad + tol
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = self.modes.0.validate();
        v.extend(self.modes.1.validate());
        let (za, zb) = (self.modes.0.rayleigh_range_m(), self.modes.1.rayleigh_range_m());
        if za == zb {
            v.push(format!("VCSEL {} modes share a Rayleigh range", self.id));
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table_mode() -> VcselMode {
        VcselMode::new(10e-3, 5.6e-6, 950e-9).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn derived_beam_quantities() {
        let m = table_mode();
        // pi * (5.6e-6)^2 / 950e-9
        let zr = 3.141_592_653_589_793 * 3.136e-11 / 9.5e-7;
        assert!(rel(m.rayleigh_range_m(), zr) < 1e-12);
        assert!(rel(m.rayleigh_range_m(), 1.0371e-4) < 1e-4);
        assert!(rel(m.divergence_rad(), 9.5e-7 / (3.141_592_653_589_793 * 5.6e-6)) < 1e-12);
        assert!((m.divergence_rad() - 0.0540).abs() < 1e-4);
    }

    #[test]
    fn spot_size_examples() {
        let m = table_mode();
        assert_eq!(spot_size(&m, 0.0).unwrap(), 5.6e-6);
        let w = spot_size(&m, 5.0).unwrap();
        assert!((w - 0.270).abs() < 1e-3);
        assert!(spot_size(&m, -1.0).is_err());
        assert!(spot_size(&m, 5.0).unwrap() > spot_size(&m, 4.0).unwrap());
    }

    #[test]
    fn intensity_examples() {
        let m = table_mode();
        let i0 = gaussian_intensity(&m, 0.0, 5.0).unwrap();
        assert!((i0 - 0.0873).abs() < 1e-4);
        let w = spot_size(&m, 5.0).unwrap();
        let iw = gaussian_intensity(&m, w, 5.0).unwrap();
        assert!(rel(iw, i0 * (-2f64).exp()) < 1e-12);
        assert_eq!(gaussian_intensity(&m, 1e3, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn angular_intensity_examples() {
        let m = table_mode();
        for d in [0.1, 1.0, 5.0, 9.0] {
            assert_eq!(angular_intensity(&m, d, 0.0).unwrap(), gaussian_intensity(&m, 0.0, d).unwrap());
        }
        let on = angular_intensity(&m, 5.0, 0.0).unwrap();
        let off = angular_intensity(&m, 5.0, m.divergence_rad()).unwrap();
        assert!(rel(off, on * (-2f64).exp()) < 1e-3);
        let peak = 2.0 * m.transmit_power_w / (PI * m.beam_waist_m * m.beam_waist_m);
        assert!(rel(angular_intensity(&m, 0.0, 0.7).unwrap(), peak) < 1e-15);
        assert!(matches!(angular_intensity(&m, 1.0, FRAC_PI_2), Err(LerisError::BehindEmitter { .. })));
    }

    #[test]
    fn received_power_examples() {
        let m = table_mode();
        let pd = Photodetector::default();
        let p = received_los_power(&m, 5.0, 0.0, &pd, 0.0).unwrap();
        assert!((p - 8.73e-6).abs() < 1e-8);
        let p60 = received_los_power(&m, 5.0, 0.0, &pd, PI / 3.0).unwrap();
        assert!((p60 - 4.37e-6).abs() < 1e-8);
        assert!(rel(p60, 0.5 * p) < 1e-12);
        let narrow = Photodetector { fov_half_angle_rad: 0.5, ..pd };
        assert_eq!(received_los_power(&m, 5.0, 0.0, &narrow, 0.51).unwrap(), 0.0);
        assert!(received_los_power(&m, 5.0, 0.0, &narrow, 0.4999).unwrap() > 0.0);
    }

    #[test]
    fn ext_power_matches_f64() {
        let m = table_mode();
        let pd = Photodetector::default();
        let p = received_los_power(&m, 3.0, 0.0, &pd, 0.3).unwrap();
        let pe = on_axis_power_ext(&m, Ext::from(9.0), pd.area_m2, Ext::from(0.3f64.cos()));
        assert!(rel(pe.to_f64(), p) < 1e-14);
    }

    #[test]
    fn noise_psd_terms() {
        let pd = Photodetector::default();
        let n = NoiseParams::default();
        // 4 kB T Fn / RL with Fn = 10^(5/10)
        let ak = 4.0 * 1.380649e-23 * 300.0 * 3.162_277_660_168_379_5 / 50.0;
        let s0 = noise_psd(0.0, &pd, &n);
        assert!(rel(s0.total(), ak) < 1e-12);
        // 1.04784e-21; the four-digit figure 1.0477e-21 is truncated
        assert!(rel(ak, 1.0477e-21) < 2e-4);
        let p = 8.73e-6;
        let s = noise_psd(p, &pd, &n);
        // hand evaluation: 2 q R P and RIN (R P)^2
        let shot = 2.0 * 1.602_176_634e-19 * 0.7 * 8.73e-6;
        let rin = 3.162_277_660_168_379_5e-16 * (0.7 * 8.73e-6f64).powi(2);
        assert!(rel(s.shot, shot) < 1e-12);
        assert!(rel(s.rin, rin) < 1e-9);
        assert!((s.shot - 1.958e-24).abs() < 1e-27);
        assert!((s.rin - 1.181e-26).abs() < 1e-29);
        let quiet = NoiseParams { rin_per_hz: 0.0, electron_charge: 0.0, ..n };
        assert_eq!(noise_psd(1e-3, &pd, &quiet).total(), noise_psd(0.0, &pd, &quiet).total());
    }

    #[test]
    fn measured_power_modes() {
        let pd = Photodetector::default();
        let n = NoiseParams::default();
        let p = 8.73e-6;
        let zero = NoiseParams {
            boltzmann: 0.0,
            temperature_k: 0.0,
            noise_figure: 0.0,
            load_ohms: 0.0,
            electron_charge: 0.0,
            rin_per_hz: 0.0,
            fixed_variance: Some(0.0),
        };
        for mode in [NoiseMode::Off, NoiseMode::Literal, NoiseMode::Fixed] {
            assert_eq!(measured_power(p, &pd, &zero, mode, None::<&mut ChaCha8Rng>).unwrap(), p);
        }
        assert_eq!(measured_power(p, &pd, &n, NoiseMode::Off, None::<&mut ChaCha8Rng>).unwrap(), p);
        assert_eq!(measured_power(p, &pd, &n, NoiseMode::Fixed, None::<&mut ChaCha8Rng>).unwrap(), p + 2.5e-12);
        let lit = measured_power(p, &pd, &n, NoiseMode::Literal, None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(lit, p + 1e9 * noise_psd(p, &pd, &n).total());
        assert!(matches!(
            measured_power(p, &pd, &n, NoiseMode::Stochastic, None::<&mut ChaCha8Rng>),
            Err(LerisError::Configuration(_))
        ));
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x = measured_power(p, &pd, &n, NoiseMode::Stochastic, Some(&mut a)).unwrap();
        let y = measured_power(p, &pd, &n, NoiseMode::Stochastic, Some(&mut b)).unwrap();
        assert_eq!(x, y);
        assert!((x - p).abs() < 10.0 * 2.5e-12f64.sqrt());
        let tiny = measured_power(0.0, &pd, &n, NoiseMode::Stochastic, Some(&mut a)).unwrap();
        assert!(tiny >= 0.0);
    }

    #[test]
    fn far_field_asymptote() {
        let m = table_mode();
        let d = 1e4 * m.rayleigh_range_m();
        let w = spot_size(&m, d).unwrap();
        assert!(rel(w / d, m.divergence_rad()) < 1e-6);
    }

    #[test]
    fn transverse_integral_is_transmit_power() {
        // composite Simpson over r in [0, 6w] of I(r) 2 pi r dr
        let m = table_mode();
        let d = 2.0;
        let w = spot_size(&m, d).unwrap();
        let n = 4000;
        let h = 6.0 * w / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let r = k as f64 * h;
            let f = gaussian_intensity(&m, r, d).unwrap() * 2.0 * PI * r;
            let c = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += c * f;
        }
        let total = acc * h / 3.0;
        assert!(rel(total, m.transmit_power_w) < 1e-6);
    }

    #[test]
    fn fov_cutoff_is_continuous_inside() {
        let m = table_mode();
        let pd = Photodetector { fov_half_angle_rad: 1.0, ..Photodetector::default() };
        let a = received_los_power(&m, 2.0, 0.0, &pd, 1.0 - 1e-9).unwrap();
        let b = received_los_power(&m, 2.0, 0.0, &pd, 1.0 - 2e-9).unwrap();
        assert!(rel(a, b) < 1e-8);
        assert_eq!(received_los_power(&m, 2.0, 0.0, &pd, 1.0 + 1e-12).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn snr_decreases_with_distance(d in 0.05f64..20.0, step in 1e-3f64..5.0) {
            let m = table_mode();
            let pd = Photodetector::default();
            let n = NoiseParams::default();
            let a1 = received_los_power(&m, d, 0.0, &pd, 0.0).unwrap() / noise_power(0.0, &pd, &n, NoiseMode::Fixed);
            let a2 = received_los_power(&m, d + step, 0.0, &pd, 0.0).unwrap() / noise_power(0.0, &pd, &n, NoiseMode::Fixed);
            prop_assert!(a2 < a1);
        }

        #[test]
        fn psd_increasing(p in 0.0f64..1e-2, dp in 1e-9f64..1e-3) {
            let pd = Photodetector::default();
            let n = NoiseParams::default();
            prop_assert!(noise_psd(p + dp, &pd, &n).total() > noise_psd(p, &pd, &n).total());
        }
    }
}
