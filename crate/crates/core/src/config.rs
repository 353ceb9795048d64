//! Scenario configuration: JSON schema, defaults, validation, fingerprint.
//!
//! Every field is optional in the file; omitted fields take the values of
//! the reference scenario. Decibel quantities appear only here and are
//! converted to linear units when the scenario is built.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LerisError, Result};
use crate::geometry::Room;
use crate::mmwave::{IntegrationDomain, PathDelay, RateFormula};
use crate::optical::NoiseMode;
use crate::routing::AccessPoint;

pub const SCHEMA_VERSION: u32 = 1;

/// How a noisy link turns into a range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RangingModel {
    /// Each range is the noise-inflated estimate `sqrt((alpha d^2 - z_R^2) / (alpha + 1))`
    /// and the mode-a power is consistent with it.
    #[default]
    NoiseBiased,
    /// Invert the two noisy mode powers directly.
    DualMode,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanelPlacement {
    pub id: u32,
    pub center: [f64; 3],
    pub normal: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpticalConfig {
    pub transmit_power_mw: f64,
    pub mode_a_waist_um: f64,
    pub mode_b_waist_um: f64,
    pub wavelength_nm: f64,
    pub pd_area_cm2: f64,
    pub pd_fov_deg: f64,
    pub responsivity_a_per_w: f64,
    pub bandwidth_hz: f64,
    pub rin_db_per_hz: f64,
    pub noise_figure_db: f64,
    pub temperature_k: f64,
    pub load_ohms: f64,
    pub noise_variance_w: f64,
    pub noise_mode: NoiseMode,
    pub ranging_model: RangingModel,
    pub power_floor_w: f64,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        OpticalConfig {
            transmit_power_mw: 10.0,
            mode_a_waist_um: 5.6,
            mode_b_waist_um: 11.2,
            wavelength_nm: 950.0,
            pd_area_cm2: 1.0,
            pd_fov_deg: 90.0,
            responsivity_a_per_w: 0.7,
            bandwidth_hz: 1e9,
            rin_db_per_hz: -155.0,
            noise_figure_db: 5.0,
            temperature_k: 300.0,
            load_ohms: 50.0,
            noise_variance_w: 2.5e-12,
            noise_mode: NoiseMode::Fixed,
            ranging_model: RangingModel::NoiseBiased,
            power_floor_w: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmWaveConfig {
    pub wavelength_m: f64,
    pub tx_power_w: f64,
    pub tx_gain_db: f64,
    pub noise_power_db: f64,
    pub path_loss_exponents: Vec<f64>,
    pub ref_distance_m: f64,
    pub ue_directivity_deg: f64,
    pub m_rows: usize,
    pub n_cols: usize,
    /// Defaults to half the wavelength when absent.
    pub element_side_m: Option<f64>,
    pub efficiency: f64,
    pub quadrature_deg: f64,
    pub integration_domain: IntegrationDomain,
    pub path_delay: PathDelay,
    pub rate_formula: RateFormula,
}

impl Default for MmWaveConfig {
    fn default() -> Self {
        MmWaveConfig {
            wavelength_m: 0.01,
            tx_power_w: 1.0,
            tx_gain_db: 10.0,
            noise_power_db: -130.0,
            path_loss_exponents: vec![2.0],
            ref_distance_m: 1.0,
            ue_directivity_deg: 60.0,
            m_rows: 50,
            n_cols: 50,
            element_side_m: None,
            efficiency: 1.0,
            quadrature_deg: 0.5,
            integration_domain: IntegrationDomain::Hemisphere,
            path_delay: PathDelay::Literal,
            rate_formula: RateFormula::Physical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VcselLayout {
    pub per_panel: usize,
    pub panel_sector_deg: f64,
    pub vcsel_sector_deg: f64,
    pub elevation_span_deg: f64,
    pub elevation_levels_deg: Vec<f64>,
    /// Extra lit azimuth on each side of a VCSEL's own sub-sector.
    pub footprint_margin_deg: f64,
}

impl Default for VcselLayout {
    fn default() -> Self {
        VcselLayout {
            per_panel: 24,
            panel_sector_deg: 120.0,
            vcsel_sector_deg: 5.0,
            elevation_span_deg: 60.0,
            elevation_levels_deg: vec![-25.0, -15.0, -5.0, 5.0, 15.0, 25.0],
            footprint_margin_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UeSampling {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub height_m: f64,
    /// Elevation of the user normal above the horizontal plane.
    pub elevation_deg: f64,
}

impl Default for UeSampling {
    fn default() -> Self {
        UeSampling {
            x_range: [0.0, 10.0],
            y_range: [0.0, 10.0],
            height_m: 1.5,
            elevation_deg: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Active panel sets; a set's size is its `L` label.
    pub panel_sets: Vec<Vec<u32>>,
    pub ring_radius_m: f64,
    pub azimuth_step_deg: f64,
    pub snr_db: Vec<f64>,
    pub elements: Vec<usize>,
    pub elements_snr_db: f64,
    pub iterations: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            panel_sets: vec![vec![2], vec![1, 2], vec![1, 2, 3, 4]],
            ring_radius_m: 3.0,
            azimuth_step_deg: 1.0,
            snr_db: (0..=8).map(|i| 90.0 + 5.0 * i as f64).collect(),
            elements: vec![100, 400, 900, 1600, 2500],
            elements_snr_db: 130.0,
            iterations: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub room: Room,
    pub panels: Vec<PanelPlacement>,
    pub vcsels: VcselLayout,
    pub optical: OpticalConfig,
    pub mmwave: MmWaveConfig,
    pub access_point: AccessPoint,
    pub ue: UeSampling,
    pub sweeps: SweepConfig,
    pub iterations: usize,
    pub seed: u64,
    /// Zero means one per available core.
    pub workers: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            room: Room::default(),
            panels: vec![
                PanelPlacement { id: 1, center: [0.0, 5.0, 1.5], normal: [1.0, 0.0, 0.0] },
                PanelPlacement { id: 2, center: [10.0, 5.0, 1.5], normal: [-1.0, 0.0, 0.0] },
                PanelPlacement { id: 3, center: [5.0, 0.0, 1.5], normal: [0.0, 1.0, 0.0] },
                PanelPlacement { id: 4, center: [5.0, 10.0, 1.5], normal: [0.0, -1.0, 0.0] },
            ],
            vcsels: VcselLayout::default(),
            optical: OpticalConfig::default(),
            mmwave: MmWaveConfig::default(),
            access_point: AccessPoint::default(),
            ue: UeSampling::default(),
            sweeps: SweepConfig::default(),
            iterations: 100_000,
            seed: 2024,
            workers: 0,
        }
    }
}

fn positive(v: &mut Vec<String>, name: &str, x: f64) {
    if !(x > 0.0 && x.is_finite()) {
        v.push(format!("{name} must be positive and finite, got {x}"));
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| LerisError::Configuration(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Compact serialization with every field present, in declaration order.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical form, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn element_side_m(&self) -> f64 {
        self.mmwave.element_side_m.unwrap_or(self.mmwave.wavelength_m / 2.0)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!("unsupported schema version {}", self.schema_version));
        }
        v.extend(self.room.validate());

        if self.panels.is_empty() {
            v.push("at least one panel is required".into());
        }
        let mut ids: Vec<u32> = self.panels.iter().map(|p| p.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.panels.len() {
            v.push("panel ids must be distinct".into());
        }
        for p in &self.panels {
            let c = crate::Vec3::from(p.center);
            if !self.room.on_boundary(&c, 1e-9) {
                v.push(format!("panel {} centre is not on a room wall", p.id));
            }
            if crate::Vec3::from(p.normal).norm() == 0.0 {
                v.push(format!("panel {} normal is zero", p.id));
            }
        }

        let l = &self.vcsels;
        if l.per_panel == 0 {
            v.push("vcsels per panel must be at least 1".into());
        }
        positive(&mut v, "vcsel sector", l.vcsel_sector_deg);
        positive(&mut v, "panel sector", l.panel_sector_deg);
        positive(&mut v, "elevation span", l.elevation_span_deg);
        if l.per_panel > 0 && ((l.per_panel as f64 * l.vcsel_sector_deg) - l.panel_sector_deg).abs() > 1e-9 {
            v.push(format!(
                "{} VCSELs of {} deg do not tile a {} deg sector",
                l.per_panel, l.vcsel_sector_deg, l.panel_sector_deg
            ));
        }
        if l.panel_sector_deg >= 180.0 {
            v.push("panel sector must be narrower than 180 deg".into());
        }
        if l.elevation_levels_deg.is_empty() {
            v.push("at least one elevation level is required".into());
        }
        if l.elevation_levels_deg.iter().any(|e| e.abs() > l.elevation_span_deg / 2.0) {
            v.push("elevation levels must lie inside the elevation span".into());
        }
        if !(l.footprint_margin_deg >= 0.0) {
            v.push("footprint margin must be non-negative".into());
        }

        let o = &self.optical;
        for (n, x) in [
            ("transmit power", o.transmit_power_mw),
            ("mode a waist", o.mode_a_waist_um),
            ("mode b waist", o.mode_b_waist_um),
            ("optical wavelength", o.wavelength_nm),
            ("photodetector area", o.pd_area_cm2),
            ("photodetector field of view", o.pd_fov_deg),
            ("responsivity", o.responsivity_a_per_w),
            ("bandwidth", o.bandwidth_hz),
            ("load resistance", o.load_ohms),
        ] {
            positive(&mut v, n, x);
        }
        if o.pd_fov_deg > 90.0 {
            v.push("photodetector field of view must not exceed 90 deg".into());
        }
        if o.mode_a_waist_um == o.mode_b_waist_um {
            v.push("the two modes need different waists".into());
        }
        if !(o.temperature_k >= 0.0) || !(o.noise_variance_w >= 0.0) || !(o.power_floor_w >= 0.0) {
            v.push("temperature, noise variance and power floor must be non-negative".into());
        }

        let m = &self.mmwave;
        for (n, x) in [
            ("mmWave wavelength", m.wavelength_m),
            ("transmit power", m.tx_power_w),
            ("reference distance", m.ref_distance_m),
            ("UE directivity", m.ue_directivity_deg),
            ("element side", self.element_side_m()),
            ("quadrature step", m.quadrature_deg),
        ] {
            positive(&mut v, n, x);
        }
        if m.quadrature_deg > 45.0 {
            v.push("quadrature step must not exceed 45 deg".into());
        }
        if m.ue_directivity_deg > 180.0 {
            v.push("UE directivity must not exceed 180 deg".into());
        }
        if m.m_rows == 0 || m.n_cols == 0 {
            v.push("panels need at least one element per side".into());
        }
        if !(m.efficiency > 0.0 && m.efficiency <= 1.0) {
            v.push("efficiency must lie in (0, 1]".into());
        }
        if m.path_loss_exponents.is_empty() || m.path_loss_exponents.iter().any(|e| !(*e > 0.0)) {
            v.push("path loss exponents must be positive".into());
        }
        if !m.tx_gain_db.is_finite() || !m.noise_power_db.is_finite() {
            v.push("dB quantities must be finite".into());
        }
        if crate::Vec3::from(self.access_point.boresight).norm() == 0.0 {
            v.push("access point boresight is zero".into());
        }

        let u = &self.ue;
        if !(u.x_range[0] < u.x_range[1]) || !(u.y_range[0] < u.y_range[1]) {
            v.push("UE sampling ranges must be increasing".into());
        }
        if u.x_range[0] < self.room.min[0]
            || u.x_range[1] > self.room.max[0]
            || u.y_range[0] < self.room.min[1]
            || u.y_range[1] > self.room.max[1]
            || u.height_m < self.room.min[2]
            || u.height_m > self.room.max[2]
        {
            v.push("UE sampling region leaves the room".into());
        }

        let s = &self.sweeps;
        for set in &s.panel_sets {
            if set.is_empty() || set.iter().any(|id| !ids.contains(id)) {
                v.push(format!("panel set {set:?} is empty or names an unknown panel"));
            }
        }
        positive(&mut v, "ring radius", s.ring_radius_m);
        positive(&mut v, "azimuth step", s.azimuth_step_deg);
        if s.snr_db.windows(2).any(|w| !(w[0] < w[1])) {
            v.push("SNR grid must be strictly ascending".into());
        }
        for n in &s.elements {
            let r = (*n as f64).sqrt().round() as usize;
            if r * r != *n || *n == 0 {
                v.push(format!("element count {n} is not a positive perfect square"));
            }
        }
        if s.iterations == 0 || self.iterations == 0 {
            v.push("iterations must be at least 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(LerisError::Validation(v))
        }
    }
}
