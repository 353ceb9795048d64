//! Scenario construction, forward measurement synthesis, the seeded Monte
//! Carlo harness and the three sweeps (ranging error against azimuth, rate
//! against SNR, rate against panel size).

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{db_to_linear, RangingModel, ScenarioConfig, SCHEMA_VERSION};
use crate::error::{LerisError, Result};
use crate::ext::{Ext, ExtVec3};
use crate::geometry::{Room, Vec3};
use crate::localization::{
    estimated_distance_under_noise_ext, localize_ranged, localize_with, ranging_error, LocalizationEstimate,
    LocalizerOptions, ModeLabel, OpticalMeasurement, RangedAnchor,
};
use crate::mmwave::{FinalGainEvaluator, GridSpec, LerisPanel, MmWaveParams, RateFormula};
use crate::optical::{
    measured_power, noise_power, on_axis_power_ext, NoiseMode, NoiseParams, Photodetector, Vcsel, VcselId,
    VcselMode,
};
use crate::routing::{best_route, enumerate_routes, AccessPoint, ChannelContext, LinkBudget, UserNode};

/// A built scenario: geometry, emitters and channel models in linear units.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub room: Room,
    pub panels: Vec<LerisPanel>,
    pub vcsels: Vec<Vcsel>,
    pub pd: Photodetector,
    pub noise: NoiseParams,
    pub noise_mode: NoiseMode,
    pub ranging: RangingModel,
    pub localizer: LocalizerOptions,
    pub mmwave: MmWaveParams,
    pub ap: AccessPoint,
    pub rate_formula: RateFormula,
    pub evaluator: FinalGainEvaluator,
}

/// Emitters of one panel, spread round its perimeter.
///
/// VCSEL `k` owns azimuth sub-sector `k` and sits on edge `k mod 4`; its
/// boresight elevation cycles through the configured levels.
fn panel_vcsels(panel: &LerisPanel, cfg: &ScenarioConfig, modes: (VcselMode, VcselMode)) -> Vec<Vcsel> {
    let l = &cfg.vcsels;
    let frame = panel.frame();
    let sx = panel.m_rows as f64 * panel.element_side_m;
    let sy = panel.n_cols as f64 * panel.element_side_m;
    let per_edge = l.per_panel.div_ceil(4);
    let w = l.vcsel_sector_deg.to_radians();
    let start = -l.panel_sector_deg.to_radians() / 2.0;
    (0..l.per_panel)
        .map(|k| {
            let t = ((k / 4) as f64 + 0.5) / per_edge as f64 - 0.5;
            let (lx, ly) = match k % 4 {
                0 => (t * sx, -sy / 2.0),
                1 => (sx / 2.0, t * sy),
                2 => (-t * sx, sy / 2.0),
                _ => (-sx / 2.0, -t * sy),
            };
            let lo = start + k as f64 * w;
            let el = l.elevation_levels_deg[k % l.elevation_levels_deg.len()].to_radians();
            Vcsel {
                id: VcselId { panel: panel.id, index: k as u32 },
                position: panel.center() + frame.ex * lx + frame.ey * ly,
                boresight: frame.direction(lo + w / 2.0, el),
                azimuth_sector: (lo, lo + w),
                footprint_margin_rad: l.footprint_margin_deg.to_radians(),
                elevation_limit_rad: (l.elevation_span_deg / 2.0).to_radians(),
                modes,
                panel_id: panel.id,
                panel_frame: frame,
            }
        })
        .collect()
}

pub fn build_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let o = &config.optical;
    let m = &config.mmwave;
    let lambda_o = o.wavelength_nm * 1e-9;
    let modes = (
        VcselMode::new(o.transmit_power_mw * 1e-3, o.mode_a_waist_um * 1e-6, lambda_o)?,
        VcselMode::new(o.transmit_power_mw * 1e-3, o.mode_b_waist_um * 1e-6, lambda_o)?,
    );
    let mut panels = Vec::new();
    let mut vcsels = Vec::new();
    for p in &config.panels {
        let mut panel = LerisPanel {
            id: p.id,
            center: p.center,
            normal: p.normal,
            m_rows: m.m_rows,
            n_cols: m.n_cols,
            element_side_m: config.element_side_m(),
            efficiency: m.efficiency,
            vcsel_ids: vec![],
        };
        let vs = panel_vcsels(&panel, config, modes);
        panel.vcsel_ids = vs.iter().map(|v| v.id).collect();
        panels.push(panel);
        vcsels.extend(vs);
    }
    let pd = Photodetector {
        area_m2: o.pd_area_cm2 * 1e-4,
        fov_half_angle_rad: o.pd_fov_deg.to_radians(),
        responsivity_a_per_w: o.responsivity_a_per_w,
        bandwidth_hz: o.bandwidth_hz,
        normal: [1.0, 0.0, 0.0],
    };
    let noise = NoiseParams {
        temperature_k: o.temperature_k,
        noise_figure: db_to_linear(o.noise_figure_db),
        load_ohms: o.load_ohms,
        rin_per_hz: db_to_linear(o.rin_db_per_hz),
        fixed_variance: Some(o.noise_variance_w),
        ..NoiseParams::default()
    };
    let mmwave = MmWaveParams {
        wavelength_m: m.wavelength_m,
        tx_power_w: m.tx_power_w,
        tx_gain: db_to_linear(m.tx_gain_db),
        noise_power: db_to_linear(m.noise_power_db),
        path_loss_exponents: m.path_loss_exponents.clone(),
        ref_distance_m: m.ref_distance_m,
        ue_directivity_rad: m.ue_directivity_deg.to_radians(),
    };
    let grid = GridSpec {
        step_rad: m.quadrature_deg.to_radians(),
        domain: m.integration_domain,
        ..GridSpec::default()
    };
    Ok(Scenario {
        config: config.clone(),
        room: config.room,
        evaluator: FinalGainEvaluator::new(m.wavelength_m, grid, m.path_delay),
        panels,
        vcsels,
        pd,
        noise,
        noise_mode: o.noise_mode,
        ranging: o.ranging_model,
        localizer: LocalizerOptions {
            power_floor_w: o.power_floor_w,
            ..LocalizerOptions::default()
        },
        mmwave,
        ap: config.access_point,
        rate_formula: m.rate_formula,
    })
}

/// True user state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UePose {
    pub position: [f64; 3],
    pub normal: [f64; 3],
}

impl UePose {
    pub fn new(position: Vec3, normal: Vec3) -> Self {
        let n = normal.normalize();
        UePose {
            position: [position.x, position.y, position.z],
            normal: [n.x, n.y, n.z],
        }
    }

    /// Horizontal-plane pose facing azimuth `phi` with elevation `el`.
    pub fn facing(position: Vec3, phi: f64, el: f64) -> Self {
        let (sp, cp) = phi.sin_cos();
        let (se, ce) = el.sin_cos();
        UePose::new(position, Vec3::new(ce * cp, ce * sp, se))
    }

    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.normal)
    }
}

/// The subset of a scenario used when only some panels are active.
pub struct ActiveSet {
    pub panel_ids: Vec<u32>,
    pub panels: Vec<LerisPanel>,
    pub vcsels: Vec<Vcsel>,
}

impl Scenario {
    pub fn active(&self, ids: &[u32]) -> Result<ActiveSet> {
        let mut panels = Vec::new();
        for id in ids {
            let p = self
                .panels
                .iter()
                .find(|p| p.id == *id)
                .ok_or_else(|| LerisError::InvalidArgument(format!("unknown panel {id}")))?;
            panels.push(p.clone());
        }
        Ok(ActiveSet {
            panel_ids: ids.to_vec(),
            vcsels: self.vcsels.iter().filter(|v| ids.contains(&v.panel_id)).cloned().collect(),
            panels,
        })
    }

    pub fn all_panels(&self) -> ActiveSet {
        let ids: Vec<u32> = self.panels.iter().map(|p| p.id).collect();
        self.active(&ids).expect("own panel ids")
    }

    pub fn sample_pose<R: Rng + ?Sized>(&self, rng: &mut R) -> UePose {
        let u = &self.config.ue;
        let x = rng.random_range(u.x_range[0]..u.x_range[1]);
        let y = rng.random_range(u.y_range[0]..u.y_range[1]);
        let phi = rng.random_range(0.0..2.0 * PI);
        UePose::facing(Vec3::new(x, y, u.height_m), phi, u.elevation_deg.to_radians())
    }

    /// Cosine of the incidence angle when the VCSEL is inside the
    /// photodetector's view, `None` otherwise.
    fn incidence(&self, v: &Vcsel, pose: &UePose) -> Option<Ext> {
        let u = ExtVec3::diff(&v.position, &pose.position());
        let c = u.dot(&ExtVec3::from_vec(&pose.normal())) / u.norm();
        let psi = c.to_f64().clamp(-1.0, 1.0).acos();
        (c.hi > 0.0 && psi <= self.pd.fov_half_angle_rad).then_some(c)
    }

    /// VCSELs whose footprint covers the user and that the user can see.
    pub fn serving<'a>(&self, set: &'a ActiveSet, pose: &UePose) -> Vec<&'a Vcsel> {
        set.vcsels
            .iter()
            .filter(|v| v.illuminates(&pose.position()) && self.incidence(v, pose).is_some())
            .collect()
    }

    /// Noise-free received power of one mode, with the serving VCSEL
    /// steered onto the user.
    pub fn los_power(&self, v: &Vcsel, mode: ModeLabel, pose: &UePose) -> Option<Ext> {
        let cos = self.incidence(v, pose)?;
        let d2 = ExtVec3::diff(&v.position, &pose.position()).norm_sq();
        let m = match mode {
            ModeLabel::A => &v.modes.0,
            ModeLabel::B => &v.modes.1,
        };
        Some(on_axis_power_ext(m, d2, self.pd.area_m2, cos))
    }

    /// Photodetector readings for both modes of every serving VCSEL.
    pub fn synthesize<R: Rng + ?Sized>(
        &self,
        set: &ActiveSet,
        pose: &UePose,
        mut rng: Option<&mut R>,
    ) -> Result<Vec<OpticalMeasurement>> {
        let mut out = Vec::new();
        for v in self.serving(set, pose) {
            for mode in [ModeLabel::A, ModeLabel::B] {
                let p = self.los_power(v, mode, pose).expect("serving VCSELs are visible");
                let p = if self.noise_mode == NoiseMode::Off {
                    p
                } else {
                    let x = p.to_f64();
                    let noisy = measured_power(x, &self.pd, &self.noise, self.noise_mode, rng.as_deref_mut())?;
                    if noisy == 0.0 {
                        Ext::ZERO
                    } else {
                        p + (noisy - x)
                    }
                };
                out.push(OpticalMeasurement::from_ext(v.id, mode, p));
            }
        }
        Ok(out)
    }

    pub fn localize<R: Rng + ?Sized>(
        &self,
        set: &ActiveSet,
        pose: &UePose,
        rng: Option<&mut R>,
    ) -> Result<LocalizationEstimate> {
        let pd = self.pd.with_normal(&pose.normal());
        match self.ranging {
            RangingModel::DualMode => {
                let m = self.synthesize(set, pose, rng)?;
                localize_with(&m, &set.vcsels, &pd, &self.room, &self.localizer)
            }
            RangingModel::NoiseBiased => {
                let anchors = self.biased_anchors(set, pose)?;
                if anchors.len() < 3 {
                    return Err(LerisError::InsufficientAnchors { found: anchors.len() });
                }
                localize_ranged(&anchors, &pd, &self.room, &self.localizer)
            }
        }
    }

    /// Serving anchors with noise-inflated ranges. The mode-a power is
    /// re-synthesized at the biased range, so the normalized power equals
    /// the true incidence cosine.
    pub fn biased_anchors<'a>(&self, set: &'a ActiveSet, pose: &UePose) -> Result<Vec<RangedAnchor<'a>>> {
        let mut out = Vec::new();
        let mut first_err = None;
        for v in self.serving(set, pose) {
            let cos = self.incidence(v, pose).expect("serving VCSELs are visible");
            let pa = self.los_power(v, ModeLabel::A, pose).expect("visible").to_f64();
            let pb = self.los_power(v, ModeLabel::B, pose).expect("visible").to_f64();
            if !(pa > self.localizer.power_floor_w && pb > self.localizer.power_floor_w) {
                continue;
            }
            let d = ExtVec3::diff(&v.position, &pose.position()).norm();
            let pn = noise_power(pa, &self.pd, &self.noise, self.noise_mode);
            let alpha = if pn == 0.0 { f64::INFINITY } else { pa / pn };
            let d_hat = if alpha.is_infinite() {
                Ok(d)
            } else {
                estimated_distance_under_noise_ext(d.to_f64(), v.modes.0.rayleigh_range_m(), alpha)
            };
            match d_hat {
                Ok(dh) if dh.hi > 0.0 => out.push(RangedAnchor {
                    vcsel: v,
                    distance: dh,
                    power_a: on_axis_power_ext(&v.modes.0, dh * dh, self.pd.area_m2, cos),
                }),
                Ok(_) => {}
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        match (out.len(), first_err) {
            (n, Some(e)) if n < 3 => Err(e),
            _ => Ok(out),
        }
    }

    pub fn user_node(&self, pose: &UePose) -> UserNode {
        UserNode {
            position: pose.position(),
            normal: pose.normal(),
            half_angle_rad: self.mmwave.ue_directivity_rad.min(self.pd.fov_half_angle_rad),
        }
    }

    /// Best route toward the true user with the last panel steered at
    /// `estimate`.
    pub fn link_budget(&self, set: &ActiveSet, pose: &UePose, estimate: &Vec3) -> Result<LinkBudget> {
        let user = self.user_node(pose);
        let routes = enumerate_routes(&set.panels, &self.ap, &user);
        let ctx = ChannelContext {
            panels: &set.panels,
            ap: &self.ap,
            params: &self.mmwave,
            evaluator: &self.evaluator,
            estimated_ue: *estimate,
            user,
            formula: self.rate_formula,
        };
        best_route(&routes, &ctx)
    }

    /// Range error of the strongest serving VCSEL, in metres.
    pub fn strongest_anchor_error(&self, set: &ActiveSet, pose: &UePose) -> Option<Result<(VcselId, f64)>> {
        let best = self
            .serving(set, pose)
            .into_iter()
            .filter_map(|v| self.los_power(v, ModeLabel::A, pose).map(|p| (v, p.to_f64())))
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.id.cmp(&a.0.id)))?;
        let (v, p) = best;
        let d = (v.position - pose.position()).norm();
        let pn = noise_power(p, &self.pd, &self.noise, self.noise_mode);
        let alpha = if pn == 0.0 { f64::INFINITY } else { p / pn };
        Some(ranging_error(d, v.modes.0.rayleigh_range_m(), alpha).map(|e| (v.id, e)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std_err: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub n: usize,
}

fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 32 {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = pairwise_sum(values) / n as f64;
        let dev: Vec<f64> = values.iter().map(|x| (x - mean) * (x - mean)).collect();
        let std_err = if n > 1 {
            (pairwise_sum(&dev) / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Some(Aggregate {
            mean,
            std_err,
            p5: percentile(&s, 0.05),
            p50: percentile(&s, 0.5),
            p95: percentile(&s, 0.95),
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub columns: Vec<Option<Aggregate>>,
    pub iterations: usize,
    pub errors: usize,
    pub first_error: Option<String>,
}

/// Generator for draw `index`: the seed keys the stream, the index picks it.
pub fn draw_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `kernel` once per draw on its own substream and aggregates each
/// output column. Failed draws are counted and left out.
pub fn monte_carlo<F>(iterations: usize, seed: u64, workers: usize, width: usize, kernel: F) -> Result<McSummary>
where
    F: Fn(u64, &mut ChaCha8Rng) -> Result<Vec<f64>> + Sync,
{
    if iterations == 0 {
        return Err(LerisError::InvalidArgument("iterations must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| LerisError::Configuration(e.to_string()))?;
    let draws: Vec<Result<Vec<f64>>> = pool.install(|| {
        (0..iterations as u64)
            .into_par_iter()
            .map(|i| kernel(i, &mut draw_rng(seed, i)))
            .collect()
    });
    let mut cols = vec![Vec::with_capacity(iterations); width];
    let mut errors = 0;
    let mut first_error = None;
    for d in draws {
        match d {
            Ok(v) => {
                if v.len() != width {
                    return Err(LerisError::InvalidArgument(format!(
                        "kernel returned {} values, expected {width}",
                        v.len()
                    )));
                }
                for (c, x) in cols.iter_mut().zip(v) {
                    c.push(x);
                }
            }
            Err(e) => {
                errors += 1;
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    Ok(McSummary {
        columns: cols.iter().map(|c| Aggregate::of(c)).collect(),
        iterations,
        errors,
        first_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: f64,
    pub l: usize,
    /// `None` marks a grid point with no data, such as an uncovered azimuth.
    pub stats: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub name: String,
    pub axis_label: String,
    pub metric_label: String,
    pub rows: Vec<SweepRow>,
    pub seed: u64,
    pub fingerprint: String,
    pub iterations: usize,
    pub errors: usize,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl SweepResult {
    /// CSV with columns `axis, L, mean, p5, p50, p95, n, seed`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| LerisError::Io(e.to_string());
        w.write_record([
            self.axis_label.as_str(),
            "L",
            self.metric_label.as_str(),
            "p5",
            "p50",
            "p95",
            "n",
            "seed",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let axis = r.axis.to_string();
            let l = r.l.to_string();
            let seed = self.seed.to_string();
            let rec = match &r.stats {
                Some(a) => vec![
                    axis,
                    l,
                    a.mean.to_string(),
                    a.p5.to_string(),
                    a.p50.to_string(),
                    a.p95.to_string(),
                    a.n.to_string(),
                    seed,
                ],
                None => vec![axis, l, String::new(), String::new(), String::new(), String::new(), "0".into(), seed],
            };
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| LerisError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn row(&self, axis: f64, l: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.axis == axis && r.l == l)
    }

    pub fn series(&self, l: usize) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.l == l).collect()
    }
}

fn workers(config: &ScenarioConfig, override_workers: Option<usize>) -> usize {
    override_workers.unwrap_or(config.workers)
}

/// Ranging error against user azimuth on the ring, one series per panel set.
/// Values are in millimetres.
pub fn run_error_vs_azimuth(sc: &Scenario, panel_sets: &[Vec<u32>], azimuth_deg: &[f64]) -> Result<SweepResult> {
    if let Some(a) = azimuth_deg.iter().find(|a| !(0.0..=360.0).contains(*a)) {
        return Err(LerisError::InvalidArgument(format!("azimuth {a} outside [0, 360]")));
    }
    let c = sc.room.center();
    let radius = sc.config.sweeps.ring_radius_m;
    let mut rows = Vec::new();
    let mut diagnostics = BTreeMap::new();
    let mut errors = 0;
    for ids in panel_sets {
        let set = sc.active(ids)?;
        let mut uncovered = 0usize;
        for &a in azimuth_deg {
            let phi = a.to_radians();
            let p = Vec3::new(c.x + radius * phi.cos(), c.y + radius * phi.sin(), sc.config.ue.height_m);
            let pose = UePose::facing(p, phi, 0.0);
            let stats = match sc.strongest_anchor_error(&set, &pose) {
                Some(Ok((_, e))) => Aggregate::of(&[e * 1e3]),
                Some(Err(_)) => {
                    errors += 1;
                    None
                }
                None => {
                    uncovered += 1;
                    None
                }
            };
            rows.push(SweepRow { axis: a, l: ids.len(), stats });
        }
        diagnostics.insert(format!("uncovered_L{}", ids.len()), uncovered as f64);
    }
    Ok(SweepResult {
        name: "fig2".into(),
        axis_label: "azimuth_deg".into(),
        metric_label: "mean_delta_d_mm".into(),
        rows,
        seed: sc.config.seed,
        fingerprint: sc.config.fingerprint(),
        iterations: 1,
        errors,
        diagnostics,
        warnings: vec![],
    })
}

/// Outcome of one user draw for one panel set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrawLink {
    pub serving: usize,
    pub estimate: Option<LocalizationEstimate>,
    pub localization_error: Option<String>,
    pub budget: LinkBudget,
}

/// Localize, pick the best route and evaluate it. A user that cannot be
/// localized gets no beam and a zero rate.
pub fn evaluate_draw<R: Rng + ?Sized>(
    sc: &Scenario,
    set: &ActiveSet,
    pose: &UePose,
    rng: Option<&mut R>,
) -> Result<DrawLink> {
    let serving = sc.serving(set, pose).len();
    match sc.localize(set, pose, rng) {
        Ok(est) => {
            let budget = sc.link_budget(set, pose, &est.position())?;
            Ok(DrawLink {
                serving,
                estimate: Some(est),
                localization_error: None,
                budget,
            })
        }
        Err(e @ LerisError::Configuration(_)) => Err(e),
        Err(e) => Ok(DrawLink {
            serving,
            estimate: None,
            localization_error: Some(e.kind().to_string()),
            budget: LinkBudget::infeasible(),
        }),
    }
}

/// Per draw: rates at each `gammas` entry for every set, then one
/// localization-failure flag per set and one under-covered flag per set.
fn rate_kernel(
    sc: &Scenario,
    sets: &[ActiveSet],
    gammas: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let pose = sc.sample_pose(rng);
    let mut rates = Vec::with_capacity(sets.len() * gammas.len());
    let mut fails = Vec::with_capacity(sets.len());
    let mut thin = Vec::with_capacity(sets.len());
    for set in sets {
        let d = evaluate_draw(sc, set, &pose, Some(&mut *rng))?;
        for g in gammas {
            rates.push(d.budget.rate_at(*g, &sc.mmwave, sc.rate_formula));
        }
        fails.push(if d.estimate.is_none() { 1.0 } else { 0.0 });
        thin.push(if d.serving < 3 { 1.0 } else { 0.0 });
    }
    rates.extend(fails);
    rates.extend(thin);
    Ok(rates)
}

fn rate_diagnostics(diag: &mut BTreeMap<String, f64>, sets: &[ActiveSet], cols: &[Option<Aggregate>], tag: &str) {
    for (i, s) in sets.iter().enumerate() {
        let l = s.panel_ids.len();
        let f = cols[i].map_or(0.0, |a| a.mean * a.n as f64);
        let t = cols[sets.len() + i].map_or(0.0, |a| a.mean * a.n as f64);
        *diag.entry(format!("localization_failures_L{l}{tag}")).or_default() += f;
        *diag.entry(format!("under_three_serving_L{l}{tag}")).or_default() += t;
    }
}

/// Mean rate against transmit SNR `P_t / sigma^2` in dB.
pub fn run_rate_vs_snr(
    sc: &Scenario,
    panel_sets: &[Vec<u32>],
    snr_db: &[f64],
    iterations: usize,
    seed: u64,
    workers_override: Option<usize>,
) -> Result<SweepResult> {
    if snr_db.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(LerisError::InvalidArgument("SNR grid must be ascending".into()));
    }
    let sets: Vec<ActiveSet> = panel_sets.iter().map(|s| sc.active(s)).collect::<Result<_>>()?;
    let gammas: Vec<f64> = snr_db.iter().map(|s| db_to_linear(*s)).collect();
    let width = sets.len() * (gammas.len() + 2);
    let mc = monte_carlo(iterations, seed, workers(&sc.config, workers_override), width, |_, rng| {
        rate_kernel(sc, &sets, &gammas, rng)
    })?;
    let mut rows = Vec::new();
    for (i, s) in sets.iter().enumerate() {
        for (j, snr) in snr_db.iter().enumerate() {
            rows.push(SweepRow {
                axis: *snr,
                l: s.panel_ids.len(),
                stats: mc.columns[i * gammas.len() + j],
            });
        }
    }
    let mut diagnostics = BTreeMap::new();
    rate_diagnostics(&mut diagnostics, &sets, &mc.columns[sets.len() * gammas.len()..], "");
    Ok(SweepResult {
        name: "fig3".into(),
        axis_label: "snr_db".into(),
        metric_label: "mean_R".into(),
        rows,
        seed,
        fingerprint: sc.config.fingerprint(),
        iterations,
        errors: mc.errors,
        diagnostics,
        warnings: mc.first_error.into_iter().collect(),
    })
}

/// Mean rate against elements per panel at a fixed SNR. Each count must be a
/// perfect square; the panel is square.
pub fn run_rate_vs_elements(
    config: &ScenarioConfig,
    panel_sets: &[Vec<u32>],
    elements: &[usize],
    snr_db: f64,
    iterations: usize,
    seed: u64,
    workers_override: Option<usize>,
) -> Result<SweepResult> {
    let mut rows = Vec::new();
    let mut diagnostics = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut errors = 0;
    for &n in elements {
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || n == 0 {
            return Err(LerisError::Validation(vec![format!(
                "element count {n} is not a positive perfect square"
            )]));
        }
        let mut cfg = config.clone();
        cfg.mmwave.m_rows = side;
        cfg.mmwave.n_cols = side;
        let sc = build_scenario(&cfg)?;
        let sets: Vec<ActiveSet> = panel_sets.iter().map(|s| sc.active(s)).collect::<Result<_>>()?;
        let gamma = [db_to_linear(snr_db)];
        let width = sets.len() * 3;
        let mc = monte_carlo(iterations, seed, workers(config, workers_override), width, |_, rng| {
            rate_kernel(&sc, &sets, &gamma, rng)
        })?;
        for (i, s) in sets.iter().enumerate() {
            rows.push(SweepRow {
                axis: n as f64,
                l: s.panel_ids.len(),
                stats: mc.columns[i],
            });
        }
        rate_diagnostics(&mut diagnostics, &sets, &mc.columns[sets.len()..], &format!("_N{n}"));
        errors += mc.errors;
        warnings.extend(mc.first_error);
    }
    rows.sort_by(|a, b| a.l.cmp(&b.l).then(a.axis.total_cmp(&b.axis)));
    Ok(SweepResult {
        name: "fig4".into(),
        axis_label: "elements".into(),
        metric_label: "mean_R".into(),
        rows,
        seed,
        fingerprint: config.fingerprint(),
        iterations,
        errors,
        diagnostics,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_fingerprint: String,
    pub seed: u64,
    pub iterations: usize,
    pub workers: usize,
    pub wall_clock_s: f64,
    pub stages: Vec<StageTiming>,
    pub outputs: Vec<String>,
    pub errors: usize,
    pub diagnostics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ScenarioConfig, seed: u64, iterations: usize, workers: usize) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_fingerprint: config.fingerprint(),
            seed,
            iterations,
            workers,
            wall_clock_s: 0.0,
            stages: vec![],
            outputs: vec![],
            errors: 0,
            diagnostics: BTreeMap::new(),
            warnings: vec![],
        }
    }

    pub fn stage(&mut self, name: &str, started: Instant) {
        let seconds = started.elapsed().as_secs_f64();
        self.wall_clock_s += seconds;
        self.stages.push(StageTiming {
            stage: name.into(),
            seconds,
        });
    }

    pub fn absorb(&mut self, r: &SweepResult) {
        self.errors += r.errors;
        self.diagnostics.extend(r.diagnostics.clone());
        self.warnings.extend(r.warnings.iter().cloned());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| LerisError::Io(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

/// Writes `<name>.csv` into `dir`, creating it if needed.
pub fn write_csv(dir: &Path, result: &SweepResult) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.csv", result.name));
    let mut f = std::fs::File::create(&path)?;
    f.write_all(result.to_csv()?.as_bytes())?;
    Ok(path)
}
