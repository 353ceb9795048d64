//! Dual-mode VCSEL ranging, three-anchor trilateration, orientation recovery
//! and the single-link ranging error under noise.

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{LerisError, Result};
use crate::ext::{Ext, ExtVec3};
use crate::geometry::{Room, Vec3};
use crate::optical::{on_axis_power_ext, Photodetector, Vcsel, VcselId, VcselMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModeLabel {
    A,
    B,
}

/// Power received from one VCSEL in one mode.
///
/// `received_power_lo_w` is an optional low-order correction so that
/// simulated powers can carry more than double precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalMeasurement {
    pub vcsel_id: VcselId,
    pub mode: ModeLabel,
    pub received_power_w: f64,
    #[serde(default)]
    pub received_power_lo_w: f64,
}

impl OpticalMeasurement {
    pub fn new(vcsel_id: VcselId, mode: ModeLabel, received_power_w: f64) -> Self {
        OpticalMeasurement {
            vcsel_id,
            mode,
            received_power_w,
            received_power_lo_w: 0.0,
        }
    }

    pub fn from_ext(vcsel_id: VcselId, mode: ModeLabel, p: Ext) -> Self {
        OpticalMeasurement {
            vcsel_id,
            mode,
            received_power_w: p.hi,
            received_power_lo_w: p.lo,
        }
    }

    pub fn power(&self) -> Ext {
        Ext::new(self.received_power_w, self.received_power_lo_w)
    }
}

/// `B_m` without the common factor: `P_t / w0^2`.
fn mode_scale(mode: &VcselMode) -> Ext {
    Ext::from(mode.transmit_power_w) / Ext::prod(mode.beam_waist_m, mode.beam_waist_m)
}

pub(crate) fn mode_ratio_distance_ext(
    p_a: Ext,
    p_b: Ext,
    mode_a: &VcselMode,
    mode_b: &VcselMode,
) -> Result<Ext> {
    let za = mode_a.rayleigh_range_m();
    let zb = mode_b.rayleigh_range_m();
    if za == zb {
        return Err(LerisError::InfeasibleRatio {
            ratio: (p_a / p_b).to_f64(),
        });
    }
    if !(p_a.hi > 0.0 && p_b.hi > 0.0) {
        return Err(LerisError::InvalidArgument("mode powers must be positive".into()));
    }
    // B_b / B_a, the PD area and 2/pi cancel
    let ratio = (p_a * mode_scale(mode_b)) / (p_b * mode_scale(mode_a));
    let za2 = Ext::prod(za, za);
    let zb2 = Ext::prod(zb, zb);
    let num = Ext::ONE - ratio;
    let den = ratio / za2 - Ext::ONE / zb2;
    if num.hi == 0.0 {
        return Ok(Ext::ZERO);
    }
    let d2 = num / den;
    if !(d2.hi >= 0.0) || !d2.is_finite() {
        return Err(LerisError::InfeasibleRatio {
            ratio: ratio.to_f64(),
        });
    }
    Ok(d2.sqrt())
}

/// Range from the ratio of the powers received in the two modes.
///
/// The PD area cancels in the ratio but is accepted for interface symmetry
/// with the forward model.
pub fn mode_ratio_distance(
    p_a: f64,
    p_b: f64,
    mode_a: &VcselMode,
    mode_b: &VcselMode,
    pd_area: f64,
) -> Result<f64> {
    if !(pd_area > 0.0) {
        return Err(LerisError::InvalidArgument("PD area must be positive".into()));
    }
    mode_ratio_distance_ext(Ext::from(p_a), Ext::from(p_b), mode_a, mode_b).map(Ext::to_f64)
}

/// `beta^(m)(d)`: on-axis power per unit incidence cosine.
fn beta_ext(mode: &VcselMode, d: Ext, area: f64) -> Ext {
    on_axis_power_ext(mode, d * d, area, Ext::ONE)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trilateration {
    pub position: Vec3,
    /// Largest `| |r - s_i| - d_i |` over the three anchors.
    pub residual: f64,
    /// The other root, when it was rejected as infeasible.
    pub rejected: Option<Vec3>,
}

const MERGE_TOL_M: f64 = 1e-9;
/// Negative discriminants within this fraction of `d1^2` count as tangency.
const TANGENT_REL_TOL: f64 = 1e-6;

pub(crate) fn trilaterate_ext(
    anchors: &[Vec3; 3],
    d: &[Ext; 3],
    feasible: &dyn Fn(&Vec3) -> bool,
) -> Result<Trilateration> {
    let a2 = ExtVec3::diff(&anchors[1], &anchors[0]);
    let a3 = ExtVec3::diff(&anchors[2], &anchors[0]);
    let w = a2.cross(&a3);
    let wn2 = w.norm_sq();
    let scale = a2.norm_sq() * a3.norm_sq();
    if !(wn2.to_f64() > 1e-24 * scale.to_f64()) {
        return Err(LerisError::DegenerateGeometry("trilateration anchors are collinear".into()));
    }
    let d1s = d[0] * d[0];
    // planes a_k . p = b_k with p = r - s1
    let b2 = (a2.norm_sq() - (d[1] * d[1] - d1s)) * 0.5;
    let b3 = (a3.norm_sq() - (d[2] * d[2] - d1s)) * 0.5;
    let g11 = a2.norm_sq();
    let g12 = a2.dot(&a3);
    let g22 = a3.norm_sq();
    let det = g11 * g22 - g12 * g12;
    let alpha = (b2 * g22 - b3 * g12) / det;
    let beta = (b3 * g11 - b2 * g12) / det;
    let p0 = a2.scale(alpha).add(&a3.scale(beta));
    let mut disc = d1s - p0.norm_sq();
    if disc.hi < 0.0 {
        if -disc.to_f64() <= TANGENT_REL_TOL * d1s.to_f64() {
            disc = Ext::ZERO;
        } else {
            return Err(LerisError::InconsistentRanges {
                discriminant: disc.to_f64(),
            });
        }
    }
    let t = (disc / wn2).sqrt();
    let s1 = ExtVec3::from_vec(&anchors[0]);
    let base = s1.add(&p0);
    let plus = base.add(&w.scale(t)).to_vec();
    let minus = base.sub(&w.scale(t)).to_vec();
    let residual = |r: &Vec3| {
        (0..3)
            .map(|i| (ExtVec3::diff(r, &anchors[i]).norm() - d[i]).to_f64().abs())
            .fold(0.0, f64::max)
    };
    if (t * wn2.sqrt()).to_f64() <= MERGE_TOL_M {
        let r = base.to_vec();
        if !feasible(&r) {
            return Err(LerisError::NoFeasibleRoot);
        }
        return Ok(Trilateration {
            position: r,
            residual: residual(&r),
            rejected: None,
        });
    }
    match (feasible(&plus), feasible(&minus)) {
        (true, true) => Err(LerisError::AmbiguousSolution {
            first: [plus.x, plus.y, plus.z],
            second: [minus.x, minus.y, minus.z],
        }),
        (false, false) => Err(LerisError::NoFeasibleRoot),
        (true, false) => Ok(Trilateration {
            position: plus,
            residual: residual(&plus),
            rejected: Some(minus),
        }),
        (false, true) => Ok(Trilateration {
            position: minus,
            residual: residual(&minus),
            rejected: Some(plus),
        }),
    }
}

/// Point at the given ranges from three anchors, disambiguated by the room.
pub fn trilaterate(anchors: &[Vec3; 3], distances: &[f64; 3], room: &Room) -> Result<Trilateration> {
    if distances.iter().any(|d| !(*d > 0.0)) {
        return Err(LerisError::InvalidArgument("distances must be positive".into()));
    }
    let d = distances.map(Ext::from);
    trilaterate_ext(anchors, &d, &|p| room.contains(p, 1e-9))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationSolution {
    pub raw: Vec3,
    pub normalized: Vec3,
    pub det: f64,
    pub condition_number: f64,
}

const DET_TOL: f64 = 1e-9;

fn direction_matrix(u: &[Vec3; 3]) -> Matrix3<f64> {
    Matrix3::from_rows(&[u[0].transpose(), u[1].transpose(), u[2].transpose()])
}

fn singular_extremes(u: &[Vec3; 3]) -> (f64, f64) {
    let sv = direction_matrix(u).singular_values();
    (sv.max(), sv.min())
}

pub fn condition_number(u: &[Vec3; 3]) -> f64 {
    let (hi, lo) = singular_extremes(u);
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

pub(crate) fn orientation_solve_ext(u: &[ExtVec3; 3], c: &[Ext; 3]) -> Result<OrientationSolution> {
    let c12 = u[1].cross(&u[2]);
    let c20 = u[2].cross(&u[0]);
    let c01 = u[0].cross(&u[1]);
    let det = u[0].dot(&c12);
    let uf = [u[0].to_vec(), u[1].to_vec(), u[2].to_vec()];
    let cond = condition_number(&uf);
    if !(det.to_f64().abs() >= DET_TOL) {
        return Err(LerisError::IllConditioned {
            det: det.to_f64(),
            condition_number: cond,
        });
    }
    let raw = c12.scale(c[0]).add(&c20.scale(c[1])).add(&c01.scale(c[2]));
    let raw = ExtVec3([raw.0[0] / det, raw.0[1] / det, raw.0[2] / det]);
    let n = raw.norm();
    if !(n.hi > 0.0) {
        return Err(LerisError::DegenerateGeometry("orientation solution is the zero vector".into()));
    }
    let normalized = ExtVec3([raw.0[0] / n, raw.0[1] / n, raw.0[2] / n]);
    Ok(OrientationSolution {
        raw: raw.to_vec(),
        normalized: normalized.to_vec(),
        det: det.to_f64(),
        condition_number: cond,
    })
}

/// Solves `U n = c` for the receiver normal, rows of `U` being `unit_dirs`.
pub fn orientation_solve(unit_dirs: &[Vec3; 3], normalized_powers: &[f64; 3]) -> Result<OrientationSolution> {
    let u = unit_dirs.map(|v| ExtVec3::from_vec(&v));
    let c = normalized_powers.map(Ext::from);
    orientation_solve_ext(&u, &c)
}

/// Minimum singular value of the direction matrix seen from `hint`.
fn triplet_score(positions: &[Vec3; 3], hint: &Vec3) -> f64 {
    let u = positions.map(|s| {
        let d = s - hint;
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            Vec3::zeros()
        }
    });
    singular_extremes(&u).1
}

const TRIPLET_DEGENERATE: f64 = 1e-12;

/// All non-degenerate triplets, best conditioned first.
fn rank_triplets(positions: &[Vec3], ids: &[VcselId], hint: &Vec3) -> Vec<([usize; 3], f64)> {
    let n = positions.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let s = triplet_score(&[positions[i], positions[j], positions[k]], hint);
                if s > TRIPLET_DEGENERATE {
                    out.push(([i, j, k], s));
                }
            }
        }
    }
    out.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| {
            let ka = a.0.map(|i| ids[i]);
            let kb = b.0.map(|i| ids[i]);
            ka.cmp(&kb)
        })
    });
    out
}

/// Picks the three anchors whose directions are best conditioned.
///
/// Without a hint the UE is assumed one metre out along the mean boresight
/// from the anchor centroid.
pub fn select_anchor_triplet(candidates: &[Vcsel], ue_hint: Option<&Vec3>) -> Result<[VcselId; 3]> {
    if candidates.len() < 3 {
        return Err(LerisError::InsufficientAnchors {
            found: candidates.len(),
        });
    }
    let mut sorted: Vec<&Vcsel> = candidates.iter().collect();
    sorted.sort_by_key(|v| v.id);
    let positions: Vec<Vec3> = sorted.iter().map(|v| v.position).collect();
    let ids: Vec<VcselId> = sorted.iter().map(|v| v.id).collect();
    let hint = match ue_hint {
        Some(h) => *h,
        None => {
            let k = sorted.len() as f64;
            let c: Vec3 = positions.iter().sum::<Vec3>() / k;
            let b: Vec3 = sorted.iter().map(|v| v.boresight).sum::<Vec3>();
            c + b.try_normalize(1e-12).unwrap_or_else(Vec3::zeros)
        }
    };
    let ranked = rank_triplets(&positions, &ids, &hint);
    ranked
        .first()
        .map(|(t, _)| t.map(|i| ids[i]))
        .ok_or_else(|| LerisError::DegenerateGeometry("every anchor triplet is collinear".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizerOptions {
    /// Both modes must exceed this power for a VCSEL to act as an anchor.
    pub power_floor_w: f64,
    /// Angular slack when testing a root against anchor footprints.
    pub footprint_tol_rad: f64,
    /// Slack when testing a root against the room box.
    pub room_tol_m: f64,
    /// Upper bound on triplets tried before giving up.
    pub max_triplets: usize,
}

impl Default for LocalizerOptions {
    fn default() -> Self {
        LocalizerOptions {
            power_floor_w: 1e-10,
            footprint_tol_rad: 1e-6,
            room_tol_m: 1e-6,
            max_triplets: 256,
        }
    }
}

/// An anchor with its range and mode-a power already known.
#[derive(Debug, Clone, Copy)]
pub struct RangedAnchor<'a> {
    pub vcsel: &'a Vcsel,
    pub distance: Ext,
    pub power_a: Ext,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizationEstimate {
    pub position: [f64; 3],
    pub orientation: [f64; 3],
    pub orientation_raw: [f64; 3],
    pub per_link_distances: [f64; 3],
    pub anchor_ids: [VcselId; 3],
    pub condition_number: f64,
    pub residual_m: f64,
    /// Anchors that passed the power floor and produced a range.
    pub usable_anchors: usize,
}

impl LocalizationEstimate {
    pub fn position(&self) -> Vec3 {
        Vec3::from(self.position)
    }

    pub fn orientation(&self) -> Vec3 {
        Vec3::from(self.orientation)
    }
}

fn solve_triplet(
    anchors: &[RangedAnchor],
    t: [usize; 3],
    feasible: &dyn Fn(&Vec3) -> bool,
    area: f64,
) -> Result<(Trilateration, OrientationSolution)> {
    let pos = t.map(|i| anchors[i].vcsel.position);
    let d = t.map(|i| anchors[i].distance);
    let tri = trilaterate_ext(&pos, &d, feasible)?;
    let r = tri.position;
    let u = t.map(|i| {
        let v = ExtVec3::diff(&anchors[i].vcsel.position, &r);
        let n = v.norm();
        ExtVec3([v.0[0] / n, v.0[1] / n, v.0[2] / n])
    });
    let c = t.map(|i| {
        let a = &anchors[i];
        a.power_a / beta_ext(&a.vcsel.modes.0, a.distance, area)
    });
    let o = orientation_solve_ext(&u, &c)?;
    Ok((tri, o))
}

/// Position and orientation from anchors with known ranges.
pub fn localize_ranged(
    anchors: &[RangedAnchor],
    pd: &Photodetector,
    room: &Room,
    opts: &LocalizerOptions,
) -> Result<LocalizationEstimate> {
    if anchors.len() < 3 {
        return Err(LerisError::InsufficientAnchors { found: anchors.len() });
    }
    let positions: Vec<Vec3> = anchors.iter().map(|a| a.vcsel.position).collect();
    let ids: Vec<VcselId> = anchors.iter().map(|a| a.vcsel.id).collect();
    let k = anchors.len() as f64;
    let hint: Vec3 = anchors
        .iter()
        .map(|a| a.vcsel.position + a.vcsel.boresight * a.distance.to_f64())
        .sum::<Vec3>()
        / k;
    let feasible = |p: &Vec3| {
        room.contains(p, opts.room_tol_m)
            && anchors
                .iter()
                .all(|a| a.vcsel.illuminates_with_tol(p, opts.footprint_tol_rad))
    };

    let attempt = |ranked: &[([usize; 3], f64)]| -> Result<([usize; 3], Trilateration, OrientationSolution)> {
        let mut first_err = None;
        for (t, _) in ranked.iter().take(opts.max_triplets) {
            match solve_triplet(anchors, *t, &feasible, pd.area_m2) {
                Ok((tri, o)) => return Ok((*t, tri, o)),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        Err(first_err.unwrap_or_else(|| {
            LerisError::DegenerateGeometry("every anchor triplet is collinear".into())
        }))
    };

    let coarse = rank_triplets(&positions, &ids, &hint);
    let (mut t, mut tri, mut o) = attempt(&coarse)?;
    // re-rank around the first fix; the coarse hint ignores elevation
    let refined = rank_triplets(&positions, &ids, &tri.position);
    if let Some((best, _)) = refined.first() {
        if *best != t {
            if let Ok((t2, tri2, o2)) = attempt(&refined[..1]) {
                t = t2;
                tri = tri2;
                o = o2;
            }
        }
    }
    let r = tri.position;
    Ok(LocalizationEstimate {
        position: [r.x, r.y, r.z],
        orientation: [o.normalized.x, o.normalized.y, o.normalized.z],
        orientation_raw: [o.raw.x, o.raw.y, o.raw.z],
        per_link_distances: t.map(|i| anchors[i].distance.to_f64()),
        anchor_ids: t.map(|i| anchors[i].vcsel.id),
        condition_number: o.condition_number,
        residual_m: tri.residual,
        usable_anchors: anchors.len(),
    })
}

/// Full dual-mode pipeline from raw measurements.
pub fn localize(
    measurements: &[OpticalMeasurement],
    registry: &[Vcsel],
    pd: &Photodetector,
    room: &Room,
) -> Result<LocalizationEstimate> {
    localize_with(measurements, registry, pd, room, &LocalizerOptions::default())
}

pub fn localize_with(
    measurements: &[OpticalMeasurement],
    registry: &[Vcsel],
    pd: &Photodetector,
    room: &Room,
    opts: &LocalizerOptions,
) -> Result<LocalizationEstimate> {
    let mut by_id: BTreeMap<VcselId, (Option<Ext>, Option<Ext>)> = BTreeMap::new();
    for m in measurements {
        let e = by_id.entry(m.vcsel_id).or_default();
        match m.mode {
            ModeLabel::A => e.0 = Some(m.power()),
            ModeLabel::B => e.1 = Some(m.power()),
        }
    }
    let mut anchors = Vec::new();
    let mut range_err = None;
    for (id, pair) in &by_id {
        let (Some(pa), Some(pb)) = *pair else { continue };
        if !(pa.hi > opts.power_floor_w && pb.hi > opts.power_floor_w) {
            continue;
        }
        let Some(v) = registry.iter().find(|v| v.id == *id) else {
            return Err(LerisError::InvalidArgument(format!("measurement from unknown VCSEL {id}")));
        };
        match mode_ratio_distance_ext(pa, pb, &v.modes.0, &v.modes.1) {
            Ok(d) if d.hi > 0.0 => anchors.push(RangedAnchor {
                vcsel: v,
                distance: d,
                power_a: pa,
            }),
            Ok(_) => {}
            Err(e) => {
                range_err.get_or_insert(e);
            }
        }
    }
    if anchors.len() < 3 {
        if let Some(e) = range_err {
            return Err(e);
        }
        return Err(LerisError::InsufficientAnchors { found: anchors.len() });
    }
    localize_ranged(&anchors, pd, room, opts)
}

/// Single-link range error under SNR `alpha`.
pub fn ranging_error(d: f64, z_r: f64, alpha: f64) -> Result<f64> {
    check_ranging(d, z_r, alpha)?;
    if alpha.is_infinite() {
        return Ok(0.0);
    }
    let q = z_r / d;
    let x = (alpha - q * q) / (1.0 + alpha);
    // 1 - sqrt(x) without cancellation
    Ok(d * (1.0 + q * q) / ((1.0 + alpha) * (1.0 + x.sqrt())))
}

fn check_ranging(d: f64, z_r: f64, alpha: f64) -> Result<()> {
    if !(d > 0.0) || !(z_r >= 0.0) {
        return Err(LerisError::InvalidArgument("need d > 0 and z_R >= 0".into()));
    }
    let bound = (z_r / d) * (z_r / d);
    if !(alpha > bound) {
        return Err(LerisError::NoiseDominated { alpha, bound });
    }
    Ok(())
}

/// Range recovered from a power inflated by noise at SNR `alpha`.
pub fn estimated_distance_under_noise(d: f64, z_r: f64, alpha: f64) -> Result<f64> {
    estimated_distance_under_noise_ext(d, z_r, alpha).map(Ext::to_f64)
}

/// Same as [`estimated_distance_under_noise`], in double-double precision.
pub fn estimated_distance_under_noise_ext(d: f64, z_r: f64, alpha: f64) -> Result<Ext> {
    check_ranging(d, z_r, alpha)?;
    if alpha.is_infinite() {
        return Ok(Ext::from(d));
    }
    let num = Ext::from(alpha) * Ext::prod(d, d) - Ext::prod(z_r, z_r);
    Ok((num / (Ext::from(alpha) + 1.0)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use crate::optical::received_los_power;
    use proptest::prelude::*;

    fn mode_a() -> VcselMode {
        VcselMode::new(10e-3, 5.6e-6, 950e-9).unwrap()
    }

    fn mode_b() -> VcselMode {
        VcselMode::new(10e-3, 11.2e-6, 950e-9).unwrap()
    }

    // forward model written out independently of the crate helpers
    fn on_axis(mode: &VcselMode, d: f64, area: f64) -> f64 {
        let z = std::f64::consts::PI * mode.beam_waist_m.powi(2) / mode.wavelength_m;
        let w2 = mode.beam_waist_m.powi(2) * (1.0 + (d / z).powi(2));
        2.0 * mode.transmit_power_w / (std::f64::consts::PI * w2) * area
    }

    #[test]
    fn mode_ratio_round_trip_two_metres() {
        let (a, b) = (mode_a(), mode_b());
        assert!((a.rayleigh_range_m() - 1.0371e-4).abs() < 1e-8);
        assert!((b.rayleigh_range_m() - 4.1482e-4).abs() < 1e-8);
        let pa = on_axis(&a, 2.0, 1e-4);
        let pb = on_axis(&b, 2.0, 1e-4);
        let d = mode_ratio_distance(pa, pb, &a, &b, 1e-4).unwrap();
        assert!((d - 2.0).abs() / 2.0 < 1e-5);
        // ratio sits just above za^2/zb^2 = 1/16
        let ratio = (pa / pb) / 4.0;
        assert!(ratio > 0.0625 && ratio < 0.0626);
    }

    #[test]
    fn mode_ratio_at_waist_is_zero() {
        let (a, b) = (mode_a(), mode_b());
        let pa = on_axis(&a, 0.0, 1e-4);
        let pb = on_axis(&b, 0.0, 1e-4);
        assert_eq!(mode_ratio_distance(pa, pb, &a, &b, 1e-4).unwrap(), 0.0);
    }

    #[test]
    fn identical_modes_are_not_identifiable() {
        let a = mode_a();
        assert!(matches!(
            mode_ratio_distance(1e-6, 1e-6, &a, &a, 1e-4),
            Err(LerisError::InfeasibleRatio { .. })
        ));
    }

    #[test]
    fn ratio_outside_feasible_interval() {
        let (a, b) = (mode_a(), mode_b());
        // mode a far weaker than any distance allows
        match mode_ratio_distance(1e-9, 1e-3, &a, &b, 1e-4) {
            Err(LerisError::InfeasibleRatio { ratio }) => assert!(ratio < 0.0625),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trilaterate_wall_anchors() {
        let s = [
            Vec3::new(0.0, 4.5, 1.0),
            Vec3::new(0.0, 5.5, 1.0),
            Vec3::new(0.0, 5.0, 2.0),
        ];
        let truth = Vec3::new(3.0, 5.0, 1.5);
        let d = s.map(|a| (a - truth).norm());
        assert!((d[0] - 3.0822).abs() < 1e-4 && (d[2] - 3.0414).abs() < 1e-4);
        let t = trilaterate(&s, &d, &Room::default()).unwrap();
        assert!((t.position - truth).norm() < 1e-12);
        let mirror = t.rejected.unwrap();
        assert!((mirror - Vec3::new(-3.0, 5.0, 1.5)).norm() < 1e-12);
        assert!(t.residual < 1e-12);
    }

    #[test]
    fn trilaterate_simplex_axis() {
        // equal ranges put the point on the (1,1,1) axis at t with 3t^2 - 2t + 1 = d^2
        let s = [Vec3::x(), Vec3::y(), Vec3::z()];
        let d: f64 = 1.5;
        let t = (2.0 + (4.0 - 12.0 * (1.0 - d * d)).sqrt()) / 6.0;
        let room = Room { min: [0.0; 3], max: [10.0; 3] };
        let r = trilaterate(&s, &[d; 3], &room).unwrap();
        assert!((r.position - Vec3::new(t, t, t)).norm() < 1e-12);
        assert!(r.residual < 1e-9);
    }

    #[test]
    fn trilaterate_collinear() {
        let s = [Vec3::zeros(), Vec3::y(), Vec3::new(0.0, 2.0, 0.0)];
        assert!(matches!(
            trilaterate(&s, &[1.0, 1.0, 1.0], &Room::default()),
            Err(LerisError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn trilaterate_inconsistent_and_ambiguous() {
        let s = [Vec3::new(0.0, 4.5, 1.0), Vec3::new(0.0, 5.5, 1.0), Vec3::new(0.0, 5.0, 2.0)];
        assert!(matches!(
            trilaterate(&s, &[0.1, 0.1, 0.1], &Room::default()),
            Err(LerisError::InconsistentRanges { .. })
        ));
        let wide = Room { min: [-10.0, 0.0, 0.0], max: [10.0, 10.0, 3.0] };
        let truth = Vec3::new(3.0, 5.0, 1.5);
        let d = s.map(|a| (a - truth).norm());
        assert!(matches!(trilaterate(&s, &d, &wide), Err(LerisError::AmbiguousSolution { .. })));
    }

    #[test]
    fn orientation_examples() {
        let u = [Vec3::x(), Vec3::y(), Vec3::z()];
        let o = orientation_solve(&u, &[0.6, 0.8, 0.0]).unwrap();
        assert!((o.normalized - Vec3::new(0.6, 0.8, 0.0)).norm() < 1e-15);
        assert!((o.condition_number - 1.0).abs() < 1e-12);

        let r = Vec3::new(4.0, 6.0, 1.5);
        let anchors = [Vec3::new(0.0, 5.0, 1.0), Vec3::new(5.0, 0.0, 2.0), Vec3::new(0.0, 7.0, 2.2)];
        let u = anchors.map(|s| (s - r).normalize());
        let n = -Vec3::x();
        let c = u.map(|ui| ui.dot(&n));
        let o = orientation_solve(&u, &c).unwrap();
        assert!((o.normalized - n).norm() < 1e-9);

        let flat = [Vec3::x(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0).normalize()];
        assert!(matches!(orientation_solve(&flat, &[1.0, 0.0, 0.0]), Err(LerisError::IllConditioned { .. })));
    }

    fn test_vcsel(id: u32, pos: Vec3, normal: Vec3) -> Vcsel {
        let frame = Frame::from_normal(&normal).unwrap();
        Vcsel {
            id: VcselId { panel: 1, index: id },
            position: pos,
            boresight: normal,
            azimuth_sector: (-1.2, 1.2),
            footprint_margin_rad: 0.0,
            elevation_limit_rad: 1.2,
            modes: (mode_a(), mode_b()),
            panel_id: 1,
            panel_frame: frame,
        }
    }

    #[test]
    fn triplet_selection_examples() {
        let n = Vec3::x();
        let three: Vec<Vcsel> = (0..3)
            .map(|i| test_vcsel(i, Vec3::new(0.0, 4.0 + i as f64, 1.0 + (i % 2) as f64), n))
            .collect();
        let got = select_anchor_triplet(&three, None).unwrap();
        assert_eq!(got, [three[0].id, three[1].id, three[2].id]);

        // third anchor nearly on the line through the first two
        let four = vec![
            test_vcsel(0, Vec3::new(0.0, 4.0, 1.0), n),
            test_vcsel(1, Vec3::new(0.0, 5.0, 1.0), n),
            test_vcsel(2, Vec3::new(0.0, 6.0, 1.0001), n),
            test_vcsel(3, Vec3::new(0.0, 5.0, 2.0), n),
        ];
        let hint = Vec3::new(3.0, 5.0, 1.5);
        let got = select_anchor_triplet(&four, Some(&hint)).unwrap();
        let mut best = None;
        for t in [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]] {
            let u = t.map(|i: usize| (four[i].position - hint).normalize());
            let m = Matrix3::from_rows(&[u[0].transpose(), u[1].transpose(), u[2].transpose()]);
            let s = m.singular_values().min();
            if best.map_or(true, |(bs, _)| s > bs) {
                best = Some((s, t));
            }
        }
        let want = best.unwrap().1.map(|i| four[i].id);
        assert_eq!(got, want);
        assert_ne!(got, [four[0].id, four[1].id, four[2].id]);

        // mirror-image pair: equal scores, lexicographic winner
        let sym = vec![
            test_vcsel(0, Vec3::new(0.0, 4.0, 1.0), n),
            test_vcsel(1, Vec3::new(0.0, 6.0, 1.0), n),
            test_vcsel(2, Vec3::new(0.0, 5.0, 2.0), n),
            test_vcsel(3, Vec3::new(0.0, 5.0, 0.0), n),
        ];
        let got = select_anchor_triplet(&sym, Some(&Vec3::new(3.0, 5.0, 1.0))).unwrap();
        assert_eq!(got, [sym[0].id, sym[1].id, sym[2].id]);

        let line: Vec<Vcsel> = (0..4).map(|i| test_vcsel(i, Vec3::new(0.0, i as f64, 1.0), n)).collect();
        assert!(matches!(
            select_anchor_triplet(&line, Some(&hint)),
            Err(LerisError::DegenerateGeometry(_))
        ));
    }

    fn synth(vcsels: &[Vcsel], r: &Vec3, n: &Vec3, area: f64) -> Vec<OpticalMeasurement> {
        let mut out = Vec::new();
        for v in vcsels {
            let d2 = ExtVec3::diff(&v.position, r).norm_sq();
            let u = ExtVec3::diff(&v.position, r);
            let cos = u.dot(&ExtVec3::from_vec(n)) / d2.sqrt();
            if cos.hi <= 0.0 {
                continue;
            }
            out.push(OpticalMeasurement::from_ext(v.id, ModeLabel::A, on_axis_power_ext(&v.modes.0, d2, area, cos)));
            out.push(OpticalMeasurement::from_ext(v.id, ModeLabel::B, on_axis_power_ext(&v.modes.1, d2, area, cos)));
        }
        out
    }

    #[test]
    fn localize_round_trip_and_shortfall() {
        let n = Vec3::x();
        let vcsels = vec![
            test_vcsel(0, Vec3::new(0.0, 4.875, 1.4), n),
            test_vcsel(1, Vec3::new(0.0, 5.125, 1.45), n),
            test_vcsel(2, Vec3::new(0.0, 5.0, 1.625), n),
            test_vcsel(3, Vec3::new(0.0, 4.9, 1.375), n),
        ];
        let r = Vec3::new(4.0, 6.0, 1.5);
        let ue_n = (Vec3::new(0.0, 5.0, 1.5) - r).normalize();
        let pd = Photodetector::default().with_normal(&ue_n);
        let m = synth(&vcsels, &r, &ue_n, pd.area_m2);
        let est = localize(&m, &vcsels, &pd, &Room::default()).unwrap();
        assert!((est.position() - r).norm() < 1e-6);
        let ang = est.orientation().dot(&ue_n).clamp(-1.0, 1.0).acos();
        assert!(ang < 1e-6, "{ang}");
        assert!((est.orientation().norm() - 1.0).abs() < 1e-12);
        assert!(est.per_link_distances.iter().all(|d| *d > 0.0));

        let two: Vec<_> = m.iter().filter(|x| x.vcsel_id.index < 2).cloned().collect();
        assert!(matches!(
            localize(&two, &vcsels, &pd, &Room::default()),
            Err(LerisError::InsufficientAnchors { found: 2 })
        ));
    }

    #[test]
    fn localize_picks_best_conditioned_of_many() {
        use rand::{RngExt, SeedableRng};
        let mut vcsels = Vec::new();
        for (k, (cx, cy, nx, ny)) in [(0.0, 5.0, 1.0, 0.0), (5.0, 0.0, 0.0, 1.0)].iter().enumerate() {
            let normal = Vec3::new(*nx, *ny, 0.0);
            let frame = Frame::from_normal(&normal).unwrap();
            for i in 0..12 {
                let a = i as f64 / 12.0 * std::f64::consts::TAU;
                let off = frame.ex * 0.2 * a.cos() + frame.ey * 0.2 * a.sin();
                vcsels.push(test_vcsel((k * 12 + i) as u32, Vec3::new(*cx, *cy, 1.5) + off, normal));
            }
        }
        let r = Vec3::new(4.0, 6.0, 1.5);
        let ue_n = Vec3::new(-1.0, -1.0, 0.0).normalize();
        let pd = Photodetector::default().with_normal(&ue_n);
        let m = synth(&vcsels, &r, &ue_n, pd.area_m2);
        assert_eq!(m.len(), 48);
        let est = localize(&m, &vcsels, &pd, &Room::default()).unwrap();
        assert!((est.position() - r).norm() < 1e-6);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mut t = [0usize; 3];
            loop {
                for x in t.iter_mut() {
                    *x = rng.random_range(0..24);
                }
                if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                    break;
                }
            }
            let u = t.map(|i| (vcsels[i].position - r).normalize());
            assert!(est.condition_number <= condition_number(&u) * (1.0 + 1e-9));
        }
    }

    #[test]
    fn ranging_error_examples() {
        let z = 1.0371e-4;
        assert!(ranging_error(2.0, z, 1e15).unwrap() < 1e-9 * 2.0);
        let e = ranging_error(2.0, z, 1e6).unwrap();
        assert!((e - 1.0e-6).abs() < 1e-8);
        let dh = estimated_distance_under_noise_ext(2.0, z, 1e6).unwrap();
        assert!((((Ext::from(2.0) - dh).to_f64() - e) / e).abs() < 1e-12);
        assert!(matches!(ranging_error(2.0, z, (z / 2.0).powi(2)), Err(LerisError::NoiseDominated { .. })));
        assert_eq!(estimated_distance_under_noise(2.0, z, f64::INFINITY).unwrap(), 2.0);
        let dh = estimated_distance_under_noise(2.0, 0.0, 3.0).unwrap();
        assert!((dh - 2.0 * (0.75f64).sqrt()).abs() < 1e-15);
        assert!((estimated_distance_under_noise(2.0, z, 1e6).unwrap() - (2.0 - 1.0e-6)).abs() < 1e-8);
    }

    #[test]
    fn los_power_agrees_with_forward_oracle() {
        let a = mode_a();
        let pd = Photodetector::default();
        let p = received_los_power(&a, 3.0, 0.0, &pd, 0.0).unwrap();
        assert!(((p - on_axis(&a, 3.0, 1e-4)) / p).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn mode_ratio_round_trip_f64(d in 0.1f64..10.0) {
            let (a, b) = (mode_a(), mode_b());
            let pa = on_axis(&a, d, 1e-4);
            let pb = on_axis(&b, d, 1e-4);
            let got = mode_ratio_distance(pa, pb, &a, &b, 1e-4).unwrap();
            prop_assert!(((got - d) / d).abs() < 1e-5);
        }

        #[test]
        fn mode_ratio_round_trip_ext(d in 0.1f64..10.0, wb in 1.5f64..4.0) {
            let a = mode_a();
            let b = VcselMode::new(7e-3, 5.6e-6 * wb, 950e-9).unwrap();
            let d2 = Ext::prod(d, d);
            let pa = on_axis_power_ext(&a, d2, 1e-4, Ext::ONE);
            let pb = on_axis_power_ext(&b, d2, 1e-4, Ext::ONE);
            let got = mode_ratio_distance_ext(pa, pb, &a, &b).unwrap().to_f64();
            prop_assert!(((got - d) / d).abs() < 1e-12);
        }

        #[test]
        fn trilateration_exact(x in 0.2f64..9.8, y in 0.2f64..9.8, z in 0.2f64..2.8) {
            let s = [Vec3::new(0.0, 4.5, 1.0), Vec3::new(0.0, 5.5, 1.2), Vec3::new(0.0, 5.0, 2.0)];
            let r = Vec3::new(x, y, z);
            let d = s.map(|a| (a - r).norm());
            let t = trilaterate(&s, &d, &Room::default()).unwrap();
            prop_assert!((t.position - r).norm() < 1e-9);
        }

        #[test]
        fn trilateration_scale_equivariant(x in 0.5f64..4.0, y in 0.5f64..4.0, k in 0.1f64..2.0) {
            let s = [Vec3::new(0.0, 1.5, 0.5), Vec3::new(0.0, 2.5, 0.6), Vec3::new(0.0, 2.0, 1.4)];
            let r = Vec3::new(x, y, 1.0);
            let d = s.map(|a| (a - r).norm());
            let big = Room { min: [0.0; 3], max: [100.0; 3] };
            let base = trilaterate(&s, &d, &big).unwrap().position;
            let scaled = trilaterate(&s.map(|a| a * k), &d.map(|v| v * k), &big).unwrap().position;
            prop_assert!((scaled - base * k).norm() < 1e-9 * k.max(1.0));
        }

        #[test]
        fn orientation_reproduces_c(
            a in prop::array::uniform3(-1.0f64..1.0),
            b in prop::array::uniform3(-1.0f64..1.0),
            c in prop::array::uniform3(-1.0f64..1.0),
            rhs in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let u = [Vec3::from(a), Vec3::from(b), Vec3::from(c)];
            prop_assume!(u.iter().all(|v| v.norm() > 0.1));
            let u = u.map(|v| v.normalize());
            prop_assume!(condition_number(&u) < 1e3);
            let o = orientation_solve(&u, &rhs).unwrap();
            for i in 0..3 {
                prop_assert!((u[i].dot(&o.raw) - rhs[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn ranging_error_nonnegative_and_monotone(d in 0.1f64..10.0, zr in 1e-5f64..1e-3, la in 0.0f64..12.0, step in 0.01f64..2.0) {
            let alpha = 10f64.powf(la) + (zr / d).powi(2) * 1.01;
            let e1 = ranging_error(d, zr, alpha).unwrap();
            let e2 = ranging_error(d, zr, alpha * (1.0 + step)).unwrap();
            prop_assert!(e1 >= 0.0);
            prop_assert!(e2 <= e1);
        }
    }
}
