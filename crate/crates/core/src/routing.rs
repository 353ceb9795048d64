//! Candidate routes through the panels and rate-maximizing selection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{LerisError, Result};
use crate::geometry::Vec3;
use crate::mmwave::{
    path_loss, spectral_efficiency_at, total_route_gain, FinalGainEvaluator, LerisPanel, MmWaveParams,
    RateFormula, RouteGain,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccessPoint {
    pub position: [f64; 3],
    pub boresight: [f64; 3],
}

impl Default for AccessPoint {
    fn default() -> Self {
        AccessPoint {
            position: [5.0, -1.0, 1.5],
            boresight: [0.0, 1.0, 0.0],
        }
    }
}

/// Receiving user: position, antenna normal and acceptance half-angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserNode {
    pub position: Vec3,
    pub normal: Vec3,
    pub half_angle_rad: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum Node<'a> {
    AccessPoint(&'a AccessPoint),
    Panel(&'a LerisPanel),
    User(&'a UserNode),
}

impl Node<'_> {
    pub fn position(&self) -> Vec3 {
        match self {
            Node::AccessPoint(a) => Vec3::from(a.position),
            Node::Panel(p) => p.center(),
            Node::User(u) => u.position,
        }
    }

    /// True when the unit direction `dir`, pointing away from the node, is
    /// inside its field of view.
    fn sees(&self, dir: &Vec3) -> bool {
        match self {
            Node::AccessPoint(a) => Vec3::from(a.boresight).dot(dir) > 0.0,
            Node::Panel(p) => p.normal().dot(dir) > 0.0,
            Node::User(u) => {
                let c = u.normal.normalize().dot(dir).clamp(-1.0, 1.0);
                c > 0.0 && c.acos() <= u.half_angle_rad
            }
        }
    }
}

/// Feasibility of one hop: both ends must face each other.
pub fn segment_feasible(from: &Node, to: &Node) -> bool {
    let d = to.position() - from.position();
    let n = d.norm();
    if !(n > 0.0) {
        return false;
    }
    let dir = d / n;
    from.sees(&dir) && to.sees(&-dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Route {
    pub panel_ids: Vec<u32>,
    /// AP to first panel, between panels, last panel to user.
    pub segment_lengths: Vec<f64>,
    pub feasibility: Vec<bool>,
    pub aggregate_feasible: bool,
}

impl Route {
    pub fn len(&self) -> usize {
        self.panel_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panel_ids.is_empty()
    }
}

fn permutations_of_subsets(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut [bool], k: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, k, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    for k in 1..=n {
        extend(&mut Vec::new(), &mut vec![false; n], k, &mut out);
    }
    out
}

/// Every ordered sequence of distinct panels, shortest first, then by ids.
pub fn enumerate_routes(panels: &[LerisPanel], ap: &AccessPoint, ue: &UserNode) -> Vec<Route> {
    let mut order: Vec<usize> = (0..panels.len()).collect();
    order.sort_by_key(|&i| panels[i].id);
    let mut routes: Vec<Route> = permutations_of_subsets(panels.len())
        .into_iter()
        .map(|seq| {
            let mut nodes = vec![Node::AccessPoint(ap)];
            nodes.extend(seq.iter().map(|&k| Node::Panel(&panels[order[k]])));
            nodes.push(Node::User(ue));
            let feasibility: Vec<bool> = nodes.windows(2).map(|w| segment_feasible(&w[0], &w[1])).collect();
            Route {
                panel_ids: seq.iter().map(|&k| panels[order[k]].id).collect(),
                segment_lengths: nodes.windows(2).map(|w| (w[1].position() - w[0].position()).norm()).collect(),
                aggregate_feasible: feasibility.iter().all(|x| *x),
                feasibility,
            }
        })
        .collect();
    routes.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.panel_ids.cmp(&b.panel_ids)));
    routes
}

/// Everything a route evaluation needs besides the route itself.
pub struct ChannelContext<'a> {
    pub panels: &'a [LerisPanel],
    pub ap: &'a AccessPoint,
    pub params: &'a MmWaveParams,
    pub evaluator: &'a FinalGainEvaluator,
    /// Point the final panel steers toward.
    pub estimated_ue: Vec3,
    /// Actual user, used for the realized gain.
    pub user: UserNode,
    pub formula: RateFormula,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkBudget {
    pub route: Option<Route>,
    pub gain: Option<RouteGain>,
    pub route_gain: f64,
    pub path_loss: f64,
    /// `l_p * G_t * G_route`; the SNR is this times `gamma_t`.
    pub snr_factor: f64,
    pub spectral_efficiency: f64,
    pub feasible: bool,
}

impl LinkBudget {
    pub fn infeasible() -> Self {
        LinkBudget {
            route: None,
            gain: None,
            route_gain: 0.0,
            path_loss: 0.0,
            snr_factor: 0.0,
            spectral_efficiency: 0.0,
            feasible: false,
        }
    }

    /// Rate of the same route at another transmit SNR.
    pub fn rate_at(&self, gamma_t: f64, params: &MmWaveParams, formula: RateFormula) -> f64 {
        if !self.feasible {
            return 0.0;
        }
        spectral_efficiency_at(self.route_gain, self.path_loss, params.tx_gain, gamma_t, params.noise_power, formula)
    }
}

impl ChannelContext<'_> {
    fn panel(&self, id: u32) -> Result<&LerisPanel> {
        self.panels
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| LerisError::InvalidArgument(format!("route uses unknown panel {id}")))
    }

    /// Angle between the user's normal and the direction to `p`.
    fn user_angle(&self, p: &Vec3) -> f64 {
        let d = (p - self.user.position).normalize();
        self.user.normal.normalize().dot(&d).clamp(-1.0, 1.0).acos()
    }

    /// Budget of one route; zero rate when any hop is infeasible.
    pub fn evaluate(&self, route: &Route) -> Result<LinkBudget> {
        let mut memo = HashMap::new();
        self.evaluate_memo(route, &mut memo)
    }

    fn evaluate_memo(&self, route: &Route, memo: &mut HashMap<(u32, Option<u32>), RouteGain>) -> Result<LinkBudget> {
        let panels: Vec<&LerisPanel> = route.panel_ids.iter().map(|id| self.panel(*id)).collect::<Result<_>>()?;
        let lp = path_loss(&route.segment_lengths, self.params)?;
        if !route.aggregate_feasible {
            return Ok(LinkBudget {
                route: Some(route.clone()),
                path_loss: lp,
                ..LinkBudget::infeasible()
            });
        }
        let last = *panels.last().expect("routes are non-empty");
        let prev = if panels.len() > 1 { Some(panels[panels.len() - 2].id) } else { None };
        let key = (last.id, prev);
        let tail = match memo.get(&key) {
            Some(g) => *g,
            None => {
                let source = match prev {
                    Some(id) => self.panel(id)?.center(),
                    None => Vec3::from(self.ap.position),
                };
                let g = total_route_gain(
                    &[last],
                    &source,
                    &self.estimated_ue,
                    &self.user.position,
                    self.user_angle(&last.center()),
                    self.params,
                    self.evaluator,
                )?;
                memo.insert(key, g);
                g
            }
        };
        let head = crate::mmwave::cascaded_gain(&panels[..panels.len() - 1], self.params.wavelength_m);
        let gain = RouteGain { cascaded: head, ..tail };
        let route_gain = gain.total();
        let snr_factor = lp * self.params.tx_gain * route_gain;
        let rate = spectral_efficiency_at(
            route_gain,
            lp,
            self.params.tx_gain,
            self.params.gamma_t(),
            self.params.noise_power,
            self.formula,
        );
        Ok(LinkBudget {
            route: Some(route.clone()),
            gain: Some(gain),
            route_gain,
            path_loss: lp,
            snr_factor,
            spectral_efficiency: rate,
            feasible: route_gain > 0.0,
        })
    }
}

/// Highest-rate route. Ties keep the earlier route in enumeration order,
/// that is the shorter one and then the lexicographically smaller.
pub fn best_route(routes: &[Route], ctx: &ChannelContext) -> Result<LinkBudget> {
    let mut memo = HashMap::new();
    let mut best: Option<LinkBudget> = None;
    for r in routes.iter().filter(|r| r.aggregate_feasible) {
        let b = ctx.evaluate_memo(r, &mut memo)?;
        if !b.feasible {
            continue;
        }
        if best.as_ref().is_none_or(|x| b.snr_factor > x.snr_factor) {
            best = Some(b);
        }
    }
    Ok(best.unwrap_or_else(LinkBudget::infeasible))
}
