//! UL-TDOA and multi-RTT positioning against (possibly airborne) anchors.
//!
//! Solvers work in meters: TDOA residuals are `c·τ_i − (d_i − d_ref)` and
//! RTT residuals `c·RTT_i/2 − d_i`, minimized by Gauss-Newton with step
//! halving. DOP values come from the same Jacobians.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::Position;
use crate::sim::RngStream;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnchorId(pub u32);

impl fmt::Display for AnchorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "prn{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PositioningError {
    #[error("need at least {need} anchors, got {got}")]
    TooFewAnchors { need: usize, got: usize },
    #[error("degenerate anchor geometry (condition number {condition_number:.3e})")]
    DegenerateGeometry { condition_number: f64 },
    #[error("no measurement for anchor {0}")]
    MissingMeasurement(AnchorId),
    #[error("anchor {0} has a non-finite position")]
    NonFinite(AnchorId),
    #[error("round-trip time for {0} is not positive")]
    NonPositiveRtt(AnchorId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub anchor_id: AnchorId,
    pub position: Position,
    /// Offset of this anchor's clock from network time.
    #[serde(default)]
    pub clock_offset_s: f64,
    #[serde(default)]
    pub is_airborne: bool,
}

impl Anchor {
    pub fn new(id: u32, position: Position) -> Self {
        Anchor {
            anchor_id: AnchorId(id),
            position,
            clock_offset_s: 0.0,
            is_airborne: false,
        }
    }

    pub fn airborne(mut self) -> Self {
        self.is_airborne = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaSet {
    pub reference_anchor: AnchorId,
    /// `τ_i = t_i − t_ref`; the reference maps to exactly 0.
    pub tdoas_s: BTreeMap<AnchorId, f64>,
    pub noise_sigma_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttSet {
    pub rtts_s: BTreeMap<AnchorId, f64>,
    pub noise_sigma_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionEstimate {
    pub position: Position,
    pub iterations: u32,
    /// RMS of the final range-domain residuals.
    pub residual_m: f64,
    pub covariance: Matrix3<f64>,
    pub condition_number: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Tdoa,
    Rtt,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dop {
    pub hdop: f64,
    pub vdop: f64,
    pub gdop: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: u32,
    pub step_tolerance_m: f64,
    pub max_halvings: u32,
    /// Normal matrices worse conditioned than this count as singular.
    pub max_condition: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 50,
            step_tolerance_m: 1e-6,
            max_halvings: 10,
            max_condition: 1e12,
        }
    }
}

fn check_anchors(anchors: &[Anchor], need: usize) -> Result<(), PositioningError> {
    if anchors.len() < need {
        return Err(PositioningError::TooFewAnchors {
            need,
            got: anchors.len(),
        });
    }
    for a in anchors {
        if !a.position.is_finite() {
            return Err(PositioningError::NonFinite(a.anchor_id));
        }
    }
    Ok(())
}

pub fn centroid(anchors: &[Anchor]) -> Position {
    let sum: Vector3<f64> = anchors.iter().map(|a| a.position.to_vector()).sum();
    Position::from_vector(&(sum / anchors.len() as f64))
}

/// Index of the anchor nearest the centroid; earliest wins ties.
pub fn reference_index(anchors: &[Anchor]) -> usize {
    let c = centroid(anchors);
    let mut best = 0;
    for (i, a) in anchors.iter().enumerate() {
        if a.position.distance(&c) < anchors[best].position.distance(&c) {
            best = i;
        }
    }
    best
}

/// Uplink SRS arrival-time differences. The UE's transmit time and clock
/// offset are common to every arrival and drop out of the differences, so
/// they are not added in the first place; anchor clock offsets remain.
pub fn measure_ul_tdoa(
    ue: &Position,
    anchors: &[Anchor],
    sigma_s: f64,
    rng: &mut RngStream,
) -> Result<TdoaSet, PositioningError> {
    check_anchors(anchors, 2)?;
    let local: Vec<f64> = anchors
        .iter()
        .map(|a| ue.distance(&a.position) / SPEED_OF_LIGHT + a.clock_offset_s + rng.normal(sigma_s))
        .collect();
    let r = reference_index(anchors);
    let tdoas_s = anchors
        .iter()
        .zip(&local)
        .enumerate()
        .map(|(i, (a, t))| (a.anchor_id, if i == r { 0.0 } else { t - local[r] }))
        .collect();
    Ok(TdoaSet {
        reference_anchor: anchors[r].anchor_id,
        tdoas_s,
        noise_sigma_s: sigma_s,
    })
}

/// Mean of `occasions` independent UL-TDOA snapshots of a static UE; a
/// periodic SRS gives one snapshot per period.
pub fn measure_ul_tdoa_averaged(
    ue: &Position,
    anchors: &[Anchor],
    sigma_s: f64,
    occasions: u32,
    rng: &mut RngStream,
) -> Result<TdoaSet, PositioningError> {
    let k = occasions.max(1);
    let mut acc = measure_ul_tdoa(ue, anchors, sigma_s, rng)?;
    for _ in 1..k {
        let next = measure_ul_tdoa(ue, anchors, sigma_s, rng)?;
        for (id, tau) in acc.tdoas_s.iter_mut() {
            *tau += next.tdoas_s[id];
        }
    }
    for tau in acc.tdoas_s.values_mut() {
        *tau /= f64::from(k);
    }
    acc.noise_sigma_s = sigma_s / f64::from(k).sqrt();
    Ok(acc)
}

/// Round-trip times; both ends' clock offsets cancel within each RTT.
pub fn measure_rtt(
    ue: &Position,
    anchors: &[Anchor],
    sigma_s: f64,
    rng: &mut RngStream,
) -> Result<RttSet, PositioningError> {
    check_anchors(anchors, 1)?;
    let rtts_s = anchors
        .iter()
        .map(|a| {
            (
                a.anchor_id,
                2.0 * ue.distance(&a.position) / SPEED_OF_LIGHT + rng.normal(sigma_s),
            )
        })
        .collect();
    Ok(RttSet {
        rtts_s,
        noise_sigma_s: sigma_s,
    })
}

fn unit(x: &Vector3<f64>, a: &Vector3<f64>) -> Vector3<f64> {
    let d = x - a;
    let n = d.norm();
    if n > 0.0 {
        d / n
    } else {
        Vector3::zeros()
    }
}

/// Range-domain measurement model shared by solvers, DOP and oracles.
#[derive(Debug, Clone)]
pub struct RangeModel {
    method: Method,
    anchors: Vec<Vector3<f64>>,
    reference: usize,
    /// Observed range quantities (meters), one per row.
    observed: Vec<f64>,
    /// Anchor index of each row.
    rows: Vec<usize>,
}

impl RangeModel {
    pub fn tdoa(set: &TdoaSet, anchors: &[Anchor]) -> Result<Self, PositioningError> {
        check_anchors(anchors, 4)?;
        let reference = anchors
            .iter()
            .position(|a| a.anchor_id == set.reference_anchor)
            .ok_or(PositioningError::MissingMeasurement(set.reference_anchor))?;
        let mut rows = Vec::new();
        let mut observed = Vec::new();
        for (i, a) in anchors.iter().enumerate() {
            if i == reference {
                continue;
            }
            let tau = set
                .tdoas_s
                .get(&a.anchor_id)
                .ok_or(PositioningError::MissingMeasurement(a.anchor_id))?;
            rows.push(i);
            observed.push(SPEED_OF_LIGHT * tau);
        }
        Ok(RangeModel {
            method: Method::Tdoa,
            anchors: anchors.iter().map(|a| a.position.to_vector()).collect(),
            reference,
            observed,
            rows,
        })
    }

    pub fn rtt(set: &RttSet, anchors: &[Anchor]) -> Result<Self, PositioningError> {
        check_anchors(anchors, 4)?;
        let mut observed = Vec::new();
        for a in anchors {
            let rtt = *set
                .rtts_s
                .get(&a.anchor_id)
                .ok_or(PositioningError::MissingMeasurement(a.anchor_id))?;
            if rtt <= 0.0 {
                return Err(PositioningError::NonPositiveRtt(a.anchor_id));
            }
            observed.push(SPEED_OF_LIGHT * rtt / 2.0);
        }
        Ok(RangeModel {
            method: Method::Rtt,
            anchors: anchors.iter().map(|a| a.position.to_vector()).collect(),
            reference: 0,
            observed,
            rows: (0..anchors.len()).collect(),
        })
    }

    /// Geometry-only model for DOP, with zero observations.
    fn geometry(anchors: &[Anchor], method: Method) -> Result<Self, PositioningError> {
        check_anchors(anchors, 4)?;
        let reference = reference_index(anchors);
        let rows: Vec<usize> = match method {
            Method::Tdoa => (0..anchors.len()).filter(|&i| i != reference).collect(),
            Method::Rtt => (0..anchors.len()).collect(),
        };
        Ok(RangeModel {
            method,
            anchors: anchors.iter().map(|a| a.position.to_vector()).collect(),
            reference,
            observed: vec![0.0; rows.len()],
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn predicted(&self, x: &Vector3<f64>, row: usize) -> f64 {
        let i = self.rows[row];
        let d = (x - self.anchors[i]).norm();
        match self.method {
            Method::Rtt => d,
            Method::Tdoa => d - (x - self.anchors[self.reference]).norm(),
        }
    }

    pub fn residuals(&self, x: &Vector3<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            (0..self.len()).map(|r| self.observed[r] - self.predicted(x, r)),
        )
    }

    /// Sum of squared residuals (m²).
    pub fn cost(&self, x: &Vector3<f64>) -> f64 {
        (0..self.len())
            .map(|r| {
                let e = self.observed[r] - self.predicted(x, r);
                e * e
            })
            .sum()
    }

    pub fn jacobian(&self, x: &Vector3<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.len(), 3);
        let uref = unit(x, &self.anchors[self.reference]);
        for r in 0..self.len() {
            let mut u = unit(x, &self.anchors[self.rows[r]]);
            if self.method == Method::Tdoa {
                u -= uref;
            }
            j.set_row(r, &u.transpose());
        }
        j
    }

    /// Closed-form start from differencing squared ranges. TDOA carries the
    /// reference range as a fourth unknown and needs five anchors; RTT needs
    /// four. `None` when there are too few rows or the system is singular.
    pub fn linear_start(&self) -> Option<Position> {
        let (pivot, extra) = match self.method {
            Method::Tdoa => (self.reference, 1),
            Method::Rtt => (self.rows[0], 0),
        };
        let a0 = self.anchors[pivot];
        let mut a_rows = Vec::new();
        let mut b = Vec::new();
        for r in 0..self.len() {
            let i = self.rows[r];
            if i == pivot {
                continue;
            }
            let ai = self.anchors[i];
            let g = 2.0 * (ai - a0);
            match self.method {
                Method::Tdoa => {
                    let ri = self.observed[r];
                    a_rows.push([g.x, g.y, g.z, 2.0 * ri]);
                    b.push(ai.norm_squared() - a0.norm_squared() - ri * ri);
                }
                Method::Rtt => {
                    let d0 = self.observed[0];
                    let di = self.observed[r];
                    a_rows.push([g.x, g.y, g.z, 0.0]);
                    b.push(ai.norm_squared() - a0.norm_squared() - di * di + d0 * d0);
                }
            }
        }
        let cols = 3 + extra;
        if a_rows.len() < cols {
            return None;
        }
        let a = DMatrix::from_fn(a_rows.len(), cols, |r, c| a_rows[r][c]);
        let svd = a.svd(true, true);
        let max = svd.singular_values.max();
        if !(max > 0.0) || svd.singular_values.min() / max < 1e-9 {
            return None;
        }
        let x = svd.solve(&DVector::from_vec(b), 0.0).ok()?;
        let p = Position::new(x[0], x[1], x[2]);
        p.is_finite().then_some(p)
    }

    /// Covariance of the range-domain noise (m²), up to the scale σ².
    fn noise_shape(&self) -> DMatrix<f64> {
        let n = self.len();
        match self.method {
            Method::Rtt => DMatrix::identity(n, n),
            // Every difference shares the reference's noise.
            Method::Tdoa => DMatrix::identity(n, n) + DMatrix::from_element(n, n, 1.0),
        }
    }
}

/// Inverse of a 3×3 normal matrix, or the condition number if it is
/// singular for practical purposes.
fn checked_inverse(
    n: &Matrix3<f64>,
    max_condition: f64,
) -> Result<(Matrix3<f64>, f64), PositioningError> {
    let eig = SymmetricEigen::new(*n);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !cond.is_finite() || cond > max_condition {
        return Err(PositioningError::DegenerateGeometry {
            condition_number: cond,
        });
    }
    let inv = n
        .try_inverse()
        .ok_or(PositioningError::DegenerateGeometry {
            condition_number: cond,
        })?;
    Ok((inv, cond))
}

fn normal(j: &DMatrix<f64>) -> Matrix3<f64> {
    let n = j.transpose() * j;
    Matrix3::from_fn(|r, c| n[(r, c)])
}

pub fn solve(
    model: &RangeModel,
    init: &Position,
    opts: &SolverOptions,
    range_sigma_m: f64,
) -> Result<PositionEstimate, PositioningError> {
    let mut x = init.to_vector();
    let mut cost = model.cost(&x);
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        iterations += 1;
        let j = model.jacobian(&x);
        let (inv, _) = checked_inverse(&normal(&j), opts.max_condition)?;
        let g = j.transpose() * model.residuals(&x);
        let step = inv * Vector3::new(g[0], g[1], g[2]);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = x + step * scale;
            let c = model.cost(&cand);
            if c <= cost {
                accepted = Some((cand, c));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, c)) = accepted else {
            break;
        };
        let moved = (next - x).norm();
        x = next;
        cost = c;
        if moved < opts.step_tolerance_m {
            break;
        }
    }
    let j = model.jacobian(&x);
    let (inv, cond) = checked_inverse(&normal(&j), opts.max_condition)?;
    let jt = j.transpose();
    let middle = &jt * model.noise_shape() * &j;
    let m3 = Matrix3::from_fn(|r, c| middle[(r, c)]);
    let mut covariance = inv * m3 * inv * (range_sigma_m * range_sigma_m);
    covariance = (covariance + covariance.transpose()) * 0.5;
    Ok(PositionEstimate {
        position: Position::from_vector(&x),
        iterations,
        residual_m: (cost / model.len() as f64).sqrt(),
        covariance,
        condition_number: cond,
    })
}

pub fn solve_tdoa(
    tdoas: &TdoaSet,
    anchors: &[Anchor],
    init: Option<Position>,
    opts: &SolverOptions,
) -> Result<PositionEstimate, PositioningError> {
    let model = RangeModel::tdoa(tdoas, anchors)?;
    solve_from(
        &model,
        anchors,
        init,
        opts,
        SPEED_OF_LIGHT * tdoas.noise_sigma_s,
    )
}

pub fn solve_multi_rtt(
    rtts: &RttSet,
    anchors: &[Anchor],
    init: Option<Position>,
    opts: &SolverOptions,
) -> Result<PositionEstimate, PositioningError> {
    let model = RangeModel::rtt(rtts, anchors)?;
    solve_from(
        &model,
        anchors,
        init,
        opts,
        SPEED_OF_LIGHT * rtts.noise_sigma_s / 2.0,
    )
}

/// Starting points tried when the caller gives none, besides the
/// closed-form one: the anchor centroid, then the centroid moved to the edges
/// of the anchors' altitude band and beyond them.
/// Receivers far below (or above) most anchors otherwise tend to converge
/// to the mirrored local minimum on the other side.
pub fn default_starts(anchors: &[Anchor]) -> [Position; 5] {
    let c = centroid(anchors);
    let lo = anchors
        .iter()
        .map(|a| a.position.z)
        .fold(f64::INFINITY, f64::min);
    let hi = anchors
        .iter()
        .map(|a| a.position.z)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = 0.5 * (hi - lo);
    [
        c,
        Position::new(c.x, c.y, lo),
        Position::new(c.x, c.y, lo - margin),
        Position::new(c.x, c.y, hi),
        Position::new(c.x, c.y, hi + margin),
    ]
}

fn solve_from(
    model: &RangeModel,
    anchors: &[Anchor],
    init: Option<Position>,
    opts: &SolverOptions,
    range_sigma_m: f64,
) -> Result<PositionEstimate, PositioningError> {
    if let Some(init) = init {
        return solve(model, &init, opts, range_sigma_m);
    }
    let mut best: Option<Result<PositionEstimate, PositioningError>> = None;
    for start in default_starts(anchors)
        .into_iter()
        .chain(model.linear_start())
    {
        let r = solve(model, &start, opts, range_sigma_m);
        best = match (best, r) {
            (None, r) => Some(r),
            (Some(Err(_)), r) => Some(r),
            (Some(Ok(b)), Ok(e)) if e.residual_m < b.residual_m => Some(Ok(e)),
            (b, _) => b,
        };
    }
    best.expect("at least one start")
}

pub fn gdop(anchors: &[Anchor], at: &Position, method: Method) -> Result<Dop, PositioningError> {
    let model = RangeModel::geometry(anchors, method)?;
    let j = model.jacobian(&at.to_vector());
    let (q, _) = checked_inverse(&normal(&j), SolverOptions::default().max_condition)?;
    Ok(Dop {
        hdop: (q[(0, 0)] + q[(1, 1)]).sqrt(),
        vdop: q[(2, 2)].sqrt(),
        gdop: q.trace().sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Position,
    pub max: Position,
}

impl BoundingBox {
    pub fn contains(&self, p: &Position) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }
}

/// Mean GDOP over `targets`, infinite when any target sees a degenerate
/// geometry.
pub fn mean_gdop(anchors: &[Anchor], targets: &[Position], method: Method) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for t in targets {
        match gdop(anchors, t, method) {
            Ok(d) if d.gdop.is_finite() => sum += d.gdop,
            _ => return f64::INFINITY,
        }
    }
    sum / targets.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacementResult {
    pub anchors: Vec<Anchor>,
    /// Mean GDOP before the first sweep and after each one.
    pub history: Vec<f64>,
}

/// Greedy coordinate descent on mean GDOP: every airborne anchor in turn
/// takes whichever ±`step_m` move along x, y or z (inside `region`) lowers
/// the mean most, until a full sweep finds nothing better.
pub fn improve_placement(
    anchors: &[Anchor],
    region: &BoundingBox,
    targets: &[Position],
    step_m: f64,
    method: Method,
) -> PlacementResult {
    const MAX_SWEEPS: usize = 10_000;
    let mut cur = anchors.to_vec();
    let mut best = mean_gdop(&cur, targets, method);
    let mut history = vec![best];
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for i in 0..cur.len() {
            if !cur[i].is_airborne {
                continue;
            }
            let mut choice = None;
            for axis in 0..3 {
                for sign in [-1.0, 1.0] {
                    let mut v = cur[i].position.to_vector();
                    v[axis] += sign * step_m;
                    let p = Position::from_vector(&v);
                    if !region.contains(&p) {
                        continue;
                    }
                    let mut trial = cur.clone();
                    trial[i].position = p;
                    let g = mean_gdop(&trial, targets, method);
                    if g < best && choice.is_none_or(|(bg, _)| g < bg) {
                        choice = Some((g, p));
                    }
                }
            }
            if let Some((g, p)) = choice {
                cur[i].position = p;
                best = g;
                improved = true;
            }
        }
        history.push(best);
        if !improved {
            break;
        }
    }
    PlacementResult {
        anchors: cur,
        history,
    }
}

/// Empirical percentile (nearest rank) of an unsorted sample.
pub fn percentile_f64(sample: &[f64], pct: f64) -> f64 {
    if sample.is_empty() {
        return 0.0;
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((pct / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}
