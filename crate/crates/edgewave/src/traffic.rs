//! Road network model, car following, green waves and flow metrics.
//!
//! Roads are directed single-carriageway segments with planar geometry.
//! Positions along a road run from 0 at its start to `length_m` at the stop
//! line. Grid networks use alternating one-way rows and columns, so every
//! intersection has exactly two entry roads whose movements conflict.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::icn::RoadAxis;

pub const DEFAULT_MONITORING_AREA_M: f64 = 100.0;
pub const GREEN_WAVE_TICK_S: f64 = 0.001;

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("flow statistics need at least one sample")]
    EmptySamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoadClass {
    Entry,
    Exit,
    Collector,
    Corridor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub id: u32,
    /// Upstream intersection, `None` for roads entering from the boundary.
    pub from: Option<u32>,
    /// Downstream intersection, `None` for roads leaving the map.
    pub to: Option<u32>,
    pub length_m: f64,
    pub speed_limit_mps: f64,
    pub lanes: u8,
    pub monitoring_area_m: f64,
    pub angle_rad: f64,
    pub sign_x: i8,
    pub sign_y: i8,
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub class: RoadClass,
}

impl Road {
    pub fn dir(&self) -> (f64, f64) {
        let dx = self.end.0 - self.start.0;
        let dy = self.end.1 - self.start.1;
        let len = (dx * dx + dy * dy).sqrt();
        (dx / len, dy / len)
    }

    pub fn point_at(&self, pos_m: f64) -> (f64, f64) {
        let d = self.dir();
        (self.start.0 + d.0 * pos_m, self.start.1 + d.1 * pos_m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub id: u32,
    pub pos: (f64, f64),
    pub entries: Vec<u32>,
    pub exits: Vec<u32>,
    pub signalized: bool,
    /// Unordered conflicting entry pairs, stored with the smaller id first.
    pub conflicts: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corridor {
    pub id: u32,
    /// Member roads in travel order, upstream first.
    pub roads: Vec<u32>,
    pub leader_intersection: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoadNetwork {
    pub roads: BTreeMap<u32, Road>,
    pub intersections: BTreeMap<u32, Intersection>,
    pub corridors: Vec<Corridor>,
}

impl RoadNetwork {
    pub fn add_road(
        &mut self,
        from: Option<u32>,
        to: Option<u32>,
        start: (f64, f64),
        end: (f64, f64),
        speed_limit_mps: f64,
        class: RoadClass,
    ) -> u32 {
        let id = self.roads.len() as u32;
        let dx = end.0 - start.0;
        let dy = end.1 - start.1;
        let length = (dx * dx + dy * dy).sqrt();
        self.roads.insert(
            id,
            Road {
                id,
                from,
                to,
                length_m: length,
                speed_limit_mps,
                lanes: 1,
                monitoring_area_m: DEFAULT_MONITORING_AREA_M.min(length),
                angle_rad: dy.abs().atan2(dx.abs()),
                sign_x: if dx < 0.0 { -1 } else { 1 },
                sign_y: if dy < 0.0 { -1 } else { 1 },
                start,
                end,
                class,
            },
        );
        id
    }

    pub fn axis(&self, road: u32) -> Option<RoadAxis> {
        let r = self.roads.get(&road)?;
        Some(RoadAxis::new(r.start, r.dir()))
    }

    /// Registers a corridor over existing roads, reclassifying them and
    /// raising their speed limit to the corridor speed.
    pub fn mark_corridor(
        &mut self,
        id: u32,
        roads: &[u32],
        leader_intersection: u32,
        speed_mps: f64,
    ) {
        for rid in roads {
            let r = self.roads.get_mut(rid).expect("corridor road exists");
            r.class = RoadClass::Corridor;
            r.speed_limit_mps = speed_mps;
        }
        self.corridors.push(Corridor {
            id,
            roads: roads.to_vec(),
            leader_intersection,
        });
    }

    fn index_connections(&mut self) {
        let links: Vec<(u32, Option<u32>, Option<u32>)> = self
            .roads
            .values()
            .map(|r| (r.id, r.from, r.to))
            .collect();
        for (id, from, to) in links {
            if let Some(f) = from {
                self.intersections.get_mut(&f).unwrap().exits.push(id);
            }
            if let Some(t) = to {
                self.intersections.get_mut(&t).unwrap().entries.push(id);
            }
        }
        for i in self.intersections.values_mut() {
            for a in 0..i.entries.len() {
                for b in a + 1..i.entries.len() {
                    let (x, y) = (i.entries[a], i.entries[b]);
                    i.conflicts.push((x.min(y), x.max(y)));
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpeeds {
    pub entry_mps: f64,
    pub corridor_mps: f64,
    pub collector_mps: f64,
}

impl Default for GridSpeeds {
    fn default() -> Self {
        GridSpeeds {
            entry_mps: 80.0 / 3.6,
            corridor_mps: 60.0 / 3.6,
            collector_mps: 40.0 / 3.6,
        }
    }
}

/// Builds a rows x cols grid of signalized intersections with alternating
/// one-way directions: even rows run east, odd rows west, even columns run
/// south, odd columns north. Boundary stubs provide one entry and one exit
/// per row and per column.
pub fn build_manhattan_grid(
    rows: u32,
    cols: u32,
    spacing_m: f64,
    entry_len_m: f64,
    speeds: &GridSpeeds,
) -> RoadNetwork {
    assert!(rows >= 2 && cols >= 2, "grid needs at least 2x2 intersections");
    let mut net = RoadNetwork::default();
    let id = |r: u32, c: u32| r * cols + c;
    let point = |r: u32, c: u32| (c as f64 * spacing_m, r as f64 * spacing_m);

    for r in 0..rows {
        for c in 0..cols {
            net.intersections.insert(
                id(r, c),
                Intersection {
                    id: id(r, c),
                    pos: point(r, c),
                    entries: Vec::new(),
                    exits: Vec::new(),
                    signalized: true,
                    conflicts: Vec::new(),
                },
            );
        }
    }

    for r in 0..rows {
        for c in 0..cols - 1 {
            let (f, t) = if r % 2 == 0 {
                ((r, c), (r, c + 1))
            } else {
                ((r, c + 1), (r, c))
            };
            net.add_road(
                Some(id(f.0, f.1)),
                Some(id(t.0, t.1)),
                point(f.0, f.1),
                point(t.0, t.1),
                speeds.collector_mps,
                RoadClass::Collector,
            );
        }
    }
    for c in 0..cols {
        for r in 0..rows - 1 {
            let (f, t) = if c % 2 == 0 {
                ((r, c), (r + 1, c))
            } else {
                ((r + 1, c), (r, c))
            };
            net.add_road(
                Some(id(f.0, f.1)),
                Some(id(t.0, t.1)),
                point(f.0, f.1),
                point(t.0, t.1),
                speeds.collector_mps,
                RoadClass::Collector,
            );
        }
    }

    let x_max = (cols - 1) as f64 * spacing_m;
    let y_max = (rows - 1) as f64 * spacing_m;
    for r in 0..rows {
        let y = r as f64 * spacing_m;
        if r % 2 == 0 {
            net.add_road(
                None,
                Some(id(r, 0)),
                (-entry_len_m, y),
                (0.0, y),
                speeds.entry_mps,
                RoadClass::Entry,
            );
            net.add_road(
                Some(id(r, cols - 1)),
                None,
                (x_max, y),
                (x_max + entry_len_m, y),
                speeds.collector_mps,
                RoadClass::Exit,
            );
        } else {
            net.add_road(
                None,
                Some(id(r, cols - 1)),
                (x_max + entry_len_m, y),
                (x_max, y),
                speeds.entry_mps,
                RoadClass::Entry,
            );
            net.add_road(
                Some(id(r, 0)),
                None,
                (0.0, y),
                (-entry_len_m, y),
                speeds.collector_mps,
                RoadClass::Exit,
            );
        }
    }
    for c in 0..cols {
        let x = c as f64 * spacing_m;
        if c % 2 == 0 {
            net.add_road(
                None,
                Some(id(0, c)),
                (x, -entry_len_m),
                (x, 0.0),
                speeds.entry_mps,
                RoadClass::Entry,
            );
            net.add_road(
                Some(id(rows - 1, c)),
                None,
                (x, y_max),
                (x, y_max + entry_len_m),
                speeds.collector_mps,
                RoadClass::Exit,
            );
        } else {
            net.add_road(
                None,
                Some(id(rows - 1, c)),
                (x, y_max + entry_len_m),
                (x, y_max),
                speeds.entry_mps,
                RoadClass::Entry,
            );
            net.add_road(
                Some(id(0, c)),
                None,
                (x, 0.0),
                (x, -entry_len_m),
                speeds.collector_mps,
                RoadClass::Exit,
            );
        }
    }

    net.index_connections();
    net
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed in m/s.
    pub v0: f64,
    /// Safe time headway in seconds.
    pub t_headway: f64,
    /// Jam distance in meters.
    pub s0: f64,
    /// Maximum acceleration in m/s^2.
    pub a: f64,
    /// Comfortable braking rate magnitude in m/s^2.
    pub b: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            v0: 60.0 / 3.6,
            t_headway: 1.2,
            s0: 2.5,
            a: 2.9,
            b: 7.5,
        }
    }
}

/// Car-following acceleration. `gap` is the bumper-to-bumper distance to the
/// leader and `dv` the approach rate (own speed minus leader speed). A
/// non-positive gap commands full braking.
pub fn idm_acceleration(v: f64, gap: f64, dv: f64, p: &IdmParams) -> f64 {
    if gap <= 0.0 {
        return -p.b;
    }
    let s_star = p.s0 + v * p.t_headway + v * dv / (2.0 * (p.a * p.b).sqrt());
    p.a * (1.0 - (v / p.v0).powi(4) - (s_star / gap).powi(2))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u64,
    pub road: u32,
    pub lane: u8,
    pub pos_m: f64,
    pub speed_mps: f64,
    pub length_m: f64,
    pub route: Vec<u32>,
    pub idm: IdmParams,
}

impl VehicleState {
    pub fn new(id: u64, road: u32, pos_m: f64, speed_mps: f64) -> VehicleState {
        VehicleState {
            id,
            road,
            lane: 0,
            pos_m,
            speed_mps,
            length_m: 5.0,
            route: Vec::new(),
            idm: IdmParams::default(),
        }
    }

    pub fn rear_m(&self) -> f64 {
        self.pos_m - self.length_m
    }
}

/// Advances one lane by `dt_s`. The slice must be ordered front first. A
/// barrier is a standing obstacle at the stop line (a red light). The advice
/// hook may substitute an acceleration for any vehicle; `None` falls back to
/// car following. Positions are clamped so a follower never overlaps the
/// vehicle ahead regardless of the commanded acceleration.
pub fn step_lane(
    lane: &mut [VehicleState],
    barrier_m: Option<f64>,
    limit_mps: f64,
    dt_s: f64,
    mut advice: impl FnMut(usize, &VehicleState, f64, f64) -> Option<f64>,
) {
    let mut lead: Option<(f64, f64)> = barrier_m.map(|b| (b, 0.0));
    for i in 0..lane.len() {
        let (gap, dv) = match lead {
            Some((rear, lv)) => (rear - lane[i].pos_m, lane[i].speed_mps - lv),
            None => (f64::INFINITY, 0.0),
        };
        let a = advice(i, &lane[i], gap, dv)
            .unwrap_or_else(|| idm_acceleration(lane[i].speed_mps, gap, dv, &lane[i].idm));
        let v = &mut lane[i];
        let mut speed = (v.speed_mps + a * dt_s).clamp(0.0, limit_mps);
        let mut pos = v.pos_m + speed * dt_s;
        if let Some((rear, _)) = lead {
            if pos > rear {
                pos = rear;
                speed = ((pos - v.pos_m) / dt_s).max(0.0);
            }
        }
        v.pos_m = pos;
        v.speed_mps = speed;
        lead = Some((v.rear_m(), speed));
    }
}

/// Per-road green wave tracked by a signal. The head sits at the offset of
/// the wave front along the road; the tail trails it by the distance the
/// wave still has to live. On a green start the head is repositioned to the
/// stop line, on a red start to the end of the monitoring area. The wave
/// speed is the road length divided by the current interval size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GreenWaveState {
    pub head_offset_m: f64,
    pub wave_speed_mps: f64,
    pub duration_s: f64,
    pub time_to_next_green_s: f64,
    pub phase: u32,
}

impl GreenWaveState {
    pub fn tick(&mut self, road_len_m: f64) {
        self.advance_by(road_len_m, GREEN_WAVE_TICK_S);
    }

    pub fn advance_by(&mut self, road_len_m: f64, elapsed_s: f64) {
        self.head_offset_m = (self.head_offset_m + self.wave_speed_mps * elapsed_s).min(road_len_m);
        self.duration_s = (self.duration_s - elapsed_s).max(0.0);
        self.time_to_next_green_s = (self.time_to_next_green_s - elapsed_s).max(0.0);
    }

    pub fn tail_offset_m(&self) -> f64 {
        (self.head_offset_m - self.wave_speed_mps * self.duration_s).max(0.0)
    }

    pub fn on_green_start(&mut self, road_len_m: f64, green_s: f64, ttng_s: f64, phase: u32) {
        assert!(green_s > 0.0);
        self.head_offset_m = road_len_m;
        self.wave_speed_mps = road_len_m / green_s;
        self.duration_s = green_s;
        self.time_to_next_green_s = ttng_s;
        self.phase = phase;
    }

    pub fn on_red_start(
        &mut self,
        road_len_m: f64,
        monitoring_m: f64,
        interval_s: f64,
        duration_s: f64,
        ttng_s: f64,
        phase: u32,
    ) {
        assert!(interval_s > 0.0);
        self.head_offset_m = road_len_m - monitoring_m;
        self.wave_speed_mps = road_len_m / interval_s;
        self.duration_s = duration_s;
        self.time_to_next_green_s = ttng_s;
        self.phase = phase;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WaveAdvice {
    /// Ride the wave at its pace.
    Hold,
    /// Chase the wave tail with the given acceleration.
    Accelerate(f64),
    /// Bleed speed so the advancing head absorbs the vehicle.
    Decelerate(f64),
    /// No wave is catchable; pace the approach to arrive on the next green.
    WaitForGreen(f64),
    /// No usable wave data, drive on car following alone.
    FreeDrive,
}

fn min_nonneg_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a.abs() < 1e-12 {
        if b.abs() < 1e-12 {
            return if c.abs() < 1e-12 { Some(0.0) } else { None };
        }
        let t = -c / b;
        return (t >= -1e-12).then(|| t.max(0.0));
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut best: Option<f64> = None;
    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
        if t >= -1e-12 && best.is_none_or(|cur| t < cur) {
            best = Some(t);
        }
    }
    best.map(|t| t.max(0.0))
}

/// Time for a vehicle at `s0v` accelerating at `a_v` to meet a wave tail at
/// `s0w` moving at `v_w`, honoring the `v_max` speed cap. `None` when the
/// meet never happens.
pub fn wave_meet_time(
    a_v: f64,
    v0: f64,
    v_w: f64,
    s0v: f64,
    s0w: f64,
    v_max: f64,
) -> Option<f64> {
    if v0 >= v_max {
        let closing = v_max - v_w;
        if closing <= 0.0 {
            return (s0v >= s0w).then_some(0.0);
        }
        let t = (s0w - s0v) / closing;
        return Some(t.max(0.0));
    }
    let t_raw = min_nonneg_root(a_v, v0 - v_w, s0v - s0w);
    if a_v > 0.0 {
        let t_cap = (v_max - v0) / a_v;
        match t_raw {
            Some(t) if t <= t_cap => Some(t),
            _ => {
                if v_max <= v_w {
                    return None;
                }
                let sv = a_v * t_cap * t_cap + v0 * t_cap + s0v;
                let sw = s0w + v_w * t_cap;
                if sv >= sw {
                    return Some(t_cap);
                }
                Some(t_cap + (sw - sv) / (v_max - v_w))
            }
        }
    } else {
        t_raw
    }
}

/// Minimum time to cover `dist_m` starting at `v0`, pushing at `a_eff` until
/// the `v_max` cap and cruising from there.
pub fn min_travel_time(v0: f64, dist_m: f64, a_eff: f64, v_max: f64) -> f64 {
    assert!(a_eff > 0.0 && v_max > 0.0);
    if dist_m <= 0.0 {
        return 0.0;
    }
    if v0 >= v_max {
        return dist_m / v_max;
    }
    let t = min_nonneg_root(a_eff, v0, -dist_m).expect("positive distance has a root");
    if v0 + a_eff * t <= v_max {
        return t;
    }
    let t_cap = (v_max - v0) / a_eff;
    let s_cap = a_eff * t_cap * t_cap + v0 * t_cap;
    t_cap + (dist_m - s_cap) / v_max
}

fn wait_for_green(pos_m: f64, v: f64, road_len_m: f64, ttng_s: f64, limit: f64, p: &IdmParams) -> WaveAdvice {
    let dist = road_len_m - pos_m;
    if ttng_s <= 0.0 || dist <= 0.0 {
        return WaveAdvice::FreeDrive;
    }
    let t_min = min_travel_time(v, dist, p.a + p.b, limit);
    if t_min >= ttng_s {
        // even flat out the vehicle arrives after the green begins
        return WaveAdvice::FreeDrive;
    }
    let v_m = dist / ttng_s;
    WaveAdvice::WaitForGreen((2.0 * (v_m - v) / ttng_s).clamp(-p.b, p.a))
}

/// Speed advice for a vehicle at `pos_m` relative to the green wave on its
/// road. `idm_accel` is the acceleration car following currently allows, and
/// is the rate used to chase a reachable wave so the pursuit stays
/// collision-free.
pub fn green_wave_advice(
    pos_m: f64,
    speed_mps: f64,
    idm_accel: f64,
    wave: Option<&GreenWaveState>,
    road_len_m: f64,
    limit_mps: f64,
    p: &IdmParams,
) -> WaveAdvice {
    let Some(w) = wave else {
        return WaveAdvice::FreeDrive;
    };
    if w.duration_s <= 0.0 || w.wave_speed_mps <= 0.0 {
        return wait_for_green(pos_m, speed_mps, road_len_m, w.time_to_next_green_s, limit_mps, p);
    }
    let head = w.head_offset_m;
    let tail = w.tail_offset_m();
    if pos_m > head {
        if speed_mps <= w.wave_speed_mps {
            return WaveAdvice::Hold;
        }
        let gap = pos_m - head;
        let a = (w.wave_speed_mps * w.wave_speed_mps - speed_mps * speed_mps) / (2.0 * gap);
        return WaveAdvice::Decelerate(a.clamp(-p.b, 0.0));
    }
    if pos_m >= tail {
        return WaveAdvice::Hold;
    }
    let wave_life = (road_len_m - tail) / w.wave_speed_mps;
    match wave_meet_time(idm_accel, speed_mps, w.wave_speed_mps, pos_m, tail, limit_mps) {
        Some(t) if t < wave_life => WaveAdvice::Accelerate(idm_accel),
        _ => wait_for_green(pos_m, speed_mps, road_len_m, w.time_to_next_green_s, limit_mps, p),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub flow_veh_h: f64,
    pub density_veh_km: f64,
    pub time_mean_speed_mps: f64,
    pub space_mean_speed_mps: f64,
    pub mean_headway_s: f64,
    pub mean_spacing_m: f64,
}

/// Aggregates point measurements over a section of `section_len_m` observed
/// for `period_s`: one travel time per vehicle that crossed it.
pub fn flow_stats(
    section_len_m: f64,
    period_s: f64,
    travel_times_s: &[f64],
) -> Result<FlowMetrics, TrafficError> {
    if travel_times_s.is_empty() {
        return Err(TrafficError::EmptySamples);
    }
    assert!(section_len_m > 0.0 && period_s > 0.0);
    assert!(travel_times_s.iter().all(|t| *t > 0.0));
    let n = travel_times_s.len() as f64;
    let flow = n * 3600.0 / period_s;
    let time_mean = travel_times_s.iter().map(|t| section_len_m / t).sum::<f64>() / n;
    let space_mean = n * section_len_m / travel_times_s.iter().sum::<f64>();
    let density = flow / (space_mean * 3.6);
    Ok(FlowMetrics {
        flow_veh_h: flow,
        density_veh_km: density,
        time_mean_speed_mps: time_mean,
        space_mean_speed_mps: space_mean,
        mean_headway_s: period_s / n,
        mean_spacing_m: 1000.0 / density,
    })
}
