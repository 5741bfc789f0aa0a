//! Green-light schedules from intersection control data, road-space
//! allocation bookkeeping, and route planning over the scheduled network.
//!
//! A schedule is produced by dry-running the intersection's edge-reversal
//! dynamics: every operating vertex reverses once per iteration, a vertex
//! that stays sink extends its green by one minimum interval, and a phase
//! closes when every operating vertex is blocked. Route costs then come
//! from a deterministic Dijkstra over the per-road green windows, with an
//! occupancy mode that respects previously booked road space and charges a
//! fixed penalty per vehicle expected ahead.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smer::{Demands, Multigraph, Reversibilities, SmerError, VertexId};
use crate::traffic::RoadNetwork;

const CAPACITY_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("unknown road {0}")]
    UnknownRoad(u32),
    #[error("no admissible route to the destination")]
    Unroutable,
    #[error("road {road} phase {phase} is at capacity")]
    Capacity { road: u32, phase: u32 },
    #[error("control data yields no operating vertex")]
    DeadlockedControl,
    #[error("control data cannot advance time")]
    InconsistentControl,
    #[error(transparent)]
    Smer(#[from] SmerError),
}

/// Signal head indication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Indication {
    Green,
    Yellow,
    Red,
}

/// Full replicable control state of one intersection. Any holder of this
/// snapshot regenerates the same schedule for the same clock instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionControlData {
    pub intersection: u32,
    pub multigraph: Multigraph,
    pub reversibilities: Reversibilities,
    pub demands: Option<Demands>,
    pub coordination_active: bool,
    /// Current indication per controlled road.
    pub indications: BTreeMap<u32, Indication>,
    pub min_green_s: BTreeMap<VertexId, f64>,
    pub max_green_s: BTreeMap<VertexId, f64>,
    pub yellow_s: BTreeMap<VertexId, f64>,
    pub all_red_s: f64,
    pub vertex_roads: BTreeMap<VertexId, u32>,
    pub sample_period_s: f64,
    pub samples_per_window: u32,
    pub responsible_agent: Option<u64>,
}

impl IntersectionControlData {
    pub fn window_s(&self, multiplier: u32) -> f64 {
        self.sample_period_s * self.samples_per_window as f64 * multiplier as f64
    }

    pub fn road_of(&self, v: VertexId) -> Option<u32> {
        self.vertex_roads.get(&v).copied()
    }
}

/// One scheduling phase: the vertices that operated together, their interval
/// sizes, and the absolute green window per road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePhase {
    pub start: f64,
    pub interval_sizes: BTreeMap<VertexId, f64>,
    pub starts: BTreeMap<u32, f64>,
    pub ends: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenSchedule {
    pub window_s: f64,
    pub generated_at: f64,
    pub phases: Vec<SchedulePhase>,
}

impl GreenSchedule {
    /// All green windows of one road as (phase, start, end), in phase order.
    pub fn windows_for(&self, road: u32) -> Vec<(u32, f64, f64)> {
        self.phases
            .iter()
            .enumerate()
            .filter_map(|(i, p)| {
                let s = *p.starts.get(&road)?;
                let e = *p.ends.get(&road)?;
                Some((i as u32, s, e))
            })
            .collect()
    }

    /// First window of `road` still open at instant `t`.
    pub fn next_window(&self, road: u32, t: f64) -> Option<(u32, f64, f64)> {
        self.phases.iter().enumerate().find_map(|(i, p)| {
            let s = *p.starts.get(&road)?;
            let e = *p.ends.get(&road)?;
            (t < e).then_some((i as u32, s, e))
        })
    }
}

/// Dry-runs the intersection's reversal dynamics over the configured window
/// and records every green interval. With coordination active each operation
/// reverses all edges instead of the vertex's reversibility, reproducing the
/// single-slot alternation a coordinated corridor needs.
pub fn generate_schedule(
    data: &IntersectionControlData,
    now: f64,
    multiplier: u32,
) -> Result<GreenSchedule, RouteError> {
    let window = data.window_s(multiplier);
    let vertices: Vec<VertexId> = data.multigraph.vertices().collect();
    let mut mg = data.multigraph.clone();
    let mut phases: Vec<SchedulePhase> = Vec::new();
    let mut operating: Vec<VertexId> = Vec::new();
    let mut acc_green: BTreeMap<VertexId, f64> = BTreeMap::new();
    let mut phase_start = now;
    let mut acc = 0.0;
    while acc < window {
        if operating.is_empty() {
            operating = vertices
                .iter()
                .copied()
                .filter(|v| mg.is_sink(*v, &data.reversibilities))
                .collect();
            if operating.is_empty() {
                return Err(RouteError::DeadlockedControl);
            }
            acc_green = operating.iter().map(|v| (*v, 0.0)).collect();
            phases.push(SchedulePhase {
                start: phase_start,
                interval_sizes: BTreeMap::new(),
                starts: BTreeMap::new(),
                ends: BTreeMap::new(),
            });
        }
        let phase = phases.last_mut().unwrap();
        let mut still = Vec::new();
        for v in operating.drain(..) {
            if data.coordination_active {
                mg.reverse_all_edges(v)?;
            } else {
                mg.reverse_edges(v, data.reversibilities.get(v))?;
            }
            let min_green = data.min_green_s[&v];
            // extending adds one more min_green on top of the one the close
            // will charge, so the cap is checked two slots out
            let extendable = acc_green[&v] + 2.0 * min_green
                <= data.max_green_s.get(&v).copied().unwrap_or(f64::INFINITY) + 1e-9;
            if mg.is_sink(v, &data.reversibilities) && extendable {
                *acc_green.get_mut(&v).unwrap() += min_green;
                still.push(v);
            } else {
                let size = acc_green[&v] + min_green + data.yellow_s[&v];
                let road = data.vertex_roads[&v];
                phase.interval_sizes.insert(v, size);
                phase.starts.insert(road, phase_start);
                phase.ends.insert(road, phase_start + size);
            }
        }
        operating = still;
        if operating.is_empty() {
            let longest = phase.interval_sizes.values().fold(0.0f64, |a, b| a.max(*b));
            let advance = longest + data.all_red_s;
            if advance <= 0.0 {
                return Err(RouteError::InconsistentControl);
            }
            phase_start += advance;
            acc += advance;
        }
    }
    Ok(GreenSchedule {
        window_s: window,
        generated_at: now,
        phases,
    })
}

/// One booked slice of road space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub vehicle: u64,
    pub instant_s: f64,
    pub length_m: f64,
    pub expires_s: f64,
}

impl Allocation {
    pub fn new(vehicle: u64, instant_s: f64, length_m: f64, expires_s: f64) -> Self {
        Allocation {
            vehicle,
            instant_s,
            length_m,
            expires_s,
        }
    }
}

/// Booked road space per (road, phase). Entries stay sorted by predicted
/// arrival instant, so serializations never depend on insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceAllocationBook {
    gap_m: f64,
    roads: BTreeMap<u32, BTreeMap<u32, Vec<Allocation>>>,
}

impl SpaceAllocationBook {
    pub fn new(gap_m: f64) -> Self {
        SpaceAllocationBook {
            gap_m,
            roads: BTreeMap::new(),
        }
    }

    pub fn gap_m(&self) -> f64 {
        self.gap_m
    }

    pub fn insert(&mut self, road: u32, phase: u32, alloc: Allocation) {
        let list = self.roads.entry(road).or_default().entry(phase).or_default();
        let at = list.partition_point(|a| (a.instant_s, a.vehicle) < (alloc.instant_s, alloc.vehicle));
        list.insert(at, alloc);
    }

    /// Total booked length for one (road, phase), one inter-vehicle gap per
    /// vehicle included.
    pub fn queue_length(&self, road: u32, phase: u32) -> f64 {
        self.phase_list(road, phase)
            .map(|l| l.iter().map(|a| a.length_m + self.gap_m).sum())
            .unwrap_or(0.0)
    }

    fn queue_length_excluding(&self, road: u32, phase: u32, vehicle: u64) -> f64 {
        self.phase_list(road, phase)
            .map(|l| {
                l.iter()
                    .filter(|a| a.vehicle != vehicle)
                    .map(|a| a.length_m + self.gap_m)
                    .sum()
            })
            .unwrap_or(0.0)
    }

    /// Vehicles booked anywhere on the road with an earlier predicted
    /// arrival than `instant`.
    pub fn vehicles_ahead(&self, road: u32, instant: f64) -> usize {
        self.road_allocs(road)
            .filter(|a| a.instant_s < instant)
            .count()
    }

    fn vehicles_ahead_excluding(&self, road: u32, instant: f64, vehicle: u64) -> usize {
        self.road_allocs(road)
            .filter(|a| a.vehicle != vehicle && a.instant_s < instant)
            .count()
    }

    pub fn allocation(&self, road: u32, phase: u32, vehicle: u64) -> Option<&Allocation> {
        self.phase_list(road, phase)?
            .iter()
            .find(|a| a.vehicle == vehicle)
    }

    pub fn remove_vehicle(&mut self, vehicle: u64) {
        for phases in self.roads.values_mut() {
            for list in phases.values_mut() {
                list.retain(|a| a.vehicle != vehicle);
            }
        }
        self.prune();
    }

    pub fn clear_road(&mut self, road: u32) {
        self.roads.remove(&road);
    }

    /// Drops allocations past their expiry.
    pub fn gc(&mut self, now: f64) {
        for phases in self.roads.values_mut() {
            for list in phases.values_mut() {
                list.retain(|a| a.expires_s > now);
            }
        }
        self.prune();
    }

    pub fn is_empty(&self) -> bool {
        self.roads.is_empty()
    }

    fn prune(&mut self) {
        for phases in self.roads.values_mut() {
            phases.retain(|_, l| !l.is_empty());
        }
        self.roads.retain(|_, p| !p.is_empty());
    }

    fn phase_list(&self, road: u32, phase: u32) -> Option<&Vec<Allocation>> {
        self.roads.get(&road)?.get(&phase)
    }

    fn road_allocs(&self, road: u32) -> impl Iterator<Item = &Allocation> + '_ {
        self.roads
            .get(&road)
            .into_iter()
            .flat_map(|p| p.values().flatten())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePlanRequest {
    pub vehicle: u64,
    pub origin_road: u32,
    pub origin_pos_m: f64,
    pub origin_lane: u32,
    pub destination_road: u32,
    pub vehicle_length_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutePlan {
    pub roads: Vec<u32>,
    /// Predicted stop-line clearing instant per road, absolute.
    pub instants: Vec<f64>,
    /// Schedule phase crossed per road; None for uncontrolled roads and the
    /// origin.
    pub phases: Vec<Option<u32>>,
    pub cost_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Delay charged per vehicle already expected ahead on a road.
    pub w_s: f64,
    /// Allowed drift between plan and booked instants before a recompute.
    pub tolerance_s: f64,
    /// Base window multiplier for freshly generated schedules.
    pub schedule_multiplier: u32,
    /// Lifetime of allocations that never got confirmed by a later plan.
    pub partial_alloc_ttl_s: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            w_s: 3.5,
            tolerance_s: 0.0,
            schedule_multiplier: 1,
            partial_alloc_ttl_s: 30.0,
        }
    }
}

/// Control data, generated schedules, and the road-to-intersection map, as
/// one agent replicates them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScheduleStore {
    data: BTreeMap<u32, IntersectionControlData>,
    schedules: BTreeMap<u32, GreenSchedule>,
    multipliers: BTreeMap<u32, u32>,
    road_to_intersection: BTreeMap<u32, u32>,
}

impl ScheduleStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Installs fresh control data: regenerates the schedule and drops the
    /// allocations booked against the stale one.
    pub fn install(
        &mut self,
        data: IntersectionControlData,
        now: f64,
        multiplier: u32,
        book: &mut SpaceAllocationBook,
    ) -> Result<(), RouteError> {
        let sched = generate_schedule(&data, now, multiplier)?;
        let inter = data.intersection;
        for road in data.vertex_roads.values() {
            self.road_to_intersection.insert(*road, inter);
            book.clear_road(*road);
        }
        self.multipliers.insert(inter, multiplier);
        self.schedules.insert(inter, sched);
        self.data.insert(inter, data);
        Ok(())
    }

    /// Installs an externally produced schedule (replicas, tests). Without
    /// control data the window cannot be extended later.
    pub fn install_schedule(&mut self, intersection: u32, roads: &[u32], schedule: GreenSchedule) {
        for road in roads {
            self.road_to_intersection.insert(*road, intersection);
        }
        self.multipliers.insert(intersection, 1);
        self.schedules.insert(intersection, schedule);
        self.data.remove(&intersection);
    }

    pub fn schedule(&self, intersection: u32) -> Option<&GreenSchedule> {
        self.schedules.get(&intersection)
    }

    pub fn data(&self, intersection: u32) -> Option<&IntersectionControlData> {
        self.data.get(&intersection)
    }

    pub fn multiplier(&self, intersection: u32) -> Option<u32> {
        self.multipliers.get(&intersection).copied()
    }

    pub fn intersection_of(&self, road: u32) -> Option<u32> {
        self.road_to_intersection.get(&road).copied()
    }

    pub fn intersections(&self) -> impl Iterator<Item = u32> + '_ {
        self.schedules.keys().copied()
    }

    /// Regenerates one intersection's schedule over a longer window. The
    /// longer dry-run replays the same reversal sequence from the same
    /// instant, so windows already handed out keep their instants.
    fn extend(&mut self, intersection: u32) -> Result<bool, RouteError> {
        let Some(data) = self.data.get(&intersection) else {
            return Ok(false);
        };
        let mult = self.multipliers[&intersection] + 1;
        let generated_at = self.schedules[&intersection].generated_at;
        let sched = generate_schedule(data, generated_at, mult)?;
        self.multipliers.insert(intersection, mult);
        self.schedules.insert(intersection, sched);
        Ok(true)
    }
}

const MAX_WINDOW_EXTENSIONS: u32 = 4;

/// Cheapest route under green windows, booked space, and queue penalties.
pub fn compute_optimal_route(
    net: &RoadNetwork,
    store: &mut ScheduleStore,
    book: &SpaceAllocationBook,
    req: &RoutePlanRequest,
    now_s: f64,
    cfg: &PlannerConfig,
) -> Result<RoutePlan, RouteError> {
    plan_route(net, store, book, req, now_s, cfg, true)
}

/// Fastest route under green windows alone; booked space and queues are
/// ignored.
pub fn shortest_time_route(
    net: &RoadNetwork,
    store: &mut ScheduleStore,
    req: &RoutePlanRequest,
    now_s: f64,
) -> Result<RoutePlan, RouteError> {
    let empty = SpaceAllocationBook::new(0.0);
    plan_route(net, store, &empty, req, now_s, &PlannerConfig::default(), false)
}

fn plan_route(
    net: &RoadNetwork,
    store: &mut ScheduleStore,
    book: &SpaceAllocationBook,
    req: &RoutePlanRequest,
    now_s: f64,
    cfg: &PlannerConfig,
    occupancy: bool,
) -> Result<RoutePlan, RouteError> {
    if !net.roads.contains_key(&req.origin_road) {
        return Err(RouteError::UnknownRoad(req.origin_road));
    }
    if !net.roads.contains_key(&req.destination_road) {
        return Err(RouteError::UnknownRoad(req.destination_road));
    }
    let mut rounds = 0;
    loop {
        let (plan, exhausted) = search(net, store, book, req, now_s, cfg, occupancy);
        if let Some(plan) = plan {
            return Ok(plan);
        }
        if exhausted.is_empty() || rounds == MAX_WINDOW_EXTENSIONS {
            return Err(RouteError::Unroutable);
        }
        let mut grew = false;
        for inter in exhausted {
            grew |= store.extend(inter)?;
        }
        if !grew {
            return Err(RouteError::Unroutable);
        }
        rounds += 1;
    }
}

/// One Dijkstra pass. Labels are stop-line clearing instants per road; ties
/// fall to the lower road id and the first settled predecessor wins, which
/// keeps results independent of map iteration details. Returns the plan if
/// the destination was labeled, plus every intersection whose schedule ran
/// out before an arrival.
fn search(
    net: &RoadNetwork,
    store: &ScheduleStore,
    book: &SpaceAllocationBook,
    req: &RoutePlanRequest,
    now_s: f64,
    cfg: &PlannerConfig,
    occupancy: bool,
) -> (Option<RoutePlan>, BTreeSet<u32>) {
    let origin = &net.roads[&req.origin_road];
    let start = now_s + (origin.length_m - req.origin_pos_m).max(0.0) / origin.speed_limit_mps;

    let mut dist: BTreeMap<u32, f64> = BTreeMap::new();
    let mut prev: BTreeMap<u32, u32> = BTreeMap::new();
    let mut phase_of: BTreeMap<u32, Option<u32>> = BTreeMap::new();
    let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
    let mut exhausted = BTreeSet::new();

    dist.insert(req.origin_road, start);
    phase_of.insert(req.origin_road, None);
    heap.push(Reverse((start.to_bits(), req.origin_road)));

    while let Some(Reverse((bits, road_id))) = heap.pop() {
        let label = f64::from_bits(bits);
        if label > dist[&road_id] {
            continue;
        }
        if road_id == req.destination_road {
            break;
        }
        let Some(to) = net.roads[&road_id].to else {
            continue;
        };
        for &next_id in &net.intersections[&to].exits {
            let next = &net.roads[&next_id];
            let mut instante = label + next.length_m / next.speed_limit_mps;
            let mut phase = None;
            if let Some(inter) = store.intersection_of(next_id) {
                let Some((ph, ws, _)) = store
                    .schedule(inter)
                    .and_then(|s| s.next_window(next_id, instante))
                else {
                    exhausted.insert(inter);
                    continue;
                };
                if occupancy {
                    let queue = book.queue_length_excluding(next_id, ph, req.vehicle);
                    if queue + req.vehicle_length_m + book.gap_m() > next.length_m + CAPACITY_EPS {
                        continue;
                    }
                    if ws > instante {
                        instante = ws;
                    }
                    let ahead = book.vehicles_ahead_excluding(next_id, instante, req.vehicle);
                    instante += ahead as f64 * cfg.w_s;
                } else if ws > instante {
                    instante = ws;
                }
                phase = Some(ph);
            }
            if dist.get(&next_id).is_none_or(|d| instante < *d) {
                dist.insert(next_id, instante);
                prev.insert(next_id, road_id);
                phase_of.insert(next_id, phase);
                heap.push(Reverse((instante.to_bits(), next_id)));
            }
        }
    }

    let Some(&arrival) = dist.get(&req.destination_road) else {
        return (None, exhausted);
    };
    let mut roads = vec![req.destination_road];
    while let Some(&p) = prev.get(roads.last().unwrap()) {
        roads.push(p);
    }
    roads.reverse();
    let instants = roads.iter().map(|r| dist[r]).collect();
    let phases = roads.iter().map(|r| phase_of[r]).collect();
    let plan = RoutePlan {
        roads,
        instants,
        phases,
        cost_s: arrival - now_s,
    };
    (Some(plan), exhausted)
}

/// Books the plan's road space. Capacity is checked on every scheduled road
/// before anything is written, so a rejection leaves the book untouched;
/// acceptance first releases the vehicle's previous allocations.
pub fn allocate_route(
    net: &RoadNetwork,
    book: &mut SpaceAllocationBook,
    req: &RoutePlanRequest,
    plan: &RoutePlan,
    now_s: f64,
    cfg: &PlannerConfig,
) -> Result<(), RouteError> {
    for i in 0..plan.roads.len() {
        let Some(phase) = plan.phases[i] else { continue };
        let road = plan.roads[i];
        let len = net
            .roads
            .get(&road)
            .ok_or(RouteError::UnknownRoad(road))?
            .length_m;
        let queue = book.queue_length_excluding(road, phase, req.vehicle);
        if queue + req.vehicle_length_m + book.gap_m() > len + CAPACITY_EPS {
            return Err(RouteError::Capacity { road, phase });
        }
    }
    book.remove_vehicle(req.vehicle);
    for i in 0..plan.roads.len() {
        let Some(phase) = plan.phases[i] else { continue };
        book.insert(
            plan.roads[i],
            phase,
            Allocation::new(
                req.vehicle,
                plan.instants[i],
                req.vehicle_length_m,
                plan.instants[i].max(now_s) + cfg.partial_alloc_ttl_s,
            ),
        );
    }
    Ok(())
}

/// True while every scheduled road of the plan still holds this vehicle's
/// allocation within the configured tolerance.
pub fn route_still_valid(
    book: &SpaceAllocationBook,
    vehicle: u64,
    plan: &RoutePlan,
    tolerance_s: f64,
) -> bool {
    plan.roads
        .iter()
        .zip(&plan.instants)
        .zip(&plan.phases)
        .all(|((road, instant), phase)| match phase {
            None => true,
            Some(ph) => book
                .allocation(*road, *ph, vehicle)
                .is_some_and(|a| (a.instant_s - instant).abs() <= tolerance_s),
        })
}

/// Distance-shortest road sequence, signals and occupancy ignored. Same
/// deterministic tie-breaking as the time planner.
pub fn shortest_distance_route(net: &RoadNetwork, origin: u32, dest: u32) -> Option<Vec<u32>> {
    net.roads.get(&origin)?;
    net.roads.get(&dest)?;
    let mut dist: BTreeMap<u32, f64> = BTreeMap::new();
    let mut prev: BTreeMap<u32, u32> = BTreeMap::new();
    let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
    let start = net.roads[&origin].length_m;
    dist.insert(origin, start);
    heap.push(Reverse((start.to_bits(), origin)));
    while let Some(Reverse((bits, road_id))) = heap.pop() {
        let label = f64::from_bits(bits);
        if label > dist[&road_id] {
            continue;
        }
        if road_id == dest {
            break;
        }
        let Some(to) = net.roads[&road_id].to else {
            continue;
        };
        for &next_id in &net.intersections[&to].exits {
            let cand = label + net.roads[&next_id].length_m;
            if dist.get(&next_id).is_none_or(|d| cand < *d) {
                dist.insert(next_id, cand);
                prev.insert(next_id, road_id);
                heap.push(Reverse((cand.to_bits(), next_id)));
            }
        }
    }
    dist.get(&dest)?;
    let mut roads = vec![dest];
    while let Some(&p) = prev.get(roads.last().unwrap()) {
        roads.push(p);
    }
    roads.reverse();
    Some(roads)
}
