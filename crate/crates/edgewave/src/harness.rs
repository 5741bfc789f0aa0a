//! Scenario harness: builds grid scenarios, couples the agents to the
//! traffic model on the event kernel, and reduces each run to the metrics
//! the comparative experiments report.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    AgentError, CorridorConfig, Dest, Effect, Interest, Outgoing, Payload, Segment, SignalAgent,
    SignalConfig, TccAgent, VehicleAgent, Via, VirtualSignal, DEFAULT_ALL_RED_S,
    DEFAULT_GROUP_ADOPT_PERIOD_S, DEFAULT_GROUP_SHARE_PERIOD_S, DEFAULT_HEARTBEAT_PERIOD_S,
    DEFAULT_HEARTBEAT_TTL_S, DEFAULT_MAX_CYCLES, DEFAULT_MAX_GREEN_S, DEFAULT_MIN_CYCLES,
    DEFAULT_MIN_GREEN_S, DEFAULT_MONITORING_AREA_M, DEFAULT_SAMPLES_PER_WINDOW,
    DEFAULT_SAMPLE_PERIOD_S, DEFAULT_YELLOW_S,
};
use crate::kernel::{AccessTech, ChannelModel, KernelError, Scheduler, Time};
use crate::routing::{
    allocate_route, compute_optimal_route, generate_schedule, shortest_distance_route,
    shortest_time_route, GreenSchedule, Indication, IntersectionControlData, PlannerConfig,
    RouteError, RoutePlanRequest, ScheduleStore, SpaceAllocationBook,
};
use crate::smer::{Multigraph, Reversibilities, VertexId};
use crate::traffic::{
    build_manhattan_grid, green_wave_advice, idm_acceleration, step_lane, GreenWaveState,
    GridSpeeds, Intersection, RoadClass, RoadNetwork, VehicleState, WaveAdvice,
};

/// Signal control running at the grid's intersections.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlStrategy {
    /// Fixed-cycle two-phase control, no communication.
    Pretimed,
    /// Isolated adaptive edge-reversal control.
    SmerI,
    /// Edge-reversal control with coordinated corridors.
    SmerIc,
}

/// Route guidance given to injected vehicles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingStrategy {
    /// Minimum-distance route, computed once at injection.
    Rcemc,
    /// Minimum-predicted-time route against the replicated schedules.
    Rctmc,
    /// Green-wave optimal route with road space allocation.
    Roov,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub rows: u32,
    pub cols: u32,
    pub spacing_m: f64,
    pub entry_len_m: f64,
    pub entry_kmh: f64,
    pub corridor_kmh: f64,
    pub collector_kmh: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            rows: 5,
            cols: 5,
            spacing_m: 300.0,
            entry_len_m: 500.0,
            entry_kmh: 80.0,
            corridor_kmh: 60.0,
            collector_kmh: 40.0,
        }
    }
}

/// Poisson arrival rates per boundary entry, by road class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowSpec {
    pub collector_veh_h: f64,
    pub corridor_veh_h: f64,
}

impl Default for FlowSpec {
    fn default() -> Self {
        FlowSpec { collector_veh_h: 300.0, corridor_veh_h: 450.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingSpec {
    pub min_green_s: f64,
    pub max_green_s: f64,
    pub yellow_s: f64,
    pub all_red_s: f64,
    pub monitoring_area_m: f64,
    pub sample_period_s: f64,
    pub samples_per_window: u32,
    pub min_cycles: u32,
    pub max_cycles: u32,
    pub heartbeat_period_s: f64,
    pub heartbeat_ttl_s: f64,
    pub group_share_period_s: f64,
    pub group_adopt_period_s: f64,
}

impl Default for TimingSpec {
    fn default() -> Self {
        TimingSpec {
            min_green_s: DEFAULT_MIN_GREEN_S,
            max_green_s: DEFAULT_MAX_GREEN_S,
            yellow_s: DEFAULT_YELLOW_S,
            all_red_s: DEFAULT_ALL_RED_S,
            monitoring_area_m: DEFAULT_MONITORING_AREA_M,
            sample_period_s: DEFAULT_SAMPLE_PERIOD_S,
            samples_per_window: DEFAULT_SAMPLES_PER_WINDOW,
            min_cycles: DEFAULT_MIN_CYCLES,
            max_cycles: DEFAULT_MAX_CYCLES,
            heartbeat_period_s: DEFAULT_HEARTBEAT_PERIOD_S,
            heartbeat_ttl_s: DEFAULT_HEARTBEAT_TTL_S,
            group_share_period_s: DEFAULT_GROUP_SHARE_PERIOD_S,
            group_adopt_period_s: DEFAULT_GROUP_ADOPT_PERIOD_S,
        }
    }
}

/// Complete description of one simulated scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub grid: GridSpec,
    /// Eastbound rows promoted to coordinated corridors.
    pub corridor_rows: Vec<u32>,
    /// Intersections running without infrastructure-side control.
    pub dark_intersections: Vec<u32>,
    pub flows: FlowSpec,
    pub timing: TimingSpec,
    pub channels: ChannelModel,
    pub planner: PlannerConfig,
    pub control: ControlStrategy,
    pub routing: RoutingStrategy,
    pub seed: u64,
    pub duration_s: f64,
    pub dt_s: f64,
    pub replica_count: u32,
    pub record_trace: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            grid: GridSpec::default(),
            corridor_rows: Vec::new(),
            dark_intersections: Vec::new(),
            flows: FlowSpec::default(),
            timing: TimingSpec::default(),
            channels: ChannelModel::default(),
            planner: PlannerConfig::default(),
            control: ControlStrategy::SmerI,
            routing: RoutingStrategy::Rcemc,
            seed: 0,
            duration_s: 3600.0,
            dt_s: 0.1,
            replica_count: 3,
            record_trace: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("bad scenario: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn bad<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::BadConfig(msg.into()))
}

impl ScenarioConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn from_json(text: &str) -> Result<ScenarioConfig, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.grid.rows < 2 || self.grid.cols < 2 {
            return bad("grid needs at least 2x2 intersections");
        }
        if !(self.grid.spacing_m > 0.0) || !(self.grid.entry_len_m > 0.0) {
            return bad("road lengths must be positive");
        }
        if !(self.grid.entry_kmh > 0.0)
            || !(self.grid.corridor_kmh > 0.0)
            || !(self.grid.collector_kmh > 0.0)
        {
            return bad("speed limits must be positive");
        }
        if !(self.dt_s > 0.0) {
            return bad("time step must be positive");
        }
        if !(self.duration_s >= 0.0) {
            return bad("duration cannot be negative");
        }
        if self.replica_count < 1 {
            return bad("control data needs at least one replica");
        }
        if self.flows.collector_veh_h < 0.0 || self.flows.corridor_veh_h < 0.0 {
            return bad("arrival rates cannot be negative");
        }
        let t = &self.timing;
        if !(t.min_green_s > 0.0) || t.max_green_s < t.min_green_s {
            return bad("green interval bounds are inconsistent");
        }
        if !(t.yellow_s > 0.0) || !(t.all_red_s >= 0.0) {
            return bad("clearance intervals are inconsistent");
        }
        if !(t.monitoring_area_m > 0.0) {
            return bad("monitoring area must be positive");
        }
        if !(t.sample_period_s > 0.0) || t.samples_per_window < 1 {
            return bad("sampling parameters are inconsistent");
        }
        if t.min_cycles < 1 || t.max_cycles < t.min_cycles {
            return bad("coordination cycle bounds are inconsistent");
        }
        if !(t.heartbeat_period_s > 0.0) || !(t.heartbeat_ttl_s > 0.0) {
            return bad("heartbeat parameters must be positive");
        }
        if !(t.group_share_period_s > 0.0) || !(t.group_adopt_period_s > 0.0) {
            return bad("group exchange periods must be positive");
        }
        if self.planner.schedule_multiplier < 1 {
            return bad("schedule multiplier must be at least one");
        }
        let cells = self.grid.rows * self.grid.cols;
        let mut seen = BTreeSet::new();
        for &d in &self.dark_intersections {
            if d >= cells {
                return bad(format!("dark intersection {d} is outside the grid"));
            }
            if !seen.insert(d) {
                return bad(format!("dark intersection {d} listed twice"));
            }
        }
        if self.control == ControlStrategy::Pretimed && !self.dark_intersections.is_empty() {
            return bad("dark intersections need replicable control data");
        }
        let mut seen = BTreeSet::new();
        for &r in &self.corridor_rows {
            if r >= self.grid.rows {
                return bad(format!("corridor row {r} is outside the grid"));
            }
            if r % 2 == 1 {
                return bad(format!("corridor row {r} runs against travel order"));
            }
            if !seen.insert(r) {
                return bad(format!("corridor row {r} listed twice"));
            }
        }
        if self.control == ControlStrategy::SmerIc && self.corridor_rows.is_empty() {
            return bad("coordinated control needs at least one corridor row");
        }
        Ok(())
    }

    /// Materializes the grid with the configured corridor rows marked.
    pub fn build_network(&self) -> RoadNetwork {
        let speeds = GridSpeeds {
            entry_mps: self.grid.entry_kmh / 3.6,
            corridor_mps: self.grid.corridor_kmh / 3.6,
            collector_mps: self.grid.collector_kmh / 3.6,
        };
        let mut net = build_manhattan_grid(
            self.grid.rows,
            self.grid.cols,
            self.grid.spacing_m,
            self.grid.entry_len_m,
            &speeds,
        );
        let h = self.grid.rows * (self.grid.cols - 1);
        let v = self.grid.cols * (self.grid.rows - 1);
        for &row in &self.corridor_rows {
            let entry = h + v + 2 * row;
            let mut roads = vec![entry];
            roads.extend((0..self.grid.cols - 1).map(|k| row * (self.grid.cols - 1) + k));
            net.mark_corridor(1000 + row, &roads, row * self.grid.cols, speeds.corridor_mps);
        }
        net
    }
}

/// One line of the run trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Light { t_s: f64, intersection: u32, road: u32, indication: Indication },
    Schedule { t_s: f64, intersection: u32, anchor_s: f64, data: IntersectionControlData },
    Inject { t_s: f64, vehicle: u64, origin: u32, destination: u32 },
    Complete { t_s: f64, vehicle: u64, travel_s: f64, stopped_s: f64, distance_m: f64 },
}

pub fn trace_jsonl(trace: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in trace {
        out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_trace_jsonl(text: &str) -> Result<Vec<TraceEvent>, HarnessError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Counts conflicting green grants in a light trace: every activation of a
/// road whose conflict partner is not red at that instant is one violation.
/// Roads never seen before count as red.
pub fn count_trace_conflicts(net: &RoadNetwork, trace: &[TraceEvent]) -> u64 {
    let mut partners: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for inter in net.intersections.values() {
        for &(a, b) in &inter.conflicts {
            partners.entry(a).or_default().push(b);
            partners.entry(b).or_default().push(a);
        }
    }
    let mut state: BTreeMap<u32, Indication> = BTreeMap::new();
    let mut count = 0;
    for e in trace {
        let TraceEvent::Light { road, indication, .. } = e else { continue };
        let prev = state.get(road).copied();
        if prev == Some(*indication) {
            continue;
        }
        let was_active = matches!(prev, Some(Indication::Green) | Some(Indication::Yellow));
        if *indication != Indication::Red && !was_active {
            if let Some(ps) = partners.get(road) {
                for p in ps {
                    if matches!(state.get(p), Some(Indication::Green) | Some(Indication::Yellow)) {
                        count += 1;
                    }
                }
            }
        }
        state.insert(*road, *indication);
    }
    count
}

/// Metrics over one aggregation bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket_start_s: f64,
    pub throughput_veh_h: f64,
    pub mean_wait_s: f64,
    pub wait_ci95_s: f64,
    pub mean_travel_s: f64,
    pub mean_speed_kmh: f64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub mean_latency_ms: f64,
    pub delivery_rate: f64,
    pub mean_hops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTotals {
    pub injected: u64,
    pub completed: u64,
    pub in_transit: u64,
    pub throughput_veh_h: f64,
    pub mean_wait_s: f64,
    pub wait_ci95_s: f64,
    pub mean_travel_s: f64,
    pub mean_speed_kmh: f64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    pub mean_latency_ms: f64,
    pub delivery_rate: f64,
    pub mean_hops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bucket_s: f64,
    pub buckets: Vec<BucketRow>,
    pub totals: MetricsTotals,
    pub safety_violations: u64,
}

pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from(
        "bucket_start_s,throughput_veh_h,mean_wait_s,wait_ci95_s,mean_travel_s,mean_speed_kmh,\
         messages_sent,messages_delivered,mean_latency_ms,delivery_rate,mean_hops\n",
    );
    for b in &report.buckets {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            b.bucket_start_s,
            b.throughput_veh_h,
            b.mean_wait_s,
            b.wait_ci95_s,
            b.mean_travel_s,
            b.mean_speed_kmh,
            b.messages_sent,
            b.messages_delivered,
            b.mean_latency_ms,
            b.delivery_rate,
            b.mean_hops,
        ));
    }
    out
}

pub fn metrics_json(report: &MetricsReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

/// Everything one run produces.
pub struct RunOutput {
    pub report: MetricsReport,
    pub trace: Vec<TraceEvent>,
    /// Serialized allocation book of every replica, for divergence checks.
    pub replica_books_json: Vec<String>,
    pub replica_stores_json: Vec<String>,
}

/// Shared initial orientation of one intersection: one vertex per entry
/// road, unit reversibilities, every conflict arc pointing at the smallest
/// entry so exactly one signal starts as the operating sink.
fn intersection_graph(inter: &Intersection) -> (Multigraph, Reversibilities) {
    let mut mg = Multigraph::new();
    let mut rev = Reversibilities::new();
    for &rid in &inter.entries {
        mg.add_vertex(rid as VertexId);
        rev.set(rid as VertexId, 1);
    }
    for &(a, b) in &inter.conflicts {
        // conflicts store the smaller id first
        mg.add_arc(a as VertexId, b as VertexId, 1, 1).expect("conflict pair is a valid arc");
    }
    (mg, rev)
}

fn initial_control_data(
    inter: &Intersection,
    timing: &TimingSpec,
) -> IntersectionControlData {
    let (mg, rev) = intersection_graph(inter);
    let first = inter.entries.iter().copied().min();
    let mut indications = BTreeMap::new();
    let mut min_green_s = BTreeMap::new();
    let mut max_green_s = BTreeMap::new();
    let mut yellow_s = BTreeMap::new();
    let mut vertex_roads = BTreeMap::new();
    for &rid in &inter.entries {
        let v = rid as VertexId;
        vertex_roads.insert(v, rid);
        indications
            .insert(rid, if Some(rid) == first { Indication::Green } else { Indication::Red });
        min_green_s.insert(v, timing.min_green_s);
        max_green_s.insert(v, timing.max_green_s);
        yellow_s.insert(v, timing.yellow_s);
    }
    IntersectionControlData {
        intersection: inter.id,
        multigraph: mg,
        reversibilities: rev,
        demands: None,
        coordination_active: false,
        indications,
        min_green_s,
        max_green_s,
        yellow_s,
        all_red_s: timing.all_red_s,
        vertex_roads,
        sample_period_s: timing.sample_period_s,
        samples_per_window: timing.samples_per_window,
        responsible_agent: None,
    }
}

/// Dry-runs every intersection's start-of-day control data into a green
/// schedule, without running the simulation.
pub fn dump_schedules(
    cfg: &ScenarioConfig,
    multiplier: u32,
) -> Result<BTreeMap<u32, GreenSchedule>, HarnessError> {
    cfg.validate()?;
    let net = cfg.build_network();
    let mut out = BTreeMap::new();
    for inter in net.intersections.values() {
        let data = initial_control_data(inter, &cfg.timing);
        out.insert(inter.id, generate_schedule(&data, 0.0, multiplier)?);
    }
    Ok(out)
}

const BUCKET_S: f64 = 100.0;
/// Post-horizon grace: long enough for the deepest relay chain in flight
/// (three cellular legs) to land, so sent and delivered counters close.
const DRAIN_S: f64 = 0.25;
const VEHICLE_LEN_M: f64 = 5.0;
const BOOK_GAP_M: f64 = 2.5;
/// Standing space one queued vehicle needs before another may enter.
const SLOT_M: f64 = VEHICLE_LEN_M + BOOK_GAP_M;

#[derive(Clone, Copy, PartialEq, Eq)]
enum NodeRef {
    Signal(usize),
    Vehicle(u64),
    Tcc,
}

enum SimMsg {
    Agent { out: Outgoing },
    Install { data: IntersectionControlData, anchor_s: f64 },
    RouteRequest { vehicle: u64, origin: u32, pos_m: f64 },
    RouteReply { vehicle: u64, roads: Vec<u32> },
    ReplicaNote { count: u64 },
}

enum PreKind {
    Green,
    Yellow,
    Red,
}

enum Ev {
    Tick,
    Proto,
    TccTick,
    Light { sig: usize, to: Indication, gen: u64 },
    Pre { inter: u32, kind: PreKind },
    Demand { sig: usize },
    Heartbeat { sig: usize },
    GroupShare { sig: usize },
    GroupAdopt { sig: usize },
    Participate { sig: usize, cycles: u32 },
    Arrive { road: u32 },
    Deliver { to: NodeRef, msg: SimMsg, sent_us: u64 },
}

struct SignalRec {
    agent: SignalAgent,
    intersection: u32,
}

struct VehMeta {
    dest_exit: u32,
    route: Vec<u32>,
    route_idx: usize,
    road: u32,
    injected_s: f64,
    stopped_s: f64,
    dist_m: f64,
    agent: Option<VehicleAgent>,
    awaiting_reply: bool,
    needs_replan: bool,
}

struct Replica {
    store: ScheduleStore,
    book: SpaceAllocationBook,
}

#[derive(Clone, Default)]
struct Accum {
    n: u64,
    travel: f64,
    wait: f64,
    wait_sq: f64,
    speed: f64,
    sent: u64,
    delivered: u64,
    expected: u64,
    latency_ms: f64,
}

impl Accum {
    fn add_complete(&mut self, travel: f64, wait: f64, dist: f64) {
        self.n += 1;
        self.travel += travel;
        self.wait += wait;
        self.wait_sq += wait * wait;
        if travel > 0.0 {
            self.speed += dist / travel * 3.6;
        }
    }

    fn mean_wait(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.wait / self.n as f64
        }
    }

    fn ci95(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = ((self.wait_sq - self.wait * self.wait / n) / (n - 1.0)).max(0.0);
        1.96 * var.sqrt() / n.sqrt()
    }

    fn mean_travel(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.travel / self.n as f64
        }
    }

    fn mean_speed(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.speed / self.n as f64
        }
    }

    fn mean_latency(&self) -> f64 {
        if self.delivered == 0 {
            0.0
        } else {
            self.latency_ms / self.delivered as f64
        }
    }

    fn delivery_rate(&self) -> f64 {
        if self.expected == 0 {
            1.0
        } else {
            self.delivered as f64 / self.expected as f64
        }
    }

    fn mean_hops(&self) -> f64 {
        if self.delivered > 0 {
            1.0
        } else {
            0.0
        }
    }

    fn row(&self, start: f64, bucket_s: f64) -> BucketRow {
        BucketRow {
            bucket_start_s: start,
            throughput_veh_h: self.n as f64 * 3600.0 / bucket_s,
            mean_wait_s: self.mean_wait(),
            wait_ci95_s: self.ci95(),
            mean_travel_s: self.mean_travel(),
            mean_speed_kmh: self.mean_speed(),
            messages_sent: self.sent,
            messages_delivered: self.delivered,
            mean_latency_ms: self.mean_latency(),
            delivery_rate: self.delivery_rate(),
            mean_hops: self.mean_hops(),
        }
    }
}

struct Sim {
    cfg: ScenarioConfig,
    net: RoadNetwork,
    rng: ChaCha8Rng,
    smer: bool,
    roov: bool,
    end: Time,
    sigs: BTreeMap<usize, SignalRec>,
    sigs_at: BTreeMap<u32, Vec<usize>>,
    leader_sigs: Vec<usize>,
    corridor_cfgs: Vec<(CorridorConfig, u32, usize)>,
    tcc: TccAgent,
    virtuals: BTreeMap<u32, VirtualSignal>,
    dark: BTreeSet<u32>,
    dark_active: BTreeSet<u32>,
    dark_data: BTreeMap<u32, (IntersectionControlData, f64)>,
    replicas: Vec<Replica>,
    light: BTreeMap<u32, Indication>,
    lanes: BTreeMap<u32, Vec<VehicleState>>,
    meta: BTreeMap<u64, VehMeta>,
    gates: BTreeMap<u32, VecDeque<u64>>,
    next_vid: u64,
    pre_phase: BTreeMap<u32, usize>,
    pre_order: BTreeMap<u32, Vec<u32>>,
    conflict_partners: BTreeMap<u32, Vec<u32>>,
    road_ids: Vec<u32>,
    entries: Vec<u32>,
    dests: BTreeMap<u32, Vec<u32>>,
    rates: BTreeMap<u32, f64>,
    trace: Vec<TraceEvent>,
    buckets: Vec<Accum>,
    totals: Accum,
    injected: u64,
    completed: u64,
    safety: u64,
    fault: Option<HarnessError>,
}

/// Runs one scenario to completion and reduces it to metrics, the trace,
/// and the final replica state.
pub fn run_experiment(cfg: &ScenarioConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let mut sim = Sim::new(cfg.clone());
    let mut sched: Scheduler<Ev> = Scheduler::new();
    sim.bootstrap(&mut sched)?;
    let until = sim.end + Time::from_secs_f64(DRAIN_S);
    sched.run_until(until, |s, t, ev| {
        if sim.fault.is_some() {
            return;
        }
        if let Err(e) = sim.handle(s, t, ev) {
            sim.fault = Some(e);
        }
    });
    if let Some(e) = sim.fault.take() {
        return Err(e);
    }
    Ok(sim.finish())
}

impl Sim {
    fn new(cfg: ScenarioConfig) -> Sim {
        let net = cfg.build_network();
        let smer = matches!(cfg.control, ControlStrategy::SmerI | ControlStrategy::SmerIc);
        let roov = cfg.routing == RoutingStrategy::Roov;
        let road_ids: Vec<u32> = net.roads.keys().copied().collect();
        let lanes: BTreeMap<u32, Vec<VehicleState>> =
            road_ids.iter().map(|&r| (r, Vec::new())).collect();
        let entries: Vec<u32> =
            net.roads.values().filter(|r| r.from.is_none()).map(|r| r.id).collect();
        let exits: Vec<u32> =
            net.roads.values().filter(|r| r.to.is_none()).map(|r| r.id).collect();
        let mut dests = BTreeMap::new();
        for &e in &entries {
            // the paired boundary stub sits at id entry + 1; sending traffic
            // straight back out there would never cross a signal
            let own = e + 1;
            let cand: Vec<u32> = exits
                .iter()
                .copied()
                .filter(|&x| x != own && shortest_distance_route(&net, e, x).is_some())
                .collect();
            dests.insert(e, cand);
        }
        let mut rates = BTreeMap::new();
        for &e in &entries {
            let rate = match net.roads[&e].class {
                RoadClass::Corridor => cfg.flows.corridor_veh_h,
                _ => cfg.flows.collector_veh_h,
            };
            rates.insert(e, rate);
        }
        let gates = entries.iter().map(|&e| (e, VecDeque::new())).collect();
        let mut conflict_partners: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        let mut pre_order = BTreeMap::new();
        for inter in net.intersections.values() {
            for &(a, b) in &inter.conflicts {
                conflict_partners.entry(a).or_default().push(b);
                conflict_partners.entry(b).or_default().push(a);
            }
            let mut order = inter.entries.clone();
            order.sort_unstable();
            pre_order.insert(inter.id, order);
        }
        let buckets = vec![Accum::default(); (cfg.duration_s / BUCKET_S).ceil() as usize];
        let replicas = (0..cfg.replica_count)
            .map(|_| Replica {
                store: ScheduleStore::new(),
                book: SpaceAllocationBook::new(BOOK_GAP_M),
            })
            .collect();
        Sim {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            smer,
            roov,
            end: Time::from_secs_f64(cfg.duration_s),
            sigs: BTreeMap::new(),
            sigs_at: BTreeMap::new(),
            leader_sigs: Vec::new(),
            corridor_cfgs: Vec::new(),
            tcc: TccAgent::new(cfg.timing.heartbeat_ttl_s),
            virtuals: BTreeMap::new(),
            dark: cfg.dark_intersections.iter().copied().collect(),
            dark_active: BTreeSet::new(),
            dark_data: BTreeMap::new(),
            replicas,
            light: BTreeMap::new(),
            lanes,
            meta: BTreeMap::new(),
            gates,
            next_vid: 0,
            pre_phase: BTreeMap::new(),
            pre_order,
            conflict_partners,
            road_ids,
            entries,
            dests,
            rates,
            trace: Vec::new(),
            buckets,
            totals: Accum::default(),
            injected: 0,
            completed: 0,
            safety: 0,
            fault: None,
            cfg,
            net,
        }
    }

    fn bootstrap(&mut self, sched: &mut Scheduler<Ev>) -> Result<(), HarnessError> {
        match self.cfg.control {
            ControlStrategy::Pretimed => self.bootstrap_pretimed(sched)?,
            _ => self.bootstrap_smer(sched)?,
        }
        let dt = self.cfg.dt_s;
        self.chain(sched, Time::ZERO, dt, Ev::Tick)?;
        if self.smer || self.roov {
            self.chain(sched, Time::ZERO, 1.0, Ev::Proto)?;
        }
        for road in self.entries.clone() {
            if self.rates[&road] > 0.0 && !self.dests[&road].is_empty() {
                let gap = self.exp_gap(self.rates[&road]);
                let at = Time::from_secs_f64(gap);
                if at <= self.end {
                    sched.schedule(at, Ev::Arrive { road })?;
                }
            }
        }
        Ok(())
    }

    fn bootstrap_pretimed(&mut self, sched: &mut Scheduler<Ev>) -> Result<(), HarnessError> {
        let inters: Vec<u32> = self.net.intersections.keys().copied().collect();
        for inter in inters {
            let order = self.pre_order[&inter].clone();
            if order.is_empty() {
                continue;
            }
            self.pre_phase.insert(inter, 0);
            self.set_light(inter, order[0], Indication::Green, 0.0);
            for &road in &order[1..] {
                self.set_light(inter, road, Indication::Red, 0.0);
            }
            self.chain(
                sched,
                Time::ZERO,
                self.cfg.timing.min_green_s,
                Ev::Pre { inter, kind: PreKind::Yellow },
            )?;
        }
        Ok(())
    }

    fn bootstrap_smer(&mut self, sched: &mut Scheduler<Ev>) -> Result<(), HarnessError> {
        let timing = self.cfg.timing;
        for (iid, inter) in self.net.intersections.clone() {
            if self.dark.contains(&iid) {
                continue;
            }
            let (mg, rev) = intersection_graph(&inter);
            let mut ids = inter.entries.clone();
            ids.sort_unstable();
            for &rid in &ids {
                let road = &self.net.roads[&rid];
                let mut c = SignalConfig::new(rid as usize, iid, rid, road.end);
                c.min_green_s = timing.min_green_s;
                c.max_green_s = timing.max_green_s;
                c.yellow_s = timing.yellow_s;
                c.all_red_s = timing.all_red_s;
                c.monitoring_area_m = timing.monitoring_area_m.min(road.length_m);
                c.signals_in_intersection = ids.len() as u32;
                c.sample_period_s = timing.sample_period_s;
                c.samples_per_window = timing.samples_per_window;
                let agent = SignalAgent::new(c, mg.clone(), rev.clone())?;
                self.sigs.insert(rid as usize, SignalRec { agent, intersection: iid });
                self.sigs_at.entry(iid).or_default().push(rid as usize);
            }
        }
        if self.cfg.control == ControlStrategy::SmerIc {
            self.wire_corridors();
        }
        // the center replicates every intersection from the first instant
        for inter in self.net.intersections.clone().values() {
            let data = initial_control_data(inter, &timing);
            if self.dark.contains(&inter.id) {
                self.dark_data.insert(inter.id, (data.clone(), 0.0));
            }
            self.tcc.provision_intersection(data, 0.0);
        }
        for (ccfg, leader_inter, leader_sig) in self.corridor_cfgs.clone() {
            self.tcc.provision_corridor(ccfg, leader_inter, leader_sig);
        }
        let ids: Vec<usize> = self.sigs.keys().copied().collect();
        for sig in ids {
            let effs = self.sigs.get_mut(&sig).expect("signal").agent.start(0.0)?;
            self.realize_signal(sched, Time::ZERO, sig, effs)?;
        }
        for sig in self.sigs.keys() {
            self.chain(sched, Time::ZERO, timing.sample_period_s, Ev::Demand { sig: *sig })?;
            self.chain(sched, Time::ZERO, timing.heartbeat_period_s, Ev::Heartbeat { sig: *sig })?;
        }
        self.chain(sched, Time::ZERO, 1.0, Ev::TccTick)?;
        for sig in self.leader_sigs.clone() {
            self.chain(sched, Time::ZERO, timing.group_share_period_s, Ev::GroupShare { sig })?;
            self.chain(sched, Time::ZERO, timing.group_adopt_period_s, Ev::GroupAdopt { sig })?;
        }
        Ok(())
    }

    /// One corridor-level multigraph is shared by all leaders: one vertex
    /// per corridor, unit reversibilities, arcs toward the smallest id.
    fn wire_corridors(&mut self) {
        let timing = self.cfg.timing;
        let ids: Vec<u32> = self.net.corridors.iter().map(|c| c.id).collect();
        let mut cmg = Multigraph::new();
        let mut crev = Reversibilities::new();
        for &c in &ids {
            cmg.add_vertex(c as VertexId);
            crev.set(c as VertexId, 1);
        }
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                cmg.add_arc(ids[i] as VertexId, ids[j] as VertexId, 1, 1)
                    .expect("corridor ids are distinct");
            }
        }
        for corr in self.net.corridors.clone() {
            let leader_sig = corr.roads[0] as usize;
            let participants: Vec<(usize, Segment)> = corr.roads[1..]
                .iter()
                .map(|&rid| {
                    let r = &self.net.roads[&rid];
                    (rid as usize, Segment { length_m: r.length_m, speed_mps: r.speed_limit_mps })
                })
                .collect();
            let ccfg = CorridorConfig {
                corridor: corr.id,
                participants,
                multigraph: cmg.clone(),
                reversibilities: crev.clone(),
                min_cycles: timing.min_cycles,
                max_cycles: timing.max_cycles,
                group: 1,
                group_members: ids.clone(),
            };
            if let Some(rec) = self.sigs.get_mut(&leader_sig) {
                rec.agent.set_corridor_leadership(ccfg.clone());
                self.leader_sigs.push(leader_sig);
                for &rid in &corr.roads[1..] {
                    if let Some(p) = self.sigs.get_mut(&(rid as usize)) {
                        p.agent.set_corridor_controllers(vec![(corr.id, leader_sig)]);
                    }
                }
            }
            self.corridor_cfgs.push((ccfg, corr.leader_intersection, leader_sig));
        }
    }

    fn handle(&mut self, sched: &mut Scheduler<Ev>, t: Time, ev: Ev) -> Result<(), HarnessError> {
        if t > self.end && !matches!(ev, Ev::Deliver { .. }) {
            // the grace window past the horizon only flushes in-flight
            // messages; nothing new starts
            return Ok(());
        }
        let now = t.as_secs_f64();
        match ev {
            Ev::Tick => {
                self.tick_motion(sched, t)?;
                self.chain(sched, t, self.cfg.dt_s, Ev::Tick)?;
            }
            Ev::Proto => {
                self.proto_tick(sched, t)?;
                self.chain(sched, t, 1.0, Ev::Proto)?;
            }
            Ev::TccTick => {
                let effs = self.tcc.liveness_tick(now);
                self.realize_tcc(sched, t, effs)?;
                self.chain(sched, t, 1.0, Ev::TccTick)?;
            }
            Ev::Light { sig, to, gen } => {
                if let Some(rec) = self.sigs.get_mut(&sig) {
                    let effs = rec.agent.on_light(to, gen, now)?;
                    self.realize_signal(sched, t, sig, effs)?;
                }
            }
            Ev::Pre { inter, kind } => self.pre_step(sched, t, inter, kind)?,
            Ev::Demand { sig } => {
                if let Some(rec) = self.sigs.get_mut(&sig) {
                    let effs = rec.agent.demand_tick(now);
                    self.realize_signal(sched, t, sig, effs)?;
                }
                self.chain(sched, t, self.cfg.timing.sample_period_s, Ev::Demand { sig })?;
            }
            Ev::Heartbeat { sig } => {
                if let Some(rec) = self.sigs.get_mut(&sig) {
                    let effs = rec.agent.heartbeat(now);
                    self.realize_signal(sched, t, sig, effs)?;
                }
                self.chain(sched, t, self.cfg.timing.heartbeat_period_s, Ev::Heartbeat { sig })?;
            }
            Ev::GroupShare { sig } => {
                if let Some(rec) = self.sigs.get_mut(&sig) {
                    let effs = rec.agent.group_share_tick();
                    self.realize_signal(sched, t, sig, effs)?;
                }
                self.chain(sched, t, self.cfg.timing.group_share_period_s, Ev::GroupShare { sig })?;
            }
            Ev::GroupAdopt { sig } => {
                if let Some(rec) = self.sigs.get_mut(&sig) {
                    let effs = rec.agent.group_adopt_tick();
                    rec.agent.corridor_demand_tick()?;
                    self.realize_signal(sched, t, sig, effs)?;
                }
                self.chain(sched, t, self.cfg.timing.group_adopt_period_s, Ev::GroupAdopt { sig })?;
            }
            Ev::Participate { sig, cycles } => {
                if let Some(rec) = self.sigs.get_mut(&sig) {
                    let effs = if rec.agent.coordination_active() {
                        rec.agent.extend_cycles(cycles);
                        Vec::new()
                    } else {
                        rec.agent.begin_participation(cycles, now)?
                    };
                    self.realize_signal(sched, t, sig, effs)?;
                }
            }
            Ev::Arrive { road } => self.arrive(sched, t, road)?,
            Ev::Deliver { to, msg, sent_us } => self.deliver(sched, t, to, msg, sent_us)?,
        }
        Ok(())
    }

    /// Schedules the next occurrence of a periodic event, stopping at the
    /// horizon.
    fn chain(
        &self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        period_s: f64,
        ev: Ev,
    ) -> Result<(), HarnessError> {
        let next = t + Time::from_secs_f64(period_s);
        if next <= self.end {
            sched.schedule(next, ev)?;
        }
        Ok(())
    }

    fn exp_gap(&mut self, rate_veh_h: f64) -> f64 {
        let lambda = rate_veh_h / 3600.0;
        let u: f64 = self.rng.random();
        -(1.0 - u).ln() / lambda
    }

    fn bucket_mut(&mut self, now: f64) -> Option<&mut Accum> {
        if self.buckets.is_empty() {
            return None;
        }
        let i = ((now / BUCKET_S).floor() as usize).min(self.buckets.len() - 1);
        Some(&mut self.buckets[i])
    }

    fn note_sent(&mut self, now: f64) {
        self.totals.sent += 1;
        if let Some(b) = self.bucket_mut(now) {
            b.sent += 1;
        }
    }

    fn note_expected(&mut self, now: f64, n: u64) {
        self.totals.expected += n;
        if let Some(b) = self.bucket_mut(now) {
            b.expected += n;
        }
    }

    fn note_delivered(&mut self, now: f64, lat_ms: f64, n: u64) {
        self.totals.delivered += n;
        self.totals.latency_ms += lat_ms * n as f64;
        if let Some(b) = self.bucket_mut(now) {
            b.delivered += n;
            b.latency_ms += lat_ms * n as f64;
        }
    }

    fn note_complete(&mut self, now: f64, travel: f64, wait: f64, dist: f64) {
        self.totals.add_complete(travel, wait, dist);
        if let Some(b) = self.bucket_mut(now) {
            b.add_complete(travel, wait, dist);
        }
    }

    fn set_light(&mut self, inter: u32, road: u32, ind: Indication, now: f64) {
        let prev = self.light.get(&road).copied();
        if prev == Some(ind) {
            return;
        }
        let was_active = matches!(prev, Some(Indication::Green) | Some(Indication::Yellow));
        if ind != Indication::Red && !was_active {
            if let Some(ps) = self.conflict_partners.get(&road) {
                for p in ps {
                    if matches!(
                        self.light.get(p),
                        Some(Indication::Green) | Some(Indication::Yellow)
                    ) {
                        self.safety += 1;
                    }
                }
            }
        }
        self.light.insert(road, ind);
        if self.cfg.record_trace {
            self.trace.push(TraceEvent::Light { t_s: now, intersection: inter, road, indication: ind });
        }
    }

    fn pre_step(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        inter: u32,
        kind: PreKind,
    ) -> Result<(), HarnessError> {
        let order = self.pre_order[&inter].clone();
        if order.is_empty() {
            return Ok(());
        }
        let now = t.as_secs_f64();
        let idx = *self.pre_phase.get(&inter).unwrap_or(&0);
        let timing = self.cfg.timing;
        match kind {
            PreKind::Yellow => {
                self.set_light(inter, order[idx], Indication::Yellow, now);
                self.chain(sched, t, timing.yellow_s, Ev::Pre { inter, kind: PreKind::Red })?;
            }
            PreKind::Red => {
                self.set_light(inter, order[idx], Indication::Red, now);
                self.pre_phase.insert(inter, (idx + 1) % order.len());
                self.chain(sched, t, timing.all_red_s, Ev::Pre { inter, kind: PreKind::Green })?;
            }
            PreKind::Green => {
                self.set_light(inter, order[idx], Indication::Green, now);
                self.chain(sched, t, timing.min_green_s, Ev::Pre { inter, kind: PreKind::Yellow })?;
            }
        }
        Ok(())
    }

    fn draw_dest(&mut self, entry: u32) -> u32 {
        let cand = &self.dests[&entry];
        cand[self.rng.random_range(0..cand.len())]
    }

    fn arrive(&mut self, sched: &mut Scheduler<Ev>, t: Time, road: u32) -> Result<(), HarnessError> {
        let vid = self.next_vid;
        self.next_vid += 1;
        let dest = self.draw_dest(road);
        let route = self.fallback_roads(road, dest);
        self.meta.insert(
            vid,
            VehMeta {
                dest_exit: dest,
                route,
                route_idx: 0,
                road,
                injected_s: t.as_secs_f64(),
                stopped_s: 0.0,
                dist_m: 0.0,
                agent: None,
                awaiting_reply: false,
                needs_replan: false,
            },
        );
        self.gates.get_mut(&road).expect("entry gate").push_back(vid);
        self.drain_gate(sched, t, road)?;
        let gap = self.exp_gap(self.rates[&road]);
        let next = t + Time::from_secs_f64(gap);
        if next <= self.end {
            sched.schedule(next, Ev::Arrive { road })?;
        }
        Ok(())
    }

    fn has_room(&self, road: u32) -> bool {
        match self.lanes[&road].last() {
            None => true,
            Some(v) => v.rear_m() >= SLOT_M,
        }
    }

    fn drain_gates(&mut self, sched: &mut Scheduler<Ev>, t: Time) -> Result<(), HarnessError> {
        for road in self.entries.clone() {
            self.drain_gate(sched, t, road)?;
        }
        Ok(())
    }

    fn drain_gate(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        road: u32,
    ) -> Result<(), HarnessError> {
        loop {
            let Some(&vid) = self.gates.get(&road).and_then(|q| q.front()) else { break };
            if !self.has_room(road) {
                break;
            }
            self.gates.get_mut(&road).expect("entry gate").pop_front();
            self.spawn(sched, t, vid, road)?;
        }
        Ok(())
    }

    fn spawn(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        vid: u64,
        road: u32,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        let (limit, to) = {
            let r = &self.net.roads[&road];
            (r.speed_limit_mps, r.to)
        };
        let mut vs = VehicleState::new(vid, road, 0.0, limit);
        vs.idm.v0 = limit;
        self.lanes.get_mut(&road).expect("lane").push(vs);
        self.injected += 1;
        let dest = {
            let m = self.meta.get_mut(&vid).expect("vehicle meta");
            m.injected_s = now;
            m.road = road;
            m.dest_exit
        };
        if self.cfg.record_trace {
            self.trace.push(TraceEvent::Inject { t_s: now, vehicle: vid, origin: road, destination: dest });
        }
        if self.smer {
            let mut agent = VehicleAgent::new(vid, road);
            agent.intersection = to;
            if let Some(m) = self.meta.get_mut(&vid) {
                m.agent = Some(agent);
            }
        }
        if matches!(self.cfg.routing, RoutingStrategy::Rctmc | RoutingStrategy::Roov) {
            self.request_route(sched, t, vid, road, 0.0)?;
        }
        Ok(())
    }

    fn fallback_roads(&self, origin: u32, dest: u32) -> Vec<u32> {
        shortest_distance_route(&self.net, origin, dest).unwrap_or_else(|| vec![origin])
    }

    fn planned_next(&self, vid: u64) -> Option<u32> {
        let m = self.meta.get(&vid)?;
        m.route.get(m.route_idx + 1).copied()
    }

    fn planned_next_or_replan(&mut self, vid: u64) -> Option<u32> {
        if let Some(n) = self.planned_next(vid) {
            return Some(n);
        }
        let (road, dest) = {
            let m = self.meta.get(&vid)?;
            (m.road, m.dest_exit)
        };
        let route = shortest_distance_route(&self.net, road, dest)?;
        let m = self.meta.get_mut(&vid)?;
        m.route = route;
        m.route_idx = 0;
        self.planned_next(vid)
    }

    fn tick_motion(&mut self, sched: &mut Scheduler<Ev>, t: Time) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        let dt = self.cfg.dt_s;
        for inter in self.dark_active.clone() {
            let entries = self.net.intersections[&inter].entries.clone();
            for rid in entries {
                let ind = match self.virtuals.get_mut(&inter) {
                    Some(vs) => vs.indication_at(rid, now)?,
                    None => continue,
                };
                self.set_light(inter, rid, ind, now);
            }
        }
        for i in 0..self.road_ids.len() {
            let rid = self.road_ids[i];
            if self.lanes[&rid].is_empty() {
                continue;
            }
            let (len, limit, to) = {
                let r = &self.net.roads[&rid];
                (r.length_m, r.speed_limit_mps, r.to)
            };
            let mut barrier = None;
            if to.is_some() {
                let open = matches!(
                    self.light.get(&rid),
                    Some(Indication::Green) | Some(Indication::Yellow)
                );
                let next_free = {
                    let front = self.lanes[&rid][0].id;
                    match self.planned_next(front) {
                        Some(n) => self.has_room(n),
                        None => true,
                    }
                };
                if !open || !next_free {
                    barrier = Some(len);
                }
            }
            let wave = if self.roov {
                to.and_then(|inter| self.wave_for(rid, inter, now, len))
            } else {
                None
            };
            let mut lane = std::mem::take(self.lanes.get_mut(&rid).expect("lane"));
            step_lane(&mut lane, barrier, limit, dt, |_, vs, gap, dv| {
                let w = wave.as_ref()?;
                let idm_a = idm_acceleration(vs.speed_mps, gap, dv, &vs.idm);
                match green_wave_advice(vs.pos_m, vs.speed_mps, idm_a, Some(w), len, limit, &vs.idm)
                {
                    WaveAdvice::Decelerate(a) | WaveAdvice::WaitForGreen(a) => Some(a.min(idm_a)),
                    _ => None,
                }
            });
            for vs in &lane {
                if let Some(m) = self.meta.get_mut(&vs.id) {
                    if vs.speed_mps < 0.5 {
                        m.stopped_s += dt;
                    }
                    m.dist_m += vs.speed_mps * dt;
                }
            }
            *self.lanes.get_mut(&rid).expect("lane") = lane;
        }
        self.transfers(sched, t)?;
        self.drain_gates(sched, t)?;
        Ok(())
    }

    /// Green-wave state of a controlled road, replayed from the installed
    /// virtual signal. During green the wave head sits at the stop line and
    /// recedes toward the tail; during red only the countdown is known.
    fn wave_for(&mut self, rid: u32, inter: u32, now: f64, len: f64) -> Option<GreenWaveState> {
        let vs = self.virtuals.get_mut(&inter)?;
        vs.indication_at(rid, now).ok()?;
        let windows = vs.schedule().windows_for(rid);
        let k = windows.iter().position(|&(_, _, e)| e > now)?;
        let (phase, s, e) = windows[k];
        Some(if s <= now {
            let ttng = windows.get(k + 1).map_or(0.0, |&(_, s2, _)| s2 - now);
            GreenWaveState {
                head_offset_m: len,
                wave_speed_mps: len / (e - s),
                duration_s: e - now,
                time_to_next_green_s: ttng,
                phase,
            }
        } else {
            GreenWaveState {
                head_offset_m: 0.0,
                wave_speed_mps: 0.0,
                duration_s: 0.0,
                time_to_next_green_s: s - now,
                phase,
            }
        })
    }

    fn transfers(&mut self, sched: &mut Scheduler<Ev>, t: Time) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        for i in 0..self.road_ids.len() {
            let rid = self.road_ids[i];
            loop {
                let (len, to) = {
                    let r = &self.net.roads[&rid];
                    (r.length_m, r.to)
                };
                let Some(front) = self.lanes[&rid].first() else { break };
                if front.pos_m < len - 1e-9 {
                    break;
                }
                let vid = front.id;
                let Some(_inter) = to else {
                    self.complete_front(rid, now);
                    continue;
                };
                let open = matches!(
                    self.light.get(&rid),
                    Some(Indication::Green) | Some(Indication::Yellow)
                );
                if !open {
                    let f = &mut self.lanes.get_mut(&rid).expect("lane")[0];
                    f.pos_m = len;
                    f.speed_mps = 0.0;
                    break;
                }
                let next = self.planned_next_or_replan(vid);
                let Some(nid) = next else {
                    let f = &mut self.lanes.get_mut(&rid).expect("lane")[0];
                    f.pos_m = len;
                    f.speed_mps = 0.0;
                    break;
                };
                if !self.has_room(nid) {
                    let f = &mut self.lanes.get_mut(&rid).expect("lane")[0];
                    f.pos_m = len;
                    f.speed_mps = 0.0;
                    break;
                }
                let mut vs = self.lanes.get_mut(&rid).expect("lane").remove(0);
                let (nlen, nlimit, nto) = {
                    let r = &self.net.roads[&nid];
                    (r.length_m, r.speed_limit_mps, r.to)
                };
                vs.pos_m = (vs.pos_m - len).max(0.0).min(nlen);
                vs.road = nid;
                vs.idm.v0 = nlimit;
                let pos_pt = self.net.roads[&nid].point_at(vs.pos_m);
                let mut agent_effs = Vec::new();
                if let Some(m) = self.meta.get_mut(&vid) {
                    m.road = nid;
                    if m.route.get(m.route_idx + 1) == Some(&nid) {
                        m.route_idx += 1;
                    } else if m.route.first() == Some(&nid) {
                        m.route_idx = 0;
                    } else {
                        m.route = vec![nid];
                        m.route_idx = 0;
                        m.needs_replan = true;
                    }
                    if let Some(a) = m.agent.as_mut() {
                        agent_effs = a.change_road(nid, pos_pt);
                        a.intersection = nto;
                    }
                }
                self.lanes.get_mut(&nid).expect("lane").push(vs);
                for e in agent_effs {
                    if let Effect::Send(out) = e {
                        self.send_from(sched, t, NodeRef::Vehicle(vid), out)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn complete_front(&mut self, rid: u32, now: f64) {
        let vs = self.lanes.get_mut(&rid).expect("lane").remove(0);
        let Some(m) = self.meta.remove(&vs.id) else { return };
        let travel = (now - m.injected_s).max(self.cfg.dt_s);
        self.completed += 1;
        if self.cfg.record_trace {
            self.trace.push(TraceEvent::Complete {
                t_s: now,
                vehicle: vs.id,
                travel_s: travel,
                stopped_s: m.stopped_s,
                distance_m: m.dist_m,
            });
        }
        self.note_complete(now, travel, m.stopped_s, m.dist_m);
    }

    fn proto_tick(&mut self, sched: &mut Scheduler<Ev>, t: Time) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        if self.smer {
            let mut batch: Vec<(u64, u32, f64, f64, bool)> = Vec::new();
            for (&rid, lane) in &self.lanes {
                if lane.is_empty() {
                    continue;
                }
                let r = &self.net.roads[&rid];
                for vs in lane {
                    batch.push((vs.id, rid, vs.pos_m, r.length_m, r.to.is_some()));
                }
            }
            for (vid, rid, pos, len, signalized) in batch {
                let Some(mut agent) = self.meta.get_mut(&vid).and_then(|m| m.agent.take()) else {
                    continue;
                };
                let area = self.cfg.timing.monitoring_area_m.min(len);
                let in_area = pos >= len - area;
                let pt = self.net.roads[&rid].point_at(pos.min(len));
                let mut effs = agent.presence_tick(signalized, in_area, pt, now);
                effs.extend(agent.out_tick(pt));
                if let Some(m) = self.meta.get_mut(&vid) {
                    m.agent = Some(agent);
                }
                for e in effs {
                    if let Effect::Send(out) = e {
                        self.send_from(sched, t, NodeRef::Vehicle(vid), out)?;
                    }
                }
            }
        }
        if self.roov {
            let mut asks: Vec<(u64, u32, f64)> = Vec::new();
            for (&rid, lane) in &self.lanes {
                for vs in lane {
                    if let Some(m) = self.meta.get(&vs.id) {
                        if m.needs_replan && !m.awaiting_reply {
                            asks.push((vs.id, rid, vs.pos_m));
                        }
                    }
                }
            }
            for (vid, rid, pos) in asks {
                self.request_route(sched, t, vid, rid, pos)?;
            }
        }
        Ok(())
    }

    fn request_route(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        vid: u64,
        origin: u32,
        pos_m: f64,
    ) -> Result<(), HarnessError> {
        let Some(m) = self.meta.get_mut(&vid) else { return Ok(()) };
        m.awaiting_reply = true;
        m.needs_replan = false;
        let now = t.as_secs_f64();
        self.note_sent(now);
        self.offer(
            sched,
            t,
            NodeRef::Tcc,
            SimMsg::RouteRequest { vehicle: vid, origin, pos_m },
            AccessTech::Lte,
            1,
        )
    }

    /// Queues delivery of one logical message carrying `copies` payloads,
    /// applying the channel's loss to the whole batch.
    fn offer(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        to: NodeRef,
        msg: SimMsg,
        tech: AccessTech,
        copies: u64,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        self.note_expected(now, copies);
        let (latency, loss) = {
            let p = self.cfg.channels.params(tech);
            (p.latency, p.loss)
        };
        if loss > 0.0 && self.rng.random::<f64>() < loss {
            return Ok(());
        }
        sched.schedule(t + latency, Ev::Deliver { to, msg, sent_us: t.micros() })?;
        Ok(())
    }

    fn send_from(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        sender: NodeRef,
        out: Outgoing,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        self.note_sent(now);
        let recipients = self.resolve(sender, &out);
        let tech = out.tech;
        for to in recipients {
            self.offer(sched, t, to, SimMsg::Agent { out: out.clone() }, tech, 1)?;
        }
        Ok(())
    }

    fn resolve(&self, sender: NodeRef, out: &Outgoing) -> Vec<NodeRef> {
        match out.dest {
            Dest::Signal(s) => {
                if self.sigs.contains_key(&s) {
                    vec![NodeRef::Signal(s)]
                } else {
                    Vec::new()
                }
            }
            Dest::Vehicle(v) => {
                // a forwarded control data request is answered from the
                // shared replica even when the addressee already left
                if self.meta.contains_key(&v)
                    || matches!(out.payload, Payload::ControlDataRequest { .. })
                {
                    vec![NodeRef::Vehicle(v)]
                } else {
                    Vec::new()
                }
            }
            Dest::Tcc => vec![NodeRef::Tcc],
            Dest::Broadcast => match out.via {
                Via::Intersection(i) => self
                    .sigs_at
                    .get(&i)
                    .map(|sigs| {
                        sigs.iter()
                            .copied()
                            .map(NodeRef::Signal)
                            .filter(|r| *r != sender)
                            .collect()
                    })
                    .unwrap_or_default(),
                Via::Road(_) => match out.interest {
                    Interest::VehicleOn(road) | Interest::VehicleOut(road) => {
                        if self.sigs.contains_key(&(road as usize)) {
                            vec![NodeRef::Signal(road as usize)]
                        } else {
                            Vec::new()
                        }
                    }
                    _ => Vec::new(),
                },
                Via::None => {
                    let mut v = vec![NodeRef::Tcc];
                    if matches!(
                        out.payload,
                        Payload::CorridorEdgeReversal { .. }
                            | Payload::CorridorReversibilityChange { .. }
                            | Payload::CorridorVehicleAmount { .. }
                            | Payload::GroupMemberVehicleAmount { .. }
                    ) {
                        v.extend(
                            self.leader_sigs
                                .iter()
                                .copied()
                                .map(NodeRef::Signal)
                                .filter(|r| *r != sender),
                        );
                    }
                    v
                }
            },
        }
    }

    fn realize_signal(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        sig: usize,
        effs: Vec<Effect>,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        let mut queue: VecDeque<Effect> = effs.into();
        while let Some(e) = queue.pop_front() {
            match e {
                Effect::Indicate { road, indication } => {
                    let inter = self.sigs[&sig].intersection;
                    self.set_light(inter, road, indication, now);
                }
                Effect::LightAt { at_s, to, gen } => {
                    let at = Time::from_secs_f64(at_s).max(t);
                    sched.schedule(at, Ev::Light { sig, to, gen })?;
                }
                Effect::ActivateCorridorNow => {
                    let more =
                        self.sigs.get_mut(&sig).expect("signal").agent.activate_corridor(now)?;
                    queue.extend(more);
                }
                Effect::ParticipationAt { at_s, cycles } => {
                    let at = Time::from_secs_f64(at_s).max(t);
                    sched.schedule(at, Ev::Participate { sig, cycles })?;
                }
                Effect::NewSchedule { data, anchor_s, schedule: _ } => {
                    self.publish_schedule(sched, t, data, anchor_s)?;
                }
                Effect::Send(out) => self.send_from(sched, t, NodeRef::Signal(sig), out)?,
            }
        }
        Ok(())
    }

    fn realize_tcc(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        effs: Vec<Effect>,
    ) -> Result<(), HarnessError> {
        for e in effs {
            if let Effect::Send(out) = e {
                self.send_from(sched, t, NodeRef::Tcc, out)?;
            }
        }
        Ok(())
    }

    fn publish_schedule(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        data: IntersectionControlData,
        anchor_s: f64,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        if self.cfg.record_trace {
            self.trace.push(TraceEvent::Schedule {
                t_s: now,
                intersection: data.intersection,
                anchor_s,
                data: data.clone(),
            });
        }
        self.note_sent(now);
        let copies = self.cfg.replica_count as u64;
        self.offer(sched, t, NodeRef::Tcc, SimMsg::Install { data, anchor_s }, AccessTech::Lte, copies)
    }

    fn deliver(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        to: NodeRef,
        msg: SimMsg,
        sent_us: u64,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        let lat_ms = t.micros().saturating_sub(sent_us) as f64 / 1000.0;
        match msg {
            SimMsg::Agent { out } => {
                self.note_delivered(now, lat_ms, 1);
                match to {
                    NodeRef::Signal(sig) => self.dispatch_signal(sched, t, sig, out)?,
                    NodeRef::Vehicle(vid) => self.dispatch_vehicle(sched, t, vid, out)?,
                    NodeRef::Tcc => self.dispatch_tcc(sched, t, out)?,
                }
            }
            SimMsg::Install { data, anchor_s } => {
                self.note_delivered(now, lat_ms, self.cfg.replica_count as u64);
                self.install(data, anchor_s)?;
            }
            SimMsg::RouteRequest { vehicle, origin, pos_m } => {
                self.note_delivered(now, lat_ms, 1);
                self.route_request(sched, t, vehicle, origin, pos_m)?;
            }
            SimMsg::RouteReply { vehicle, roads } => {
                self.note_delivered(now, lat_ms, 1);
                self.route_reply(vehicle, roads);
            }
            SimMsg::ReplicaNote { count } => self.note_delivered(now, lat_ms, count),
        }
        Ok(())
    }

    /// Applies one published control snapshot to the center and to every
    /// replica in the same instant, keeping the copies byte-identical.
    fn install(&mut self, data: IntersectionControlData, anchor_s: f64) -> Result<(), HarnessError> {
        self.tcc.on_control_data(data.intersection, data.clone(), anchor_s, None);
        let mult = self.cfg.planner.schedule_multiplier;
        for rep in &mut self.replicas {
            rep.store.install(data.clone(), anchor_s, mult, &mut rep.book)?;
        }
        self.virtuals.insert(data.intersection, VirtualSignal::new(data.clone(), anchor_s)?);
        if self.roov {
            let touched: BTreeSet<u32> = data.vertex_roads.values().copied().collect();
            for m in self.meta.values_mut() {
                if m.awaiting_reply || m.needs_replan {
                    continue;
                }
                let ahead = m.route.get(m.route_idx + 1..).unwrap_or(&[]);
                if ahead.iter().any(|r| touched.contains(r)) {
                    m.needs_replan = true;
                }
            }
        }
        Ok(())
    }

    fn route_request(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        vehicle: u64,
        origin: u32,
        pos_m: f64,
    ) -> Result<(), HarnessError> {
        let Some(dest) = self.meta.get(&vehicle).map(|m| m.dest_exit) else { return Ok(()) };
        let req = RoutePlanRequest {
            vehicle,
            origin_road: origin,
            origin_pos_m: pos_m,
            origin_lane: 0,
            destination_road: dest,
            vehicle_length_m: VEHICLE_LEN_M,
        };
        let now = t.as_secs_f64();
        let roads = match self.cfg.routing {
            RoutingStrategy::Roov => {
                for rep in &mut self.replicas {
                    rep.book.gc(now);
                }
                // planning happens on a scratch copy so window extensions
                // never leak into the replicated stores
                let mut scratch = self.replicas[0].store.clone();
                match compute_optimal_route(
                    &self.net,
                    &mut scratch,
                    &self.replicas[0].book,
                    &req,
                    now,
                    &self.cfg.planner,
                ) {
                    Ok(plan) => {
                        for rep in &mut self.replicas {
                            // every replica applies the identical allocation,
                            // so a capacity refusal is identical too
                            let _ = allocate_route(
                                &self.net,
                                &mut rep.book,
                                &req,
                                &plan,
                                now,
                                &self.cfg.planner,
                            );
                        }
                        if self.cfg.replica_count > 1 {
                            let extra = (self.cfg.replica_count - 1) as u64;
                            self.note_sent(now);
                            self.offer(
                                sched,
                                t,
                                NodeRef::Tcc,
                                SimMsg::ReplicaNote { count: extra },
                                AccessTech::Lte,
                                extra,
                            )?;
                        }
                        plan.roads
                    }
                    Err(_) => self.fallback_roads(origin, dest),
                }
            }
            RoutingStrategy::Rctmc => {
                let mut scratch = self.replicas[0].store.clone();
                match shortest_time_route(&self.net, &mut scratch, &req, now) {
                    Ok(plan) => plan.roads,
                    Err(_) => self.fallback_roads(origin, dest),
                }
            }
            RoutingStrategy::Rcemc => self.fallback_roads(origin, dest),
        };
        self.note_sent(now);
        self.offer(
            sched,
            t,
            NodeRef::Vehicle(vehicle),
            SimMsg::RouteReply { vehicle, roads },
            AccessTech::Lte,
            1,
        )
    }

    fn route_reply(&mut self, vehicle: u64, roads: Vec<u32>) {
        let Some(m) = self.meta.get_mut(&vehicle) else { return };
        m.awaiting_reply = false;
        if roads.first() == Some(&m.road) && roads.last() == Some(&m.dest_exit) {
            m.route = roads;
            m.route_idx = 0;
            m.needs_replan = false;
        } else {
            // the vehicle moved past the planned origin before the reply
            // landed; ask again from where it is now
            m.needs_replan = true;
        }
    }

    fn dispatch_signal(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        sig: usize,
        out: Outgoing,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        let Some(rec) = self.sigs.get_mut(&sig) else { return Ok(()) };
        let a = &mut rec.agent;
        let effs = match out.payload {
            Payload::VehicleOn { vehicle, pos } => a.on_vehicle_on(vehicle, pos, out.tech),
            Payload::VehicleOut { vehicle, pos } => a.on_vehicle_out(vehicle, pos, out.tech),
            Payload::RoadwayVehicleAmount { signal, mean } => {
                a.on_roadway_vehicle_amount(signal, mean)?;
                Vec::new()
            }
            Payload::ReversibilityChange { signal, ref demands, instant_s } => {
                a.on_reversibility_change(signal, demands, instant_s)?
            }
            Payload::EdgeReversal { signal, instant_s } => {
                a.on_edge_reversal(signal, instant_s, now)?
            }
            Payload::ReversalOfAllEdges { signal, instant_s } => {
                a.on_reversal_of_all_edges(signal, instant_s, now)?
            }
            Payload::Participation { signal, cycles } => a.on_participation(signal, cycles, now)?,
            Payload::ParticipationConfirmation { signal } => {
                a.on_participation_confirmation(signal, now)?
            }
            Payload::TrafficLightCoordination { corridor, controller, exec_delay_s, cycles } => {
                a.on_traffic_light_coordination(corridor, controller, exec_delay_s, cycles, now)
            }
            Payload::CorridorEdgeReversal { corridor } => a.on_corridor_edge_reversal(corridor, now)?,
            Payload::CorridorReversibilityChange { corridor, ref demands } => {
                a.on_corridor_reversibility_change(corridor, demands)?;
                Vec::new()
            }
            Payload::SegmentVehicleAmount { signal, corridor, mean } => {
                a.on_roadway_segment_vehicle_amount(signal, corridor, mean);
                Vec::new()
            }
            Payload::GroupMemberVehicleAmount { group, corridor, mean } => {
                a.on_group_member_vehicle_amount(group, corridor, mean);
                Vec::new()
            }
            Payload::CorridorVehicleAmount { corridor, mean } => {
                a.on_corridor_vehicle_amount(corridor, mean);
                Vec::new()
            }
            _ => Vec::new(),
        };
        self.realize_signal(sched, t, sig, effs)
    }

    fn dispatch_vehicle(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        vid: u64,
        out: Outgoing,
    ) -> Result<(), HarnessError> {
        match out.payload {
            Payload::PresenceConfirmation { takeover, .. } => {
                let Some(mut agent) = self.meta.get_mut(&vid).and_then(|m| m.agent.take()) else {
                    return Ok(());
                };
                let effs = agent.on_presence_confirmation(out.tech, takeover);
                if let Some(m) = self.meta.get_mut(&vid) {
                    m.agent = Some(agent);
                }
                for e in effs {
                    if let Effect::Send(o) = e {
                        self.send_from(sched, t, NodeRef::Vehicle(vid), o)?;
                    }
                }
            }
            Payload::LeftConfirmation { .. } => {
                if let Some(a) = self.meta.get_mut(&vid).and_then(|m| m.agent.as_mut()) {
                    a.on_left_confirmation();
                }
            }
            Payload::ControlData { intersection, data, anchor_s } => {
                if self.dark.contains(&intersection) && !self.dark_active.contains(&intersection) {
                    self.dark_active.insert(intersection);
                    self.virtuals
                        .entry(intersection)
                        .or_insert(VirtualSignal::new(data.clone(), anchor_s)?);
                }
                if let Some(a) = self.meta.get_mut(&vid).and_then(|m| m.agent.as_mut()) {
                    a.on_control_data(intersection, data, anchor_s)?;
                }
            }
            Payload::ControlDataRequest { vehicle: requester, intersection } => {
                // the responsible vehicle serves the request from the
                // replicated snapshot of the dark intersection
                if let Some((data, anchor_s)) = self.dark_data.get(&intersection).cloned() {
                    let answer = Outgoing {
                        tech: AccessTech::Lte,
                        interest: Interest::ControlData,
                        dest: Dest::Vehicle(requester),
                        via: Via::None,
                        direction: 0,
                        payload: Payload::ControlData { intersection, data, anchor_s },
                    };
                    self.send_from(sched, t, NodeRef::Vehicle(vid), answer)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn dispatch_tcc(
        &mut self,
        sched: &mut Scheduler<Ev>,
        t: Time,
        out: Outgoing,
    ) -> Result<(), HarnessError> {
        let now = t.as_secs_f64();
        match out.payload {
            Payload::Heartbeat { intersection, data, anchor_s, .. } => {
                self.tcc.on_heartbeat(intersection, data, anchor_s, now);
            }
            Payload::ControlDataRequest { vehicle, intersection } => {
                let effs = self.tcc.on_control_data_request(vehicle, intersection, now);
                self.realize_tcc(sched, t, effs)?;
            }
            Payload::ControlData { intersection, data, anchor_s } => {
                self.tcc.on_control_data(intersection, data, anchor_s, None);
            }
            Payload::CorridorEdgeReversal { corridor } => {
                self.tcc.on_corridor_edge_reversal(corridor);
            }
            Payload::CorridorReversibilityChange { corridor, ref demands } => {
                self.tcc.on_corridor_reversibility_change(corridor, demands);
            }
            _ => {}
        }
        Ok(())
    }

    fn finish(self) -> RunOutput {
        let in_transit: u64 = self.lanes.values().map(|l| l.len() as u64).sum();
        let duration = self.cfg.duration_s;
        let buckets: Vec<BucketRow> = self
            .buckets
            .iter()
            .enumerate()
            .map(|(i, a)| a.row(i as f64 * BUCKET_S, BUCKET_S))
            .collect();
        let totals = MetricsTotals {
            injected: self.injected,
            completed: self.completed,
            in_transit,
            throughput_veh_h: if duration > 0.0 {
                self.completed as f64 * 3600.0 / duration
            } else {
                0.0
            },
            mean_wait_s: self.totals.mean_wait(),
            wait_ci95_s: self.totals.ci95(),
            mean_travel_s: self.totals.mean_travel(),
            mean_speed_kmh: self.totals.mean_speed(),
            messages_sent: self.totals.sent,
            messages_delivered: self.totals.delivered,
            mean_latency_ms: self.totals.mean_latency(),
            delivery_rate: self.totals.delivery_rate(),
            mean_hops: self.totals.mean_hops(),
        };
        let report = MetricsReport {
            bucket_s: BUCKET_S,
            buckets,
            totals,
            safety_violations: self.safety,
        };
        let replica_books_json = self
            .replicas
            .iter()
            .map(|r| serde_json::to_string(&r.book).expect("book serializes"))
            .collect();
        let replica_stores_json = self
            .replicas
            .iter()
            .map(|r| serde_json::to_string(&r.store).expect("store serializes"))
            .collect();
        RunOutput { report, trace: self.trace, replica_books_json, replica_stores_json }
    }
}
