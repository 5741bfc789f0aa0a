//! Traffic-light, vehicle, and control-center agents built on the reversal
//! mechanics. Agents are pure state machines: every operation returns the
//! effects (messages to emit, light transitions to schedule) for the caller
//! to realize, which keeps them clock- and transport-agnostic and directly
//! unit-testable.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::AccessTech;
use crate::routing::{generate_schedule, GreenSchedule, Indication, IntersectionControlData, RouteError};
use crate::smer::{
    self, compute_demands, reversibilities_from_normalized, Demands, Multigraph, Reversibilities,
    SmerError, VertexId,
};

pub type SignalId = VertexId;

pub const DEFAULT_MIN_GREEN_S: f64 = 22.0;
pub const DEFAULT_MAX_GREEN_S: f64 = 66.0;
pub const DEFAULT_YELLOW_S: f64 = 4.0;
pub const DEFAULT_ALL_RED_S: f64 = 1.0;
pub const DEFAULT_MONITORING_AREA_M: f64 = 100.0;
pub const DEFAULT_SAMPLE_PERIOD_S: f64 = 10.0;
pub const DEFAULT_SAMPLES_PER_WINDOW: u32 = 30;
pub const DEFAULT_PRESENCE_CAP: u32 = 3;
pub const DEFAULT_MIN_CYCLES: u32 = 10;
pub const DEFAULT_MAX_CYCLES: u32 = 30;
pub const DEFAULT_HEARTBEAT_PERIOD_S: f64 = 10.0;
pub const DEFAULT_HEARTBEAT_TTL_S: f64 = 30.0;
pub const DEFAULT_GROUP_SHARE_PERIOD_S: f64 = 300.0;
pub const DEFAULT_GROUP_ADOPT_PERIOD_S: f64 = 600.0;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid agent config: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Smer(#[from] SmerError),
    #[error(transparent)]
    Route(#[from] RouteError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dest {
    Broadcast,
    Signal(SignalId),
    Vehicle(u64),
    Tcc,
}

/// Which named data channel a message travels on. Intersections double as
/// broadcast channels for their co-located signals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Via {
    Road(u32),
    Intersection(u32),
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interest {
    VehicleOn(u32),
    VehicleOut(u32),
    RoadwayPresenceConfirmation,
    RoadwayLeftConfirmation,
    RoadwayPresenceRequest,
    RoadwayVehicleAmount,
    ReversibilityChange,
    EdgeReversal,
    ReversalOfAllEdges,
    ParticipationInTrafficLightCoordination,
    ConfirmationInTrafficLightCoordination,
    TrafficLightCoordination,
    CorridorEdgeReversal,
    CorridorReversibilityChange,
    RoadwaySegmentVehicleAmount,
    GroupMemberVehicleAmount,
    CorridorVehicleAmount,
    TrafficLight,
    ControlDataRequest,
    ControlData,
    VehiclePosition,
    NewTrafficLightSchedule,
}

impl Interest {
    pub fn name(&self) -> String {
        match self {
            Interest::VehicleOn(road) => format!("vehicle_on_{road}"),
            Interest::VehicleOut(road) => format!("vehicle_out_{road}"),
            Interest::RoadwayPresenceConfirmation => "roadway_presence_confirmation".into(),
            Interest::RoadwayLeftConfirmation => "roadway_left_confirmation".into(),
            Interest::RoadwayPresenceRequest => "roadway_presence_request".into(),
            Interest::RoadwayVehicleAmount => "roadway_vehicle_amount".into(),
            Interest::ReversibilityChange => "reversibility_change".into(),
            Interest::EdgeReversal => "edge_reversal".into(),
            Interest::ReversalOfAllEdges => "reversal_of_all_edges".into(),
            Interest::ParticipationInTrafficLightCoordination => {
                "participation_in_traffic_light_coordination".into()
            }
            Interest::ConfirmationInTrafficLightCoordination => {
                "confirmation_in_traffic_light_coordination".into()
            }
            Interest::TrafficLightCoordination => "traffic_light_coordination".into(),
            Interest::CorridorEdgeReversal => "corridor_edge_reversal".into(),
            Interest::CorridorReversibilityChange => "corridor_reversibility_change".into(),
            Interest::RoadwaySegmentVehicleAmount => "roadway_segment_vehicle_amount".into(),
            Interest::GroupMemberVehicleAmount => "group_member_vehicle_amount".into(),
            Interest::CorridorVehicleAmount => "corridor_vehicle_amount".into(),
            Interest::TrafficLight => "traffic_light".into(),
            Interest::ControlDataRequest => "intersection_control_data_request".into(),
            Interest::ControlData => "intersection_control_data".into(),
            Interest::VehiclePosition => "vehicle_position".into(),
            Interest::NewTrafficLightSchedule => "new_traffic_light_schedule".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    VehicleOn { vehicle: u64, pos: (f64, f64) },
    VehicleOut { vehicle: u64, pos: (f64, f64) },
    PresenceConfirmation { vehicle: u64, takeover: bool },
    LeftConfirmation { vehicle: u64 },
    PresenceRequest,
    RoadwayVehicleAmount { signal: SignalId, mean: f64 },
    ReversibilityChange { signal: SignalId, demands: Demands, instant_s: f64 },
    EdgeReversal { signal: SignalId, instant_s: f64 },
    ReversalOfAllEdges { signal: SignalId, instant_s: f64 },
    Participation { signal: SignalId, cycles: u32 },
    ParticipationConfirmation { signal: SignalId },
    TrafficLightCoordination { corridor: u32, controller: SignalId, exec_delay_s: f64, cycles: u32 },
    CorridorEdgeReversal { corridor: u32 },
    CorridorReversibilityChange { corridor: u32, demands: Demands },
    SegmentVehicleAmount { signal: SignalId, corridor: u32, mean: f64 },
    GroupMemberVehicleAmount { group: u32, corridor: u32, mean: f64 },
    CorridorVehicleAmount { corridor: u32, mean: f64 },
    Heartbeat { signal: SignalId, intersection: u32, data: IntersectionControlData, anchor_s: f64 },
    ControlDataRequest { vehicle: u64, intersection: u32 },
    ControlData { intersection: u32, data: IntersectionControlData, anchor_s: f64 },
    VehiclePosition { vehicle: u64, pos: (f64, f64) },
    Schedule { intersection: u32, data: IntersectionControlData, anchor_s: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outgoing {
    pub tech: AccessTech,
    pub interest: Interest,
    pub dest: Dest,
    pub via: Via,
    /// +1 along the road axis, -1 against it, 0 for any direction.
    pub direction: i8,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    Send(Outgoing),
    Indicate { road: u32, indication: Indication },
    /// Scheduled own light transition. Stale generations must be dropped.
    LightAt { at_s: f64, to: Indication, gen: u64 },
    ActivateCorridorNow,
    ParticipationAt { at_s: f64, cycles: u32 },
    NewSchedule { data: IntersectionControlData, anchor_s: f64, schedule: GreenSchedule },
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub length_m: f64,
    pub speed_mps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorridorConfig {
    pub corridor: u32,
    /// Corridor signals downstream of the controller, in travel order.
    pub participants: Vec<(SignalId, Segment)>,
    /// Corridor-level multigraph: one vertex per competing corridor.
    pub multigraph: Multigraph,
    pub reversibilities: Reversibilities,
    pub min_cycles: u32,
    pub max_cycles: u32,
    pub group: u32,
    pub group_members: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    pub signal: SignalId,
    pub intersection: u32,
    pub road: u32,
    pub stop_line: (f64, f64),
    pub min_green_s: f64,
    pub max_green_s: f64,
    pub yellow_s: f64,
    pub all_red_s: f64,
    pub monitoring_area_m: f64,
    pub signals_in_intersection: u32,
    pub sample_period_s: f64,
    pub samples_per_window: u32,
}

impl SignalConfig {
    pub fn new(signal: SignalId, intersection: u32, road: u32, stop_line: (f64, f64)) -> Self {
        SignalConfig {
            signal,
            intersection,
            road,
            stop_line,
            min_green_s: DEFAULT_MIN_GREEN_S,
            max_green_s: DEFAULT_MAX_GREEN_S,
            yellow_s: DEFAULT_YELLOW_S,
            all_red_s: DEFAULT_ALL_RED_S,
            monitoring_area_m: DEFAULT_MONITORING_AREA_M,
            signals_in_intersection: 2,
            sample_period_s: DEFAULT_SAMPLE_PERIOD_S,
            samples_per_window: DEFAULT_SAMPLES_PER_WINDOW,
        }
    }
}

/// Corridor-controller side state held by a leading signal.
#[derive(Clone, Debug)]
struct Leadership {
    cfg: CorridorConfig,
    multigraph: Multigraph,
    reversibilities: Reversibilities,
    segment_means: BTreeMap<SignalId, f64>,
    group_means: BTreeMap<u32, f64>,
    corridor_means: BTreeMap<VertexId, f64>,
    demands: Option<Demands>,
    demand_ready: bool,
}

pub struct SignalAgent {
    pub cfg: SignalConfig,
    multigraph: Multigraph,
    reversibilities: Reversibilities,
    vertex_roads: BTreeMap<VertexId, u32>,
    indication: Indication,
    gen: u64,
    green_committed_s: f64,
    coordination_active: bool,
    coordination_ending: bool,
    cycles_remaining: u32,
    confirmations: u32,
    vehicles: BTreeSet<u64>,
    window_ticks: u32,
    sampled_sum: f64,
    sampled_periods: u64,
    means: BTreeMap<SignalId, f64>,
    demands: Option<Demands>,
    demand_ready: bool,
    leadership: Option<Leadership>,
    corridor_controllers: Vec<(u32, SignalId)>,
    snapshot: IntersectionControlData,
    anchor_s: f64,
    schedule_stale: bool,
}

/// Re-derives every reversibility from `d` and resizes the arcs incident to
/// `v` with all edges toward it, without the own-sink precondition. Used to
/// mirror a remote agent's reversibility change onto a local replica.
fn apply_reversibility(
    g: &mut Multigraph,
    rev: &mut Reversibilities,
    v: VertexId,
    d: &Demands,
) -> Result<(), AgentError> {
    let new_rev = reversibilities_from_normalized(d);
    for u in g.neighbors(v) {
        let total = smer::arc_size(new_rev.get(v), new_rev.get(u))?;
        g.add_arc(v, u, total, total)?;
    }
    *rev = new_rev;
    Ok(())
}

/// Simulates one corridor's activation on a copy of the corridor multigraph
/// and produces the coordination messages for every downstream participant,
/// one batch per surviving round. Offsets accumulate over the whole
/// activation; an offset longer than the yellow sheds the yellow seeded into
/// the accumulator, a shorter one keeps it.
#[allow(clippy::too_many_arguments)]
fn corridor_activation_rounds(
    corridor: u32,
    controller: SignalId,
    participants: &[(SignalId, Segment)],
    mg: &Multigraph,
    rev: &Reversibilities,
    yellow_s: f64,
    min_cycle_s: f64,
    cycles: u32,
) -> Result<Vec<Effect>, AgentError> {
    let v = corridor as VertexId;
    let mut copy = mg.clone();
    let mut effs = Vec::new();
    let mut soma = yellow_s;
    let mut instante = 0.0;
    while copy.is_sink(v, rev) {
        copy.reverse_edges(v, rev.get(v))?;
        for (sig, seg) in participants {
            let off = seg.length_m / seg.speed_mps;
            soma += off;
            let mut exec = soma;
            if off - yellow_s > 0.0 {
                exec -= yellow_s;
            }
            effs.push(Effect::Send(Outgoing {
                tech: AccessTech::Lte,
                interest: Interest::TrafficLightCoordination,
                dest: Dest::Signal(*sig),
                via: Via::None,
                direction: 0,
                payload: Payload::TrafficLightCoordination {
                    corridor,
                    controller,
                    exec_delay_s: exec + instante,
                    cycles: cycles * 2,
                },
            }));
        }
        instante += min_cycle_s * cycles as f64;
        if copy.neighbors(v).is_empty() {
            // no competitor ever takes the slot back; one round covers the
            // whole activation
            break;
        }
    }
    Ok(effs)
}

impl SignalAgent {
    pub fn new(
        cfg: SignalConfig,
        multigraph: Multigraph,
        reversibilities: Reversibilities,
    ) -> Result<SignalAgent, AgentError> {
        if cfg.min_green_s <= 0.0 || cfg.max_green_s < cfg.min_green_s {
            return Err(AgentError::BadConfig("min_green must be positive and <= max_green"));
        }
        if cfg.yellow_s <= 0.0 {
            return Err(AgentError::BadConfig("yellow interval must be positive"));
        }
        if !multigraph.has_vertex(cfg.signal) {
            return Err(AgentError::BadConfig("signal vertex missing from multigraph"));
        }
        let mut vertex_roads: BTreeMap<VertexId, u32> =
            multigraph.vertices().map(|v| (v, v as u32)).collect();
        vertex_roads.insert(cfg.signal, cfg.road);
        let snapshot = IntersectionControlData {
            intersection: cfg.intersection,
            multigraph: multigraph.clone(),
            reversibilities: reversibilities.clone(),
            demands: None,
            coordination_active: false,
            indications: BTreeMap::new(),
            min_green_s: BTreeMap::new(),
            max_green_s: BTreeMap::new(),
            yellow_s: BTreeMap::new(),
            all_red_s: cfg.all_red_s,
            vertex_roads: vertex_roads.clone(),
            sample_period_s: cfg.sample_period_s,
            samples_per_window: cfg.samples_per_window,
            responsible_agent: None,
        };
        let mut agent = SignalAgent {
            cfg,
            multigraph,
            reversibilities,
            vertex_roads,
            indication: Indication::Red,
            gen: 0,
            green_committed_s: 0.0,
            coordination_active: false,
            coordination_ending: false,
            cycles_remaining: 0,
            confirmations: 0,
            vehicles: BTreeSet::new(),
            window_ticks: 0,
            sampled_sum: 0.0,
            sampled_periods: 0,
            means: BTreeMap::new(),
            demands: None,
            demand_ready: false,
            leadership: None,
            corridor_controllers: Vec::new(),
            snapshot,
            anchor_s: 0.0,
            schedule_stale: true,
        };
        agent.refresh_snapshot(0.0)?;
        Ok(agent)
    }

    pub fn set_vertex_roads(&mut self, roads: BTreeMap<VertexId, u32>) {
        self.vertex_roads = roads;
        self.vertex_roads.insert(self.cfg.signal, self.cfg.road);
        let anchor = self.anchor_s;
        let _ = self.refresh_snapshot(anchor);
    }

    pub fn set_corridor_leadership(&mut self, cfg: CorridorConfig) {
        self.leadership = Some(Leadership {
            multigraph: cfg.multigraph.clone(),
            reversibilities: cfg.reversibilities.clone(),
            segment_means: BTreeMap::new(),
            group_means: BTreeMap::new(),
            corridor_means: BTreeMap::new(),
            demands: None,
            demand_ready: false,
            cfg,
        });
    }

    /// Corridors this signal participates in, mapped to their controllers.
    pub fn set_corridor_controllers(&mut self, links: Vec<(u32, SignalId)>) {
        self.corridor_controllers = links;
    }

    pub fn indication(&self) -> Indication {
        self.indication
    }

    pub fn coordination_active(&self) -> bool {
        self.coordination_active
    }

    pub fn cycles_remaining(&self) -> u32 {
        self.cycles_remaining
    }

    pub fn demand_ready(&self) -> bool {
        self.demand_ready
    }

    pub fn demands(&self) -> Option<&Demands> {
        self.demands.as_ref()
    }

    pub fn corridor_demands(&self) -> Option<&Demands> {
        self.leadership.as_ref()?.demands.as_ref()
    }

    pub fn reversibilities(&self) -> &Reversibilities {
        &self.reversibilities
    }

    pub fn road_vehicles(&self) -> &BTreeSet<u64> {
        &self.vehicles
    }

    pub fn is_corridor_controller(&self) -> bool {
        self.leadership.is_some()
    }

    pub fn control_snapshot(&self) -> IntersectionControlData {
        self.snapshot.clone()
    }

    pub fn anchor_s(&self) -> f64 {
        self.anchor_s
    }

    fn refresh_snapshot(&mut self, now: f64) -> Result<(), AgentError> {
        let mut mg = self.multigraph.clone();
        if self.coordination_active {
            // a coordinated green holder has already shed its edges; anchor
            // the replayable orientation at the wave front instead
            mg.orient_all_toward(self.cfg.signal)?;
        }
        let mut indications = BTreeMap::new();
        let mut min_green_s = BTreeMap::new();
        let mut max_green_s = BTreeMap::new();
        let mut yellow_s = BTreeMap::new();
        for (&v, &road) in &self.vertex_roads {
            indications.insert(
                road,
                if v == self.cfg.signal { self.indication } else { Indication::Red },
            );
            min_green_s.insert(v, self.cfg.min_green_s);
            max_green_s.insert(v, self.cfg.max_green_s);
            yellow_s.insert(v, self.cfg.yellow_s);
        }
        self.snapshot = IntersectionControlData {
            intersection: self.cfg.intersection,
            multigraph: mg,
            reversibilities: self.reversibilities.clone(),
            demands: self.demands.clone(),
            coordination_active: self.coordination_active,
            indications,
            min_green_s,
            max_green_s,
            yellow_s,
            all_red_s: self.cfg.all_red_s,
            vertex_roads: self.vertex_roads.clone(),
            sample_period_s: self.cfg.sample_period_s,
            samples_per_window: self.cfg.samples_per_window,
            responsible_agent: None,
        };
        self.anchor_s = now;
        Ok(())
    }

    fn regenerate(&self) -> Result<Effect, AgentError> {
        let schedule = generate_schedule(&self.snapshot, self.anchor_s, 1)?;
        Ok(Effect::NewSchedule {
            data: self.snapshot.clone(),
            anchor_s: self.anchor_s,
            schedule,
        })
    }

    fn send_intersection(&self, tech: AccessTech, interest: Interest, payload: Payload) -> Effect {
        Effect::Send(Outgoing {
            tech,
            interest,
            dest: Dest::Broadcast,
            via: Via::Intersection(self.cfg.intersection),
            direction: 0,
            payload,
        })
    }

    fn send_tcc(&self, interest: Interest, payload: Payload) -> Effect {
        Effect::Send(Outgoing {
            tech: AccessTech::Lte,
            interest,
            dest: Dest::Tcc,
            via: Via::None,
            direction: 0,
            payload,
        })
    }

    pub fn start(&mut self, now: f64) -> Result<Vec<Effect>, AgentError> {
        let mut effs = if self.multigraph.is_sink(self.cfg.signal, &self.reversibilities) {
            self.actuate_green(now)?
        } else {
            self.indication = Indication::Red;
            self.refresh_snapshot(now)?;
            let mut effs = vec![Effect::Indicate {
                road: self.cfg.road,
                indication: Indication::Red,
            }];
            effs.push(self.regenerate()?);
            self.schedule_stale = false;
            effs
        };
        if let Some(lead) = &self.leadership {
            let v = lead.cfg.corridor as VertexId;
            if lead.multigraph.is_sink(v, &lead.reversibilities) {
                effs.push(Effect::ActivateCorridorNow);
            }
        }
        Ok(effs)
    }

    pub fn on_light(&mut self, to: Indication, gen: u64, now: f64) -> Result<Vec<Effect>, AgentError> {
        if gen != self.gen {
            return Ok(Vec::new());
        }
        match to {
            Indication::Green => self.actuate_green(now),
            Indication::Yellow => self.actuate_yellow(now),
            Indication::Red => self.actuate_red(now),
        }
    }

    fn actuate_green(&mut self, now: f64) -> Result<Vec<Effect>, AgentError> {
        let mut effs = Vec::new();
        self.indication = Indication::Green;
        effs.push(Effect::Indicate { road: self.cfg.road, indication: Indication::Green });
        self.green_committed_s = self.cfg.min_green_s;
        self.gen += 1;
        effs.push(Effect::LightAt {
            at_s: now + self.cfg.min_green_s,
            to: Indication::Yellow,
            gen: self.gen,
        });
        if self.coordination_active {
            self.cycles_remaining = self.cycles_remaining.saturating_sub(1);
        } else if self.demand_ready {
            let d = self.demands.clone().expect("demand_ready implies demands");
            let before = self.reversibilities.clone();
            smer::change_reversibility(
                &mut self.multigraph,
                &mut self.reversibilities,
                self.cfg.signal,
                &d,
            )?;
            if self.reversibilities != before {
                let payload = Payload::ReversibilityChange {
                    signal: self.cfg.signal,
                    demands: d,
                    instant_s: now,
                };
                effs.push(self.send_intersection(
                    AccessTech::W11N,
                    Interest::ReversibilityChange,
                    payload.clone(),
                ));
                effs.push(self.send_tcc(Interest::ReversibilityChange, payload));
                self.schedule_stale = true;
            }
            self.demand_ready = false;
        }
        self.refresh_snapshot(now)?;
        if self.schedule_stale {
            effs.push(self.regenerate()?);
            self.schedule_stale = false;
        }
        Ok(effs)
    }

    fn actuate_yellow(&mut self, now: f64) -> Result<Vec<Effect>, AgentError> {
        let mut effs = Vec::new();
        if self.coordination_active {
            self.multigraph.reverse_all_edges(self.cfg.signal)?;
            effs.push(self.send_intersection(
                AccessTech::W11N,
                Interest::ReversalOfAllEdges,
                Payload::ReversalOfAllEdges { signal: self.cfg.signal, instant_s: now },
            ));
            if self.leadership.is_some() {
                if self.cycles_remaining == 0 {
                    let lead = self.leadership.as_mut().unwrap();
                    let v = lead.cfg.corridor as VertexId;
                    lead.multigraph.reverse_edges(v, lead.reversibilities.get(v))?;
                    let corridor = lead.cfg.corridor;
                    let still = lead.multigraph.is_sink(v, &lead.reversibilities);
                    let min_cycles = lead.cfg.min_cycles;
                    effs.push(self.send_tcc_broadcast(
                        Interest::CorridorEdgeReversal,
                        Payload::CorridorEdgeReversal { corridor },
                    ));
                    if still {
                        self.cycles_remaining = min_cycles;
                        // the corridor keeps its slot; refresh the
                        // participants' budgets before they run out
                        let min_cycle = self.cfg.signals_in_intersection as f64
                            * (self.cfg.min_green_s + self.cfg.yellow_s + self.cfg.all_red_s);
                        let lead = self.leadership.as_ref().unwrap();
                        effs.extend(corridor_activation_rounds(
                            corridor,
                            self.cfg.signal,
                            &lead.cfg.participants,
                            &lead.multigraph,
                            &lead.reversibilities,
                            self.cfg.yellow_s,
                            min_cycle,
                            min_cycles,
                        )?);
                    } else {
                        self.coordination_ending = true;
                    }
                }
            } else if self.cycles_remaining == 0 {
                self.coordination_ending = true;
            }
        } else {
            self.multigraph
                .reverse_edges(self.cfg.signal, self.reversibilities.get(self.cfg.signal))?;
        }
        let still_sink = self.multigraph.is_sink(self.cfg.signal, &self.reversibilities);
        let extendable =
            self.green_committed_s + self.cfg.min_green_s <= self.cfg.max_green_s + 1e-9;
        if still_sink && extendable {
            self.green_committed_s += self.cfg.min_green_s;
            self.gen += 1;
            effs.push(Effect::LightAt {
                at_s: now + self.cfg.min_green_s,
                to: Indication::Yellow,
                gen: self.gen,
            });
            effs.push(self.send_intersection(
                AccessTech::W11N,
                Interest::EdgeReversal,
                Payload::EdgeReversal { signal: self.cfg.signal, instant_s: now },
            ));
        } else {
            self.indication = Indication::Yellow;
            effs.push(Effect::Indicate { road: self.cfg.road, indication: Indication::Yellow });
            self.gen += 1;
            effs.push(Effect::LightAt {
                at_s: now + self.cfg.yellow_s,
                to: Indication::Red,
                gen: self.gen,
            });
        }
        Ok(effs)
    }

    fn send_tcc_broadcast(&self, interest: Interest, payload: Payload) -> Effect {
        Effect::Send(Outgoing {
            tech: AccessTech::Lte,
            interest,
            dest: Dest::Broadcast,
            via: Via::None,
            direction: 0,
            payload,
        })
    }

    fn actuate_red(&mut self, now: f64) -> Result<Vec<Effect>, AgentError> {
        let mut effs = Vec::new();
        self.indication = Indication::Red;
        effs.push(Effect::Indicate { road: self.cfg.road, indication: Indication::Red });
        if self.coordination_ending {
            // the closing yellow already announced the reversal of all
            // edges; announcing an ordinary reversal too would advance the
            // neighbors' replicas twice
            self.coordination_active = false;
            self.coordination_ending = false;
            self.schedule_stale = true;
        } else if !self.coordination_active {
            effs.push(self.send_intersection(
                AccessTech::W11N,
                Interest::EdgeReversal,
                Payload::EdgeReversal { signal: self.cfg.signal, instant_s: now },
            ));
            if self.multigraph.is_sink(self.cfg.signal, &self.reversibilities) {
                // the extension cap can leave this vertex the only sink;
                // nobody else will call, so it re-lights itself
                self.gen += 1;
                effs.push(Effect::LightAt {
                    at_s: now + self.cfg.all_red_s,
                    to: Indication::Green,
                    gen: self.gen,
                });
            }
        }
        Ok(effs)
    }

    pub fn on_edge_reversal(
        &mut self,
        from: SignalId,
        instant_s: f64,
        now: f64,
    ) -> Result<Vec<Effect>, AgentError> {
        if from == self.cfg.signal || !self.multigraph.has_vertex(from) {
            return Ok(Vec::new());
        }
        self.multigraph.reverse_edges(from, self.reversibilities.get(from))?;
        let mut effs = Vec::new();
        if self.multigraph.is_sink(self.cfg.signal, &self.reversibilities) {
            self.gen += 1;
            effs.push(Effect::LightAt {
                at_s: (instant_s + self.cfg.all_red_s).max(now),
                to: Indication::Green,
                gen: self.gen,
            });
        }
        Ok(effs)
    }

    pub fn on_reversal_of_all_edges(
        &mut self,
        from: SignalId,
        instant_s: f64,
        now: f64,
    ) -> Result<Vec<Effect>, AgentError> {
        if from == self.cfg.signal || !self.multigraph.has_vertex(from) {
            return Ok(Vec::new());
        }
        self.multigraph.reverse_all_edges(from)?;
        let mut effs = Vec::new();
        if self.multigraph.is_sink(self.cfg.signal, &self.reversibilities) {
            self.gen += 1;
            effs.push(Effect::LightAt {
                at_s: (instant_s + self.cfg.yellow_s + self.cfg.all_red_s).max(now),
                to: Indication::Green,
                gen: self.gen,
            });
        }
        Ok(effs)
    }

    pub fn on_reversibility_change(
        &mut self,
        from: SignalId,
        demands: &Demands,
        instant_s: f64,
    ) -> Result<Vec<Effect>, AgentError> {
        if from == self.cfg.signal || !self.multigraph.has_vertex(from) {
            return Ok(Vec::new());
        }
        apply_reversibility(&mut self.multigraph, &mut self.reversibilities, from, demands)?;
        self.demands = Some(demands.clone());
        // the shared schedule restarts from the changing agent's green
        let keep_anchor = self.anchor_s;
        self.refresh_snapshot(instant_s)?;
        let eff = self.regenerate()?;
        self.anchor_s = keep_anchor;
        Ok(vec![eff])
    }

    pub fn begin_participation(&mut self, cycles: u32, now: f64) -> Result<Vec<Effect>, AgentError> {
        let _ = now;
        self.coordination_active = true;
        self.coordination_ending = false;
        self.cycles_remaining = cycles;
        self.confirmations = 0;
        // pending transitions belong to the isolated regime; the quorum green
        // restarts the cycle
        self.gen += 1;
        self.multigraph.reverse_all_edges(self.cfg.signal)?;
        Ok(vec![self.send_intersection(
            AccessTech::W11N,
            Interest::ParticipationInTrafficLightCoordination,
            Payload::Participation { signal: self.cfg.signal, cycles },
        )])
    }

    /// A repeated coordination order reaching an agent already in the wave.
    /// Restarting the flush would darken the intersection for a yellow plus
    /// all-red, so the order only tops the cycle budget up.
    pub fn extend_cycles(&mut self, cycles: u32) {
        if self.coordination_active && !self.coordination_ending {
            self.cycles_remaining = self.cycles_remaining.max(cycles);
        }
    }

    pub fn on_participation(
        &mut self,
        from: SignalId,
        cycles: u32,
        now: f64,
    ) -> Result<Vec<Effect>, AgentError> {
        if from == self.cfg.signal || !self.multigraph.has_vertex(from) {
            return Ok(Vec::new());
        }
        self.coordination_active = true;
        self.coordination_ending = false;
        self.cycles_remaining = cycles;
        self.multigraph.reverse_all_edges(from)?;
        let mut effs = Vec::new();
        self.gen += 1;
        match self.indication {
            Indication::Green => {
                self.indication = Indication::Yellow;
                effs.push(Effect::Indicate {
                    road: self.cfg.road,
                    indication: Indication::Yellow,
                });
                effs.push(Effect::LightAt {
                    at_s: now + self.cfg.yellow_s,
                    to: Indication::Red,
                    gen: self.gen,
                });
            }
            Indication::Yellow => {
                effs.push(Effect::LightAt {
                    at_s: now + self.cfg.yellow_s,
                    to: Indication::Red,
                    gen: self.gen,
                });
            }
            Indication::Red => {}
        }
        effs.push(Effect::Send(Outgoing {
            tech: AccessTech::W11N,
            interest: Interest::ConfirmationInTrafficLightCoordination,
            dest: Dest::Signal(from),
            via: Via::Intersection(self.cfg.intersection),
            direction: 0,
            payload: Payload::ParticipationConfirmation { signal: self.cfg.signal },
        }));
        Ok(effs)
    }

    pub fn on_participation_confirmation(
        &mut self,
        from: SignalId,
        now: f64,
    ) -> Result<Vec<Effect>, AgentError> {
        if from == self.cfg.signal || !self.multigraph.has_vertex(from) {
            return Ok(Vec::new());
        }
        self.confirmations += 1;
        if self.confirmations as usize != self.multigraph.neighbors(self.cfg.signal).len() {
            return Ok(Vec::new());
        }
        // every neighbor flushed; light the wave front. The green waits one
        // yellow plus all-red so a neighbor still clearing keeps the
        // intersection safe.
        self.schedule_stale = true;
        self.gen += 1;
        Ok(vec![Effect::LightAt {
            at_s: now + self.cfg.yellow_s + self.cfg.all_red_s,
            to: Indication::Green,
            gen: self.gen,
        }])
    }

    pub fn on_traffic_light_coordination(
        &mut self,
        corridor: u32,
        from: SignalId,
        exec_delay_s: f64,
        cycles: u32,
        now: f64,
    ) -> Vec<Effect> {
        let known = self
            .corridor_controllers
            .iter()
            .any(|&(c, ctrl)| c == corridor && ctrl == from);
        if !known {
            return Vec::new();
        }
        vec![Effect::ParticipationAt { at_s: now + exec_delay_s.max(0.0), cycles }]
    }

    pub fn activate_corridor(&mut self, now: f64) -> Result<Vec<Effect>, AgentError> {
        let own = self.cfg.signal;
        let yellow = self.cfg.yellow_s;
        let min_cycle = self.cfg.signals_in_intersection as f64
            * (self.cfg.min_green_s + self.cfg.yellow_s + self.cfg.all_red_s);
        let mut effs = Vec::new();
        let cycles;
        {
            let Some(lead) = self.leadership.as_mut() else {
                return Err(AgentError::BadConfig("not a corridor controller"));
            };
            cycles = lead.cfg.min_cycles;
            if lead.demand_ready {
                if let Some(d) = lead.demands.clone() {
                    let new_rev = reversibilities_from_normalized(&d);
                    if new_rev != lead.reversibilities {
                        let v = lead.cfg.corridor as VertexId;
                        apply_reversibility(&mut lead.multigraph, &mut lead.reversibilities, v, &d)?;
                        effs.push(Effect::Send(Outgoing {
                            tech: AccessTech::Lte,
                            interest: Interest::CorridorReversibilityChange,
                            dest: Dest::Broadcast,
                            via: Via::None,
                            direction: 0,
                            payload: Payload::CorridorReversibilityChange {
                                corridor: lead.cfg.corridor,
                                demands: d,
                            },
                        }));
                    }
                }
                lead.demand_ready = false;
            }
            effs.extend(corridor_activation_rounds(
                lead.cfg.corridor,
                own,
                &lead.cfg.participants,
                &lead.multigraph,
                &lead.reversibilities,
                yellow,
                min_cycle,
                cycles,
            )?);
        }
        effs.extend(self.begin_participation(cycles, now)?);
        Ok(effs)
    }

    pub fn on_corridor_edge_reversal(&mut self, corridor: u32, now: f64) -> Result<Vec<Effect>, AgentError> {
        let _ = now;
        let Some(lead) = self.leadership.as_mut() else {
            return Ok(Vec::new());
        };
        let v = corridor as VertexId;
        let own = lead.cfg.corridor as VertexId;
        if v == own || !lead.multigraph.has_vertex(v) {
            return Ok(Vec::new());
        }
        lead.multigraph.reverse_edges(v, lead.reversibilities.get(v))?;
        if lead.multigraph.is_sink(own, &lead.reversibilities) {
            return Ok(vec![Effect::ActivateCorridorNow]);
        }
        Ok(Vec::new())
    }

    pub fn on_corridor_reversibility_change(
        &mut self,
        corridor: u32,
        demands: &Demands,
    ) -> Result<(), AgentError> {
        let Some(lead) = self.leadership.as_mut() else {
            return Ok(());
        };
        let v = corridor as VertexId;
        if v == lead.cfg.corridor as VertexId || !lead.multigraph.has_vertex(v) {
            return Ok(());
        }
        apply_reversibility(&mut lead.multigraph, &mut lead.reversibilities, v, demands)
    }

    pub fn on_vehicle_on(&mut self, vehicle: u64, pos: (f64, f64), tech: AccessTech) -> Vec<Effect> {
        if dist(pos, self.cfg.stop_line) > self.cfg.monitoring_area_m {
            return Vec::new();
        }
        self.vehicles.insert(vehicle);
        vec![Effect::Send(Outgoing {
            tech,
            interest: Interest::RoadwayPresenceConfirmation,
            dest: Dest::Vehicle(vehicle),
            via: Via::Road(self.cfg.road),
            direction: -1,
            payload: Payload::PresenceConfirmation { vehicle, takeover: false },
        })]
    }

    pub fn on_vehicle_out(&mut self, vehicle: u64, pos: (f64, f64), tech: AccessTech) -> Vec<Effect> {
        let _ = pos;
        if !self.vehicles.remove(&vehicle) {
            return Vec::new();
        }
        vec![Effect::Send(Outgoing {
            tech,
            interest: Interest::RoadwayLeftConfirmation,
            dest: Dest::Vehicle(vehicle),
            via: Via::Road(self.cfg.road),
            direction: -1,
            payload: Payload::LeftConfirmation { vehicle },
        })]
    }

    /// Stores a window mean as if shared by this signal itself. The sharing
    /// step self-stores so the intersection count can complete.
    pub fn store_own_mean(&mut self, mean: f64) {
        self.means.insert(self.cfg.signal, mean);
        self.maybe_compute_demands();
    }

    pub fn on_roadway_vehicle_amount(&mut self, from: SignalId, mean: f64) -> Result<(), AgentError> {
        if from == self.cfg.signal || !self.multigraph.has_vertex(from) {
            return Ok(());
        }
        self.means.insert(from, mean);
        self.maybe_compute_demands();
        Ok(())
    }

    fn maybe_compute_demands(&mut self) {
        if self.means.len() as u32 != self.cfg.signals_in_intersection {
            return;
        }
        if let Ok(d) = compute_demands(&self.means) {
            self.demands = Some(d);
            self.demand_ready = true;
        }
        self.means.clear();
    }

    /// One sampling period: counts the monitored set, closes the sharing
    /// window when due, and re-requests presence from the road. Windows with
    /// no sampled vehicles close at the next period that saw any.
    pub fn demand_tick(&mut self, now: f64) -> Vec<Effect> {
        let _ = now;
        let mut effs = Vec::new();
        self.window_ticks += 1;
        if !self.vehicles.is_empty() {
            self.sampled_sum += self.vehicles.len() as f64;
            self.sampled_periods += 1;
            if self.window_ticks >= self.cfg.samples_per_window {
                let mean = self.sampled_sum / self.sampled_periods as f64;
                let payload = Payload::RoadwayVehicleAmount { signal: self.cfg.signal, mean };
                effs.push(self.send_intersection(
                    AccessTech::W11N,
                    Interest::RoadwayVehicleAmount,
                    payload.clone(),
                ));
                effs.push(self.send_tcc(Interest::RoadwayVehicleAmount, payload));
                for &(corridor, controller) in &self.corridor_controllers {
                    effs.push(Effect::Send(Outgoing {
                        tech: AccessTech::Lte,
                        interest: Interest::RoadwaySegmentVehicleAmount,
                        dest: Dest::Signal(controller),
                        via: Via::None,
                        direction: 0,
                        payload: Payload::SegmentVehicleAmount {
                            signal: self.cfg.signal,
                            corridor,
                            mean,
                        },
                    }));
                }
                self.store_own_mean(mean);
                self.window_ticks = 0;
            }
        }
        effs.push(Effect::Send(Outgoing {
            tech: AccessTech::W11N,
            interest: Interest::RoadwayPresenceRequest,
            dest: Dest::Broadcast,
            via: Via::Road(self.cfg.road),
            direction: -1,
            payload: Payload::PresenceRequest,
        }));
        effs
    }

    pub fn on_roadway_segment_vehicle_amount(&mut self, from: SignalId, corridor: u32, mean: f64) {
        let Some(lead) = self.leadership.as_mut() else {
            return;
        };
        if corridor != lead.cfg.corridor {
            return;
        }
        if !lead.cfg.participants.iter().any(|&(s, _)| s == from) {
            return;
        }
        lead.segment_means.insert(from, mean);
    }

    /// Periodic corridor-level sharing: the highest segment mean represents
    /// the corridor toward its group.
    pub fn group_share_tick(&mut self) -> Vec<Effect> {
        let Some(lead) = self.leadership.as_mut() else {
            return Vec::new();
        };
        let Some(max) = lead.segment_means.values().copied().fold(None, |a: Option<f64>, b| {
            Some(a.map_or(b, |x| x.max(b)))
        }) else {
            return Vec::new();
        };
        lead.group_means.insert(lead.cfg.corridor, max);
        vec![Effect::Send(Outgoing {
            tech: AccessTech::Lte,
            interest: Interest::GroupMemberVehicleAmount,
            dest: Dest::Broadcast,
            via: Via::None,
            direction: 0,
            payload: Payload::GroupMemberVehicleAmount {
                group: lead.cfg.group,
                corridor: lead.cfg.corridor,
                mean: max,
            },
        })]
    }

    pub fn on_group_member_vehicle_amount(&mut self, group: u32, corridor: u32, mean: f64) {
        let Some(lead) = self.leadership.as_mut() else {
            return;
        };
        if group != lead.cfg.group {
            return;
        }
        lead.group_means.insert(corridor, mean);
    }

    /// Periodic group-level harmonization: every corridor in the group
    /// adopts the highest group mean.
    pub fn group_adopt_tick(&mut self) -> Vec<Effect> {
        let Some(lead) = self.leadership.as_mut() else {
            return Vec::new();
        };
        let Some(max) = lead.group_means.values().copied().fold(None, |a: Option<f64>, b| {
            Some(a.map_or(b, |x| x.max(b)))
        }) else {
            return Vec::new();
        };
        for &c in &lead.cfg.group_members {
            if lead.multigraph.has_vertex(c as VertexId) {
                lead.corridor_means.insert(c as VertexId, max);
            }
        }
        vec![Effect::Send(Outgoing {
            tech: AccessTech::Lte,
            interest: Interest::CorridorVehicleAmount,
            dest: Dest::Broadcast,
            via: Via::None,
            direction: 0,
            payload: Payload::CorridorVehicleAmount { corridor: lead.cfg.corridor, mean: max },
        })]
    }

    pub fn on_corridor_vehicle_amount(&mut self, corridor: u32, mean: f64) {
        let Some(lead) = self.leadership.as_mut() else {
            return;
        };
        let v = corridor as VertexId;
        if !lead.multigraph.has_vertex(v) {
            return;
        }
        lead.corridor_means.insert(v, mean);
    }

    /// Periodic corridor demand update from the collected corridor means.
    pub fn corridor_demand_tick(&mut self) -> Result<(), AgentError> {
        let Some(lead) = self.leadership.as_mut() else {
            return Ok(());
        };
        let vertices: Vec<VertexId> = lead.multigraph.vertices().collect();
        if !vertices.iter().all(|v| lead.corridor_means.contains_key(v)) {
            return Ok(());
        }
        lead.demands = Some(compute_demands(&lead.corridor_means)?);
        lead.demand_ready = true;
        Ok(())
    }

    pub fn heartbeat(&mut self, now: f64) -> Vec<Effect> {
        let _ = now;
        vec![self.send_tcc(
            Interest::TrafficLight,
            Payload::Heartbeat {
                signal: self.cfg.signal,
                intersection: self.cfg.intersection,
                data: self.snapshot.clone(),
                anchor_s: self.anchor_s,
            },
        )]
    }
}

/// Schedule-driven indication player: replays an intersection from its
/// control data and anchor, extending the horizon on demand.
#[derive(Clone, Debug)]
pub struct VirtualSignal {
    pub data: IntersectionControlData,
    pub anchor_s: f64,
    schedule: GreenSchedule,
    multiplier: u32,
}

impl VirtualSignal {
    pub fn new(data: IntersectionControlData, anchor_s: f64) -> Result<VirtualSignal, AgentError> {
        let schedule = generate_schedule(&data, anchor_s, 1)?;
        Ok(VirtualSignal { data, anchor_s, schedule, multiplier: 1 })
    }

    pub fn schedule(&self) -> &GreenSchedule {
        &self.schedule
    }

    pub fn indication_at(&mut self, road: u32, t: f64) -> Result<Indication, AgentError> {
        while t >= self.anchor_s + self.schedule.window_s {
            self.multiplier += 1;
            self.schedule = generate_schedule(&self.data, self.anchor_s, self.multiplier)?;
        }
        let Some(v) = self
            .data
            .vertex_roads
            .iter()
            .find_map(|(&v, &r)| (r == road).then_some(v))
        else {
            return Ok(Indication::Red);
        };
        let yellow = self.data.yellow_s.get(&v).copied().unwrap_or(DEFAULT_YELLOW_S);
        for (_, s, e) in self.schedule.windows_for(road) {
            if t >= s && t < e {
                return Ok(if t < e - yellow { Indication::Green } else { Indication::Yellow });
            }
        }
        Ok(Indication::Red)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleAgentConfig {
    pub presence_cap: u32,
    pub out_cap: u32,
}

impl Default for VehicleAgentConfig {
    fn default() -> Self {
        VehicleAgentConfig { presence_cap: DEFAULT_PRESENCE_CAP, out_cap: DEFAULT_PRESENCE_CAP }
    }
}

pub struct VehicleAgent {
    pub id: u64,
    pub cfg: VehicleAgentConfig,
    pub road: u32,
    pub prev_road: Option<u32>,
    pub intersection: Option<u32>,
    pub presence_confirmed: bool,
    presence_attempts: u32,
    out_confirmed: bool,
    out_attempts: u32,
    pub leader: bool,
    pub positions: BTreeMap<u64, (f64, f64)>,
    pub control: Option<VirtualSignal>,
    pub control_active: bool,
    pub route: Vec<u32>,
    pub route_calculated: bool,
    pub route_attempts: u32,
}

impl VehicleAgent {
    pub fn new(id: u64, road: u32) -> VehicleAgent {
        VehicleAgent {
            id,
            cfg: VehicleAgentConfig::default(),
            road,
            prev_road: None,
            intersection: None,
            presence_confirmed: false,
            presence_attempts: 0,
            out_confirmed: true,
            out_attempts: 0,
            leader: false,
            positions: BTreeMap::new(),
            control: None,
            control_active: false,
            route: Vec::new(),
            route_calculated: false,
            route_attempts: 0,
        }
    }

    pub fn presence_attempts(&self) -> u32 {
        self.presence_attempts
    }

    fn control_request(&self) -> Effect {
        Effect::Send(Outgoing {
            tech: AccessTech::Lte,
            interest: Interest::ControlDataRequest,
            dest: Dest::Tcc,
            via: Via::None,
            direction: 0,
            payload: Payload::ControlDataRequest {
                vehicle: self.id,
                intersection: self.intersection.unwrap_or(0),
            },
        })
    }

    /// Periodic presence notification on a signalized road. Exhausting the
    /// attempts without a confirmation starts vehicle-run control.
    pub fn presence_tick(
        &mut self,
        signalized: bool,
        in_area: bool,
        pos: (f64, f64),
        now: f64,
    ) -> Vec<Effect> {
        let _ = now;
        if !signalized || !in_area || self.presence_confirmed {
            return Vec::new();
        }
        if self.presence_attempts < self.cfg.presence_cap {
            self.presence_attempts += 1;
            let (tech, via) = if self.control_active {
                (AccessTech::Lte, Via::None)
            } else {
                (AccessTech::W11N, Via::Road(self.road))
            };
            return vec![Effect::Send(Outgoing {
                tech,
                interest: Interest::VehicleOn(self.road),
                dest: Dest::Broadcast,
                via,
                direction: 1,
                payload: Payload::VehicleOn { vehicle: self.id, pos },
            })];
        }
        if !self.control_active {
            return vec![self.control_request()];
        }
        Vec::new()
    }

    pub fn on_presence_confirmation(&mut self, tech: AccessTech, takeover: bool) -> Vec<Effect> {
        self.presence_attempts = 0;
        match tech {
            AccessTech::W11N | AccessTech::W11P => {
                if takeover {
                    self.presence_confirmed = false;
                    vec![self.control_request()]
                } else {
                    self.presence_confirmed = true;
                    Vec::new()
                }
            }
            // the virtual signal answered; keep notifying it
            AccessTech::Lte => {
                self.presence_confirmed = false;
                Vec::new()
            }
        }
    }

    pub fn change_road(&mut self, new_road: u32, pos: (f64, f64)) -> Vec<Effect> {
        let prev = self.road;
        self.prev_road = Some(prev);
        self.road = new_road;
        self.presence_confirmed = false;
        self.presence_attempts = 0;
        self.leader = false;
        self.positions.clear();
        self.control = None;
        self.control_active = false;
        self.out_confirmed = false;
        self.out_attempts = 1;
        vec![Effect::Send(Outgoing {
            tech: AccessTech::W11N,
            interest: Interest::VehicleOut(prev),
            dest: Dest::Broadcast,
            via: Via::Road(new_road),
            direction: 1,
            payload: Payload::VehicleOut { vehicle: self.id, pos },
        })]
    }

    pub fn out_tick(&mut self, pos: (f64, f64)) -> Vec<Effect> {
        let Some(prev) = self.prev_road else {
            return Vec::new();
        };
        if self.out_confirmed || self.out_attempts >= self.cfg.out_cap {
            return Vec::new();
        }
        self.out_attempts += 1;
        let (tech, via) = if self.control_active {
            (AccessTech::Lte, Via::None)
        } else {
            (AccessTech::W11N, Via::Road(self.road))
        };
        vec![Effect::Send(Outgoing {
            tech,
            interest: Interest::VehicleOut(prev),
            dest: Dest::Broadcast,
            via,
            direction: 1,
            payload: Payload::VehicleOut { vehicle: self.id, pos },
        })]
    }

    pub fn on_left_confirmation(&mut self) {
        self.out_confirmed = true;
    }

    /// Position beacon while a non-green virtual signal runs: feeds the
    /// leader election.
    pub fn position_tick(&mut self, pos: (f64, f64), t: f64) -> Vec<Effect> {
        let Some(ctrl) = self.control.as_mut() else {
            return Vec::new();
        };
        let road = self.road;
        match ctrl.indication_at(road, t) {
            Ok(Indication::Green) => Vec::new(),
            _ => vec![Effect::Send(Outgoing {
                tech: AccessTech::W11N,
                interest: Interest::VehiclePosition,
                dest: Dest::Broadcast,
                via: Via::Road(road),
                direction: 0,
                payload: Payload::VehiclePosition { vehicle: self.id, pos },
            })],
        }
    }

    /// Leader election by distance to the stop line; ties keep the local
    /// claim. Returns the updated claim.
    pub fn on_vehicle_position(
        &mut self,
        from: u64,
        pos: (f64, f64),
        own_pos: (f64, f64),
        stop_line: (f64, f64),
    ) -> bool {
        self.positions.insert(from, pos);
        let own = dist(own_pos, stop_line);
        let beaten = self.positions.values().any(|&p| dist(p, stop_line) < own);
        self.leader = !beaten;
        self.leader
    }

    pub fn on_control_data(
        &mut self,
        intersection: u32,
        data: IntersectionControlData,
        anchor_s: f64,
    ) -> Result<(), AgentError> {
        if self.intersection.is_some() && self.intersection != Some(intersection) {
            return Ok(());
        }
        if self.control.is_none() {
            self.control = Some(VirtualSignal::new(data, anchor_s)?);
        }
        self.control_active = true;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TccIntersectionState {
    pub data: IntersectionControlData,
    pub anchor_s: f64,
    pub last_heartbeat_s: f64,
    pub dark: bool,
    pub responsible: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TccCorridorState {
    pub cfg: CorridorConfig,
    pub leader_intersection: u32,
    pub leader_signal: SignalId,
    pub taken_over: bool,
}

/// Traffic control center: replicates intersection control data from
/// heartbeats, serves it to vehicles, and assumes corridor control for dark
/// leaders.
pub struct TccAgent {
    pub heartbeat_ttl_s: f64,
    pub intersections: BTreeMap<u32, TccIntersectionState>,
    pub corridors: BTreeMap<u32, TccCorridorState>,
}

impl TccAgent {
    pub fn new(heartbeat_ttl_s: f64) -> TccAgent {
        TccAgent { heartbeat_ttl_s, intersections: BTreeMap::new(), corridors: BTreeMap::new() }
    }

    pub fn provision_intersection(&mut self, data: IntersectionControlData, anchor_s: f64) {
        self.intersections.insert(
            data.intersection,
            TccIntersectionState {
                anchor_s,
                last_heartbeat_s: anchor_s,
                dark: false,
                responsible: None,
                data,
            },
        );
    }

    pub fn provision_corridor(
        &mut self,
        cfg: CorridorConfig,
        leader_intersection: u32,
        leader_signal: SignalId,
    ) {
        self.corridors.insert(
            cfg.corridor,
            TccCorridorState { cfg, leader_intersection, leader_signal, taken_over: false },
        );
    }

    pub fn on_heartbeat(
        &mut self,
        intersection: u32,
        data: IntersectionControlData,
        anchor_s: f64,
        now: f64,
    ) {
        let st = self
            .intersections
            .entry(intersection)
            .or_insert_with(|| TccIntersectionState {
                data: data.clone(),
                anchor_s,
                last_heartbeat_s: now,
                dark: false,
                responsible: None,
            });
        st.data = data;
        st.anchor_s = anchor_s;
        st.last_heartbeat_s = now;
        if st.dark {
            st.dark = false;
            st.responsible = None;
            for c in self.corridors.values_mut() {
                if c.leader_intersection == intersection {
                    c.taken_over = false;
                }
            }
        }
    }

    /// Expires heartbeats and assumes control of corridors whose leader has
    /// gone dark while their corridor vertex holds the turn.
    pub fn liveness_tick(&mut self, now: f64) -> Vec<Effect> {
        for st in self.intersections.values_mut() {
            if now - st.last_heartbeat_s > self.heartbeat_ttl_s {
                st.dark = true;
            }
        }
        let mut effs = Vec::new();
        for c in self.corridors.values_mut() {
            let Some(leader) = self.intersections.get(&c.leader_intersection) else {
                continue;
            };
            if !leader.dark || c.taken_over {
                continue;
            }
            let v = c.cfg.corridor as VertexId;
            if !c.cfg.multigraph.is_sink(v, &c.cfg.reversibilities) {
                continue;
            }
            let yellow = leader
                .data
                .yellow_s
                .get(&c.leader_signal)
                .copied()
                .unwrap_or(DEFAULT_YELLOW_S);
            let min_green = leader
                .data
                .min_green_s
                .get(&c.leader_signal)
                .copied()
                .unwrap_or(DEFAULT_MIN_GREEN_S);
            let min_cycle = leader.data.multigraph.vertex_count() as f64
                * (min_green + yellow + leader.data.all_red_s);
            if let Ok(batch) = corridor_activation_rounds(
                c.cfg.corridor,
                c.leader_signal,
                &c.cfg.participants,
                &c.cfg.multigraph,
                &c.cfg.reversibilities,
                yellow,
                min_cycle,
                c.cfg.min_cycles,
            ) {
                effs.extend(batch);
                c.taken_over = true;
            }
        }
        effs
    }

    pub fn on_control_data_request(
        &mut self,
        vehicle: u64,
        intersection: u32,
        now: f64,
    ) -> Vec<Effect> {
        let _ = now;
        let Some(st) = self.intersections.get_mut(&intersection) else {
            return Vec::new();
        };
        match st.responsible {
            Some(resp) if resp != vehicle => vec![Effect::Send(Outgoing {
                tech: AccessTech::Lte,
                interest: Interest::ControlDataRequest,
                dest: Dest::Vehicle(resp),
                via: Via::None,
                direction: 0,
                payload: Payload::ControlDataRequest { vehicle, intersection },
            })],
            _ => {
                st.responsible = Some(vehicle);
                vec![Effect::Send(Outgoing {
                    tech: AccessTech::Lte,
                    interest: Interest::ControlData,
                    dest: Dest::Vehicle(vehicle),
                    via: Via::None,
                    direction: 0,
                    payload: Payload::ControlData {
                        intersection,
                        data: st.data.clone(),
                        anchor_s: st.anchor_s,
                    },
                })]
            }
        }
    }

    pub fn on_control_data(
        &mut self,
        intersection: u32,
        data: IntersectionControlData,
        anchor_s: f64,
        responsible: Option<u64>,
    ) {
        if let Some(st) = self.intersections.get_mut(&intersection) {
            st.data = data;
            st.anchor_s = anchor_s;
            if responsible.is_some() {
                st.responsible = responsible;
            }
        }
    }

    pub fn on_corridor_edge_reversal(&mut self, corridor: u32) {
        for c in self.corridors.values_mut() {
            let v = corridor as VertexId;
            if c.cfg.multigraph.has_vertex(v) {
                let r = c.cfg.reversibilities.get(v);
                let _ = c.cfg.multigraph.reverse_edges(v, r);
            }
        }
    }

    pub fn on_corridor_reversibility_change(&mut self, corridor: u32, demands: &Demands) {
        for c in self.corridors.values_mut() {
            let v = corridor as VertexId;
            if c.cfg.multigraph.has_vertex(v) {
                let _ = apply_reversibility(
                    &mut c.cfg.multigraph,
                    &mut c.cfg.reversibilities,
                    v,
                    demands,
                );
            }
        }
    }
}
