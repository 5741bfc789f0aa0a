//! Discrete-event core: simulation clock, event queue and the radio
//! reachability model shared by every node type.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::ops::{Add, AddAssign, Sub};

use serde::{Deserialize, Serialize};

pub type NodeId = usize;

/// Simulation instant, microsecond resolution.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Time(u64);

impl Time {
    pub const ZERO: Time = Time(0);

    pub const fn from_micros(us: u64) -> Time {
        Time(us)
    }

    pub const fn from_millis(ms: u64) -> Time {
        Time(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Time {
        Time(s * 1_000_000)
    }

    pub fn from_secs_f64(s: f64) -> Time {
        Time((s * 1e6).round().max(0.0) as u64)
    }

    pub fn micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: Time) -> Time {
        Time(self.0.saturating_sub(other.0))
    }
}

impl Add for Time {
    type Output = Time;
    fn add(self, rhs: Time) -> Time {
        Time(self.0 + rhs.0)
    }
}

impl AddAssign for Time {
    fn add_assign(&mut self, rhs: Time) {
        self.0 += rhs.0;
    }
}

impl Sub for Time {
    type Output = Time;
    fn sub(self, rhs: Time) -> Time {
        Time(self.0 - rhs.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventId(u64);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KernelError {
    #[error("cannot schedule at {at:?}, clock is already at {now:?}")]
    SchedulePast { at: Time, now: Time },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunStats {
    pub executed: u64,
}

/// Event queue with a total order: time first, insertion order second.
/// Cancellation leaves a tombstone in the heap; the payload map is the
/// source of truth for liveness.
pub struct Scheduler<E> {
    now: Time,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(Time, u64)>>,
    payloads: HashMap<u64, E>,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: Time::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            payloads: HashMap::new(),
        }
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.payloads.len()
    }

    pub fn schedule(&mut self, at: Time, event: E) -> Result<EventId, KernelError> {
        if at < self.now {
            return Err(KernelError::SchedulePast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.payloads.insert(seq, event);
        Ok(EventId(seq))
    }

    pub fn schedule_in(&mut self, delay: Time, event: E) -> EventId {
        let at = self.now + delay;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq)));
        self.payloads.insert(seq, event);
        EventId(seq)
    }

    /// Returns true when the event was still pending.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.payloads.remove(&id.0).is_some()
    }

    fn pop_next(&mut self, until: Time) -> Option<(Time, E)> {
        while let Some(&Reverse((t, seq))) = self.heap.peek() {
            if t > until {
                return None;
            }
            self.heap.pop();
            if let Some(ev) = self.payloads.remove(&seq) {
                self.now = t;
                return Some((t, ev));
            }
        }
        None
    }

    /// Drives the queue up to and including `until`. The handler may
    /// schedule and cancel freely; the clock ends at `until` even when the
    /// queue drains early.
    pub fn run_until<F>(&mut self, until: Time, mut handler: F) -> RunStats
    where
        F: FnMut(&mut Scheduler<E>, Time, E),
    {
        let mut stats = RunStats::default();
        while let Some((t, ev)) = self.pop_next(until) {
            handler(self, t, ev);
            stats.executed += 1;
        }
        if self.now < until {
            self.now = until;
        }
        stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessTech {
    W11N,
    W11P,
    Lte,
}

impl AccessTech {
    pub const ALL: [AccessTech; 3] = [AccessTech::W11N, AccessTech::W11P, AccessTech::Lte];

    fn bit(self) -> u8 {
        match self {
            AccessTech::W11N => 1,
            AccessTech::W11P => 2,
            AccessTech::Lte => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub range_m: f64,
    pub latency: Time,
    pub loss: f64,
}

impl ChannelParams {
    pub fn new(range_m: f64, latency: Time, loss: f64) -> Self {
        ChannelParams {
            range_m,
            latency,
            loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub w11n: ChannelParams,
    pub w11p: ChannelParams,
    pub lte: ChannelParams,
    /// Cellular traffic goes through this node; peer to peer exchanges cost
    /// two legs of latency.
    pub lte_relay: Option<NodeId>,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            w11n: ChannelParams::new(200.0, Time::from_millis(10), 0.0),
            w11p: ChannelParams::new(500.0, Time::from_millis(5), 0.0),
            lte: ChannelParams::new(5000.0, Time::from_millis(45), 0.0),
            lte_relay: None,
        }
    }
}

impl ChannelModel {
    pub fn params(&self, tech: AccessTech) -> &ChannelParams {
        match tech {
            AccessTech::W11N => &self.w11n,
            AccessTech::W11P => &self.w11p,
            AccessTech::Lte => &self.lte,
        }
    }
}

const CELL_M: f64 = 512.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub node: NodeId,
    pub legs: u8,
}

#[derive(Debug, Clone, Copy)]
struct RadioNode {
    pos: (f64, f64),
    techs: u8,
    active: bool,
}

/// Positions plus per-technology membership; answers "who hears a
/// transmission from this node right now". Results are sorted so downstream
/// iteration order never depends on hashing.
pub struct Radio {
    model: ChannelModel,
    nodes: Vec<RadioNode>,
    grid: HashMap<(i64, i64), Vec<NodeId>>,
}

fn cell_of(pos: (f64, f64)) -> (i64, i64) {
    (
        (pos.0 / CELL_M).floor() as i64,
        (pos.1 / CELL_M).floor() as i64,
    )
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

impl Radio {
    pub fn new(model: ChannelModel) -> Self {
        Radio {
            model,
            nodes: Vec::new(),
            grid: HashMap::new(),
        }
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    /// Nodes must be added with consecutive ids starting at 0.
    pub fn add_node(&mut self, id: NodeId, pos: (f64, f64), techs: &[AccessTech]) {
        assert_eq!(id, self.nodes.len(), "radio node ids must be consecutive");
        let mut mask = 0;
        for t in techs {
            mask |= t.bit();
        }
        self.nodes.push(RadioNode {
            pos,
            techs: mask,
            active: true,
        });
        self.grid.entry(cell_of(pos)).or_default().push(id);
    }

    pub fn set_pos(&mut self, id: NodeId, pos: (f64, f64)) {
        let old = self.nodes[id].pos;
        let (oc, nc) = (cell_of(old), cell_of(pos));
        self.nodes[id].pos = pos;
        if oc != nc {
            if let Some(v) = self.grid.get_mut(&oc) {
                if let Some(i) = v.iter().position(|&n| n == id) {
                    v.swap_remove(i);
                }
            }
            self.grid.entry(nc).or_default().push(id);
        }
    }

    pub fn pos(&self, id: NodeId) -> (f64, f64) {
        self.nodes[id].pos
    }

    pub fn set_active(&mut self, id: NodeId, active: bool) {
        self.nodes[id].active = active;
    }

    pub fn supports(&self, id: NodeId, tech: AccessTech) -> bool {
        self.nodes[id].techs & tech.bit() != 0
    }

    fn hears(&self, id: NodeId, tech: AccessTech, from: (f64, f64), range: f64) -> bool {
        let n = &self.nodes[id];
        n.active && n.techs & tech.bit() != 0 && dist(n.pos, from) <= range
    }

    fn in_range(&self, tech: AccessTech, from: (f64, f64), range: f64, skip: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let r = (range / CELL_M).ceil() as i64;
        let c = cell_of(from);
        for cx in (c.0 - r)..=(c.0 + r) {
            for cy in (c.1 - r)..=(c.1 + r) {
                if let Some(ids) = self.grid.get(&(cx, cy)) {
                    for &id in ids {
                        if id != skip && self.hears(id, tech, from, range) {
                            out.push(id);
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Receiver set for a broadcast from `sender` on `tech`, excluding the
    /// sender itself. `legs` counts channel traversals for latency purposes:
    /// always 1 except LTE peer traffic, which transits the relay (1 leg to
    /// the relay itself, 2 to everyone behind it). The relay is transparent;
    /// no protocol-level forwarding happens on LTE.
    pub fn deliveries(&self, sender: NodeId, tech: AccessTech) -> Vec<Delivery> {
        if !self.supports(sender, tech) {
            return Vec::new();
        }
        let from = self.nodes[sender].pos;
        let range = self.model.params(tech).range_m;
        let one_leg = |ids: Vec<NodeId>| {
            ids.into_iter()
                .map(|node| Delivery { node, legs: 1 })
                .collect()
        };
        if tech == AccessTech::Lte {
            if let Some(relay) = self.model.lte_relay {
                if sender == relay {
                    return one_leg(self.in_range(tech, from, range, sender));
                }
                let rp = self.nodes[relay].pos;
                if !self.nodes[relay].active || dist(from, rp) > range {
                    return Vec::new();
                }
                let mut out: Vec<Delivery> = self
                    .in_range(tech, rp, range, relay)
                    .into_iter()
                    .filter(|&n| n != sender)
                    .map(|node| Delivery { node, legs: 2 })
                    .collect();
                out.push(Delivery {
                    node: relay,
                    legs: 1,
                });
                out.sort_unstable_by_key(|d| d.node);
                return out;
            }
        }
        one_leg(self.in_range(tech, from, range, sender))
    }
}
