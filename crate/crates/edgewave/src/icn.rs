//! Interest-centric network layer: active prefixes, interest registries,
//! per-technology node state and the receive-and-forward protocol with
//! geographic, direction and road scoping.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{AccessTech, ChannelModel, Time};

pub const NULL_ID: u32 = u32::MAX;
pub const WIRE_VERSION: u8 = 1;
pub const DELAY_EPSILON_M: f64 = 1.0;
pub const METERS_PER_DEGREE: f64 = 111_320.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum IcnError {
    #[error("prefix needs n >= 1, m >= 1 and n*m <= 31, got n={n}, m={m}")]
    BadPrefixShape { n: usize, m: u32 },
    #[error("prefix field {value} does not fit in {m} bits")]
    FieldTooWide { value: u32, m: u32 },
    #[error("prefix lengths differ: {a} vs {b}")]
    PrefixLengthMismatch { a: usize, b: usize },
    #[error("packed prefix {bits:#x} does not fit {n} fields of {m} bits")]
    BadPackedPrefix { bits: u32, n: usize, m: u32 },
    #[error("position is off the road axis")]
    OffRoad,
    #[error("direction must be -1, 0 or +1, got {0}")]
    BadDirection(i8),
    #[error("malformed header: {0}")]
    MalformedHeader(&'static str),
}

pub fn fnv1a_32(s: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in s.as_bytes() {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// String-to-id table for interests and road names. Ids are content hashes
/// so independently built nodes agree on them without coordination.
#[derive(Debug, Default, Clone)]
pub struct InternTable {
    names: HashMap<u32, String>,
}

impl InternTable {
    pub fn intern(&mut self, name: &str) -> u32 {
        let id = fnv1a_32(name);
        assert_ne!(id, NULL_ID, "interned id collides with the null sentinel");
        match self.names.entry(id) {
            std::collections::hash_map::Entry::Occupied(e) => {
                assert_eq!(e.get(), name, "interned id collision");
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(name.to_string());
            }
        }
        id
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(&id).map(|s| s.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActivePrefix {
    fields: Vec<u32>,
    m: u32,
}

fn check_shape(n: usize, m: u32) -> Result<(), IcnError> {
    if n == 0 || m == 0 || n as u32 * m > 31 {
        return Err(IcnError::BadPrefixShape { n, m });
    }
    Ok(())
}

impl ActivePrefix {
    pub fn generate(rng: &mut impl Rng, n: usize, m: u32) -> Result<ActivePrefix, IcnError> {
        check_shape(n, m)?;
        let fields = (0..n).map(|_| rng.random_range(0..1u32 << m)).collect();
        Ok(ActivePrefix { fields, m })
    }

    pub fn from_fields(fields: Vec<u32>, m: u32) -> Result<ActivePrefix, IcnError> {
        check_shape(fields.len(), m)?;
        for &value in &fields {
            if value >> m != 0 {
                return Err(IcnError::FieldTooWide { value, m });
            }
        }
        Ok(ActivePrefix { fields, m })
    }

    pub fn fields(&self) -> &[u32] {
        &self.fields
    }

    pub fn bits_per_field(&self) -> u32 {
        self.m
    }

    pub fn pack(&self) -> u32 {
        self.fields
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &f)| acc | f << (i as u32 * self.m))
    }

    pub fn unpack(bits: u32, n: usize, m: u32) -> Result<ActivePrefix, IcnError> {
        check_shape(n, m)?;
        if bits >> (n as u32 * m) != 0 {
            return Err(IcnError::BadPackedPrefix { bits, n, m });
        }
        let mask = (1u32 << m) - 1;
        let fields = (0..n as u32).map(|i| (bits >> (i * m)) & mask).collect();
        Ok(ActivePrefix { fields, m })
    }
}

/// True iff at least one field pair is positionally equal.
pub fn prefix_match(a: &ActivePrefix, b: &ActivePrefix) -> Result<bool, IcnError> {
    if a.fields.len() != b.fields.len() {
        return Err(IcnError::PrefixLengthMismatch {
            a: a.fields.len(),
            b: b.fields.len(),
        });
    }
    Ok(a.fields.iter().zip(&b.fields).any(|(x, y)| x == y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Backward,
    Any,
    Forward,
}

impl Direction {
    pub const fn to_i8(self) -> i8 {
        match self {
            Direction::Backward => -1,
            Direction::Any => 0,
            Direction::Forward => 1,
        }
    }

    pub fn from_i8(v: i8) -> Result<Direction, IcnError> {
        match v {
            -1 => Ok(Direction::Backward),
            0 => Ok(Direction::Any),
            1 => Ok(Direction::Forward),
            other => Err(IcnError::BadDirection(other)),
        }
    }
}

/// Header position, fixed point at 1e-7 degrees per step. The simulator's
/// planar meters are mapped through the same encoding so traces carry what
/// a GPS-equipped node would.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WirePosition {
    pub lon: i32,
    pub lat: i32,
    pub alt: i32,
}

impl WirePosition {
    pub fn from_planar(x_m: f64, y_m: f64) -> WirePosition {
        let scale = 1e7 / METERS_PER_DEGREE;
        WirePosition {
            lon: (x_m * scale).round() as i32,
            lat: (y_m * scale).round() as i32,
            alt: 0,
        }
    }

    pub fn to_planar(self) -> (f64, f64) {
        let scale = METERS_PER_DEGREE / 1e7;
        (self.lon as f64 * scale, self.lat as f64 * scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Rvep,
    Hrvep,
}

const fn tech_code(t: AccessTech) -> u8 {
    match t {
        AccessTech::W11N => 0,
        AccessTech::W11P => 1,
        AccessTech::Lte => 2,
    }
}

fn tech_from_code(c: u8) -> Result<AccessTech, IcnError> {
    match c {
        0 => Ok(AccessTech::W11N),
        1 => Ok(AccessTech::W11P),
        2 => Ok(AccessTech::Lte),
        _ => Err(IcnError::MalformedHeader("unknown access tech")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageHeader {
    pub version: u8,
    pub hop_count: u8,
    pub header_size: u8,
    pub message_id: u32,
    pub dest_prefix: Option<ActivePrefix>,
    pub source_prefix: ActivePrefix,
    pub interest: u32,
    pub position: WirePosition,
    pub direction: Direction,
    pub road_id: Option<u32>,
    pub access_tech: Option<AccessTech>,
}

impl MessageHeader {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.header_size as usize);
        out.push(self.version);
        out.push(self.hop_count);
        out.push(self.header_size);
        out.extend_from_slice(&self.message_id.to_be_bytes());
        let dest = self.dest_prefix.as_ref().map_or(NULL_ID, |p| p.pack());
        out.extend_from_slice(&dest.to_be_bytes());
        out.extend_from_slice(&self.source_prefix.pack().to_be_bytes());
        out.extend_from_slice(&self.interest.to_be_bytes());
        out.extend_from_slice(&self.position.lon.to_be_bytes());
        out.extend_from_slice(&self.position.lat.to_be_bytes());
        out.extend_from_slice(&self.position.alt.to_be_bytes());
        out.push(self.direction.to_i8() as u8);
        out.extend_from_slice(&self.road_id.unwrap_or(NULL_ID).to_be_bytes());
        if let Some(t) = self.access_tech {
            out.push(tech_code(t));
        }
        out
    }

    pub fn decode(bytes: &[u8], n: usize, m: u32) -> Result<MessageHeader, IcnError> {
        if bytes.len() != 36 && bytes.len() != 37 {
            return Err(IcnError::MalformedHeader("bad length"));
        }
        if bytes[2] as usize != bytes.len() {
            return Err(IcnError::MalformedHeader("size field mismatch"));
        }
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let i32_at = |i: usize| i32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let dest_bits = u32_at(7);
        let dest_prefix = if dest_bits == NULL_ID {
            None
        } else {
            Some(ActivePrefix::unpack(dest_bits, n, m)?)
        };
        let road_bits = u32_at(32);
        Ok(MessageHeader {
            version: bytes[0],
            hop_count: bytes[1],
            header_size: bytes[2],
            message_id: u32_at(3),
            dest_prefix,
            source_prefix: ActivePrefix::unpack(u32_at(11), n, m)?,
            interest: u32_at(15),
            position: WirePosition {
                lon: i32_at(19),
                lat: i32_at(23),
                alt: i32_at(27),
            },
            direction: Direction::from_i8(bytes[31] as i8)?,
            road_id: (road_bits != NULL_ID).then_some(road_bits),
            access_tech: if bytes.len() == 37 {
                Some(tech_from_code(bytes[36])?)
            } else {
                None
            },
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct InterestEntry {
    max_hops: u8,
    handler_tag: u32,
    uses: u64,
}

/// Per-technology interest table. The full store always resolves; the hot
/// set reports which entries most-frequent use would retain.
pub struct InterestRegistry {
    default_max_hops: u8,
    hot_capacity: usize,
    per: [HashMap<u32, InterestEntry>; 3],
}

const fn idx(t: AccessTech) -> usize {
    tech_code(t) as usize
}

impl InterestRegistry {
    pub fn new(default_max_hops: u8, hot_capacity: usize) -> Self {
        InterestRegistry {
            default_max_hops,
            hot_capacity,
            per: [HashMap::new(), HashMap::new(), HashMap::new()],
        }
    }

    pub fn register(&mut self, tech: AccessTech, interest: u32, max_hops: u8, handler_tag: u32) {
        self.per[idx(tech)]
            .entry(interest)
            .and_modify(|e| {
                e.max_hops = max_hops;
                e.handler_tag = handler_tag;
            })
            .or_insert(InterestEntry {
                max_hops,
                handler_tag,
                uses: 0,
            });
    }

    pub fn unregister(&mut self, tech: AccessTech, interest: u32) {
        self.per[idx(tech)].remove(&interest);
    }

    pub fn is_registered(&self, tech: AccessTech, interest: u32) -> bool {
        self.per[idx(tech)].contains_key(&interest)
    }

    pub fn handler_tag(&self, tech: AccessTech, interest: u32) -> Option<u32> {
        self.per[idx(tech)].get(&interest).map(|e| e.handler_tag)
    }

    pub fn max_hops_or_default(&self, tech: AccessTech, interest: u32) -> u8 {
        self.per[idx(tech)]
            .get(&interest)
            .map_or(self.default_max_hops, |e| e.max_hops)
    }

    pub fn default_max_hops(&self) -> u8 {
        self.default_max_hops
    }

    pub fn touch(&mut self, tech: AccessTech, interest: u32) {
        if let Some(e) = self.per[idx(tech)].get_mut(&interest) {
            e.uses += 1;
        }
    }

    /// Most-frequently-used interests, at most the configured capacity,
    /// sorted ascending. Higher id wins a use-count tie.
    pub fn hot_set(&self, tech: AccessTech) -> Vec<u32> {
        let mut by_use: Vec<(u64, u32)> = self.per[idx(tech)]
            .iter()
            .map(|(&id, e)| (e.uses, id))
            .collect();
        by_use.sort_unstable_by(|a, b| b.cmp(a));
        let mut hot: Vec<u32> = by_use
            .into_iter()
            .take(self.hot_capacity)
            .map(|(_, id)| id)
            .collect();
        hot.sort_unstable();
        hot
    }
}

/// Sorted disjoint inclusive ranges; sequential counters collapse to a
/// single interval so dedup memory stays flat over long runs.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct IdSet {
    ranges: Vec<(u32, u32)>,
}

impl IdSet {
    pub fn contains(&self, v: u32) -> bool {
        let i = self.ranges.partition_point(|&(_, e)| e < v);
        i < self.ranges.len() && self.ranges[i].0 <= v
    }

    /// Returns true when the value was not present yet.
    pub fn insert(&mut self, v: u32) -> bool {
        let i = self.ranges.partition_point(|&(_, e)| e < v);
        if i < self.ranges.len() && self.ranges[i].0 <= v {
            return false;
        }
        let left = i > 0 && self.ranges[i - 1].1 + 1 == v;
        let right = i < self.ranges.len() && v < u32::MAX && self.ranges[i].0 == v + 1;
        match (left, right) {
            (true, true) => {
                self.ranges[i - 1].1 = self.ranges[i].1;
                self.ranges.remove(i);
            }
            (true, false) => self.ranges[i - 1].1 = v,
            (false, true) => self.ranges[i].0 = v,
            (false, false) => self.ranges.insert(i, (v, v)),
        }
        true
    }

    pub fn interval_count(&self) -> usize {
        self.ranges.len()
    }
}

#[derive(Debug, Default, Clone)]
struct TechState {
    sent: u32,
    dedup: HashMap<u32, IdSet>,
    neighbors: BTreeMap<u32, (WirePosition, Time)>,
    roads: BTreeSet<u32>,
}

/// Network-facing node state, kept strictly separate per access technology.
#[derive(Debug, Clone)]
pub struct NodeNetState {
    per: [TechState; 3],
    diameters: [f64; 3],
    neighbor_ttl: Time,
}

impl NodeNetState {
    pub fn new(radio_diameters: [f64; 3], neighbor_ttl: Time) -> Self {
        NodeNetState {
            per: Default::default(),
            diameters: radio_diameters,
            neighbor_ttl,
        }
    }

    pub fn from_channels(model: &ChannelModel, neighbor_ttl: Time) -> Self {
        Self::new(
            [model.w11n.range_m, model.w11p.range_m, model.lte.range_m],
            neighbor_ttl,
        )
    }

    pub fn radio_diameter(&self, tech: AccessTech) -> f64 {
        self.diameters[idx(tech)]
    }

    pub fn register_road(&mut self, tech: AccessTech, road: u32) {
        self.per[idx(tech)].roads.insert(road);
    }

    pub fn unregister_road(&mut self, tech: AccessTech, road: u32) {
        self.per[idx(tech)].roads.remove(&road);
    }

    pub fn has_road(&self, tech: AccessTech, road: u32) -> bool {
        self.per[idx(tech)].roads.contains(&road)
    }

    pub fn roads(&self, tech: AccessTech) -> impl Iterator<Item = u32> + '_ {
        self.per[idx(tech)].roads.iter().copied()
    }

    pub fn next_message_id(&mut self, tech: AccessTech) -> u32 {
        let s = &mut self.per[idx(tech)].sent;
        let id = *s;
        *s = s.wrapping_add(1);
        id
    }

    /// Returns true when (source, id) was new and is now recorded.
    pub fn record_seen(&mut self, tech: AccessTech, source: u32, id: u32) -> bool {
        self.per[idx(tech)]
            .dedup
            .entry(source)
            .or_default()
            .insert(id)
    }

    pub fn seen(&self, tech: AccessTech, source: u32, id: u32) -> bool {
        self.per[idx(tech)]
            .dedup
            .get(&source)
            .is_some_and(|s| s.contains(id))
    }

    pub fn dedup_interval_count(&self, tech: AccessTech, source: u32) -> usize {
        self.per[idx(tech)]
            .dedup
            .get(&source)
            .map_or(0, |s| s.interval_count())
    }

    pub fn note_neighbor(&mut self, tech: AccessTech, source: u32, pos: WirePosition, now: Time) {
        self.per[idx(tech)].neighbors.insert(source, (pos, now));
    }

    pub fn neighbors(&self, tech: AccessTech, now: Time) -> Vec<(u32, WirePosition)> {
        let ttl = self.neighbor_ttl;
        self.per[idx(tech)]
            .neighbors
            .iter()
            .filter(|(_, &(_, seen))| now.saturating_sub(seen) <= ttl)
            .map(|(&src, &(pos, _))| (src, pos))
            .collect()
    }

    pub fn prune_neighbors(&mut self, now: Time) {
        let ttl = self.neighbor_ttl;
        for st in &mut self.per {
            st.neighbors
                .retain(|_, &mut (_, seen)| now.saturating_sub(seen) <= ttl);
        }
    }
}

/// Road reference frame for direction decisions: a point on the road and
/// the unit vector of its travel direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadAxis {
    pub origin: (f64, f64),
    pub dir: (f64, f64),
    pub half_width: f64,
}

impl RoadAxis {
    pub fn new(origin: (f64, f64), dir: (f64, f64)) -> RoadAxis {
        let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
        assert!(len > 0.0, "road axis needs a nonzero direction");
        RoadAxis {
            origin,
            dir: (dir.0 / len, dir.1 / len),
            half_width: f64::INFINITY,
        }
    }

    pub fn with_half_width(mut self, half_width: f64) -> RoadAxis {
        self.half_width = half_width;
        self
    }
}

/// +1 when `self_pos` sits at or ahead of `origin_pos` along the road's
/// travel direction, -1 behind. Ties count as ahead.
pub fn relative_position(
    self_pos: (f64, f64),
    origin_pos: (f64, f64),
    axis: &RoadAxis,
) -> Result<i8, IcnError> {
    let rel = |p: (f64, f64)| (p.0 - axis.origin.0, p.1 - axis.origin.1);
    let along = |v: (f64, f64)| v.0 * axis.dir.0 + v.1 * axis.dir.1;
    let across = |v: (f64, f64)| (v.0 * -axis.dir.1 + v.1 * axis.dir.0).abs();
    let (s, o) = (rel(self_pos), rel(origin_pos));
    if across(s) > axis.half_width || across(o) > axis.half_width {
        return Err(IcnError::OffRoad);
    }
    Ok(if along(s) >= along(o) { 1 } else { -1 })
}

pub fn forwarding_delay(distance_m: f64, epsilon_m: f64, rng: &mut impl Rng) -> f64 {
    rng.random::<f64>() / distance_m.max(epsilon_m)
}

fn planar_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    DeliverToApp { interest: u32 },
    ForwardAfter { delay_s: f64 },
    Discard { reason: DiscardReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    Duplicate,
    RoadFilter,
    NotMatched,
}

pub struct HandleCtx<'a> {
    pub mode: Mode,
    pub tech: AccessTech,
    pub now: Time,
    pub self_prefix: &'a ActivePrefix,
    pub self_pos: (f64, f64),
}

#[allow(clippy::too_many_arguments)]
pub fn build_message(
    state: &mut NodeNetState,
    tech: AccessTech,
    mode: Mode,
    source_prefix: &ActivePrefix,
    dest_prefix: Option<&ActivePrefix>,
    interest: u32,
    position: (f64, f64),
    direction: Direction,
    road_id: Option<u32>,
) -> MessageHeader {
    let message_id = state.next_message_id(tech);
    // own messages go straight into dedup so echoes die on arrival
    state.record_seen(tech, source_prefix.pack(), message_id);
    MessageHeader {
        version: WIRE_VERSION,
        hop_count: 0,
        header_size: if mode == Mode::Hrvep { 37 } else { 36 },
        message_id,
        dest_prefix: dest_prefix.cloned(),
        source_prefix: source_prefix.clone(),
        interest,
        position: WirePosition::from_planar(position.0, position.1),
        direction,
        road_id,
        access_tech: (mode == Mode::Hrvep).then_some(tech),
    }
}

/// Receive path. Mutates `msg` by incrementing its hop count; a returned
/// `ForwardAfter` means rebroadcasting `msg` as mutated after the delay.
pub fn handle_message(
    state: &mut NodeNetState,
    registry: &mut InterestRegistry,
    msg: &mut MessageHeader,
    ctx: &HandleCtx,
    axis_of: impl Fn(u32) -> Option<RoadAxis>,
    rng: &mut impl Rng,
) -> Vec<Action> {
    let tech = ctx.tech;
    let src = msg.source_prefix.pack();
    if !state.record_seen(tech, src, msg.message_id) {
        return vec![Action::Discard {
            reason: DiscardReason::Duplicate,
        }];
    }
    msg.hop_count = msg.hop_count.saturating_add(1);
    if msg.hop_count == 1 {
        state.note_neighbor(tech, src, msg.position, ctx.now);
    }

    let road_ok = match msg.road_id {
        Some(road) => state.has_road(tech, road),
        None => ctx.mode == Mode::Hrvep,
    };
    if !road_ok {
        return vec![Action::Discard {
            reason: DiscardReason::RoadFilter,
        }];
    }

    let origin = msg.position.to_planar();
    let axis = msg.road_id.and_then(axis_of);
    let dir_ok = match msg.direction {
        Direction::Any => true,
        d => axis
            .as_ref()
            .and_then(|a| relative_position(ctx.self_pos, origin, a).ok())
            .is_some_and(|p| p == d.to_i8()),
    };

    let dist = planar_dist(ctx.self_pos, origin);
    let mut farthest = true;
    if msg.direction != Direction::Any {
        if let Some(axis) = &axis {
            let want = msg.direction.to_i8();
            let range = state.radio_diameter(tech);
            for (_, npos) in state.neighbors(tech, ctx.now) {
                let np = npos.to_planar();
                let nd = planar_dist(np, origin);
                if nd > dist
                    && nd <= range
                    && relative_position(np, origin, axis).ok() == Some(want)
                {
                    farthest = false;
                    break;
                }
            }
        }
    }

    let interested = registry.is_registered(tech, msg.interest);
    let dest_open = msg.dest_prefix.is_none();
    let dest_is_self = msg.dest_prefix.as_ref() == Some(ctx.self_prefix);

    let mut actions = Vec::new();
    if interested && dir_ok && (dest_open || dest_is_self) {
        registry.touch(tech, msg.interest);
        actions.push(Action::DeliverToApp {
            interest: msg.interest,
        });
    }

    let relays = interested || prefix_match(ctx.self_prefix, &msg.source_prefix).unwrap_or(false);
    if tech != AccessTech::Lte
        && relays
        && (dest_open || !dest_is_self)
        && farthest
        && dir_ok
        && msg.hop_count < registry.max_hops_or_default(tech, msg.interest)
    {
        actions.push(Action::ForwardAfter {
            delay_s: forwarding_delay(dist, DELAY_EPSILON_M, rng),
        });
    }

    if actions.is_empty() {
        actions.push(Action::Discard {
            reason: DiscardReason::NotMatched,
        });
    }
    actions
}
