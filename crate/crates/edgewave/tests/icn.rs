use std::collections::{HashMap, HashSet};

use edgewave::icn::{
    build_message, forwarding_delay, handle_message, prefix_match, relative_position, Action,
    ActivePrefix, Direction, DiscardReason, HandleCtx, IcnError, IdSet, InternTable,
    InterestRegistry, Mode, NodeNetState, RoadAxis, WirePosition, NULL_ID,
};
use edgewave::kernel::{AccessTech, ChannelModel, Radio, Scheduler, Time};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

const RANGES: [f64; 3] = [200.0, 500.0, 5000.0];
const TTL: Time = Time::from_micros(2_000_000);

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn prefix(fields: &[u32], m: u32) -> ActivePrefix {
    ActivePrefix::from_fields(fields.to_vec(), m).unwrap()
}

#[test]
fn generate_prefix_basic() {
    let mut r = rng(1);
    let p = ActivePrefix::generate(&mut r, 8, 3).unwrap();
    assert_eq!(p.fields().len(), 8);
    assert!(p.fields().iter().all(|&f| f < 8));
    assert!(ActivePrefix::generate(&mut r, 8, 0).is_err());
    assert!(ActivePrefix::generate(&mut r, 0, 3).is_err());
    assert!(ActivePrefix::generate(&mut r, 11, 3).is_err());
    let a = ActivePrefix::generate(&mut rng(42), 8, 3).unwrap();
    let b = ActivePrefix::generate(&mut rng(42), 8, 3).unwrap();
    assert_eq!(a, b);
    let c = ActivePrefix::generate(&mut rng(43), 8, 3).unwrap();
    assert_ne!(a, c);
}

#[test]
fn prefix_match_positional() {
    let a = prefix(&[1, 2, 3, 4], 3);
    let b = prefix(&[7, 2, 0, 0], 3);
    let c = prefix(&[2, 3, 4, 1], 3);
    assert!(prefix_match(&a, &a).unwrap());
    assert!(prefix_match(&a, &b).unwrap());
    // same values everywhere but never in the same slot
    assert!(!prefix_match(&a, &c).unwrap());
    let short = prefix(&[1, 2], 3);
    assert!(matches!(
        prefix_match(&a, &short),
        Err(IcnError::PrefixLengthMismatch { .. })
    ));
}

#[test]
fn prefix_match_probability_matches_closed_form() {
    // independent oracle: P(>=1 positional match) = 1 - (1 - 2^-m)^n
    let expected = 1.0 - (1.0f64 - 1.0 / 8.0).powi(8);
    let mut r = rng(99);
    let trials = 30_000;
    let mut hits = 0;
    for _ in 0..trials {
        let a = ActivePrefix::generate(&mut r, 8, 3).unwrap();
        let b = ActivePrefix::generate(&mut r, 8, 3).unwrap();
        if prefix_match(&a, &b).unwrap() {
            hits += 1;
        }
    }
    let est = hits as f64 / trials as f64;
    assert!(
        (est - expected).abs() < 0.01,
        "est {est}, expected {expected}"
    );
}

#[test]
fn prefix_pack_roundtrip() {
    let p = prefix(&[5, 0, 7, 3, 1, 6, 2, 4], 3);
    let packed = p.pack();
    assert!(packed < 1 << 24);
    assert_ne!(packed, NULL_ID);
    assert_eq!(ActivePrefix::unpack(packed, 8, 3).unwrap(), p);
    // single wide field
    let w = prefix(&[0x7000_0001], 31);
    assert_eq!(ActivePrefix::unpack(w.pack(), 1, 31).unwrap(), w);
}

#[test]
fn relative_position_projection() {
    let east = RoadAxis::new((0.0, 0.0), (1.0, 0.0));
    assert_eq!(relative_position((50.0, 0.0), (0.0, 0.0), &east).unwrap(), 1);
    assert_eq!(relative_position((-50.0, 0.0), (0.0, 0.0), &east).unwrap(), -1);
    // tie goes forward
    assert_eq!(relative_position((0.0, 30.0), (0.0, 0.0), &east).unwrap(), 1);
    let narrow = RoadAxis::new((0.0, 0.0), (1.0, 0.0)).with_half_width(5.0);
    assert!(matches!(
        relative_position((50.0, 20.0), (0.0, 0.0), &narrow),
        Err(IcnError::OffRoad)
    ));
    assert!(matches!(
        relative_position((50.0, 0.0), (10.0, 20.0), &narrow),
        Err(IcnError::OffRoad)
    ));
    // randomized oracle against the dot-product sign
    let mut r = rng(7);
    for _ in 0..200 {
        let dir = {
            let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
            (a.cos(), a.sin())
        };
        let axis = RoadAxis::new((r.random_range(-50.0..50.0), r.random_range(-50.0..50.0)), dir);
        let p = (r.random_range(-500.0..500.0), r.random_range(-500.0..500.0));
        let q = (r.random_range(-500.0..500.0), r.random_range(-500.0..500.0));
        let dot = (p.0 - q.0) * dir.0 + (p.1 - q.1) * dir.1;
        let want = if dot >= 0.0 { 1 } else { -1 };
        assert_eq!(relative_position(p, q, &axis).unwrap(), want);
    }
}

#[test]
fn wire_position_resolution() {
    let w = WirePosition::from_planar(111.32, -222.64);
    // 111.32 m is 1e-3 degrees, i.e. 10000 fixed-point steps
    assert_eq!(w.lon, 10_000);
    assert_eq!(w.lat, -20_000);
    let (x, y) = w.to_planar();
    assert!((x - 111.32).abs() < 0.02);
    assert!((y + 222.64).abs() < 0.02);
}

fn sample_header(mode: Mode) -> edgewave::icn::MessageHeader {
    let mut st = NodeNetState::new(RANGES, TTL);
    let src = prefix(&[1, 2, 3, 4, 5, 6, 7, 0], 3);
    let dst = prefix(&[7, 6, 5, 4, 3, 2, 1, 0], 3);
    build_message(
        &mut st,
        AccessTech::W11P,
        mode,
        &src,
        Some(&dst),
        0xDEAD_BEEF,
        (300.0, -40.0),
        Direction::Backward,
        Some(0x1234_5678),
    )
}

#[test]
fn header_wire_layout() {
    let mut msg = sample_header(Mode::Rvep);
    msg.hop_count = 9;
    let bytes = msg.encode();
    assert_eq!(bytes.len(), 36);
    assert_eq!(bytes[0], 1);
    assert_eq!(bytes[1], 9);
    assert_eq!(bytes[2], 36);
    assert_eq!(&bytes[3..7], &0u32.to_be_bytes());
    assert_eq!(&bytes[15..19], &0xDEAD_BEEFu32.to_be_bytes());
    assert_eq!(bytes[31], 0xFF); // direction -1
    assert_eq!(&bytes[32..36], &0x1234_5678u32.to_be_bytes());
    let back = edgewave::icn::MessageHeader::decode(&bytes, 8, 3).unwrap();
    assert_eq!(back, msg);

    let h = sample_header(Mode::Hrvep);
    let bytes = h.encode();
    assert_eq!(bytes.len(), 37);
    assert_eq!(bytes[2], 37);
    assert_eq!(bytes[36], 1); // W11P
    assert_eq!(edgewave::icn::MessageHeader::decode(&bytes, 8, 3).unwrap(), h);

    // null destination on the wire
    let mut st = NodeNetState::new(RANGES, TTL);
    let src = prefix(&[0; 8], 3);
    let open = build_message(
        &mut st,
        AccessTech::W11N,
        Mode::Rvep,
        &src,
        None,
        1,
        (0.0, 0.0),
        Direction::Any,
        Some(2),
    );
    let bytes = open.encode();
    assert_eq!(&bytes[7..11], &NULL_ID.to_be_bytes());
    assert_eq!(
        edgewave::icn::MessageHeader::decode(&bytes, 8, 3)
            .unwrap()
            .dest_prefix,
        None
    );

    assert!(edgewave::icn::MessageHeader::decode(&bytes[..20], 8, 3).is_err());
    let hexed = hex::encode(&bytes);
    let round = hex::decode(&hexed).unwrap();
    assert_eq!(round, bytes);
}

#[test]
fn registry_hops_and_mfu() {
    let mut reg = InterestRegistry::new(50, 2);
    assert_eq!(reg.max_hops_or_default(AccessTech::W11N, 10), 50);
    reg.register(AccessTech::W11N, 10, 8, 0);
    reg.register(AccessTech::W11N, 11, 4, 0);
    reg.register(AccessTech::W11N, 12, 1, 0);
    assert_eq!(reg.max_hops_or_default(AccessTech::W11N, 10), 8);
    assert!(!reg.is_registered(AccessTech::W11P, 10));
    for _ in 0..5 {
        reg.touch(AccessTech::W11N, 12);
    }
    for _ in 0..3 {
        reg.touch(AccessTech::W11N, 10);
    }
    reg.touch(AccessTech::W11N, 11);
    assert_eq!(reg.hot_set(AccessTech::W11N), vec![10, 12]);
    // outside the hot set but still resolvable
    assert_eq!(reg.max_hops_or_default(AccessTech::W11N, 11), 4);
    reg.unregister(AccessTech::W11N, 12);
    assert!(!reg.is_registered(AccessTech::W11N, 12));
    assert_eq!(reg.hot_set(AccessTech::W11N), vec![10, 11]);
}

#[test]
fn id_set_compresses_and_matches_hash_set() {
    let mut ids = IdSet::default();
    for i in 0..1000 {
        assert!(ids.insert(i));
    }
    assert!(!ids.insert(500));
    assert_eq!(ids.interval_count(), 1);

    let mut r = rng(3);
    let mut ids = IdSet::default();
    let mut oracle = HashSet::new();
    for _ in 0..4000 {
        let v = r.random_range(0..600u32);
        assert_eq!(ids.insert(v), oracle.insert(v), "value {v}");
    }
    for v in 0..600 {
        assert_eq!(ids.contains(v), oracle.contains(&v));
    }
    // filling every gap collapses the set to one interval
    for v in 0..600 {
        ids.insert(v);
    }
    assert_eq!(ids.interval_count(), 1);
}

#[test]
fn neighbor_table_ttl() {
    let mut st = NodeNetState::new(RANGES, TTL);
    let pos = WirePosition::from_planar(10.0, 0.0);
    st.note_neighbor(AccessTech::W11N, 77, pos, Time::ZERO);
    assert_eq!(
        st.neighbors(AccessTech::W11N, Time::from_millis(1900)),
        vec![(77, pos)]
    );
    assert!(st
        .neighbors(AccessTech::W11N, Time::from_millis(2100))
        .is_empty());
    // refresh resets the clock
    st.note_neighbor(AccessTech::W11N, 77, pos, Time::from_secs(5));
    assert_eq!(
        st.neighbors(AccessTech::W11N, Time::from_secs(6)),
        vec![(77, pos)]
    );
    // per-tech isolation
    assert!(st.neighbors(AccessTech::W11P, Time::from_secs(6)).is_empty());
}

#[test]
fn build_message_counters() {
    let mut st = NodeNetState::new(RANGES, TTL);
    let src = prefix(&[1; 8], 3);
    let a = build_message(
        &mut st,
        AccessTech::W11N,
        Mode::Rvep,
        &src,
        None,
        9,
        (0.0, 0.0),
        Direction::Any,
        Some(1),
    );
    let b = build_message(
        &mut st,
        AccessTech::W11N,
        Mode::Rvep,
        &src,
        None,
        9,
        (0.0, 0.0),
        Direction::Any,
        Some(1),
    );
    let c = build_message(
        &mut st,
        AccessTech::Lte,
        Mode::Hrvep,
        &src,
        None,
        9,
        (0.0, 0.0),
        Direction::Any,
        None,
    );
    assert_eq!(a.hop_count, 0);
    assert_eq!(b.message_id, a.message_id + 1);
    // per-tech counter
    assert_eq!(c.message_id, 0);
    assert_eq!(c.access_tech, Some(AccessTech::Lte));
    assert_eq!(c.road_id, None);
    assert_eq!(a.access_tech, None);
}

#[test]
fn forwarding_delay_bounds() {
    let mut r = rng(5);
    for _ in 0..200 {
        let d = forwarding_delay(100.0, 1.0, &mut r);
        assert!(d > 0.0 && d < 0.01);
    }
    // expectation halves when distance doubles
    let mut r = rng(6);
    let mean = |dist: f64, r: &mut ChaCha12Rng| {
        (0..10_000).map(|_| forwarding_delay(dist, 1.0, r)).sum::<f64>() / 10_000.0
    };
    let m1 = mean(100.0, &mut r);
    let m2 = mean(200.0, &mut r);
    assert!((m1 / m2 - 2.0).abs() < 0.1, "ratio {}", m1 / m2);
    // zero distance clamps to epsilon
    let d = forwarding_delay(0.0, 1.0, &mut rng(7));
    assert!(d < 1.0);
    let a = forwarding_delay(50.0, 1.0, &mut rng(8));
    let b = forwarding_delay(50.0, 1.0, &mut rng(8));
    assert_eq!(a, b);
}

#[test]
fn intern_table_reverse_lookup() {
    let mut t = InternTable::default();
    let a = t.intern("vehicle_on_road_3");
    let b = t.intern("vehicle_on_road_3");
    assert_eq!(a, b);
    assert_eq!(t.name(a), Some("vehicle_on_road_3"));
    assert_ne!(t.intern("hello"), a);
    assert_eq!(t.name(NULL_ID), None);
}

// handle_message scenarios

struct Peer {
    prefix: ActivePrefix,
    state: NodeNetState,
    registry: InterestRegistry,
    pos: (f64, f64),
}

const ROAD: u32 = 400;
const PROBE: u32 = 900;

fn peer(fields: &[u32], pos: (f64, f64)) -> Peer {
    let mut p = Peer {
        prefix: prefix(fields, 3),
        state: NodeNetState::new(RANGES, TTL),
        registry: InterestRegistry::new(50, 64),
        pos,
    };
    for tech in AccessTech::ALL {
        p.state.register_road(tech, ROAD);
    }
    p
}

fn east_axis(road: u32) -> Option<RoadAxis> {
    (road == ROAD).then(|| RoadAxis::new((0.0, 0.0), (1.0, 0.0)))
}

fn handle(p: &mut Peer, msg: &mut edgewave::icn::MessageHeader, tech: AccessTech, mode: Mode) -> Vec<Action> {
    let c = HandleCtx {
        mode,
        tech,
        now: Time::from_secs(1),
        self_prefix: &p.prefix,
        self_pos: p.pos,
    };
    let mut r = rng(11);
    handle_message(&mut p.state, &mut p.registry, msg, &c, east_axis, &mut r)
}

fn probe_from(sender: &mut Peer, dest: Option<&ActivePrefix>, dir: Direction) -> edgewave::icn::MessageHeader {
    build_message(
        &mut sender.state,
        AccessTech::W11N,
        Mode::Rvep,
        &sender.prefix.clone(),
        dest,
        PROBE,
        sender.pos,
        dir,
        Some(ROAD),
    )
}

#[test]
fn duplicate_is_discarded() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut b = peer(&[2; 8], (50.0, 0.0));
    b.registry.register(AccessTech::W11N, PROBE, 8, 0);
    let msg = probe_from(&mut a, None, Direction::Any);
    let acts = handle(&mut b, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert!(acts.iter().any(|x| matches!(x, Action::DeliverToApp { interest } if *interest == PROBE)));
    let acts = handle(&mut b, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert_eq!(acts, vec![Action::Discard { reason: DiscardReason::Duplicate }]);
}

#[test]
fn own_echo_is_discarded() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let msg = probe_from(&mut a, None, Direction::Any);
    // the message comes back via a forwarder
    let mut echo = msg.clone();
    echo.hop_count = 1;
    let acts = handle(&mut a, &mut echo, AccessTech::W11N, Mode::Rvep);
    assert_eq!(acts, vec![Action::Discard { reason: DiscardReason::Duplicate }]);
}

#[test]
fn road_filter_rvep_vs_hrvep() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut b = peer(&[2; 8], (50.0, 0.0));
    b.registry.register(AccessTech::W11N, PROBE, 8, 0);
    let mut msg = probe_from(&mut a, None, Direction::Any);
    msg.road_id = Some(999);
    let acts = handle(&mut b, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert_eq!(acts, vec![Action::Discard { reason: DiscardReason::RoadFilter }]);

    // a null road passes only under the hybrid protocol
    let mut c = peer(&[3; 8], (60.0, 0.0));
    c.registry.register(AccessTech::W11N, PROBE, 8, 0);
    let mut null_road = probe_from(&mut a, None, Direction::Any);
    null_road.road_id = None;
    let acts = handle(&mut c, &mut null_road.clone(), AccessTech::W11N, Mode::Hrvep);
    assert!(acts.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));

    let mut d = peer(&[4; 8], (60.0, 0.0));
    d.registry.register(AccessTech::W11N, PROBE, 8, 0);
    let mut null_road2 = probe_from(&mut a, None, Direction::Any);
    null_road2.road_id = None;
    let acts = handle(&mut d, &mut null_road2, AccessTech::W11N, Mode::Rvep);
    assert_eq!(acts, vec![Action::Discard { reason: DiscardReason::RoadFilter }]);
}

#[test]
fn hop_count_increment_and_neighbor_update() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut b = peer(&[2; 8], (50.0, 0.0));
    let mut msg = probe_from(&mut a, None, Direction::Any);
    assert_eq!(msg.hop_count, 0);
    handle(&mut b, &mut msg, AccessTech::W11N, Mode::Rvep);
    assert_eq!(msg.hop_count, 1);
    // first hop updates the neighbor table even without interest or road match
    let nbrs = b.state.neighbors(AccessTech::W11N, Time::from_secs(1));
    assert_eq!(nbrs, vec![(a.prefix.pack(), msg.position)]);

    // a relayed message must not pollute the table
    let mut c = peer(&[3; 8], (90.0, 0.0));
    let mut relayed = probe_from(&mut a, None, Direction::Any);
    relayed.hop_count = 1;
    handle(&mut c, &mut relayed, AccessTech::W11N, Mode::Rvep);
    assert!(c.state.neighbors(AccessTech::W11N, Time::from_secs(1)).is_empty());
}

#[test]
fn direction_scoping() {
    let mut a = peer(&[1; 8], (100.0, 0.0));
    let mut ahead = peer(&[2; 8], (180.0, 0.0));
    let mut behind = peer(&[3; 8], (20.0, 0.0));
    for p in [&mut ahead, &mut behind] {
        p.registry.register(AccessTech::W11N, PROBE, 8, 0);
    }
    let msg = probe_from(&mut a, None, Direction::Forward);
    let acts = handle(&mut ahead, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert!(acts.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
    let acts = handle(&mut behind, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert!(!acts.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
    assert!(!acts.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
}

#[test]
fn exact_destination_gates_delivery() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let target = peer(&[2; 8], (50.0, 0.0));
    let mut bystander = peer(&[3; 8], (40.0, 0.0));
    let mut dest_peer = peer(&[2; 8], (50.0, 0.0));
    dest_peer.registry.register(AccessTech::W11N, PROBE, 8, 0);
    bystander.registry.register(AccessTech::W11N, PROBE, 8, 0);

    let msg = probe_from(&mut a, Some(&target.prefix), Direction::Any);
    // interested bystander must not deliver an addressed message
    let acts = handle(&mut bystander, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert!(!acts.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
    // it may still forward it onward
    assert!(acts.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
    // the addressee delivers but does not forward
    let acts = handle(&mut dest_peer, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert!(acts.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
    assert!(!acts.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
}

#[test]
fn farthest_neighbor_suppresses_forwarding() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut b = peer(&[2; 8], (100.0, 0.0));
    let mut c = peer(&[3; 8], (180.0, 0.0));
    for p in [&mut b, &mut c] {
        p.registry.register(AccessTech::W11N, PROBE, 8, 0);
    }
    // b knows about c from a recent first-hop message
    b.state.note_neighbor(
        AccessTech::W11N,
        c.prefix.pack(),
        WirePosition::from_planar(c.pos.0, c.pos.1),
        Time::from_millis(500),
    );
    c.state.note_neighbor(
        AccessTech::W11N,
        b.prefix.pack(),
        WirePosition::from_planar(b.pos.0, b.pos.1),
        Time::from_millis(500),
    );
    let msg = probe_from(&mut a, None, Direction::Forward);
    let acts_b = handle(&mut b, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    let acts_c = handle(&mut c, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert!(!acts_b.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
    assert!(acts_c.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
    // both still deliver
    assert!(acts_b.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
    assert!(acts_c.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
}

#[test]
fn out_of_range_neighbor_does_not_suppress() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut b = peer(&[2; 8], (100.0, 0.0));
    // a stale entry claims a node 600 m out, beyond the 200 m radio
    b.state.note_neighbor(
        AccessTech::W11N,
        prefix(&[5; 8], 3).pack(),
        WirePosition::from_planar(600.0, 0.0),
        Time::from_millis(900),
    );
    b.registry.register(AccessTech::W11N, PROBE, 8, 0);
    let msg = probe_from(&mut a, None, Direction::Forward);
    let acts = handle(&mut b, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert!(acts.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
}

#[test]
fn hop_bound_stops_forwarding() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut b = peer(&[2; 8], (100.0, 0.0));
    b.registry.register(AccessTech::W11N, PROBE, 2, 0);
    let mut msg = probe_from(&mut a, None, Direction::Forward);
    msg.hop_count = 1; // becomes 2 on receipt, the registered bound
    let acts = handle(&mut b, &mut msg, AccessTech::W11N, Mode::Rvep);
    assert!(acts.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
    assert!(!acts.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
}

#[test]
fn tech_state_isolation() {
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut b = peer(&[2; 8], (50.0, 0.0));
    b.registry.register(AccessTech::W11N, PROBE, 8, 0);
    b.registry.register(AccessTech::W11P, PROBE, 4, 0);
    let msg = probe_from(&mut a, None, Direction::Any);
    handle(&mut b, &mut msg.clone(), AccessTech::W11N, Mode::Hrvep);
    // same (source, id) arriving on another tech is not a duplicate
    let mut again = msg.clone();
    again.access_tech = Some(AccessTech::W11P);
    let acts = handle(&mut b, &mut again, AccessTech::W11P, Mode::Hrvep);
    assert!(acts.iter().any(|x| matches!(x, Action::DeliverToApp { .. })));
    assert!(b.state.neighbors(AccessTech::W11P, Time::from_secs(1)).len() == 1);
}

#[test]
fn no_protocol_forwarding_on_lte() {
    // the cellular star delivers through the transparent relay; endpoints
    // deliver at hop 1 and nobody repeats the message
    let mut a = peer(&[1; 8], (0.0, 0.0));
    let mut ue = peer(&[2; 8], (1000.0, 0.0));
    let mut tcc = peer(&[1, 7, 7, 7, 7, 7, 7, 7], (500.0, 0.0));
    ue.registry.register(AccessTech::Lte, PROBE, 1, 0);
    tcc.registry.register(AccessTech::Lte, PROBE, 1, 0);
    let msg = build_message(
        &mut a.state,
        AccessTech::Lte,
        Mode::Hrvep,
        &a.prefix.clone(),
        None,
        PROBE,
        a.pos,
        Direction::Any,
        None,
    );
    for p in [&mut ue, &mut tcc] {
        let acts = handle(p, &mut msg.clone(), AccessTech::Lte, Mode::Hrvep);
        let delivered: Vec<_> = acts
            .iter()
            .filter(|x| matches!(x, Action::DeliverToApp { .. }))
            .collect();
        assert_eq!(delivered.len(), 1);
        assert!(!acts.iter().any(|x| matches!(x, Action::ForwardAfter { .. })));
    }
}

#[test]
fn unmatched_message_is_discarded_not_forwarded() {
    let mut a = peer(&[1, 2, 3, 4, 5, 6, 7, 0], (0.0, 0.0));
    // disjoint prefix, no interest registered: nothing to do
    let mut b = peer(&[2, 3, 4, 5, 6, 7, 0, 1], (50.0, 0.0));
    let msg = probe_from(&mut a, None, Direction::Any);
    let acts = handle(&mut b, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert_eq!(acts, vec![Action::Discard { reason: DiscardReason::NotMatched }]);
    // an overlapping prefix alone is enough to relay
    let mut c = peer(&[1, 7, 7, 7, 7, 7, 7, 7], (60.0, 0.0));
    c.state.register_road(AccessTech::W11N, ROAD);
    let acts = handle(&mut c, &mut msg.clone(), AccessTech::W11N, Mode::Rvep);
    assert_eq!(acts.len(), 1);
    assert!(matches!(acts[0], Action::ForwardAfter { .. }));
}

// end-to-end line topology driven through the kernel

#[derive(Clone)]
enum Ev {
    Tx { from: usize, msg: edgewave::icn::MessageHeader },
    Rx { to: usize, msg: edgewave::icn::MessageHeader },
}

struct LineSim {
    peers: Vec<Peer>,
    radio: Radio,
    delivered: Vec<Vec<(u32, u32, u8)>>, // (source, id, hops) per node
    forwards: Vec<u32>,
    rng: ChaCha12Rng,
}

impl LineSim {
    fn new(xs: &[f64], seed: u64) -> LineSim {
        let mut radio = Radio::new(ChannelModel::default());
        let mut peers = Vec::new();
        let mut prng = rng(seed);
        for (i, &x) in xs.iter().enumerate() {
            let fields: Vec<u32> = (0..8).map(|_| prng.random_range(0..8)).collect();
            let mut p = peer(&fields, (x, 0.0));
            p.registry.register(AccessTech::W11N, PROBE, 8, 0);
            radio.add_node(i, (x, 0.0), &[AccessTech::W11N]);
            peers.push(p);
        }
        let n = xs.len();
        LineSim {
            peers,
            radio,
            delivered: vec![Vec::new(); n],
            forwards: vec![0; n],
            rng: rng(seed ^ 0xABCD),
        }
    }

    fn hello_round(&mut self, sched: &mut Scheduler<Ev>) {
        for i in 0..self.peers.len() {
            let p = &mut self.peers[i];
            let msg = build_message(
                &mut p.state,
                AccessTech::W11N,
                Mode::Rvep,
                &p.prefix.clone(),
                None,
                7777, // unregistered hello interest
                p.pos,
                Direction::Any,
                Some(ROAD),
            );
            sched
                .schedule(Time::from_millis(i as u64), Ev::Tx { from: i, msg })
                .unwrap();
        }
    }

    fn run(&mut self, sched: &mut Scheduler<Ev>, until: Time) {
        let latency = self.radio.model().w11n.latency;
        sched.run_until(until, |sched, t, ev| match ev {
            Ev::Tx { from, msg } => {
                for d in self.radio.deliveries(from, AccessTech::W11N) {
                    sched
                        .schedule(t + latency, Ev::Rx { to: d.node, msg: msg.clone() })
                        .unwrap();
                }
            }
            Ev::Rx { to, mut msg } => {
                let p = &mut self.peers[to];
                let c = HandleCtx {
                    mode: Mode::Rvep,
                    tech: AccessTech::W11N,
                    now: t,
                    self_prefix: &p.prefix.clone(),
                    self_pos: p.pos,
                };
                let acts = handle_message(
                    &mut p.state,
                    &mut p.registry,
                    &mut msg,
                    &c,
                    east_axis,
                    &mut self.rng,
                );
                for act in acts {
                    match act {
                        Action::DeliverToApp { .. } => {
                            self.delivered[to].push((
                                msg.source_prefix.pack(),
                                msg.message_id,
                                msg.hop_count,
                            ));
                        }
                        Action::ForwardAfter { delay_s } => {
                            self.forwards[to] += 1;
                            sched
                                .schedule(
                                    t + Time::from_secs_f64(delay_s),
                                    Ev::Tx { from: to, msg: msg.clone() },
                                )
                                .unwrap();
                        }
                        Action::Discard { .. } => {}
                    }
                }
            }
        });
    }
}

#[test]
fn line_topology_propagation() {
    // 120 m spacing: each node only hears immediate neighbors
    let xs: Vec<f64> = (0..5).map(|i| i as f64 * 120.0).collect();
    let mut sim = LineSim::new(&xs, 21);
    let mut sched: Scheduler<Ev> = Scheduler::new();
    sim.hello_round(&mut sched);
    sim.run(&mut sched, Time::from_secs(1));
    for v in &mut sim.delivered {
        v.clear();
    }
    sim.forwards.iter_mut().for_each(|f| *f = 0);

    let p = &mut sim.peers[0];
    let msg = build_message(
        &mut p.state,
        AccessTech::W11N,
        Mode::Rvep,
        &p.prefix.clone(),
        None,
        PROBE,
        p.pos,
        Direction::Forward,
        Some(ROAD),
    );
    let src = p.prefix.pack();
    let id = msg.message_id;
    sched
        .schedule(Time::from_micros(1_200_000), Ev::Tx { from: 0, msg })
        .unwrap();
    sim.run(&mut sched, Time::from_secs(30));

    // every downstream node delivers exactly once, hop k at node k
    assert!(sim.delivered[0].is_empty());
    for k in 1..5 {
        assert_eq!(sim.delivered[k], vec![(src, id, k as u8)], "node {k}");
    }
}

#[test]
fn cluster_elects_single_forwarder() {
    // fully connected cluster ahead of the sender
    let xs = [0.0, 80.0, 130.0, 180.0];
    let mut sim = LineSim::new(&xs, 33);
    let mut sched: Scheduler<Ev> = Scheduler::new();
    sim.hello_round(&mut sched);
    sim.run(&mut sched, Time::from_secs(1));
    sim.forwards.iter_mut().for_each(|f| *f = 0);
    for v in &mut sim.delivered {
        v.clear();
    }

    let p = &mut sim.peers[0];
    let msg = build_message(
        &mut p.state,
        AccessTech::W11N,
        Mode::Rvep,
        &p.prefix.clone(),
        None,
        PROBE,
        p.pos,
        Direction::Forward,
        Some(ROAD),
    );
    sched
        .schedule(Time::from_micros(1_200_000), Ev::Tx { from: 0, msg })
        .unwrap();
    sim.run(&mut sched, Time::from_secs(30));

    for k in 1..4 {
        assert_eq!(sim.delivered[k].len(), 1, "node {k} delivery");
    }
    // only the farthest in-range node repeats the message
    assert_eq!(sim.forwards[1], 0);
    assert_eq!(sim.forwards[2], 0);
    assert_eq!(sim.forwards[3], 1);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn prefix_pack_unpack_roundtrip(fields in proptest::collection::vec(0u32..8, 1..=8)) {
            let n = fields.len();
            let p = ActivePrefix::from_fields(fields, 3).unwrap();
            prop_assert_eq!(ActivePrefix::unpack(p.pack(), n, 3).unwrap(), p);
        }

        #[test]
        fn id_set_insert_semantics(values in proptest::collection::vec(0u32..100_000, 0..300)) {
            let mut ids = IdSet::default();
            let mut oracle = HashSet::new();
            for v in values {
                prop_assert_eq!(ids.insert(v), oracle.insert(v));
            }
            for &v in &oracle {
                prop_assert!(ids.contains(v));
            }
        }

        #[test]
        fn header_roundtrip(
            hop in 0u8..200,
            id in 0u32..u32::MAX,
            interest in 0u32..u32::MAX,
            x in -100_000.0f64..100_000.0,
            y in -100_000.0f64..100_000.0,
            dir in -1i8..=1,
            road in proptest::option::of(0u32..NULL_ID),
            hybrid in proptest::bool::ANY,
            dest in proptest::option::of(proptest::collection::vec(0u32..8, 8)),
        ) {
            let mut st = NodeNetState::new(RANGES, TTL);
            let src = ActivePrefix::generate(&mut rng(id as u64), 8, 3).unwrap();
            let dest = dest.map(|f| ActivePrefix::from_fields(f, 3).unwrap());
            let mode = if hybrid { Mode::Hrvep } else { Mode::Rvep };
            let mut msg = build_message(
                &mut st, AccessTech::W11N, mode, &src, dest.as_ref(), interest,
                (x, y), Direction::from_i8(dir).unwrap(),
                if road.is_none() && !hybrid { Some(1) } else { road },
            );
            msg.hop_count = hop;
            msg.message_id = id;
            let bytes = msg.encode();
            prop_assert_eq!(bytes.len(), if hybrid { 37 } else { 36 });
            prop_assert_eq!(edgewave::icn::MessageHeader::decode(&bytes, 8, 3).unwrap(), msg);
        }
    }
}
