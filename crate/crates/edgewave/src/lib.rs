//! Simulation library for interest-centric vehicular networks: edge-reversal
//! signal scheduling, the RVEP/HRVEP forwarding protocols, adaptive and
//! coordinated traffic-light agents, and green-wave route planning, all on a
//! deterministic discrete-event kernel.

pub mod icn;
pub mod kernel;
pub mod routing;
pub mod agents;
pub mod smer;
pub mod traffic;
pub mod harness;
