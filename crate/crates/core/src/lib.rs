//! Scout–task multi-robot coordination: shared belief, a mutual-information
//! upper-confidence objective, decentralised tree search and an episode
//! simulator.

pub mod bench;
pub mod belief;
pub mod comms;
pub mod objective;
pub mod planner;
pub mod rng;
pub mod scenario;
pub mod selftest;
pub mod sensing;
pub mod sim;
pub mod world;
