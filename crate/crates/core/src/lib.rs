//! Shared sensor network controller and simulator.
//!
//! A central controller admits monitoring applications onto battery-powered
//! sensor nodes and reprograms them over the air. This crate contains:
//!
//! - [`proto`]: firmware codification, merged sensing schedules, wire frames
//! - [`energy`]: duty-cycle consumption model and lifetime estimates
//! - [`netsim`]: topology, link timing, OTA transfer model and the event engine
//! - [`node`]: the per-node firmware state machine
//! - [`controller`]: admission, deployment planning and reallocation
//! - [`store`]: file-backed tables for registers, devices and firmware images
//! - [`scenario`]: the line-oriented scenario format and bundled scenarios

pub mod controller;
pub mod energy;
pub mod netsim;
pub mod node;
pub mod proto;
pub mod scenario;
pub mod store;
