//! Learning analog beamforming codebooks with multi-agent off-policy
//! reinforcement learning from scalar gain feedback.
//!
//! The pipeline: geometric channels ([`channel`]) are probed with random
//! sensing beams and clustered ([`cluster`]); one DDPG, TD3 or SAC agent per
//! cluster ([`agents`]) learns a quantized constant-modulus beam
//! ([`beamform`]) on top of a small dense-network substrate ([`neural`]).
//! [`robustness`] sweeps phase mismatch and feedback noise over the whole
//! pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod agents;
pub mod beamform;
pub mod channel;
pub mod cluster;
pub mod error;
pub mod neural;
pub mod rng;
pub mod robustness;


pub use num_complex::Complex64;


pub use agents::{AgentHyper, AgentKind, TrainLog};
pub use beamform::{Beam, Codebook, PhaseSet};
pub use channel::{ArrayGeometry, ChannelSet, GainProfile, ImpairmentProfile, ScenarioConfig};
pub use cluster::{Assignment, ClusterModel};
pub use error::{ForgeError, Result};
