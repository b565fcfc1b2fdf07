//! Synthetic-crowd simulator and the admin verbs behind the `crowdmushra`
//! command line.

pub mod campaign;
pub mod commands;
pub mod objective;
pub mod simulator;

pub use campaign::{run_campaign, run_campaign_with, CampaignOptions, CampaignOutcome};
pub use simulator::{
    simulate_rating, ArchetypeKind, GroundTruth, PopulationGroup, PopulationSpec, RaterArchetype, SimulationError,
};
