//! The EV dynamic-pricing scenario: configuration, demand, follower and
//! ISO models.

mod config;
mod demand;
mod leader;
mod model;

pub use config::{
    cumsum_lambda_max, cumsum_lambda_min, BatteryCost, DemandSource, EVClassConfig, IsoConfig, ScenarioConfig,
    SolverConfig, SyntheticDemand,
};
pub use demand::{
    ingest_demand, parse_demand_csv, read_demand_file, synthetic_profile, synthetic_value, DemandProfile,
};
pub use leader::{build_bimpc, storage_delta, storage_limits, EvLeaderCost, LeaderGroup};
pub use model::{
    build_ev_base_cost, build_ev_incentive_map, build_ev_lompc, clamp_to_class, group_bound, partition_population,
    soc_trajectory, EvGroupModel, EvIncentiveMap, EvTracking, KinkProx, SocGroup,
};
