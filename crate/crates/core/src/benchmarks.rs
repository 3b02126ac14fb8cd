//! Shipped benchmark instances.

use crate::model::TeamSpec;

pub const SINGLE_CLUSTER_BINARY: &str = include_str!("../examples/instances/single_cluster_binary.json");
pub const TWO_CLUSTER_COUPLED: &str = include_str!("../examples/instances/two_cluster_coupled.json");
pub const DECOUPLED: &str = include_str!("../examples/instances/decoupled.json");

/// One cluster, binary states and actions, finite horizon 4.
pub fn single_cluster_binary() -> TeamSpec {
    TeamSpec::from_json_str(SINGLE_CLUSTER_BINARY).expect("shipped instance")
}

/// Two binary clusters with asymmetric cross-cluster coupling, infinite horizon.
pub fn two_cluster_coupled() -> TeamSpec {
    TeamSpec::from_json_str(TWO_CLUSTER_COUPLED).expect("shipped instance")
}

/// Two clusters without coupling in dynamics or costs, finite horizon 5.
pub fn decoupled() -> TeamSpec {
    TeamSpec::from_json_str(DECOUPLED).expect("shipped instance")
}
