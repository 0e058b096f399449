//! JSON schema of the `train` configuration file.

use serde::{Deserialize, Serialize};

use pgpc::training::TrainConfig;

/// Schema version written by `--print-default` and accepted by `train`.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Number of procedurally posed clouds.
    pub count: usize,
    /// Bit depths, assigned to the clouds in turn.
    pub precisions: Vec<u8>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 64,
            precisions: vec![6, 6, 6, 7],
            seed: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub training: TrainConfig,
}

impl Default for TrainFile {
    fn default() -> Self {
        TrainFile {
            version: SCHEMA_VERSION,
            dataset: DatasetSpec::default(),
            training: TrainConfig::default(),
        }
    }
}
