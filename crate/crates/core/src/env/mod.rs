//! Ground-truth environments, synthetic regression problems and dataset
//! plumbing.

mod dataset;
mod toy;
mod wet_chicken;

pub use dataset::{
    read_csv, read_meta, time_embed, write_csv, write_meta, Dataset, DatasetMeta, NormStats,
};
pub use toy::{toy_bimodal, toy_heteroskedastic};
pub use wet_chicken::{
    gen_wet_chicken, gen_wet_chicken_batch, gen_wet_chicken_walk, reward, Sampling, Action, State, WetChicken, WET_CHICKEN_COLUMNS,
};
