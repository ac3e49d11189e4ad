pub mod apx;
pub mod corpus;
pub mod evalstats;
pub mod genharness;
pub mod namecluster;
pub mod profileanalysis;
pub mod scoring;
pub mod util;
