//! JSON Schemas (draft 2020-12) for every document the crate writes.

pub const TRAIN: &str = include_str!("../schemas/train.schema.json");
pub const METRICS: &str = include_str!("../schemas/metrics.schema.json");
pub const FLOPS: &str = include_str!("../schemas/flops.schema.json");
pub const BENCH: &str = include_str!("../schemas/bench.schema.json");
pub const DATASET: &str = include_str!("../schemas/dataset.schema.json");
pub const CHECKPOINT: &str = include_str!("../schemas/checkpoint.schema.json");

/// `(name, schema)` pairs; the name matches a report's `schema` field.
pub const ALL: [(&str, &str); 6] = [
    ("mim.train", TRAIN),
    ("mim.metrics", METRICS),
    ("mim.flops", FLOPS),
    ("mim.bench", BENCH),
    ("mim.dataset", DATASET),
    ("mim.checkpoint", CHECKPOINT),
];

pub fn get(name: &str) -> Option<&'static str> {
    ALL.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
