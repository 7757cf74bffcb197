//! Skeleton ingestion, normalization, temporal chunking and graph datasets.

mod dataset;
mod graph;
mod io;
mod skeleton;
mod synth;

pub use dataset::GraphDataset;
pub use graph::{build_graph, temporal_chunk, TrajectoryGraph, DEFAULT_CHUNKS, DEFAULT_NEIGHBORS};
pub use io::{load_jsonl, read_jsonl, write_jsonl, write_jsonl_to};
pub use skeleton::{normalize, normalize_with_scale, Point, SkeletonSequence};
pub use synth::{synth_dataset, synth_task, SynthSpec, TASK_SEQUENCES, TASK_SPLIT_SEED, TASK_TEST_FRACTION};
