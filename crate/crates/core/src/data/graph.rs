//! Temporal chunking of joint trajectories and trajectory-graph construction.

use super::skeleton::{Point, SkeletonSequence};
use crate::error::{Error, Result};

pub const DEFAULT_CHUNKS: usize = 4;
pub const DEFAULT_NEIGHBORS: usize = 3;

/// Concatenated per-chunk means of a trajectory (`3·chunks` values).
///
/// The sequence is read as a piecewise-constant signal over normalized time:
/// frame `t` occupies `[t/T, (t+1)/T)` and chunk `c` covers `[c/M, (c+1)/M)`.
/// Each chunk mean weights frames by their overlap with the chunk. When `T`
/// is a multiple of `M` this is exactly the plain mean of frames
/// `⌊t·M/T⌋ = c`; in general it keeps the descriptor unchanged under frame
/// repetition and never leaves a chunk empty.
pub fn temporal_chunk(trajectory: &[Point], chunks: usize) -> Result<Vec<f64>> {
    let frames = trajectory.len();
    if frames == 0 {
        return Err(Error::domain("temporal chunking of an empty trajectory"));
    }
    if chunks == 0 {
        return Err(Error::domain("temporal chunking needs M >= 1"));
    }
    // Integer units of 1/(T·M): frame t spans [t·M, (t+1)·M), chunk c spans [c·T, (c+1)·T).
    let mut sums = vec![[0.0f64; 3]; chunks];
    for (t, p) in trajectory.iter().enumerate() {
        let (start, end) = (t * chunks, (t + 1) * chunks);
        let first = start / frames;
        let last = ((end - 1) / frames).min(chunks - 1);
        for (c, acc) in sums.iter_mut().enumerate().take(last + 1).skip(first) {
            let overlap = end.min((c + 1) * frames) - start.max(c * frames);
            let w = overlap as f64;
            for i in 0..3 {
                acc[i] += w * p[i];
            }
        }
    }
    let inv = 1.0 / frames as f64;
    Ok(sums.iter().flat_map(|s| s.map(|v| v * inv)).collect())
}

/// Node descriptors plus a spatial-neighborhood adjacency hint.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGraph {
    pub label: usize,
    pub nodes: usize,
    /// Row-major `nodes × dim` descriptors.
    pub descriptors: Vec<f64>,
    pub dim: usize,
    /// Row-major `nodes × nodes` 0/1 adjacency, symmetric with unit diagonal.
    pub adjacency: Vec<u8>,
}

impl TrajectoryGraph {
    pub fn descriptor(&self, node: usize) -> &[f64] {
        &self.descriptors[node * self.dim..(node + 1) * self.dim]
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.nodes + j] == 1
    }
}

/// One node per joint trajectory; edges join each joint to its `k` nearest
/// neighbours (time-averaged positions, ties by lower index), symmetrized
/// with self-loops.
pub fn build_graph(seq: &SkeletonSequence, chunks: usize, k: usize) -> Result<TrajectoryGraph> {
    seq.validate()?;
    let n = seq.num_joints();
    let mut descriptors = Vec::with_capacity(n * 3 * chunks);
    let mut centroids = Vec::with_capacity(n);
    for j in 0..n {
        let traj = seq.trajectory(j);
        descriptors.extend(temporal_chunk(&traj, chunks)?);
        let inv = 1.0 / traj.len() as f64;
        let c = traj
            .iter()
            .fold([0.0; 3], |acc, p| [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]);
        centroids.push(c.map(|v| v * inv));
    }
    let mut adjacency = vec![0u8; n * n];
    for i in 0..n {
        adjacency[i * n + i] = 1;
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let d: f64 = (0..3).map(|a| (centroids[i][a] - centroids[j][a]).powi(2)).sum();
                (d, j)
            })
            .collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, j) in others.iter().take(k) {
            adjacency[i * n + j] = 1;
            adjacency[j * n + i] = 1;
        }
    }
    Ok(TrajectoryGraph {
        label: seq.label,
        nodes: n,
        descriptors,
        dim: 3 * chunks,
        adjacency,
    })
}
