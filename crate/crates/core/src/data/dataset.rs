use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::graph::{build_graph, TrajectoryGraph};
use super::skeleton::{normalize, SkeletonSequence};
use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};

/// Stacked node descriptors ready for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    nodes: usize,
    dim: usize,
    classes: usize,
    /// `len × nodes × dim`, row-major.
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl GraphDataset {
    /// `classes` defaults to `max label + 1`.
    pub fn from_graphs(graphs: &[TrajectoryGraph], classes: Option<usize>) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::domain("dataset has no graphs"))?;
        let (nodes, dim) = (first.nodes, first.dim);
        let max_label = graphs.iter().map(|g| g.label).max().unwrap_or(0);
        let classes = classes.unwrap_or(max_label + 1);
        if max_label >= classes {
            return Err(Error::Index {
                op: "dataset labels",
                index: max_label,
                bound: classes,
            });
        }
        let mut features = Vec::with_capacity(graphs.len() * nodes * dim);
        for g in graphs {
            if (g.nodes, g.dim) != (nodes, dim) {
                return Err(Error::Dimension {
                    op: "dataset",
                    lhs: vec![nodes, dim],
                    rhs: vec![g.nodes, g.dim],
                });
            }
            features.extend_from_slice(&g.descriptors);
        }
        Ok(GraphDataset {
            nodes,
            dim,
            classes,
            features,
            labels: graphs.iter().map(|g| g.label).collect(),
        })
    }

    /// Normalizes and chunks every sequence (in parallel, order preserved).
    pub fn from_sequences(
        seqs: &[SkeletonSequence],
        chunks: usize,
        neighbors: usize,
        classes: Option<usize>,
    ) -> Result<Self> {
        let graphs = seqs
            .par_iter()
            .map(|s| build_graph(&normalize(s)?, chunks, neighbors))
            .collect::<Result<Vec<_>>>()?;
        Self::from_graphs(&graphs, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.nodes * self.dim;
        &self.features[i * w..(i + 1) * w]
    }

    /// Inputs `[b × nodes × dim]` and labels for the given sample indices.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let mut data = Vec::with_capacity(indices.len() * self.nodes * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    op: "batch",
                    index: i,
                    bound: self.len(),
                });
            }
            data.extend(self.sample(i).iter().map(|&v| T::of(v)));
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![indices.len(), self.nodes, self.dim], data)?;
        Ok((t, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.nodes * self.dim);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        GraphDataset {
            nodes: self.nodes,
            dim: self.dim,
            classes: self.classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Stratified split: each class contributes `round(fraction · count)`
    /// samples to the second part.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::domain(format!("split fraction must lie in [0, 1), got {fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut keep, mut held) = (Vec::new(), Vec::new());
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let n_held = (fraction * idx.len() as f64).round() as usize;
            held.extend_from_slice(&idx[..n_held]);
            keep.extend_from_slice(&idx[n_held..]);
        }
        keep.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&keep), self.subset(&held)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn toy() -> GraphDataset {
        let spec = SynthSpec {
            sequences_per_class: 5,
            joints: 5,
            frames: 12,
            ..SynthSpec::default()
        };
        GraphDataset::from_sequences(&synth_dataset(&spec).unwrap(), 4, 2, None).unwrap()
    }

    #[test]
    fn shapes_and_batches() {
        let d = toy();
        assert_eq!((d.len(), d.nodes(), d.dim(), d.classes()), (15, 5, 12, 3));
        let (x, y) = d.batch::<f64>(&[3, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 5, 12]);
        assert_eq!(y, vec![d.labels()[3], d.labels()[0]]);
        assert_eq!(&x.data()[..60], d.sample(3));
        assert!(d.batch::<f64>(&[99]).is_err());
        assert!(d.batch::<f64>(&[]).is_err());
    }

    #[test]
    fn stratified_split_partitions() {
        let d = toy();
        let (a, b) = d.split(0.4, 3).unwrap();
        assert_eq!(a.len() + b.len(), d.len());
        for c in 0..3 {
            assert_eq!(b.labels().iter().filter(|&&l| l == c).count(), 2);
        }
        assert_eq!(d.split(0.4, 3).unwrap(), (a, b));
    }
}
