//! Synthetic skeleton actions for desk-scale experiments.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::GraphDataset;
use super::graph::{DEFAULT_CHUNKS, DEFAULT_NEIGHBORS};
use super::skeleton::{Point, SkeletonSequence};
use crate::error::{Error, Result};

const HARMONICS: usize = 2;

/// Size of the standard synthetic benchmark.
pub const TASK_SEQUENCES: usize = 500;
/// Held-out share of the standard synthetic benchmark.
pub const TASK_TEST_FRACTION: f64 = 0.2;
/// Shuffle seed of the benchmark split.
pub const TASK_SPLIT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: usize,
    pub sequences_per_class: usize,
    pub joints: usize,
    /// Longest clip; each clip draws its length from `[frames/2, frames]`.
    pub frames: usize,
    /// Per-coordinate Gaussian noise (std).
    pub noise: f64,
    /// Per-sequence amplitude and phase perturbation (std).
    pub jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            classes: 3,
            sequences_per_class: 167,
            joints: 10,
            frames: 40,
            noise: 0.03,
            jitter: 0.15,
        }
    }
}

/// Motion of one joint coordinate: a sum of sinusoids in normalized time.
#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: [f64; HARMONICS],
    freq: [f64; HARMONICS],
    phase: [f64; HARMONICS],
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut w = Wave {
            amp: [0.0; HARMONICS],
            freq: [0.0; HARMONICS],
            phase: [0.0; HARMONICS],
        };
        for h in 0..HARMONICS {
            w.amp[h] = rng.random_range(0.05..0.3);
            w.freq[h] = rng.random_range(0.5..2.5);
            w.phase[h] = rng.random_range(0.0..TAU);
        }
        w
    }

    fn at(&self, tau: f64, gain: f64, shift: f64) -> f64 {
        (0..HARMONICS)
            .map(|h| gain * self.amp[h] * (TAU * self.freq[h] * tau + self.phase[h] + shift).sin())
            .sum()
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // a normalized Gaussian 4-vector is a uniform unit quaternion
    let mut q = [0.0; 4];
    let mut n = 0.0;
    while n < 1e-6 {
        q = [gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng)];
        n = q.iter().map(|v| v * v).sum::<f64>();
    }
    let n = n.sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Class-dependent smooth joint motions under random similarity transforms.
/// Labels are interleaved (`i mod classes`); joints 0, 1, 2 form the
/// reference triplet and stay nearly still.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<SkeletonSequence>> {
    if spec.classes == 0 || spec.sequences_per_class == 0 || spec.frames == 0 {
        return Err(Error::domain("synthetic dataset counts must be positive"));
    }
    if spec.joints < 3 {
        return Err(Error::domain(format!("need at least 3 joints, got {}", spec.joints)));
    }
    if !(spec.noise >= 0.0 && spec.jitter >= 0.0) {
        return Err(Error::domain("noise and jitter must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut rest: Vec<Point> = vec![[0.0, 0.5, 0.0], [0.2, 0.0, 0.0], [-0.2, 0.0, 0.0]];
    for _ in 3..spec.joints {
        rest.push([
            rng.random_range(-0.6..0.6),
            rng.random_range(-1.0..0.6),
            rng.random_range(-0.3..0.3),
        ]);
    }
    let prototypes: Vec<Vec<[Wave; 3]>> = (0..spec.classes)
        .map(|_| {
            (0..spec.joints)
                .map(|_| [Wave::random(&mut rng), Wave::random(&mut rng), Wave::random(&mut rng)])
                .collect()
        })
        .collect();

    let total = spec.classes * spec.sequences_per_class;
    let shortest = spec.frames.div_ceil(2);
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % spec.classes;
        let t_len = rng.random_range(shortest..=spec.frames);
        let gain = 1.0 + spec.jitter * gaussian(&mut rng);
        let shift = spec.jitter * gaussian(&mut rng);
        let rot = random_rotation(&mut rng);
        let trans = [gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)];
        let scale = rng.random_range(0.5..2.0);

        let frames = (0..t_len)
            .map(|t| {
                let tau = if t_len > 1 { t as f64 / (t_len - 1) as f64 } else { 0.0 };
                (0..spec.joints)
                    .map(|j| {
                        let mut p = rest[j];
                        if j >= 3 {
                            for (d, v) in p.iter_mut().enumerate() {
                                *v += prototypes[label][j][d].at(tau, gain, shift);
                            }
                        }
                        for v in p.iter_mut() {
                            *v += spec.noise * gaussian(&mut rng);
                        }
                        let mut q = trans;
                        for (r, qv) in q.iter_mut().enumerate() {
                            *qv += scale * (rot[r][0] * p[0] + rot[r][1] * p[1] + rot[r][2] * p[2]);
                        }
                        q
                    })
                    .collect()
            })
            .collect();
        out.push(SkeletonSequence {
            label,
            reference: [0, 1, 2],
            frames,
            joint_names: None,
        });
    }
    Ok(out)
}

/// The standard 3-class, 10-joint, 500-sequence benchmark as
/// `(train, test)` graph datasets with a stratified 80/20 split.
pub fn synth_task(seed: u64) -> Result<(GraphDataset, GraphDataset)> {
    let spec = SynthSpec {
        seed,
        ..SynthSpec::default()
    };
    let seqs = synth_dataset(&spec)?;
    let n = TASK_SEQUENCES.min(seqs.len());
    let all = GraphDataset::from_sequences(&seqs[..n], DEFAULT_CHUNKS, DEFAULT_NEIGHBORS, Some(spec.classes))?;
    all.split(TASK_TEST_FRACTION, TASK_SPLIT_SEED)
}
