//! Two-block graph convolutional classifier over trajectory graphs.
//!
//! ```text
//! x[b×n×s] ─proj→ [b×n×c] ─A_h·x, concat→ [b×n×H·c] ─conv+ReLU→ [b×n×F]
//!          ─mean over nodes→ [b×F] ─dense+ReLU→ [b×h] ─output→ [b×classes]
//! ```
//!
//! Every weight matrix (projection, attention, conv, dense, output) is a
//! prunable latent; biases are dense.

mod checkpoint;

pub use checkpoint::{decode, encode, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::bandstop::{extract_mask, reparametrize};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub nodes: usize,
    /// Node descriptor size `s = 3·M`.
    pub in_channels: usize,
    /// Width of the optional per-node input projection.
    pub projection: Option<usize>,
    pub heads: usize,
    pub filters: usize,
    /// Width of the optional hidden dense layer.
    pub hidden: Option<usize>,
    pub classes: usize,
}

impl GcnConfig {
    /// Two-person SBU-style input (2×15 joints, M = 4) with an 8-channel
    /// encoding, 1 head and 32 filters; the dense width is the largest that
    /// keeps [`GcnConfig::param_count`] within 15,320.
    pub fn sbu() -> Self {
        GcnConfig {
            nodes: 30,
            in_channels: 12,
            projection: Some(8),
            heads: 1,
            filters: 32,
            hidden: Some(342),
            classes: 8,
        }
    }

    /// FPHA-style input (21 hand joints) with 16 heads, 32 channels and 128 filters.
    pub fn fpha() -> Self {
        GcnConfig {
            nodes: 21,
            in_channels: 12,
            projection: Some(32),
            heads: 16,
            filters: 128,
            hidden: Some(256),
            classes: 45,
        }
    }

    /// Small single-head model used on the synthetic benchmark.
    pub fn compact(nodes: usize, in_channels: usize, classes: usize) -> Self {
        GcnConfig {
            nodes,
            in_channels,
            projection: None,
            heads: 1,
            filters: 16,
            hidden: Some(32),
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("nodes", self.nodes),
            ("in_channels", self.in_channels),
            ("heads", self.heads),
            ("filters", self.filters),
            ("classes", self.classes),
            ("projection", self.projection.unwrap_or(1)),
            ("hidden", self.hidden.unwrap_or(1)),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation {
                field: (*name).into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Channels entering the attention block.
    pub fn channels(&self) -> usize {
        self.projection.unwrap_or(self.in_channels)
    }

    /// Features entering the output layer.
    pub fn head_width(&self) -> usize {
        self.hidden.unwrap_or(self.filters)
    }

    /// Declared tensors as `(name, shape, prunable)` in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        if let Some(c) = self.projection {
            out.push(("projection".to_string(), vec![self.in_channels, c], true));
        }
        for h in 0..self.heads {
            out.push((format!("attention.{h}"), vec![self.nodes, self.nodes], true));
        }
        let agg = self.heads * self.channels();
        out.push(("conv.weight".into(), vec![agg, self.filters], true));
        out.push(("conv.bias".into(), vec![self.filters], false));
        if let Some(h) = self.hidden {
            out.push(("dense.weight".into(), vec![self.filters, h], true));
            out.push(("dense.bias".into(), vec![h], false));
        }
        out.push(("output.weight".into(), vec![self.head_width(), self.classes], true));
        out.push(("output.bias".into(), vec![self.classes], false));
        out
    }

    /// Total parameter count (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.layout()
            .iter()
            .filter(|(_, _, p)| *p)
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Recovers a config from checkpoint tensor names and shapes.
    pub fn infer(named: &[(String, Vec<usize>)]) -> Result<Self> {
        let find = |name: &str| named.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let heads = named.iter().filter(|(n, _)| n.starts_with("attention.")).count();
        let attn = find("attention.0").ok_or_else(|| bad("missing attention.0"))?;
        let conv = find("conv.weight").ok_or_else(|| bad("missing conv.weight"))?;
        let output = find("output.weight").ok_or_else(|| bad("missing output.weight"))?;
        let projection = find("projection");
        let dense = find("dense.weight");
        if attn.len() != 2 || conv.len() != 2 || output.len() != 2 || heads == 0 {
            return Err(bad("unexpected tensor ranks"));
        }
        let channels = conv[0] / heads;
        let cfg = GcnConfig {
            nodes: attn[0],
            in_channels: projection.as_ref().map_or(channels, |p| p[0]),
            projection: projection.as_ref().map(|p| p[1]),
            heads,
            filters: conv[1],
            hidden: dense.as_ref().map(|d| d[1]),
            classes: output[1],
        };
        cfg.validate()?;
        let expected: Vec<(String, Vec<usize>)> =
            cfg.layout().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected != named {
            return Err(bad("tensor names or shapes do not form a consistent model"));
        }
        Ok(cfg)
    }
}

/// How prunable weights are gated in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    /// Raw latents.
    Identity,
    /// Band-stop reparametrization `Ŵ ⊙ ψ_{a,σ}(Ŵ)`.
    Soft { threshold: f64, sigma: f64 },
    /// Hard mask `1[|ŵ| > a]`.
    Hard { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub prunable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel<T> {
    config: GcnConfig,
    params: Vec<Param<T>>,
}

/// Leaves and output of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// One leaf per model parameter, in model order.
    pub params: Vec<Var>,
    pub logits: Var,
}

impl<T: Real> GcnModel<T> {
    /// He-uniform `±√(6/fan_in)` initialization, deterministic in `seed`.
    pub fn build(config: GcnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layout()
            .into_iter()
            .map(|(name, shape, prunable)| {
                let fan_in = if shape.len() == 2 { shape[0] } else { fan_in_of_bias(&config, &name) };
                let bound = (6.0 / fan_in as f64).sqrt();
                let len = shape.iter().product();
                let data = (0..len).map(|_| T::of(rng.random_range(-bound..bound))).collect();
                Ok(Param {
                    name,
                    value: Tensor::new(shape, data)?,
                    prunable,
                })
            })
            .collect::<Result<_>>()?;
        Ok(GcnModel { config, params })
    }

    pub fn from_params(config: GcnConfig, params: Vec<Param<T>>) -> Result<Self> {
        let layout = config.layout();
        if layout.len() != params.len()
            || layout
                .iter()
                .zip(&params)
                .any(|((n, s, p), q)| *n != q.name || s.as_slice() != q.value.shape() || *p != q.prunable)
        {
            return Err(Error::Contract("parameters do not match the config layout".into()));
        }
        Ok(GcnModel { config, params })
    }

    pub fn config(&self) -> &GcnConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    /// Prunable latent tensors (the set the histogram and thresholds act on).
    pub fn latents(&self) -> Vec<&Tensor<T>> {
        self.params.iter().filter(|p| p.prunable).map(|p| &p.value).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.latents().iter().map(|t| t.len()).sum()
    }

    /// Prunable weights surviving the hard mask at threshold `a`.
    pub fn active_count(&self, threshold: f64) -> usize {
        let a = T::of(threshold);
        self.latents()
            .iter()
            .flat_map(|t| t.data())
            .filter(|w| w.abs() > a)
            .count()
    }

    pub fn cast<U: Real>(&self) -> GcnModel<U> {
        GcnModel {
            config: self.config,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    prunable: p.prunable,
                })
                .collect(),
        }
    }

    /// Records a forward pass of `input[b×n×s]`; prunable weights go through `gate`.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, gate: Gate) -> Result<ForwardVars> {
        let leaves: Vec<Var> = self.params.iter().map(|p| tape.param(&p.value)).collect();
        self.forward_with(tape, input, &leaves, gate)
    }

    /// Like [`GcnModel::forward`] but reads parameters from existing leaves
    /// (one per model parameter, in model order). Only the shapes of `self`
    /// are used.
    pub fn forward_with(&self, tape: &mut Tape<T>, input: Var, leaves: &[Var], gate: Gate) -> Result<ForwardVars> {
        let shape = tape.shape(input).to_vec();
        let cfg = &self.config;
        if shape.len() != 3 || shape[1] != cfg.nodes || shape[2] != cfg.in_channels {
            return Err(Error::Dimension {
                op: "gcn forward",
                lhs: shape,
                rhs: vec![cfg.nodes, cfg.in_channels],
            });
        }
        if leaves.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter leaves for {} parameters",
                leaves.len(),
                self.params.len()
            )));
        }
        let batch = shape[0];
        let mut effective = Vec::with_capacity(leaves.len());
        for (p, &leaf) in self.params.iter().zip(leaves) {
            if tape.shape(leaf) != p.value.shape() {
                return Err(Error::Dimension {
                    op: "gcn parameter",
                    lhs: tape.shape(leaf).to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            effective.push(if p.prunable { gated(tape, leaf, gate)? } else { leaf });
        }
        let weight = |name: &str| -> Var {
            let i = self.params.iter().position(|p| p.name == name).expect("declared tensor");
            effective[i]
        };

        let n = cfg.nodes;
        let mut x = input;
        if let Some(c) = cfg.projection {
            let flat = tape.reshape(x, &[batch * n, cfg.in_channels])?;
            let proj = tape.matmul(flat, weight("projection"))?;
            x = tape.reshape(proj, &[batch, n, c])?;
        }
        let heads: Vec<Var> = (0..cfg.heads).map(|h| weight(&format!("attention.{h}"))).collect();
        let agg = attention_aggregate(tape, &heads, x)?;
        let flat = tape.reshape(agg, &[batch * n, cfg.heads * cfg.channels()])?;
        let conv = tape.matmul(flat, weight("conv.weight"))?;
        let conv = tape.add_bias(conv, weight("conv.bias"))?;
        let conv = tape.relu(conv);
        let conv = tape.reshape(conv, &[batch, n, cfg.filters])?;
        let mut h = tape.mean_nodes(conv)?;
        if cfg.hidden.is_some() {
            let d = tape.matmul(h, weight("dense.weight"))?;
            let d = tape.add_bias(d, weight("dense.bias"))?;
            h = tape.relu(d);
        }
        let out = tape.matmul(h, weight("output.weight"))?;
        let logits = tape.add_bias(out, weight("output.bias"))?;
        Ok(ForwardVars {
            params: leaves.to_vec(),
            logits,
        })
    }

    /// Class scores for a batch, without keeping the tape.
    pub fn logits(&self, input: &Tensor<T>, gate: Gate) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let vars = self.forward(&mut tape, x, gate)?;
        Ok(tape.tensor(vars.logits))
    }
}

fn fan_in_of_bias(cfg: &GcnConfig, name: &str) -> usize {
    match name {
        "conv.bias" => cfg.heads * cfg.channels(),
        "dense.bias" => cfg.filters,
        _ => cfg.head_width(),
    }
}

fn gated<T: Real>(tape: &mut Tape<T>, leaf: Var, gate: Gate) -> Result<Var> {
    match gate {
        Gate::Identity => Ok(leaf),
        Gate::Soft { threshold, sigma } => reparametrize(tape, leaf, threshold, sigma),
        Gate::Hard { threshold } => {
            let latent = tape.tensor(leaf);
            let mask = tape.constant(&extract_mask(&latent, threshold)?);
            tape.hadamard(leaf, mask)
        }
    }
}

/// `out_h = A_h · x` for every head, concatenated along channels:
/// `x[b×n×s] → [b×n×(heads·s)]`.
pub fn attention_aggregate<T: Real>(tape: &mut Tape<T>, heads: &[Var], x: Var) -> Result<Var> {
    let mixed = heads
        .iter()
        .map(|&a| tape.node_mix(a, x))
        .collect::<Result<Vec<_>>>()?;
    if mixed.len() == 1 {
        return Ok(mixed[0]);
    }
    tape.concat_last(&mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;
    use rand::Rng;
    use proptest::prelude::*;

    fn toy() -> GcnConfig {
        GcnConfig {
            nodes: 4,
            in_channels: 3,
            projection: None,
            heads: 2,
            filters: 5,
            hidden: Some(4),
            classes: 2,
        }
    }

    fn input(batch: usize, cfg: &GcnConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = batch * cfg.nodes * cfg.in_channels;
        Tensor::new(
            vec![batch, cfg.nodes, cfg.in_channels],
            (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sbu_count_within_bound() {
        let cfg = GcnConfig::sbu();
        assert_eq!(cfg.param_count(), 15_314);
        assert!(cfg.param_count() <= 15_320);
        // one more hidden unit would break the bound
        let wider = GcnConfig { hidden: Some(343), ..cfg };
        assert!(wider.param_count() > 15_320);
        let m = GcnModel::<f64>::build(cfg, 0).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
    }

    #[test]
    fn fpha_shapes() {
        let cfg = GcnConfig::fpha();
        let m = GcnModel::<f32>::build(cfg, 0).unwrap();
        assert_eq!(m.param("conv.weight").unwrap().shape(), &[16 * 32, 128]);
        assert_eq!(m.params().iter().filter(|p| p.name.starts_with("attention.")).count(), 16);
    }

    #[test]
    fn count_formula_matches_tensors() {
        let cfg = toy();
        // 2·4·4 + (6·5 + 5) + (5·4 + 4) + (4·2 + 2)
        assert_eq!(cfg.param_count(), 32 + 35 + 24 + 10);
        assert_eq!(cfg.prunable_count(), 32 + 30 + 20 + 8);
        let m = GcnModel::<f64>::build(cfg, 1).unwrap();
        assert_eq!(m.prunable_count(), cfg.prunable_count());
        assert_eq!(m.active_count(0.0), cfg.prunable_count());
    }

    #[test]
    fn deterministic_init() {
        let a = GcnModel::<f64>::build(toy(), 9).unwrap();
        let b = GcnModel::<f64>::build(toy(), 9).unwrap();
        let c = GcnModel::<f64>::build(toy(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(a.param("attention.0").unwrap().data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(GcnModel::<f64>::build(GcnConfig { heads: 0, ..toy() }, 0).is_err());
        assert!(GcnModel::<f64>::build(GcnConfig { hidden: Some(0), ..toy() }, 0).is_err());
    }

    #[test]
    fn aggregate_identity_and_mean() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let xv = tape.constant(&x);
        let eye = tape.constant(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = attention_aggregate(&mut tape, &[eye, eye], xv).unwrap();
        assert_eq!(tape.shape(out), &[1, 2, 4]);
        assert_eq!(tape.value(out), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);

        let avg = tape.constant(&Tensor::full(&[2, 2], 0.5));
        let out = attention_aggregate(&mut tape, &[avg], xv).unwrap();
        assert_eq!(tape.value(out), &[2.0, 3.0, 2.0, 3.0]);

        // [[2, -1], [0.5, 3]] · [[1, 2], [3, 4]]
        let a = tape.constant(&Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.5, 3.0]).unwrap());
        let out = attention_aggregate(&mut tape, &[a], xv).unwrap();
        assert_eq!(tape.value(out), &[-1.0, 0.0, 9.5, 13.0]);

        let wrong = tape.constant(&Tensor::<f64>::zeros(&[3, 3]));
        assert!(attention_aggregate(&mut tape, &[wrong], xv).is_err());
    }

    #[test]
    fn zero_input_gives_bias_driven_logits() {
        let m = GcnModel::<f64>::build(toy(), 2).unwrap();
        let zero = Tensor::zeros(&[2, 4, 3]);
        let logits = m.logits(&zero, Gate::Identity).unwrap();
        // conv output is relu(conv.bias) everywhere, so both samples agree
        let relu = |v: &[f64]| v.iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        let conv = relu(m.param("conv.bias").unwrap().data());
        let dw = m.param("dense.weight").unwrap().data();
        let mut dense = m.param("dense.bias").unwrap().data().to_vec();
        for (i, c) in conv.iter().enumerate() {
            for (j, d) in dense.iter_mut().enumerate() {
                *d += c * dw[i * 4 + j];
            }
        }
        let dense = relu(&dense);
        let ow = m.param("output.weight").unwrap().data();
        let mut want = m.param("output.bias").unwrap().data().to_vec();
        for (i, d) in dense.iter().enumerate() {
            for (j, o) in want.iter_mut().enumerate() {
                *o += d * ow[i * 2 + j];
            }
        }
        for b in 0..2 {
            for j in 0..2 {
                assert!((logits.data()[b * 2 + j] - want[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_of_logits_sums_to_one() {
        let m = GcnModel::<f64>::build(GcnConfig::sbu(), 3).unwrap();
        let x = input(3, &GcnConfig::sbu(), 4);
        let logits = m.logits(&x, Gate::Soft { threshold: 0.05, sigma: 10.0 }).unwrap();
        for row in softmax_rows(logits.data(), 8).chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unpruned_mask_matches_near_unit_gate() {
        // a = 0: ψ = 1/(1 + σ e^{-σw²}) ∈ [1/(1+σ), 1], so small σ leaves weights almost intact
        let m = GcnModel::<f64>::build(toy(), 5).unwrap();
        let x = input(2, &toy(), 6);
        let hard = m.logits(&x, Gate::Hard { threshold: 0.0 }).unwrap();
        assert_eq!(hard, m.logits(&x, Gate::Identity).unwrap());
        let soft = m.logits(&x, Gate::Soft { threshold: 0.0, sigma: 1e-4 }).unwrap();
        for (s, h) in soft.data().iter().zip(hard.data()) {
            assert!((s - h).abs() <= 1e-3 * h.abs().max(1e-2), "{s} vs {h}");
        }
    }

    #[test]
    fn hard_gate_zeroes_small_weights() {
        let m = GcnModel::<f64>::build(toy(), 5).unwrap();
        let x = input(1, &toy(), 6);
        let everything = m.logits(&x, Gate::Hard { threshold: 10.0 }).unwrap();
        let mut stripped = m.clone();
        for p in stripped.params_mut() {
            if p.prunable {
                p.value.data_mut().iter_mut().for_each(|w| *w = 0.0);
            }
        }
        assert_eq!(everything, stripped.logits(&x, Gate::Identity).unwrap());
    }

    #[test]
    fn input_shape_checked() {
        let m = GcnModel::<f64>::build(toy(), 5).unwrap();
        assert!(m.logits(&Tensor::zeros(&[1, 5, 3]), Gate::Identity).is_err());
    }

    proptest! {
        #[test]
        fn node_permutation_consistency(seed in 0u64..1000, perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let cfg = GcnConfig { projection: Some(2), ..toy() };
            let m = GcnModel::<f64>::build(cfg, seed).unwrap();
            let x = input(2, &cfg, seed + 1);
            let n = cfg.nodes;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));

            // x'[b][i] = x[b][perm[i]],  A'[i][j] = A[perm[i]][perm[j]]
            let s = cfg.in_channels;
            let mut xp = x.clone();
            for b in 0..2 {
                for i in 0..n {
                    for c in 0..s {
                        xp.data_mut()[(b * n + i) * s + c] = x.data()[(b * n + perm[i]) * s + c];
                    }
                }
            }
            let mut mp = m.clone();
            for h in 0..cfg.heads {
                let name = format!("attention.{h}");
                let a = m.param(&name).unwrap().clone();
                let ap = mp.param_mut(&name).unwrap();
                for i in 0..n {
                    for j in 0..n {
                        ap.data_mut()[i * n + j] = a.data()[perm[i] * n + perm[j]];
                    }
                }
            }
            let gate = Gate::Soft { threshold: 0.1, sigma: 5.0 };
            let l1 = m.logits(&x, gate).unwrap();
            let l2 = mp.logits(&xp, gate).unwrap();
            for (a, b) in l1.data().iter().zip(l2.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
