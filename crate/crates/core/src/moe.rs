//! Low-rank expert bank on the network's block pointwise convolutions.
//!
//! Every 1x1 convolution inside a block gains `n` expert pairs `(A_i, B_i)`
//! of rank `r`; the effective weight under a gate is
//! `W0 + sum_i w'_i * s * B_i A_i` with `s = alpha / r`. `B` is
//! zero-initialized, so a freshly initialized bank leaves the network
//! bit-identical to its pre-trained base.

use ndarray::{Array2, ArrayD};
use serde::{Deserialize, Serialize};

use crate::autograd::{c, Element};
use crate::error::{Error, Result};
use crate::net::{MoeContext, Net};
use crate::params::{randn_init, zeros};
use crate::router::GateDecision;
use crate::seeds;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    /// Expert count; must equal the router's class count.
    pub n: usize,
    /// Active experts per image.
    pub k: usize,
    /// Low-rank dimension r.
    pub rank: usize,
    /// Scale numerator; s = alpha / r.
    pub alpha: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig { n: 6, k: 2, rank: 4, alpha: 8.0 }
    }
}

impl MoeConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n {
            return Err(Error::KOutOfRange { k: self.k, n: self.n });
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be >= 1".into()));
        }
        Ok(())
    }
}

/// Attach `n` zero-delta experts to every block pointwise convolution and
/// freeze everything else: afterwards only expert parameters are trainable.
pub fn init_experts<E: Element>(net: &mut Net<E>, cfg: &MoeConfig, seed: u64) -> Result<()> {
    cfg.validate()?;
    if net.experts.is_some() {
        return Err(Error::ExpertsAlreadyPresent);
    }
    net.params.freeze_all();
    let sites = net.lora_sites();
    let mut rng = seeds::rng(seed, "moe-init", 0);
    for site in &sites {
        let w_shape = net.params.get(&format!("{site}/w")).shape().to_vec();
        let (out_ch, in_ch) = (w_shape[0], w_shape[1]);
        let std = 1.0 / (in_ch as f64).sqrt();
        for i in 0..cfg.n {
            net.params.insert(
                &format!("experts/{site}/{i}/A"),
                randn_init(&mut rng, &[cfg.rank, in_ch], std),
                true,
            );
            net.params.insert(
                &format!("experts/{site}/{i}/B"),
                zeros(&[out_ch, cfg.rank]),
                true,
            );
        }
    }
    net.experts = Some(cfg.n);
    Ok(())
}

/// Trainable parameter count of the bank: `sum_sites n*r*(in+out)`.
pub fn expert_param_count<E: Element>(net: &Net<E>) -> usize {
    net.params
        .trainable_paths()
        .filter(|p| p.starts_with("experts/"))
        .map(|p| net.params.get(p).len())
        .sum()
}

/// `W0 + s * B_i A_i` for one site, as a plain matrix. Pure: the net is not
/// mutated.
pub fn merge_expert<E: Element>(
    net: &Net<E>,
    cfg: &MoeConfig,
    site: &str,
    i: usize,
) -> Result<Array2<E>> {
    let n = net.experts.ok_or(Error::MissingWeights("no expert bank".into()))?;
    if i >= n {
        return Err(Error::ExpertIndexOutOfRange { index: i, n });
    }
    let w0: Array2<E> = net
        .params
        .get(&format!("{site}/w"))
        .clone()
        .into_dimensionality()
        .unwrap();
    let a: Array2<E> = net
        .params
        .get(&format!("experts/{site}/{i}/A"))
        .clone()
        .into_dimensionality()
        .unwrap();
    let b: Array2<E> = net
        .params
        .get(&format!("experts/{site}/{i}/B"))
        .clone()
        .into_dimensionality()
        .unwrap();
    let s: E = c(cfg.scale());
    Ok(w0 + b.dot(&a).mapv(|v| v * s))
}

/// Expand one per-image gate decision into the per-sample dense context used
/// by the forward pass (all crops of the batch share the same gate).
pub fn gate_context<E: Element>(gate: &GateDecision, batch: usize, cfg: &MoeConfig) -> MoeContext<E> {
    let n = gate.dense.len();
    let mut g = Array2::<E>::zeros((batch, n));
    for b in 0..batch {
        for (j, &w) in gate.dense.iter().enumerate() {
            g[(b, j)] = c(f64::from(w));
        }
    }
    MoeContext { n, scale: c(cfg.scale()), gate: g }
}

/// Per-sample gates (one `GateDecision` per batch row).
pub fn gate_context_rows<E: Element>(gates: &[GateDecision], cfg: &MoeConfig) -> MoeContext<E> {
    let n = gates[0].dense.len();
    let mut g = Array2::<E>::zeros((gates.len(), n));
    for (b, gate) in gates.iter().enumerate() {
        for (j, &w) in gate.dense.iter().enumerate() {
            g[(b, j)] = c(f64::from(w));
        }
    }
    MoeContext { n, scale: c(cfg.scale()), gate: g }
}

/// Serialize the bank into container arrays (`experts/<site>/<i>/{A,B}`).
pub fn export_experts<E: Element>(net: &Net<E>) -> Vec<(String, ArrayD<f32>)> {
    net.params
        .iter()
        .filter(|(p, _)| p.starts_with("experts/"))
        .map(|(p, v)| {
            (
                p.to_string(),
                v.mapv(|x| <f32 as num_traits::NumCast>::from(x).unwrap()),
            )
        })
        .collect()
}
