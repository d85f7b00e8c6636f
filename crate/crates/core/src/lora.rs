//! Low-rank adapters for frozen base projections.
//!
//! An adapter on a base weight `W0` (out × in) holds `A` (out × r) and
//! `B` (in × r) and contributes `s·A·Bᵀ` with `s = alpha / r`. `B` starts at
//! zero, so attaching adapters changes nothing until training moves it. The
//! training path stays factored — `(drop(x)·B)·Aᵀ` — and never materializes
//! the dense delta; merging folds `s·A·Bᵀ` into the base weight for
//! adapter-free inference.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    /// Name of the base projection this adapter sits on.
    pub site: String,
    pub base: ParamId,
    pub a: ParamId,
    pub b: ParamId,
}

/// All adapters of a model plus the shared hyperparameters.
#[derive(Debug, Clone)]
pub struct LoraSet {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub adapters: Vec<LoraAdapter>,
}

/// Serialized description, stored in checkpoint manifests so adapters can be
/// re-attached before loading their values.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoraMeta {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub sites: Vec<String>,
}

impl LoraSet {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn find(&self, site: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.site == site)
    }

    pub fn meta(&self) -> LoraMeta {
        LoraMeta {
            rank: self.rank,
            alpha: self.alpha,
            dropout_p: self.dropout_p,
            sites: self.adapters.iter().map(|a| a.site.clone()).collect(),
        }
    }

    /// Trainable adapter parameter count: `sum over sites of r·(d + d')`.
    pub fn trainable_params(&self, store: &ParamStore) -> usize {
        self.adapters
            .iter()
            .map(|ad| store.value(ad.a).numel() + store.value(ad.b).numel())
            .sum()
    }
}

/// Attach fresh adapters to the given sites. `A` is Gaussian (std 0.02) to
/// break symmetry, `B` is zero so the attach itself is output-neutral.
pub fn attach(
    store: &mut ParamStore,
    sites: &[(String, ParamId)],
    rank: usize,
    alpha: f64,
    dropout_p: f64,
    rng: &mut SplitMix64,
) -> Result<LoraSet> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be at least 1".into()));
    }
    let mut adapters = Vec::with_capacity(sites.len());
    for (site, base) in sites {
        let w0 = store.value(*base);
        if w0.shape().len() != 2 {
            return Err(Error::Config(format!(
                "adapter site {site} is not a matrix (shape {:?})",
                w0.shape()
            )));
        }
        let (d_out, d_in) = (w0.shape()[0], w0.shape()[1]);
        if rank > d_out.min(d_in) {
            return Err(Error::Config(format!(
                "adapter rank {rank} exceeds min dimension of {site} ({d_out}x{d_in})"
            )));
        }
        let a = store.add(
            &format!("lora.{site}.a"),
            Tensor::randn(vec![d_out, rank], 0.02, rng),
        );
        let b = store.add(&format!("lora.{site}.b"), Tensor::zeros(vec![d_in, rank]));
        adapters.push(LoraAdapter { site: site.clone(), base: *base, a, b });
    }
    Ok(LoraSet { rank, alpha, dropout_p, adapters })
}

/// Adapted projection: `y = x·W0ᵀ + s·(drop(x)·B)·Aᵀ`. Dropout applies to the
/// adapter input only and only while training.
pub fn apply(
    tape: &mut Tape,
    store: &ParamStore,
    set: &LoraSet,
    adapter: &LoraAdapter,
    x: NodeId,
    training: bool,
    rng: &mut SplitMix64,
) -> Result<NodeId> {
    let w0 = tape.param(store, adapter.base);
    let base = tape.matmul_tb(x, w0)?;
    let a = tape.param(store, adapter.a);
    let b = tape.param(store, adapter.b);
    let adapter_in = if training && set.dropout_p > 0.0 {
        let keep = 1.0 - set.dropout_p;
        let shape = tape.value(x).shape().to_vec();
        let numel = tape.value(x).numel();
        let mask_data: Vec<f64> = (0..numel)
            .map(|_| if rng.next_f64() < set.dropout_p { 0.0 } else { 1.0 / keep })
            .collect();
        let mask = Tensor::new(shape, mask_data)?;
        tape.mul_const(x, &mask)?
    } else {
        x
    };
    let xb = tape.matmul(adapter_in, b)?;
    let path = tape.matmul_tb(xb, a)?;
    let scaled = tape.affine(path, set.scaling(), 0.0);
    tape.add(base, scaled)
}

/// Merged weight for one site: `W0 + s·A·Bᵀ`.
pub fn merged_weight(store: &ParamStore, set: &LoraSet, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = store
        .value(adapter.a)
        .matmul_tb(store.value(adapter.b))?
        .scale(set.scaling());
    store.value(adapter.base).add(&delta)
}
