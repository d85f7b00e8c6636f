//! Dual-path mixture-of-experts layer.
//!
//! The layer mixes a permanently frozen feed-forward copy (the anchor that
//! preserves whatever the base weights encode) with a trainable side:
//! a shared expert applied to every token plus a battery of routing experts
//! sparsely selected per token by a top-k gate:
//!
//! ```text
//! y = alpha * static(x) + (1 - alpha) * (lambda * shared(x) + sum_i g_i * expert_i(x))
//! ```
//!
//! Gates renormalize over the selected logits only; the full softmax over
//! all experts feeds the mean gating probability G used by the
//! load-balancing penalty `sum_e F_e * G_e`, where the dispatch ratio F is a
//! counting measure treated as constant during backpropagation.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which stream a token came from, for per-modality routing statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Per-token routing outcome: selected expert indices in rank order, gate
/// weights renormalized over the selection, and the full-distribution
/// probabilities over all experts.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    pub n_experts: usize,
    pub top_k: usize,
    pub selected: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
    pub full_probs: Tensor,
}

impl RoutingDecision {
    pub fn n_tokens(&self) -> usize {
        self.selected.len()
    }
}

/// Select the top-k experts per token. Ties break toward the lowest expert
/// index. Gates are a softmax over the selected logits only; the full
/// softmax over all logits is kept alongside.
pub fn route_topk(logits: &Tensor, k: usize) -> Result<RoutingDecision> {
    let n_experts = logits.cols();
    let tokens = logits.rows();
    if k == 0 || k > n_experts {
        return Err(Error::Config(format!(
            "top-k of {k} with {n_experts} experts (need 1 <= k <= experts)"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Data("routing logits contain non-finite values".into()));
    }
    let mut selected = Vec::with_capacity(tokens);
    let mut gates = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let row = &logits.data()[t * n_experts..(t + 1) * n_experts];
        let mut order: Vec<usize> = (0..n_experts).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let sel: Vec<usize> = order[..k].to_vec();
        let max = sel.iter().map(|&e| row[e]).fold(f64::NEG_INFINITY, f64::max);
        let mut g: Vec<f64> = sel.iter().map(|&e| (row[e] - max).exp()).collect();
        let z: f64 = g.iter().sum();
        for v in &mut g {
            *v /= z;
        }
        selected.push(sel);
        gates.push(g);
    }
    let full_probs = logits.softmax(logits.shape().len() - 1)?;
    Ok(RoutingDecision { n_experts, top_k: k, selected, gates, full_probs })
}

/// Batch routing statistics: dispatch ratios F, mean gating probabilities G,
/// and the dispatch split between image and text tokens.
#[derive(Debug, Clone)]
pub struct DispatchStats {
    pub top_k: usize,
    pub n_tokens: usize,
    pub n_image: usize,
    pub n_text: usize,
    /// F_e: fraction of batch tokens routed to expert e.
    pub dispatch: Vec<f64>,
    /// G_e: batch mean of expert e's full-softmax probability.
    pub mean_gate: Vec<f64>,
    /// F over image tokens only (zeros when the batch has none).
    pub dispatch_image: Vec<f64>,
    /// F over text tokens only (zeros when the batch has none).
    pub dispatch_text: Vec<f64>,
}

/// Aggregate a routing decision into dispatch statistics.
pub fn dispatch_stats(decision: &RoutingDecision, modality: &[Modality]) -> Result<DispatchStats> {
    let n = decision.n_tokens();
    if n == 0 {
        return Err(Error::Contract("dispatch_stats over an empty batch".into()));
    }
    if modality.len() != n {
        return Err(Error::Dimension(format!(
            "dispatch_stats: {} modality tags for {n} tokens",
            modality.len()
        )));
    }
    let e_count = decision.n_experts;
    let mut counts = vec![0usize; e_count];
    let mut counts_image = vec![0usize; e_count];
    let mut counts_text = vec![0usize; e_count];
    for (t, sel) in decision.selected.iter().enumerate() {
        for &e in sel {
            counts[e] += 1;
            match modality[t] {
                Modality::Image => counts_image[e] += 1,
                Modality::Text => counts_text[e] += 1,
            }
        }
    }
    let n_image = modality.iter().filter(|m| **m == Modality::Image).count();
    let n_text = n - n_image;
    let ratio = |c: &[usize], denom: usize| -> Vec<f64> {
        if denom == 0 {
            vec![0.0; e_count]
        } else {
            c.iter().map(|&v| v as f64 / denom as f64).collect()
        }
    };
    let mut mean_gate = vec![0.0; e_count];
    for t in 0..n {
        for (e, mg) in mean_gate.iter_mut().enumerate() {
            *mg += decision.full_probs.data()[t * e_count + e];
        }
    }
    for mg in &mut mean_gate {
        *mg /= n as f64;
    }
    Ok(DispatchStats {
        top_k: decision.top_k,
        n_tokens: n,
        n_image,
        n_text,
        dispatch: ratio(&counts, n),
        mean_gate,
        dispatch_image: ratio(&counts_image, n_image),
        dispatch_text: ratio(&counts_text, n_text),
    })
}

/// Load-balancing penalty: `sum_e F_e * G_e`.
pub fn balance_loss(stats: &DispatchStats) -> f64 {
    stats
        .dispatch
        .iter()
        .zip(&stats.mean_gate)
        .map(|(f, g)| f * g)
        .sum()
}

/// Parameter handles of one two-matrix feed-forward network with a smooth
/// nonlinearity, plus an optional linear bypass term used by tests that need
/// an exactly-identity expert.
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId, // hidden × d_in
    pub b1: ParamId, // hidden
    pub w2: ParamId, // d_out × hidden
    pub b2: ParamId, // d_out
    pub bypass: Option<ParamId>, // d_out × d_in
}

impl FfnParams {
    /// Weights are fan-in scaled: each matrix gets std `gain / sqrt(fan_in)`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        gain: f64,
        rng: &mut SplitMix64,
    ) -> Self {
        let std1 = gain / (d_in as f64).sqrt();
        let std2 = gain / (hidden as f64).sqrt();
        FfnParams {
            w1: store.add(&format!("{prefix}.w1"), Tensor::randn(vec![hidden, d_in], std1, rng)),
            b1: store.add(&format!("{prefix}.b1"), Tensor::zeros(vec![hidden])),
            w2: store.add(&format!("{prefix}.w2"), Tensor::randn(vec![d_out, hidden], std2, rng)),
            b2: store.add(&format!("{prefix}.b2"), Tensor::zeros(vec![d_out])),
            bypass: None,
        }
    }

    /// Forward through the tape: `y = silu(x·w1ᵀ + b1)·w2ᵀ + b2 [+ x·bypassᵀ]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul_tb(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.silu(h);
        let y = tape.matmul_tb(h, w2)?;
        let mut y = tape.add_row_bias(y, b2)?;
        if let Some(bp) = self.bypass {
            let bpn = tape.param(store, bp);
            let shortcut = tape.matmul_tb(x, bpn)?;
            y = tape.add(y, shortcut)?;
        }
        Ok(y)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w1, self.b1, self.w2, self.b2];
        if let Some(bp) = self.bypass {
            ids.push(bp);
        }
        ids
    }
}

/// The dual-path layer: frozen static FFN, shared expert, routing experts,
/// router, and the two learnable mixing scalars (stored unconstrained, read
/// through a sigmoid). `force_alpha` / `force_lambda` pin the mixing scalar
/// to an exact constant, bypassing the sigmoid; the forced value multiplies
/// through exactly (forcing alpha to 1 zeroes the trainable side bitwise).
#[derive(Debug, Clone)]
pub struct DualPathMoe {
    pub d_model: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub static_ffn: FfnParams,
    pub shared: FfnParams,
    pub experts: Vec<FfnParams>,
    pub router: ParamId, // E × d_model
    pub alpha_raw: ParamId,
    pub lambda_raw: ParamId,
    pub force_alpha: Option<f64>,
    pub force_lambda: Option<f64>,
}

/// Output of one forward pass through the layer.
pub struct MoeForwardOut {
    pub y: NodeId,
    /// Full-softmax probabilities as a tape node (tokens × E) so the
    /// balancing loss can differentiate through the router.
    pub probs: NodeId,
    pub decision: RoutingDecision,
}

impl DualPathMoe {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_experts: usize,
        top_k: usize,
        expert_hidden: usize,
        shared_hidden: usize,
        gain: f64,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        if n_experts == 0 || top_k == 0 || top_k > n_experts {
            return Err(Error::Config(format!(
                "expert count {n_experts} with top-k {top_k}"
            )));
        }
        // Base FFN width convention: the frozen anchor matches the base
        // block (4x model width); the shared expert gets its own width.
        let static_ffn = FfnParams::init(
            store,
            &format!("{prefix}.static"),
            d_model,
            4 * d_model,
            d_model,
            gain,
            rng,
        );
        let shared = FfnParams::init(
            store,
            &format!("{prefix}.shared"),
            d_model,
            shared_hidden,
            d_model,
            gain,
            rng,
        );
        let experts = (0..n_experts)
            .map(|e| {
                FfnParams::init(
                    store,
                    &format!("{prefix}.expert{e}"),
                    d_model,
                    expert_hidden,
                    d_model,
                    gain,
                    rng,
                )
            })
            .collect();
        let router = store.add(
            &format!("{prefix}.router"),
            Tensor::randn(vec![n_experts, d_model], gain / (d_model as f64).sqrt(), rng),
        );
        // Raw 0 puts both mixing scalars at 0.5, so every path gets gradient
        // signal from the first step.
        let alpha_raw = store.add(&format!("{prefix}.alpha"), Tensor::scalar(0.0));
        let lambda_raw = store.add(&format!("{prefix}.lambda"), Tensor::scalar(0.0));
        // The anchor is frozen from the moment it exists.
        let moe = DualPathMoe {
            d_model,
            n_experts,
            top_k,
            static_ffn,
            shared,
            experts,
            router,
            alpha_raw,
            lambda_raw,
            force_alpha: None,
            force_lambda: None,
        };
        for id in moe.static_ffn.param_ids() {
            store.set_frozen(id, true);
        }
        Ok(moe)
    }

    fn mixing_scalar(
        tape: &mut Tape,
        store: &ParamStore,
        raw: ParamId,
        force: Option<f64>,
    ) -> NodeId {
        match force {
            Some(v) => tape.scalar(v),
            None => {
                let r = tape.param(store, raw);
                tape.sigmoid(r)
            }
        }
    }

    /// Forward pass over a token matrix (tokens × d_model).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<MoeForwardOut> {
        let d = tape.value(x).cols();
        if d != self.d_model {
            return Err(Error::Dimension(format!(
                "dual-path layer of width {} applied to tokens of width {d}",
                self.d_model
            )));
        }
        let router = tape.param(store, self.router);
        let logits = tape.matmul_tb(x, router)?;
        let decision = route_topk(tape.value(logits), self.top_k)?;
        let probs = tape.row_softmax(logits)?;

        // Gates over the selected logits only, then scattered into a dense
        // tokens × E matrix whose unselected entries are structural zeros.
        let picked = tape.gather_per_row(logits, &decision.selected)?;
        let gates = tape.row_softmax(picked)?;
        let dense_gates = tape.scatter_per_row(gates, &decision.selected, self.n_experts)?;

        let alpha = Self::mixing_scalar(tape, store, self.alpha_raw, self.force_alpha);
        let lambda = Self::mixing_scalar(tape, store, self.lambda_raw, self.force_lambda);
        let one_minus_alpha = tape.affine(alpha, -1.0, 1.0);

        let static_y = self.static_ffn.forward(tape, store, x)?;
        let shared_y = self.shared.forward(tape, store, x)?;

        let mut routed: Option<NodeId> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let expert_y = expert.forward(tape, store, x)?;
            let gate_col = tape.slice_cols(dense_gates, e, 1)?;
            let weighted = tape.col_broadcast_mul(expert_y, gate_col)?;
            routed = Some(match routed {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let routed = routed.expect("at least one expert");

        let shared_term = tape.mul_scalar(shared_y, lambda)?;
        let inner = tape.add(shared_term, routed)?;
        let anchored = tape.mul_scalar(static_y, alpha)?;
        let active = tape.mul_scalar(inner, one_minus_alpha)?;
        let y = tape.add(anchored, active)?;
        Ok(MoeForwardOut { y, probs, decision })
    }

    /// Every parameter of the layer, anchor included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.static_ffn.param_ids();
        ids.extend(self.shared.param_ids());
        for e in &self.experts {
            ids.extend(e.param_ids());
        }
        ids.push(self.router);
        ids.push(self.alpha_raw);
        ids.push(self.lambda_raw);
        ids
    }
}
