//! Independent reference implementations.
//!
//! Everything here is written as plain sequential loops, deliberately not
//! sharing code with the main paths it is used to check (or benchmark
//! against). Tests compare the optimized implementations to these; the
//! criterion suite uses them as the sequential baseline.

use crate::tensor::{sigmoid, Tensor};

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    assert_eq!(k, b.shape()[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// Plain weights of one two-matrix feed-forward network, for reference math.
#[derive(Debug, Clone)]
pub struct FfnRef {
    pub w1: Tensor, // hidden × d
    pub b1: Tensor, // hidden
    pub w2: Tensor, // d × hidden
    pub b2: Tensor, // d
}

fn ffn_ref_token(ffn: &FfnRef, x: &[f64]) -> Vec<f64> {
    let hidden = ffn.w1.shape()[0];
    let d = ffn.w1.shape()[1];
    let mut h = vec![0.0; hidden];
    for i in 0..hidden {
        let mut acc = ffn.b1.data()[i];
        for j in 0..d {
            acc += ffn.w1.data()[i * d + j] * x[j];
        }
        let s = sigmoid(acc);
        h[i] = acc * s;
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = ffn.b2.data()[i];
        for j in 0..hidden {
            acc += ffn.w2.data()[i * hidden + j] * h[j];
        }
        y[i] = acc;
    }
    y
}

/// Token-by-token, expert-by-expert evaluation of the dual-path layer:
/// `y = alpha * static(x) + (1-alpha) * (lambda * shared(x) + sum_i g_i * expert_i(x))`
/// with top-k selection on router logits (ties to the lowest expert index)
/// and gates renormalized over the selected logits only.
#[allow(clippy::too_many_arguments)]
pub fn moe_reference(
    x: &Tensor,
    static_ffn: &FfnRef,
    shared: &FfnRef,
    experts: &[FfnRef],
    router: &Tensor, // E × d
    alpha: f64,
    lambda: f64,
    k: usize,
) -> Tensor {
    let tokens = x.shape()[0];
    let d = x.shape()[1];
    let n_experts = experts.len();
    let mut out = vec![0.0; tokens * d];
    for t in 0..tokens {
        let xt = &x.data()[t * d..(t + 1) * d];
        // router logits for this token
        let mut logits = vec![0.0; n_experts];
        for (e, l) in logits.iter_mut().enumerate() {
            for j in 0..d {
                *l += router.data()[e * d + j] * xt[j];
            }
        }
        // top-k, ties to the lowest index
        let mut order: Vec<usize> = (0..n_experts).collect();
        order.sort_by(|&a, &b| {
            logits[b]
                .partial_cmp(&logits[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let selected = &order[..k];
        // softmax over the selected logits
        let max = selected
            .iter()
            .map(|&e| logits[e])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut gates = vec![0.0; k];
        let mut z = 0.0;
        for (j, &e) in selected.iter().enumerate() {
            gates[j] = (logits[e] - max).exp();
            z += gates[j];
        }
        for gv in &mut gates {
            *gv /= z;
        }

        let stat = ffn_ref_token(static_ffn, xt);
        let sh = ffn_ref_token(shared, xt);
        let mut routed = vec![0.0; d];
        for (j, &e) in selected.iter().enumerate() {
            let ye = ffn_ref_token(&experts[e], xt);
            for i in 0..d {
                routed[i] += gates[j] * ye[i];
            }
        }
        for i in 0..d {
            out[t * d + i] = alpha * stat[i] + (1.0 - alpha) * (lambda * sh[i] + routed[i]);
        }
    }
    Tensor::new(vec![tokens, d], out).unwrap()
}

/// Full-table longest common subsequence length, classic textbook recurrence.
pub fn lcs_table(a: &[String], b: &[String]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[n][m]
}

/// ROUGE-L F1 built on the full-table LCS.
pub fn rouge_l_table(a: &[String], b: &[String]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let lcs = lcs_table(a, b) as f64;
    let p = lcs / a.len() as f64;
    let r = lcs / b.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Second simhash implementation: iterates bit positions on the outside and
/// features on the inside, counting set against unset hashes per bit.
pub fn simhash_bitwise(feature_hashes: &[u64]) -> u64 {
    let mut out = 0u64;
    for bit in 0..64 {
        let mut set = 0usize;
        let mut unset = 0usize;
        for h in feature_hashes {
            if (h >> bit) & 1 == 1 {
                set += 1;
            } else {
                unset += 1;
            }
        }
        if set > unset {
            out |= 1u64 << bit;
        }
    }
    out
}
