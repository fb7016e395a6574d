//! Recurrent, convolutional-recurrent, and graph-convolution building blocks
//! assembled from tape primitives, so their gradients come for free.

use alloc::vec::Vec;

use super::tape::{AdResult, Tape, Var};
use super::tensor::{Real, Tensor};

/// Gate weights for one LSTM direction. The gate axis is ordered
/// input, forget, cell, output.
pub struct LstmWeights {
    /// (input_dim, 4·hidden)
    pub w_x: Var,
    /// (hidden, 4·hidden)
    pub w_h: Var,
    /// (4·hidden)
    pub b: Var,
    pub hidden: usize,
}

/// One LSTM step. `x` is rank-1 (input_dim); states are rank-1 (hidden).
pub fn lstm_cell<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &LstmWeights,
) -> AdResult<(Var, Var)> {
    let zx = tape.matmul(x, w.w_x)?;
    let zh = tape.matmul(h_prev, w.w_h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add(z, w.b)?;
    let h = w.hidden;
    let i = tape.slice_last(z, 0, h)?;
    let i = tape.sigmoid(i);
    let f = tape.slice_last(z, h, h)?;
    let f = tape.sigmoid(f);
    let g = tape.slice_last(z, 2 * h, h)?;
    let g = tape.tanh(g);
    let o = tape.slice_last(z, 3 * h, h)?;
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// Runs an LSTM over `xs` from zero states; returns the hidden state at
/// every step.
pub fn lstm_scan<F: Real>(
    tape: &mut Tape<F>,
    xs: &[Var],
    w: &LstmWeights,
) -> AdResult<Vec<Var>> {
    let mut h = tape.constant(Tensor::zeros(alloc::vec![w.hidden]));
    let mut c = tape.constant(Tensor::zeros(alloc::vec![w.hidden]));
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        let (nh, nc) = lstm_cell(tape, x, h, c, w)?;
        h = nh;
        c = nc;
        out.push(h);
    }
    Ok(out)
}

/// Output of a (possibly stacked) bidirectional LSTM.
pub struct BiLstmOut {
    /// Per-step concatenation `[h_fwd_t ‖ h_bwd_t]` from the last layer.
    pub outputs: Vec<Var>,
    /// Final state of the forward direction (last step).
    pub final_fwd: Var,
    /// Final state of the backward direction (its own last step, position 0).
    pub final_bwd: Var,
}

/// Stacked bidirectional LSTM; layer `l+1` consumes the per-step concatenated
/// outputs of layer `l`.
pub fn bilstm<F: Real>(
    tape: &mut Tape<F>,
    xs: &[Var],
    layers: &[(LstmWeights, LstmWeights)],
) -> AdResult<BiLstmOut> {
    assert!(!layers.is_empty());
    let mut seq: Vec<Var> = xs.to_vec();
    let mut final_fwd = xs[0];
    let mut final_bwd = xs[0];
    for (fw, bw) in layers {
        let fwd = lstm_scan(tape, &seq, fw)?;
        let rev: Vec<Var> = seq.iter().rev().copied().collect();
        let bwd_rev = lstm_scan(tape, &rev, bw)?;
        let t = seq.len();
        let mut next = Vec::with_capacity(t);
        for i in 0..t {
            // bwd_rev[t−1−i] is the backward state at sequence position i
            next.push(tape.concat_last(&[fwd[i], bwd_rev[t - 1 - i]])?);
        }
        final_fwd = fwd[t - 1];
        final_bwd = bwd_rev[t - 1];
        seq = next;
    }
    Ok(BiLstmOut {
        outputs: seq,
        final_fwd,
        final_bwd,
    })
}

/// Gate weights for a convolutional LSTM over the joint axis.
pub struct ConvLstmWeights {
    /// (kernel, input_channels, 4·hidden)
    pub w_x: Var,
    /// (kernel, hidden, 4·hidden)
    pub w_h: Var,
    /// (4·hidden)
    pub b: Var,
    pub hidden: usize,
}

/// One ConvLSTM step. `x` is (V, C); states are (V, hidden). The input and
/// state transforms are 1-D convolutions along the joint axis.
pub fn convlstm_cell<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &ConvLstmWeights,
) -> AdResult<(Var, Var)> {
    let zx = tape.joint_conv(x, w.w_x, Some(w.b))?;
    let zh = tape.joint_conv(h_prev, w.w_h, None)?;
    let z = tape.add(zx, zh)?;
    let h = w.hidden;
    let i = tape.slice_last(z, 0, h)?;
    let i = tape.sigmoid(i);
    let f = tape.slice_last(z, h, h)?;
    let f = tape.sigmoid(f);
    let g = tape.slice_last(z, 2 * h, h)?;
    let g = tape.tanh(g);
    let o = tape.slice_last(z, 3 * h, h)?;
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// How batch normalization sources its statistics.
pub enum BnMode<F: Real> {
    /// Normalize with statistics of the current tensor (over all leading
    /// axes, per channel); the computed mean/variance vars are returned so
    /// callers can fold them into running statistics.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: Tensor<F>, var: Tensor<F> },
}

pub struct BnOut {
    pub out: Var,
    /// Batch statistics recorded in train mode.
    pub batch_mean: Option<Var>,
    pub batch_var: Option<Var>,
}

/// Per-channel batch normalization of (…, C) with scale `gamma` and shift
/// `beta`, built from primitives so the statistics are differentiated
/// through in train mode.
pub fn batch_norm<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: F,
    mode: &BnMode<F>,
) -> AdResult<BnOut> {
    let (out, bm, bv) = match mode {
        BnMode::Train => {
            let mu = tape.mean_except_last(x);
            let neg_mu = tape.scale(mu, -F::one());
            let centered = tape.channel_add(x, neg_mu)?;
            let sq = tape.mul(centered, centered)?;
            let var = tape.mean_except_last(sq);
            let inv = tape.rsqrt_eps(var, eps);
            let xhat = tape.channel_mul(centered, inv)?;
            (xhat, Some(mu), Some(var))
        }
        BnMode::Eval { mean, var } => {
            let neg_mu = tape.constant(mean.map(|m| -m));
            let inv = tape.constant(var.map(|v| (v + eps).sqrt().recip()));
            let centered = tape.channel_add(x, neg_mu)?;
            let xhat = tape.channel_mul(centered, inv)?;
            (xhat, None, None)
        }
    };
    let scaled = tape.channel_mul(out, gamma)?;
    let shifted = tape.channel_add(scaled, beta)?;
    Ok(BnOut {
        out: shifted,
        batch_mean: bm,
        batch_var: bv,
    })
}

/// Learned attention masks applied to the graph structure.
pub enum MaskMode<'a> {
    /// Static graph only.
    None,
    /// One per-frame mask (T, V, V) shared by every hop subset.
    Shared(Var),
    /// One per-frame mask per hop subset.
    PerHop(&'a [Var]),
}

/// Weights for one spatio-temporal graph-convolution block.
pub struct GraphConvWeights {
    /// Per-hop feature transforms, each (C_in, C_out).
    pub hop_weights: Vec<Var>,
    /// Temporal convolution kernel (K, C_out, C_out).
    pub tcn_w: Var,
    /// Temporal convolution bias (C_out).
    pub tcn_b: Var,
    pub bn_gamma: Var,
    pub bn_beta: Var,
}

pub struct GraphConvOut {
    pub out: Var,
    pub batch_mean: Option<Var>,
    pub batch_var: Option<Var>,
}

/// Spatial aggregation only: Σ_k (N_k ⊙ M) · F_t · W_k per frame, where N_k
/// are the fixed normalized hop matrices and M optional learned masks.
pub fn spatial_graph_conv<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    hops: &[Tensor<F>],
    masks: &MaskMode<'_>,
    hop_weights: &[Var],
) -> AdResult<Var> {
    assert_eq!(hops.len(), hop_weights.len());
    let mut acc: Option<Var> = None;
    for (k, hop) in hops.iter().enumerate() {
        let aggregated = match masks {
            MaskMode::None => tape.bmm_const_left(hop.clone(), x)?,
            MaskMode::Shared(m) => {
                let masked = tape.mul_bcast_frames(*m, hop.clone())?;
                tape.bmm(masked, x)?
            }
            MaskMode::PerHop(ms) => {
                let masked = tape.mul_bcast_frames(ms[k], hop.clone())?;
                tape.bmm(masked, x)?
            }
        };
        let z = tape.matmul(aggregated, hop_weights[k])?;
        acc = Some(match acc {
            None => z,
            Some(a) => tape.add(a, z)?,
        });
    }
    Ok(acc.expect("at least one hop subset"))
}

/// Full graph-convolution block: masked spatial aggregation, temporal
/// convolution along the frame axis, batch normalization, ReLU.
pub fn graph_conv<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    hops: &[Tensor<F>],
    masks: &MaskMode<'_>,
    w: &GraphConvWeights,
    bn_eps: F,
    bn_mode: &BnMode<F>,
) -> AdResult<GraphConvOut> {
    let spatial = spatial_graph_conv(tape, x, hops, masks, &w.hop_weights)?;
    let temporal = tape.temporal_conv(spatial, w.tcn_w, Some(w.tcn_b))?;
    let bn = batch_norm(tape, temporal, w.bn_gamma, w.bn_beta, bn_eps, bn_mode)?;
    let out = tape.relu(bn.out);
    Ok(GraphConvOut {
        out,
        batch_mean: bn.batch_mean,
        batch_var: bn.batch_var,
    })
}
