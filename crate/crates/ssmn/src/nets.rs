//! Encoder and context networks.
//!
//! Encoder: 3x3 conv (64) -> pool -> 3x3 conv (96) -> pool -> fc 128 -> fc 64,
//! all relu, on 32x32 grayscale patches. Context: single-layer bidirectional
//! LSTM, 50 hidden units per direction, over the 64-dim embeddings.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SsmnError};
use crate::params::{ParamStore, TapeBinding};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 32;
pub const CONV1_FILTERS: usize = 64;
pub const CONV2_FILTERS: usize = 96;
pub const CONV_FEATURES: usize = CONV2_FILTERS * 8 * 8; // 6144 after two pools
pub const FC1_UNITS: usize = 128;
pub const EMBED_DIM: usize = 64;
pub const LSTM_HIDDEN: usize = 50;
pub const CTX_DIM: usize = 2 * LSTM_HIDDEN;

// 32 -> pool -> 16 -> pool -> 8; flattened conv output must be 6144.
const _: () = assert!(CONV2_FILTERS * (PATCH_SIZE / 4) * (PATCH_SIZE / 4) == 6144);

/// Initialize encoder parameters under `prefix` (e.g. "enc").
pub fn init_encoder(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
    let p = |s: &str| format!("{prefix}.{s}");
    store.init_weight(&p("conv1.w"), &[CONV1_FILTERS, 1, 3, 3], 9, CONV1_FILTERS * 9, rng);
    store.init_zeros(&p("conv1.b"), &[CONV1_FILTERS]);
    store.init_weight(
        &p("conv2.w"),
        &[CONV2_FILTERS, CONV1_FILTERS, 3, 3],
        CONV1_FILTERS * 9,
        CONV2_FILTERS * 9,
        rng,
    );
    store.init_zeros(&p("conv2.b"), &[CONV2_FILTERS]);
    store.init_weight(&p("fc1.w"), &[CONV_FEATURES, FC1_UNITS], CONV_FEATURES, FC1_UNITS, rng);
    store.init_zeros(&p("fc1.b"), &[FC1_UNITS]);
    store.init_weight(&p("fc2.w"), &[FC1_UNITS, EMBED_DIM], FC1_UNITS, EMBED_DIM, rng);
    store.init_zeros(&p("fc2.b"), &[EMBED_DIM]);
}

/// Initialize the bidirectional LSTM under `prefix` (e.g. "ctx").
pub fn init_context(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng) {
    for dir in ["fwd", "bwd"] {
        let p = |s: &str| format!("{prefix}.{dir}.{s}");
        // packed gate order [i, f, g, o]
        store.init_weight(&p("w_ih"), &[EMBED_DIM, 4 * LSTM_HIDDEN], EMBED_DIM, LSTM_HIDDEN, rng);
        store.init_weight(&p("w_hh"), &[LSTM_HIDDEN, 4 * LSTM_HIDDEN], LSTM_HIDDEN, LSTM_HIDDEN, rng);
        store.init_zeros(&p("b"), &[4 * LSTM_HIDDEN]);
    }
}

pub fn encoder_param_names(prefix: &str) -> Vec<String> {
    ["conv1.w", "conv1.b", "conv2.w", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

pub fn conv_param_names(prefix: &str) -> Vec<String> {
    ["conv1.w", "conv1.b", "conv2.w", "conv2.b"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

pub fn context_param_names(prefix: &str) -> Vec<String> {
    let mut out = Vec::new();
    for dir in ["fwd", "bwd"] {
        for s in ["w_ih", "w_hh", "b"] {
            out.push(format!("{prefix}.{dir}.{s}"));
        }
    }
    out
}

/// Conv stage: (N,1,32,32) patches -> (N, 6144) pooled features.
pub fn encoder_conv_forward(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    prefix: &str,
    patches: VarId,
) -> Result<VarId> {
    let shape = tape.value(patches).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != PATCH_SIZE || shape[3] != PATCH_SIZE {
        return Err(SsmnError::Shape(format!(
            "encoder wants (N,1,{PATCH_SIZE},{PATCH_SIZE}) patches, got {shape:?}"
        )));
    }
    let n = shape[0];
    let p = |s: &str| format!("{prefix}.{s}");
    let w1 = binding.bind(store, tape, &p("conv1.w"));
    let b1 = binding.bind(store, tape, &p("conv1.b"));
    let w2 = binding.bind(store, tape, &p("conv2.w"));
    let b2 = binding.bind(store, tape, &p("conv2.b"));
    let c1 = tape.conv2d_3x3(patches, w1, b1)?;
    let r1 = tape.relu(c1)?;
    let p1 = tape.max_pool_2x2(r1)?;
    let c2 = tape.conv2d_3x3(p1, w2, b2)?;
    let r2 = tape.relu(c2)?;
    let p2 = tape.max_pool_2x2(r2)?;
    tape.reshape(p2, &[n, CONV_FEATURES])
}

/// Fully-connected stage: (N, 6144) -> (N, 64) embeddings.
pub fn encoder_fc_forward(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    prefix: &str,
    features: VarId,
) -> Result<VarId> {
    let p = |s: &str| format!("{prefix}.{s}");
    let w1 = binding.bind(store, tape, &p("fc1.w"));
    let b1 = binding.bind(store, tape, &p("fc1.b"));
    let w2 = binding.bind(store, tape, &p("fc2.w"));
    let b2 = binding.bind(store, tape, &p("fc2.b"));
    let h = tape.matmul(features, w1)?;
    let h = tape.add_row_vec(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w2)?;
    let o = tape.add_row_vec(o, b2)?;
    tape.relu(o)
}

/// Full encoder: patches -> 64-dim embeddings, shared weights across patches.
pub fn encode_patches(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    prefix: &str,
    patches: VarId,
) -> Result<VarId> {
    let feats = encoder_conv_forward(tape, binding, store, prefix, patches)?;
    encoder_fc_forward(tape, binding, store, prefix, feats)
}

/// Convenience: run one 32x32 patch through the encoder and return its
/// embedding values.
pub fn encode_patch(store: &ParamStore, prefix: &str, patch: &[f64]) -> Result<Vec<f64>> {
    if patch.len() != PATCH_SIZE * PATCH_SIZE {
        return Err(SsmnError::Shape(format!(
            "encode_patch wants a {PATCH_SIZE}x{PATCH_SIZE} patch, got {} values",
            patch.len()
        )));
    }
    if patch.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(SsmnError::Invalid("patch values outside [0,1]".into()));
    }
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();
    let x = tape.leaf(Tensor::from_vec(&[1, 1, PATCH_SIZE, PATCH_SIZE], patch.to_vec())?);
    let emb = encode_patches(&mut tape, &mut binding, store, prefix, x)?;
    Ok(tape.value(emb).data().to_vec())
}

fn lstm_direction(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    prefix: &str,
    dir: &str,
    embeddings: VarId,
    visit: &[usize],
) -> Result<Vec<VarId>> {
    let p = |s: &str| format!("{prefix}.{dir}.{s}");
    let w_ih = binding.bind(store, tape, &p("w_ih"));
    let w_hh = binding.bind(store, tape, &p("w_hh"));
    let b = binding.bind(store, tape, &p("b"));
    let mut h = tape.leaf(Tensor::zeros(&[1, LSTM_HIDDEN]));
    let mut c = tape.leaf(Tensor::zeros(&[1, LSTM_HIDDEN]));
    let mut hidden = Vec::with_capacity(visit.len());
    for &idx in visit {
        let x = tape.slice_rows(embeddings, idx, 1)?;
        let zx = tape.matmul(x, w_ih)?;
        let zh = tape.matmul(h, w_hh)?;
        let z = tape.add(zx, zh)?;
        let z = tape.add_row_vec(z, b)?;
        let gi = tape.slice_cols(z, 0, LSTM_HIDDEN)?;
        let gf = tape.slice_cols(z, LSTM_HIDDEN, LSTM_HIDDEN)?;
        let gg = tape.slice_cols(z, 2 * LSTM_HIDDEN, LSTM_HIDDEN)?;
        let go = tape.slice_cols(z, 3 * LSTM_HIDDEN, LSTM_HIDDEN)?;
        let i = tape.sigmoid(gi)?;
        let f = tape.sigmoid(gf)?;
        let g = tape.tanh(gg)?;
        let o = tape.sigmoid(go)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
        hidden.push(h);
    }
    Ok(hidden)
}

/// Contextualize a (K,64) embedding matrix with the bidirectional LSTM.
///
/// `order` permutes the recurrence order only; output row i always
/// corresponds to embedding row i.
pub fn contextualize(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    prefix: &str,
    embeddings: VarId,
    order: &[usize],
) -> Result<VarId> {
    let shape = tape.value(embeddings).shape().to_vec();
    if shape.len() != 2 || shape[1] != EMBED_DIM {
        return Err(SsmnError::Shape(format!(
            "contextualize wants (K,{EMBED_DIM}), got {shape:?}"
        )));
    }
    let k = shape[0];
    if k == 0 {
        return Err(SsmnError::Invalid("contextualize on empty sequence".into()));
    }
    let mut seen = vec![false; k];
    for &i in order {
        if i >= k || seen[i] {
            return Err(SsmnError::Invalid(format!(
                "order {order:?} is not a permutation of 0..{k}"
            )));
        }
        seen[i] = true;
    }
    if order.len() != k {
        return Err(SsmnError::Invalid(format!(
            "order length {} vs sequence length {k}",
            order.len()
        )));
    }
    let fwd = lstm_direction(tape, binding, store, prefix, "fwd", embeddings, order)?;
    let rev: Vec<usize> = order.iter().rev().cloned().collect();
    let bwd = lstm_direction(tape, binding, store, prefix, "bwd", embeddings, &rev)?;
    // position of each original index in the visit order
    let mut pos = vec![0usize; k];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let mut rows = Vec::with_capacity(k);
    for i in 0..k {
        let f = fwd[pos[i]];
        let b = bwd[k - 1 - pos[i]];
        let fr = tape.reshape(f, &[LSTM_HIDDEN])?;
        let br = tape.reshape(b, &[LSTM_HIDDEN])?;
        rows.push(tape.concat1(&[fr, br])?);
    }
    tape.concat_rows(&rows)
}
