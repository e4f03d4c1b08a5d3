//! The four matching factors: appearance similarity, part appearance, global
//! consistency (structural + appearance), and the hard matching constraint.
//!
//! Scoring is table-driven: one forward pass per image pair produces the
//! local score matrix and the full table of pairwise consistency terms; every
//! partial-matching score is then a sum of table entries. Sum-pooling makes
//! this exact for partial matchings.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SsmnError};
use crate::nets::{CTX_DIM, EMBED_DIM};
use crate::params::{ParamStore, TapeBinding};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const PNAME_DIM: usize = 32;
pub const FP_HIDDEN: usize = 64;
pub const GC_HIDDEN1: usize = 64;
pub const GC_HIDDEN2: usize = 32;
pub const SC_INPUT: usize = 4;
pub const AC_INPUT: usize = 2 * EMBED_DIM;

pub const UNKNOWN_PART: &str = "<unk>";

/// Part-name vocabulary: names seen at least twice in training own a learned
/// vector; everything else resolves to the shared "unknown" vector.
#[derive(Debug, Clone, Default)]
pub struct PartNameTable {
    known: Vec<String>,
}

impl PartNameTable {
    /// Build from training-set name occurrence counts.
    pub fn from_counts(counts: &BTreeMap<String, usize>) -> PartNameTable {
        PartNameTable {
            known: counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .map(|(n, _)| n.clone())
                .collect(),
        }
    }

    pub fn known_names(&self) -> &[String] {
        &self.known
    }

    /// Total lookup: every string resolves to some parameter key.
    pub fn param_key(&self, name: &str) -> String {
        if self.known.iter().any(|n| n == name) {
            format!("pname.{name}")
        } else {
            format!("pname.{UNKNOWN_PART}")
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for n in &self.known {
            store.init_weight(&format!("pname.{n}"), &[PNAME_DIM], PNAME_DIM, PNAME_DIM, rng);
        }
        store.init_weight(
            &format!("pname.{UNKNOWN_PART}"),
            &[PNAME_DIM],
            PNAME_DIM,
            PNAME_DIM,
            rng,
        );
    }
}

/// Initialize the part-appearance and consistency networks.
pub fn init_factors(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let in_fp = PNAME_DIM + EMBED_DIM;
    store.init_weight("fp.w1", &[in_fp, FP_HIDDEN], in_fp, FP_HIDDEN, rng);
    store.init_zeros("fp.b1", &[FP_HIDDEN]);
    store.init_weight("fp.w", &[FP_HIDDEN, 1], FP_HIDDEN, 1, rng);
    for (kind, din) in [("sc", SC_INPUT), ("ac", AC_INPUT)] {
        store.init_weight(&format!("gc.{kind}.w1"), &[din, GC_HIDDEN1], din, GC_HIDDEN1, rng);
        store.init_zeros(&format!("gc.{kind}.b1"), &[GC_HIDDEN1]);
        store.init_weight(
            &format!("gc.{kind}.w2"),
            &[GC_HIDDEN1, GC_HIDDEN2],
            GC_HIDDEN1,
            GC_HIDDEN2,
            rng,
        );
        store.init_zeros(&format!("gc.{kind}.b2"), &[GC_HIDDEN2]);
        store.init_weight(&format!("gc.{kind}.w"), &[GC_HIDDEN2, 1], GC_HIDDEN2, 1, rng);
    }
}

pub fn factor_param_names(table: &PartNameTable) -> Vec<String> {
    let mut out = vec!["fp.w1".into(), "fp.b1".into(), "fp.w".into()];
    for kind in ["sc", "ac"] {
        for s in ["w1", "b1", "w2", "b2", "w"] {
            out.push(format!("gc.{kind}.{s}"));
        }
    }
    for n in table.known_names() {
        out.push(format!("pname.{n}"));
    }
    out.push(format!("pname.{UNKNOWN_PART}"));
    out
}

/// Dot product of two contextualized embeddings.
pub fn appearance_similarity(ctx_a: &[f64], ctx_b: &[f64]) -> Result<f64> {
    if ctx_a.len() != CTX_DIM || ctx_b.len() != CTX_DIM {
        return Err(SsmnError::Shape(format!(
            "appearance similarity wants {CTX_DIM}-dim vectors, got {} and {}",
            ctx_a.len(),
            ctx_b.len()
        )));
    }
    Ok(ctx_a.iter().zip(ctx_b).map(|(a, b)| a * b).sum())
}

/// Plain-math part appearance score, the recompute route for the cache oracle.
pub fn part_appearance_plain(store: &ParamStore, p_vec: &[f64], t_emb: &[f64]) -> Result<f64> {
    if p_vec.len() != PNAME_DIM || t_emb.len() != EMBED_DIM {
        return Err(SsmnError::Shape(format!(
            "part appearance wants ({PNAME_DIM},{EMBED_DIM})-dim inputs, got ({}, {})",
            p_vec.len(),
            t_emb.len()
        )));
    }
    let mut input = Vec::with_capacity(PNAME_DIM + EMBED_DIM);
    input.extend_from_slice(p_vec);
    input.extend_from_slice(t_emb);
    let h = affine_relu(&input, store.get("fp.w1").data(), store.get("fp.b1").data(), FP_HIDDEN);
    Ok(dot_col(&h, store.get("fp.w").data()))
}

fn affine_relu(x: &[f64], w: &[f64], b: &[f64], dout: usize) -> Vec<f64> {
    // w is (din, dout) row-major
    let mut out = b.to_vec();
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for j in 0..dout {
            out[j] += xv * w[i * dout + j];
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

fn dot_col(x: &[f64], w: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelKind {
    Structural,
    Appearance,
}

/// Relation vectors over all ordered pairs i != j of matched targets.
///
/// `prefix` holds (target, source) assignments; locations are normalized
/// (x, y) pairs; embeddings are 64-dim rows.
pub fn relation_vectors(
    kind: RelKind,
    prefix: &[(usize, usize)],
    src_locs: &[(f64, f64)],
    tgt_locs: &[(f64, f64)],
    src_emb: &[f64],
    tgt_emb: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut seen = std::collections::HashSet::new();
    for &(_, s) in prefix {
        if !seen.insert(s) {
            return Err(SsmnError::Invalid(format!(
                "non-injective matching prefix: source {s} used twice"
            )));
        }
    }
    let mut out = Vec::new();
    for &(ti, si) in prefix {
        for &(tj, sj) in prefix {
            if ti == tj {
                continue;
            }
            let v = match kind {
                RelKind::Structural => vec![
                    src_locs[sj].0 - src_locs[si].0,
                    src_locs[sj].1 - src_locs[si].1,
                    tgt_locs[tj].0 - tgt_locs[ti].0,
                    tgt_locs[tj].1 - tgt_locs[ti].1,
                ],
                RelKind::Appearance => {
                    let mut v = Vec::with_capacity(AC_INPUT);
                    for d in 0..EMBED_DIM {
                        v.push(src_emb[sj * EMBED_DIM + d] - src_emb[si * EMBED_DIM + d]);
                    }
                    for d in 0..EMBED_DIM {
                        v.push(tgt_emb[tj * EMBED_DIM + d] - tgt_emb[ti * EMBED_DIM + d]);
                    }
                    v
                }
            };
            out.push(v);
        }
    }
    Ok(out)
}

/// Sum-pooled consistency score of a set of relation vectors (plain math).
pub fn consistency_score_plain(
    store: &ParamStore,
    kind: RelKind,
    deltas: &[Vec<f64>],
) -> Result<f64> {
    let (tag, din) = match kind {
        RelKind::Structural => ("sc", SC_INPUT),
        RelKind::Appearance => ("ac", AC_INPUT),
    };
    let w1 = store.get(&format!("gc.{tag}.w1"));
    let b1 = store.get(&format!("gc.{tag}.b1"));
    let w2 = store.get(&format!("gc.{tag}.w2"));
    let b2 = store.get(&format!("gc.{tag}.b2"));
    let w = store.get(&format!("gc.{tag}.w"));
    let mut total = 0.0;
    for d in deltas {
        if d.len() != din {
            return Err(SsmnError::Shape(format!(
                "{tag} relation vector wants {din} dims, got {}",
                d.len()
            )));
        }
        let h1 = affine_relu(d, w1.data(), b1.data(), GC_HIDDEN1);
        let h2 = affine_relu(&h1, w2.data(), b2.data(), GC_HIDDEN2);
        total += dot_col(&h2, w.data());
    }
    Ok(total)
}

/// Ablation and mode switches threaded through scoring.
#[derive(Debug, Clone, Copy)]
pub struct FactorFlags {
    pub use_gc: bool,
    pub use_fp: bool,
}

impl Default for FactorFlags {
    fn default() -> Self {
        FactorFlags {
            use_gc: true,
            use_fp: true,
        }
    }
}

/// Per-pair forward results: embeddings, contextualized embeddings, the local
/// score matrices, and the dense pairwise-consistency table, with the tape
/// vars needed to differentiate through any score.
pub struct PairScoreCache {
    pub k_s: usize,
    pub k_t: usize,
    pub src_locs: Vec<(f64, f64)>,
    pub tgt_locs: Vec<(f64, f64)>,
    pub src_emb: Vec<f64>,
    pub tgt_emb: Vec<f64>,
    pub src_ctx: Vec<f64>,
    pub tgt_ctx: Vec<f64>,
    /// (K_s, K_t) appearance-similarity scores.
    pub fa: Vec<f64>,
    /// (K_s, K_t) part-appearance scores.
    pub fp: Vec<f64>,
    /// Dense ((K_t*K_s)^2) pairwise consistency terms (sc + ac); entries with
    /// ta == tb or sa == sb are never referenced.
    pub pair_terms: Vec<f64>,
    pub fa_var: VarId,
    pub fp_var: VarId,
    pub pair_var: VarId,
}

impl PairScoreCache {
    pub fn local_index(&self, src: usize, tgt: usize) -> usize {
        debug_assert!(src < self.k_s && tgt < self.k_t);
        src * self.k_t + tgt
    }

    pub fn pair_index(&self, ta: usize, sa: usize, tb: usize, sb: usize) -> usize {
        ((ta * self.k_s + sa) * self.k_t + tb) * self.k_s + sb
    }

    /// Local score S[src][tgt] = f_a + f_p (f_p subject to its flag).
    pub fn local_score(&self, src: usize, tgt: usize, flags: FactorFlags) -> f64 {
        let i = self.local_index(src, tgt);
        self.fa[i] + if flags.use_fp { self.fp[i] } else { 0.0 }
    }

    /// Sum of consistency terms a full or partial matching adds when target
    /// `tgt` (matched to `src`) joins the matched prefix.
    pub fn extension_gc(&self, prefix: &[(usize, usize)], tgt: usize, src: usize) -> f64 {
        let mut s = 0.0;
        for &(ti, si) in prefix {
            s += self.pair_terms[self.pair_index(ti, si, tgt, src)];
            s += self.pair_terms[self.pair_index(tgt, src, ti, si)];
        }
        s
    }

    /// Total score of a (partial) matching from the cached tables.
    ///
    /// Non-injective matchings are outside the search space; scoring one is a
    /// contract violation.
    pub fn total_score(&self, matching: &[(usize, usize)], flags: FactorFlags) -> f64 {
        let mut used = vec![false; self.k_s];
        let mut total = 0.0;
        for &(t, s) in matching {
            assert!(
                !used[s],
                "total_score on a non-injective matching (source {s} reused)"
            );
            used[s] = true;
            total += self.local_score(s, t, flags);
        }
        if flags.use_gc {
            for &(ti, si) in matching {
                for &(tj, sj) in matching {
                    if ti != tj {
                        total += self.pair_terms[self.pair_index(ti, si, tj, sj)];
                    }
                }
            }
        }
        total
    }

    /// Tape node computing the same total score, for loss construction.
    pub fn total_score_var(
        &self,
        tape: &mut Tape,
        matching: &[(usize, usize)],
        flags: FactorFlags,
    ) -> Result<VarId> {
        let mut used = vec![false; self.k_s];
        let mut local_idx = Vec::with_capacity(matching.len());
        for &(t, s) in matching {
            assert!(
                !used[s],
                "total_score_var on a non-injective matching (source {s} reused)"
            );
            used[s] = true;
            local_idx.push(self.local_index(s, t));
        }
        let mut acc = tape.gather_sum(self.fa_var, local_idx.clone())?;
        if flags.use_fp {
            let fp_sum = tape.gather_sum(self.fp_var, local_idx)?;
            acc = tape.add(acc, fp_sum)?;
        }
        if flags.use_gc {
            let mut pair_idx = Vec::new();
            for &(ti, si) in matching {
                for &(tj, sj) in matching {
                    if ti != tj {
                        pair_idx.push(self.pair_index(ti, si, tj, sj));
                    }
                }
            }
            if !pair_idx.is_empty() {
                let gc = tape.gather_sum(self.pair_var, pair_idx)?;
                acc = tape.add(acc, gc)?;
            }
        }
        Ok(acc)
    }

    /// Factor breakdown (fa sum, fp sum, f_sc + f_ac combined) for debugging.
    pub fn breakdown(&self, matching: &[(usize, usize)]) -> (f64, f64, f64) {
        let mut fa = 0.0;
        let mut fp = 0.0;
        for &(t, s) in matching {
            fa += self.fa[self.local_index(s, t)];
            fp += self.fp[self.local_index(s, t)];
        }
        let mut gc = 0.0;
        for &(ti, si) in matching {
            for &(tj, sj) in matching {
                if ti != tj {
                    gc += self.pair_terms[self.pair_index(ti, si, tj, sj)];
                }
            }
        }
        (fa, fp, gc)
    }
}

/// Batched two-hidden-layer consistency MLP over a (P, din) input var,
/// with the input arriving pre-split as `parts` (each (P, d_part) with the
/// matching row block of w1).
fn consistency_mlp(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    tag: &str,
    parts: &[(VarId, usize, usize)], // (input, w1 row offset, rows)
) -> Result<VarId> {
    let w1 = binding.bind(store, tape, &format!("gc.{tag}.w1"));
    let b1 = binding.bind(store, tape, &format!("gc.{tag}.b1"));
    let w2 = binding.bind(store, tape, &format!("gc.{tag}.w2"));
    let b2 = binding.bind(store, tape, &format!("gc.{tag}.b2"));
    let w = binding.bind(store, tape, &format!("gc.{tag}.w"));
    let mut z: Option<VarId> = None;
    for &(x, off, rows) in parts {
        let wblk = tape.slice_rows(w1, off, rows)?;
        let term = tape.matmul(x, wblk)?;
        z = Some(match z {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    let z = z.expect("consistency_mlp needs at least one input part");
    let z = tape.add_row_vec(z, b1)?;
    let h1 = tape.relu(z)?;
    let z2 = tape.matmul(h1, w2)?;
    let z2 = tape.add_row_vec(z2, b2)?;
    let h2 = tape.relu(z2)?;
    tape.matmul(h2, w)
}

/// Inputs describing one image pair, already preprocessed into patches.
pub struct PairInputs<'a> {
    /// K_s rows of 32x32 patch pixels.
    pub src_patches: &'a [Vec<f64>],
    pub src_locs: &'a [(f64, f64)],
    pub src_names: &'a [String],
    pub tgt_patches: &'a [Vec<f64>],
    pub tgt_locs: &'a [(f64, f64)],
}

/// Tape handles for a pair's encoder and context outputs.
pub struct PairEmbeddings {
    pub src_emb: VarId,
    pub tgt_emb: VarId,
    pub src_ctx: VarId,
    pub tgt_ctx: VarId,
}

/// Encode both images and contextualize with the BiLSTM. `src_order` /
/// `tgt_order` permute recurrence order. When `cached_conv` is given
/// (frozen-conv training and evaluation), it holds precomputed (K, 6144)
/// conv features for source and target and the conv stage is skipped.
#[allow(clippy::too_many_arguments)]
pub fn embed_pair(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    inputs: &PairInputs,
    src_order: &[usize],
    tgt_order: &[usize],
    dual_encoder: bool,
    cached_conv: Option<(&[f64], &[f64])>,
) -> Result<PairEmbeddings> {
    let k_s = inputs.src_patches.len();
    let k_t = inputs.tgt_patches.len();
    if k_s == 0 || k_t == 0 || inputs.src_names.len() != k_s || inputs.src_locs.len() != k_s {
        return Err(SsmnError::Invalid("inconsistent pair inputs".into()));
    }
    let src_prefix = "enc";
    let tgt_prefix = if dual_encoder { "enc_t" } else { "enc" };

    let embed = |tape: &mut Tape,
                 binding: &mut TapeBinding,
                 patches: &[Vec<f64>],
                 prefix: &str,
                 conv: Option<&[f64]>|
     -> Result<VarId> {
        let k = patches.len();
        match conv {
            Some(feats) => {
                let leaf = tape.leaf(Tensor::from_vec(
                    &[k, crate::nets::CONV_FEATURES],
                    feats.to_vec(),
                )?);
                crate::nets::encoder_fc_forward(tape, binding, store, prefix, leaf)
            }
            None => {
                let mut data = Vec::with_capacity(k * 32 * 32);
                for p in patches {
                    data.extend_from_slice(p);
                }
                let leaf = tape.leaf(Tensor::from_vec(&[k, 1, 32, 32], data)?);
                crate::nets::encode_patches(tape, binding, store, prefix, leaf)
            }
        }
    };
    let src_emb = embed(
        tape,
        binding,
        inputs.src_patches,
        src_prefix,
        cached_conv.map(|(s, _)| s),
    )?;
    let tgt_emb = embed(
        tape,
        binding,
        inputs.tgt_patches,
        tgt_prefix,
        cached_conv.map(|(_, t)| t),
    )?;
    let src_ctx = crate::nets::contextualize(tape, binding, store, "ctx", src_emb, src_order)?;
    let tgt_ctx = crate::nets::contextualize(tape, binding, store, "ctx", tgt_emb, tgt_order)?;
    Ok(PairEmbeddings {
        src_emb,
        tgt_emb,
        src_ctx,
        tgt_ctx,
    })
}

/// (K_s, K_t) appearance-similarity matrix: pairwise dot products of the
/// contextualized embeddings.
pub fn fa_matrix(tape: &mut Tape, emb: &PairEmbeddings) -> Result<VarId> {
    let t = tape.transpose(emb.tgt_ctx)?;
    tape.matmul(emb.src_ctx, t)
}

/// Build the full per-pair score tables on a tape.
#[allow(clippy::too_many_arguments)]
pub fn build_pair_cache(
    tape: &mut Tape,
    binding: &mut TapeBinding,
    store: &ParamStore,
    table: &PartNameTable,
    inputs: &PairInputs,
    src_order: &[usize],
    tgt_order: &[usize],
    dual_encoder: bool,
    cached_conv: Option<(&[f64], &[f64])>,
) -> Result<PairScoreCache> {
    let k_s = inputs.src_patches.len();
    let k_t = inputs.tgt_patches.len();
    let emb = embed_pair(
        tape,
        binding,
        store,
        inputs,
        src_order,
        tgt_order,
        dual_encoder,
        cached_conv,
    )?;
    let (src_emb, tgt_emb) = (emb.src_emb, emb.tgt_emb);
    let (src_ctx, tgt_ctx) = (emb.src_ctx, emb.tgt_ctx);
    let fa_var = fa_matrix(tape, &emb)?;

    // f_p: rows (s, t) of [p_name(s), tgt_emb_t] through the one-hidden MLP.
    let p2 = k_s * k_t;
    let mut name_rows: Vec<VarId> = Vec::with_capacity(k_s);
    for name in inputs.src_names {
        name_rows.push(binding.bind(store, tape, &table.param_key(name)));
    }
    let name_mat = tape.concat_rows(&name_rows)?; // (K_s, 32)
    let mut psel = vec![0.0; p2 * k_s];
    let mut tsel = vec![0.0; p2 * k_t];
    for s in 0..k_s {
        for t in 0..k_t {
            let r = s * k_t + t;
            psel[r * k_s + s] = 1.0;
            tsel[r * k_t + t] = 1.0;
        }
    }
    let psel = tape.leaf(Tensor::from_vec(&[p2, k_s], psel)?);
    let tsel = tape.leaf(Tensor::from_vec(&[p2, k_t], tsel)?);
    let prow = tape.matmul(psel, name_mat)?; // (P2, 32)
    let trow = tape.matmul(tsel, tgt_emb)?; // (P2, 64)
    let fp_w1 = binding.bind(store, tape, "fp.w1");
    let fp_b1 = binding.bind(store, tape, "fp.b1");
    let fp_w = binding.bind(store, tape, "fp.w");
    let w1a = tape.slice_rows(fp_w1, 0, PNAME_DIM)?;
    let w1b = tape.slice_rows(fp_w1, PNAME_DIM, EMBED_DIM)?;
    let za = tape.matmul(prow, w1a)?;
    let zb = tape.matmul(trow, w1b)?;
    let z = tape.add(za, zb)?;
    let z = tape.add_row_vec(z, fp_b1)?;
    let h = tape.relu(z)?;
    let fp_flat = tape.matmul(h, fp_w)?; // (P2, 1)
    let fp_var = tape.reshape(fp_flat, &[k_s, k_t])?;

    // Consistency pair table over all ((ta,sa),(tb,sb)); dense layout,
    // diagonal rows unused.
    let p4 = (k_t * k_s) * (k_t * k_s);
    let mut sdiff = vec![0.0; p4 * k_s]; // +1 at sb, -1 at sa
    let mut tdiff = vec![0.0; p4 * k_t];
    let mut sc_rows = vec![0.0; p4 * SC_INPUT];
    for ta in 0..k_t {
        for sa in 0..k_s {
            for tb in 0..k_t {
                for sb in 0..k_s {
                    let r = ((ta * k_s + sa) * k_t + tb) * k_s + sb;
                    sdiff[r * k_s + sb] += 1.0;
                    sdiff[r * k_s + sa] -= 1.0;
                    tdiff[r * k_t + tb] += 1.0;
                    tdiff[r * k_t + ta] -= 1.0;
                    sc_rows[r * SC_INPUT] = inputs.src_locs[sb].0 - inputs.src_locs[sa].0;
                    sc_rows[r * SC_INPUT + 1] = inputs.src_locs[sb].1 - inputs.src_locs[sa].1;
                    sc_rows[r * SC_INPUT + 2] = inputs.tgt_locs[tb].0 - inputs.tgt_locs[ta].0;
                    sc_rows[r * SC_INPUT + 3] = inputs.tgt_locs[tb].1 - inputs.tgt_locs[ta].1;
                }
            }
        }
    }
    let sc_in = tape.leaf(Tensor::from_vec(&[p4, SC_INPUT], sc_rows)?);
    let g_sc = consistency_mlp(tape, binding, store, "sc", &[(sc_in, 0, SC_INPUT)])?;
    let sdiff = tape.leaf(Tensor::from_vec(&[p4, k_s], sdiff)?);
    let tdiff = tape.leaf(Tensor::from_vec(&[p4, k_t], tdiff)?);
    let ds = tape.matmul(sdiff, src_emb)?; // (P4, 64)
    let dt = tape.matmul(tdiff, tgt_emb)?;
    let g_ac = consistency_mlp(
        tape,
        binding,
        store,
        "ac",
        &[(ds, 0, EMBED_DIM), (dt, EMBED_DIM, EMBED_DIM)],
    )?;
    let g_sum = tape.add(g_sc, g_ac)?;
    let pair_var = tape.reshape(g_sum, &[p4])?;

    Ok(PairScoreCache {
        k_s,
        k_t,
        src_locs: inputs.src_locs.to_vec(),
        tgt_locs: inputs.tgt_locs.to_vec(),
        src_emb: tape.value(src_emb).data().to_vec(),
        tgt_emb: tape.value(tgt_emb).data().to_vec(),
        src_ctx: tape.value(src_ctx).data().to_vec(),
        tgt_ctx: tape.value(tgt_ctx).data().to_vec(),
        fa: tape.value(fa_var).data().to_vec(),
        fp: tape.value(fp_var).data().to_vec(),
        pair_terms: tape.value(pair_var).data().to_vec(),
        fa_var,
        fp_var,
        pair_var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets;
    use rand::{Rng, SeedableRng};

    fn test_store(seed: u64, names: &[&str]) -> (ParamStore, PartNameTable) {
        let mut counts = BTreeMap::new();
        for n in names {
            *counts.entry(n.to_string()).or_insert(0) += 2;
        }
        let table = PartNameTable::from_counts(&counts);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        nets::init_encoder(&mut store, "enc", &mut rng);
        nets::init_context(&mut store, "ctx", &mut rng);
        init_factors(&mut store, &mut rng);
        table.init_params(&mut store, &mut rng);
        (store, table)
    }

    #[test]
    fn unknown_name_resolves_to_unknown_vector() {
        let mut counts = BTreeMap::new();
        counts.insert("leg".into(), 3);
        counts.insert("rare".into(), 1);
        let table = PartNameTable::from_counts(&counts);
        assert_eq!(table.param_key("leg"), "pname.leg");
        assert_eq!(table.param_key("rare"), format!("pname.{UNKNOWN_PART}"));
        assert_eq!(table.param_key("never-seen"), format!("pname.{UNKNOWN_PART}"));
    }

    #[test]
    fn appearance_similarity_basics() {
        let z = vec![0.0; CTX_DIM];
        let mut v = vec![0.0; CTX_DIM];
        v[3] = 2.0;
        v[70] = -1.0;
        assert_eq!(appearance_similarity(&z, &v).unwrap(), 0.0);
        assert_eq!(appearance_similarity(&v, &v).unwrap(), 5.0);
        assert!(appearance_similarity(&v, &[1.0]).is_err());
    }

    #[test]
    fn part_appearance_zero_params_gives_zero() {
        let (mut store, _) = test_store(1, &["a"]);
        store.insert("fp.w", Tensor::zeros(&[FP_HIDDEN, 1]));
        let p = vec![0.3; PNAME_DIM];
        let t = vec![0.5; EMBED_DIM];
        assert_eq!(part_appearance_plain(&store, &p, &t).unwrap(), 0.0);
    }

    #[test]
    fn relation_vectors_counts_and_shapes() {
        let locs: Vec<(f64, f64)> = (0..5).map(|i| (0.1 * i as f64, 0.2)).collect();
        let emb = vec![0.0; 5 * EMBED_DIM];
        // |m| <= 1 -> empty
        let rv = relation_vectors(RelKind::Structural, &[(0, 0)], &locs, &locs, &emb, &emb).unwrap();
        assert!(rv.is_empty());
        // |m| = 4 -> 12 ordered pairs
        let m: Vec<(usize, usize)> = (0..4).map(|i| (i, i)).collect();
        let rv = relation_vectors(RelKind::Structural, &m, &locs, &locs, &emb, &emb).unwrap();
        assert_eq!(rv.len(), 12);
        assert!(rv.iter().all(|v| v.len() == 4));
        let rv = relation_vectors(RelKind::Appearance, &m, &locs, &locs, &emb, &emb).unwrap();
        assert_eq!(rv.len(), 12);
        assert!(rv.iter().all(|v| v.len() == AC_INPUT));
    }

    #[test]
    fn identity_geometry_halves_match() {
        let locs: Vec<(f64, f64)> = vec![(0.2, 0.3), (0.8, 0.4), (0.5, 0.9)];
        let emb = vec![0.0; 3 * EMBED_DIM];
        let m: Vec<(usize, usize)> = (0..3).map(|i| (i, i)).collect();
        let rv = relation_vectors(RelKind::Structural, &m, &locs, &locs, &emb, &emb).unwrap();
        for v in rv {
            assert_eq!(v[0], v[2]);
            assert_eq!(v[1], v[3]);
        }
    }

    #[test]
    fn non_injective_prefix_rejected() {
        let locs = vec![(0.0, 0.0), (1.0, 1.0)];
        let emb = vec![0.0; 2 * EMBED_DIM];
        assert!(relation_vectors(
            RelKind::Structural,
            &[(0, 1), (1, 1)],
            &locs,
            &locs,
            &emb,
            &emb
        )
        .is_err());
    }

    #[test]
    fn consistency_score_empty_and_zero_w() {
        let (mut store, _) = test_store(2, &["a"]);
        assert_eq!(
            consistency_score_plain(&store, RelKind::Structural, &[]).unwrap(),
            0.0
        );
        store.insert("gc.sc.w", Tensor::zeros(&[GC_HIDDEN2, 1]));
        let deltas = vec![vec![0.1, -0.2, 0.3, 0.4]; 7];
        assert_eq!(
            consistency_score_plain(&store, RelKind::Structural, &deltas).unwrap(),
            0.0
        );
    }

    #[test]
    fn consistency_score_additive_over_disjoint_sets() {
        let (store, _) = test_store(3, &["a"]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d1: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let d2: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let both: Vec<Vec<f64>> = d1.iter().chain(&d2).cloned().collect();
        let s1 = consistency_score_plain(&store, RelKind::Structural, &d1).unwrap();
        let s2 = consistency_score_plain(&store, RelKind::Structural, &d2).unwrap();
        let s = consistency_score_plain(&store, RelKind::Structural, &both).unwrap();
        assert!((s - (s1 + s2)).abs() < 1e-12);
    }

    fn random_pair_inputs(
        rng: &mut ChaCha8Rng,
        k_s: usize,
        k_t: usize,
        names: &[&str],
    ) -> (Vec<Vec<f64>>, Vec<(f64, f64)>, Vec<String>, Vec<Vec<f64>>, Vec<(f64, f64)>) {
        let patch = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let sp: Vec<Vec<f64>> = (0..k_s).map(|_| patch(rng)).collect();
        let tp: Vec<Vec<f64>> = (0..k_t).map(|_| patch(rng)).collect();
        let sl: Vec<(f64, f64)> = (0..k_s)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let tl: Vec<(f64, f64)> = (0..k_t)
            .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
            .collect();
        let sn: Vec<String> = (0..k_s).map(|i| names[i % names.len()].to_string()).collect();
        (sp, sl, sn, tp, tl)
    }

    fn build_cache(
        store: &ParamStore,
        table: &PartNameTable,
        inputs: &PairInputs,
    ) -> (Tape, PairScoreCache) {
        let mut tape = Tape::new();
        let mut binding = TapeBinding::new();
        let k_s = inputs.src_patches.len();
        let k_t = inputs.tgt_patches.len();
        let so: Vec<usize> = (0..k_s).collect();
        let to: Vec<usize> = (0..k_t).collect();
        let cache = build_pair_cache(
            &mut tape, &mut binding, store, table, inputs, &so, &to, false, None,
        )
        .unwrap();
        (tape, cache)
    }

    #[test]
    fn fa_grid_has_k_squared_scores() {
        let (store, table) = test_store(4, &["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (sp, sl, sn, tp, tl) = random_pair_inputs(&mut rng, 4, 4, &["a", "b"]);
        let inputs = PairInputs {
            src_patches: &sp,
            src_locs: &sl,
            src_names: &sn,
            tgt_patches: &tp,
            tgt_locs: &tl,
        };
        let (_, cache) = build_cache(&store, &table, &inputs);
        assert_eq!(cache.fa.len(), 16);
        assert_eq!(cache.fp.len(), 16);
        assert!(cache.fa.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn singleton_matching_scores_the_local_entry() {
        let (store, table) = test_store(5, &["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (sp, sl, sn, tp, tl) = random_pair_inputs(&mut rng, 3, 3, &["a", "b", "c"]);
        let inputs = PairInputs {
            src_patches: &sp,
            src_locs: &sl,
            src_names: &sn,
            tgt_patches: &tp,
            tgt_locs: &tl,
        };
        let (_, cache) = build_cache(&store, &table, &inputs);
        let flags = FactorFlags::default();
        let got = cache.total_score(&[(0, 2)], flags);
        assert!((got - cache.local_score(2, 0, flags)).abs() < 1e-12);
    }

    #[test]
    fn gc_off_total_is_sum_of_local_entries() {
        let (store, table) = test_store(6, &["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (sp, sl, sn, tp, tl) = random_pair_inputs(&mut rng, 3, 3, &["a", "b", "c"]);
        let inputs = PairInputs {
            src_patches: &sp,
            src_locs: &sl,
            src_names: &sn,
            tgt_patches: &tp,
            tgt_locs: &tl,
        };
        let (_, cache) = build_cache(&store, &table, &inputs);
        let flags = FactorFlags {
            use_gc: false,
            use_fp: true,
        };
        let m = vec![(0, 1), (1, 2), (2, 0)];
        let total = cache.total_score(&m, flags);
        let local: f64 = m.iter().map(|&(t, s)| cache.local_score(s, t, flags)).sum();
        assert!((total - local).abs() < 1e-12);
    }

    /// Cache-vs-recompute oracle: the table-driven score equals a from-scratch
    /// plain-math recomputation.
    #[test]
    fn cached_score_matches_scratch_recompute() {
        let (store, table) = test_store(7, &["a", "b", "c", "d"]);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (sp, sl, sn, tp, tl) = random_pair_inputs(&mut rng, 4, 4, &["a", "b", "c", "d"]);
        let inputs = PairInputs {
            src_patches: &sp,
            src_locs: &sl,
            src_names: &sn,
            tgt_patches: &tp,
            tgt_locs: &tl,
        };
        let (_, cache) = build_cache(&store, &table, &inputs);
        let m = vec![(0, 3), (1, 0), (2, 2), (3, 1)];
        let flags = FactorFlags::default();
        let total = cache.total_score(&m, flags);

        // scratch route: plain-math factor evaluation on the cached embeddings
        let mut scratch = 0.0;
        for &(t, s) in &m {
            scratch += appearance_similarity(
                &cache.src_ctx[s * CTX_DIM..(s + 1) * CTX_DIM],
                &cache.tgt_ctx[t * CTX_DIM..(t + 1) * CTX_DIM],
            )
            .unwrap();
            let pkey = table.param_key(&sn[s]);
            scratch += part_appearance_plain(
                &store,
                store.get(&pkey).data(),
                &cache.tgt_emb[t * EMBED_DIM..(t + 1) * EMBED_DIM],
            )
            .unwrap();
        }
        for kind in [RelKind::Structural, RelKind::Appearance] {
            let rv = relation_vectors(kind, &m, &sl, &tl, &cache.src_emb, &cache.tgt_emb).unwrap();
            scratch += consistency_score_plain(&store, kind, &rv).unwrap();
        }
        assert!(
            (total - scratch).abs() < 1e-9,
            "cached {total} vs scratch {scratch}"
        );
    }

    #[test]
    #[should_panic(expected = "non-injective")]
    fn scoring_non_injective_matching_panics() {
        let (store, table) = test_store(8, &["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (sp, sl, sn, tp, tl) = random_pair_inputs(&mut rng, 2, 2, &["a", "b"]);
        let inputs = PairInputs {
            src_patches: &sp,
            src_locs: &sl,
            src_names: &sn,
            tgt_patches: &tp,
            tgt_locs: &tl,
        };
        let (_, cache) = build_cache(&store, &table, &inputs);
        cache.total_score(&[(0, 1), (1, 1)], FactorFlags::default());
    }

    #[test]
    fn tape_score_matches_table_score() {
        let (store, table) = test_store(9, &["a", "b", "c"]);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let (sp, sl, sn, tp, tl) = random_pair_inputs(&mut rng, 3, 3, &["a", "b", "c"]);
        let inputs = PairInputs {
            src_patches: &sp,
            src_locs: &sl,
            src_names: &sn,
            tgt_patches: &tp,
            tgt_locs: &tl,
        };
        let (mut tape, cache) = build_cache(&store, &table, &inputs);
        let m = vec![(0, 1), (1, 0), (2, 2)];
        let flags = FactorFlags::default();
        let v = cache.total_score_var(&mut tape, &m, flags).unwrap();
        let tape_val = tape.value(v).item();
        let table_val = cache.total_score(&m, flags);
        assert!((tape_val - table_val).abs() < 1e-9);
    }

    /// f_p gradient w.r.t. the part-name vector vs finite differences.
    #[test]
    fn fp_gradient_matches_finite_differences() {
        let (store, table) = test_store(10, &["a", "b"]);
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let (sp, sl, sn, tp, tl) = random_pair_inputs(&mut rng, 2, 2, &["a", "b"]);
        let key = table.param_key("a");
        let base = store.get(&key).data().to_vec();
        let eval = |vals: &[f64]| -> crate::Result<(f64, Vec<f64>)> {
            let mut s = store.clone();
            s.insert(&key, Tensor::from_vec(&[PNAME_DIM], vals.to_vec())?);
            let inputs = PairInputs {
                src_patches: &sp,
                src_locs: &sl,
                src_names: &sn,
                tgt_patches: &tp,
                tgt_locs: &tl,
            };
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let cache = build_pair_cache(
                &mut tape,
                &mut binding,
                &s,
                &table,
                &inputs,
                &[0, 1],
                &[1, 0],
                false,
                None,
            )?;
            let m = vec![(0, 0), (1, 1)];
            let loss = cache.total_score_var(&mut tape, &m, FactorFlags::default())?;
            s.zero_grads();
            let grads = tape.backward(loss)?;
            binding.accumulate(&mut s, &grads)?;
            Ok((tape.value(loss).item(), s.get(&key).grad().unwrap().to_vec()))
        };
        let (_, analytic) = eval(&base).unwrap();
        let mut f = |vals: &[f64]| eval(vals).map(|(v, _)| v);
        let err =
            crate::gradcheck::finite_diff_check(&mut f, &analytic, &base, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
