//! Training objectives and the optimizer: the row+column softmax surrogate,
//! the locally-normalized baseline objective, beam-search (LaSO) hinge
//! training, and SGD with momentum.

use serde::Serialize;

use crate::error::{Result, SsmnError};
use crate::factors::{FactorFlags, PairScoreCache};
use crate::inference::{prune_beam, PartialMatching, Scorer};
use crate::params::ParamStore;
use crate::tape::{Tape, VarId};

fn check_gold(gold: &[usize], k_s: usize, k_t: usize) -> Result<()> {
    if gold.len() != k_t {
        return Err(SsmnError::Invalid(format!(
            "gold has {} entries for {k_t} targets",
            gold.len()
        )));
    }
    let mut used = vec![false; k_s];
    for &s in gold {
        if s >= k_s || used[s] {
            return Err(SsmnError::Invalid("gold is not an injective matching".into()));
        }
        used[s] = true;
    }
    Ok(())
}

/// Row+column softmax cross-entropy surrogate on a square local score matrix
/// (rows sources, columns targets). `gold[t]` is the source for target t.
pub fn amn_loss(tape: &mut Tape, s: VarId, gold: &[usize]) -> Result<VarId> {
    let shape = tape.value(s).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(SsmnError::Shape(format!(
            "amn_loss wants a square matrix, got {shape:?}"
        )));
    }
    let k = shape[0];
    check_gold(gold, k, k)?;
    let mut inv = vec![0usize; k];
    for (t, &src) in gold.iter().enumerate() {
        inv[src] = t;
    }
    // rows: source s picks target inv[s]
    let p_rows = tape.softmax_rows(s)?;
    let lp_rows = tape.log(p_rows)?;
    let row_idx: Vec<usize> = (0..k).map(|src| src * k + inv[src]).collect();
    let row_ll = tape.gather_sum(lp_rows, row_idx)?;
    // columns: target t picks source gold[t]
    let st = tape.transpose(s)?;
    let p_cols = tape.softmax_rows(st)?;
    let lp_cols = tape.log(p_cols)?;
    let col_idx: Vec<usize> = (0..k).map(|t| t * k + gold[t]).collect();
    let col_ll = tape.gather_sum(lp_cols, col_idx)?;
    let ll = tape.add(row_ll, col_ll)?;
    tape.scalar_mul(ll, -1.0)
}

/// Locally-normalized baseline: per-target K-way softmax over sources,
/// summed negative log-likelihood, no matching constraint.
pub fn mn_loss(tape: &mut Tape, s: VarId, gold: &[usize]) -> Result<VarId> {
    let shape = tape.value(s).shape().to_vec();
    if shape.len() != 2 {
        return Err(SsmnError::Shape("mn_loss wants a matrix".into()));
    }
    let (k_s, k_t) = (shape[0], shape[1]);
    check_gold(gold, k_s, k_t)?;
    let st = tape.transpose(s)?; // (K_t, K_s)
    let p = tape.softmax_rows(st)?;
    let lp = tape.log(p)?;
    let idx: Vec<usize> = (0..k_t).map(|t| t * k_s + gold[t]).collect();
    let ll = tape.gather_sum(lp, idx)?;
    tape.scalar_mul(ll, -1.0)
}

/// Locally-normalized sequential decoder with the matching constraint:
/// at each step softmax over the still-unused sources, greedily taking the
/// best. Returns the assignment and the per-step conditional probability of
/// the chosen source. The final step of a square problem has exactly one
/// feasible source, so its probability is exactly 1.0 — the label-bias
/// pathology in its literal form.
pub fn constrained_decode_probs(
    local: &[f64],
    k_s: usize,
    k_t: usize,
    order: &[usize],
) -> Result<(Vec<(usize, usize)>, Vec<f64>)> {
    if local.len() != k_s * k_t || k_t > k_s {
        return Err(SsmnError::Shape("constrained decoder: bad matrix".into()));
    }
    let mut used = vec![false; k_s];
    let mut pairs = Vec::with_capacity(k_t);
    let mut probs = Vec::with_capacity(k_t);
    for &tgt in order {
        let feasible: Vec<usize> = (0..k_s).filter(|&s| !used[s]).collect();
        let mx = feasible
            .iter()
            .map(|&s| local[s * k_t + tgt])
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = feasible
            .iter()
            .map(|&s| (local[s * k_t + tgt] - mx).exp())
            .collect();
        let z: f64 = exps.iter().sum();
        let mut best = 0usize;
        for i in 1..feasible.len() {
            if exps[i] > exps[best] {
                best = i;
            }
        }
        probs.push(exps[best] / z);
        used[feasible[best]] = true;
        pairs.push((tgt, feasible[best]));
    }
    Ok((pairs, probs))
}

/// One recorded hinge violation during LaSO search.
#[derive(Debug, Clone, Serialize)]
pub struct MarginViolation {
    pub step: usize,
    pub gold_prefix: Vec<(usize, usize)>,
    pub gold_score: f64,
    pub rival: Vec<(usize, usize)>,
    pub rival_score: f64,
    /// Number of incorrectly matched points in the rival prefix.
    pub delta: usize,
    /// Gold fell off the beam; search restarted from the gold prefix.
    pub restart: bool,
}

/// Beam-search hinge loss for one example.
///
/// Runs beam search of width `b` (forced to 1 at the final step); at every
/// step the hinge pairs the gold prefix against the lowest-scoring beam
/// element, with margin equal to the rival's count of wrong matches. When
/// the gold prefix falls off the beam, the beam is reset to the gold prefix
/// alone. Returns the accumulated positive hinges and the violation list.
pub fn laso_example_loss(
    scorer: &dyn Scorer,
    gold: &[usize],
    b: usize,
    target_order: &[usize],
) -> Result<(f64, Vec<MarginViolation>)> {
    let k_s = scorer.k_s();
    let k_t = scorer.k_t();
    check_gold(gold, k_s, k_t)?;
    if b == 0 {
        return Err(SsmnError::Invalid("LaSO beam width must be >= 1".into()));
    }
    let mut order_check: Vec<usize> = target_order.to_vec();
    order_check.sort_unstable();
    if order_check != (0..k_t).collect::<Vec<_>>() {
        return Err(SsmnError::Invalid(
            "target_order must be a permutation of 0..K_t".into(),
        ));
    }

    let mut beam = vec![PartialMatching::empty(k_s)];
    let mut gold_prefix = PartialMatching::empty(k_s);
    let mut loss = 0.0;
    let mut violations = Vec::new();
    for (step, &tgt) in target_order.iter().enumerate() {
        let eff_b = if step + 1 == target_order.len() { 1 } else { b };
        let mut candidates = Vec::with_capacity(beam.len() * k_s);
        for entry in &beam {
            for src in 0..k_s {
                if entry.used[src] {
                    continue;
                }
                let delta = scorer.extension_score(&entry.pairs, tgt, src);
                candidates.push(entry.extend(tgt, src, delta));
            }
        }
        beam = prune_beam(candidates, eff_b);
        let gdelta = scorer.extension_score(&gold_prefix.pairs, tgt, gold[tgt]);
        gold_prefix = gold_prefix.extend(tgt, gold[tgt], gdelta);

        let rival = beam.last().expect("non-empty beam");
        let delta = rival
            .pairs
            .iter()
            .filter(|&&(t, s)| gold[t] != s)
            .count();
        let hinge = delta as f64 + rival.score - gold_prefix.score;
        let gold_on_beam = beam.iter().any(|e| e.pairs == gold_prefix.pairs);
        if hinge > 0.0 {
            loss += hinge;
            violations.push(MarginViolation {
                step,
                gold_prefix: gold_prefix.pairs.clone(),
                gold_score: gold_prefix.score,
                rival: rival.pairs.clone(),
                rival_score: rival.score,
                delta,
                restart: !gold_on_beam,
            });
        }
        if !gold_on_beam {
            beam = vec![gold_prefix.clone()];
        }
    }
    Ok((loss, violations))
}

/// Differentiable LaSO loss: sum over violations of
/// f(rival) − f(gold prefix) (+ constant margins). `None` when there are no
/// violations — the gradient is exactly zero.
pub fn laso_loss_var(
    tape: &mut Tape,
    cache: &PairScoreCache,
    flags: FactorFlags,
    violations: &[MarginViolation],
) -> Result<Option<VarId>> {
    let mut acc: Option<VarId> = None;
    for v in violations {
        let rival = cache.total_score_var(tape, &v.rival, flags)?;
        let gold = cache.total_score_var(tape, &v.gold_prefix, flags)?;
        let diff = tape.sub(rival, gold)?;
        acc = Some(match acc {
            None => diff,
            Some(a) => tape.add(a, diff)?,
        });
    }
    Ok(acc)
}

/// SGD with momentum: v <- mu*v - lr*g; theta <- theta + v.
/// Non-finite gradients skip the whole step for that parameter and are
/// counted.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub skipped: usize,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, decay: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            decay,
            skipped: 0,
            velocity: store.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect(),
        }
    }

    /// One update over every parameter; absent grad slots count as zero.
    pub fn step(&mut self, store: &mut ParamStore) {
        for (i, (_, t)) in store.iter_mut().enumerate() {
            if let Some(g) = t.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    self.skipped += 1;
                    continue;
                }
            }
            let v = &mut self.velocity[i];
            match t.grad() {
                Some(g) => {
                    let g = g.to_vec();
                    let data = t.data_mut();
                    for j in 0..data.len() {
                        v[j] = self.momentum * v[j] - self.lr * g[j];
                        data[j] += v[j];
                    }
                }
                None => {
                    let data = t.data_mut();
                    for j in 0..data.len() {
                        v[j] *= self.momentum;
                        data[j] += v[j];
                    }
                }
            }
        }
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.decay;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::MatrixScorer;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix_loss<F>(s: &[f64], k: usize, gold: &[usize], f: F) -> f64
    where
        F: Fn(&mut Tape, VarId, &[usize]) -> Result<VarId>,
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::from_vec(&[k, k], s.to_vec()).unwrap());
        let loss = f(&mut tape, leaf, gold).unwrap();
        tape.value(loss).item()
    }

    #[test]
    fn amn_uniform_matrix_gives_2k_lnk() {
        let k = 10;
        let s = vec![0.7; k * k];
        let gold: Vec<usize> = (0..k).collect();
        let got = matrix_loss(&s, k, &gold, amn_loss);
        let want = 2.0 * 10.0 * (10.0f64).ln();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn amn_dominant_gold_saturates_to_zero() {
        let k = 4;
        let gold = [2, 0, 3, 1];
        let mut s = vec![0.0; k * k];
        for (t, &src) in gold.iter().enumerate() {
            s[src * k + t] = 100.0;
        }
        assert!(matrix_loss(&s, k, &gold, amn_loss) < 1e-3);
    }

    #[test]
    fn amn_rejects_non_permutation() {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::from_vec(&[3, 3], vec![0.0; 9]).unwrap());
        assert!(amn_loss(&mut tape, leaf, &[0, 0, 1]).is_err());
        assert!(amn_loss(&mut tape, leaf, &[0, 1]).is_err());
    }

    #[test]
    fn mn_uniform_matrix_gives_k_lnk() {
        let k = 10;
        let s = vec![-0.3; k * k];
        let gold: Vec<usize> = (0..k).rev().collect();
        let got = matrix_loss(&s, k, &gold, mn_loss);
        let want = 10.0 * (10.0f64).ln();
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn mn_dominant_gold_saturates_to_zero() {
        let k = 3;
        let gold = [1, 2, 0];
        let mut s = vec![0.0; k * k];
        for (t, &src) in gold.iter().enumerate() {
            s[src * k + t] = 100.0;
        }
        assert!(matrix_loss(&s, k, &gold, mn_loss) < 1e-3);
    }

    fn gradcheck_matrix_loss<F>(seed: u64, f: F)
    where
        F: Fn(&mut Tape, VarId, &[usize]) -> Result<VarId> + Copy,
    {
        let k = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gold = [3, 1, 4, 0, 2];
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::from_vec(&[k, k], s.clone()).unwrap());
        let loss = f(&mut tape, leaf, &gold).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(leaf).unwrap().to_vec();
        let mut eval = |vals: &[f64]| -> Result<f64> {
            let mut t = Tape::new();
            let l = t.leaf(Tensor::from_vec(&[k, k], vals.to_vec())?);
            let loss = f(&mut t, l, &gold)?;
            Ok(t.value(loss).item())
        };
        let err = crate::gradcheck::finite_diff_check(&mut eval, &analytic, &s, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn amn_gradient_matches_finite_differences() {
        gradcheck_matrix_loss(11, amn_loss);
    }

    #[test]
    fn mn_gradient_matches_finite_differences() {
        gradcheck_matrix_loss(13, mn_loss);
    }

    #[test]
    fn label_bias_final_step_probability_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let k = rng.gen_range(2..=6);
            let local: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let order: Vec<usize> = (0..k).collect();
            let (_, probs) = constrained_decode_probs(&local, k, k, &order).unwrap();
            assert_eq!(probs[k - 1], 1.0, "final-step probability must be exactly 1");
        }
    }

    #[test]
    fn laso_zero_loss_when_gold_dominates() {
        // gold identity scored far above everything at every step
        let k = 4;
        let mut local = vec![0.0; k * k];
        for i in 0..k {
            local[i * k + i] = 100.0;
        }
        let scorer = MatrixScorer {
            k_s: k,
            k_t: k,
            local,
            pair: None,
        };
        let gold: Vec<usize> = (0..k).collect();
        let order: Vec<usize> = (0..k).collect();
        let (loss, violations) = laso_example_loss(&scorer, &gold, 5, &order).unwrap();
        assert_eq!(loss, 0.0);
        assert!(violations.is_empty());
    }

    #[test]
    fn laso_hand_fixture_single_hinge() {
        // K=3, gold identity, B=1. Local scores (rows sources, cols targets):
        // step 0 picks s0 (gold). Step 1: s2 scores 12 vs gold's 10, so the
        // beam holds (s0,s2) at 22 while gold is 20: hinge = 1 + 22 - 20 = 3,
        // gold off beam, restart. Step 2 completes gold exactly: hinge 0.
        let local = vec![
            10.0, 0.0, 0.0, // s0
            0.0, 10.0, 0.0, // s1
            0.0, 12.0, 10.0, // s2
        ];
        let scorer = MatrixScorer {
            k_s: 3,
            k_t: 3,
            local,
            pair: None,
        };
        let (loss, violations) = laso_example_loss(&scorer, &[0, 1, 2], 1, &[0, 1, 2]).unwrap();
        assert!((loss - 3.0).abs() < 1e-12, "loss {loss}");
        assert_eq!(violations.len(), 1);
        let v = &violations[0];
        assert_eq!(v.step, 1);
        assert_eq!(v.delta, 1);
        assert!(v.restart);
        assert_eq!(v.rival, vec![(0, 0), (1, 2)]);
        assert!((v.rival_score - 22.0).abs() < 1e-12);
        assert!((v.gold_score - 20.0).abs() < 1e-12);
    }

    /// Independent greedy (B=1) reimplementation as an oracle.
    fn greedy_laso_oracle(scorer: &MatrixScorer, gold: &[usize], order: &[usize]) -> f64 {
        let k_s = scorer.k_s;
        let mut cur = PartialMatching::empty(k_s);
        let mut gold_prefix = PartialMatching::empty(k_s);
        let mut loss = 0.0;
        for &tgt in order {
            // greedy best extension, ties to lowest source
            let mut best: Option<(f64, usize)> = None;
            for src in 0..k_s {
                if cur.used[src] {
                    continue;
                }
                let d = scorer.extension_score(&cur.pairs, tgt, src);
                let total = cur.score + d;
                if best.map_or(true, |(b, _)| total > b + 1e-15) {
                    best = Some((total, src));
                }
            }
            let (score, src) = best.unwrap();
            cur = cur.extend(tgt, src, score - cur.score);
            let gd = scorer.extension_score(&gold_prefix.pairs, tgt, gold[tgt]);
            gold_prefix = gold_prefix.extend(tgt, gold[tgt], gd);
            let delta = cur.pairs.iter().filter(|&&(t, s)| gold[t] != s).count();
            let hinge = delta as f64 + cur.score - gold_prefix.score;
            if hinge > 0.0 {
                loss += hinge;
            }
            if cur.pairs != gold_prefix.pairs {
                cur = gold_prefix.clone();
            }
        }
        loss
    }

    #[test]
    fn laso_b1_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..200 {
            let k = 3;
            let local: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let scorer = MatrixScorer {
                k_s: k,
                k_t: k,
                local,
                pair: None,
            };
            let mut gold: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                gold.swap(i, rng.gen_range(0..=i));
            }
            let order: Vec<usize> = (0..k).collect();
            let (loss, _) = laso_example_loss(&scorer, &gold, 1, &order).unwrap();
            let oracle = greedy_laso_oracle(&scorer, &gold, &order);
            assert!(
                (loss - oracle).abs() < 1e-9,
                "laso {loss} vs greedy oracle {oracle}"
            );
        }
    }

    #[test]
    fn laso_loss_nonnegative_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let k = rng.gen_range(2..=5);
            let n = (k * k) * (k * k);
            let scorer = MatrixScorer {
                k_s: k,
                k_t: k,
                local: (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                pair: Some((0..n).map(|_| rng.gen_range(-0.3..0.3)).collect()),
            };
            let gold: Vec<usize> = (0..k).collect();
            let order: Vec<usize> = (0..k).collect();
            let (l1, v1) = laso_example_loss(&scorer, &gold, 3, &order).unwrap();
            let (l2, v2) = laso_example_loss(&scorer, &gold, 3, &order).unwrap();
            assert!(l1 >= 0.0);
            assert_eq!(l1, l2);
            assert_eq!(v1.len(), v2.len());
            assert_eq!(l1 == 0.0, v1.is_empty());
        }
    }

    #[test]
    fn sgd_zero_grad_keeps_params() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        store.zero_grads();
        let mut opt = Sgd::new(&store, 0.1, 0.9, 1.0);
        opt.step(&mut store);
        assert_eq!(store.get("w").data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_no_momentum_is_plain_sgd() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap());
        store.zero_grads();
        store.get_mut("w").grad_mut().copy_from_slice(&[0.5, -0.5]);
        let mut opt = Sgd::new(&store, 0.1, 0.0, 1.0);
        opt.step(&mut store);
        let d = store.get("w").data();
        assert!((d[0] - 0.95).abs() < 1e-15);
        assert!((d[1] - 1.05).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_step_closed_form() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let g = 1.0;
        let (lr, mu) = (0.1, 0.9);
        let mut opt = Sgd::new(&store, lr, mu, 1.0);
        for _ in 0..2 {
            store.zero_grads();
            store.get_mut("w").grad_mut()[0] = g;
            opt.step(&mut store);
        }
        // step 1: v = -lr*g; step 2: v = -lr*g*(1 + mu)
        let want = -lr * g + (-lr * g * (1.0 + mu));
        assert!((store.get("w").data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_non_finite_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        store.zero_grads();
        store.get_mut("w").grad_mut()[0] = f64::NAN;
        let mut opt = Sgd::new(&store, 0.1, 0.9, 1.0);
        opt.step(&mut store);
        assert_eq!(store.get("w").data()[0], 1.0);
        assert_eq!(opt.skipped, 1);
    }
}
