//! End-to-end phases: corpus loading, surrogate pre-training, beam-search
//! (LaSO) training, and evaluation with the full baseline table.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{Dataset, ImageParts, PatchParams};
use crate::datagen::derive_seed;
use crate::error::{Result, SsmnError};
use crate::factors::{self, FactorFlags};
use crate::inference::{
    affine_baseline, amn_nn_baseline, beam_search, cosine, hungarian_from_similarity,
    nn_rgb_baseline, TableScorer,
};
use crate::nets::EMBED_DIM;
use crate::model::Model;
use crate::params::TapeBinding;
use crate::pgm::read_pgm;
use crate::tape::Tape;
use crate::training::{amn_loss, laso_example_loss, laso_loss_var, mn_loss, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Amn,
    Mn,
}

pub struct LoadedImage {
    pub category: String,
    pub split: String,
    /// Distance-transform patches (encoder input).
    pub dt: ImageParts,
    /// Raw grayscale patches (NN-RGB baseline input).
    pub raw: ImageParts,
}

pub struct Corpus {
    pub images: BTreeMap<String, LoadedImage>,
    pub pairs: BTreeMap<String, Vec<(String, String)>>,
    pub name_counts: BTreeMap<String, usize>,
}

/// Load a dataset directory and preprocess every image once.
pub fn load_corpus(root: &Path, cfg: &RunConfig) -> Result<Corpus> {
    let ds = Dataset::load(root)?;
    let pp_dt = PatchParams {
        rho: cfg.rho,
        out_size: cfg.patch_size,
        ink_threshold: cfg.ink_threshold,
        use_dt: cfg.use_dt,
    };
    let pp_raw = PatchParams {
        use_dt: false,
        ..pp_dt.clone()
    };
    let mut images = BTreeMap::new();
    for (id, rec) in &ds.images {
        let img = read_pgm(&ds.raster_path(rec))?;
        images.insert(
            id.clone(),
            LoadedImage {
                category: rec.category.clone(),
                split: rec.split.clone(),
                dt: ImageParts::prepare(&img, &rec.parts, &pp_dt)?,
                raw: ImageParts::prepare(&img, &rec.parts, &pp_raw)?,
            },
        );
    }
    let name_counts = ds.train_name_counts();
    Ok(Corpus {
        images,
        pairs: ds.pairs,
        name_counts,
    })
}

impl Corpus {
    pub fn image(&self, id: &str) -> Result<&LoadedImage> {
        self.images
            .get(id)
            .ok_or_else(|| SsmnError::Data(format!("unknown image id '{id}'")))
    }
}

/// Gold matching target -> source by part name.
pub fn gold_from_names(src_names: &[String], tgt_names: &[String]) -> Result<Vec<usize>> {
    let index: BTreeMap<&str, usize> = src_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    tgt_names
        .iter()
        .map(|n| {
            index.get(n.as_str()).copied().ok_or_else(|| {
                SsmnError::Data(format!("target part '{n}' missing in source"))
            })
        })
        .collect()
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = items.to_vec();
    for i in (1..out.len()).rev() {
        out.swap(i, rng.gen_range(0..=i));
    }
    out
}

fn target_order(cfg: &RunConfig, k_t: usize, seed: u64) -> Vec<usize> {
    let order: Vec<usize> = (0..k_t).collect();
    if cfg.target_order == "fixed" {
        order
    } else {
        shuffled(&order, seed)
    }
}

/// Score-matrix forward for the surrogate objectives: local f_a only.
fn fa_values(model: &Model, src: &ImageParts, tgt: &ImageParts) -> Result<Vec<f64>> {
    let inputs = Model::pair_inputs(src, tgt);
    let mut tape = Tape::new();
    let mut binding = TapeBinding::new();
    let so: Vec<usize> = (0..src.patches.len()).collect();
    let to: Vec<usize> = (0..tgt.patches.len()).collect();
    let emb = factors::embed_pair(
        &mut tape,
        &mut binding,
        &model.store,
        &inputs,
        &so,
        &to,
        model.dual_encoder,
        None,
    )?;
    let fa = factors::fa_matrix(&mut tape, &emb)?;
    Ok(tape.value(fa).data().to_vec())
}

/// Matching accuracy (fraction of target parts correct) of one decode rule.
fn matrix_accuracy(objective: Objective, fa: &[f64], k_s: usize, k_t: usize, gold: &[usize]) -> Result<(usize, usize)> {
    let assign: Vec<usize> = match objective {
        Objective::Mn => (0..k_t)
            .map(|t| {
                (0..k_s)
                    .max_by(|&a, &b| {
                        fa[a * k_t + t]
                            .partial_cmp(&fa[b * k_t + t])
                            .expect("finite scores")
                            .then(b.cmp(&a))
                    })
                    .expect("non-empty")
            })
            .collect(),
        Objective::Amn => hungarian_from_similarity(fa, k_s, k_t)?,
    };
    let correct = assign.iter().zip(gold).filter(|(a, g)| a == g).count();
    Ok((correct, k_t))
}

/// Validation accuracy (percent) of the pre-training surrogate.
fn pretrain_val_accuracy(corpus: &Corpus, model: &Model, objective: Objective) -> Result<f64> {
    let pairs = corpus.pairs.get("val").cloned().unwrap_or_default();
    let (mut correct, mut total) = (0usize, 0usize);
    for (s, t) in &pairs {
        let (src, tgt) = (corpus.image(s)?, corpus.image(t)?);
        let gold = gold_from_names(&src.dt.names, &tgt.dt.names)?;
        let fa = fa_values(model, &src.dt, &tgt.dt)?;
        let (c, n) = matrix_accuracy(objective, &fa, src.dt.names.len(), tgt.dt.names.len(), &gold)?;
        correct += c;
        total += n;
    }
    if total == 0 {
        return Err(SsmnError::Data("no validation pairs".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

fn epoch_pairs(corpus: &Corpus, cfg: &RunConfig, epoch: usize) -> Vec<(String, String)> {
    let mut pairs = shuffled(
        corpus.pairs.get("train").map(|v| v.as_slice()).unwrap_or(&[]),
        derive_seed(cfg.seed, 0x5457, epoch as u64),
    );
    if cfg.max_pairs_per_epoch > 0 && pairs.len() > cfg.max_pairs_per_epoch {
        pairs.truncate(cfg.max_pairs_per_epoch);
    }
    pairs
}

/// Phase 1: train encoder + context with the surrogate objective until the
/// validation accuracy plateaus.
pub fn pretrain(
    corpus: &Corpus,
    cfg: &RunConfig,
    objective: Objective,
) -> Result<(Model, Vec<String>)> {
    let mut model = Model::init(cfg, &corpus.name_counts);
    let mut opt = Sgd::new(&model.store, cfg.lr, cfg.momentum, cfg.decay);
    let mut log = Vec::new();
    let phase = match objective {
        Objective::Amn => "amn",
        Objective::Mn => "mn",
    };
    let mut best = f64::NEG_INFINITY;
    let mut bad_evals = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.amn_max_epochs {
        for (s, t) in &epoch_pairs(corpus, cfg, epoch) {
            let (src, tgt) = (corpus.image(s)?, corpus.image(t)?);
            let gold = gold_from_names(&src.dt.names, &tgt.dt.names)?;
            let inputs = Model::pair_inputs(&src.dt, &tgt.dt);
            let mut tape = Tape::new();
            let mut binding = TapeBinding::new();
            let so: Vec<usize> = (0..src.dt.patches.len()).collect();
            let to: Vec<usize> = (0..tgt.dt.patches.len()).collect();
            let emb = factors::embed_pair(
                &mut tape,
                &mut binding,
                &model.store,
                &inputs,
                &so,
                &to,
                model.dual_encoder,
                None,
            )?;
            let fa = factors::fa_matrix(&mut tape, &emb)?;
            let loss = match objective {
                Objective::Amn => amn_loss(&mut tape, fa, &gold)?,
                Objective::Mn => mn_loss(&mut tape, fa, &gold)?,
            };
            let loss_val = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            model.store.zero_grads();
            binding.accumulate(&mut model.store, &grads)?;
            opt.step(&mut model.store);
            log.push(format!(
                "{{\"phase\":\"{phase}\",\"epoch\":{epoch},\"step\":{step},\"loss\":{loss_val:.6}}}"
            ));
            step += 1;
        }
        let acc = pretrain_val_accuracy(corpus, &model, objective)?;
        log.push(format!(
            "{{\"phase\":\"{phase}\",\"epoch\":{epoch},\"val_accuracy\":{acc:.4}}}"
        ));
        if acc > best + cfg.amn_plateau_delta {
            best = acc;
            bad_evals = 0;
        } else {
            bad_evals += 1;
            if bad_evals >= cfg.amn_patience {
                break;
            }
        }
        opt.end_epoch();
    }
    Ok((model, log))
}

/// Phase 2: conv-frozen LaSO. Conv features are precomputed once per image
/// and reused, so conv parameters receive exactly zero gradient.
pub fn laso_train(corpus: &Corpus, cfg: &RunConfig, model: &mut Model) -> Result<Vec<String>> {
    let mut conv_cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (id, img) in &corpus.images {
        if img.split == "train" {
            conv_cache.insert(id, model.conv_features(&img.dt.patches, "enc")?);
        }
    }
    let tgt_prefix = if model.dual_encoder { "enc_t" } else { "enc" };
    let mut tgt_conv_cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    if model.dual_encoder {
        for (id, img) in &corpus.images {
            if img.split == "train" {
                tgt_conv_cache.insert(id, model.conv_features(&img.dt.patches, tgt_prefix)?);
            }
        }
    }
    let flags = FactorFlags {
        use_gc: cfg.use_fgc,
        use_fp: cfg.use_fp,
    };
    let mut opt = Sgd::new(&model.store, cfg.lr, cfg.momentum, cfg.decay);
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.laso_epochs {
        for (s, t) in &epoch_pairs(corpus, cfg, 0x4C41 + epoch) {
            let (src, tgt) = (corpus.image(s)?, corpus.image(t)?);
            let gold = gold_from_names(&src.dt.names, &tgt.dt.names)?;
            let src_conv = &conv_cache[s.as_str()];
            let tgt_conv = if model.dual_encoder {
                &tgt_conv_cache[t.as_str()]
            } else {
                &conv_cache[t.as_str()]
            };
            let inputs = Model::pair_inputs(&src.dt, &tgt.dt);
            let (mut tape, binding, cache) =
                model.pair_cache(&inputs, Some((src_conv, tgt_conv)))?;
            let order = target_order(cfg, gold.len(), derive_seed(cfg.seed, 0x4F52, step as u64));
            let scorer = TableScorer {
                cache: &cache,
                flags,
            };
            let (loss, violations) = laso_example_loss(&scorer, &gold, cfg.train_beam, &order)?;
            let restarts = violations.iter().filter(|v| v.restart).count();
            if let Some(loss_var) = laso_loss_var(&mut tape, &cache, flags, &violations)? {
                let grads = tape.backward(loss_var)?;
                model.store.zero_grads();
                binding.accumulate(&mut model.store, &grads)?;
                opt.step(&mut model.store);
            }
            log.push(format!(
                "{{\"phase\":\"laso\",\"epoch\":{epoch},\"step\":{step},\"loss\":{loss:.6},\"violations\":{},\"restarts\":{restarts}}}",
                violations.len()
            ));
            step += 1;
        }
        opt.end_epoch();
    }
    Ok(log)
}

/// Full protocol: surrogate pretrain, then conv-frozen LaSO. Returns the
/// phase-1 parameter snapshot alongside the final model.
pub fn train_pipeline(
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<(crate::params::ParamStore, Model, Vec<String>)> {
    let (mut model, mut log) = pretrain(corpus, cfg, Objective::Amn)?;
    let pretrained = model.store.clone();
    let laso_log = laso_train(corpus, cfg, &mut model)?;
    log.extend(laso_log);
    Ok((pretrained, model, log))
}

#[derive(Debug, Clone)]
pub struct MethodAccuracy {
    pub method: String,
    pub correct: usize,
    pub total: usize,
    pub per_category: BTreeMap<String, (usize, usize)>,
}

impl MethodAccuracy {
    fn new(method: &str) -> MethodAccuracy {
        MethodAccuracy {
            method: method.to_string(),
            correct: 0,
            total: 0,
            per_category: BTreeMap::new(),
        }
    }
    fn add(&mut self, category: &str, correct: usize, total: usize) {
        self.correct += correct;
        self.total += total;
        let e = self.per_category.entry(category.to_string()).or_insert((0, 0));
        e.0 += correct;
        e.1 += total;
    }
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.correct as f64 / self.total as f64
        }
    }
}

pub struct EvalReport {
    pub rows: Vec<MethodAccuracy>,
    pub pair_records: Vec<String>,
}

/// Models used by the evaluation table. Rows for absent models are skipped.
pub struct EvalModels<'a> {
    /// LaSO-trained model (SSMN and SSMN−f_gc rows).
    pub ssmn: Option<&'a Model>,
    /// Model pretrained with the locally-normalized objective (MN rows).
    pub mn: Option<&'a Model>,
    /// Model pretrained with the surrogate objective (AMN+NN row).
    pub amn: Option<&'a Model>,
    /// Post-process the NN-RGB and AMN+NN rows with a 1:1 matching
    /// (unconstrained argmax when false).
    pub nn_hungarian: bool,
}

fn count_correct(assign: &[usize], gold: &[usize]) -> usize {
    assign.iter().zip(gold).filter(|(a, g)| a == g).count()
}

/// Evaluate every method on a split's pair list.
pub fn evaluate(
    corpus: &Corpus,
    split: &str,
    cfg: &RunConfig,
    models: &EvalModels,
    eval_beam: usize,
) -> Result<EvalReport> {
    let pairs = corpus
        .pairs
        .get(split)
        .ok_or_else(|| SsmnError::Data(format!("no pair list for split '{split}'")))?;
    let mut row_names = vec!["random", "nn-rgb", "affine"];
    if models.mn.is_some() {
        row_names.extend(["mn", "mn-hungarian"]);
    }
    if models.amn.is_some() {
        row_names.push("amn-nn");
    }
    if models.ssmn.is_some() {
        row_names.extend(["ssmn-nofgc", "ssmn"]);
    }
    let mut rows: BTreeMap<&str, MethodAccuracy> = row_names
        .iter()
        .map(|&n| (n, MethodAccuracy::new(n)))
        .collect();
    let mut pair_records = Vec::new();

    for (pair_idx, (s, t)) in pairs.iter().enumerate() {
        let (src, tgt) = (corpus.image(s)?, corpus.image(t)?);
        let cat = src.category.as_str();
        let gold = gold_from_names(&src.dt.names, &tgt.dt.names)?;
        let (k_s, k_t) = (src.dt.names.len(), tgt.dt.names.len());
        let mut record = |method: &str, assign: &[usize], rows: &mut BTreeMap<&str, MethodAccuracy>| {
            let c = count_correct(assign, &gold);
            rows.get_mut(method).expect("known method").add(cat, c, k_t);
            pair_records.push(format!(
                "{{\"source\":\"{s}\",\"target\":\"{t}\",\"method\":\"{method}\",\"correct\":{c},\"total\":{k_t}}}"
            ));
        };

        // random injective assignment, seeded per pair
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x52414E44, pair_idx as u64));
        let mut srcs: Vec<usize> = (0..k_s).collect();
        for i in (1..srcs.len()).rev() {
            srcs.swap(i, rng.gen_range(0..=i));
        }
        record("random", &srcs[..k_t], &mut rows);

        let nn_rgb = if models.nn_hungarian {
            // similarity = negated euclidean distance, sources as rows
            let mut sim = vec![0.0; k_s * k_t];
            for (si, sp) in src.raw.patches.iter().enumerate() {
                for (ti, tp) in tgt.raw.patches.iter().enumerate() {
                    let d2: f64 = sp.iter().zip(tp).map(|(a, b)| (a - b) * (a - b)).sum();
                    sim[si * k_t + ti] = -d2.sqrt();
                }
            }
            hungarian_from_similarity(&sim, k_s, k_t)?
        } else {
            nn_rgb_baseline(&src.raw.patches, &tgt.raw.patches)
        };
        record("nn-rgb", &nn_rgb, &mut rows);

        let aff = affine_baseline(&src.dt.locs, &tgt.dt.locs, 100)?;
        let mut aff_assign = vec![0usize; k_t];
        for &(t_i, s_i) in &aff.pairs {
            aff_assign[t_i] = s_i;
        }
        record("affine", &aff_assign, &mut rows);

        if let Some(mn) = models.mn {
            let fa = fa_values(mn, &src.dt, &tgt.dt)?;
            let argmax: Vec<usize> = (0..k_t)
                .map(|t_i| {
                    (0..k_s)
                        .max_by(|&a, &b| {
                            fa[a * k_t + t_i]
                                .partial_cmp(&fa[b * k_t + t_i])
                                .expect("finite scores")
                                .then(b.cmp(&a))
                        })
                        .expect("non-empty")
                })
                .collect();
            record("mn", &argmax, &mut rows);
            record("mn-hungarian", &hungarian_from_similarity(&fa, k_s, k_t)?, &mut rows);
        }

        if let Some(amn) = models.amn {
            let se = amn.embeddings(&src.dt.patches, "enc")?;
            let te = amn.embeddings(
                &tgt.dt.patches,
                if amn.dual_encoder { "enc_t" } else { "enc" },
            )?;
            let assign = if models.nn_hungarian {
                let mut sim = vec![0.0; k_s * k_t];
                for si in 0..k_s {
                    for ti in 0..k_t {
                        sim[si * k_t + ti] = cosine(
                            &se[si * EMBED_DIM..(si + 1) * EMBED_DIM],
                            &te[ti * EMBED_DIM..(ti + 1) * EMBED_DIM],
                        );
                    }
                }
                hungarian_from_similarity(&sim, k_s, k_t)?
            } else {
                amn_nn_baseline(&se, &te)
            };
            record("amn-nn", &assign, &mut rows);
        }

        if let Some(ssmn) = models.ssmn {
            let inputs = Model::pair_inputs(&src.dt, &tgt.dt);
            let (_tape, _binding, cache) = ssmn.pair_cache(&inputs, None)?;
            let order =
                target_order(cfg, k_t, derive_seed(cfg.seed, 0x4556, pair_idx as u64));
            for (name, use_gc) in [("ssmn-nofgc", false), ("ssmn", true)] {
                let flags = FactorFlags {
                    use_gc: use_gc && cfg.use_fgc,
                    use_fp: cfg.use_fp,
                };
                let scorer = TableScorer {
                    cache: &cache,
                    flags,
                };
                let (best, _) = beam_search(&scorer, eval_beam, &order)?;
                let mut assign = vec![0usize; k_t];
                for &(t_i, s_i) in &best.pairs {
                    assign[t_i] = s_i;
                }
                record(name, &assign, &mut rows);
            }
        }
    }
    Ok(EvalReport {
        rows: row_names
            .iter()
            .map(|&n| rows.remove(n).expect("row exists"))
            .collect(),
        pair_records,
    })
}

/// TSV rendering: one row per method, overall then per-category accuracy.
pub fn report_tsv(report: &EvalReport) -> String {
    let mut cats: Vec<&String> = report
        .rows
        .first()
        .map(|r| r.per_category.keys().collect())
        .unwrap_or_default();
    cats.sort();
    let mut out = String::from("method\toverall");
    for c in &cats {
        out.push('\t');
        out.push_str(c);
    }
    out.push('\n');
    for row in &report.rows {
        out.push_str(&format!("{}\t{:.2}", row.method, row.accuracy()));
        for c in &cats {
            let (cc, ct) = row.per_category.get(*c).copied().unwrap_or((0, 0));
            let acc = if ct == 0 { 0.0 } else { 100.0 * cc as f64 / ct as f64 };
            out.push_str(&format!("\t{acc:.2}"));
        }
        out.push('\n');
    }
    out
}

/// Accuracy as a function of beam width, plus the per-pair score sanity
/// property best(B_max) >= best(B_min) - 1e-9.
pub fn beam_sweep(
    corpus: &Corpus,
    split: &str,
    cfg: &RunConfig,
    ssmn: &Model,
    beams: &[usize],
) -> Result<(Vec<(usize, f64)>, bool)> {
    let pairs = corpus
        .pairs
        .get(split)
        .ok_or_else(|| SsmnError::Data(format!("no pair list for split '{split}'")))?;
    if beams.is_empty() {
        return Err(SsmnError::Invalid("empty beam sweep".into()));
    }
    let flags = FactorFlags {
        use_gc: cfg.use_fgc,
        use_fp: cfg.use_fp,
    };
    let mut acc: Vec<(usize, usize, usize)> = beams.iter().map(|&b| (b, 0, 0)).collect();
    let mut monotone_ok = true;
    let (b_min, b_max) = (
        *beams.iter().min().expect("non-empty"),
        *beams.iter().max().expect("non-empty"),
    );
    for (pair_idx, (s, t)) in pairs.iter().enumerate() {
        let (src, tgt) = (corpus.image(s)?, corpus.image(t)?);
        let gold = gold_from_names(&src.dt.names, &tgt.dt.names)?;
        let inputs = Model::pair_inputs(&src.dt, &tgt.dt);
        let (_tape, _binding, cache) = ssmn.pair_cache(&inputs, None)?;
        let order = target_order(cfg, gold.len(), derive_seed(cfg.seed, 0x4556, pair_idx as u64));
        let scorer = TableScorer {
            cache: &cache,
            flags,
        };
        let mut score_at: BTreeMap<usize, f64> = BTreeMap::new();
        for (i, &b) in beams.iter().enumerate() {
            let (best, _) = beam_search(&scorer, b, &order)?;
            score_at.insert(b, best.score);
            let mut assign = vec![0usize; gold.len()];
            for &(t_i, s_i) in &best.pairs {
                assign[t_i] = s_i;
            }
            acc[i].1 += count_correct(&assign, &gold);
            acc[i].2 += gold.len();
        }
        if score_at[&b_max] < score_at[&b_min] - 1e-9 {
            monotone_ok = false;
        }
    }
    Ok((
        acc.into_iter()
            .map(|(b, c, n)| (b, if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 }))
            .collect(),
        monotone_ok,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_dataset, DatasetSpec, TransformRanges};

    fn tiny_dataset(dir: &Path, seed: u64) {
        let spec = DatasetSpec {
            categories: 4,
            per_category: 3,
            k: 3,
            split_fracs: (0.5, 0.25, 0.25),
            seed,
            ranges: TransformRanges::default(),
        };
        build_dataset(&spec, dir).unwrap();
    }

    fn tiny_config(data_dir: &Path) -> RunConfig {
        RunConfig {
            data_dir: data_dir.to_string_lossy().into_owned(),
            k: 3,
            amn_max_epochs: 1,
            max_pairs_per_epoch: 4,
            train_beam: 3,
            eval_beam: 10,
            ..RunConfig::default()
        }
    }

    #[test]
    fn corpus_loads_and_golds_resolve() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 3);
        let cfg = tiny_config(dir.path());
        let corpus = load_corpus(dir.path(), &cfg).unwrap();
        assert_eq!(corpus.images.len(), 12);
        for (s, t) in corpus.pairs["train"].iter() {
            let (src, tgt) = (corpus.image(s).unwrap(), corpus.image(t).unwrap());
            let gold = gold_from_names(&src.dt.names, &tgt.dt.names).unwrap();
            let mut sorted = gold.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, vec![0, 1, 2]);
        }
    }

    #[test]
    fn pretrain_step_runs_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 5);
        let cfg = tiny_config(dir.path());
        let corpus = load_corpus(dir.path(), &cfg).unwrap();
        let (m1, log1) = pretrain(&corpus, &cfg, Objective::Amn).unwrap();
        let (m2, log2) = pretrain(&corpus, &cfg, Objective::Amn).unwrap();
        assert_eq!(log1, log2);
        for (name, t) in m1.store.iter() {
            assert_eq!(t.data(), m2.store.get(name).data(), "param {name} differs");
        }
        assert!(log1.iter().any(|l| l.contains("val_accuracy")));
    }

    #[test]
    fn laso_freezes_conv_parameters() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 7);
        let cfg = tiny_config(dir.path());
        let corpus = load_corpus(dir.path(), &cfg).unwrap();
        let (pretrained, model, log) = train_pipeline(&corpus, &cfg).unwrap();
        for name in crate::nets::conv_param_names("enc") {
            assert_eq!(
                pretrained.get(&name).data(),
                model.store.get(&name).data(),
                "conv parameter {name} changed during LaSO"
            );
        }
        assert!(log.iter().any(|l| l.contains("\"phase\":\"laso\"")));
    }

    #[test]
    fn evaluate_emits_all_rows_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 9);
        let cfg = tiny_config(dir.path());
        let corpus = load_corpus(dir.path(), &cfg).unwrap();
        let model = Model::init(&cfg, &corpus.name_counts);
        let models = EvalModels {
            ssmn: Some(&model),
            mn: Some(&model),
            amn: Some(&model),
            nn_hungarian: false,
        };
        let r1 = evaluate(&corpus, "test", &cfg, &models, 10).unwrap();
        let r2 = evaluate(&corpus, "test", &cfg, &models, 10).unwrap();
        assert_eq!(report_tsv(&r1), report_tsv(&r2));
        let methods: Vec<&str> = r1.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(
            methods,
            vec!["random", "nn-rgb", "affine", "mn", "mn-hungarian", "amn-nn", "ssmn-nofgc", "ssmn"]
        );
        for row in &r1.rows {
            assert!(row.total > 0);
            assert!(row.correct <= row.total);
        }
    }

    #[test]
    fn beam_sweep_scores_are_sane() {
        let dir = tempfile::tempdir().unwrap();
        tiny_dataset(dir.path(), 13);
        let cfg = tiny_config(dir.path());
        let corpus = load_corpus(dir.path(), &cfg).unwrap();
        let model = Model::init(&cfg, &corpus.name_counts);
        let (rows, monotone_ok) = beam_sweep(&corpus, "test", &cfg, &model, &[1, 5]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(monotone_ok);
    }
}
