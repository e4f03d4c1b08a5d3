//! Finite-difference gradient verification organized by parameter group,
//! backing the `gradcheck` command.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::Result;
use crate::factors::{self, FactorFlags, PairInputs};
use crate::gradcheck::finite_diff_check_sampled;
use crate::model::Model;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{amn_loss, mn_loss};

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

pub const TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;
const K: usize = 3;
const COORDS_PER_PARAM: usize = 2;

fn fixture_names() -> Vec<String> {
    (0..K).map(|i| format!("part{i}")).collect()
}

fn fixture_counts() -> BTreeMap<String, usize> {
    fixture_names().into_iter().map(|n| (n, 2)).collect()
}

struct Fixture {
    src_patches: Vec<Vec<f64>>,
    tgt_patches: Vec<Vec<f64>>,
    src_locs: Vec<(f64, f64)>,
    tgt_locs: Vec<(f64, f64)>,
    src_names: Vec<String>,
}

impl Fixture {
    fn new(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = |rng: &mut ChaCha8Rng| {
            (0..K)
                .map(|_| (0..32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let locs = |rng: &mut ChaCha8Rng| {
            (0..K)
                .map(|_| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)))
                .collect::<Vec<(f64, f64)>>()
        };
        Fixture {
            src_patches: patches(&mut rng),
            tgt_patches: patches(&mut rng),
            src_locs: locs(&mut rng),
            tgt_locs: locs(&mut rng),
            src_names: fixture_names(),
        }
    }
    fn inputs(&self) -> PairInputs<'_> {
        PairInputs {
            src_patches: &self.src_patches,
            src_locs: &self.src_locs,
            src_names: &self.src_names,
            tgt_patches: &self.tgt_patches,
            tgt_locs: &self.tgt_locs,
        }
    }
}

/// Scalar objective exercising every network: full-matching total score plus
/// both surrogate losses on the local table.
fn fixture_loss(model: &Model, fixture: &Fixture) -> Result<(Tape, crate::tape::VarId)> {
    let flags = FactorFlags {
        use_gc: true,
        use_fp: true,
    };
    let (mut tape, _binding, cache) = model.pair_cache(&fixture.inputs(), None)?;
    let matching: Vec<(usize, usize)> = (0..K).map(|t| (t, (t + 1) % K)).collect();
    let score = cache.total_score_var(&mut tape, &matching, flags)?;
    let gold: Vec<usize> = (0..K).map(|t| (t + 1) % K).collect();
    let a = amn_loss(&mut tape, cache.fa_var, &gold)?;
    let m = mn_loss(&mut tape, cache.fa_var, &gold)?;
    let sa = tape.add(score, a)?;
    let total = tape.add(sa, m)?;
    Ok((tape, total))
}

/// Central differences at step h and h/2; coordinates where the two
/// estimates disagree sit on a ReLU/maxpool kink and are excluded.
fn check_coords(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    point: &[f64],
    indices: &[usize],
    want: usize,
) -> Result<(f64, usize)> {
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for &i in indices {
        if checked >= want {
            break;
        }
        let orig = x[i];
        let mut central = |x: &mut Vec<f64>, h: f64| -> Result<f64> {
            x[i] = orig + h;
            let fp = f(x)?;
            x[i] = orig - h;
            let fm = f(x)?;
            x[i] = orig;
            Ok((fp - fm) / (2.0 * h))
        };
        let n1 = central(&mut x, H)?;
        let n2 = central(&mut x, H / 2.0)?;
        if (n1 - n2).abs() / n1.abs().max(n2.abs()).max(1e-8) > 1e-3 {
            continue; // kink exclusion
        }
        let err = (analytic[i] - n2).abs() / (1e-8f64).max(analytic[i].abs() + n2.abs());
        worst = worst.max(err);
        checked += 1;
    }
    Ok((worst, checked))
}

/// Coordinates with the largest analytic gradient magnitude; dead-ReLU
/// entries would otherwise make the spot check vacuous.
fn top_indices(analytic: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..analytic.len()).collect();
    idx.sort_by(|&a, &b| {
        analytic[b]
            .abs()
            .partial_cmp(&analytic[a].abs())
            .expect("finite gradients")
            .then(a.cmp(&b))
    });
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Parameter groups checked by the report, with their member parameters.
pub fn parameter_groups(model: &Model) -> Vec<(String, Vec<String>)> {
    let p = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut groups = vec![
        ("encoder-conv".to_string(), crate::nets::conv_param_names("enc")),
        (
            "encoder-fc".to_string(),
            p(&["enc.fc1.w", "enc.fc1.b", "enc.fc2.w", "enc.fc2.b"]),
        ),
        ("context".to_string(), crate::nets::context_param_names("ctx")),
        ("f_p".to_string(), p(&["fp.w1", "fp.b1", "fp.w"])),
        (
            "f_sc".to_string(),
            p(&["gc.sc.w1", "gc.sc.b1", "gc.sc.w2", "gc.sc.b2", "gc.sc.w"]),
        ),
        (
            "f_ac".to_string(),
            p(&["gc.ac.w1", "gc.ac.b1", "gc.ac.w2", "gc.ac.b2", "gc.ac.w"]),
        ),
    ];
    let mut pname: Vec<String> = model
        .table
        .known_names()
        .iter()
        .map(|n| format!("pname.{n}"))
        .collect();
    pname.push(format!("pname.{}", factors::UNKNOWN_PART));
    groups.push(("part-names".to_string(), pname));
    groups
}

/// Run the full per-group finite-difference suite. `corrupt_group`, when set,
/// perturbs that group's analytic gradient before comparison; it exists so
/// the harness itself can be shown to catch a wrong backward pass.
pub fn gradcheck_report(seed: u64, corrupt_group: Option<&str>) -> Result<Vec<GroupReport>> {
    let cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    let model = Model::init(&cfg, &fixture_counts());
    let fixture = Fixture::new(seed ^ 0x464958);

    // analytic gradients, one backward pass
    let mut grad_store = model.store.clone();
    {
        let flags = FactorFlags {
            use_gc: true,
            use_fp: true,
        };
        let (mut tape2, binding2, cache2) = model.pair_cache(&fixture.inputs(), None)?;
        let matching: Vec<(usize, usize)> = (0..K).map(|t| (t, (t + 1) % K)).collect();
        let score = cache2.total_score_var(&mut tape2, &matching, flags)?;
        let gold: Vec<usize> = (0..K).map(|t| (t + 1) % K).collect();
        let a = amn_loss(&mut tape2, cache2.fa_var, &gold)?;
        let m = mn_loss(&mut tape2, cache2.fa_var, &gold)?;
        let sa = tape2.add(score, a)?;
        let total = tape2.add(sa, m)?;
        let grads = tape2.backward(total)?;
        grad_store.zero_grads();
        binding2.accumulate(&mut grad_store, &grads)?;
    }

    let mut out = Vec::new();
    for (group, params) in parameter_groups(&model) {
        let corrupt = corrupt_group == Some(group.as_str());
        let mut worst = 0.0f64;
        let mut coords = 0usize;
        for name in &params {
            let point = model.store.get(name).data().to_vec();
            let mut analytic = grad_store
                .get(name)
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; point.len()]);
            if corrupt {
                for g in &mut analytic {
                    *g += 0.5;
                }
            }
            let indices = top_indices(&analytic, 4 * COORDS_PER_PARAM);
            let mut f = |x: &[f64]| -> Result<f64> {
                let mut m = Model {
                    store: model.store.clone(),
                    table: model.table.clone(),
                    dual_encoder: model.dual_encoder,
                };
                m.store.get_mut(name).data_mut().copy_from_slice(x);
                let (tape, loss) = fixture_loss(&m, &fixture)?;
                Ok(tape.value(loss).item())
            };
            let (err, checked) =
                check_coords(&mut f, &analytic, &point, &indices, COORDS_PER_PARAM)?;
            worst = worst.max(err);
            coords += checked;
        }
        out.push(GroupReport {
            group,
            max_rel_err: worst,
            coords_checked: coords,
        });
    }

    // surrogate losses checked on a standalone score matrix
    for (group, kind) in [("amn-loss", 0usize), ("mn-loss", 1usize)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4C4F5353);
        let point: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gold = vec![2usize, 0, 3, 1];
        let build = |x: &[f64]| -> Result<(Tape, crate::tape::VarId, crate::tape::VarId)> {
            let mut tape = Tape::new();
            let s = tape.leaf(Tensor::from_vec(&[4, 4], x.to_vec())?);
            let l = if kind == 0 {
                amn_loss(&mut tape, s, &gold)?
            } else {
                mn_loss(&mut tape, s, &gold)?
            };
            Ok((tape, s, l))
        };
        let (tape, s_leaf, l) = build(&point)?;
        let grads = tape.backward(l)?;
        let mut analytic = vec![0.0; 16];
        if let Some(g) = grads.get(s_leaf) {
            analytic.copy_from_slice(g);
        }
        if corrupt_group == Some(group) {
            for g in &mut analytic {
                *g += 0.5;
            }
        }
        let indices: Vec<usize> = (0..16).collect();
        let mut f = |x: &[f64]| -> Result<f64> {
            let (tape, _, l) = build(x)?;
            Ok(tape.value(l).item())
        };
        let worst = finite_diff_check_sampled(&mut f, &analytic, &point, H, &indices)?;
        out.push(GroupReport {
            group: group.to_string(),
            max_rel_err: worst,
            coords_checked: 16,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_groups_pass_on_fresh_init() {
        let report = gradcheck_report(11, None).unwrap();
        let groups: Vec<&str> = report.iter().map(|r| r.group.as_str()).collect();
        assert_eq!(
            groups,
            vec![
                "encoder-conv",
                "encoder-fc",
                "context",
                "f_p",
                "f_sc",
                "f_ac",
                "part-names",
                "amn-loss",
                "mn-loss"
            ]
        );
        for r in &report {
            assert!(
                r.max_rel_err < TOLERANCE,
                "group {} err {}",
                r.group,
                r.max_rel_err
            );
            assert!(r.coords_checked > 0);
        }
    }

    #[test]
    fn corrupted_backward_named() {
        let report = gradcheck_report(11, Some("f_sc")).unwrap();
        let bad: Vec<&str> = report
            .iter()
            .filter(|r| r.max_rel_err >= TOLERANCE)
            .map(|r| r.group.as_str())
            .collect();
        assert_eq!(bad, vec!["f_sc"]);
    }
}
