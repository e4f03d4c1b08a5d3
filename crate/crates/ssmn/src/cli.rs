//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 data error,
//! 3 check failure. `SSMN_OUT_DIR` supplies the default output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::datagen::{build_dataset, DatasetSpec, TransformRanges};
use crate::diagnostics;
use crate::error::{Result, SsmnError};
use crate::model::Model;
use crate::pipeline::{
    self, beam_sweep, evaluate, laso_train, pretrain, report_tsv, EvalModels, Objective,
};

pub const OUT_DIR_ENV: &str = "SSMN_OUT_DIR";

#[derive(Parser)]
#[command(name = "ssmn", about = "One-shot part matching: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// key = value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// extra config override, KEY=VALUE (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset into the data directory
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        categories: Option<usize>,
        #[arg(long)]
        per_category: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Surrogate pre-training of encoder and context networks
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// amn (row+column softmax) or mn (row-only)
        #[arg(long, default_value = "amn")]
        objective: String,
    },
    /// Beam-search (LaSO) training starting from a pretrain checkpoint
    Train {
        #[command(flatten)]
        common: Common,
        /// pretrain checkpoint (default: <out_dir>/pretrain_amn.ckpt)
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate models and baselines on one split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        /// LaSO checkpoint for the full-model rows
        #[arg(long)]
        ssmn: Option<PathBuf>,
        /// mn-pretrained checkpoint for the local-matcher rows
        #[arg(long)]
        mn: Option<PathBuf>,
        /// amn-pretrained checkpoint for the embedding-NN row
        #[arg(long)]
        amn: Option<PathBuf>,
        /// override eval beam width
        #[arg(long)]
        beam: Option<usize>,
        /// comma-separated beam widths, e.g. 1,5,10,50,100,200
        #[arg(long)]
        beam_sweep: Option<String>,
        /// 1:1 post-processing for the NN baselines
        #[arg(long)]
        hungarian: bool,
        #[arg(long)]
        disable_fgc: bool,
        #[arg(long)]
        disable_fp: bool,
    },
    /// Model-free baselines only (random, NN-RGB, affine)
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        hungarian: bool,
    },
    /// Finite-difference verification of every gradient group
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn build_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text)?;
    }
    let mut out_dir_overridden = common.config.is_some();
    for kv in &common.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SsmnError::Invalid(format!("--set wants KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
        if k.trim() == "out_dir" {
            out_dir_overridden = true;
        }
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(d) = &common.data_dir {
        cfg.set("data_dir", d)?;
    }
    if let Some(o) = &common.out_dir {
        cfg.set("out_dir", o)?;
        out_dir_overridden = true;
    }
    if !out_dir_overridden {
        if let Ok(env_dir) = std::env::var(OUT_DIR_ENV) {
            cfg.set("out_dir", &env_dir)?;
        }
    }
    Ok(cfg)
}

fn load_model_checkpoint(cfg: &RunConfig, corpus: &pipeline::Corpus, path: &Path) -> Result<Model> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.config_hash != cfg.hash() {
        return Err(SsmnError::Checkpoint(format!(
            "config hash mismatch for {}: checkpoint {:#x}, current config {:#x}",
            path.display(),
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    let mut model = Model::init(cfg, &corpus.name_counts);
    checkpoint::validate_against(&ckpt, &model.store)?;
    model.store = ckpt.store;
    Ok(model)
}

fn write_out(cfg: &RunConfig, name: &str, contents: &str) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = DatasetSpec {
        categories: cfg.categories,
        per_category: cfg.per_category,
        k: cfg.k,
        split_fracs: (cfg.train_frac, cfg.val_frac, cfg.test_frac),
        seed: cfg.seed,
        ranges: TransformRanges {
            rot: cfg.rot_degrees.to_radians(),
            scale_min: cfg.scale_min,
            scale_max: cfg.scale_max,
            trans: cfg.trans,
            flip_p: cfg.flip_p,
            jitter_sigma: cfg.jitter_sigma,
        },
    };
    build_dataset(&spec, Path::new(&cfg.data_dir))?;
    println!(
        "wrote {} images ({} categories x {}) under {}",
        cfg.categories * cfg.per_category,
        cfg.categories,
        cfg.per_category,
        cfg.data_dir
    );
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, objective: &str) -> Result<()> {
    let obj = match objective {
        "amn" => Objective::Amn,
        "mn" => Objective::Mn,
        other => {
            return Err(SsmnError::Invalid(format!(
                "objective must be amn or mn, got '{other}'"
            )))
        }
    };
    let corpus = pipeline::load_corpus(Path::new(&cfg.data_dir), cfg)?;
    let (model, log) = pretrain(&corpus, cfg, obj)?;
    let stem = format!("pretrain_{objective}");
    write_out(cfg, &format!("{stem}.log.jsonl"), &(log.join("\n") + "\n"))?;
    write_out(cfg, &format!("{stem}.config.txt"), &cfg.to_text())?;
    let dir = PathBuf::from(&cfg.out_dir);
    checkpoint::save(&dir.join(format!("{stem}.ckpt")), &model.store, &stem, cfg.hash())?;
    println!("saved {}", dir.join(format!("{stem}.ckpt")).display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, from: Option<&Path>) -> Result<()> {
    let corpus = pipeline::load_corpus(Path::new(&cfg.data_dir), cfg)?;
    let default_from = PathBuf::from(&cfg.out_dir).join("pretrain_amn.ckpt");
    let from = from.unwrap_or(&default_from);
    let mut model = load_model_checkpoint(cfg, &corpus, from)?;
    let log = laso_train(&corpus, cfg, &mut model)?;
    write_out(cfg, "laso.log.jsonl", &(log.join("\n") + "\n"))?;
    write_out(cfg, "ssmn.config.txt", &cfg.to_text())?;
    let path = PathBuf::from(&cfg.out_dir).join("ssmn.ckpt");
    checkpoint::save(&path, &model.store, "laso", cfg.hash())?;
    println!("saved {}", path.display());
    Ok(())
}

fn print_report(tsv: &str) {
    // aligned human-readable rendering of the TSV
    let rows: Vec<Vec<&str>> = tsv.lines().map(|l| l.split('\t').collect()).collect();
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.len()).max().unwrap_or(0))
        .collect();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{:>width$}", s, width = widths[c]))
            .collect();
        println!("{}", line.join("  "));
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    mut cfg: RunConfig,
    split: &str,
    ssmn: Option<&Path>,
    mn: Option<&Path>,
    amn: Option<&Path>,
    beam: Option<usize>,
    beam_sweep_arg: Option<&str>,
    hungarian: bool,
    disable_fgc: bool,
    disable_fp: bool,
) -> Result<()> {
    let corpus = pipeline::load_corpus(Path::new(&cfg.data_dir), &cfg)?;
    let ssmn_model = ssmn.map(|p| load_model_checkpoint(&cfg, &corpus, p)).transpose()?;
    let mn_model = mn.map(|p| load_model_checkpoint(&cfg, &corpus, p)).transpose()?;
    let amn_model = amn.map(|p| load_model_checkpoint(&cfg, &corpus, p)).transpose()?;
    // flag overrides apply after the hash check so checkpoints stay loadable
    if disable_fgc {
        cfg.use_fgc = false;
    }
    if disable_fp {
        cfg.use_fp = false;
    }
    let eval_beam = beam.unwrap_or(cfg.eval_beam);
    let models = EvalModels {
        ssmn: ssmn_model.as_ref(),
        mn: mn_model.as_ref(),
        amn: amn_model.as_ref(),
        nn_hungarian: hungarian,
    };
    let report = evaluate(&corpus, split, &cfg, &models, eval_beam)?;
    let tsv = report_tsv(&report);
    write_out(&cfg, &format!("report_{split}.tsv"), &tsv)?;
    write_out(
        &cfg,
        &format!("pairs_{split}.jsonl"),
        &(report.pair_records.join("\n") + "\n"),
    )?;
    print_report(&tsv);

    if let Some(spec) = beam_sweep_arg {
        let model = ssmn_model
            .as_ref()
            .ok_or_else(|| SsmnError::Invalid("--beam-sweep needs --ssmn".into()))?;
        let beams = parse_beam_list(spec)?;
        let (rows, monotone_ok) = beam_sweep(&corpus, split, &cfg, model, &beams)?;
        let mut out = String::from("beam\taccuracy\n");
        for (b, acc) in &rows {
            out.push_str(&format!("{b}\t{acc:.2}\n"));
        }
        write_out(&cfg, &format!("beam_sweep_{split}.tsv"), &out)?;
        print_report(&out);
        println!("monotone_score_property\t{}", if monotone_ok { "ok" } else { "VIOLATED" });
        if !monotone_ok {
            return Err(SsmnError::Invalid(
                "beam sweep violated the monotone score property".into(),
            ));
        }
    }
    Ok(())
}

fn parse_beam_list(spec: &str) -> Result<Vec<usize>> {
    let beams: Vec<usize> = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| SsmnError::Invalid(format!("bad beam width '{s}'")))
        })
        .collect::<Result<_>>()?;
    if beams.is_empty() || beams.contains(&0) {
        return Err(SsmnError::Invalid("beam widths must be positive".into()));
    }
    Ok(beams)
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<bool> {
    let report = diagnostics::gradcheck_report(cfg.seed, None)?;
    println!("{:<14} {:>14} {:>8}", "group", "max_rel_err", "coords");
    let mut ok = true;
    for r in &report {
        let status = if r.max_rel_err < diagnostics::TOLERANCE {
            "ok"
        } else {
            ok = false;
            "FAIL"
        };
        println!(
            "{:<14} {:>14.3e} {:>8}   {status}",
            r.group, r.max_rel_err, r.coords_checked
        );
    }
    Ok(ok)
}

fn exit_code(err: &SsmnError) -> i32 {
    match err {
        SsmnError::Invalid(_) => 1,
        _ => 2,
    }
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version with a success exit
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result: Result<i32> = (|| match cli.cmd {
        Cmd::GenData {
            common,
            categories,
            per_category,
            k,
        } => {
            let mut cfg = build_config(&common)?;
            if let Some(c) = categories {
                cfg.set("categories", &c.to_string())?;
            }
            if let Some(p) = per_category {
                cfg.set("per_category", &p.to_string())?;
            }
            if let Some(k) = k {
                cfg.set("k", &k.to_string())?;
            }
            cmd_gen_data(&cfg)?;
            Ok(0)
        }
        Cmd::Pretrain { common, objective } => {
            let cfg = build_config(&common)?;
            cmd_pretrain(&cfg, &objective)?;
            Ok(0)
        }
        Cmd::Train { common, from } => {
            let cfg = build_config(&common)?;
            cmd_train(&cfg, from.as_deref())?;
            Ok(0)
        }
        Cmd::Eval {
            common,
            split,
            ssmn,
            mn,
            amn,
            beam,
            beam_sweep,
            hungarian,
            disable_fgc,
            disable_fp,
        } => {
            let cfg = build_config(&common)?;
            cmd_eval(
                cfg,
                &split,
                ssmn.as_deref(),
                mn.as_deref(),
                amn.as_deref(),
                beam,
                beam_sweep.as_deref(),
                hungarian,
                disable_fgc,
                disable_fp,
            )?;
            Ok(0)
        }
        Cmd::Baseline {
            common,
            split,
            hungarian,
        } => {
            let cfg = build_config(&common)?;
            cmd_eval(cfg, &split, None, None, None, None, None, hungarian, false, false)?;
            Ok(0)
        }
        Cmd::Gradcheck { common } => {
            let cfg = build_config(&common)?;
            if cmd_gradcheck(&cfg)? {
                Ok(0)
            } else {
                Ok(3)
            }
        }
    })();
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
