//! `vsod` command-line interface: train, infer, eval, ablate.
//!
//! Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vsod_core::error::{Error, Result};
use vsod_core::inference::Inferencer;
use vsod_core::metrics;
use vsod_core::params::ParameterStore;
use vsod_core::persistence::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vsod_core::persistence::config::load_config;
use vsod_core::persistence::dataset::{index_auto, load_gray01, load_mask, DatasetIndex};
use vsod_core::tensor::Tensor;
use vsod_core::training::{self, AblationFlags, FeMode};

const DATA_ROOT_ENV: &str = "VSOD_DATA_ROOT";

#[derive(Parser)]
#[command(name = "vsod", version, about = "Video salient object detection: two-stage distillation training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training stage.
    Train {
        /// 1 (single-frame) or 2 (frame-pair finetuning).
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated dataset roots (or set VSOD_DATA_ROOT).
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to start from (required for stage 2 unless
        /// <out>/stage1_final.ckpt exists).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write per-frame saliency maps and a timing report.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated sequence names (default: all).
        #[arg(long)]
        sequences: Option<String>,
    },
    /// Score a prediction directory against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report path (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train + infer + eval each scenario and emit a comparison table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated subset of: bs,sd,sd+td,sd+fe_o,sd+td+fe_t,full.
        #[arg(long)]
        scenarios: String,
        /// Held-out dataset for scoring (default: --data).
        #[arg(long)]
        eval_data: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn resolve_roots(data: Option<String>) -> Result<Vec<PathBuf>> {
    let spec = match data {
        Some(s) => s,
        None => std::env::var(DATA_ROOT_ENV).map_err(|_| {
            Error::Config(format!("no --data given and {DATA_ROOT_ENV} is not set"))
        })?,
    };
    let roots: Vec<PathBuf> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(PathBuf::from)
        .collect();
    if roots.is_empty() {
        return Err(Error::Config("empty --data list".into()));
    }
    Ok(roots)
}

fn index_roots(roots: &[PathBuf]) -> Result<Vec<DatasetIndex>> {
    roots.iter().map(|r| index_auto(r)).collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            stage,
            config,
            data,
            out,
            resume,
            seed,
        } => cmd_train(stage, &config, data, &out, resume, seed),
        Cmd::Infer {
            ckpt,
            data,
            out,
            sequences,
        } => cmd_infer(&ckpt, data, &out, sequences),
        Cmd::Eval { pred, gt, out } => cmd_eval(&pred, &gt, &out),
        Cmd::Ablate {
            config,
            data,
            out,
            scenarios,
            eval_data,
        } => cmd_ablate(&config, data, &out, &scenarios, eval_data),
    }
}

fn cmd_train(
    stage: u8,
    config: &Path,
    data: Option<String>,
    out: &Path,
    resume: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut run = load_config(config)?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    let roots = resolve_roots(data)?;
    let indexes = index_roots(&roots)?;
    for idx in &indexes {
        for note in &idx.exceptions {
            eprintln!("warning: {note}");
        }
    }
    std::fs::create_dir_all(out)?;
    match stage {
        1 => {
            let init = match &resume {
                Some(p) => Some(load_checkpoint(p)?.parameters),
                None => None,
            };
            let outcome =
                training::train_stage1::<f32>(&indexes, &run, init.as_ref(), Some(out))?;
            println!(
                "stage 1 done: {} iterations, final loss line: {}",
                outcome.log.len(),
                outcome.log.last().map(String::as_str).unwrap_or("-")
            );
        }
        2 => {
            let init_path = match &resume {
                Some(p) => p.clone(),
                None => {
                    let candidate = out.join("stage1_final.ckpt");
                    if !candidate.exists() {
                        return Err(Error::Config(
                            "stage 2 needs --resume or an existing stage1_final.ckpt in --out"
                                .into(),
                        ));
                    }
                    candidate
                }
            };
            let init: ParameterStore<f32> = load_checkpoint(&init_path)?.parameters;
            let (outcome, report) =
                training::train_stage2::<f32>(&init, &indexes, &run, Some(out))?;
            println!(
                "stage 2 done: adopted {} keys, initialized {} keys, final loss line: {}",
                report.adopted.len(),
                report.initialized.len(),
                outcome.log.last().map(String::as_str).unwrap_or("-")
            );
        }
        other => {
            return Err(Error::Config(format!("--stage must be 1 or 2, got {other}")));
        }
    }
    Ok(())
}

fn cmd_infer(
    ckpt: &Path,
    data: Option<String>,
    out: &Path,
    sequences: Option<String>,
) -> Result<()> {
    let checkpoint = load_checkpoint(ckpt)?;
    let inferencer = Inferencer::<f32>::from_checkpoint(&checkpoint)?;
    let roots = resolve_roots(data)?;
    let filter: Option<Vec<String>> =
        sequences.map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    for root in &roots {
        let index = index_auto(root)?;
        let reports = inferencer.infer_dataset(&index, out, filter.as_deref())?;
        for r in &reports {
            println!(
                "{}: {} maps, mean {:.4}s median {:.4}s sd {:.4}s per frame",
                r.sequence, r.maps_written, r.timing.mean_s, r.timing.median_s, r.timing.std_s
            );
            for (path, err) in &r.skipped {
                eprintln!("warning: skipped {path}: {err}");
            }
        }
    }
    Ok(())
}

fn image_stems(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    fn walk(dir: &Path, base: &Path, out: &mut BTreeMap<String, PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, base, out)?;
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("png" | "jpg" | "jpeg")
            ) {
                let rel = path.strip_prefix(base).unwrap().with_extension("");
                out.insert(rel.to_string_lossy().into_owned(), path);
            }
        }
        Ok(())
    }
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out)?;
    Ok(out)
}

fn cmd_eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    let pred_stems = image_stems(pred)?;
    let gt_stems = image_stems(gt)?;
    let missing_gt: Vec<&String> =
        pred_stems.keys().filter(|k| !gt_stems.contains_key(*k)).collect();
    let missing_pred: Vec<&String> =
        gt_stems.keys().filter(|k| !pred_stems.contains_key(*k)).collect();
    if !missing_gt.is_empty() || !missing_pred.is_empty() {
        let mut msg = String::from("unpaired files between --pred and --gt:");
        for s in missing_gt {
            msg.push_str(&format!("\n  prediction without ground truth: {s}"));
        }
        for s in missing_pred {
            msg.push_str(&format!("\n  ground truth without prediction: {s}"));
        }
        return Err(Error::Data(msg));
    }
    let mut preds: Vec<Tensor<f64>> = Vec::with_capacity(pred_stems.len());
    let mut gts = Vec::with_capacity(gt_stems.len());
    for (stem, ppath) in &pred_stems {
        preds.push(load_gray01(ppath)?);
        gts.push(load_mask(&gt_stems[stem])?);
    }
    let result = metrics::evaluate(&preds, &gts, metrics::DEFAULT_BETA2)?;
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, json)?;
    println!(
        "frames {}  f_max {:.4}  mae {:.4}  (empty-gt excluded: {})",
        result.frame_count, result.f_max, result.mae, result.empty_gt_excluded
    );
    Ok(())
}

/// Scores one scenario's maps against a dataset's annotations.
fn eval_maps_against_index(maps_root: &Path, index: &DatasetIndex) -> Result<metrics::EvalResult> {
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for seq in &index.sequences {
        for (i, mask) in seq.masks.iter().enumerate() {
            let Some(mask) = mask else { continue };
            let map_path = maps_root.join(&seq.name).join(format!("{}.png", seq.stem(i)));
            if !map_path.exists() {
                return Err(Error::Data(format!("missing map {}", map_path.display())));
            }
            preds.push(load_gray01::<f64>(&map_path)?);
            gts.push(load_mask::<f64>(mask)?);
        }
    }
    metrics::evaluate(&preds, &gts, metrics::DEFAULT_BETA2)
}

fn cmd_ablate(
    config: &Path,
    data: Option<String>,
    out: &Path,
    scenarios: &str,
    eval_data: Option<String>,
) -> Result<()> {
    let base_run = load_config(config)?;
    let names: Vec<String> = scenarios
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let flag_sets: Vec<AblationFlags> = names
        .iter()
        .map(|n| AblationFlags::from_scenario(n))
        .collect::<Result<_>>()?;
    let roots = resolve_roots(data)?;
    let train_indexes = index_roots(&roots)?;
    let eval_indexes = match eval_data {
        Some(s) => index_roots(&resolve_roots(Some(s))?)?,
        None => train_indexes.clone(),
    };
    std::fs::create_dir_all(out)?;

    // one distillation-free stage-1 checkpoint shared by every scenario, so
    // the scenarios differ only in their finetuning flags
    let mut shared_run = base_run.clone();
    shared_run.ablation = AblationFlags {
        sd: false,
        td: false,
        fe: FeMode::Off,
    };
    let shared_dir = out.join("_stage1_shared");
    let shared =
        training::train_stage1::<f32>(&train_indexes, &shared_run, None, Some(&shared_dir))?;
    println!("shared stage-1 checkpoint trained ({} iterations)", shared.log.len());

    let mut rows = Vec::new();
    for (name, flags) in names.iter().zip(flag_sets.iter()) {
        let mut run = base_run.clone();
        run.ablation = *flags;
        let scen_dir = out.join(name.replace('+', "_"));
        std::fs::create_dir_all(&scen_dir)?;
        let params = if flags.td || flags.uses_encoder() {
            let (outcome, _) = training::train_stage2::<f32>(
                &shared.params,
                &train_indexes,
                &run,
                Some(&scen_dir),
            )?;
            outcome.params
        } else {
            // no temporal component: the finetuning budget is spent on
            // single-frame training with the scenario's spatial flags
            let mut cont = run.clone();
            cont.train.stage1 = cont.train.stage2;
            let outcome = training::train_stage1::<f32>(
                &train_indexes,
                &cont,
                Some(&shared.params),
                Some(&scen_dir),
            )?;
            outcome.params
        };
        let ckpt = Checkpoint::new(params.cast(), run.clone());
        save_checkpoint(&scen_dir.join("final.ckpt"), &ckpt.parameters, &run)?;
        let inferencer = Inferencer::<f32>::from_checkpoint(&ckpt)?;
        let maps_dir = scen_dir.join("maps");
        for index in &eval_indexes {
            inferencer.infer_dataset(index, &maps_dir, None)?;
        }
        let mut result = None;
        for index in &eval_indexes {
            result = Some(eval_maps_against_index(&maps_dir, index)?);
        }
        let result = result.ok_or_else(|| Error::Data("no evaluation data".into()))?;
        println!("{name}: f_max {:.4} mae {:.4}", result.f_max, result.mae);
        rows.push((name.clone(), *flags, result.f_max, result.mae));
    }

    let mut table = String::from("Method\tSD\tTD\tFE_o\tFE_t\tF_beta\tMAE\n");
    for (name, flags, f, m) in &rows {
        let tick = |b: bool| if b { "x" } else { "" };
        table.push_str(&format!(
            "{name}\t{}\t{}\t{}\t{}\t{f:.4}\t{m:.4}\n",
            tick(flags.sd),
            tick(flags.td),
            tick(flags.fe == FeMode::TrainOnly),
            tick(flags.fe == FeMode::TrainAndTest),
        ));
    }
    std::fs::write(out.join("ablation.tsv"), &table)?;
    print!("{table}");
    Ok(())
}
