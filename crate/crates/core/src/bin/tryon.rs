//! Command-line interface for the try-on pipeline: synthetic data
//! generation, two-stage training, rejection calibration, inference, and
//! evaluation.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tryon_core::condgen::AblationFlags;
use tryon_core::data::save_dataset;
use tryon_core::data::synth::{generate_synthetic_dataset_with, SynthConfig};
use tryon_core::harness::config::RunConfig;
use tryon_core::harness::grid::emit_grid;
use tryon_core::harness::metrics::{
    tocg_log_text, toig_log_text, TocgRow, ToigRow, TOCG_LOG_HEADER, TOIG_LOG_HEADER,
};
use tryon_core::harness::pipeline::{
    build_tocg, build_toig, calibrate_rejection, eval_paired, infer, load_tocg, load_toig,
    mix_records, prepare_dataset, save_tocg, save_toig, unpaired_permutation, InferResult,
    PreparedDataset, TocgBundle,
};
use tryon_core::harness::run_in_pool;
use tryon_core::harness::tocg::train_tocg;
use tryon_core::harness::toig::train_toig;
use tryon_core::nn::Adam;
use tryon_core::palette::LabelPalette;
use tryon_core::rejection::{
    build_rejection_input, d_scalar, gate, GateDecision, RejectionCalibration,
};

#[derive(Parser)]
#[command(name = "tryon", about = "Two-stage virtual try-on pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration shared by every run-like subcommand. Values come from an
/// optional config file first, then explicit flags, then `--set key=value`
/// overrides (every RunConfig field is reachable by key).
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set lambda_tv=0.5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    synth_n: Option<usize>,
    /// Worker threads; 0 uses all cores. Results are bit-identical for any
    /// value.
    #[arg(long)]
    threads: Option<usize>,
    /// Deterministic mode (ordered record iteration; on by default).
    #[arg(long)]
    deterministic: Option<bool>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    no_fusion_exchange: bool,
    #[arg(long)]
    no_condition_align: bool,
    #[arg(long)]
    no_occlusion_handling: bool,
    #[arg(long)]
    no_multiscale_losses: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::parse_file(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(i) = self.iterations {
            cfg.iterations = i;
        }
        if let Some(n) = self.synth_n {
            cfg.synth_n = n;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(d) = self.deterministic {
            cfg.deterministic = d;
        }
        if let Some(t) = self.tau {
            cfg.tau = t;
        }
        cfg.ablation.no_fusion_exchange |= self.no_fusion_exchange;
        cfg.ablation.no_condition_align |= self.no_condition_align;
        cfg.ablation.no_occlusion_handling |= self.no_occlusion_handling;
        cfg.ablation.no_multiscale_losses |= self.no_multiscale_losses;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.apply_kv(k.trim(), v.trim())
                .with_context(|| format!("applying --set {kv:?}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the on-disk layout.
    MakeSynth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write records at output resolution instead of condition
        /// resolution.
        #[arg(long)]
        output_scale: bool,
        #[arg(long)]
        occlusion_prob: Option<f64>,
    },
    /// Train the try-on condition generator.
    TrainTocg {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the try-on image generator against a frozen condition
    /// generator.
    TrainToig {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        tocg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Calibrate the discriminator rejection normalizer on a dataset.
    CalibrateReject {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        tocg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline on one person/cloth pair.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        tocg: PathBuf,
        #[arg(long)]
        toig: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        person_idx: usize,
        #[arg(long, default_value_t = 0)]
        cloth_idx: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Paired/unpaired evaluation with SSIM and optional grid emission.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        tocg: PathBuf,
        #[arg(long)]
        toig: PathBuf,
        #[arg(long)]
        calib: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Swap garments by seeded permutation instead of reconstruction.
        #[arg(long)]
        unpaired: bool,
    },
    /// Gate every dataset sample through a saved rejection calibration.
    Reject {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        tocg: PathBuf,
        #[arg(long)]
        calib: PathBuf,
    },
}

fn write_log(path: &Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, text).with_context(|| format!("writing log {}", p.display()))?;
    }
    Ok(())
}

fn gate_sample(
    tocg: &TocgBundle,
    data: &PreparedDataset,
    idx: usize,
    cal: &RejectionCalibration,
    ablation: AblationFlags,
) -> Result<(GateDecision, f64)> {
    let rec = &data.cond[idx];
    let out = tocg.gen.forward(&tocg.store, rec, &tocg.palette, ablation);
    let x = build_rejection_input(
        &out.seg,
        &rec.pose,
        &rec.agnostic_parse,
        &rec.clothes,
        &rec.clothes_mask,
    )?;
    let d = d_scalar(&tocg.disc, &tocg.store, &x);
    Ok((gate(d, cal), d))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::MakeSynth {
            cfg,
            out,
            output_scale,
            occlusion_prob,
        } => {
            let cfg = cfg.build()?;
            let palette = LabelPalette::default_tryon();
            let res = if output_scale {
                cfg.output_resolution
            } else {
                cfg.condition_resolution
            };
            let synth_cfg = SynthConfig {
                occlusion_prob: occlusion_prob.unwrap_or(cfg.occlusion_prob),
                ..SynthConfig::default()
            };
            let recs: Vec<_> =
                generate_synthetic_dataset_with(cfg.seed, cfg.synth_n, res, &palette, &synth_cfg)
                    .into_iter()
                    .map(|(r, _)| r)
                    .collect();
            let pairs = save_dataset(&recs, &out, &palette)?;
            println!(
                "wrote {} records at {}x{} to {} (pairs file {})",
                recs.len(),
                res.0,
                res.1,
                out.display(),
                pairs.display()
            );
        }
        Command::TrainTocg {
            cfg,
            out,
            log,
            resume,
        } => {
            let cfg = cfg.build()?;
            let palette = LabelPalette::default_tryon();
            let (mut bundle, mut adam_gen, mut adam_disc, start_iter) = match &resume {
                Some(path) => {
                    let (b, ck) = load_tocg(path)?;
                    let mut ag = Adam::new(cfg.lr_tocg, cfg.beta1, cfg.beta2, b.store.len());
                    let mut ad = Adam::new(cfg.lr_tocg, cfg.beta1, cfg.beta2, b.store.len());
                    if let Some((t, slots)) = ck.adam_gen {
                        ag.restore(t, slots);
                    }
                    if let Some((t, slots)) = ck.adam_disc {
                        ad.restore(t, slots);
                    }
                    (b, ag, ad, ck.header.iteration)
                }
                None => {
                    let b = build_tocg(&palette, &cfg)?;
                    let ag = Adam::new(cfg.lr_tocg, cfg.beta1, cfg.beta2, b.store.len());
                    let ad = Adam::new(cfg.lr_tocg, cfg.beta1, cfg.beta2, b.store.len());
                    (b, ag, ad, 0)
                }
            };
            let data = prepare_dataset(&cfg, &bundle.palette)?;
            println!("{TOCG_LOG_HEADER}");
            let mut rows: Vec<TocgRow> = Vec::new();
            let outcome = {
                let bundle = &mut bundle;
                let adam_gen = &mut adam_gen;
                let adam_disc = &mut adam_disc;
                let rows = &mut rows;
                let cfg_ref = &cfg;
                let data = &data;
                run_in_pool(cfg_ref.threads, move || {
                    train_tocg(
                        bundle,
                        adam_gen,
                        adam_disc,
                        data,
                        cfg_ref,
                        start_iter,
                        |row| {
                            println!("{}", row.to_line());
                            rows.push(row);
                        },
                    )
                })
            };
            if let Err(e) = &outcome {
                let snap = out.with_extension("diag.ckpt");
                let _ = save_tocg(&snap, &bundle, cfg.iterations, None, None);
                write_log(&log, &tocg_log_text(&rows))?;
                bail!(
                    "training aborted: {e} (diagnostic snapshot at {})",
                    snap.display()
                );
            }
            save_tocg(
                &out,
                &bundle,
                cfg.iterations,
                Some(&adam_gen),
                Some(&adam_disc),
            )?;
            write_log(&log, &tocg_log_text(&rows))?;
            println!("saved condition-generator checkpoint to {}", out.display());
        }
        Command::TrainToig {
            cfg,
            tocg,
            out,
            log,
        } => {
            let cfg = cfg.build()?;
            let (tocg_bundle, _) = load_tocg(&tocg)?;
            let palette = tocg_bundle.palette.clone();
            let mut bundle = build_toig(&palette, &cfg)?;
            let mut adam_gen = Adam::new(cfg.lr_toig_gen, cfg.beta1, cfg.beta2, bundle.store.len());
            let mut adam_disc =
                Adam::new(cfg.lr_toig_disc, cfg.beta1, cfg.beta2, bundle.store.len());
            let data = prepare_dataset(&cfg, &palette)?;
            println!("{TOIG_LOG_HEADER}");
            let mut rows: Vec<ToigRow> = Vec::new();
            let outcome = {
                let bundle = &mut bundle;
                let adam_gen = &mut adam_gen;
                let adam_disc = &mut adam_disc;
                let rows = &mut rows;
                let cfg_ref = &cfg;
                let data = &data;
                let tocg_bundle = &tocg_bundle;
                run_in_pool(cfg_ref.threads, move || {
                    train_toig(
                        bundle,
                        tocg_bundle,
                        adam_gen,
                        adam_disc,
                        data,
                        cfg_ref,
                        0,
                        |row| {
                            println!("{}", row.to_line());
                            rows.push(row);
                        },
                    )
                })
            };
            if let Err(e) = &outcome {
                write_log(&log, &toig_log_text(&rows))?;
                bail!("training aborted: {e}");
            }
            save_toig(
                &out,
                &bundle,
                cfg.iterations,
                Some(&adam_gen),
                Some(&adam_disc),
            )?;
            write_log(&log, &toig_log_text(&rows))?;
            println!("saved image-generator checkpoint to {}", out.display());
        }
        Command::CalibrateReject { cfg, tocg, out } => {
            let cfg = cfg.build()?;
            let (bundle, _) = load_tocg(&tocg)?;
            let data = prepare_dataset(&cfg, &bundle.palette)?;
            let cal = run_in_pool(cfg.threads, || {
                calibrate_rejection(&bundle, &data, cfg.tau, cfg.ablation)
            })?;
            cal.save(&out)?;
            println!(
                "calibrated over {} samples: L = {}, tau = {} -> {}",
                cal.score_stats.len(),
                cal.l,
                cal.threshold,
                out.display()
            );
        }
        Command::Infer {
            cfg,
            tocg,
            toig,
            calib,
            person_idx,
            cloth_idx,
            out,
            grid,
        } => {
            let cfg = cfg.build()?;
            let (tocg_bundle, _) = load_tocg(&tocg)?;
            let (toig_bundle, _) = load_toig(&toig)?;
            let cal = match calib {
                Some(p) => Some(RejectionCalibration::load(&p)?),
                None => None,
            };
            let data = prepare_dataset(&cfg, &tocg_bundle.palette)?;
            if person_idx >= data.len() || cloth_idx >= data.len() {
                bail!(
                    "person/cloth index out of range (dataset has {} records)",
                    data.len()
                );
            }
            let res = infer(
                &tocg_bundle,
                &toig_bundle,
                &data.cond[person_idx],
                &data.out[person_idx],
                &data.cond[cloth_idx],
                &data.out[cloth_idx],
                cal.as_ref(),
                cfg.ablation,
            )?;
            match (&res.image, res.p_accept) {
                (Some(img), p) => {
                    tryon_core::data::save_rgb(&out, &img.data)?;
                    match p {
                        Some(p) => println!("accepted (p_accept = {p}); wrote {}", out.display()),
                        None => println!("wrote {}", out.display()),
                    }
                }
                (None, p) => println!(
                    "rejected by the discriminator gate (p_accept = {})",
                    p.unwrap_or(f64::NAN)
                ),
            }
            if let Some(gpath) = grid {
                let rec = mix_records(&data.out[person_idx], &data.out[cloth_idx]);
                emit_grid(&[rec], &[res], &gpath)?;
                println!("wrote grid {}", gpath.display());
            }
        }
        Command::Eval {
            cfg,
            tocg,
            toig,
            calib,
            grid,
            unpaired,
        } => {
            let cfg = cfg.build()?;
            let (tocg_bundle, _) = load_tocg(&tocg)?;
            let (toig_bundle, _) = load_toig(&toig)?;
            let cal = match calib {
                Some(p) => Some(RejectionCalibration::load(&p)?),
                None => None,
            };
            let data = prepare_dataset(&cfg, &tocg_bundle.palette)?;
            if data.is_empty() {
                bail!("evaluation dataset is empty");
            }
            run_in_pool(cfg.threads, || -> Result<()> {
                if unpaired {
                    let perm = unpaired_permutation(data.len(), cfg.seed);
                    let mut results: Vec<InferResult> = Vec::new();
                    let mut records = Vec::new();
                    let mut accepted = 0usize;
                    for i in 0..data.len() {
                        let j = perm[i];
                        let res = infer(
                            &tocg_bundle,
                            &toig_bundle,
                            &data.cond[i],
                            &data.out[i],
                            &data.cond[j],
                            &data.out[j],
                            cal.as_ref(),
                            cfg.ablation,
                        )?;
                        accepted += res.accepted as usize;
                        records.push(mix_records(&data.out[i], &data.out[j]));
                        results.push(res);
                    }
                    println!(
                        "unpaired: {} / {} accepted by the gate",
                        accepted,
                        data.len()
                    );
                    if let Some(gpath) = &grid {
                        emit_grid(&records, &results, gpath)?;
                        println!("wrote grid {}", gpath.display());
                    }
                } else {
                    let (mean, scores) =
                        eval_paired(&tocg_bundle, &toig_bundle, &data, cfg.ablation)?;
                    for (i, s) in scores.iter().enumerate() {
                        println!("{} ssim {}", data.out[i].pair_id, s);
                    }
                    println!("paired ssim mean over {} samples: {mean}", scores.len());
                    if let Some(gpath) = &grid {
                        let results: Vec<InferResult> = (0..data.len())
                            .map(|i| {
                                infer(
                                    &tocg_bundle,
                                    &toig_bundle,
                                    &data.cond[i],
                                    &data.out[i],
                                    &data.cond[i],
                                    &data.out[i],
                                    None,
                                    cfg.ablation,
                                )
                            })
                            .collect::<Result<_, _>>()?;
                        emit_grid(&data.out, &results, gpath)?;
                        println!("wrote grid {}", gpath.display());
                    }
                }
                Ok(())
            })?;
        }
        Command::Reject { cfg, tocg, calib } => {
            let cfg = cfg.build()?;
            let (bundle, _) = load_tocg(&tocg)?;
            let cal = RejectionCalibration::load(&calib)?;
            let data = prepare_dataset(&cfg, &bundle.palette)?;
            let mut accepted = 0usize;
            for i in 0..data.len() {
                let (decision, d) = gate_sample(&bundle, &data, i, &cal, cfg.ablation)?;
                match decision {
                    GateDecision::Accept => {
                        accepted += 1;
                        println!("{} accept (D = {d})", data.cond[i].pair_id);
                    }
                    GateDecision::Reject(p) => {
                        println!("{} reject (D = {d}, p_accept = {p})", data.cond[i].pair_id);
                    }
                }
            }
            println!(
                "{accepted} / {} accepted at tau = {}",
                data.len(),
                cal.threshold
            );
        }
    }
    Ok(())
}
