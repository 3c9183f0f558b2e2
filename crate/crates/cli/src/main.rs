//! `pavae` command-line tool. Every command that writes files writes them
//! under its `--out` directory together with a `manifest.json` that `replay`
//! can re-execute.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use pavae::config::Config;
use pavae::experiments::{run_downstream_experiment, DownstreamConfig};
use pavae::io::{
    read_json, read_mask, read_volume, write_json, write_loss_log, write_mask, write_volume, Checkpoint, RunManifest,
};
use pavae::metrics::MetricsReport;
use pavae::models::{LesionSynthNet, MaskSynthNet};
use pavae::phantom::{composite, make_phantoms, SamplePair};
use pavae::sampling::sample_lesions;
use pavae::segment::SegmenterConfig;
use pavae::train::{init_rng, train_lesion_stage, train_mask_stage};
use pavae::volume::{Dims, MaskVolume, Volume};

#[derive(Parser, Debug)]
#[command(name = "pavae", version, about = "Two-stage lesion synthesis: phantoms, training, sampling, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate lesion phantoms, their masks and host volumes.
    Phantoms {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the size-conditioned mask network on a phantom directory.
    TrainMask {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the mask-guided lesion network on a phantom directory.
    TrainLesion {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw new masks and lesions from trained networks.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mask_model: PathBuf,
        #[arg(long)]
        lesion_model: PathBuf,
        /// Defaults to the config's synth_count.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paste a lesion cube into a host volume with a feathered mask.
    Composite {
        #[arg(long)]
        host: PathBuf,
        #[arg(long)]
        lesion: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Corner of the cube inside the host, as `d,h,w`.
        #[arg(long)]
        origin: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print PSNR, SSIM and NMSE of a test volume (or directory) against a reference.
    EvalSynth {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Print Dice, Jaccard, ASD and HD95 of predicted masks against ground truth.
    EvalSeg {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Segmentation with and without synthetic augmentation.
    Downstream {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a run from its manifest into a new directory and compare outputs.
    Replay {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Phantoms { .. } => "phantoms",
            Self::TrainMask { .. } => "train-mask",
            Self::TrainLesion { .. } => "train-lesion",
            Self::Sample { .. } => "sample",
            Self::Composite { .. } => "composite",
            Self::EvalSynth { .. } => "eval-synth",
            Self::EvalSeg { .. } => "eval-seg",
            Self::Downstream { .. } => "downstream",
            Self::Replay { .. } => "replay",
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Config::parse_str(&text).with_context(|| format!("config {}", p.display()))
        }
    }
}

/// Creates `out` and refuses to reuse a directory that already holds a run.
fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    if out.join(RunManifest::FILE_NAME).exists() {
        bail!("{} already contains a run manifest", out.display());
    }
    Ok(())
}

fn finish(mut manifest: RunManifest, out: &Path) -> Result<()> {
    manifest.record_outputs(out)?;
    manifest.write(out)?;
    Ok(())
}

fn numbered(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix)))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no *{suffix} files in {}", dir.display());
    }
    Ok(files)
}

fn phantom_file(out: &Path, i: usize, kind: &str) -> PathBuf {
    out.join(format!("{i:04}_{kind}.pvae"))
}

fn parse_origin(s: &str) -> Result<Dims> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| anyhow!("origin `{s}` is not three comma-separated integers"))?;
    parts
        .try_into()
        .map_err(|_| anyhow!("origin `{s}` is not three comma-separated integers"))
}

/// Reads every phantom (mask, lesion) pair of a `phantoms` output directory.
fn read_pairs(dir: &Path, with_lesions: bool) -> Result<(Vec<MaskVolume>, Vec<Volume>, Vec<PathBuf>)> {
    let mask_files = numbered(dir, "_mask.pvae")?;
    let mut inputs = mask_files.clone();
    let masks = mask_files.iter().map(|p| read_mask(p)).collect::<pavae::Result<Vec<_>>>()?;
    let mut lesions = Vec::new();
    if with_lesions {
        let lesion_files = numbered(dir, "_lesion.pvae")?;
        if lesion_files.len() != masks.len() {
            bail!("{} masks but {} lesions in {}", masks.len(), lesion_files.len(), dir.display());
        }
        lesions = lesion_files.iter().map(|p| read_volume(p)).collect::<pavae::Result<Vec<_>>>()?;
        inputs.extend(lesion_files);
    }
    Ok((masks, lesions, inputs))
}

fn manifest_for(cmd: &Command, cfg: &Config, args: &[(&str, String)], inputs: &[PathBuf]) -> Result<RunManifest> {
    let mut m = RunManifest::new(cmd.name(), cfg.to_text(), cfg.seed);
    m.args = args.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    for p in inputs {
        m.add_input(p)?;
    }
    Ok(m)
}

fn write_config(out: &Path, cfg: &Config) -> Result<()> {
    pavae::io::write_atomic(&out.join("config.cfg"), cfg.to_text().as_bytes())?;
    Ok(())
}

fn print_json<S: serde::Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn volume_list(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        numbered(path, ".pvae")
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

fn paired(a: &Path, b: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let (la, lb) = (volume_list(a)?, volume_list(b)?);
    if la.len() != lb.len() {
        bail!("{} holds {} volumes but {} holds {}", a.display(), la.len(), b.display(), lb.len());
    }
    Ok(la.into_iter().zip(lb).collect())
}

fn run(cmd: &Command, config_override: Option<Config>) -> Result<()> {
    let cfg_for = |path: &Option<PathBuf>| match config_override {
        Some(c) => Ok(c),
        None => load_config(path.as_deref()),
    };
    match cmd {
        Command::Phantoms { config, out } => {
            let cfg = cfg_for(config)?;
            prepare_out(out)?;
            let pairs = make_phantoms(&cfg.phantoms(), cfg.seed)?;
            for (i, p) in pairs.iter().enumerate() {
                write_volume(&phantom_file(out, i, "lesion"), &p.lesion)?;
                write_mask(&phantom_file(out, i, "mask"), &p.mask)?;
                write_volume(&phantom_file(out, i, "host"), &p.host)?;
            }
            let origins: Vec<Dims> = pairs.iter().map(|p: &SamplePair| p.origin).collect();
            write_json(&out.join("origins.json"), &origins)?;
            write_config(out, &cfg)?;
            finish(manifest_for(cmd, &cfg, &[], &[])?, out)?;
            eprintln!("wrote {} phantoms to {}", pairs.len(), out.display());
        }
        Command::TrainMask { config, data, out } => {
            let cfg = cfg_for(config)?;
            prepare_out(out)?;
            let (masks, _, inputs) = read_pairs(data, false)?;
            let mut net = MaskSynthNet::<f32>::new(&cfg.net(), &mut init_rng(cfg.seed))?;
            let refs: Vec<&MaskVolume> = masks.iter().collect();
            let log = train_mask_stage(&mut net, &refs, &cfg.train(), |s, r| {
                if s % 50 == 0 {
                    eprintln!("step {s}: l_rec {:.5} l_kl {:.4} l_d {:.4}", r.l_rec, r.l_kl, r.l_d);
                }
            })?;
            write_json(&out.join("checkpoint.json"), &Checkpoint::of_mask_net(&net))?;
            write_loss_log(&out.join("loss.csv"), &log)?;
            write_config(out, &cfg)?;
            finish(manifest_for(cmd, &cfg, &[("data", data.display().to_string())], &inputs)?, out)?;
        }
        Command::TrainLesion { config, data, out } => {
            let cfg = cfg_for(config)?;
            prepare_out(out)?;
            let (masks, lesions, inputs) = read_pairs(data, true)?;
            let mut net = LesionSynthNet::<f32>::new(&cfg.net(), &mut init_rng(cfg.seed))?;
            let pairs: Vec<SamplePair> = masks
                .into_iter()
                .zip(lesions)
                .map(|(mask, lesion)| SamplePair {
                    host: lesion.clone(),
                    mask,
                    lesion,
                    origin: [0; 3],
                })
                .collect();
            let refs: Vec<&SamplePair> = pairs.iter().collect();
            let log = train_lesion_stage(&mut net, &refs, &cfg.train(), |s, r| {
                if s % 50 == 0 {
                    eprintln!("step {s}: l_rec {:.5} l_kl {:.4} l_d {:.4}", r.l_rec, r.l_kl, r.l_d);
                }
            })?;
            write_json(&out.join("checkpoint.json"), &Checkpoint::of_lesion_net(&net))?;
            write_loss_log(&out.join("loss.csv"), &log)?;
            write_config(out, &cfg)?;
            finish(manifest_for(cmd, &cfg, &[("data", data.display().to_string())], &inputs)?, out)?;
        }
        Command::Sample {
            config,
            mask_model,
            lesion_model,
            count,
            out,
        } => {
            let cfg = cfg_for(config)?;
            prepare_out(out)?;
            let mask_ckpt = mask_model.join("checkpoint.json");
            let lesion_ckpt = lesion_model.join("checkpoint.json");
            let mask_net = read_json::<Checkpoint>(&mask_ckpt)?.into_mask_net()?;
            let lesion_net = read_json::<Checkpoint>(&lesion_ckpt)?.into_lesion_net()?;
            let n = count.unwrap_or(cfg.synth_count);
            let masks = pavae::sampling::sample_masks_thresholded(&mask_net, n, cfg.seed, cfg.threshold as f32)?;
            let lesions = sample_lesions(&lesion_net, &masks, cfg.seed.wrapping_add(1))?;
            for (i, (m, l)) in masks.iter().zip(&lesions).enumerate() {
                write_mask(&phantom_file(out, i, "mask"), m)?;
                write_volume(&phantom_file(out, i, "lesion"), l)?;
            }
            write_config(out, &cfg)?;
            let mut args = vec![
                ("mask_model", mask_model.display().to_string()),
                ("lesion_model", lesion_model.display().to_string()),
            ];
            if let Some(c) = count {
                args.push(("count", c.to_string()));
            }
            finish(manifest_for(cmd, &cfg, &args, &[mask_ckpt, lesion_ckpt])?, out)?;
            eprintln!("wrote {n} samples to {}", out.display());
        }
        Command::Composite {
            host,
            lesion,
            mask,
            origin,
            out,
        } => {
            prepare_out(out)?;
            let o = parse_origin(origin)?;
            let result = composite(&read_volume(host)?, &read_volume(lesion)?, &read_mask(mask)?, o)?;
            write_volume(&out.join("composite.pvae"), &result)?;
            let cfg = Config::default();
            let args = [
                ("host", host.display().to_string()),
                ("lesion", lesion.display().to_string()),
                ("mask", mask.display().to_string()),
                ("origin", origin.clone()),
            ];
            let mut m = manifest_for(cmd, &cfg, &args, &[host.clone(), lesion.clone(), mask.clone()])?;
            m.config.clear();
            finish(m, out)?;
        }
        Command::EvalSynth { reference, test } => {
            let reports = paired(reference, test)?
                .iter()
                .map(|(a, b)| Ok(MetricsReport::synthesis(&read_volume(a)?, &read_volume(b)?)?))
                .collect::<Result<Vec<_>>>()?;
            print_json(&MetricsReport::mean(&reports))?;
        }
        Command::EvalSeg { truth, pred } => {
            let reports = paired(truth, pred)?
                .iter()
                .map(|(a, b)| Ok(MetricsReport::segmentation(&read_mask(a)?, &read_mask(b)?)?))
                .collect::<Result<Vec<_>>>()?;
            print_json(&MetricsReport::mean(&reports))?;
        }
        Command::Downstream { config, out } => {
            let cfg = cfg_for(config)?;
            prepare_out(out)?;
            let dc = DownstreamConfig {
                net: cfg.net(),
                train: cfg.train(),
                raw_count: cfg.count,
                test_count: cfg.test_count,
                synth_count: cfg.synth_count,
                segmenter: SegmenterConfig {
                    channels: cfg.seg_channels,
                    epochs: cfg.seg_epochs,
                    lr: cfg.seg_lr,
                    ..SegmenterConfig::default()
                },
            };
            let report = run_downstream_experiment(&dc, cfg.seed, |s| eprintln!("{s}"))?;
            write_json(&out.join("report.json"), &report)?;
            write_config(out, &cfg)?;
            finish(manifest_for(cmd, &cfg, &[], &[])?, out)?;
            print_json(&report)?;
        }
        Command::Replay { run: dir, out } => replay(dir, out)?,
    }
    Ok(())
}

/// Rebuilds the command recorded in `dir`'s manifest, runs it into `out`
/// and compares every output hash.
fn replay(dir: &Path, out: &Path) -> Result<()> {
    let manifest = RunManifest::read(dir)?;
    for (path, hash) in &manifest.inputs {
        let now = pavae::io::hash_file(Path::new(path))?;
        if &now != hash {
            bail!("input {path} changed since the run (hash {now}, recorded {hash})");
        }
    }
    let arg = |k: &str| {
        manifest
            .args
            .get(k)
            .cloned()
            .ok_or_else(|| anyhow!("manifest lacks argument {k}"))
    };
    let out_buf = out.to_path_buf();
    let cmd = match manifest.command.as_str() {
        "phantoms" => Command::Phantoms { config: None, out: out_buf },
        "train-mask" => Command::TrainMask {
            config: None,
            data: arg("data")?.into(),
            out: out_buf,
        },
        "train-lesion" => Command::TrainLesion {
            config: None,
            data: arg("data")?.into(),
            out: out_buf,
        },
        "sample" => Command::Sample {
            config: None,
            mask_model: arg("mask_model")?.into(),
            lesion_model: arg("lesion_model")?.into(),
            count: manifest.args.get("count").map(|c| c.parse()).transpose()?,
            out: out_buf,
        },
        "composite" => Command::Composite {
            host: arg("host")?.into(),
            lesion: arg("lesion")?.into(),
            mask: arg("mask")?.into(),
            origin: arg("origin")?,
            out: out_buf,
        },
        "downstream" => Command::Downstream { config: None, out: out_buf },
        other => bail!("cannot replay command `{other}`"),
    };
    let cfg = if manifest.config.is_empty() {
        Config::default()
    } else {
        Config::parse_str(&manifest.config)?
    };
    run(&cmd, Some(cfg))?;
    let again = RunManifest::read(out)?;
    let mismatched: Vec<&String> = manifest
        .outputs
        .iter()
        .filter(|(k, v)| again.outputs.get(*k) != Some(*v))
        .map(|(k, _)| k)
        .chain(again.outputs.keys().filter(|k| !manifest.outputs.contains_key(*k)))
        .collect();
    let summary: BTreeMap<&str, serde_json::Value> = [
        ("identical", serde_json::Value::Bool(mismatched.is_empty())),
        ("outputs", serde_json::json!(manifest.outputs.len())),
        ("mismatched", serde_json::json!(mismatched)),
    ]
    .into_iter()
    .collect();
    print_json(&summary)?;
    if !mismatched.is_empty() {
        bail!("replay differs in {} outputs", mismatched.len());
    }
    Ok(())
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ").replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match run(&cli.command, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", cli.command.name(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}
