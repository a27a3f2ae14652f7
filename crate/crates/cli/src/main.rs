//! `shresnet` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use shresnet_core::dwi::normalize_b0;
use shresnet_core::error::ErrorClass;
use shresnet_core::evaluation::{cross_validate, resblock_sweep, CvConfig, SWEEP_PRESET};
use shresnet_core::harmonize::{harmonize_volume, HarmonizeOptions};
use shresnet_core::io::{self, Manifest};
use shresnet_core::model::{ModelKind, NetworkParams, NetworkSpec};
use shresnet_core::phantom::{write_phantom, PhantomConfig};
use shresnet_core::sh::{ShBasisSpec, ShVolume};
use shresnet_core::training::{train, ShPair, TrainConfig};
use shresnet_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "shresnet", version, about = "Spherical-harmonic residual network for diffusion MRI harmonization")]
struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate paired two-scanner phantom subjects and a manifest.
    Phantom(PhantomArgs),
    /// Fit SH coefficients to a diffusion volume.
    FitSh(FitShArgs),
    /// Train a model on manifest subjects.
    Train(TrainArgs),
    /// Apply a trained checkpoint to a source-scanner volume.
    Harmonize(HarmonizeArgs),
    /// Cross-validate SHResNet and the baseline against the unharmonized data.
    Evaluate(EvaluateArgs),
    /// Cross-validated loss for a range of ResBlock counts.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// JSON phantom configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured subject count.
    #[arg(long)]
    n_subjects: Option<usize>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn even_order(s: &str) -> std::result::Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v % 2 != 0 {
        return Err(format!("SH order must be even, got {v}"));
    }
    Ok(v)
}

#[derive(Args, Debug, Clone)]
struct ShArgs {
    /// Maximum (even) SH order.
    #[arg(long, default_value_t = 4, value_parser = even_order)]
    order: usize,
    /// Laplace–Beltrami regularization weight.
    #[arg(long, default_value_t = 0.006)]
    lambda: f64,
}

impl ShArgs {
    fn spec(&self) -> Result<ShBasisSpec> {
        ShBasisSpec::new(self.order, self.lambda)
    }
}

#[derive(Args, Debug)]
struct FitShArgs {
    #[arg(long)]
    dwi: PathBuf,
    /// Defaults to the `.bval` next to the volume.
    #[arg(long)]
    bval: Option<PathBuf>,
    /// Defaults to the `.bvec` next to the volume.
    #[arg(long)]
    bvec: Option<PathBuf>,
    #[arg(long)]
    mask: PathBuf,
    #[command(flatten)]
    sh: ShArgs,
    /// Coefficient payload; mean b0 and mask are written as siblings.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ScheduleArgs {
    /// Epochs of the first (Adam) stage.
    #[arg(long, default_value_t = 5)]
    stage1_epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 0.001)]
    stage1_lr: f64,
    #[arg(long, default_value_t = 256)]
    stage1_batch: usize,
    /// Starting SGD learning rate.
    #[arg(long, default_value_t = 0.001)]
    stage2_lr: f64,
    #[arg(long, default_value_t = 128)]
    stage2_batch: usize,
    /// Learning-rate multiplier applied on a plateau.
    #[arg(long, default_value_t = 0.9)]
    lr_decay_factor: f64,
    /// Non-improving epochs before the learning rate decays.
    #[arg(long, default_value_t = 5)]
    decay_patience: usize,
    /// Non-improving epochs before training stops.
    #[arg(long, default_value_t = 10)]
    stop_patience: usize,
    /// Hard cap on the number of epochs.
    #[arg(long, default_value_t = 200)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScheduleArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            stage1_epochs: self.stage1_epochs,
            stage1_lr: self.stage1_lr,
            stage1_batch: self.stage1_batch,
            stage2_lr: self.stage2_lr,
            stage2_batch: self.stage2_batch,
            lr_decay_factor: self.lr_decay_factor,
            decay_patience_epochs: self.decay_patience,
            stop_patience_epochs: self.stop_patience,
            max_epochs: self.max_epochs,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ArchArgs {
    /// Number of ResBlocks.
    #[arg(long, default_value_t = 2)]
    resblocks: usize,
    /// Hidden channels of each functional unit.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Hidden width of the baseline MLP.
    #[arg(long, default_value_t = 150)]
    golkov_hidden: usize,
}

impl ArchArgs {
    fn spec(&self, kind: ModelKind, order: usize) -> NetworkSpec {
        let mut s = match kind {
            ModelKind::Shresnet => NetworkSpec::shresnet(self.resblocks, self.hidden),
            ModelKind::Golkov => NetworkSpec::golkov(self.golkov_hidden),
        };
        s.sh_order = order;
        s
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Subject manifest (JSON).
    #[arg(long)]
    pairs: PathBuf,
    /// Validation subject id.
    #[arg(long)]
    val: String,
    /// Subject ids to leave out of training entirely.
    #[arg(long, value_delimiter = ',')]
    exclude: Vec<String>,
    #[arg(long, default_value = "shresnet")]
    model: ModelKind,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    sh: ShArgs,
    /// Checkpoint path; the architecture descriptor and epoch log are written
    /// next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct HarmonizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dwi: PathBuf,
    #[arg(long)]
    bval: Option<PathBuf>,
    #[arg(long)]
    bvec: Option<PathBuf>,
    #[arg(long)]
    mask: PathBuf,
    /// Output b-values; defaults to the source table.
    #[arg(long, requires = "target_bvec")]
    target_bval: Option<PathBuf>,
    #[arg(long, requires = "target_bval")]
    target_bvec: Option<PathBuf>,
    #[command(flatten)]
    sh: ShArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    #[arg(long, value_delimiter = ',', default_value = "shresnet,golkov")]
    models: Vec<ModelKind>,
    #[command(flatten)]
    arch: ArchArgs,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    sh: ShArgs,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional flat CSV of every NMSE value.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// ResBlock counts to compare.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_PRESET)]
    resblocks: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    sh: ShArgs,
    /// Table JSON.
    #[arg(long)]
    out: PathBuf,
}

fn table_for(dwi: &Path, bval: &Option<PathBuf>, bvec: &Option<PathBuf>) -> Result<shresnet_core::dwi::GradientTable> {
    let bval = bval.clone().unwrap_or_else(|| io::bval_path(dwi));
    let bvec = bvec.clone().unwrap_or_else(|| io::bvec_path(dwi));
    io::read_fsl_table(&bval, &bvec)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn sibling_file(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_phantom(a: &PhantomArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str::<PhantomConfig>(&text)
                .map_err(|e| Error::Load {
                    path: p.clone(),
                    reason: e.to_string(),
                })?
        }
        None => PhantomConfig::default(),
    };
    if let Some(n) = a.n_subjects {
        cfg.n_subjects = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let m = write_phantom(&cfg, &a.out)?;
    println!("wrote {} subjects to {}", m.subjects.len(), a.out.display());
    Ok(())
}

fn run_fit_sh(a: &FitShArgs) -> Result<()> {
    let table = table_for(&a.dwi, &a.bval, &a.bvec)?;
    let vol = io::load_volume_with_table(&a.dwi, table)?;
    let mask = io::load_mask(&a.mask)?;
    let norm = normalize_b0(&vol, &mask)?;
    let sh = ShVolume::fit(&norm, &mask, a.sh.spec()?)?;
    sh.save(&a.out, vol.voxel_size)?;
    println!("wrote {} coefficients per voxel to {}", sh.spec.n_coef(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let spec = a.sh.spec()?;
    let (manifest, base) = Manifest::load(&a.pairs)?;
    let val_entry = manifest
        .find(&a.val)
        .ok_or_else(|| Error::Invalid(format!("validation subject {} not in manifest", a.val)))?;
    let val = ShPair::from_subject(&val_entry.load(&base)?, spec)?;
    let mut train_pairs = Vec::new();
    for e in &manifest.subjects {
        if e.id == a.val || a.exclude.contains(&e.id) {
            continue;
        }
        train_pairs.push(ShPair::from_subject(&e.load(&base)?, spec)?);
    }
    let cfg = a.schedule.config();
    let init = NetworkParams::build(a.arch.spec(a.model, spec.order), cfg.seed)?;
    let refs: Vec<&ShPair> = train_pairs.iter().collect();
    let log_path = sibling_file(&a.out, ".log.jsonl");
    let out = match train(init, &refs, &val, &cfg) {
        Ok(o) => o,
        Err(Error::Diverged { epoch, log }) => {
            write_text(&log_path, &log.to_jsonl())?;
            return Err(Error::Diverged { epoch, log });
        }
        Err(e) => return Err(e),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    out.params.save(&a.out)?;
    write_text(&log_path, &out.log.to_jsonl())?;
    println!(
        "best validation loss {:.6e} at epoch {} of {}",
        out.log.best_val_loss,
        out.log.best_epoch,
        out.log.records.len()
    );
    Ok(())
}

fn run_harmonize(a: &HarmonizeArgs) -> Result<()> {
    let model = NetworkParams::load(&a.checkpoint)?;
    let table = table_for(&a.dwi, &a.bval, &a.bvec)?;
    let vol = io::load_volume_with_table(&a.dwi, table)?;
    let mask = io::load_mask(&a.mask)?;
    let out_table = match (&a.target_bval, &a.target_bvec) {
        (Some(bval), Some(bvec)) => io::read_fsl_table(bval, bvec)?,
        _ => vol.table.clone(),
    };
    let opts = HarmonizeOptions {
        sh: a.sh.spec()?,
        skip_projection: false,
    };
    let h = harmonize_volume(&model, &vol, &mask, &out_table, &opts)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    io::save_volume(&a.out, &h.volume)?;
    if h.degenerate_orders > 0 {
        eprintln!(
            "{}",
            json!({"warning": "degenerate_orders", "count": h.degenerate_orders})
        );
    }
    println!("wrote {} volumes to {}", out_table.len(), a.out.display());
    Ok(())
}

fn cv_config(folds: usize, models: Vec<ModelKind>, arch: &ArchArgs, schedule: &ScheduleArgs, sh: &ShArgs) -> Result<CvConfig> {
    let spec = sh.spec()?;
    Ok(CvConfig {
        folds,
        sh: spec,
        models,
        shresnet: arch.spec(ModelKind::Shresnet, spec.order),
        golkov: arch.spec(ModelKind::Golkov, spec.order),
        train: schedule.config(),
    })
}

fn run_evaluate(a: &EvaluateArgs) -> Result<()> {
    let subjects = io::load_subjects(&a.pairs)?;
    let cfg = cv_config(a.folds, a.models.clone(), &a.arch, &a.schedule, &a.sh)?;
    let report = cross_validate(&subjects, &cfg)?;
    write_text(&a.out, &report.to_json())?;
    if let Some(csv) = &a.csv {
        write_text(csv, &report.to_csv())?;
    }
    for c in &report.comparisons {
        println!(
            "{:?} {:<6} {:>12} vs {:<12} NMSE {:.4e} vs {:.4e} ({:+.1}%) p={:.4} {}",
            c.tissue,
            c.quantity.name(),
            c.method.name(),
            c.reference.name(),
            c.mean_nmse,
            c.reference_mean_nmse,
            c.reduction_percent,
            c.wilcoxon.p_value,
            c.stars
        );
    }
    Ok(())
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let subjects = io::load_subjects(&a.pairs)?;
    let arch = ArchArgs {
        resblocks: 1,
        hidden: a.hidden,
        golkov_hidden: 150,
    };
    let cfg = cv_config(a.folds, vec![ModelKind::Shresnet], &arch, &a.schedule, &a.sh)?;
    let table = resblock_sweep(&a.resblocks, &subjects, &cfg)?;
    let mut text = serde_json::to_string_pretty(&table).expect("table serializes");
    text.push('\n');
    write_text(&a.out, &text)?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Phantom(a) => run_phantom(a),
        Command::FitSh(a) => run_fit_sh(a),
        Command::Train(a) => run_train(a),
        Command::Harmonize(a) => run_harmonize(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Sweep(a) => run_sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", json!({"error": "usage", "message": "--threads must be at least 1"}));
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string()}));
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!(
                "{}",
                json!({
                    "error": e.kind(),
                    "class": match class { ErrorClass::Data => "data", ErrorClass::Numerical => "numerical" },
                    "message": e.to_string(),
                })
            );
            ExitCode::from(match class {
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn defaults_match_library() {
        let cli = Cli::try_parse_from(["shresnet", "train", "--pairs", "m.json", "--val", "s", "--out", "c"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.schedule.config(), TrainConfig::default());
        assert_eq!(a.sh.spec().unwrap(), ShBasisSpec::default());
        assert_eq!(a.arch.spec(ModelKind::Shresnet, 4), NetworkSpec::default());
        assert_eq!(a.arch.spec(ModelKind::Golkov, 4), NetworkSpec::golkov(150));
        assert_eq!(a.model, ModelKind::Shresnet);
    }

    #[test]
    fn usage_errors() {
        assert!(Cli::try_parse_from(["shresnet", "train", "--pairs", "m.json", "--out", "c"]).is_err());
        let odd = Cli::try_parse_from([
            "shresnet", "fit-sh", "--dwi", "d", "--mask", "m", "--out", "o", "--order", "3",
        ]);
        assert!(odd.is_err());
    }

    #[test]
    fn sweep_preset_default() {
        let cli = Cli::try_parse_from(["shresnet", "sweep", "--pairs", "m", "--out", "o"]).unwrap();
        let Command::Sweep(a) = cli.command else { panic!() };
        assert_eq!(a.resblocks, vec![1, 2, 3, 6, 7, 9, 11]);
    }
}
