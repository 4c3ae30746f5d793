//! Command-line surface: reproducible experiment commands over the library.
//!
//! Every subcommand reads a flat key-value config (`--config`), applies
//! `--set key=value` overrides and `--seed`, writes its outputs under `--out`
//! (or a timestamped run directory), and is deterministic given the resolved
//! configuration.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;
use stconv::actions::{
    load_dataset, load_idx, make_smooth_tau, save_dataset, synth_glyph_dataset, synth_scaled_dataset,
    GroupElement,
};
use stconv::basis::{make_spatial_basis, SamplingRule, ScaleGrid};
use stconv::harness::{
    depth_sweep, emit_csv, equivariance_error, equivariance_error_cnn, format_float, make_blob_image,
    stability_check, truncation_slope, truncation_sweep, ExperimentRecord, SweepTemplate,
};
use stconv::model::{CnnModel, ScdcfModel};
use stconv::network::{Activation, CnnStack, ConvLayerSpec, NetworkSpec, PadMode, ScdcfStack};
use stconv::trainer::{evaluate, load_checkpoint, train, OptKind, TrainConfig};
use stconv::{Error, Result};

#[derive(Parser)]
#[command(name = "stconv", version, about = "Scale-equivariant convolution experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the rng seed (config key `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<command>-<timestamp>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Dump the sampled spatial basis as CSV.
    #[command(after_help = keys::BASIS)]
    Basis(CommonArgs),
    /// Equivariance verification: scale-equivariant stack vs plain CNN.
    #[command(after_help = keys::VERIFY)]
    Verify(CommonArgs),
    /// Equivariance error vs network depth for both scale paddings.
    #[command(name = "sweep-depth", after_help = keys::SWEEP_DEPTH)]
    SweepDepth(CommonArgs),
    /// Truncation error decay as the scale interval grows.
    #[command(name = "sweep-truncation", after_help = keys::SWEEP_TRUNCATION)]
    SweepTruncation(CommonArgs),
    /// Deformation-stability bound checks.
    #[command(after_help = keys::STABILITY)]
    Stability(CommonArgs),
    /// Synthesize a rescaled labeled dataset file.
    #[command(name = "synth-data", after_help = keys::SYNTH_DATA)]
    SynthData(CommonArgs),
    /// Train a classifier and write the log and checkpoint.
    #[command(after_help = keys::TRAIN)]
    Train(CommonArgs),
    /// Evaluate a checkpoint on a dataset.
    #[command(after_help = keys::EVAL)]
    Eval(CommonArgs),
}

mod keys {
    pub const BASIS: &str = "Config keys: seed, basis.k, basis.l, basis.j, basis.rule (center|average), grid.t, grid.ns";
    pub const VERIFY: &str = "Config keys: seed, net.m, net.k, net.k_alpha, net.l, net.l_alpha, net.depth, net.j0, net.padding, net.target_a, grid.t, grid.ns, input.hw, input.blobs, verify.beta_steps, verify.net_seeds, verify.image_seeds, verify.cnn_l";
    pub const SWEEP_DEPTH: &str = "Config keys: seed, net.m, net.k, net.k_alpha, net.l, net.l_alpha, net.j0, net.target_a, grid.t, grid.ns, input.hw, input.blobs, sweep.depths, sweep.seeds";
    pub const SWEEP_TRUNCATION: &str = "Config keys: seed, net.m, net.k, net.k_alpha, net.l, net.l_alpha, net.j0, net.target_a, grid.t, grid.ns, input.hw, input.blobs, sweep.t_values, sweep.depth, sweep.seeds, sweep.beta_steps";
    pub const STABILITY: &str = "Config keys: seed, net.m, net.k, net.k_alpha, net.l, net.l_alpha, net.depth, net.j0, net.target_a, grid.t, grid.ns, input.hw, input.blobs, stab.grad_infs, stab.count, stab.tau_modes";
    pub const SYNTH_DATA: &str = "Config keys: seed, data.source (glyphs|idx|file), data.count, data.size, data.rescale, data.images, data.labels, data.path, data.out";
    pub const TRAIN: &str = "Config keys: seed, train.model (scdcf|cnn), train.epochs, train.batch, train.lr, train.decay_epochs, train.decay_factor, train.optimizer (adam|sgd), net.widths, net.k, net.k_alpha, net.l, net.l_alpha, net.j0, net.padding, grid.t, grid.ns, head.hidden, data.path, data.train_count, data.eval_count";
    pub const EVAL: &str = "Config keys: seed, eval.model (scdcf|cnn), eval.checkpoint, net.widths, net.k, net.k_alpha, net.l, net.l_alpha, net.j0, net.padding, grid.t, grid.ns, head.hidden, data.path";
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Basis(a) => run("basis", a, cmd_basis),
        Command::Verify(a) => run("verify", a, cmd_verify),
        Command::SweepDepth(a) => run("sweep-depth", a, cmd_sweep_depth),
        Command::SweepTruncation(a) => run("sweep-truncation", a, cmd_sweep_truncation),
        Command::Stability(a) => run("stability", a, cmd_stability),
        Command::SynthData(a) => run("synth-data", a, cmd_synth_data),
        Command::Train(a) => run("train", a, cmd_train),
        Command::Eval(a) => run("eval", a, cmd_eval),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(name: &str, args: &CommonArgs, f: fn(&Config, &Path) -> Result<()>) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => Config::from_file(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&args.sets)?;
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string());
    }
    let out = match &args.out {
        Some(p) => p.clone(),
        None => {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            PathBuf::from(format!("runs/{}-{}", name, ts))
        }
    };
    std::fs::create_dir_all(&out)?;
    f(&cfg, &out)
}

fn parse_rule(s: &str) -> Result<SamplingRule> {
    match s {
        "center" => Ok(SamplingRule::CellCenter),
        "average" => Ok(SamplingRule::CellAverage),
        other => Err(Error::Config(format!("unknown sampling rule '{}'", other))),
    }
}

fn template_from(cfg: &Config) -> Result<SweepTemplate> {
    Ok(SweepTemplate {
        m: cfg.get_parse("net.m", 4usize)?,
        k: cfg.get_parse("net.k", 8usize)?,
        k_alpha: cfg.get_parse("net.k_alpha", 3usize)?,
        l: cfg.get_parse("net.l", 9usize)?,
        l_alpha: cfg.get_parse("net.l_alpha", 3usize)?,
        t: cfg.get_parse("grid.t", 1.0f64)?,
        n_s: cfg.get_parse("grid.ns", 5usize)?,
        j0: cfg.get_parse("net.j0", 1.0f64)?,
        input_hw: cfg.get_parse("input.hw", 56usize)?,
        target_a: cfg.get_parse("net.target_a", 1.0f64)?,
        blobs: cfg.get_parse("input.blobs", 3usize)?,
    })
}

fn cmd_basis(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(&["seed", "basis.k", "basis.l", "basis.j", "basis.rule", "grid.t", "grid.ns"])?;
    let k = cfg.get_parse("basis.k", 8usize)?;
    let l = cfg.get_parse("basis.l", 9usize)?;
    let j = cfg.get_parse("basis.j", 1.0f64)?;
    let rule = parse_rule(&cfg.get_str("basis.rule", "average"))?;
    let grid = ScaleGrid::new(cfg.get_parse("grid.t", 1.0f64)?, cfg.get_parse("grid.ns", 5usize)?)?;
    let basis = make_spatial_basis(k, l, &grid, j, rule)?;
    let mut csv = String::from("k,alpha_index,row,col,value\n");
    for ki in 0..k {
        for a in 0..grid.n_s() {
            for r in 0..l {
                for c in 0..l {
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        ki + 1,
                        a,
                        r,
                        c,
                        format_float(basis.samples.at4(ki, a, r, c))
                    ));
                }
            }
        }
    }
    let path = out.join("bases.csv");
    std::fs::write(&path, csv)?;
    println!("basis: {} modes x {} scales x {}x{} taps -> {}", k, grid.n_s(), l, l, path.display());
    Ok(())
}

fn cmd_verify(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(&[
        "seed", "net.m", "net.k", "net.k_alpha", "net.l", "net.l_alpha", "net.depth", "net.j0",
        "net.padding", "net.target_a", "grid.t", "grid.ns", "input.hw", "input.blobs",
        "verify.beta_steps", "verify.net_seeds", "verify.image_seeds", "verify.cnn_l",
    ])?;
    let seed = cfg.get_parse("seed", 42u64)?;
    let template = template_from(cfg)?;
    let depth = cfg.get_parse("net.depth", 2usize)?;
    let padding = PadMode::parse(&cfg.get_str("net.padding", "replicate"))?;
    let beta_steps: Vec<i64> = cfg.get_list("verify.beta_steps", &[-1i64, 1])?;
    let net_seeds: Vec<u64> = cfg.get_list("verify.net_seeds", &[seed, seed + 1, seed + 2])?;
    let image_seeds: Vec<u64> = cfg.get_list("verify.image_seeds", &[7u64, 8, 9])?;
    let cnn_l = cfg.get_parse("verify.cnn_l", template.l)?;
    let spec = template.spec(depth, padding)?;
    let delta = spec.grid.delta();

    let mut records = Vec::new();
    let mut summary: Vec<(usize, f64, f64, f64)> = Vec::new(); // layer, beta, scdcf mean, cnn mean
    for &step in &beta_steps {
        let beta = step as f64 * delta;
        let g = GroupElement::scaling(beta);
        for layer in 1..=depth {
            let mut sc_sum = 0.0;
            let mut cnn_sum = 0.0;
            let mut count = 0.0;
            for &ns in &net_seeds {
                let stack = ScdcfStack::random(spec.clone(), ns, template.target_a)?;
                let cnn_layers: Vec<(usize, usize, bool)> =
                    (0..depth).map(|_| (template.m, cnn_l, false)).collect();
                let cnn = CnnStack::random(1, &cnn_layers, Activation::Relu, ns)?;
                for &is in &image_seeds {
                    let x0 = make_blob_image(is, template.input_hw, template.blobs);
                    let sc = equivariance_error(&stack, &x0, g, layer)?.aggregate;
                    let cn = equivariance_error_cnn(&cnn, &x0, g, layer)?;
                    sc_sum += sc;
                    cnn_sum += cn;
                    count += 1.0;
                    for (model, err, kk, ka) in [
                        ("scdcf", sc, template.k, template.k_alpha),
                        ("cnn", cn, 0, 0),
                    ] {
                        records.push(ExperimentRecord {
                            experiment: "verify".into(),
                            id: format!("{}_L{}_b{}_n{}_i{}", model, layer, step, ns, is),
                            seed: ns,
                            depth: layer,
                            l_alpha: template.l_alpha,
                            n_s: template.n_s,
                            t: template.t,
                            padding: padding.name().into(),
                            k: kk,
                            k_alpha: ka,
                            beta,
                            v: [0.0, 0.0],
                            grad_inf: 0.0,
                            tau_inf: 0.0,
                            measured_error: err,
                            theoretical_bound: None,
                        });
                    }
                }
            }
            summary.push((layer, beta, sc_sum / count, cnn_sum / count));
        }
    }
    let path = out.join("verify.csv");
    emit_csv(&records, &path)?;
    println!("verify: wrote {} rows to {}", records.len(), path.display());
    for (layer, beta, sc, cnn) in summary {
        let ratio = if sc > 0.0 { cnn / sc } else { f64::INFINITY };
        println!(
            "  layer {} beta {:+.3}: equivariance error {} (plain CNN {}, ratio {:.1})",
            layer,
            beta,
            format_float(sc),
            format_float(cnn),
            ratio
        );
    }
    Ok(())
}

fn cmd_sweep_depth(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(&[
        "seed", "net.m", "net.k", "net.k_alpha", "net.l", "net.l_alpha", "net.j0", "net.target_a",
        "grid.t", "grid.ns", "input.hw", "input.blobs", "sweep.depths", "sweep.seeds",
    ])?;
    let seed = cfg.get_parse("seed", 1u64)?;
    let mut template = template_from(cfg)?;
    // Depth-sweep defaults differ from the verification template.
    template.t = cfg.get_parse("grid.t", 1.5f64)?;
    template.n_s = cfg.get_parse("grid.ns", 7usize)?;
    template.j0 = cfg.get_parse("net.j0", 0.5f64)?;
    template.input_hw = cfg.get_parse("input.hw", 32usize)?;
    let depths: Vec<usize> = cfg.get_list("sweep.depths", &[1usize, 2, 3, 4, 5, 6])?;
    let n_seeds = cfg.get_parse("sweep.seeds", 5usize)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| seed + i).collect();
    let records = depth_sweep(&template, &depths, &[PadMode::Zero, PadMode::Replicate], &seeds)?;
    let path = out.join("depth.csv");
    emit_csv(&records, &path)?;
    println!("sweep-depth: wrote {} rows to {}", records.len(), path.display());
    for mode in [PadMode::Zero, PadMode::Replicate] {
        let mut line = format!("  {:9}:", mode.name());
        for &d in &depths {
            let es: Vec<f64> = records
                .iter()
                .filter(|r| r.depth == d && r.padding == mode.name())
                .map(|r| r.measured_error)
                .collect();
            line.push_str(&format!(" {:.4}", es.iter().sum::<f64>() / es.len() as f64));
        }
        println!("{}", line);
    }
    Ok(())
}

fn cmd_sweep_truncation(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(&[
        "seed", "net.m", "net.k", "net.k_alpha", "net.l", "net.l_alpha", "net.j0", "net.target_a",
        "grid.t", "grid.ns", "input.hw", "input.blobs", "sweep.t_values", "sweep.depth", "sweep.seeds",
        "sweep.beta_steps",
    ])?;
    let seed = cfg.get_parse("seed", 1u64)?;
    let mut template = template_from(cfg)?;
    template.l = cfg.get_parse("net.l", 7usize)?;
    template.input_hw = cfg.get_parse("input.hw", 28usize)?;
    let t_values: Vec<f64> = cfg.get_list("sweep.t_values", &[0.5, 1.0, 1.5, 2.0])?;
    let depth = cfg.get_parse("sweep.depth", 3usize)?;
    let n_seeds = cfg.get_parse("sweep.seeds", 3usize)?;
    let beta_steps = cfg.get_parse("sweep.beta_steps", 1i64)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| seed + i).collect();
    let delta = 2.0 * template.t / (template.n_s - 1) as f64;
    let records = truncation_sweep(
        &template,
        &t_values,
        depth,
        &[PadMode::Zero, PadMode::Replicate],
        &seeds,
        beta_steps as f64 * delta,
    )?;
    let path = out.join("truncation.csv");
    emit_csv(&records, &path)?;
    println!("sweep-truncation: wrote {} rows to {}", records.len(), path.display());
    for mode in [PadMode::Zero, PadMode::Replicate] {
        println!("  {:9}: log2(error)/T slope {:.3}", mode.name(), truncation_slope(&records, mode));
    }
    Ok(())
}

fn cmd_stability(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(&[
        "seed", "net.m", "net.k", "net.k_alpha", "net.l", "net.l_alpha", "net.depth", "net.j0",
        "net.target_a", "grid.t", "grid.ns", "input.hw", "input.blobs", "stab.grad_infs", "stab.count",
        "stab.tau_modes",
    ])?;
    let seed = cfg.get_parse("seed", 1u64)?;
    let template = template_from(cfg)?;
    let depth = cfg.get_parse("net.depth", 2usize)?;
    let grad_infs: Vec<f64> = cfg.get_list("stab.grad_infs", &[0.02, 0.1])?;
    let count = cfg.get_parse("stab.count", 10usize)?;
    let tau_modes = cfg.get_parse("stab.tau_modes", 2usize)?;
    let spec = template.spec(depth, PadMode::Replicate)?;
    let delta = spec.grid.delta();
    let mut records = Vec::new();
    for &grad in &grad_infs {
        for i in 0..count as u64 {
            let s = seed + i;
            let stack = ScdcfStack::random(spec.clone(), 1000 + s, template.target_a)?;
            let x0 = make_blob_image(2000 + s, template.input_hw, template.blobs);
            let field = make_smooth_tau(3000 + s, grad, tau_modes, template.input_hw, template.input_hw)?;
            let g = GroupElement::scaling(if i % 2 == 0 { delta } else { -delta });
            records.push(stability_check(&stack, &x0, g, &field, s)?);
        }
    }
    let path = out.join("stability.csv");
    emit_csv(&records, &path)?;
    println!("stability: wrote {} rows to {}", records.len(), path.display());
    for &grad in &grad_infs {
        let rs: Vec<&ExperimentRecord> = records.iter().filter(|r| r.grad_inf == grad).collect();
        let mean_meas = rs.iter().map(|r| r.measured_error).sum::<f64>() / rs.len() as f64;
        let worst = rs
            .iter()
            .map(|r| r.measured_error / r.theoretical_bound.unwrap())
            .fold(0.0_f64, f64::max);
        println!(
            "  grad_inf {}: mean measured {} worst measured/bound {:.4}",
            grad,
            format_float(mean_meas),
            worst
        );
    }
    Ok(())
}

fn cmd_synth_data(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(&[
        "seed", "data.source", "data.count", "data.size", "data.rescale", "data.images", "data.labels",
        "data.path", "data.out",
    ])?;
    let seed = cfg.get_parse("seed", 1u64)?;
    let count = cfg.get_parse("data.count", 1000usize)?;
    let size = cfg.get_parse("data.size", 28usize)?;
    let rescale = cfg.get_parse("data.rescale", true)?;
    let source_kind = cfg.get_str("data.source", "glyphs");
    let source = match source_kind.as_str() {
        "glyphs" => synth_glyph_dataset(count, seed, size)?,
        "idx" => {
            let images = PathBuf::from(cfg.require("data.images")?);
            let labels = PathBuf::from(cfg.require("data.labels")?);
            let mut ds = load_idx(&images, &labels)?;
            if ds.len() > count {
                ds = ds.subset(0..count);
            }
            ds
        }
        "file" => {
            let path = PathBuf::from(cfg.require("data.path")?);
            load_dataset(&path)?
        }
        other => return Err(Error::Config(format!("unknown data source '{}'", other))),
    };
    let dataset = if rescale {
        synth_scaled_dataset(&source, seed.wrapping_add(1), size)?
    } else {
        source
    };
    let path = match cfg.get_str("data.out", "").as_str() {
        "" => out.join("dataset.ds"),
        p => PathBuf::from(p),
    };
    save_dataset(&dataset, &path)?;
    println!(
        "synth-data: {} images of {}x{} ({}) -> {}",
        dataset.len(),
        dataset.height(),
        dataset.width(),
        dataset.source,
        path.display()
    );
    Ok(())
}

fn build_scdcf(cfg: &Config, input_hw: usize, seed: u64) -> Result<ScdcfModel> {
    let widths: Vec<usize> = cfg.get_list("net.widths", &[6usize, 8])?;
    let k = cfg.get_parse("net.k", 15usize)?;
    let k_alpha = cfg.get_parse("net.k_alpha", 3usize)?;
    let l = cfg.get_parse("net.l", 7usize)?;
    let l_alpha = cfg.get_parse("net.l_alpha", 3usize)?;
    let j0 = cfg.get_parse("net.j0", 1.5f64)?;
    let padding = PadMode::parse(&cfg.get_str("net.padding", "replicate"))?;
    let grid = ScaleGrid::new(cfg.get_parse("grid.t", 1.0f64)?, cfg.get_parse("grid.ns", 5usize)?)?;
    let hidden = cfg.get_parse("head.hidden", 48usize)?;
    let layers = widths
        .iter()
        .map(|&m_out| ConvLayerSpec {
            m_out,
            l,
            l_alpha,
            avg_pool: true,
            batchnorm: true,
        })
        .collect();
    let spec = NetworkSpec {
        m_in: 1,
        grid,
        k,
        k_alpha,
        j0,
        padding,
        activation: Activation::Relu,
        rule: SamplingRule::CellAverage,
        layers,
    };
    ScdcfModel::new(spec, input_hw, hidden, 10, seed)
}

fn build_cnn(cfg: &Config, input_hw: usize, seed: u64) -> Result<CnnModel> {
    let widths: Vec<usize> = cfg.get_list("net.widths", &[5usize, 8])?;
    let l = cfg.get_parse("net.l", 7usize)?;
    let hidden = cfg.get_parse("head.hidden", 48usize)?;
    let layers: Vec<(usize, usize, bool, bool)> = widths.iter().map(|&m| (m, l, true, true)).collect();
    CnnModel::new(1, input_hw, &layers, hidden, 10, seed)
}

const TRAIN_KEYS: &[&str] = &[
    "seed", "train.model", "train.epochs", "train.batch", "train.lr", "train.decay_epochs",
    "train.decay_factor", "train.optimizer", "net.widths", "net.k", "net.k_alpha", "net.l",
    "net.l_alpha", "net.j0", "net.padding", "grid.t", "grid.ns", "head.hidden", "data.path",
    "data.train_count", "data.eval_count",
];

fn cmd_train(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(TRAIN_KEYS)?;
    let seed = cfg.get_parse("seed", 1u64)?;
    let data_path = PathBuf::from(cfg.require("data.path")?);
    let data = load_dataset(&data_path)?;
    let train_count = cfg.get_parse("data.train_count", data.len().saturating_sub(data.len() / 5))?;
    let eval_count = cfg.get_parse("data.eval_count", data.len() - train_count.min(data.len()))?;
    if train_count + eval_count > data.len() {
        return Err(Error::Config(format!(
            "train_count + eval_count = {} exceeds dataset size {}",
            train_count + eval_count,
            data.len()
        )));
    }
    let train_set = data.subset(0..train_count);
    let eval_set = data.subset(train_count..train_count + eval_count);
    let config = TrainConfig {
        epochs: cfg.get_parse("train.epochs", 15usize)?,
        batch_size: cfg.get_parse("train.batch", 64usize)?,
        optimizer: OptKind::parse(&cfg.get_str("train.optimizer", "adam"))?,
        lr: cfg.get_parse("train.lr", 0.01f64)?,
        decay_epochs: cfg.get_list("train.decay_epochs", &[5usize, 10])?,
        decay_factor: cfg.get_parse("train.decay_factor", 0.1f64)?,
        seed,
        checkpoint_path: Some(out.join("model.ckpt")),
    };
    let model_kind = cfg.get_str("train.model", "scdcf");
    let log = match model_kind.as_str() {
        "scdcf" => {
            let mut model = build_scdcf(cfg, data.height(), seed)?;
            train(&mut model, &train_set, &eval_set, &config)?
        }
        "cnn" => {
            let mut model = build_cnn(cfg, data.height(), seed)?;
            train(&mut model, &train_set, &eval_set, &config)?
        }
        other => return Err(Error::Config(format!("unknown model kind '{}'", other))),
    };
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, log.to_csv())?;
    let last = log.records.last().unwrap();
    println!(
        "train: {} on {} images for {} epochs -> eval accuracy {:.4} ({} and {})",
        model_kind,
        train_set.len(),
        config.epochs,
        last.eval_accuracy,
        log_path.display(),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn cmd_eval(cfg: &Config, out: &Path) -> Result<()> {
    cfg.check_keys(&[
        "seed", "eval.model", "eval.checkpoint", "net.widths", "net.k", "net.k_alpha", "net.l",
        "net.l_alpha", "net.j0", "net.padding", "grid.t", "grid.ns", "head.hidden", "data.path",
    ])?;
    let seed = cfg.get_parse("seed", 1u64)?;
    let ckpt = PathBuf::from(cfg.require("eval.checkpoint")?);
    let data_path = PathBuf::from(cfg.require("data.path")?);
    let data = load_dataset(&data_path)?;
    let config = TrainConfig::desk_default(seed);
    let model_kind = cfg.get_str("eval.model", "scdcf");
    let accuracy = match model_kind.as_str() {
        "scdcf" => {
            let mut model = build_scdcf(cfg, data.height(), seed)?;
            load_checkpoint(&mut model, &config, &ckpt)?;
            evaluate(&mut model, &data)?
        }
        "cnn" => {
            let mut model = build_cnn(cfg, data.height(), seed)?;
            load_checkpoint(&mut model, &config, &ckpt)?;
            evaluate(&mut model, &data)?
        }
        other => return Err(Error::Config(format!("unknown model kind '{}'", other))),
    };
    let report = format!("checkpoint={}\ndata={}\naccuracy={}\n", ckpt.display(), data_path.display(), format_float(accuracy));
    std::fs::write(out.join("accuracy.txt"), &report)?;
    println!("eval: accuracy {:.4} on {} images", accuracy, data.len());
    Ok(())
}
