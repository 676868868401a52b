//! Command line front end for the measured-BRDF toolkit: trains and runs
//! the hypernetwork, the PCA and per-material neural-field baselines, and
//! the sphere renderer plus image metrics used to compare them.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use brdf_forge::baselines::{
    field_to_grid, ipca_fit, ipca_fit_sparse, ipca_reconstruct, nbrdf_fit, NbrdfConfig, PcaModel,
};
use brdf_forge::hypernet::{
    self, load_checkpoint, save_checkpoint, HyperModel, LatentEmbedding, ModelShape, TrainConfig,
};
use brdf_forge::merl::{load_dataset, read_merl, write_merl, BrdfGrid, MaterialRecord};
use brdf_forge::param::{extract_samples, sample_uniform, Direction, GridIndex};
use brdf_forge::preproc::{compute_reference_median, log_relative_map, ReferenceTable};
use brdf_forge::render::{
    eval_grid, mean_delta_e, psnr, read_pfm, render_sphere, ssim, tonemap, write_pfm, write_ppm,
    DirectionalLight,
};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "brdf-forge", version, about = "Measured-BRDF compression and rendering toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the hypernetwork on a set of measured materials.
    Train(TrainArgs),
    /// Reconstruct a full grid from a sparse draw of a dense material.
    Reconstruct(ReconstructArgs),
    /// Encode a dense material into its latent embedding.
    Compress(CompressArgs),
    /// Linearly interpolate two embeddings, optionally decoding a grid.
    Interpolate(InterpolateArgs),
    /// Render a material as a lit sphere (PFM, optionally PPM preview).
    Render(RenderArgs),
    /// Compare two PFM renders: PSNR, mean CIEDE2000 and SSIM.
    Metrics(MetricsArgs),
    /// PCA baseline: fit components, optionally reconstruct from a sparse draw.
    Ipca(IpcaArgs),
    /// Per-material neural-field baseline: overfit one material.
    Nbrdf(NbrdfArgs),
    /// Write the embedding of every dataset material, one line each.
    ExportEmbeddings(ExportEmbeddingsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config file (`key = value`); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Comma-separated material names.
    #[arg(long, value_delimiter = ',')]
    materials: Vec<String>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss log path; defaults to the checkpoint path with a `.log` suffix.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    z_dim: Option<usize>,
    #[arg(long)]
    encoder_hidden: Option<usize>,
    #[arg(long)]
    decoder_hidden: Option<usize>,
    /// Comma-separated hyponet layer widths, e.g. 6,60,60,60,60,3.
    #[arg(long)]
    hyponet_layers: Option<String>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    materials_per_step: Option<usize>,
    #[arg(long)]
    samples_per_material: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Dense MERL material file to draw samples from.
    #[arg(long)]
    material: PathBuf,
    /// Number of texels to draw.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output MERL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dense MERL material file.
    #[arg(long)]
    material: PathBuf,
    /// Number of texels to encode from; defaults to the full grid.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output embedding text file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    /// First embedding file.
    #[arg(long)]
    a: PathBuf,
    /// Second embedding file.
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    alpha: f64,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint; required with --grid-out to decode the interpolant.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Also write the decoded MERL grid here.
    #[arg(long)]
    grid_out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RenderArgs {
    /// MERL material file to render.
    #[arg(long)]
    input: PathBuf,
    /// Output PFM (linear HDR).
    #[arg(long)]
    out: PathBuf,
    /// Optional tonemapped PPM preview.
    #[arg(long)]
    ppm: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Directional light as x,y,z:r,g,b; repeatable. Defaults to a white
    /// headlight at 0,0,1:1,1,1.
    #[arg(long)]
    light: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    exposure: f64,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference PFM image.
    #[arg(long)]
    a: PathBuf,
    /// Test PFM image.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    exposure: f64,
    #[arg(long, default_value_t = 2.2)]
    gamma: f64,
}

#[derive(Args)]
struct IpcaArgs {
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    materials: Vec<String>,
    /// Number of principal components.
    #[arg(long)]
    components: usize,
    /// Output path for the fitted model.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Material name to reconstruct from a sparse draw.
    #[arg(long)]
    target: Option<String>,
    /// Number of texels to draw for the sparse fit.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output MERL file for the sparse reconstruction.
    #[arg(long)]
    grid_out: Option<PathBuf>,
}

#[derive(Args)]
struct NbrdfArgs {
    /// Directory holding the reference dataset and the target material.
    #[arg(long)]
    data_dir: PathBuf,
    /// Materials defining the median reference table.
    #[arg(long, value_delimiter = ',')]
    materials: Vec<String>,
    /// Material to overfit.
    #[arg(long)]
    target: String,
    /// Comma-separated field layer widths.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output MERL file for the fitted field evaluated on the full grid.
    #[arg(long)]
    grid_out: PathBuf,
}

#[derive(Args)]
struct ExportEmbeddingsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_delimiter = ',')]
    materials: Vec<String>,
    /// Texels to encode from per material; defaults to the full grid.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output text file, one `name v1 v2 ...` line per material.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land on stdout and exit 0; real usage
            // errors must exit 1, not clap's default 2.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Reconstruct(args) => cmd_reconstruct(args),
        Command::Compress(args) => cmd_compress(args),
        Command::Interpolate(args) => cmd_interpolate(args),
        Command::Render(args) => cmd_render(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Ipca(args) => cmd_ipca(args),
        Command::Nbrdf(args) => cmd_nbrdf(args),
        Command::ExportEmbeddings(args) => cmd_export_embeddings(args),
    }
}

/// Thread-count resolution order: flag, config file, BRDF_FORGE_THREADS
/// environment variable, then 1.
fn resolve_threads(flag: Option<usize>, from_config: Option<usize>) -> Result<usize> {
    if let Some(t) = flag.or(from_config) {
        return Ok(t.max(1));
    }
    match std::env::var("BRDF_FORGE_THREADS") {
        Ok(v) => {
            let t: usize = v
                .parse()
                .with_context(|| format!("bad BRDF_FORGE_THREADS value `{v}`"))?;
            Ok(t.max(1))
        }
        Err(_) => Ok(1),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };

    let data_dir = args
        .data_dir
        .or(cfg.data_dir)
        .context("no data directory given (--data-dir or data_dir)")?;
    let materials = if args.materials.is_empty() {
        cfg.materials
            .context("no materials given (--materials or materials)")?
    } else {
        args.materials
    };
    let out = args
        .out
        .or(cfg.checkpoint_out)
        .context("no checkpoint path given (--out or checkpoint_out)")?;
    let log_path = args
        .log
        .or(cfg.loss_log)
        .unwrap_or_else(|| out.with_extension("log"));

    let defaults = TrainConfig::default();
    let shape_defaults = ModelShape::default();
    let hyponet_layers = match args.hyponet_layers {
        Some(s) => config::parse_sizes(&s)?,
        None => cfg.hyponet_layers.unwrap_or(shape_defaults.hyponet_layers),
    };
    let train_config = TrainConfig {
        shape: ModelShape {
            z_dim: args.z_dim.or(cfg.z_dim).unwrap_or(shape_defaults.z_dim),
            encoder_hidden: args
                .encoder_hidden
                .or(cfg.encoder_hidden)
                .unwrap_or(shape_defaults.encoder_hidden),
            decoder_hidden: args
                .decoder_hidden
                .or(cfg.decoder_hidden)
                .unwrap_or(shape_defaults.decoder_hidden),
            hyponet_layers,
        },
        lambda1: args.lambda1.or(cfg.lambda1).unwrap_or(defaults.lambda1),
        lambda2: args.lambda2.or(cfg.lambda2).unwrap_or(defaults.lambda2),
        epochs: args.epochs.or(cfg.epochs).unwrap_or(defaults.epochs),
        materials_per_step: args
            .materials_per_step
            .or(cfg.materials_per_step)
            .unwrap_or(defaults.materials_per_step),
        samples_per_material: args
            .samples_per_material
            .or(cfg.samples_per_material)
            .unwrap_or(defaults.samples_per_material),
        learning_rate: args
            .learning_rate
            .or(cfg.learning_rate)
            .unwrap_or(defaults.learning_rate),
        lr_decay: args.lr_decay.or(cfg.lr_decay).unwrap_or(defaults.lr_decay),
        warmup_steps: args
            .warmup_steps
            .or(cfg.warmup_steps)
            .unwrap_or(defaults.warmup_steps),
        seed: args.seed.or(cfg.seed).unwrap_or(defaults.seed),
        threads: resolve_threads(args.threads, cfg.threads)?,
    };

    let dataset = load_dataset(&data_dir, &materials)?;
    let reference = compute_reference_median(&dataset)?;
    let (model, log) = hypernet::train(&dataset, &reference, &train_config)?;

    let mut log_text = String::new();
    for entry in &log {
        log_text.push_str(&format!(
            "epoch={} loss={:.6e} rec={:.6e}\n",
            entry.epoch, entry.mean_loss, entry.mean_rec
        ));
    }
    std::fs::write(&log_path, log_text)
        .with_context(|| format!("writing loss log {}", log_path.display()))?;
    std::fs::write(&out, save_checkpoint(&model))
        .with_context(|| format!("writing checkpoint {}", out.display()))?;

    if let Some(last) = log.last() {
        println!(
            "trained {} materials for {} epochs: loss={:.6e} rec={:.6e}",
            dataset.len(),
            log.len(),
            last.mean_loss,
            last.mean_rec
        );
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<HyperModel> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(load_checkpoint(&bytes)?)
}

fn load_grid(path: &Path) -> Result<BrdfGrid> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading material {}", path.display()))?;
    Ok(read_merl(&bytes)?)
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let grid = load_grid(&args.material)?;
    if grid.res() != model.reference().res() {
        bail!("material resolution does not match the model's reference table");
    }
    let threads = resolve_threads(args.threads, None)?;
    let indices = sample_uniform(&grid.res(), args.n, args.seed)?;
    let extraction = extract_samples(&grid, model.reference(), &indices)?;
    let reconstructed = hypernet::reconstruct(&model, &extraction.set, threads)?;
    std::fs::write(&args.out, write_merl(&reconstructed))
        .with_context(|| format!("writing grid {}", args.out.display()))?;
    println!(
        "reconstructed from {} samples ({} skipped) -> {}",
        extraction.set.len(),
        extraction.skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn write_embedding(path: &Path, z: &LatentEmbedding) -> Result<()> {
    let mut text = format!("# brdf-forge embedding dim={}\n", z.dim());
    for v in &z.0 {
        text.push_str(&format!("{v}\n"));
    }
    std::fs::write(path, text).with_context(|| format!("writing embedding {}", path.display()))
}

fn read_embedding(path: &Path) -> Result<LatentEmbedding> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading embedding {}", path.display()))?;
    let mut values = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .with_context(|| format!("bad embedding value `{line}`"))?,
        );
    }
    if values.is_empty() {
        bail!("embedding file {} holds no values", path.display());
    }
    Ok(LatentEmbedding(values))
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let grid = load_grid(&args.material)?;
    let n = args.n.unwrap_or_else(|| grid.texel_count());
    let record = MaterialRecord {
        name: args.material.display().to_string(),
        grid,
    };
    let z = hypernet::compress(&model, &record, n, args.seed)?;
    write_embedding(&args.out, &z)?;
    println!("wrote {}-dim embedding -> {}", z.dim(), args.out.display());
    Ok(())
}

fn cmd_interpolate(args: InterpolateArgs) -> Result<()> {
    let a = read_embedding(&args.a)?;
    let b = read_embedding(&args.b)?;
    let z = hypernet::interpolate(&a, &b, args.alpha)?;
    write_embedding(&args.out, &z)?;
    if let Some(grid_out) = &args.grid_out {
        let model_path = args
            .model
            .as_ref()
            .context("--grid-out requires --model to decode the interpolant")?;
        let model = load_model(model_path)?;
        let threads = resolve_threads(args.threads, None)?;
        let grid = hypernet::reconstruct_from_embedding(&model, &z, threads)?;
        std::fs::write(grid_out, write_merl(&grid))
            .with_context(|| format!("writing grid {}", grid_out.display()))?;
    }
    println!("interpolated alpha={} -> {}", args.alpha, args.out.display());
    Ok(())
}

/// Parses a light spec `x,y,z:r,g,b`; the direction points toward the light
/// and is normalized.
fn parse_light(spec: &str) -> Result<DirectionalLight> {
    let (dir, rad) = spec
        .split_once(':')
        .with_context(|| format!("light `{spec}` is not of the form x,y,z:r,g,b"))?;
    let triple = |s: &str| -> Result<[f64; 3]> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?;
        if parts.len() != 3 {
            bail!("expected three comma-separated numbers in `{s}`");
        }
        Ok([parts[0], parts[1], parts[2]])
    };
    let d = triple(dir)?;
    let r = triple(rad)?;
    Ok(DirectionalLight {
        direction: Direction::normalized(d[0], d[1], d[2])?,
        radiance: r,
    })
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let grid = load_grid(&args.input)?;
    let lights = if args.light.is_empty() {
        vec![DirectionalLight {
            direction: Direction::Z,
            radiance: [1.0, 1.0, 1.0],
        }]
    } else {
        args.light
            .iter()
            .map(|s| parse_light(s))
            .collect::<Result<Vec<_>>>()?
    };
    let threads = resolve_threads(args.threads, None)?;
    let brdf = |wi: &Direction, wo: &Direction| eval_grid(&grid, wi, wo);
    let image = render_sphere(&brdf, &lights, args.width, args.height, threads)?;
    std::fs::write(&args.out, write_pfm(&image))
        .with_context(|| format!("writing PFM {}", args.out.display()))?;
    if let Some(ppm) = &args.ppm {
        let mapped = tonemap(&image, args.exposure, args.gamma);
        std::fs::write(ppm, write_ppm(&mapped))
            .with_context(|| format!("writing PPM {}", ppm.display()))?;
    }
    println!(
        "rendered {}x{} with {} light(s) -> {}",
        args.width,
        args.height,
        lights.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let a = read_pfm(&std::fs::read(&args.a)?)?;
    let b = read_pfm(&std::fs::read(&args.b)?)?;
    let a = tonemap(&a, args.exposure, args.gamma);
    let b = tonemap(&b, args.exposure, args.gamma);
    let psnr_db = psnr(&a, &b, 1.0)?;
    let delta_e = mean_delta_e(&a, &b)?;
    let ssim_val = ssim(&a, &b)?;
    println!("psnr={psnr_db:.3} delta_e={delta_e:.3} ssim={ssim_val:.3}");
    Ok(())
}

fn cmd_ipca(args: IpcaArgs) -> Result<()> {
    if args.materials.is_empty() {
        bail!("no materials given");
    }
    let dataset = load_dataset(&args.data_dir, &args.materials)?;
    let reference = compute_reference_median(&dataset)?;
    let model = ipca_fit(&dataset, &reference, args.components)?;
    if let Some(out) = &args.out {
        std::fs::write(out, model.to_bytes())
            .with_context(|| format!("writing PCA model {}", out.display()))?;
    }
    if let Some(target) = &args.target {
        let grid_out = args
            .grid_out
            .as_ref()
            .context("--target requires --grid-out")?;
        let n = args.n.context("--target requires --n")?;
        let record = load_dataset(&args.data_dir, std::slice::from_ref(target))?.remove(0);
        let grid = ipca_sparse_grid(&model, &record.grid, &reference, n, args.seed)?;
        std::fs::write(grid_out, write_merl(&grid))
            .with_context(|| format!("writing grid {}", grid_out.display()))?;
        println!(
            "fit {} components; sparse reconstruction of {target} from {n} texels -> {}",
            model.n_components(),
            grid_out.display()
        );
    } else {
        println!("fit {} components", model.n_components());
    }
    Ok(())
}

/// Draws `n` texels, fits coefficients to the valid ones and expands the
/// dense grid.
fn ipca_sparse_grid(
    model: &PcaModel,
    grid: &BrdfGrid,
    reference: &ReferenceTable,
    n: usize,
    seed: u64,
) -> Result<BrdfGrid> {
    let res = grid.res();
    let indices = sample_uniform(&res, n, seed)?;
    let observations: Vec<(GridIndex, [f64; 3])> = indices
        .iter()
        .filter(|g| grid.is_valid_texel(g.linear(&res)))
        .map(|g| {
            let t = g.linear(&res);
            let mut rgb = [0.0; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v = log_relative_map(grid.linear_at(t, c), reference.at(t, c));
            }
            (*g, rgb)
        })
        .collect();
    let coefficients = ipca_fit_sparse(model, &observations)?;
    Ok(ipca_reconstruct(model, &coefficients, reference)?)
}

fn cmd_nbrdf(args: NbrdfArgs) -> Result<()> {
    if args.materials.is_empty() {
        bail!("no materials given");
    }
    let dataset = load_dataset(&args.data_dir, &args.materials)?;
    let reference = compute_reference_median(&dataset)?;
    let target = load_dataset(&args.data_dir, std::slice::from_ref(&args.target))?.remove(0);

    let defaults = NbrdfConfig::default();
    let layer_sizes = match &args.layers {
        Some(s) => config::parse_sizes(s)?,
        None => defaults.layer_sizes,
    };
    let config = NbrdfConfig {
        layer_sizes,
        steps: args.steps.unwrap_or(defaults.steps),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: args.learning_rate.unwrap_or(defaults.learning_rate),
        seed: args.seed,
    };
    let (weights, losses) = nbrdf_fit(&target.grid, &reference, &config)?;
    let grid = field_to_grid(&weights, &reference)?;
    std::fs::write(&args.grid_out, write_merl(&grid))
        .with_context(|| format!("writing grid {}", args.grid_out.display()))?;
    println!(
        "fit {} in {} steps: final_loss={:.6e} -> {}",
        args.target,
        losses.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        args.grid_out.display()
    );
    Ok(())
}

fn cmd_export_embeddings(args: ExportEmbeddingsArgs) -> Result<()> {
    if args.materials.is_empty() {
        bail!("no materials given");
    }
    let model = load_model(&args.model)?;
    let dataset = load_dataset(&args.data_dir, &args.materials)?;
    let mut text = String::new();
    for record in &dataset {
        let n = args.n.unwrap_or_else(|| record.grid.texel_count());
        let z = hypernet::compress(&model, record, n, args.seed)?;
        text.push_str(&record.name);
        for v in &z.0 {
            text.push_str(&format!(" {v}"));
        }
        text.push('\n');
    }
    std::fs::write(&args.out, text)
        .with_context(|| format!("writing embeddings {}", args.out.display()))?;
    println!(
        "wrote {} embeddings -> {}",
        dataset.len(),
        args.out.display()
    );
    Ok(())
}
