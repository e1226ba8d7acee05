use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use fogflow_core::cda::{distribution, kl_loss, CdaConfig};
use fogflow_core::cost_volume::CostVolume;
use fogflow_core::eval::{evaluate, pooled, write_flow_ppm, EvalReport, RegionStats, Regions};
use fogflow_core::flownet::save_checkpoint;
use fogflow_core::fog::{add_fog, FogParams, SensorModel};
use fogflow_core::losses::save_loss_csv;
use fogflow_core::scene::io::{
    read_flo, read_pfm, read_pfm_stack, read_ppm, write_flo, write_pfm, write_pfm_stack, write_ppm,
};
use fogflow_core::scene::make_scene;
use fogflow_core::trainer::{build_dataset, report_json, run_pipeline_on, TrainConfig};
use fogflow_core::{DepthMap, Error, Mask, SceneConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fogflow",
    version,
    about = "Optical flow adaptation for foggy scenes"
)]
struct Cli {
    /// Seed for scene generation, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config; the schema depends on the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural stereo scene with ground-truth depth and flow.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Width and height of a random scene (ignored with --config).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Upper bound on moving objects in a random scene.
        #[arg(long, default_value_t = 2)]
        objects: usize,
    },
    /// Render fog over an image from its depth map.
    Fog {
        #[arg(long)]
        image: PathBuf,
        /// Single-channel PFM depth in meters.
        #[arg(long)]
        depth: PathBuf,
        /// JSON fog parameters; falls back to --config, then light fog.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also apply the sensor model (gamma and noise) seeded by --seed.
        #[arg(long)]
        sensor: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the staged adaptation pipeline.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Also train the loss-toggle grid.
        #[arg(long)]
        ablation: bool,
    },
    /// Score predicted .flo files against same-named ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ascending depth band edges in meters, used where `<name>.depth.pfm` exists.
        #[arg(long, value_delimiter = ',')]
        bands: Vec<f64>,
    },
    /// Correlation histograms and KL divergence of two cost-volume dumps.
    AlignDemo {
        /// PFM stack of the real-domain cost volume.
        #[arg(long)]
        real: PathBuf,
        /// PFM stack of the synthetic-domain cost volume.
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        Some(Error::Io(_)) => EXIT_FAILURE,
        Some(_) => EXIT_INVALID,
        None if e.chain().any(|c| c.is::<serde_json::Error>()) => EXIT_INVALID,
        None => EXIT_FAILURE,
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth { out, size, objects } => {
            synth(config, seed.unwrap_or(0), &out, size, objects)
        }
        Command::Fog {
            image,
            depth,
            params,
            sensor,
            out,
        } => fog(
            params.as_deref().or(config),
            seed.unwrap_or(0),
            &image,
            &depth,
            sensor,
            &out,
        ),
        Command::Train { out, ablation } => train(config, seed, &out, ablation),
        Command::Eval {
            pred,
            gt,
            out,
            bands,
        } => eval(&pred, &gt, &out, &bands),
        Command::AlignDemo {
            real,
            synthetic,
            out,
        } => align_demo(config, seed, &real, &synthetic, out.as_deref()),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(Error::from)
        .with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text)
        .map_err(Error::from)
        .with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct SynthManifest<'a> {
    seed: u64,
    config: &'a SceneConfig,
}

fn synth(config: Option<&Path>, seed: u64, out: &Path, size: usize, objects: usize) -> Result<()> {
    let scene_cfg = match config {
        Some(p) => read_json(p)?,
        None => SceneConfig::random(size, size, objects, seed),
    };
    let s = make_scene(&scene_cfg, seed)?;
    create_dir(out)?;
    write_ppm(out.join("left_t.ppm"), &s.left_t)?;
    write_ppm(out.join("left_t1.ppm"), &s.left_t1)?;
    write_ppm(out.join("right_t.ppm"), &s.right_t)?;
    write_ppm(out.join("right_t1.ppm"), &s.right_t1)?;
    write_pfm(out.join("depth_t.pfm"), s.depth_t.as_grid())?;
    write_pfm(out.join("depth_t1.pfm"), s.depth_t1.as_grid())?;
    write_pfm(out.join("nonrigid.pfm"), &s.gt_nonrigid.to_grid())?;
    write_flo(out.join("flow.flo"), &s.gt_flow)?;
    write_flow_ppm(out.join("flow.ppm"), &s.gt_flow)?;
    write_json(
        &out.join("scene.json"),
        &SynthManifest {
            seed,
            config: &scene_cfg,
        },
    )
}

fn fog(
    params: Option<&Path>,
    seed: u64,
    image: &Path,
    depth: &Path,
    sensor: bool,
    out: &Path,
) -> Result<()> {
    let params: FogParams = match params {
        Some(p) => read_json(p)?,
        None => FogParams::light(),
    };
    params.validate()?;
    let img = read_ppm(image).with_context(|| format!("reading {}", image.display()))?;
    let depth =
        DepthMap::new(read_pfm(depth).with_context(|| format!("reading {}", depth.display()))?)?;
    let mut foggy = add_fog(&img, &depth, &params)?;
    if sensor {
        foggy = SensorModel::default().apply(&foggy, seed)?;
    }
    write_ppm(out, &foggy)?;
    Ok(())
}

fn train(config: Option<&Path>, seed: Option<u64>, out: &Path, ablation: bool) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.ablation |= ablation;
    cfg.validate()?;
    let data = build_dataset(&cfg)?;
    let result = run_pipeline_on(&cfg, &data)?;
    create_dir(out)?;
    fs::write(out.join("report.json"), report_json(&result.report)?).map_err(Error::from)?;
    write_json(&out.join("config.json"), &cfg)?;

    let steps = cfg.steps.total();
    let b = &result.branches;
    for (name, net) in [
        ("clean", &b.clean),
        ("synthetic", &b.synthetic),
        ("real", &b.real),
    ] {
        save_checkpoint(out.join(format!("{name}.json")), net, steps, cfg.seed)?;
    }

    let losses = out.join("losses");
    create_dir(&losses)?;
    for row in &result.report.rows {
        for stage in &row.stages {
            save_loss_csv(
                losses.join(format!("{}_{}.csv", row.name, stage.name)),
                &stage.losses,
            )?;
        }
    }

    let (pred_dir, gt_dir, vis_dir) = (out.join("pred"), out.join("gt"), out.join("flow_ppm"));
    for d in [&pred_dir, &gt_dir, &vis_dir] {
        create_dir(d)?;
    }
    for (i, s) in data.eval.iter().enumerate() {
        let name = format!("eval_{i:03}");
        let pred = b.real.forward_flow(&s.real.t, &s.real.t1)?;
        write_flo(pred_dir.join(format!("{name}.flo")), &pred)?;
        write_flo(gt_dir.join(format!("{name}.flo")), &s.gt)?;
        write_pfm(
            gt_dir.join(format!("{name}.nonrigid.pfm")),
            &s.nonrigid.to_grid(),
        )?;
        write_pfm(gt_dir.join(format!("{name}.depth.pfm")), s.depth.as_grid())?;
        write_flow_ppm(vis_dir.join(format!("{name}_pred.ppm")), &pred)?;
        write_flow_ppm(vis_dir.join(format!("{name}_gt.ppm")), &s.gt)?;
    }
    if let Some(s) = data.eval.first() {
        write_pfm_stack(
            out.join("cv_real.pfm"),
            &b.real.fused_cost_volume(&s.real.t, &s.real.t1)?,
        )?;
        write_pfm_stack(
            out.join("cv_synthetic.pfm"),
            &b.synthetic
                .fused_cost_volume(&s.synthetic.t, &s.synthetic.t1)?,
        )?;
    }
    for row in &result.report.rows {
        println!(
            "{:<16} real-domain EPE {:.4}  F1-all {:.4}",
            row.name, row.real.epe, row.real.f1_all
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct FileReport {
    name: String,
    report: EvalReport,
}

#[derive(Serialize)]
struct EvalSummary {
    files: Vec<FileReport>,
    pooled: RegionStats,
}

fn optional_grid(path: &Path) -> Result<Option<fogflow_core::ImageGrid>> {
    if path.exists() {
        Ok(Some(read_pfm(path)?))
    } else {
        Ok(None)
    }
}

fn mask_from(grid: &fogflow_core::ImageGrid) -> Mask {
    Mask::from_fn(grid.height(), grid.width(), |x, y| grid.get(x, y, 0))
}

fn eval(pred: &Path, gt: &Path, out: &Path, bands: &[f64]) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(pred)
        .map_err(Error::from)
        .with_context(|| format!("listing {}", pred.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".flo"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!("no .flo files in {}", pred.display())).into());
    }
    let mut files = Vec::with_capacity(names.len());
    for name in names {
        let stem = name.trim_end_matches(".flo");
        let p = read_flo(pred.join(&name)).with_context(|| format!("prediction {name}"))?;
        let g = read_flo(gt.join(&name)).with_context(|| format!("ground truth {name}"))?;
        let valid = optional_grid(&gt.join(format!("{stem}.valid.pfm")))?
            .map(|v| mask_from(&v))
            .unwrap_or_else(|| Mask::ones(g.height(), g.width()));
        let nonrigid =
            optional_grid(&gt.join(format!("{stem}.nonrigid.pfm")))?.map(|v| mask_from(&v));
        let depth = match optional_grid(&gt.join(format!("{stem}.depth.pfm")))? {
            Some(d) if !bands.is_empty() => Some(DepthMap::new(d)?),
            _ => None,
        };
        let regions = Regions {
            nonrigid: nonrigid.as_ref(),
            depth: depth.as_ref().map(|d| (d, bands)),
        };
        let report =
            evaluate(&p, &g, &valid, regions).with_context(|| format!("scoring {name}"))?;
        files.push(FileReport {
            name: stem.to_string(),
            report,
        });
    }
    let reports: Vec<EvalReport> = files.iter().map(|f| f.report.clone()).collect();
    let summary = EvalSummary {
        pooled: pooled(&reports)?,
        files,
    };
    write_json(out, &summary)?;
    println!(
        "{} files  EPE {:.4}  F1-all {:.4}",
        summary.files.len(),
        summary.pooled.epe,
        summary.pooled.f1_all
    );
    Ok(())
}

#[derive(Serialize)]
struct AlignReport {
    n_samples: usize,
    k_cda: usize,
    seed: u64,
    p_s: Vec<f64>,
    p_r: Vec<f64>,
    kl: f64,
}

fn load_cost_volume(path: &Path) -> Result<CostVolume> {
    let grid = read_pfm_stack(path).with_context(|| format!("reading {}", path.display()))?;
    let side = (grid.channels() as f64).sqrt().round() as usize;
    if side * side != grid.channels() || side.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "{}: {} channels is not an odd square displacement window",
            path.display(),
            grid.channels()
        ))
        .into());
    }
    Ok(CostVolume::new(grid, side / 2)?.normalized())
}

fn align_demo(
    config: Option<&Path>,
    seed: Option<u64>,
    real: &Path,
    synthetic: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let mut cda: CdaConfig = match config {
        Some(p) => read_json(p)?,
        None => CdaConfig::default(),
    };
    if let Some(s) = seed {
        cda.seed = s;
    }
    cda.validate()?;
    let p_r = distribution(&load_cost_volume(real)?, &cda)?;
    let p_s = distribution(&load_cost_volume(synthetic)?, &cda)?;
    let report = AlignReport {
        n_samples: cda.n_samples,
        k_cda: cda.k_cda,
        seed: cda.seed,
        kl: kl_loss(&p_r, &p_s)?,
        p_s: p_s.probs,
        p_r: p_r.probs,
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}
