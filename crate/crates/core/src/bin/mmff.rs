use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmff::augmentation::CropCorner;
use mmff::checkpoint::Checkpoint;
use mmff::complexity::complexity;
use mmff::config::RunConfig;
use mmff::frame::{confusion_image, heatmap_gray, overlay};
use mmff::output::{write_atomic, StagingDir};
use mmff::rgb_stream::skeleton_mask_geometry;
use mmff::skeleton_io::Dataset;
use mmff::synthdata::{generate_dataset, SynthSpec};
use mmff::training::{
    eval_view, evaluate, prepare_eval_sample, prepare_split, run_ablation, split_indices,
    train_stages, EvalReport, Predictor,
};
use mmff::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mmff",
    version,
    about = "Two-stream skeleton + RGB action recognition"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML). Defaults to the built-in reference config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config or spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for single-file outputs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Runs every parallel section on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Args, Clone, Default)]
struct DataArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Maximum rotation about x and y in degrees.
    #[arg(long)]
    rot_max_deg: Option<f64>,
    /// Scale factor range, `lo..hi`.
    #[arg(long, value_parser = parse_range)]
    scale_range: Option<(f64, f64)>,
    /// Projection-crop margin range in pixels, `lo..hi`.
    #[arg(long, value_parser = parse_range)]
    crop_margin_range: Option<(f64, f64)>,
    /// Comma-separated anchor corners: top_left, top_right, bottom_left, bottom_right.
    #[arg(long, value_delimiter = ',', value_parser = parse_corner)]
    crop_corners: Option<Vec<CropCorner>>,
    /// Side of the square crop fed to the RGB backbone.
    #[arg(long)]
    out_size: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset.
    SynthGen {
        /// Generator spec (TOML); the reference spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run the staged training schedule, writing a checkpoint per stage.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Last stage to run (1: streams, 2: fusion, 3: fine-tuning).
        #[arg(long, default_value_t = 3)]
        stages: u8,
        /// Continue from a checkpoint; its stages are skipped.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a stage-2 or stage-3 checkpoint on the test split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated frame fractions, one report row each.
        #[arg(long, value_delimiter = ',')]
        frame_fractions: Option<Vec<f64>>,
        /// Frame-fraction sweep `start:end:step`, e.g. 0.1:0.9:0.1.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Train and compare ablation variants.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated variant names.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "full,no_self_attn,no_skel_attn,decision,sum,skeleton_only,rgb_only"
        )]
        variants: Vec<String>,
        /// Appends a frame_fraction variant per step of `start:end:step`.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Parameter and MAC counts of the configured model.
    ReportComplexity {
        /// Read the model config from a checkpoint instead of --config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Skeleton frames per clip.
        #[arg(long, default_value_t = 24)]
        frames: usize,
        /// Number of classes; taken from the checkpoint when one is given.
        #[arg(long, default_value_t = 9)]
        classes: usize,
    },
    /// Export attention heatmaps for one sample.
    VizAttention {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample id (e.g. s00003) or manifest index.
        #[arg(long)]
        sample: String,
    },
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once("..").ok_or("expected lo..hi")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    if hi < lo {
        return Err("range end below start".into());
    }
    Ok((lo, hi))
}

fn parse_corner(s: &str) -> std::result::Result<CropCorner, String> {
    serde_json::from_value(serde_json::Value::String(s.trim().to_string()))
        .map_err(|_| format!("unknown corner {s:?}"))
}

fn parse_sweep(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("sweep {s:?}: expected start:end:step"));
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(step > 0.0) || end < start {
        return Err(bad());
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    // rounded to 1e-9 so 0.1 + 2·0.1 prints and parses as 0.3
    Ok((0..=n)
        .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

fn single_thread() {
    // the global pool can only be built once per process; a second call is a no-op
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build_global();
}

fn load_config(common: &Common, data: &DataArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::reference(),
    };
    apply_overrides(&mut cfg, common, data);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common, data: &DataArgs) {
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.deterministic |= common.deterministic;
    if cfg.deterministic {
        single_thread();
    }
    if let Some(d) = &data.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(r) = data.rot_max_deg {
        cfg.data.augment.rot_max_deg = r;
    }
    if let Some(r) = data.scale_range {
        cfg.data.augment.scale_range = r;
    }
    if let Some(r) = data.crop_margin_range {
        cfg.data.crop_margin_range = r;
    }
    if let Some(c) = &data.crop_corners {
        cfg.data.crop_corners = c.clone();
    }
    if let Some(n) = data.out_size {
        cfg.model.rgb.input_size = n;
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_image<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn synth_gen(common: &Common, spec: Option<&Path>) -> Result<()> {
    let mut spec = match spec {
        Some(p) => SynthSpec::load(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("data/synth"));
    let stage = StagingDir::new(&out)?;
    let samples = generate_dataset(&spec, stage.root())?;
    stage.commit()?;
    println!(
        "wrote {} samples ({} classes) to {}",
        samples.len(),
        spec.classes.len(),
        out.display()
    );
    Ok(())
}

fn train(
    common: &Common,
    data: &DataArgs,
    stages: u8,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<()> {
    let resume = resume.map(Checkpoint::load).transpose()?;
    let cfg = match &resume {
        // the snapshot defines the model; command-line flags still apply
        Some(ck) if common.config.is_none() => {
            let mut c = ck.config.clone();
            apply_overrides(&mut c, common, data);
            c.validate()?;
            c
        }
        _ => load_config(common, data)?,
    };
    if let Some(ck) = &resume {
        if ck.stage >= stages {
            return Err(Error::Config(format!(
                "checkpoint is already at stage {}",
                ck.stage
            )));
        }
    }
    let dataset = Dataset::open(&cfg.dataset)?;
    let stage_dir = StagingDir::new(&cfg.out_dir)?;
    let (_, log) = train_stages(
        &cfg,
        &dataset,
        stages,
        resume.as_ref(),
        !quiet,
        |model, stage| {
            let path = stage_dir.path(format!("stage{stage}.ckpt"));
            Checkpoint::from_model(model, &cfg, stage).save(&path)?;
            if !quiet {
                eprintln!("stage {stage} done");
            }
            Ok(())
        },
    )?;
    let mut lines = String::new();
    for r in &log {
        lines += &format!(
            "{} {} {:e} {:.6} {:.4}\n",
            r.epoch, r.stage, r.lr, r.loss, r.train_accuracy
        );
    }
    write_text(&stage_dir.path("train_log.txt"), &lines)?;
    write_json(&stage_dir.path("train_log.json"), &log)?;
    write_text(&stage_dir.path("config.toml"), &cfg.to_toml()?)?;
    let out = stage_dir.commit()?;
    println!("checkpoints written to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    frame_fractions: Vec<f64>,
    report: EvalReport,
}

fn eval(
    common: &Common,
    data: &DataArgs,
    checkpoint: &Path,
    fractions: Option<&[f64]>,
    sweep: Option<&str>,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.require_stage(2)?;
    let mut cfg = ck.config.clone();
    apply_overrides(&mut cfg, common, data);
    cfg.validate()?;
    let model = ck.to_model()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let (_, test) = split_indices(&dataset);
    let rows: Vec<Vec<f64>> = match (fractions, sweep) {
        (_, Some(s)) => parse_sweep(s)?.into_iter().map(|f| vec![f]).collect(),
        (Some(f), None) => f.iter().map(|&x| vec![x]).collect(),
        (None, None) => vec![cfg.data.frame_fractions.clone()],
    };
    let mut out = Vec::new();
    for fr in rows {
        let mut c = cfg.clone();
        c.data.frame_fractions = fr.clone();
        c.validate()?;
        let items = prepare_split(&dataset, &test, false, &c)?;
        let report = evaluate(&model, &items, Predictor::Full)?;
        println!("fractions {:?} accuracy {:.4}", fr, report.accuracy);
        out.push(EvalRow {
            frame_fractions: fr,
            report,
        });
    }
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("eval"));
    let stage = StagingDir::new(&dir)?;
    write_json(&stage.path("eval.json"), &out)?;
    for (i, row) in out.iter().enumerate() {
        let name = if out.len() == 1 {
            "confusion.png".to_string()
        } else {
            format!("confusion_{i}.png")
        };
        save_image(
            &confusion_image(&row.report.confusion, 16),
            &stage.path(name),
        )?;
    }
    stage.commit()?;
    Ok(())
}

fn ablate(
    common: &Common,
    data: &DataArgs,
    variants: &[String],
    sweep: Option<&str>,
    quiet: bool,
) -> Result<()> {
    let cfg = load_config(common, data)?;
    let mut names = variants.to_vec();
    if let Some(s) = sweep {
        names.extend(
            parse_sweep(s)?
                .into_iter()
                .map(|f| format!("frame_fraction:{f}")),
        );
    }
    let dataset = Dataset::open(&cfg.dataset)?;
    let results = run_ablation(dataset, &names, &cfg, !quiet)?;
    let families: Vec<String> = {
        let mut f: Vec<String> = results
            .iter()
            .flat_map(|r| r.family_accuracy.keys().cloned())
            .collect();
        f.sort();
        f.dedup();
        f
    };
    let mut table = format!("{:<24} {:>9}", "variant", "accuracy");
    for f in &families {
        table += &format!(" {:>9}", format!("fam_{f}"));
    }
    table += "\n";
    for r in &results {
        table += &format!("{:<24} {:>9.4}", r.name, r.accuracy);
        for f in &families {
            match r.family_accuracy.get(f) {
                Some(a) => table += &format!(" {a:>9.4}"),
                None => table += &format!(" {:>9}", "-"),
            }
        }
        table += "\n";
    }
    print!("{table}");
    let stage = StagingDir::new(&cfg.out_dir)?;
    write_json(&stage.path("ablation.json"), &results)?;
    write_text(&stage.path("ablation.txt"), &table)?;
    stage.commit()?;
    Ok(())
}

fn report_complexity(
    common: &Common,
    checkpoint: Option<&Path>,
    frames: usize,
    classes: usize,
) -> Result<()> {
    let (cfg, classes) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            (ck.config, ck.classes)
        }
        None => (load_config(common, &DataArgs::default())?, classes),
    };
    let model = mmff::model::Model::new(&cfg.model, classes, cfg.seed)?;
    let report = complexity(&model, frames, cfg.data.frame_fractions.len());
    print!("FLOPs = 2 x MACs\n{}", report.to_table());
    if let Some(out) = &common.out {
        write_atomic(
            out,
            (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
        )?;
    }
    Ok(())
}

fn find_sample(dataset: &Dataset, key: &str) -> Result<usize> {
    let by_id = dataset.manifest.samples.iter().position(|s| {
        Path::new(&s.skeleton_file)
            .file_stem()
            .and_then(|n| n.to_str())
            == Some(key)
    });
    by_id
        .or_else(|| key.parse::<usize>().ok().filter(|&i| i < dataset.len()))
        .ok_or_else(|| Error::SampleNotFound(key.to_string()))
}

fn viz_attention(common: &Common, data: &DataArgs, checkpoint: &Path, sample: &str) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ck.config.clone();
    apply_overrides(&mut cfg, common, data);
    cfg.validate()?;
    let model = ck.to_model()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let index = find_sample(&dataset, sample)?;
    let s = dataset.load_sample(index)?;
    let view = eval_view(&s, &cfg.data, &cfg.model)?;
    let item = prepare_eval_sample(index, &s, &cfg.data, &cfg.model)?;
    let (self_masks, _) = model.attention_maps(&item.input)?;
    let crop_img = view.image.to_rgb8();
    let (w, h) = (crop_img.width(), crop_img.height());

    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join(format!("viz_{sample}")));
    let stage = StagingDir::new(&dir)?;
    save_image(&crop_img, &stage.path("crop.png"))?;
    for (i, m) in self_masks.iter().enumerate() {
        let heat = heatmap_gray(m.values(), m.height(), m.width(), h, w);
        save_image(&heat, &stage.path(format!("self_attention_{i}.png")))?;
        save_image(
            &overlay(&crop_img, &heat, 0.6),
            &stage.path(format!("self_attention_{i}_overlay.png")),
        )?;
    }
    let geo = skeleton_mask_geometry(
        &s.skeleton,
        view.frame_index,
        &s.camera,
        &view.crop,
        cfg.model.square_frac,
    )?;
    let heat = heatmap_gray(&geo.raster, view.crop.out_h, view.crop.out_w, h, w);
    save_image(&heat, &stage.path("skeleton_mask.png"))?;
    save_image(
        &overlay(&crop_img, &heat, 0.6),
        &stage.path("skeleton_overlay.png"),
    )?;
    write_json(
        &stage.path("skeleton_mask.json"),
        &serde_json::json!({
            "joint": geo.joint,
            "displacement": geo.displacement,
            "center": geo.center,
            "side": geo.side,
            "frame_index": view.frame_index,
        }),
    )?;
    let out = stage.commit()?;
    println!("heatmaps written to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    if common.deterministic {
        single_thread();
    }
    match &cli.cmd {
        Cmd::SynthGen { spec } => synth_gen(&common, spec.as_deref()),
        Cmd::Train {
            data,
            stages,
            resume,
            quiet,
        } => train(&common, data, *stages, resume.as_deref(), *quiet),
        Cmd::Eval {
            data,
            checkpoint,
            frame_fractions,
            sweep,
        } => eval(
            &common,
            data,
            checkpoint,
            frame_fractions.as_deref(),
            sweep.as_deref(),
        ),
        Cmd::Ablate {
            data,
            variants,
            sweep,
            quiet,
        } => ablate(&common, data, variants, sweep.as_deref(), *quiet),
        Cmd::ReportComplexity {
            checkpoint,
            frames,
            classes,
        } => report_complexity(&common, checkpoint.as_deref(), *frames, *classes),
        Cmd::VizAttention {
            data,
            checkpoint,
            sample,
        } => viz_attention(&common, data, checkpoint, sample),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg += &format!(": {s}");
                src = s.source();
            }
            eprintln!("mmff: error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
