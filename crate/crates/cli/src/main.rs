//! `dge`: scene generation, rendering, multi-view editing, fitting and method
//! comparison from the command line.
//!
//! Exit codes: 0 on success, 1 when an input fails validation (nothing is
//! written in that case), 2 when a run fails after validation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dge_core::fitter::{fit, partial_fit, render_views, FitConfig, GaussianMask};
use dge_core::geometry::{load_cameras, save_cameras, Camera};
use dge_core::harness::{generate_scene, run_on_scene, ExperimentOptions, Method, SceneSpec};
use dge_core::image::Image;
use dge_core::mveditor::{edit_independent, edit_sequence, EditSpec, MockEditor, SequenceOptions, ViewSequence};
use dge_core::ply::{load_mixture, save_mixture};
use dge_core::renderer::{render_mask, RenderConfig};
use dge_core::{Image64, Mixture64};

#[derive(Parser)]
#[command(name = "dge", version, about = "Multi-view consistent editing of Gaussian splat scenes", allow_negative_numbers = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its cameras.
    Gen(GenArgs),
    /// Render every camera of a scene.
    Render(RenderArgs),
    /// Edit the rendered views of a scene.
    Edit(EditArgs),
    /// Fit a scene to a directory of target images.
    Fit(FitArgs),
    /// Run editing methods side by side on one scene.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SceneInput {
    /// Mixture in PLY format.
    #[arg(long, default_value = "scene.ply")]
    scene: PathBuf,
    /// Camera set JSON.
    #[arg(long, default_value = "cams.json")]
    cams: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    /// Scene description JSON; built-in defaults when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "scene.ply")]
    out: PathBuf,
    #[arg(long, default_value = "cams.json")]
    cams: PathBuf,
    /// Overrides the scene seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    input: SceneInput,
    #[arg(long, default_value = "renders")]
    out: PathBuf,
    /// Also write per-view depth maps.
    #[arg(long)]
    depth: bool,
    /// Gaussian selection JSON; also writes per-view coverage masks.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Accepted for uniformity; rendering is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    input: SceneInput,
    /// Edit description JSON.
    #[arg(long, default_value = "edit.json")]
    spec: PathBuf,
    #[arg(long, default_value = "edited")]
    out: PathBuf,
    /// One key view per this many views.
    #[arg(long, default_value_t = 5)]
    key_density: usize,
    /// Epipolar band half-width in feature-cell strides.
    #[arg(long, default_value_t = 1.5)]
    band: f64,
    /// Match features without the epipolar constraint.
    #[arg(long)]
    no_epipolar: bool,
    /// Edit every view on its own.
    #[arg(long)]
    independent: bool,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    /// Seeds key-view selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: SceneInput,
    /// Directory of target images, one per camera in camera order.
    #[arg(long, default_value = "edited")]
    targets: PathBuf,
    /// Fit configuration JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "edited.ply")]
    out: PathBuf,
    /// Gaussian selection JSON for a partial fit.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Where to write the fit report JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Accepted for uniformity; fitting is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    input: SceneInput,
    #[arg(long, default_value = "edit.json")]
    spec: PathBuf,
    /// Comma-separated subset of direct, independent, idu.
    #[arg(long, default_value = "direct,independent,idu")]
    methods: String,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    key_density: usize,
    #[arg(long, default_value_t = 1.5)]
    band: f64,
    #[arg(long)]
    no_epipolar: bool,
    #[arg(long, default_value_t = 1.0)]
    strength: f64,
    /// Record wall-clock durations (makes summaries run-dependent).
    #[arg(long)]
    timing: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

type Outcome<T = ()> = Result<T, Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_scene(input: &SceneInput) -> Outcome<(Mixture64, Vec<Camera<f64>>)> {
    let mix = load_mixture::<f64>(&input.scene).map_err(|e| invalid(format!("{}: {e}", input.scene.display())))?;
    let cams = load_cameras::<f64>(&input.cams).map_err(|e| invalid(format!("{}: {e}", input.cams.display())))?;
    if cams.is_empty() {
        return Err(invalid(format!("{}: no cameras", input.cams.display())));
    }
    Ok((mix, cams))
}

fn load_selection(path: &Path, n: usize) -> Outcome<GaussianMask> {
    let mask: GaussianMask =
        serde_json::from_str(&read_text(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if mask.selected.len() != n {
        return Err(invalid(format!("{}: {} entries for {n} Gaussians", path.display(), mask.selected.len())));
    }
    Ok(mask)
}

fn load_edit_spec(path: &Path) -> Outcome<EditSpec> {
    EditSpec::from_json(&read_text(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_fit_config(path: Option<&Path>) -> Outcome<FitConfig> {
    match path {
        Some(p) => FitConfig::from_json(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display()))),
        None => Ok(FitConfig::default()),
    }
}

fn sequence_options(key_density: usize, band: f64, epipolar: bool, strength: f64, seed: u64) -> Outcome<SequenceOptions> {
    if key_density == 0 {
        return Err(invalid("--key-density must be at least 1"));
    }
    if !(band.is_finite() && band > 0.0) {
        return Err(invalid("--band must be positive"));
    }
    if !(strength.is_finite() && (0.0..=1.0).contains(&strength)) {
        return Err(invalid("--strength must lie in [0, 1]"));
    }
    Ok(SequenceOptions { key_density, band_strides: band, epipolar, seed, strength })
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn save_image(img: &Image64, dir: &Path, stem: &str) -> Outcome {
    img.save_png(&dir.join(format!("{stem}.png"))).map_err(runtime)?;
    img.save_dgeimg(&dir.join(format!("{stem}.dgeimg"))).map_err(runtime)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Target images in a directory: every `.dgeimg` (or, failing that, `.png`)
/// file except depth and mask maps, in file-name order.
fn load_targets(dir: &Path, count: usize) -> Outcome<Vec<Image64>> {
    let entries = fs::read_dir(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    files.sort();
    let usable = |ext: &str| -> Vec<PathBuf> {
        files
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == ext))
            .filter(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                !name.starts_with("depth_") && !name.starts_with("mask_")
            })
            .cloned()
            .collect()
    };
    let (picked, dgeimg) = match usable("dgeimg") {
        v if !v.is_empty() => (v, true),
        _ => (usable("png"), false),
    };
    if picked.len() != count {
        return Err(invalid(format!("{}: {} target images for {count} cameras", dir.display(), picked.len())));
    }
    picked
        .iter()
        .map(|p| {
            let img = if dgeimg { Image::load_dgeimg(p) } else { Image::load_png(p) };
            img.map_err(|e| invalid(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn gen(args: GenArgs) -> Outcome {
    let mut spec = match &args.spec {
        Some(p) => SceneSpec::from_json(&read_text(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let (mix, cams) = generate_scene::<f64>(&spec).map_err(invalid)?;
    save_mixture(&args.out, &mix).map_err(runtime)?;
    save_cameras(&args.cams, &cams).map_err(runtime)?;
    println!("{} Gaussians, {} cameras", mix.len(), cams.len());
    Ok(())
}

fn render(args: RenderArgs) -> Outcome {
    let (mix, cams) = load_scene(&args.input)?;
    let mask = args.mask.as_deref().map(|p| load_selection(p, mix.len())).transpose()?;
    let cfg = RenderConfig::default();
    let views = render_views(&mix, &cams, &cfg, 0).map_err(runtime)?;
    create_dir(&args.out)?;
    for v in &views {
        save_image(&v.image, &args.out, &format!("render_{:03}", v.index))?;
        if args.depth {
            save_image(&v.depth, &args.out, &format!("depth_{:03}", v.index))?;
        }
        if let Some(m) = &mask {
            let img = render_mask(&mix, &v.camera, &cfg, &m.selected).map_err(runtime)?;
            save_image(&img, &args.out, &format!("mask_{:03}", v.index))?;
        }
    }
    println!("rendered {} views", views.len());
    Ok(())
}

fn edit(args: EditArgs) -> Outcome {
    let (mix, cams) = load_scene(&args.input)?;
    let spec = load_edit_spec(&args.spec)?;
    let opts = sequence_options(args.key_density, args.band, !args.no_epipolar, args.strength, args.seed)?;
    let views = render_views(&mix, &cams, &RenderConfig::default(), 0).map_err(runtime)?;
    let editor = MockEditor::default();
    let images = if args.independent {
        edit_independent(&views, &spec, &editor, opts.strength).map_err(runtime)?
    } else {
        let seq = ViewSequence::new(views).map_err(runtime)?;
        let out = edit_sequence(&seq, &spec, &editor, &opts).map_err(runtime)?;
        if out.flagged() > 0 {
            eprintln!("warning: {} correspondences fell back outside the epipolar band", out.flagged());
        }
        out.images
    };
    create_dir(&args.out)?;
    for (i, img) in images.iter().enumerate() {
        save_image(img, &args.out, &format!("edited_{i:03}"))?;
    }
    println!("edited {} views", images.len());
    Ok(())
}

fn fit_cmd(args: FitArgs) -> Outcome {
    let (mix, cams) = load_scene(&args.input)?;
    let mut cfg = load_fit_config(args.config.as_deref())?;
    if let Some(p) = &args.mask {
        cfg.mask = Some(load_selection(p, mix.len())?);
    }
    if cfg.mask.as_ref().is_some_and(|m| m.selected.len() != mix.len()) {
        return Err(invalid("fit config mask does not match the scene"));
    }
    let targets = load_targets(&args.targets, cams.len())?;
    if let Some(t) = targets.iter().zip(&cams).find(|(t, c)| t.width != c.width() || t.height != c.height() || t.channels != 3) {
        return Err(invalid(format!("target of size {}x{}x{} does not match its camera", t.0.width, t.0.height, t.0.channels)));
    }
    let (out, report) = if cfg.mask.is_some() {
        partial_fit(&mix, &cams, &targets, &cfg)
    } else {
        fit(&mix, &cams, &targets, &cfg)
    }
    .map_err(runtime)?;
    save_mixture(&args.out, &out).map_err(runtime)?;
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    let mean = report.psnr.iter().sum::<f64>() / report.psnr.len().max(1) as f64;
    println!("fitted {} iterations, mean PSNR {mean:.2} dB", cfg.iterations);
    Ok(())
}

fn compare(args: CompareArgs) -> Outcome {
    let (mix, cams) = load_scene(&args.input)?;
    let spec = load_edit_spec(&args.spec)?;
    let methods = Method::parse_list(&args.methods).map_err(invalid)?;
    let mut cfg = load_fit_config(args.config.as_deref())?;
    cfg.timing |= args.timing;
    if cfg.mask.as_ref().is_some_and(|m| m.selected.len() != mix.len()) {
        return Err(invalid("fit config mask does not match the scene"));
    }
    let sequence = sequence_options(args.key_density, args.band, !args.no_epipolar, args.strength, args.seed)?;
    let opts = ExperimentOptions { sequence, out_dir: Some(args.out.clone()), ..Default::default() };
    let results = run_on_scene(mix, cams, &spec, &methods, &cfg, &opts).map_err(runtime)?;
    for r in &results {
        match &r.error {
            Some(e) => println!("{}: failed: {e}", r.method.name()),
            None => {
                let mean = r.psnr.iter().sum::<f64>() / r.psnr.len().max(1) as f64;
                println!(
                    "{}: consistency {:.4}, mean PSNR {mean:.2} dB, iterations to target {}",
                    r.method.name(),
                    r.consistency_error.unwrap_or(f64::NAN),
                    r.iterations_to_target.map_or("-".into(), |n| n.to_string())
                );
            }
        }
    }
    if results.iter().all(|r| r.error.is_some()) {
        return Err(runtime("every method failed"));
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors are invalid input; help and version exit cleanly.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Render(a) => render(a),
        Command::Edit(a) => edit(a),
        Command::Fit(a) => fit_cmd(a),
        Command::Compare(a) => compare(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
