//! Offline commands: scenario generation, training and evaluation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use softtwin_core::checkpoint::{load_model, save_model};
use softtwin_core::scenario::{
    gen_scenario as generate, Mismatch, MismatchKind, ObjectKind, ScenarioSpec, ScriptKind,
    SequenceBundle,
};
use softtwin_core::training::{evaluate, train_stage12, write_loss_csv, TrainConfig};

/// Drag rate used when `--mismatch drag` comes without `--magnitude`, 1/s.
pub const DEFAULT_DRAG: f64 = 20.0;
/// Side acceleration used when `--mismatch side-force` comes without
/// `--magnitude`, m/s².
pub const DEFAULT_SIDE_FORCE: f64 = 2.0;

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = crate::parse_kind)]
    pub kind: ObjectKind,
    /// none, drag or side-force.
    #[arg(long, value_parser = crate::parse_mismatch, default_value = "none")]
    pub mismatch: MismatchKind,
    #[arg(long)]
    pub magnitude: Option<f64>,
    /// lift, drag, poke or shake; the kind's default when absent.
    #[arg(long, value_parser = crate::parse_script)]
    pub script: Option<ScriptKind>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Full scenario spec (TOML or JSON); the flags above override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_spec(path: &Path) -> Result<ScenarioSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text)?
    };
    Ok(spec)
}

pub fn gen_scenario(args: &GenArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => read_spec(path)?,
        None => ScenarioSpec::for_kind(args.kind),
    };
    if args.spec.is_some() && spec.kind != args.kind {
        bail!(
            "--kind {:?} disagrees with the kind in the --spec file {:?}",
            args.kind,
            spec.kind
        );
    }
    if let Some(script) = args.script {
        spec.script.kind = script;
    }
    if let Some(frames) = args.frames {
        spec.frames = frames;
        spec.script.duration = spec.script.duration.min(frames);
    }
    if args.mismatch != MismatchKind::None || args.magnitude.is_some() {
        let magnitude = args.magnitude.unwrap_or(match args.mismatch {
            MismatchKind::Drag => DEFAULT_DRAG,
            MismatchKind::SideForce => DEFAULT_SIDE_FORCE,
            MismatchKind::None => 0.0,
        });
        spec.mismatch = Mismatch {
            kind: args.mismatch,
            magnitude,
        };
    }
    let bundle = generate(&spec, args.seed)?;
    bundle.save(&args.out)?;
    println!(
        "wrote {}: {} particles, {} frames, {} tracks",
        args.out.display(),
        bundle.particle_count(),
        bundle.frame_count(),
        bundle.track_count()
    );
    Ok(())
}

pub fn train(bundle: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(path) => TrainConfig::from_toml(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => TrainConfig::default(),
    };
    let bundle = SequenceBundle::load(bundle)?;
    let outcome = train_stage12(&bundle, &cfg)?;
    save_model(&outcome.model, out)?;
    write_loss_csv(&out.join("loss.csv"), &outcome.log)?;
    let report = outcome.report.to_text(&outcome.model);
    let path = out.join("report.txt");
    std::fs::write(&path, &report).with_context(|| format!("writing {}", path.display()))?;
    print!("{report}");
    Ok(())
}

pub fn eval(bundle: &Path, params: &Path, report: &Path) -> Result<()> {
    let bundle = SequenceBundle::load(bundle)?;
    let model = load_model(params)?;
    let (metrics, _) = evaluate(&model, &bundle)?;
    metrics.write_csv(report)?;
    let frames = bundle.frame_count();
    println!(
        "mean Chamfer {:.4e} m, mean track error {:.4e} m over frames 1..{frames}",
        metrics.mean_chamfer(1, frames),
        metrics.mean_track_error(1, frames)
    );
    Ok(())
}
