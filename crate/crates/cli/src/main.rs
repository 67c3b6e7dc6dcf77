use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use otr_core::eval::{stc_metrics, write_overlay, Report};
use otr_core::ingest::synth::{synth_generate, Scenario, SynthParams};
use otr_core::ingest::{load_sequence, parse_gt_file, Layout};
use otr_core::preimage::write_surfels;
use otr_core::selftest;
use otr_core::tracker::track_sequence;
use otr_core::TrackerConfig;

#[derive(Parser)]
#[command(name = "otr", version, about = "RGB-D object tracking by reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track a sequence and write report.json and boxes.txt.
    Track {
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long, default_value = "generic", value_parser = ["generic", "ptb", "stc"])]
        layout: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Also write one PNG per frame with predicted and ground-truth boxes.
        #[arg(long)]
        overlays: bool,
        /// Also write the final surfel model as text.
        #[arg(long)]
        export_surfels: bool,
    },
    /// Score a box file against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write the metrics as metrics.json into this directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render a synthetic scenario in the generic layout.
    Synth {
        #[arg(long, value_parser = ["translation", "rotation", "occlusion"])]
        scenario: String,
        #[arg(long, default_value_t = 120)]
        frames: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the built-in oracle suites.
    Selftest,
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("OTR_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().with_context(|| format!("OTR_THREADS={v:?} is not a count"))?;
    if n == 0 {
        bail!("OTR_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn track(
    sequence: &Path,
    layout: &str,
    config: Option<&Path>,
    output: &Path,
    overlays: bool,
    export_surfels: bool,
) -> Result<()> {
    let layout: Layout = layout.parse()?;
    let cfg = match config {
        Some(p) => TrackerConfig::load(p)?,
        None => TrackerConfig::default(),
    };
    let seq = load_sequence(sequence, layout).with_context(|| format!("loading {}", sequence.display()))?;
    let t = Instant::now();
    let (results, tracker) = track_sequence(&seq, &cfg)?;
    let elapsed = t.elapsed().as_secs_f64();
    let st = tracker.state();
    let report = Report::new(
        &seq.name,
        cfg.to_map(),
        &results,
        seq.gt.as_deref(),
        st.snapshots.len(),
        st.preimage.len(),
    )?;
    report.write(output)?;

    if overlays {
        let dir = output.join("overlays");
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, frame) in seq.iter().enumerate() {
            let frame = frame?;
            let gt = seq.gt.as_ref().and_then(|g| g[i]);
            write_overlay(&dir.join(format!("{i:08}.png")), &frame.rgb, results[i].bbox.as_ref(), gt.as_ref())?;
        }
    }
    if export_surfels {
        write_surfels(&st.preimage, &output.join("surfels.txt"))?;
    }

    let s = &report.summary;
    println!("sequence      {}", report.sequence);
    println!("frames        {} ({} absent)", s.frames, s.absent_frames);
    println!("snapshots     {}", s.snapshots);
    println!("surfels       {}", s.surfels);
    println!("speed         {:.2} fps", s.frames as f64 / elapsed);
    if let (Some(sr), Some(auc), Some(p20)) = (s.success_rate, s.auc, s.precision_at_20) {
        println!("success rate  {sr:.4}");
        println!("auc           {auc:.4}");
        println!("precision@20  {p20:.4}");
    }
    println!("output        {}", output.display());
    Ok(())
}

fn eval(pred: &Path, gt: &Path, output: Option<&Path>) -> Result<()> {
    let p = parse_gt_file(pred)?;
    let g = parse_gt_file(gt)?;
    let m = stc_metrics(&p, &g)?;
    println!("frames        {}", p.len());
    println!("success rate  {:.4}", m.success_rate);
    println!("auc           {:.4}", m.auc);
    println!("precision@20  {:.4}", m.precision_at_20);
    if let Some(dir) = output {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("metrics.json");
        std::fs::write(&path, m.to_json()? + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn synth(scenario: &str, frames: usize, seed: Option<u64>, output: &Path) -> Result<()> {
    let scenario: Scenario = scenario.parse()?;
    let mut params = SynthParams::for_scenario(scenario);
    if let Some(s) = seed {
        params.seed = s;
    }
    let s = synth_generate(scenario, frames, &params, output)?;
    let b = s.init_bbox();
    println!("wrote {} frames of {} to {}", s.frames.len(), scenario.name(), output.display());
    println!("initial box {:.2},{:.2},{:.2},{:.2}", b.x, b.y, b.w, b.h);
    Ok(())
}

fn run_selftest() -> Result<bool> {
    let mut ok = true;
    for r in selftest::run_all() {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("{tag}  {:<24} {} [{:.2} s]", r.name, r.detail, r.elapsed.as_secs_f64());
        ok &= r.passed;
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    init_threads()?;
    match cli.command {
        Command::Track {
            sequence,
            layout,
            config,
            output,
            overlays,
            export_surfels,
        } => track(&sequence, &layout, config.as_deref(), &output, overlays, export_surfels).map(|_| true),
        Command::Eval { pred, gt, output } => eval(&pred, &gt, output.as_deref()).map(|_| true),
        Command::Synth {
            scenario,
            frames,
            seed,
            output,
        } => synth(&scenario, frames, seed, &output).map(|_| true),
        Command::Selftest => run_selftest(),
    }
}

fn main() -> ExitCode {
    // clap prints usage and exits with status 2 on unknown flags.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
