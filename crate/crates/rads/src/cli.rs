//! `rads` command line: synth, label, simulate, evaluate, report.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rads_core::detector::ToyDetector;
use rads_core::label::la_nms;
use rads_core::raster::Modality;

use crate::config::ScenarioConfig;
use crate::evaluation::{evaluate_model, EvalStream, ModelEval};
use crate::pipeline::{self, RunReport};
use crate::world::World;
use crate::{jsonl, pnm, report, state};

#[derive(Debug, Parser)]
#[command(name = "rads", version, about = "Rare-object detection: two-stage self-training on a simulated field site")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario config: a JSON file or "default".
    #[arg(long, default_value = "default")]
    pub config: String,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let mut cfg = ScenarioConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Rgb,
    Thermal,
    All,
}

impl ModalityArg {
    fn accepts(self, m: Modality) -> bool {
        match self {
            ModalityArg::Rgb => m == Modality::Rgb,
            ModalityArg::Thermal => m == Modality::Thermal,
            ModalityArg::All => true,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the stage-1 synthetic training set.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Composites per modality; defaults to the config's count.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value = "all")]
        modality: ModalityArg,
    },
    /// Pseudo-label field frames with LA-NMS.
    Label {
        #[command(flatten)]
        common: Common,
        /// Directory of PGM/PPM frames named by frame id.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Frame id to label (repeatable).
        #[arg(long = "frame")]
        frames: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Score threshold; defaults to the config's stage-2 threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Query the target label only (no hierarchy expansion).
        #[arg(long)]
        plain: bool,
    },
    /// Run the full edge/cloud loop.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Cloud host to connect to: run only the edge side over TCP.
        #[arg(long, requires = "port")]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Listen on --port: run only the cloud side over TCP.
        #[arg(long, requires = "port", conflicts_with = "host")]
        listen: bool,
    },
    /// Re-score the models of a run directory on its evaluation stream.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directory written by `simulate --out`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a run directory; with --out, redraw its CSVs and plots.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` and runs. Returns the process exit code: 0 on success,
/// 1 on a usage error, 2 on a runtime error.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common, out, count, modality } => synth(&common.load()?, &out, count, modality),
        Command::Label { common, input, frames, out, threshold, plain } => {
            label(&common.load()?, input.as_deref(), frames, &out, threshold, plain)
        }
        Command::Simulate { common, out, host, port, listen } => {
            let cfg = common.load()?;
            match (host, port, listen) {
                (Some(host), Some(port), _) => {
                    let stats = pipeline::run_edge_client(&cfg, &host, port, out.as_deref())?;
                    println!("edge done: {} messages sent, {} retransmitted", stats.data_sent, stats.retransmitted);
                    Ok(())
                }
                (None, Some(port), true) => {
                    let res = pipeline::serve_cloud(&cfg, port, out.as_deref())?;
                    print!("{}", report::summary(&res.report));
                    Ok(())
                }
                (None, Some(_), false) => bail!("--port needs --host (edge) or --listen (cloud)"),
                _ => {
                    let res = pipeline::simulate(&cfg, out.as_deref())?;
                    print!("{}", report::summary(&res.report));
                    Ok(())
                }
            }
        }
        Command::Evaluate { common, run, out } => evaluate(&common, &run, &out),
        Command::Report { run, out } => {
            let path = run.join("report.json");
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let rep: RunReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            print!("{}", report::summary(&rep));
            if let Some(out) = out {
                report::write_all(&out, &rep)?;
            }
            Ok(())
        }
    }
}

fn synth(cfg: &ScenarioConfig, out: &Path, count: Option<usize>, which: ModalityArg) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(n) = count {
        cfg.stage1.synthetic_images = n;
    }
    let world = World::new(cfg.world.clone(), cfg.seed);
    let hierarchy = cfg.labelling.load_hierarchy()?;
    let oracle = pipeline::oracle_for(&cfg)?;
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("labels"))?;
    let mut provenance = BufWriter::new(File::create(out.join("provenance.jsonl"))?);
    let mut total = 0;
    for m in pipeline::modalities(&world, &cfg).into_iter().filter(|&m| which.accepts(m)) {
        let tag = report::modality_name(m);
        for (i, s) in pipeline::synthesize(&cfg, &world, &hierarchy, &oracle, m)?.into_iter().enumerate() {
            let id = format!("syn-{tag}-{i}");
            pnm::save(&out.join("images").join(format!("{id}.{}", pnm::extension(&s.image))), &s.image)?;
            jsonl::write_lines(BufWriter::new(File::create(out.join("labels").join(format!("{id}.jsonl")))?), &s.labels)?;
            jsonl::write_lines(&mut provenance, [serde_json::json!({ "image": id, "provenance": s.provenance })])?;
            total += 1;
        }
    }
    println!("wrote {total} composites to {}", out.display());
    Ok(())
}

fn label(
    cfg: &ScenarioConfig,
    input: Option<&Path>,
    mut frames: Vec<String>,
    out: &Path,
    threshold: Option<f64>,
    plain: bool,
) -> Result<()> {
    let world = World::new(cfg.world.clone(), cfg.seed);
    let hierarchy = cfg.labelling.load_hierarchy()?;
    let oracle = pipeline::oracle_for(cfg)?;
    let mut params = cfg.labelling.stage2;
    if let Some(t) = threshold {
        if !(0.0..=1.0).contains(&t) {
            bail!("--threshold must be in [0, 1]");
        }
        params.score_threshold = t;
    }
    if plain {
        params = params.plain();
    }
    let mut images = Vec::new();
    if let Some(dir) = input {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.retain(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")));
        paths.sort();
        for p in paths {
            let id = p.file_stem().and_then(|s| s.to_str()).ok_or_else(|| anyhow!("bad file name {}", p.display()))?;
            frames.push(id.to_string());
            images.push((id.to_string(), pnm::load(&p)?));
        }
    }
    if frames.is_empty() {
        bail!("nothing to label: give --input or --frame");
    }
    std::fs::create_dir_all(out)?;
    let mut boxes = 0;
    for id in &frames {
        let key = world.parse_frame_id(id).ok_or_else(|| anyhow!("{id} is not a frame id of this scenario"))?;
        let scene = world.scene(key, &world.schedule(key.day));
        if let Some((_, img)) = images.iter().find(|(i, _)| i == id) {
            if img.dims() != world.dims() {
                bail!("{id}: image is {}x{}, scenario frames are {}x{}", img.width(), img.height(), world.dims().width, world.dims().height);
            }
        }
        let set = la_nms(id, &world.oracle_scene(&scene, world.dims()), &cfg.labelling.target, &hierarchy, &oracle, &params)?;
        boxes += set.boxes.len();
        jsonl::write_pseudo_labels(BufWriter::new(File::create(out.join(format!("{id}.jsonl")))?), &set)?;
    }
    println!("labelled {} frames, {boxes} boxes, into {}", frames.len(), out.display());
    Ok(())
}

fn evaluate(common: &Common, run: &Path, out: &Path) -> Result<()> {
    let mut cfg = if common.config == "default" {
        ScenarioConfig::load(&run.join("config.json").to_string_lossy())?
    } else {
        common.load()?
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let world = World::new(cfg.world.clone(), cfg.seed);
    let stream = EvalStream::generate(&cfg, &world)?;
    let models = state::load_models(&run.join("state"))?;
    let mut evals = Vec::with_capacity(models.len());
    for params in models.into_values() {
        evals.push(evaluate_model(&ToyDetector::new(params), &stream, &cfg)?);
    }
    let refs: Vec<&ModelEval> = evals.iter().collect();
    report::write_evals(out, &refs)?;
    println!("evaluated {} models into {}", evals.len(), out.display());
    Ok(())
}
