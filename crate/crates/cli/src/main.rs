use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sabl::bucketing::{decode_box, encode_box, layout_from_box, SidePrediction, TargetDesign};
use sabl::evalkit::{
    displacement_csv, iou_bins_csv, iou_improvement_stats, nms, positive_count_csv, positive_count_stats,
    rescoring_nms, displacement_stats, Detection, DISPLACEMENT_BINS, IOU_BINS,
};
use sabl::gradsuite::{gradcheck_suite, GRAD_EPS, GRAD_TOLERANCE};
use sabl::ndmath::Checkpoint;
use sabl::synthbench::{
    compare, gen_scenes, refine_scenes, report_csv, tag, train, EvalConfig, Scene, SceneConfig, TrainConfig,
    TrainedHead, Variant,
};
use sabl::BBox;

#[derive(Parser, Debug)]
#[command(name = "sabl", version, about = "Side-aware boundary localization toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// TOML file with optional [scene], [train] and [eval] tables; flags win
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for scenes, initialization and noise [default: from config, else 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, written atomically [default: standard output]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Table {
    Bins,
    Counts,
}

/// Bucketing flags shared by several commands.
#[derive(Args, Debug, Serialize)]
struct Bucketing {
    /// Scale of the bucketed region [default: train.sigma, else 1.7]
    #[arg(long)]
    sigma: Option<f64>,
    /// Buckets per side [default: train.k, else 7]
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Cmd {
    /// Bucket targets of one proposal against one ground truth (JSON)
    Encode {
        /// Proposal as x1,y1,x2,y2
        #[arg(long, value_parser = parse_box)]
        proposal: BBox,
        /// Ground truth as x1,y1,x2,y2
        #[arg(long, value_parser = parse_box)]
        gt: BBox,
        #[command(flatten)]
        bucketing: Bucketing,
        /// Turn off ignoring the second-nearest bucket
        #[arg(long)]
        no_ignore: bool,
        /// Regress only the nearest bucket
        #[arg(long)]
        no_top2: bool,
    },
    /// Box from four side predictions: a JSON array of
    /// {"confidences": [...], "offsets": [...]} ordered left, right, top, down
    Decode {
        #[arg(long, value_parser = parse_box)]
        proposal: BBox,
        /// JSON file with the four side predictions
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        bucketing: Bucketing,
    },
    /// Synthetic scenes as JSON Lines
    GenScenes {
        /// Number of scenes
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Random stream to draw from
        #[arg(long, value_enum, default_value_t = Split::Eval)]
        split: Split,
    },
    /// Train one head; writes its checkpoint as JSON
    Train {
        /// SABL, BBOX_REG or BOUNDARY_REG [default: train.variant, else SABL]
        #[arg(long)]
        variant: Option<Variant>,
        /// [default: train.epochs, else 20]
        #[arg(long)]
        epochs: Option<usize>,
        /// Loss history CSV (epoch,cls,bucketing,reg,total)
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train and evaluate several variants on shared scenes
    Compare {
        /// Comma-separated variants
        #[arg(long, value_delimiter = ',', default_value = "SABL,BBOX_REG,BOUNDARY_REG")]
        variants: Vec<Variant>,
        /// [default: train.epochs, else 20]
        #[arg(long)]
        epochs: Option<usize>,
        /// [default: train.train_scenes, else 2000]
        #[arg(long)]
        train_scenes: Option<usize>,
        /// [default: eval.eval_scenes, else 500]
        #[arg(long)]
        eval_scenes: Option<usize>,
    },
    /// Raw vs bucketed left-boundary displacement statistics per IoU bin
    #[command(name = "analyze-fig5")]
    AnalyzeFig5 {
        /// Scenes as JSON Lines
        #[arg(long)]
        scenes: PathBuf,
        #[command(flatten)]
        bucketing: Bucketing,
    },
    /// IoU before/after refinement per proposal-IoU bin, and positive counts
    #[command(name = "analyze-fig6")]
    AnalyzeFig6 {
        /// Scenes as JSON Lines
        #[arg(long)]
        scenes: PathBuf,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Table emitted with --format csv
        #[arg(long, value_enum, default_value_t = Table::Bins)]
        table: Table,
    },
    /// Greedy NMS over a JSON array of {"bbox": [x1,y1,x2,y2], "score", "loc_confidence"}
    Nms {
        /// JSON file with the detections
        #[arg(long)]
        dets: PathBuf,
        /// Suppression IoU threshold
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        /// Rank by score * loc_confidence
        #[arg(long)]
        rescore: bool,
    },
    /// Finite-difference check of every op and head; fails if any relative
    /// error exceeds 1e-5
    Gradcheck {
        /// Number of consecutive seeds, starting at --seed
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn parse_box(s: &str) -> Result<BBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let a: [f64; 4] = v.try_into().map_err(|_| "expected x1,y1,x2,y2".to_string())?;
    BBox::try_from(a).map_err(|e| e.to_string())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    scene: SceneConfig,
    train: TrainConfig,
    eval: EvalConfig,
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<sabl::Error> for Failure {
    fn from(e: sabl::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn load_config(common: &Common) -> Result<FileConfig, Failure> {
    let mut cfg = match &common.config {
        None => FileConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(Failure::Usage)?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display())).map_err(Failure::Usage)?
        }
    };
    if let Some(s) = common.seed {
        cfg.scene.seed = s;
        cfg.train.seed = s;
    }
    Ok(cfg)
}

/// Writes through a temporary file in the target directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn emit(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn read_scenes(path: &Path) -> Result<Vec<Scene>, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::Usage)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| Scene::from_json_line(l).map_err(|e| usage(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::Usage)?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).map_err(Failure::Usage)
}

fn bucketing(b: &Bucketing, cfg: &mut FileConfig) -> (f64, usize) {
    if let Some(s) = b.sigma {
        cfg.train.sigma = s;
    }
    if let Some(k) = b.k {
        cfg.train.k = k;
    }
    (cfg.train.sigma, cfg.train.k)
}

fn json_only(format: Format, what: &str) -> Result<(), Failure> {
    if format == Format::Csv {
        return Err(usage(format!("{what} has no CSV output")));
    }
    Ok(())
}

fn echo(cli: &Cli, cfg: &FileConfig) {
    let v = serde_json::json!({ "command": &cli.cmd, "common": &cli.common, "resolved": cfg });
    eprintln!("config: {v}");
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.common)?;
    let fmt = cli.common.format;
    let out = &cli.common.out;
    // Fold command flags into the resolved config before echoing it.
    match &cli.cmd {
        Cmd::Encode { bucketing: b, .. } | Cmd::Decode { bucketing: b, .. } | Cmd::AnalyzeFig5 { bucketing: b, .. } => {
            bucketing(b, &mut cfg);
        }
        Cmd::Train { variant, epochs, .. } => {
            if let Some(v) = variant {
                cfg.train.variant = *v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
        }
        Cmd::Compare { epochs, train_scenes, eval_scenes, .. } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if let Some(n) = train_scenes {
                cfg.train.train_scenes = *n;
            }
            if let Some(n) = eval_scenes {
                cfg.eval.eval_scenes = *n;
            }
        }
        _ => {}
    }
    echo(cli, &cfg);
    let (sigma, k) = (cfg.train.sigma, cfg.train.k);
    match &cli.cmd {
        Cmd::Encode { proposal, gt, no_ignore, no_top2, .. } => {
            json_only(fmt, "encode")?;
            let design = TargetDesign { use_ignore: !no_ignore, use_top2: !no_top2 };
            let t = encode_box(proposal, gt, sigma, k, design).map_err(|e| usage(e.to_string()))?;
            emit(out, &json(&t)?)?;
        }
        Cmd::Decode { proposal, pred, .. } => {
            let preds: [SidePrediction; 4] = read_json(pred)?;
            let (xl, yl) = layout_from_box(proposal, sigma, k).map_err(|e| usage(e.to_string()))?;
            let d = decode_box(&preds, &xl, &yl).map_err(|e| usage(e.to_string()))?;
            let text = match fmt {
                Format::Json => json(&d)?,
                Format::Csv => {
                    let b = d.bbox;
                    format!("x1,y1,x2,y2,loc_confidence,degenerate\n{},{},{},{},{},{}\n", b.x1, b.y1, b.x2, b.y2, d.loc_confidence, d.degenerate)
                }
            };
            emit(out, &text)?;
        }
        Cmd::GenScenes { n, split } => {
            json_only(fmt, "gen-scenes")?;
            cfg.scene.validate().map_err(|e| usage(e.to_string()))?;
            let t = if *split == Split::Train { tag::TRAIN_SCENE } else { tag::EVAL_SCENE };
            let mut text = String::new();
            for s in gen_scenes(&cfg.scene, *n, t)? {
                text += &s.to_json_line()?;
                text.push('\n');
            }
            emit(out, &text)?;
        }
        Cmd::Train { history, .. } => {
            json_only(fmt, "train")?;
            cfg.train.validate().map_err(|e| usage(e.to_string()))?;
            let o = train(&cfg.train, &cfg.scene)?;
            if let Some(h) = history {
                let mut csv = format!("{}\n", sabl::losses::LossReport::CSV_HEADER);
                for (e, r) in o.history.iter().enumerate() {
                    csv += &r.csv_row(e);
                    csv.push('\n');
                }
                write_atomic(h, csv.as_bytes())?;
            }
            emit(out, &(o.head.checkpoint().to_json()? + "\n"))?;
        }
        Cmd::Compare { variants, .. } => {
            let vs: Vec<TrainConfig> = variants.iter().map(|v| TrainConfig { variant: *v, ..cfg.train.clone() }).collect();
            for v in &vs {
                v.validate().map_err(|e| usage(e.to_string()))?;
            }
            let r = compare(&vs, &cfg.scene, &cfg.eval)?;
            let text = match fmt {
                Format::Json => r.to_json()?,
                Format::Csv => report_csv(&r),
            };
            emit(out, &text)?;
        }
        Cmd::AnalyzeFig5 { scenes, .. } => {
            let scenes = read_scenes(scenes)?;
            let pairs: Vec<(BBox, BBox)> = scenes
                .iter()
                .flat_map(|s| s.proposals.iter().zip(&s.matches).filter_map(|(p, m)| m.matched().map(|g| (*p, s.gts[g]))))
                .collect();
            let r = displacement_stats(&pairs, sigma, k, &DISPLACEMENT_BINS).map_err(|e| usage(e.to_string()))?;
            let text = match fmt {
                Format::Json => json(&r)?,
                Format::Csv => displacement_csv(&r),
            };
            emit(out, &text)?;
        }
        Cmd::AnalyzeFig6 { scenes, checkpoint, table } => {
            let scenes = read_scenes(scenes)?;
            let ckpt: Checkpoint = read_json(checkpoint)?;
            let head = TrainedHead::from_checkpoint(&ckpt, &cfg.train).map_err(|e| usage(e.to_string()))?;
            let train_cfg = TrainConfig { variant: ckpt.kind.parse()?, ..cfg.train.clone() };
            let images = refine_scenes(&head, &train_cfg, &cfg.scene, &scenes)?;
            let bins = iou_improvement_stats(&images, &IOU_BINS)?;
            let counts = positive_count_stats(&images, &cfg.eval.count_thresholds)?;
            let text = match (fmt, table) {
                (Format::Json, _) => json(&serde_json::json!({ "iou_bins": bins, "positive_counts": counts }))?,
                (Format::Csv, Table::Bins) => iou_bins_csv(&bins),
                (Format::Csv, Table::Counts) => positive_count_csv(&counts),
            };
            emit(out, &text)?;
        }
        Cmd::Nms { dets, iou, rescore } => {
            if !(0.0..=1.0).contains(iou) {
                return Err(usage(format!("--iou must lie in [0, 1], got {iou}")));
            }
            let dets: Vec<Detection> = read_json(dets)?;
            for d in &dets {
                Detection::new(d.bbox, d.score, d.loc_confidence).map_err(|e| usage(e.to_string()))?;
            }
            let (keep, ranked) = if *rescore {
                rescoring_nms(&dets, *iou)
            } else {
                let keep = nms(&dets, *iou);
                let kept = keep.iter().map(|&i| dets[i]).collect();
                (keep, kept)
            };
            let text = match fmt {
                Format::Json => json(&serde_json::json!({ "keep": keep, "detections": ranked }))?,
                Format::Csv => {
                    let mut s = String::from("index,x1,y1,x2,y2,score\n");
                    for (i, d) in keep.iter().zip(&ranked) {
                        let b = d.bbox;
                        s += &format!("{i},{},{},{},{},{}\n", b.x1, b.y1, b.x2, b.y2, d.score);
                    }
                    s
                }
            };
            emit(out, &text)?;
        }
        Cmd::Gradcheck { seeds } => {
            let first = cfg.train.seed;
            if *seeds == 0 {
                return Err(usage("--seeds must be positive"));
            }
            let mut worst: Vec<sabl::head::GroupCheck> = Vec::new();
            for seed in first..first + seeds {
                for g in gradcheck_suite(seed, GRAD_EPS)? {
                    match worst.iter_mut().find(|w| w.name == g.name) {
                        Some(w) => {
                            w.max_rel_error = w.max_rel_error.max(g.max_rel_error);
                            w.checked += g.checked;
                            w.kink_skipped += g.kink_skipped;
                        }
                        None => worst.push(g),
                    }
                }
            }
            let text = match fmt {
                Format::Json => json(&worst)?,
                Format::Csv => {
                    let mut s = String::from("op,max_rel_error,checked,kink_skipped\n");
                    for g in &worst {
                        s += &format!("{},{:e},{},{}\n", g.name, g.max_rel_error, g.checked, g.kink_skipped);
                    }
                    s
                }
            };
            emit(out, &text)?;
            let failed: Vec<&str> = worst.iter().filter(|g| !(g.max_rel_error <= GRAD_TOLERANCE)).map(|g| g.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Runtime(anyhow::anyhow!("gradient check failed for {}", failed.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
