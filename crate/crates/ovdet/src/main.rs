use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ovdet::checkpoint::Checkpoint;
use ovdet::config::RunConfig;
use ovdet::error::{format_err, CliError, Result};
use ovdet::formats::{self, pseudo_to_jsonl, write_new, Corpus, PseudoRecord, PSEUDO_FILE};
use ovdet::pipeline::{Ablation, Variant, METRICS};
use ovdet::reports::{self, Table};
use ovdet_core::gradcheck::{run_suite, DEFAULT_INSTANCES, TOLERANCE};
use ovdet_core::head::Stage;
use ovdet_core::train::{banks, evaluate, init_params, pseudo_label_scene, train_stage_with, TrainingData};

#[derive(Parser)]
#[command(name = "ovdet", version, about = "Open-vocabulary detection head on a synthetic world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing output files.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory written by `gen`; regenerated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world, datasets and text bank.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write `<stage>.ckpt` plus `<stage>_log.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        /// Allow a missing or out-of-order parent checkpoint.
        #[arg(long)]
        allow_stage_skip: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against every class and write `eval_<stage>.csv`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        from_checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate every variant over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump pseudo box labels for the classification scenes.
    Pseudolabel {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge CSV files with identical columns into `merged.csv`.
    Report {
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage {s}; expected base, rkd, pis, naive or wt"))
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(c.config.as_deref())?;
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn corpus(cfg: &RunConfig, data: &DataArgs) -> Result<Corpus> {
    match &data.data {
        Some(dir) => {
            let c = Corpus::load(dir)?;
            if c.world.config.seed != cfg.seed {
                eprintln!("note: data was generated with seed {}, using it", c.world.config.seed);
            }
            Ok(c)
        }
        None => Corpus::generate(&cfg.world_config()),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&formats::read(path)?).map_err(|e| format_err(path, e))
}

fn check_world(ck: &Checkpoint, corpus: &Corpus) -> Result<()> {
    let expected = corpus.world.fingerprint();
    if ck.world_fingerprint == expected {
        Ok(())
    } else {
        Err(CliError::WorldMismatch { expected, found: ck.world_fingerprint })
    }
}

fn print_report(label: &str, r: &ovdet_core::evalkit::EvalReport) {
    print!("{label}: AP50 novel {:.4} base {:.4} all {:.4}", r.ap_novel, r.ap_base, r.ap_all);
    if let Some(t) = r.top1 {
        print!("  top-1 novel {:.4} base {:.4}", t.novel, t.base);
    }
    println!();
}

fn gen(common: &Common, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    let corpus = Corpus::generate(&cfg.world_config())?;
    for path in corpus.write(out, common.force)? {
        println!("wrote {}", path.display());
    }
    let novel_boxes =
        corpus.data.det.iter().flat_map(|s| &s.annotations).filter(|a| !corpus.world.config.is_base(a.1)).count();
    println!(
        "world {:#018x}: {} det, {} cls, {} eval scenes; novel boxes in det: {novel_boxes}",
        corpus.world.fingerprint(),
        corpus.data.det.len(),
        corpus.data.cls.len(),
        corpus.data.eval.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn train(
    common: &Common,
    data: &DataArgs,
    stage: Stage,
    from: Option<&Path>,
    allow_skip: bool,
    out: &Path,
) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    formats::require_dir(out)?;
    let ck_path = out.join(format!("{}.ckpt", stage.name()));
    let log_path = out.join(format!("{}_log.csv", stage.name()));
    for p in [&ck_path, &log_path] {
        if p.exists() && !common.force {
            return Err(CliError::Exists { path: p.clone() });
        }
    }
    let corpus = corpus(&cfg, data)?;
    let world = &corpus.world;
    let tcfg = cfg.train_config();
    let start = match (stage.parent(), from) {
        (Some(parent), None) if !allow_skip => {
            return Err(CliError::MissingCheckpoint { stage: stage.name(), parent: parent.name() });
        }
        (None, Some(_)) if !allow_skip => {
            return Err(CliError::StageOrder { stage: stage.name(), expected: "a fresh start", found: "a checkpoint" });
        }
        (_, None) => init_params(world, &tcfg),
        (parent, Some(path)) => {
            let ck = load_checkpoint(path)?;
            check_world(&ck, &corpus)?;
            match parent {
                Some(p) if ck.stage() != p && !allow_skip => {
                    return Err(CliError::StageOrder {
                        stage: stage.name(),
                        expected: p.name(),
                        found: ck.stage().name(),
                    });
                }
                _ => ck.params,
            }
        }
    };
    let data = TrainingData::build(world, &corpus.bank, &corpus.data.det, &corpus.data.cls, &tcfg)?;
    let banks = banks(world, &corpus.bank)?;
    let clock = Instant::now();
    let mut wall = Vec::with_capacity(tcfg.epochs);
    let outcome = train_stage_with(start, stage, &data, &banks, &tcfg, &mut |e| {
        wall.push(clock.elapsed().as_secs_f64());
        println!(
            "epoch {:>2} lr {:.5} cls {:.4} l1 {:.4} irm {:.4} pms {:.4} total {:.4}",
            e.epoch, e.lr, e.terms.cls, e.terms.l1, e.terms.irm, e.terms.pms, e.total
        );
    })?;
    let ck = Checkpoint {
        params: outcome.params,
        world_seed: world.config.seed,
        world_fingerprint: world.fingerprint(),
        rng: outcome.rng,
    };
    write_new(&ck_path, &ck.to_bytes(), common.force)?;
    write_new(&log_path, &reports::log_csv(&outcome.log, &wall)?, common.force)?;
    println!("wrote {} and {}", ck_path.display(), log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(common: &Common, data: &DataArgs, from: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    formats::require_dir(out)?;
    let ck = load_checkpoint(from)?;
    let corpus = corpus(&cfg, data)?;
    check_world(&ck, &corpus)?;
    let report = evaluate(&corpus.world, &corpus.data.eval, &ck.params, &corpus.bank, &cfg.train_config())?;
    let path = out.join(format!("eval_{}.csv", ck.stage().name()));
    write_new(&path, &reports::eval_csv(&report)?, common.force)?;
    print_report(ck.stage().name(), &report);
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn ablate(common: &Common, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    formats::require_dir(out)?;
    let (table, seeds) = (out.join("ablation.csv"), out.join("ablation_seeds.csv"));
    for p in [&table, &seeds] {
        if p.exists() && !common.force {
            return Err(CliError::Exists { path: p.clone() });
        }
    }
    let ab = Ablation::run(&cfg)?;
    write_new(&table, &ab.table_csv()?, common.force)?;
    write_new(&seeds, &ab.per_seed_csv()?, common.force)?;
    println!("{:<12} {}", "variant", METRICS.map(|m| format!("{m:>22}")).join(""));
    for v in Variant::ALL {
        let cells = METRICS.map(|m| {
            let s = ab.spread(v, m);
            format!("{:>8.4} [{:.3},{:.3}]", s.mean, s.min, s.max)
        });
        println!("{:<12} {}", v.name(), cells.join(""));
    }
    let checks = ab.checks();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    println!("{} seeds in {:.1}s; wrote {} and {}", ab.seeds.len(), ab.seconds, table.display(), seeds.display());
    Ok(if checks.iter().all(|c| c.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn pseudolabel(common: &Common, data: &DataArgs, out: &Path) -> Result<ExitCode> {
    let cfg = load_config(common)?;
    formats::require_dir(out)?;
    let corpus = corpus(&cfg, data)?;
    let source = cfg.train_config().pseudo_proposals;
    let mut records = Vec::with_capacity(corpus.data.cls.len());
    let (mut boxes, mut correct) = (0usize, 0usize);
    for scene in &corpus.data.cls {
        let labels = pseudo_label_scene(&corpus.world, &corpus.bank, scene, source)?;
        for l in &labels {
            boxes += 1;
            let hit = scene
                .objects
                .iter()
                .any(|o| o.class_id == l.class_id && ovdet_core::geometry::iou(&o.bbox, &l.proposal.bbox) >= 0.5);
            correct += usize::from(hit);
        }
        records.push(PseudoRecord { scene_id: scene.id, labels });
    }
    let path = out.join(PSEUDO_FILE);
    write_new(&path, &pseudo_to_jsonl(&corpus.world, &records), common.force)?;
    println!("{boxes} pseudo boxes, {correct} cover their object at IoU >= 0.5; wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(common: &Common, out: Option<&Path>) -> Result<ExitCode> {
    let seed = common.seed.unwrap_or(RunConfig::load(common.config.as_deref())?.seed);
    let entries = run_suite(seed, DEFAULT_INSTANCES)?;
    let mut table =
        Table { header: ["loss", "instances", "max_rel_err", "passed"].map(String::from).to_vec(), rows: Vec::new() };
    for e in &entries {
        println!(
            "{:<14} {:>3} instances  max rel err {:.3e}  {}",
            e.name,
            e.instances,
            e.max_rel_err,
            if e.passed() { "ok" } else { "FAIL" }
        );
        table.rows.push(vec![
            e.name.into(),
            e.instances.to_string(),
            e.max_rel_err.to_string(),
            e.passed().to_string(),
        ]);
    }
    if let Some(dir) = out {
        formats::require_dir(dir)?;
        let path = dir.join("gradcheck.csv");
        write_new(&path, &table.to_csv()?, common.force)?;
        println!("wrote {}", path.display());
    }
    let ok = entries.iter().all(|e| e.passed());
    println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report(force: bool, out: &Path, inputs: &[PathBuf]) -> Result<ExitCode> {
    formats::require_dir(out)?;
    let mut tables = Vec::with_capacity(inputs.len());
    for p in inputs {
        let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        tables.push((name, Table::parse(p, &formats::read(p)?)?));
    }
    let merged = reports::merge(&tables)?;
    let path = out.join("merged.csv");
    write_new(&path, &merged.to_csv()?, force)?;
    println!("merged {} files, {} rows; wrote {}", tables.len(), merged.rows.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Gen { common, out } => gen(common, out),
        Command::Train { common, data, stage, from_checkpoint, allow_stage_skip, out } => {
            train(common, data, *stage, from_checkpoint.as_deref(), *allow_stage_skip, out)
        }
        Command::Eval { common, data, from_checkpoint, out } => eval(common, data, from_checkpoint, out),
        Command::Ablate { common, out } => ablate(common, out),
        Command::Pseudolabel { common, data, out } => pseudolabel(common, data, out),
        Command::Gradcheck { common, out } => gradcheck(common, out.as_deref()),
        Command::Report { force, out, inputs } => report(*force, out, inputs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
