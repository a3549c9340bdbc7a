//! Training chains and the ablation harness.
//!
//! Each seed builds its own world, datasets and training data, then trains
//!
//! ```text
//! base ─┬─ rkd ─┬─ naive
//!       │       └─ wt
//!       └─ pis
//! init ─── rkd_scratch
//! base ─── rkd_rpn       (distillation on rpn_like proposals)
//! ```
//!
//! Seeds run in parallel; results are merged in seed order, so the table
//! does not depend on scheduling.

use std::time::Instant;

use ovdet_core::evalkit::EvalReport;
use ovdet_core::head::{HeadParams, Stage};
use ovdet_core::simworld::ProposalSource;
use ovdet_core::train::{banks, evaluate, init_params, train_stage, TrainConfig, TrainingData};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::formats::Corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Base,
    Rkd,
    Pis,
    Naive,
    Wt,
    RkdScratch,
    RkdRpn,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Variant::Base, Variant::Rkd, Variant::Pis, Variant::Naive, Variant::Wt, Variant::RkdScratch, Variant::RkdRpn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Rkd => "rkd",
            Variant::Pis => "pis",
            Variant::Naive => "naive",
            Variant::Wt => "wt",
            Variant::RkdScratch => "rkd_scratch",
            Variant::RkdRpn => "rkd_rpn",
        }
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub runs: Vec<VariantRun>,
    pub seconds: f64,
}

impl SeedRun {
    pub fn get(&self, v: Variant) -> &VariantRun {
        self.runs.iter().find(|r| r.variant == v).expect("every variant is trained")
    }
}

/// Trains and evaluates every variant for one seed.
pub fn run_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let cfg = cfg.clone().with_seed(seed);
    let corpus = Corpus::generate(&cfg.world_config())?;
    let world = &corpus.world;
    let tcfg = cfg.train_config();
    let banks = banks(world, &corpus.bank)?;
    let data = TrainingData::build(world, &corpus.bank, &corpus.data.det, &corpus.data.cls, &tcfg)?;
    let mut runs = Vec::with_capacity(Variant::ALL.len());
    let mut finish = |variant: Variant, out: ovdet_core::train::TrainOutcome| -> Result<HeadParams> {
        let report = evaluate(world, &corpus.data.eval, &out.params, &corpus.bank, &tcfg)?;
        let checkpoint = Checkpoint {
            params: out.params.clone(),
            world_seed: seed,
            world_fingerprint: world.fingerprint(),
            rng: out.rng,
        };
        runs.push(VariantRun { variant, checkpoint, report });
        Ok(out.params)
    };
    let train = |p: HeadParams, stage: Stage, d: &TrainingData, c: &TrainConfig| train_stage(p, stage, d, &banks, c);

    let init = init_params(world, &tcfg);
    let base = finish(Variant::Base, train(init.clone(), Stage::Base, &data, &tcfg)?)?;
    let rkd = finish(Variant::Rkd, train(base.clone(), Stage::Rkd, &data, &tcfg)?)?;
    finish(Variant::Pis, train(base.clone(), Stage::Pis, &data, &tcfg)?)?;
    finish(Variant::Naive, train(rkd.clone(), Stage::Naive, &data, &tcfg)?)?;
    finish(Variant::Wt, train(rkd, Stage::Wt, &data, &tcfg)?)?;
    finish(Variant::RkdScratch, train(init, Stage::Rkd, &data, &tcfg)?)?;
    let rcfg = TrainConfig { distill_proposals: ProposalSource::RpnLike, ..tcfg.clone() };
    let rdata = TrainingData::build(world, &corpus.bank, &corpus.data.det, &corpus.data.cls, &rcfg)?;
    finish(Variant::RkdRpn, train(base, Stage::Rkd, &rdata, &rcfg)?)?;
    Ok(SeedRun { seed, runs, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Self {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, min, max }
    }
}

pub const METRICS: [&str; 5] = ["ap_novel", "ap_base", "ap_all", "top1_novel", "top1_base"];

fn metric(report: &EvalReport, name: &str) -> f64 {
    let t = report.top1.unwrap_or_default();
    match name {
        "ap_novel" => report.ap_novel,
        "ap_base" => report.ap_base,
        "ap_all" => report.ap_all,
        "top1_novel" => t.novel,
        "top1_base" => t.base,
        _ => unreachable!("unknown metric {name}"),
    }
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub seeds: Vec<SeedRun>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Ablation {
    pub fn run(cfg: &RunConfig) -> Result<Self> {
        let start = Instant::now();
        let seeds: Vec<u64> = (0..cfg.ablate.seeds as u64).map(|i| cfg.seed + i).collect();
        let seeds = seeds.par_iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
        Ok(Self { seeds, seconds: start.elapsed().as_secs_f64() })
    }

    pub fn spread(&self, v: Variant, name: &str) -> Spread {
        let values: Vec<f64> = self.seeds.iter().map(|s| metric(&s.get(v).report, name)).collect();
        Spread::of(&values)
    }

    pub fn mean(&self, v: Variant, name: &str) -> f64 {
        self.spread(v, name).mean
    }

    /// Table with one row per variant and mean/min/max per metric.
    pub fn table_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec!["variant".to_string(), "seeds".to_string()];
        for m in METRICS {
            header.extend(["mean", "min", "max"].map(|s| format!("{m}_{s}")));
        }
        w.write_record(&header)?;
        for v in Variant::ALL {
            let mut row = vec![v.name().to_string(), self.seeds.len().to_string()];
            for m in METRICS {
                let s = self.spread(v, m);
                row.extend([s.mean, s.min, s.max].map(|x| x.to_string()));
            }
            w.write_record(&row)?;
        }
        Ok(w.into_inner().expect("in-memory writer"))
    }

    pub fn per_seed_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec!["seed", "variant"];
        header.extend(METRICS);
        w.write_record(&header)?;
        for s in &self.seeds {
            for r in &s.runs {
                let mut row = vec![s.seed.to_string(), r.variant.name().to_string()];
                row.extend(METRICS.map(|m| metric(&r.report, m).to_string()));
                w.write_record(&row)?;
            }
        }
        Ok(w.into_inner().expect("in-memory writer"))
    }

    /// The orderings the ablation is expected to show, on seed means.
    pub fn checks(&self) -> Vec<Check> {
        use Variant::*;
        let n = |v| self.mean(v, "ap_novel");
        let b = |v| self.mean(v, "ap_base");
        let t = |v| self.mean(v, "top1_novel");
        let mut out = Vec::new();
        let mut push = |name, passed, detail: String| out.push(Check { name, passed, detail });
        push("ap_novel base < rkd", n(Base) < n(Rkd), format!("{:.4} < {:.4}", n(Base), n(Rkd)));
        push("ap_novel base < pis", n(Base) < n(Pis), format!("{:.4} < {:.4}", n(Base), n(Pis)));
        push("ap_novel wt >= naive", n(Wt) >= n(Naive), format!("{:.4} >= {:.4}", n(Wt), n(Naive)));
        push("ap_novel wt >= base + 0.15", n(Wt) >= n(Base) + 0.15, format!("{:.4} >= {:.4} + 0.15", n(Wt), n(Base)));
        let gap = (b(Wt) - b(Base)).abs();
        push("ap_base |wt - base| <= 0.05", gap <= 0.05, format!("|{:.4} - {:.4}| = {gap:.4}", b(Wt), b(Base)));
        push(
            "top1_novel base < rkd < wt",
            t(Base) < t(Rkd) && t(Rkd) < t(Wt),
            format!("{:.4} < {:.4} < {:.4}", t(Base), t(Rkd), t(Wt)),
        );
        push("ap_base rkd_scratch < rkd", b(RkdScratch) < b(Rkd), format!("{:.4} < {:.4}", b(RkdScratch), b(Rkd)));
        push("ap_novel rkd_rpn <= rkd", n(RkdRpn) <= n(Rkd), format!("{:.4} <= {:.4}", n(RkdRpn), n(Rkd)));
        out
    }
}
