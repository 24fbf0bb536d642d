use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chainjudge_core::corpus::{ingest_corpus, write_corpus, write_queryset};
use chainjudge_core::eval::{
    adjust_family, check_distinct_dirs, compare_conditions, grid_search_alpha, load_split, render_alpha_table,
    render_report, sample_tune_split, score_traces, summarize, AlphaSearch, EvalReport, DEFAULT_ALPHA_GRID,
};
use chainjudge_core::fusion::TOP_K;
use chainjudge_core::mechanism::{
    diversity_report, flip_analysis, gap_report, proximity_report, run_bridge_substitution, substitution_table,
};
use chainjudge_core::runner::rejudge_batch;
use chainjudge_core::synth::{generate_world, DEFAULT_FAMILIES, SYNTH_DIM};
use chainjudge_core::trace::{read_traces, write_traces, TraceWriter};
use chainjudge_core::{Engine, JudgeCondition, QueryRecord, RetrievalTrace, RunConfig, SubstituteSource};
use clap::{Args, ValueEnum};
use serde::Serialize;

use crate::setup::{self, ConfigArgs};
use crate::Failure;

/// What a verb reports back to `main`.
pub enum Outcome {
    Clean,
    /// Some queries failed; the rest of the batch was written.
    Partial { errored: usize, total: usize },
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Passage JSONL (`id`, `title`, `text`).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Embedding cache; defaults to `<corpus stem>.emb.jsonl`.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

pub fn index(args: &IndexArgs, cfg_args: &ConfigArgs) -> Result<Outcome, Failure> {
    let cfg = cfg_args.resolve()?;
    let embedder = cfg_args.embedder(&cfg)?;
    let corpus = setup::embedded_corpus(&args.corpus, args.cache.as_deref(), embedder.as_ref(), args.batch)?;
    let cache = args.cache.clone().unwrap_or_else(|| setup::default_cache_path(&args.corpus));
    println!(
        "{} passages embedded (dim {}) in {}",
        corpus.len(),
        corpus.dim().unwrap_or(0),
        cache.display()
    );
    Ok(Outcome::Clean)
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Query JSONL (`id`, `question`, `gold_ids`, optional `subtype`).
    #[arg(long)]
    pub queries: PathBuf,
    /// Trace JSONL to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// A, B, C, A1, G or A5.
    #[arg(long)]
    pub condition: Option<JudgeCondition>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
}

pub fn run(args: &RunArgs, cfg_args: &ConfigArgs) -> Result<Outcome, Failure> {
    let mut cfg = cfg_args.resolve()?;
    if let Some(c) = args.condition {
        cfg.condition = c;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    cfg.validate()?;
    let embedder = cfg_args.embedder(&cfg)?;
    let chat = cfg_args.chat(&cfg)?;
    let corpus = setup::embedded_corpus(&args.corpus, args.cache.as_deref(), embedder.as_ref(), args.batch)?;
    let queries = setup::queries(&args.queries, Some(&corpus))?;
    let engine = Engine::new(&cfg, &corpus, embedder.as_ref(), chat.as_ref());
    let writer = TraceWriter::create(&args.out)?;
    let summary = engine.run_batch(&queries, |t| {
        if let Some(err) = &t.error {
            log::warn!("{}: {err}", t.query_id);
        }
        writer.append(&t)
    })?;
    writer.finish()?;
    println!(
        "condition {}: {} queries, {} errored -> {}",
        cfg.condition,
        summary.queries,
        summary.errored,
        args.out.display()
    );
    Ok(partial(summary.errored, summary.queries))
}

fn partial(errored: usize, total: usize) -> Outcome {
    if errored == 0 {
        Outcome::Clean
    } else {
        Outcome::Partial { errored, total }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Traces of the condition under test.
    #[arg(long)]
    pub traces: PathBuf,
    /// Baseline trace files; each is tested one-sided for `traces` beating it,
    /// with Bonferroni correction over all baselines.
    #[arg(long)]
    pub against: Vec<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> Result<Outcome, Failure> {
    let queries = setup::queries(&args.queries, None)?;
    let traces = read_traces(&args.traces)?;
    let baselines = args.against.iter().map(|p| read_traces(p)).collect::<Result<Vec<_>, _>>()?;
    let report = report_with_comparisons(&queries, &traces, &baselines)?;
    emit_report(&report, args.json.as_deref())?;
    Ok(partial(report.errored, report.n))
}

fn report_with_comparisons(
    queries: &[QueryRecord],
    candidate: &[RetrievalTrace],
    baselines: &[Vec<RetrievalTrace>],
) -> Result<EvalReport, Failure> {
    let results = score_traces(queries, candidate, TOP_K)?;
    let label = candidate.first().map_or_else(String::new, |t| t.condition.to_string());
    let mut report = summarize(&label, &results);
    for base in baselines {
        let base_results = score_traces(queries, base, TOP_K)?;
        report.comparisons.push(compare_conditions(&results, &base_results)?);
    }
    adjust_family(&mut report.comparisons)?;
    Ok(report)
}

fn emit_report(report: &EvalReport, json: Option<&Path>) -> Result<(), Failure> {
    print!("{}", render_report(report));
    if let Some(path) = json {
        setup::write_json(path, report)?;
    }
    Ok(())
}

/// Selects the tuning subset of a query set.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// File of tune-split query ids, one per line.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Fraction sampled as the tune split when no file is given.
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ALPHA_GRID)]
    pub grid: Vec<f64>,
}

impl SplitArgs {
    fn tune_ids(&self, queries: &[QueryRecord], seed: u64) -> Result<BTreeSet<String>, Failure> {
        let ids = match &self.split {
            Some(path) => load_split(path)?,
            None => {
                let all: Vec<String> = queries.iter().map(|q| q.id.clone()).collect();
                sample_tune_split(&all, self.fraction, seed)
            }
        };
        if ids.is_empty() {
            return Err(Failure::Config("tune split is empty".into()));
        }
        Ok(ids)
    }
}

#[derive(Debug, Serialize)]
struct TuneReport {
    tune_ids: Vec<String>,
    search: AlphaSearch,
    #[serde(skip_serializing_if = "Option::is_none")]
    held_out: Option<EvalReport>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub traces: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn tune_alpha(args: &TuneArgs, cfg_args: &ConfigArgs) -> Result<Outcome, Failure> {
    let cfg = cfg_args.resolve()?;
    let queries = setup::queries(&args.queries, None)?;
    let traces = read_traces(&args.traces)?;
    let tune = args.split.tune_ids(&queries, cfg.seed)?;
    let (tune_q, rest_q): (Vec<QueryRecord>, Vec<QueryRecord>) =
        queries.into_iter().partition(|q| tune.contains(&q.id));
    let search = grid_search_alpha(&tune_q, &traces, &args.split.grid)?;
    println!("tune split: {} queries", tune_q.len());
    print!("{}", render_alpha_table(&search));
    let held_out = if rest_q.is_empty() {
        None
    } else {
        let refused = refuse_all(&traces, search.best_alpha)?;
        let report = report_with_comparisons(&rest_q, &refused, &[])?;
        println!("\nheld-out queries at alpha {}:", search.best_alpha);
        print!("{}", render_report(&report));
        Some(report)
    };
    if let Some(path) = &args.json {
        let report = TuneReport {
            tune_ids: tune.into_iter().collect(),
            search,
            held_out,
        };
        setup::write_json(path, &report)?;
    }
    Ok(Outcome::Clean)
}

/// Re-fuses every successful trace at `alpha`; no model calls.
fn refuse_all(traces: &[RetrievalTrace], alpha: f64) -> Result<Vec<RetrievalTrace>, Failure> {
    traces
        .iter()
        .map(|t| {
            let mut t = t.clone();
            if t.is_ok() && t.fusion.is_some() {
                t.fusion = Some(t.refuse(alpha)?);
            }
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Args)]
pub struct BlindArgs {
    /// Queries of the dataset alpha is tuned on.
    #[arg(long)]
    pub tune_queries: PathBuf,
    #[arg(long)]
    pub tune_traces: PathBuf,
    /// Queries of the dataset alpha is applied to.
    #[arg(long)]
    pub eval_queries: PathBuf,
    /// Must live in a different directory from the tuning traces.
    #[arg(long)]
    pub eval_traces: PathBuf,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct BlindReport {
    alpha: f64,
    search: AlphaSearch,
    eval: EvalReport,
}

pub fn blind_eval(args: &BlindArgs, cfg_args: &ConfigArgs) -> Result<Outcome, Failure> {
    let cfg = cfg_args.resolve()?;
    check_distinct_dirs(&args.tune_traces, &args.eval_traces)?;
    let tune_all = setup::queries(&args.tune_queries, None)?;
    let tune = args.split.tune_ids(&tune_all, cfg.seed)?;
    let tune_q: Vec<QueryRecord> = tune_all.into_iter().filter(|q| tune.contains(&q.id)).collect();
    let search = grid_search_alpha(&tune_q, &read_traces(&args.tune_traces)?, &args.split.grid)?;
    let alpha = search.best_alpha;
    let eval_q = setup::queries(&args.eval_queries, None)?;
    let eval_traces = read_traces(&args.eval_traces)?;
    let refused = refuse_all(&eval_traces, alpha)?;
    let mut report = report_with_comparisons(&eval_q, &refused, &[eval_traces])?;
    for c in &mut report.comparisons {
        c.candidate = format!("alpha={alpha}");
        c.baseline = "stored".into();
    }
    println!("alpha {alpha} selected on {} tuning queries", tune_q.len());
    print!("{}", render_alpha_table(&search));
    println!();
    print!("{}", render_report(&report));
    if let Some(path) = &args.json {
        setup::write_json(path, &BlindReport { alpha, search, eval: report.clone() })?;
    }
    Ok(partial(report.errored, report.n))
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Traces whose pools are shared by every condition.
    #[arg(long)]
    pub traces: PathBuf,
    /// Receives `A.jsonl`, `B.jsonl`, `C.jsonl` and `report.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize)]
struct AblationReport {
    conditions: Vec<EvalReport>,
}

pub fn ablate(args: &AblateArgs, cfg_args: &ConfigArgs) -> Result<Outcome, Failure> {
    let cfg = cfg_args.resolve()?;
    let chat = cfg_args.chat(&cfg)?;
    let corpus = setup::corpus_text(&args.corpus)?;
    let queries = setup::queries(&args.queries, Some(&corpus))?;
    let shared = read_traces(&args.traces)?;

    let conditions = [JudgeCondition::SvoOnly, JudgeCondition::TwoWay, JudgeCondition::Tripartite];
    let mut runs = Vec::new();
    let mut errored = 0;
    for condition in conditions {
        let mut out = Vec::with_capacity(shared.len());
        let summary = rejudge_batch(&cfg, &corpus, chat.as_ref(), &shared, condition, &queries, |t| {
            out.push(t);
            Ok(())
        })?;
        errored = errored.max(summary.errored);
        write_traces(&args.out_dir.join(format!("{}.jsonl", condition.tag())), &out)?;
        runs.push(out);
    }
    let scored = runs
        .iter()
        .map(|r| score_traces(&queries, r, TOP_K))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports: Vec<EvalReport> = conditions
        .iter()
        .zip(&scored)
        .map(|(c, r)| summarize(c.tag(), r))
        .collect();
    let mut family = vec![
        compare_conditions(&scored[1], &scored[0])?,
        compare_conditions(&scored[2], &scored[1])?,
        compare_conditions(&scored[2], &scored[0])?,
    ];
    adjust_family(&mut family)?;
    reports[2].comparisons = family;
    for r in &reports {
        print!("{}", render_report(r));
        println!();
    }
    setup::write_json(&args.out_dir.join("report.json"), &AblationReport { conditions: reports })?;
    Ok(partial(errored, shared.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Experiment {
    /// Pool diversity against the B->C gain.
    E,
    /// Bridge/second-hop proximity against the B->C gain.
    F,
    /// Bridge-text substitution controls.
    G,
    /// Top-1 flip analysis.
    H,
    /// Chain-disambiguation gap per query.
    Gap,
}

#[derive(Debug, Args)]
pub struct MechArgs {
    #[arg(long, value_enum)]
    pub exp: Experiment,
    #[arg(long)]
    pub queries: PathBuf,
    /// Condition-C traces.
    #[arg(long)]
    pub c: PathBuf,
    /// Condition-B traces (E, F, H).
    #[arg(long)]
    pub b: Option<PathBuf>,
    /// Needed by every experiment except H.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Where G writes its substituted traces.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn need<'a>(value: &'a Option<PathBuf>, flag: &str, exp: Experiment) -> Result<&'a Path, Failure> {
    value
        .as_deref()
        .ok_or_else(|| Failure::Config(format!("--exp {exp:?} needs {flag}")))
}

pub fn mech(args: &MechArgs, cfg_args: &ConfigArgs) -> Result<Outcome, Failure> {
    let cfg = cfg_args.resolve()?;
    let queries = setup::queries(&args.queries, None)?;
    let traces_c = read_traces(&args.c)?;
    let traces_b = || -> Result<Vec<RetrievalTrace>, Failure> { Ok(read_traces(need(&args.b, "--b", args.exp)?)?) };
    let mut text = String::new();
    let json = match args.exp {
        Experiment::H => {
            let report = flip_analysis(&queries, &traces_b()?, &traces_c)?;
            let _ = writeln!(text, "{:<20} {:>5} {:>6} {:>10} {:>10} {:>10} {:>18}", "group", "n", "flips", "productive", "flip_rate", "flip_win", "delta(flip-noflip)");
            for r in &report.rows {
                let delta = r.delta_vs_no_flip.map_or_else(|| "-".into(), |d| format!("{d:+.4}"));
                let _ = writeln!(
                    text,
                    "{:<20} {:>5} {:>6} {:>10} {:>10.4} {:>10.4} {:>18}",
                    r.group, r.n, r.flips, r.productive, r.flip_rate, r.flip_win_pct, delta
                );
            }
            serde_json::to_value(&report)
        }
        Experiment::E => {
            let embedder = cfg_args.embedder(&cfg)?;
            let corpus = setup::embedded_corpus(need(&args.corpus, "--corpus", args.exp)?, args.cache.as_deref(), embedder.as_ref(), 64)?;
            let report = diversity_report(&queries, &traces_b()?, &traces_c, &corpus)?;
            let _ = writeln!(
                text,
                "pool diversity over {} queries: mean {:.4} min {:.4} max {:.4}; spearman with B->C delta {}",
                report.n,
                report.mean,
                report.min,
                report.max,
                fmt_rho(report.rho_with_delta)
            );
            serde_json::to_value(&report)
        }
        Experiment::F => {
            let embedder = cfg_args.embedder(&cfg)?;
            let corpus = setup::embedded_corpus(need(&args.corpus, "--corpus", args.exp)?, args.cache.as_deref(), embedder.as_ref(), 64)?;
            let report = proximity_report(&queries, &traces_b()?, &traces_c, &corpus, embedder.as_ref())?;
            let _ = writeln!(
                text,
                "bridge proximity over {} queries ({} skipped): spearman with B->C delta {}",
                report.n,
                report.skipped,
                fmt_rho(report.rho_with_delta)
            );
            serde_json::to_value(&report)
        }
        Experiment::Gap => {
            let embedder = cfg_args.embedder(&cfg)?;
            let corpus = setup::embedded_corpus(need(&args.corpus, "--corpus", args.exp)?, args.cache.as_deref(), embedder.as_ref(), 64)?;
            let rows = gap_report(&queries, &traces_c, &corpus, embedder.as_ref())?;
            let mean = rows.iter().map(|r| r.gap).sum::<f64>() / rows.len().max(1) as f64;
            let _ = writeln!(text, "chain gap over {} queries: mean {mean:+.4}", rows.len());
            serde_json::to_value(&rows)
        }
        Experiment::G => {
            let chat = cfg_args.chat(&cfg)?;
            let corpus = setup::corpus_text(need(&args.corpus, "--corpus", args.exp)?)?;
            let mut runs = vec![("C".to_string(), traces_c.clone())];
            for variant in [SubstituteSource::BridgePassage, SubstituteSource::SvoText, SubstituteSource::LowestSvoPool] {
                let out = run_bridge_substitution(
                    chat.as_ref(),
                    &corpus,
                    &queries,
                    &traces_c,
                    variant,
                    cfg.chat.max_input_tokens,
                    cfg.alpha,
                )?;
                let tag = JudgeCondition::BridgeSubstitute(variant).tag();
                if let Some(dir) = &args.out_dir {
                    write_traces(&dir.join(format!("{tag}.jsonl")), &out)?;
                }
                runs.push((tag.to_string(), out));
            }
            let rows = substitution_table(&queries, &runs)?;
            let _ = writeln!(text, "{:<10} {:<20} {:>6} {:>8}", "condition", "subtype", "n", "R@5");
            for r in &rows {
                let _ = writeln!(text, "{:<10} {:<20} {:>6} {:>8.4}", r.condition, r.subtype.as_str(), r.n, r.mean_r_at_5);
            }
            serde_json::to_value(&rows)
        }
    }
    .map_err(|e| Failure::Runtime(e.to_string()))?;
    print!("{text}");
    if let Some(path) = &args.json {
        setup::write_json(path, &json)?;
    }
    Ok(Outcome::Clean)
}

fn fmt_rho(rho: Option<f64>) -> String {
    rho.map_or_else(|| "undefined".into(), |r| format!("{r:+.4}"))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Receives `corpus.jsonl`, `queries.jsonl` and `config.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FAMILIES)]
    pub families: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn synth(args: &SynthArgs, cfg_args: &ConfigArgs) -> Result<Outcome, Failure> {
    let mut cfg = cfg_args.resolve()?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.families == 0 {
        return Err(Failure::Config("--families must be at least 1".into()));
    }
    let world = generate_world(args.families, cfg.seed);
    let (corpus, _) = ingest_corpus(world.passages, true)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Failure::Runtime(format!("{}: {e}", args.out_dir.display())))?;
    write_corpus(&args.out_dir.join("corpus.jsonl"), &corpus)?;
    write_queryset(&args.out_dir.join("queries.jsonl"), &world.queries)?;
    let config = RunConfig {
        mock_dim: SYNTH_DIM,
        ..cfg
    };
    setup::write_json(&args.out_dir.join("config.json"), &config)?;
    println!(
        "{} passages and {} queries written to {}",
        corpus.len(),
        world.queries.len(),
        args.out_dir.display()
    );
    Ok(Outcome::Clean)
}
