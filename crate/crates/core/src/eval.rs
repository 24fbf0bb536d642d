//! Recall@k, paired condition comparisons and fusion-weight selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{QueryRecord, Subtype};
use crate::error::{Error, Result};
use crate::fusion::TOP_K;
use crate::judge::JudgeCondition;
use crate::stats::{bonferroni, sign_test};
use crate::trace::RetrievalTrace;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_ALPHA_GRID: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

/// `|gold ∩ top[..k]| / |gold|`.
pub fn recall_at_k<S: AsRef<str>>(top: &[S], gold: &BTreeSet<&str>, k: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::InvalidArgument("recall needs a non-empty gold set".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let hit: BTreeSet<&str> = top.iter().take(k).map(AsRef::as_ref).filter(|id| gold.contains(id)).collect();
    Ok(hit.len() as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub condition: JudgeCondition,
    pub subtype: Subtype,
    pub top5: Vec<String>,
    pub r_at_5: f64,
    pub errored: bool,
}

/// Pairs every query with its trace. A query without a trace is an error; a
/// failed trace scores 0 and is counted, never dropped.
pub fn score_traces(queries: &[QueryRecord], traces: &[RetrievalTrace], k: usize) -> Result<Vec<QueryResult>> {
    let by_id: BTreeMap<&str, &RetrievalTrace> = traces.iter().map(|t| (t.query_id.as_str(), t)).collect();
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !by_id.contains_key(q.id.as_str()))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTraces(missing));
    }
    queries
        .iter()
        .map(|q| {
            let t = by_id[q.id.as_str()];
            Ok(QueryResult {
                query_id: q.id.clone(),
                condition: t.condition,
                subtype: q.subtype,
                top5: t.top5().to_vec(),
                r_at_5: recall_at_k(t.top5(), &q.gold_set(), k)?,
                errored: !t.is_ok(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtypeRow {
    pub subtype: Subtype,
    pub n: usize,
    pub mean_r_at_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Condition expected to win.
    pub candidate: String,
    pub baseline: String,
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    /// One-sided `P[wins >= observed]` under the null; 1.0 when every pair ties.
    pub p_one_sided: f64,
    pub p_bonferroni: f64,
    pub ties_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub condition: String,
    pub n: usize,
    pub errored: usize,
    pub mean_r_at_5: f64,
    pub subtypes: Vec<SubtypeRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<Comparison>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn summarize(label: &str, results: &[QueryResult]) -> EvalReport {
    let mut groups: BTreeMap<Subtype, Vec<f64>> = BTreeMap::new();
    for r in results {
        groups.entry(r.subtype).or_default().push(r.r_at_5);
    }
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        condition: label.into(),
        n: results.len(),
        errored: results.iter().filter(|r| r.errored).count(),
        mean_r_at_5: mean(results.iter().map(|r| r.r_at_5)),
        subtypes: groups
            .into_iter()
            .map(|(subtype, v)| SubtypeRow {
                subtype,
                n: v.len(),
                mean_r_at_5: mean(v.into_iter()),
            })
            .collect(),
        comparisons: Vec::new(),
    }
}

pub fn evaluate_run(queries: &[QueryRecord], traces: &[RetrievalTrace], k: usize) -> Result<EvalReport> {
    let results = score_traces(queries, traces, k)?;
    let label = traces.first().map_or_else(String::new, |t| t.condition.to_string());
    Ok(summarize(&label, &results))
}

/// Per-query comparison of `x` (candidate) against `y` (baseline). A win is
/// `r@5_x > r@5_y`; ties are excluded from the sign test.
pub fn compare_conditions(x: &[QueryResult], y: &[QueryResult]) -> Result<Comparison> {
    let xs: BTreeMap<&str, &QueryResult> = x.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let ys: BTreeMap<&str, &QueryResult> = y.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let left_only: Vec<String> = xs.keys().filter(|k| !ys.contains_key(*k)).map(|k| k.to_string()).collect();
    let right_only: Vec<String> = ys.keys().filter(|k| !xs.contains_key(*k)).map(|k| k.to_string()).collect();
    if !left_only.is_empty() || !right_only.is_empty() {
        return Err(Error::IdMismatch { left_only, right_only });
    }
    let (mut wins, mut losses, mut ties) = (0u64, 0u64, 0u64);
    for (id, rx) in &xs {
        let ry = ys[id];
        if rx.r_at_5 > ry.r_at_5 {
            wins += 1;
        } else if rx.r_at_5 < ry.r_at_5 {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    let ties_only = wins + losses == 0;
    let p = if ties_only { 1.0 } else { sign_test(wins, losses)? };
    let label = |r: &[QueryResult]| r.first().map_or_else(String::new, |q| q.condition.to_string());
    Ok(Comparison {
        candidate: label(x),
        baseline: label(y),
        wins,
        losses,
        ties,
        p_one_sided: p,
        p_bonferroni: p,
        ties_only,
    })
}

/// Applies a Bonferroni correction for the family of `comparisons`.
pub fn adjust_family(comparisons: &mut [Comparison]) -> Result<()> {
    let m = comparisons.len();
    for c in comparisons.iter_mut() {
        c.p_bonferroni = bonferroni(c.p_one_sided, m)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub n: usize,
    pub mean_r_at_5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub best_alpha: f64,
    pub rows: Vec<AlphaRow>,
}

/// Re-fuses cached traces at every grid value and picks the best mean R@5;
/// ties go to the smaller alpha. Issues no model calls.
pub fn grid_search_alpha(queries: &[QueryRecord], traces: &[RetrievalTrace], grid: &[f64]) -> Result<AlphaSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("alpha grid is empty".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let by_id: BTreeMap<&str, &RetrievalTrace> = traces.iter().map(|t| (t.query_id.as_str(), t)).collect();
    let missing: Vec<String> = queries
        .iter()
        .filter(|q| !by_id.contains_key(q.id.as_str()))
        .map(|q| q.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTraces(missing));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &alpha in &grid {
        let mut recalls = Vec::with_capacity(queries.len());
        for q in queries {
            let t = by_id[q.id.as_str()];
            let top = if t.is_ok() { t.refuse(alpha)?.top5 } else { Vec::new() };
            recalls.push(recall_at_k(&top, &q.gold_set(), TOP_K)?);
        }
        rows.push(AlphaRow {
            alpha,
            n: recalls.len(),
            mean_r_at_5: mean(recalls.into_iter()),
        });
    }
    let best = rows
        .iter()
        .fold(&rows[0], |best, r| if r.mean_r_at_5 > best.mean_r_at_5 { r } else { best });
    Ok(AlphaSearch {
        best_alpha: best.alpha,
        rows,
    })
}

/// Seeded sample of `fraction` of the query ids, used as the tune split when
/// none is supplied.
pub fn sample_tune_split(ids: &[String], fraction: f64, seed: u64) -> BTreeSet<String> {
    let take = ((ids.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sorted: Vec<&String> = ids.iter().collect();
    sorted.sort();
    sorted.into_iter().cloned().choose_multiple(&mut rng, take).into_iter().collect()
}

/// Tune-split file: one query id per line, `#` comments allowed.
pub fn load_split(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Blind protocol guard: tuning and evaluation traces must not share a directory.
pub fn check_distinct_dirs(tune: &Path, eval: &Path) -> Result<()> {
    let dir = |p: &Path| -> Result<std::path::PathBuf> {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        parent.canonicalize().map_err(|e| Error::io(parent, e))
    };
    if dir(tune)? == dir(eval)? {
        return Err(Error::Config(format!(
            "blind evaluation needs separate trace directories ({} and {} share one)",
            tune.display(),
            eval.display()
        )));
    }
    Ok(())
}

pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "condition {}  n={}  errored={}", report.condition, report.n, report.errored);
    let _ = writeln!(out, "mean R@5  {:.4}", report.mean_r_at_5);
    let _ = writeln!(out, "\n{:<20} {:>6} {:>8}", "subtype", "n", "R@5");
    for row in &report.subtypes {
        let _ = writeln!(out, "{:<20} {:>6} {:>8.4}", row.subtype.as_str(), row.n, row.mean_r_at_5);
    }
    if !report.comparisons.is_empty() {
        let _ = writeln!(
            out,
            "\n{:<12} {:>6} {:>6} {:>6} {:>12} {:>12}",
            "candidate>base", "wins", "losses", "ties", "p(1-sided)", "p(bonf)"
        );
        for c in &report.comparisons {
            let flag = if c.ties_only { "  ties only" } else { "" };
            let _ = writeln!(
                out,
                "{:<12} {:>6} {:>6} {:>6} {:>12.3e} {:>12.3e}{flag}",
                format!("{}>{}", c.candidate, c.baseline),
                c.wins,
                c.losses,
                c.ties,
                c.p_one_sided,
                c.p_bonferroni
            );
        }
    }
    out
}

pub fn render_alpha_table(search: &AlphaSearch) -> String {
    let mut out = format!("{:>6} {:>6} {:>8}\n", "alpha", "n", "R@5");
    for r in &search.rows {
        let mark = if r.alpha == search.best_alpha { "  *" } else { "" };
        let _ = writeln!(out, "{:>6.2} {:>6} {:>8.4}{mark}", r.alpha, r.n, r.mean_r_at_5);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::JudgeVerdict;
    use crate::pipeline::{assemble_pool, PoolEntry, Source};
    use proptest::prelude::*;

    fn gold<'a>(ids: &[&'a str]) -> BTreeSet<&'a str> {
        ids.iter().copied().collect()
    }

    fn result(id: &str, r: f64, sub: Subtype) -> QueryResult {
        QueryResult {
            query_id: id.into(),
            condition: JudgeCondition::Tripartite,
            subtype: sub,
            top5: vec![],
            r_at_5: r,
            errored: false,
        }
    }

    #[test]
    fn recall_examples() {
        let g = gold(&["a", "b"]);
        assert_eq!(recall_at_k(&["x", "a", "b", "y", "z"], &g, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&["x", "a", "y"], &g, 5).unwrap(), 0.5);
        assert_eq!(recall_at_k(&["x", "y"], &g, 5).unwrap(), 0.0);
        assert_eq!(recall_at_k(&["x", "y", "z", "w", "v", "a"], &g, 5).unwrap(), 0.0);
        assert!(recall_at_k(&["a"], &BTreeSet::new(), 5).is_err());
    }

    #[test]
    fn summary_means_and_subtypes() {
        let rs = vec![
            result("1", 1.0, Subtype::Compositional),
            result("2", 0.5, Subtype::Compositional),
            result("3", 0.0, Subtype::Unknown),
        ];
        let rep = summarize("C", &rs[..2]);
        assert_eq!(rep.mean_r_at_5, 0.75);
        let rep = summarize("C", &rs);
        assert_eq!(rep.subtypes.len(), 2);
        assert_eq!(rep.subtypes[0].mean_r_at_5, 0.75);
        assert_eq!(rep.subtypes[1].subtype, Subtype::Unknown);
    }

    #[test]
    fn comparison_examples() {
        let y: Vec<_> = (0..6).map(|i| result(&i.to_string(), 0.5, Subtype::Unknown)).collect();
        let mut x = y.clone();
        for r in x.iter_mut().take(3) {
            r.r_at_5 = 1.0;
        }
        let c = compare_conditions(&x, &y).unwrap();
        assert_eq!((c.wins, c.losses, c.ties), (3, 0, 3));
        assert!((c.p_one_sided - 0.125).abs() < 1e-15);

        let c = compare_conditions(&y, &y).unwrap();
        assert!(c.ties_only);
        assert_eq!((c.wins, c.losses, c.ties, c.p_one_sided), (0, 0, 6, 1.0));

        // hand-counted: two wins, one loss, two ties
        let xs = [1.0, 1.0, 0.0, 0.5, 0.5];
        let ys = [0.5, 0.0, 0.5, 0.5, 0.5];
        let mk = |v: &[f64]| -> Vec<QueryResult> {
            v.iter().enumerate().map(|(i, &r)| result(&i.to_string(), r, Subtype::Unknown)).collect()
        };
        let c = compare_conditions(&mk(&xs), &mk(&ys)).unwrap();
        assert_eq!((c.wins, c.losses, c.ties), (2, 1, 2));
        assert!((c.p_one_sided - 0.5).abs() < 1e-15);

        let mut short = mk(&xs);
        short.pop();
        assert!(matches!(compare_conditions(&short, &mk(&ys)), Err(Error::IdMismatch { .. })));
    }

    #[test]
    fn bonferroni_over_family() {
        let mut cs = vec![
            Comparison {
                candidate: "C".into(),
                baseline: "B".into(),
                wins: 1,
                losses: 0,
                ties: 0,
                p_one_sided: 0.01,
                p_bonferroni: 0.01,
                ties_only: false,
            };
            4
        ];
        adjust_family(&mut cs).unwrap();
        assert!(cs.iter().all(|c| (c.p_bonferroni - 0.04).abs() < 1e-15));
    }

    #[test]
    fn tune_split_is_seeded_and_sized() {
        let ids: Vec<String> = (0..50).map(|i| format!("q{i}")).collect();
        let a = sample_tune_split(&ids, 0.2, 7);
        assert_eq!(a.len(), 10);
        assert_eq!(a, sample_tune_split(&ids, 0.2, 7));
        let mut shuffled = ids.clone();
        shuffled.reverse();
        assert_eq!(a, sample_tune_split(&shuffled, 0.2, 7));
    }

    #[test]
    fn distinct_dirs_are_enforced() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert!(check_distinct_dirs(&a.path().join("t.jsonl"), &b.path().join("t.jsonl")).is_ok());
        assert!(check_distinct_dirs(&a.path().join("x.jsonl"), &a.path().join("y.jsonl")).is_err());
    }

    proptest! {
        #[test]
        fn recall_matches_set_oracle_and_is_monotone(
            top in prop::collection::vec(0u8..12, 0..10),
            g in prop::collection::btree_set(0u8..12, 1..4),
            k in 1usize..10,
        ) {
            let top: Vec<String> = top.iter().map(|i| format!("p{i}")).collect();
            let gs: Vec<String> = g.iter().map(|i| format!("p{i}")).collect();
            let gold: BTreeSet<&str> = gs.iter().map(String::as_str).collect();
            let prefix: BTreeSet<&str> = top.iter().take(k).map(String::as_str).collect();
            let oracle = gold.intersection(&prefix).count() as f64 / gold.len() as f64;
            let got = recall_at_k(&top, &gold, k).unwrap();
            prop_assert_eq!(got, oracle);
            prop_assert!(recall_at_k(&top, &gold, k + 1).unwrap() >= got);
            let mut rev: Vec<String> = top.iter().take(k).cloned().collect();
            rev.reverse();
            prop_assert_eq!(recall_at_k(&rev, &gold, k).unwrap(), got);
        }

        #[test]
        fn comparison_is_antisymmetric(v in prop::collection::vec((0u8..3, 0u8..3), 1..30)) {
            let x: Vec<_> = v.iter().enumerate().map(|(i, p)| result(&i.to_string(), f64::from(p.0) / 2.0, Subtype::Unknown)).collect();
            let y: Vec<_> = v.iter().enumerate().map(|(i, p)| result(&i.to_string(), f64::from(p.1) / 2.0, Subtype::Unknown)).collect();
            let xy = compare_conditions(&x, &y).unwrap();
            let yx = compare_conditions(&y, &x).unwrap();
            prop_assert_eq!((xy.wins, xy.losses, xy.ties), (yx.losses, yx.wins, yx.ties));
            prop_assert_eq!(xy.wins + xy.losses + xy.ties, v.len() as u64);
        }
    }

    /// Twelve-candidate trace: four fixed leaders, the gold passage `g`, a
    /// competitor `x` and six fillers. `g` and `x` take the given judge
    /// scores and SVO percentile ranks (1..=12, distinct).
    fn boundary_trace(id: &str, judge_gx: (u8, u8), svo_rank_gx: (usize, usize)) -> RetrievalTrace {
        let mut ranks = (1..=12).filter(|r| *r != svo_rank_gx.0 && *r != svo_rank_gx.1);
        let mut members: Vec<(String, u8, usize)> = vec![
            ("g".into(), judge_gx.0, svo_rank_gx.0),
            ("x".into(), judge_gx.1, svo_rank_gx.1),
        ];
        for i in 0..4 {
            members.push((format!("lead{i}"), 10, ranks.next().unwrap()));
        }
        for i in 0..6 {
            members.push((format!("fill{i}"), 0, ranks.next().unwrap()));
        }
        let svo: Vec<PoolEntry> = members
            .iter()
            .map(|(id, _, r)| PoolEntry {
                passage_id: id.clone(),
                score: *r as f64 / 12.0,
                svo_score: Some(*r as f64 / 12.0),
                sources: BTreeSet::from([Source::Svo]),
                pool_rank: 0,
            })
            .collect();
        let mut t = RetrievalTrace::new(id, "q", JudgeCondition::Tripartite, "fixture");
        t.pool = Some(assemble_pool(&svo, &[], &[], 20).unwrap());
        t.judge = Some(JudgeVerdict {
            condition: JudgeCondition::Tripartite,
            scores: members.iter().map(|(id, j, _)| (id.clone(), *j)).collect(),
            raw_response: String::new(),
            warnings: vec![],
            bridge_slot_passage: None,
        });
        t.fusion = Some(t.refuse(0.1).unwrap());
        t
    }

    fn gold_query(id: &str) -> QueryRecord {
        QueryRecord {
            id: id.into(),
            question: "q".into(),
            gold_ids: vec!["g".into()],
            subtype: Subtype::Unknown,
        }
    }

    #[test]
    fn grid_search_picks_the_interior_optimum() {
        // g overtakes x once alpha > 1/12; x overtakes g once alpha > 1/8
        let traces = [boundary_trace("q1", (1, 2), (12, 1)), boundary_trace("q2", (2, 1), (1, 8))];
        let queries = [gold_query("q1"), gold_query("q2")];
        let search = grid_search_alpha(&queries, &traces, &DEFAULT_ALPHA_GRID).unwrap();
        let means: Vec<f64> = search.rows.iter().map(|r| r.mean_r_at_5).collect();
        assert_eq!(means, [0.5, 1.0, 0.5, 0.5]);
        assert_eq!(search.best_alpha, 0.10);
    }

    #[test]
    fn grid_search_ties_go_to_the_smallest_alpha() {
        let traces = [boundary_trace("q1", (1, 2), (12, 1)), boundary_trace("q2", (2, 1), (1, 8))];
        let queries = [gold_query("q1")];
        let search = grid_search_alpha(&queries, &traces[..1], &[0.2, 0.15, 0.10]).unwrap();
        assert!(search.rows.iter().all(|r| r.mean_r_at_5 == 1.0));
        assert_eq!(search.best_alpha, 0.10);
        assert!(matches!(grid_search_alpha(&queries, &[], &DEFAULT_ALPHA_GRID), Err(Error::MissingTraces(_))));
    }
}
