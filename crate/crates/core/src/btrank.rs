//! Bradley–Terry scores from pairwise preference tallies.
//!
//! Under the model, method `i` is preferred over `j` with probability
//! `π_i / (π_i + π_j)`. Scores are reported as `ln π`, shifted to mean zero.

use std::collections::BTreeMap;
use std::path::Path;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Preference counts: `wins[i][j]` is how often method `i` was preferred
/// over method `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairwiseTally {
    methods: Vec<String>,
    wins: Vec<Vec<u64>>,
}

impl PairwiseTally {
    pub fn new(methods: Vec<String>, wins: Vec<Vec<u64>>) -> Result<Self> {
        let k = methods.len();
        if k == 0 {
            return Err(invalid!("a tally needs at least one method"));
        }
        let mut seen = BTreeMap::new();
        for (i, m) in methods.iter().enumerate() {
            if let Some(j) = seen.insert(m.as_str(), i) {
                return Err(invalid!("method `{m}` appears twice (rows {j} and {i})"));
            }
        }
        if wins.len() != k || wins.iter().any(|r| r.len() != k) {
            return Err(invalid!("win matrix must be {k}x{k}"));
        }
        for (i, row) in wins.iter().enumerate() {
            if row[i] != 0 {
                return Err(invalid!("method `{}` has {} wins against itself", methods[i], row[i]));
            }
        }
        Ok(PairwiseTally { methods, wins })
    }

    /// Builds a tally from `(winner, loser, count)` records; methods are
    /// listed in order of first appearance and repeated pairs accumulate.
    pub fn from_records<'a>(records: impl IntoIterator<Item = (&'a str, &'a str, u64)>) -> Result<Self> {
        let mut methods: Vec<String> = Vec::new();
        let mut index = BTreeMap::new();
        let mut counts = Vec::new();
        for (winner, loser, count) in records {
            if winner == loser {
                return Err(invalid!("method `{winner}` is recorded as beating itself"));
            }
            let mut id = |name: &str| {
                *index.entry(name.to_string()).or_insert_with(|| {
                    methods.push(name.to_string());
                    methods.len() - 1
                })
            };
            let (w, l) = (id(winner), id(loser));
            counts.push((w, l, count));
        }
        let k = methods.len();
        let mut wins = vec![vec![0u64; k]; k];
        for (w, l, c) in counts {
            wins[w][l] += c;
        }
        PairwiseTally::new(methods, wins)
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub fn wins(&self) -> &[Vec<u64>] {
        &self.wins
    }

    pub fn len(&self) -> usize {
        self.methods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.wins.iter().flatten().sum()
    }

    /// Parses CSV text in either layout:
    ///
    /// * matrix: header `method,<name>,...` followed by one row per method;
    /// * long form: header `winner,loser,count`.
    ///
    /// Lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| invalid!("tally header: {e}"))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| invalid!("tally: {e}"))?;
        let count = |s: &str, line: usize| -> Result<u64> {
            s.parse().map_err(|_| invalid!("line {line}: `{s}` is not a non-negative count"))
        };
        let line_of = |r: &csv::StringRecord| r.position().map_or(0, |p| p.line() as usize);

        if header == ["winner", "loser", "count"] {
            let mut records = Vec::with_capacity(rows.len());
            for r in &rows {
                if r.len() != 3 {
                    return Err(invalid!("line {}: expected winner,loser,count", line_of(r)));
                }
                records.push((&r[0], &r[1], count(&r[2], line_of(r))?));
            }
            return Self::from_records(records);
        }
        if header.first().map(String::as_str) != Some("method") {
            return Err(invalid!("tally header must be `winner,loser,count` or `method,<names...>`"));
        }
        let methods: Vec<String> = header[1..].to_vec();
        if rows.len() != methods.len() {
            return Err(invalid!("matrix tally lists {} methods but has {} rows", methods.len(), rows.len()));
        }
        let mut wins = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let line = line_of(r);
            if r.len() != methods.len() + 1 {
                return Err(invalid!("line {line}: expected {} fields, got {}", methods.len() + 1, r.len()));
            }
            if r[0] != methods[i] {
                return Err(invalid!("line {line}: row `{}` where `{}` was expected", &r[0], methods[i]));
            }
            wins.push(r.iter().skip(1).map(|s| count(s, line)).collect::<Result<Vec<_>>>()?);
        }
        Self::new(methods, wins)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidInput(msg) => Error::InvalidInput(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Matrix-layout CSV accepted by [`PairwiseTally::parse`].
    pub fn to_matrix_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header = std::iter::once("method").chain(self.methods.iter().map(String::as_str));
        w.write_record(header).expect("in-memory csv");
        for (m, row) in self.methods.iter().zip(&self.wins) {
            let fields = std::iter::once(m.clone()).chain(row.iter().map(u64::to_string));
            w.write_record(fields).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    /// Fails naming the methods whose maximum-likelihood score diverges:
    /// every method must be reachable from every other through "beat" edges.
    pub fn check_connected(&self) -> Result<()> {
        let k = self.len();
        let mut g = DiGraph::<usize, ()>::with_capacity(k, k * k);
        let nodes: Vec<_> = (0..k).map(|i| g.add_node(i)).collect();
        for i in 0..k {
            for j in 0..k {
                if self.wins[i][j] > 0 {
                    g.add_edge(nodes[i], nodes[j], ());
                }
            }
        }
        let components = tarjan_scc(&g);
        if components.len() <= 1 {
            return Ok(());
        }
        let name = |i: usize| self.methods[i].as_str();
        for i in 0..k {
            let won: u64 = self.wins[i].iter().sum();
            let lost: u64 = self.wins.iter().map(|r| r[i]).sum();
            if won == 0 && lost == 0 {
                return Err(Error::Degenerate(format!("method `{}` has no comparisons", name(i))));
            }
            if lost == 0 {
                return Err(Error::Degenerate(format!("method `{}` never loses; its score diverges", name(i))));
            }
            if won == 0 {
                return Err(Error::Degenerate(format!("method `{}` never wins; its score diverges", name(i))));
            }
        }
        // A group that is never beaten by anyone outside it.
        let mut component_of = vec![0; k];
        for (c, members) in components.iter().enumerate() {
            for n in members {
                component_of[g[*n]] = c;
            }
        }
        let unbeaten = (0..components.len())
            .find(|&c| (0..k).all(|i| component_of[i] == c || (0..k).all(|j| component_of[j] != c || self.wins[i][j] == 0)))
            .expect("a condensation has a source component");
        let mut group: Vec<&str> = components[unbeaten].iter().map(|n| name(g[*n])).collect();
        group.sort_unstable();
        Err(Error::Degenerate(format!(
            "methods {} are never beaten by the others; their scores diverge",
            group.iter().map(|m| format!("`{m}`")).collect::<Vec<_>>().join(", ")
        )))
    }
}

/// Log-scale scores, one per method, summing to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BTScores {
    pub methods: Vec<String>,
    pub scores: Vec<f64>,
    /// MM iterations used by the fit; zero for scores supplied directly.
    pub iterations: usize,
}

impl BTScores {
    /// Wraps externally supplied scores, shifting them to mean zero.
    pub fn from_scores(methods: Vec<String>, scores: Vec<f64>) -> Result<Self> {
        if methods.len() != scores.len() || methods.is_empty() {
            return Err(invalid!("{} methods but {} scores", methods.len(), scores.len()));
        }
        Ok(BTScores {
            methods,
            scores: center(&scores),
            iterations: 0,
        })
    }

    /// Reads `method,score` CSV records.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            method: String,
            score: f64,
        }
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| invalid!("{}: {e}", path.display()))?;
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<Row>, _>>()
            .map_err(|e| invalid!("{}: {e}", path.display()))?;
        Self::from_scores(rows.iter().map(|r| r.method.clone()).collect(), rows.iter().map(|r| r.score).collect())
    }

    /// `rank,method,score` CSV in descending order.
    pub fn to_ranked_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "method", "score"]).expect("in-memory csv");
        for (i, (m, s)) in rank(self).iter().enumerate() {
            w.write_record([(i + 1).to_string(), m.clone(), format!("{s:.6}")]).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
    }

    pub fn get(&self, method: &str) -> Option<f64> {
        self.methods.iter().position(|m| m == method).map(|i| self.scores[i])
    }

    /// Model probability that `i` is preferred over `j`.
    pub fn win_probability(&self, i: usize, j: usize) -> f64 {
        win_probability(self.scores[i], self.scores[j])
    }
}

pub fn win_probability(si: f64, sj: f64) -> f64 {
    1.0 / (1.0 + (sj - si).exp())
}

fn center(s: &[f64]) -> Vec<f64> {
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    s.iter().map(|v| v - mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop once no log score moves by more than this.
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 10_000,
            tol: 1e-9,
        }
    }
}

/// Log-likelihood of the tally under log scores `s`.
pub fn log_likelihood(tally: &PairwiseTally, s: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (i, row) in tally.wins.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            if w > 0 {
                // ln(π_i / (π_i + π_j)) = −ln(1 + e^{s_j − s_i})
                ll -= w as f64 * (s[j] - s[i]).exp().ln_1p();
            }
        }
    }
    ll
}

/// Maximum-likelihood scores by minorization–maximization: each round sets
/// `π_i = W_i / Σ_j n_ij / (π_i + π_j)`, where `W_i` counts the wins of `i`
/// and `n_ij` the comparisons between `i` and `j`.
pub fn fit(tally: &PairwiseTally, opts: &FitOptions) -> Result<BTScores> {
    tally.check_connected()?;
    let k = tally.len();
    let w = &tally.wins;
    let won: Vec<f64> = w.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let mut s = vec![0.0; k];
    let mut ll = log_likelihood(tally, &s);
    for iter in 1..=opts.max_iter {
        let pi: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let next: Vec<f64> = (0..k)
            .map(|i| {
                let denom: f64 = (0..k)
                    .filter(|&j| j != i)
                    .map(|j| (w[i][j] + w[j][i]) as f64 / (pi[i] + pi[j]))
                    .sum();
                (won[i] / denom).ln()
            })
            .collect();
        let next = center(&next);
        let next_ll = log_likelihood(tally, &next);
        assert!(
            next_ll >= ll - 1e-12 * ll.abs().max(1.0),
            "likelihood decreased from {ll} to {next_ll} at iteration {iter}"
        );
        let delta = s.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        s = next;
        ll = next_ll;
        if delta < opts.tol {
            return Ok(BTScores {
                methods: tally.methods.clone(),
                scores: s,
                iterations: iter,
            });
        }
    }
    Err(Error::Degenerate(format!(
        "scores did not settle within {} iterations (tol {})",
        opts.max_iter, opts.tol
    )))
}

/// Methods by descending score; equal scores are ordered by name.
pub fn rank(scores: &BTScores) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = scores.methods.iter().cloned().zip(scores.scores.iter().copied()).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn two_player_gap_is_log_odds() {
        let t = PairwiseTally::new(names(&["a", "b"]), vec![vec![0, 3], vec![1, 0]]).unwrap();
        let s = fit(&t, &FitOptions::default()).unwrap();
        assert!((s.scores[0] - s.scores[1] - 3f64.ln()).abs() < 1e-6);
        assert!(s.scores.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn symmetric_tally_scores_zero() {
        let w = vec![vec![0, 5, 2], vec![5, 0, 7], vec![2, 7, 0]];
        let s = fit(&PairwiseTally::new(names(&["x", "y", "z"]), w).unwrap(), &FitOptions::default()).unwrap();
        assert!(s.scores.iter().all(|v| v.abs() < 1e-9), "{:?}", s.scores);
    }

    #[test]
    fn unbeaten_method_is_named() {
        let t = PairwiseTally::new(names(&["a", "b", "c"]), vec![vec![0, 4, 2], vec![0, 0, 3], vec![0, 1, 0]]).unwrap();
        let err = fit(&t, &FitOptions::default()).unwrap_err().to_string();
        assert!(err.contains("`a`") && err.contains("never loses"), "{err}");
    }

    #[test]
    fn unbeaten_group_is_named() {
        // {a, b} beat each other and always beat {c, d}.
        let w = vec![vec![0, 2, 1, 1], vec![2, 0, 1, 1], vec![0, 0, 0, 3], vec![0, 0, 3, 0]];
        let err = fit(&PairwiseTally::new(names(&["a", "b", "c", "d"]), w).unwrap(), &FitOptions::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("`a`, `b`"), "{err}");
    }

    #[test]
    fn rank_breaks_ties_by_name() {
        let s = BTScores::from_scores(names(&["c", "a", "b"]), vec![0.0; 3]).unwrap();
        let order: Vec<_> = rank(&s).into_iter().map(|(m, _)| m).collect();
        assert_eq!(order, ["a", "b", "c"]);
        let single = BTScores::from_scores(names(&["only"]), vec![2.5]).unwrap();
        assert_eq!(rank(&single), vec![("only".to_string(), 0.0)]);
    }

    #[test]
    fn both_layouts_parse_to_the_same_tally() {
        let matrix = "# comment\nmethod,a,b\na,0,3\nb,1,0\n";
        let long = "winner,loser,count\na,b,2\nb,a,1\na,b,1\n";
        let m = PairwiseTally::parse(matrix).unwrap();
        assert_eq!(m, PairwiseTally::parse(long).unwrap());
        assert_eq!(PairwiseTally::parse(&m.to_matrix_csv()).unwrap(), m);
        assert!(PairwiseTally::parse("method,a,b\na,0,-1\nb,1,0\n").is_err());
        assert!(PairwiseTally::parse("method,a,b\na,2,1\nb,1,0\n").unwrap_err().to_string().contains("itself"));
    }
}
