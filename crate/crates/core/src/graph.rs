//! Directed cross-market similarity graph and peer-weight schemes.
//!
//! Pair scores are the equal-weighted mean of per-category cosine
//! similarities between residual encodings, averaged over the categories
//! both firms carry. Scores are converted to peer weights by within-target
//! percentile ranking followed by a logistic transform (kappa=50,
//! tau=0.99), or by the two baseline schemes (same-sector equal weights,
//! trailing-return correlation through the same logistic).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Panel, Universe};
use crate::types::{FirmIdx, Market};
use crate::whiten::ResidualEncodings;

pub const DEFAULT_KAPPA: f64 = 50.0;
pub const DEFAULT_TAU: f64 = 0.99;
pub const DEFAULT_CORR_WINDOW: usize = 252;
pub const DEFAULT_CORR_MIN_OVERLAP: usize = 120;

/// Cosine similarity; None for a zero-norm side.
fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na.sqrt() * nb.sqrt()))
    }
}

/// Mean cosine over the categories both firms carry. Returns the score and
/// the number of categories used; None when no category is shared (or every
/// shared one has a zero-norm vector).
pub fn pair_score(encodings: &ResidualEncodings, a: FirmIdx, b: FirmIdx) -> Option<(f64, u8)> {
    let mut sum = 0.0;
    let mut used = 0u8;
    for cat in &encodings.categories {
        if let (Some(va), Some(vb)) = (cat.vectors.get(&a), cat.vectors.get(&b)) {
            if let Some(c) = cosine(va, vb) {
                sum += c;
                used += 1;
            }
        }
    }
    (used > 0).then(|| (sum / used as f64, used))
}

/// Dense directed scores for one ordered market pair, row-major
/// [target][source]. Missing scores stored as NaN internally.
pub struct SimilarityGraph {
    pub source_market: Market,
    pub target_market: Market,
    pub targets: Vec<FirmIdx>,
    pub sources: Vec<FirmIdx>,
    scores: Vec<f64>,
    categories_used: Vec<u8>,
}

impl SimilarityGraph {
    pub fn score(&self, target_row: usize, source_col: usize) -> Option<f64> {
        let s = self.scores[target_row * self.sources.len() + source_col];
        s.is_finite().then_some(s)
    }

    pub fn categories_used(&self, target_row: usize, source_col: usize) -> u8 {
        self.categories_used[target_row * self.sources.len() + source_col]
    }

    /// Pairs a target shares fewer than 3 categories with are low-confidence.
    pub fn low_confidence_pairs(&self) -> usize {
        self.categories_used
            .iter()
            .filter(|&&c| c > 0 && c < 3)
            .count()
    }

    pub fn pair_count(&self) -> usize {
        self.targets.len() * self.sources.len()
    }
}

/// Score every (target, source) pair of an ordered market pair. When the
/// two markets coincide, the self pair is left missing: a firm is never its
/// own peer.
pub fn build_graph(
    universe: &Universe,
    encodings: &ResidualEncodings,
    source_market: Market,
    target_market: Market,
) -> Result<SimilarityGraph> {
    let encoded = encodings.encoded_firms();
    let targets: Vec<FirmIdx> = encoded
        .iter()
        .copied()
        .filter(|&f| universe.firm(f).market == target_market)
        .collect();
    let sources: Vec<FirmIdx> = encoded
        .iter()
        .copied()
        .filter(|&f| universe.firm(f).market == source_market)
        .collect();
    if targets.is_empty() {
        return Err(Error::EmptyMarketSide(target_market.code().to_string()));
    }
    if sources.is_empty() {
        return Err(Error::EmptyMarketSide(source_market.code().to_string()));
    }

    let cols = sources.len();
    let rows: Vec<(Vec<f64>, Vec<u8>)> = targets
        .par_iter()
        .map(|&t| {
            let mut score_row = vec![f64::NAN; cols];
            let mut used_row = vec![0u8; cols];
            for (j, &s) in sources.iter().enumerate() {
                if s == t {
                    continue;
                }
                if let Some((score, used)) = pair_score(encodings, t, s) {
                    score_row[j] = score;
                    used_row[j] = used;
                }
            }
            (score_row, used_row)
        })
        .collect();

    let mut scores = Vec::with_capacity(targets.len() * cols);
    let mut categories_used = Vec::with_capacity(targets.len() * cols);
    for (score_row, used_row) in rows {
        scores.extend(score_row);
        categories_used.extend(used_row);
    }

    Ok(SimilarityGraph {
        source_market,
        target_market,
        targets,
        sources,
        scores,
        categories_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    TextSigmoid,
    GicsEqual,
    CorrSigmoid,
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightScheme::TextSigmoid => "text",
            WeightScheme::GicsEqual => "gics",
            WeightScheme::CorrSigmoid => "corr",
        })
    }
}

/// Per-target peer weights for one ordered market pair.
#[derive(Debug, Clone)]
pub struct PeerWeights {
    pub scheme: WeightScheme,
    pub source_market: Market,
    pub target_market: Market,
    /// Per target: (source firm, weight) with weight > 0, sorted by source.
    pub weights: BTreeMap<FirmIdx, Vec<(FirmIdx, f64)>>,
    /// Targets with no covered peer.
    pub uncovered: Vec<FirmIdx>,
    /// Targets whose rank basis was degenerate (single scored peer).
    pub single_peer: Vec<FirmIdx>,
}

impl PeerWeights {
    pub fn peers(&self, target: FirmIdx) -> Option<&[(FirmIdx, f64)]> {
        self.weights.get(&target).map(|v| v.as_slice())
    }

    /// Deterministically permute target rows (testing aid: destroys the
    /// target-peer alignment while keeping the weight distribution).
    pub fn shuffle_targets(&self, seed: u64) -> PeerWeights {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<FirmIdx> = self.weights.keys().copied().collect();
        let mut permuted = targets.clone();
        permuted.shuffle(&mut rng);
        let weights = targets
            .iter()
            .zip(&permuted)
            .map(|(&orig, &perm)| (orig, self.weights[&perm].clone()))
            .collect();
        PeerWeights {
            scheme: self.scheme,
            source_market: self.source_market,
            target_market: self.target_market,
            weights,
            uncovered: self.uncovered.clone(),
            single_peer: self.single_peer.clone(),
        }
    }
}

/// The logistic peer-selection transform.
pub fn sigmoid_alpha(rank: f64, kappa: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (-kappa * (rank - tau)).exp())
}

/// Percentile ranks in (0,1]: (count of peers with score <= s)/N, tied
/// scores sharing the mean rank of their tie group.
pub fn percentile_ranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j + 1) as f64 / 2.0 / n as f64;
        for k in i..=j {
            ranks[order[k]] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

/// Sigmoid top-percentile weights from a similarity graph.
pub fn sigmoid_weights(graph: &SimilarityGraph, kappa: f64, tau: f64) -> PeerWeights {
    let mut weights = BTreeMap::new();
    let mut uncovered = Vec::new();
    let mut single_peer = Vec::new();
    for (row, &target) in graph.targets.iter().enumerate() {
        let mut scored: Vec<(usize, f64)> = Vec::new();
        for col in 0..graph.sources.len() {
            if let Some(s) = graph.score(row, col) {
                scored.push((col, s));
            }
        }
        if scored.is_empty() {
            uncovered.push(target);
            continue;
        }
        if scored.len() == 1 {
            single_peer.push(target);
        }
        let ranks = percentile_ranks(&scored.iter().map(|&(_, s)| s).collect::<Vec<_>>());
        let mut peers: Vec<(FirmIdx, f64)> = scored
            .iter()
            .zip(&ranks)
            .map(|(&(col, _), &rank)| (graph.sources[col], sigmoid_alpha(rank, kappa, tau)))
            .collect();
        peers.sort_by_key(|&(f, _)| f);
        weights.insert(target, peers);
    }
    PeerWeights {
        scheme: WeightScheme::TextSigmoid,
        source_market: graph.source_market,
        target_market: graph.target_market,
        weights,
        uncovered,
        single_peer,
    }
}

/// GICS baseline: weight 1 for every same-sector source firm; the factor's
/// weight normalization turns this into the sector equal-weighted mean.
pub fn gics_equal_weights(
    universe: &Universe,
    source_market: Market,
    target_market: Market,
) -> PeerWeights {
    let targets = universe.listed_market_firms(target_market);
    let sources = universe.listed_market_firms(source_market);
    let mut by_sector: BTreeMap<&str, Vec<FirmIdx>> = BTreeMap::new();
    for &s in &sources {
        by_sector
            .entry(universe.firm(s).sector.as_str())
            .or_default()
            .push(s);
    }
    let mut weights = BTreeMap::new();
    let mut uncovered = Vec::new();
    for &t in &targets {
        let sector = universe.firm(t).sector.as_str();
        let peers: Vec<(FirmIdx, f64)> = by_sector
            .get(sector)
            .map(|v| v.iter().filter(|&&s| s != t).map(|&s| (s, 1.0)).collect())
            .unwrap_or_default();
        if peers.is_empty() {
            uncovered.push(t);
        } else {
            weights.insert(t, peers);
        }
    }
    PeerWeights {
        scheme: WeightScheme::GicsEqual,
        source_market,
        target_market,
        weights,
        uncovered,
        single_peer: Vec::new(),
    }
}

/// Pearson correlation over the date intersection of two daily return
/// series; None when the overlap is below `min_overlap` or a side is
/// degenerate.
fn overlap_correlation(
    a: &[(NaiveDate, f64)],
    b: &[(NaiveDate, f64)],
    min_overlap: usize,
) -> Option<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut i = 0;
    let mut j = 0;
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                xs.push(a[i].1);
                ys.push(b[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    if xs.len() < min_overlap {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&x, &y) in xs.iter().zip(&ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Correlation baseline: trailing-window Pearson correlations per pair,
/// percentile-ranked per target, through the same sigmoid.
#[allow(clippy::too_many_arguments)]
pub fn corr_weights(
    panel: &Panel,
    source_market: Market,
    target_market: Market,
    window: usize,
    min_overlap: usize,
    as_of: NaiveDate,
    kappa: f64,
    tau: f64,
) -> PeerWeights {
    let universe = panel.universe();
    let targets = universe.listed_market_firms(target_market);
    let sources = universe.listed_market_firms(source_market);
    let source_series: Vec<(FirmIdx, Vec<(NaiveDate, f64)>)> = sources
        .iter()
        .map(|&s| (s, panel.trailing_daily_returns(s, as_of, window)))
        .collect();

    let per_target: Vec<(FirmIdx, Option<Vec<(FirmIdx, f64)>>, bool)> = targets
        .par_iter()
        .map(|&t| {
            let own = panel.trailing_daily_returns(t, as_of, window);
            let mut scored: Vec<(FirmIdx, f64)> = Vec::new();
            for (s, series) in &source_series {
                if *s == t {
                    continue;
                }
                if let Some(c) = overlap_correlation(&own, series, min_overlap) {
                    scored.push((*s, c));
                }
            }
            if scored.is_empty() {
                return (t, None, false);
            }
            let single = scored.len() == 1;
            let ranks = percentile_ranks(&scored.iter().map(|&(_, c)| c).collect::<Vec<_>>());
            let mut peers: Vec<(FirmIdx, f64)> = scored
                .iter()
                .zip(&ranks)
                .map(|(&(s, _), &rank)| (s, sigmoid_alpha(rank, kappa, tau)))
                .collect();
            peers.sort_by_key(|&(f, _)| f);
            (t, Some(peers), single)
        })
        .collect();

    let mut weights = BTreeMap::new();
    let mut uncovered = Vec::new();
    let mut single_peer = Vec::new();
    for (t, peers, single) in per_target {
        match peers {
            Some(p) => {
                if single {
                    single_peer.push(t);
                }
                weights.insert(t, p);
            }
            None => uncovered.push(t),
        }
    }
    PeerWeights {
        scheme: WeightScheme::CorrSigmoid,
        source_market,
        target_market,
        weights,
        uncovered,
        single_peer,
    }
}

/// The `k` most similar firms to `firm`, pooled across every market except
/// those in `exclude_markets` (typically the firm's home market), ranked by
/// descending pair score with stable firm order on ties. Flags when fewer
/// than `k` candidates exist.
pub fn top_k_neighbors(
    universe: &Universe,
    encodings: &ResidualEncodings,
    firm: FirmIdx,
    k: usize,
    exclude_markets: &[Market],
) -> (Vec<FirmIdx>, bool) {
    let mut scored: Vec<(FirmIdx, f64)> = Vec::new();
    for candidate in encodings.encoded_firms() {
        if candidate == firm {
            continue;
        }
        let market = universe.firm(candidate).market;
        if exclude_markets.contains(&market) {
            continue;
        }
        if let Some((score, _)) = pair_score(encodings, firm, candidate) {
            scored.push((candidate, score));
        }
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let short = scored.len() < k;
    (scored.into_iter().take(k).map(|(f, _)| f).collect(), short)
}

/// Write the graph as delimited text: target_id,source_id,score,alpha.
pub fn write_graph_csv(
    graph: &SimilarityGraph,
    weights: &PeerWeights,
    universe: &Universe,
    mut w: impl Write,
) -> std::io::Result<()> {
    writeln!(w, "target_id,source_id,score,alpha")?;
    for (row, &t) in graph.targets.iter().enumerate() {
        let alpha_of = |s: FirmIdx| -> f64 {
            weights
                .peers(t)
                .and_then(|ps| ps.iter().find(|&&(f, _)| f == s).map(|&(_, a)| a))
                .unwrap_or(0.0)
        };
        for (col, &s) in graph.sources.iter().enumerate() {
            if let Some(score) = graph.score(row, col) {
                writeln!(
                    w,
                    "{},{},{},{}",
                    universe.firm(t).firm_id,
                    universe.firm(s).firm_id,
                    score,
                    alpha_of(s)
                )?;
            }
        }
    }
    Ok(())
}

const GRAPH_MAGIC: &[u8; 4] = b"XFGB";
const GRAPH_VERSION: u32 = 1;

/// Compact binary graph form: header, firm-id tables, then the dense score
/// matrix (NaN = missing) and the categories-used bytes.
pub fn write_graph_binary(
    graph: &SimilarityGraph,
    universe: &Universe,
    mut w: impl Write,
) -> std::io::Result<()> {
    w.write_all(GRAPH_MAGIC)?;
    w.write_all(&GRAPH_VERSION.to_le_bytes())?;
    let write_market = |w: &mut dyn Write, m: Market| -> std::io::Result<()> {
        let code = m.code().as_bytes();
        w.write_all(&[code.len() as u8])?;
        w.write_all(code)
    };
    write_market(&mut w, graph.source_market)?;
    write_market(&mut w, graph.target_market)?;
    let write_ids = |w: &mut dyn Write, firms: &[FirmIdx]| -> std::io::Result<()> {
        w.write_all(&(firms.len() as u64).to_le_bytes())?;
        for &f in firms {
            let id = universe.firm(f).firm_id.as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id)?;
        }
        Ok(())
    };
    write_ids(&mut w, &graph.targets)?;
    write_ids(&mut w, &graph.sources)?;
    for &s in &graph.scores {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&graph.categories_used)?;
    Ok(())
}

/// Read back a binary graph, resolving firm ids through the universe.
pub fn read_graph_binary(universe: &Universe, mut r: impl Read) -> Result<SimilarityGraph> {
    let bad = |msg: &str| Error::Other(format!("bad graph artifact: {msg}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != GRAPH_MAGIC {
        return Err(bad("wrong magic"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
    if u32::from_le_bytes(u32buf) != GRAPH_VERSION {
        return Err(bad("unsupported version"));
    }
    let mut read_market = |r: &mut dyn Read| -> Result<Market> {
        let mut len = [0u8; 1];
        r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let mut code = vec![0u8; len[0] as usize];
        r.read_exact(&mut code).map_err(|_| bad("truncated"))?;
        std::str::from_utf8(&code)
            .map_err(|_| bad("market code not utf-8"))?
            .parse()
    };
    let source_market = read_market(&mut r)?;
    let target_market = read_market(&mut r)?;
    let mut read_ids = |r: &mut dyn Read| -> Result<Vec<FirmIdx>> {
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(|_| bad("truncated"))?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut out = Vec::with_capacity(count);
        let mut u32buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
            let len = u32::from_le_bytes(u32buf) as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id).map_err(|_| bad("truncated"))?;
            let id = String::from_utf8(id).map_err(|_| bad("firm id not utf-8"))?;
            let firm = universe.lookup(&id).ok_or_else(|| Error::UnknownFirm {
                firm: id,
                path: "graph artifact".into(),
            })?;
            out.push(firm);
        }
        Ok(out)
    };
    let targets = read_ids(&mut r)?;
    let sources = read_ids(&mut r)?;
    let cells = targets.len() * sources.len();
    let mut scores = Vec::with_capacity(cells);
    let mut f64buf = [0u8; 8];
    for _ in 0..cells {
        r.read_exact(&mut f64buf).map_err(|_| bad("truncated"))?;
        scores.push(f64::from_le_bytes(f64buf));
    }
    let mut categories_used = vec![0u8; cells];
    r.read_exact(&mut categories_used).map_err(|_| bad("truncated"))?;
    Ok(SimilarityGraph {
        source_market,
        target_market,
        targets,
        sources,
        scores,
        categories_used,
    })
}
