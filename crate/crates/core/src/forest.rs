//! Random forest over the nine association features.
//!
//! Splits minimise weighted Gini impurity. Candidate splits are compared with
//! exact integer arithmetic so that ties are real ties and the tie-break
//! (lowest feature, then lowest threshold) is reproducible.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use rand::Rng as _;
use thiserror::Error;

use crate::eval;
use crate::measures::N_FEATURES;
use crate::par;
use crate::seed::{self, Rng};
use crate::store::DrugFamily;

pub type Features = [f64; N_FEATURES];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForestError {
    #[error("training data has only one class")]
    SingleClassTraining,
    #[error("{rows} training rows is fewer than the {needed} required")]
    TooFewRows { rows: usize, needed: usize },
    #[error("mtry {0} is outside 1..={max}", max = N_FEATURES)]
    InvalidMtry(usize),
    #[error("no cross-validation fold contains both classes")]
    NoScorableFold,
    #[error("model line {line}: {detail}")]
    ModelFormat { line: usize, detail: String },
}

/// A labelled (drug family, event) pair with its features.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRow {
    pub family: DrugFamily,
    pub event_code: String,
    pub x: Features,
    pub label: bool,
}

/// Labelled rows in canonical (family, event code) order, so results never
/// depend on the order rows were supplied in.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSet {
    rows: Vec<TrainingRow>,
}

impl TrainingSet {
    pub fn new(mut rows: Vec<TrainingRow>) -> Self {
        rows.sort_by(|a, b| (a.family, &a.event_code).cmp(&(b.family, &b.event_code)));
        Self { rows }
    }

    pub fn rows(&self) -> &[TrainingRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.rows.iter().filter(|r| r.label).count()
    }

    pub fn families(&self) -> BTreeSet<DrugFamily> {
        self.rows.iter().map(|r| r.family).collect()
    }

    fn check_classes(&self) -> Result<(), ForestError> {
        let p = self.positives();
        if p == 0 || p == self.len() {
            return Err(ForestError::SingleClassTraining);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    /// Rows with `x[feature] <= threshold` go left. `feature` is 0-based.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Fraction of the node's training rows that are ADRs.
    Leaf { fraction: f64 },
}

/// A binary tree stored as a node list; node 0 is the root and children
/// always come after their parent.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict(&self, x: &Features) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { fraction } => return fraction,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    /// The root split as (1-based feature, threshold), or `None` for a stump.
    pub fn root_split(&self) -> Option<(usize, f64)> {
        match self.nodes[0] {
            Node::Split {
                feature, threshold, ..
            } => Some((feature + 1, threshold)),
            Node::Leaf { .. } => None,
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree has no nodes".into());
        }
        let mut parents = vec![0u32; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            match *n {
                Node::Leaf { fraction } if !(0.0..=1.0).contains(&fraction) => {
                    return Err(format!("node {i}: leaf fraction {fraction} outside [0,1]"));
                }
                Node::Split {
                    feature,
                    left,
                    right,
                    ..
                } => {
                    if feature >= N_FEATURES {
                        return Err(format!("node {i}: feature {} out of range", feature + 1));
                    }
                    for c in [left, right] {
                        if c <= i || c >= self.nodes.len() {
                            return Err(format!("node {i}: bad child {c}"));
                        }
                        parents[c] += 1;
                    }
                }
                Node::Leaf { .. } => {}
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err("nodes do not form a single tree".into());
        }
        Ok(())
    }
}

/// Threshold between two consecutive distinct values `a < b`, always
/// satisfying `a <= t < b`.
pub fn midpoint(a: f64, b: f64) -> f64 {
    let mut t = (a + b) / 2.0;
    if !t.is_finite() {
        t = a / 2.0 + b / 2.0;
    }
    if t >= a && t < b {
        t
    } else {
        a
    }
}

/// Score of a partition, `(aL²+bL²)/nL + (aR²+bR²)/nR`, kept as an exact
/// fraction. Larger means lower weighted Gini impurity.
#[derive(Debug, Clone, Copy)]
struct Purity {
    num: u128,
    den: u128,
}

impl Purity {
    fn of(groups: &[(u64, u64)]) -> Self {
        let mut p = Purity { num: 0, den: 1 };
        for &(pos, neg) in groups {
            let n = u128::from(pos + neg);
            let q = u128::from(pos * pos + neg * neg);
            p = Purity {
                num: p.num * n + q * p.den,
                den: p.den * n,
            };
        }
        p
    }

    fn cmp(&self, o: &Self) -> Ordering {
        (self.num * o.den).cmp(&(o.num * self.den))
    }
}

struct Grower<'a> {
    x: &'a [Features],
    y: &'a [bool],
    mtry: usize,
    min_leaf: usize,
    rng: Rng,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let pos = rows.iter().filter(|&&r| self.y[r]).count();
        self.nodes.push(Node::Leaf {
            fraction: pos as f64 / rows.len() as f64,
        });
        self.nodes.len() - 1
    }

    /// Best split of `rows` over the sampled features: (feature, threshold).
    fn best_split(&mut self, rows: &mut [usize], pos: u64) -> Option<(usize, f64)> {
        let n = rows.len() as u64;
        let mut features = index::sample(&mut self.rng, N_FEATURES, self.mtry).into_vec();
        features.sort_unstable();
        let parent = Purity::of(&[(pos, n - pos)]);
        let mut best: Option<(Purity, usize, f64)> = None;
        for f in features {
            rows.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left_pos = 0u64;
            for i in 0..rows.len() - 1 {
                if self.y[rows[i]] {
                    left_pos += 1;
                }
                let (a, b) = (self.x[rows[i]][f], self.x[rows[i + 1]][f]);
                if a == b {
                    continue;
                }
                let nl = i as u64 + 1;
                if (nl as usize) < self.min_leaf || ((n - nl) as usize) < self.min_leaf {
                    continue;
                }
                let s = Purity::of(&[
                    (left_pos, nl - left_pos),
                    (pos - left_pos, n - nl - (pos - left_pos)),
                ]);
                if s.cmp(&parent) != Ordering::Greater {
                    continue;
                }
                if best
                    .as_ref()
                    .is_none_or(|(b, _, _)| s.cmp(b) == Ordering::Greater)
                {
                    best = Some((s, f, midpoint(a, b)));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, rows: &mut [usize]) -> usize {
        let pos = rows.iter().filter(|&&r| self.y[r]).count();
        if pos == 0 || pos == rows.len() || rows.len() < 2 * self.min_leaf {
            return self.leaf(rows);
        }
        let Some((feature, threshold)) = self.best_split(rows, pos as u64) else {
            return self.leaf(rows);
        };
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { fraction: 0.0 });
        // Stable partition keeps the recursion independent of sort history.
        let (mut l, mut r): (Vec<usize>, Vec<usize>) =
            rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
        l.sort_unstable();
        r.sort_unstable();
        let left = self.grow(&mut l);
        let right = self.grow(&mut r);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

/// Grows one unpruned tree on `x`/`y` (a bootstrap sample, duplicates
/// included), sampling `mtry` features at every node.
pub fn train_tree(
    x: &[Features],
    y: &[bool],
    mtry: usize,
    sub_seed: u64,
    min_leaf: usize,
) -> Result<DecisionTree, ForestError> {
    if !(1..=N_FEATURES).contains(&mtry) {
        return Err(ForestError::InvalidMtry(mtry));
    }
    if x.is_empty() || x.len() != y.len() {
        return Err(ForestError::TooFewRows {
            rows: x.len().min(y.len()),
            needed: 1,
        });
    }
    let mut g = Grower {
        x,
        y,
        mtry,
        min_leaf: min_leaf.max(1),
        rng: seed::rng(sub_seed),
        nodes: Vec::new(),
    };
    let mut rows: Vec<usize> = (0..x.len()).collect();
    g.grow(&mut rows);
    Ok(DecisionTree { nodes: g.nodes })
}

/// Cross-validated AUC of one `mtry` candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub mtry: usize,
    /// `None` when no fold could be scored.
    pub mean_auc: Option<f64>,
    pub fold_aucs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub mtry: usize,
    pub n_trees: usize,
    pub min_leaf: usize,
    pub seed: u64,
    /// Cross-validation results that chose `mtry`, if it was tuned.
    pub cv: Vec<CandidateScore>,
}

pub const DEFAULT_TREES: usize = 500;

/// Bags `n_trees` trees, each on its own bootstrap drawn from a per-tree
/// sub-seed.
pub fn train_forest(
    training: &TrainingSet,
    mtry: usize,
    n_trees: usize,
    seed: u64,
    min_leaf: usize,
) -> Result<Forest, ForestError> {
    if !(1..=N_FEATURES).contains(&mtry) {
        return Err(ForestError::InvalidMtry(mtry));
    }
    training.check_classes()?;
    if n_trees == 0 {
        return Err(ForestError::TooFewRows { rows: 0, needed: 1 });
    }
    let n = training.len();
    let trees = par::map_range(n_trees, |t| {
        let sub = seed::derive_labeled(seed, "tree", &[t as u64]);
        let mut rng = seed::rng(seed::derive_labeled(sub, "bootstrap", &[]));
        let (x, y): (Vec<Features>, Vec<bool>) = (0..n)
            .map(|_| {
                let r = &training.rows[rng.gen_range(0..n)];
                (r.x, r.label)
            })
            .unzip();
        train_tree(&x, &y, mtry, sub, min_leaf)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(Forest {
        trees,
        mtry,
        n_trees,
        min_leaf,
        seed,
        cv: Vec::new(),
    })
}

impl Forest {
    /// Mean leaf ADR fraction over all trees.
    pub fn predict_proba(&self, x: &Features) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    pub fn predict_many(&self, xs: &[Features]) -> Vec<f64> {
        par::map(xs, |x| self.predict_proba(x))
    }

    pub fn cv_auc(&self) -> Option<f64> {
        self.cv
            .iter()
            .find(|c| c.mtry == self.mtry)
            .and_then(|c| c.mean_auc)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_HEADER}");
        let _ = writeln!(s, "mtry {}", self.mtry);
        let _ = writeln!(s, "n_trees {}", self.n_trees);
        let _ = writeln!(s, "min_leaf {}", self.min_leaf);
        let _ = writeln!(s, "seed {}", self.seed);
        for c in &self.cv {
            let auc = c.mean_auc.map_or("NA".to_string(), |a| a.to_string());
            let folds: Vec<String> = c.fold_aucs.iter().map(f64::to_string).collect();
            let _ = writeln!(s, "cv {} {} {}", c.mtry, auc, folds.join(" "));
        }
        for (t, tree) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {t} {}", tree.nodes.len());
            for (i, n) in tree.nodes.iter().enumerate() {
                let _ = match n {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        writeln!(
                            s,
                            "node {t} {i} split {} {threshold} {left} {right}",
                            feature + 1
                        )
                    }
                    Node::Leaf { fraction } => writeln!(s, "node {t} {i} leaf {fraction}"),
                };
            }
        }
        s.push_str("end\n");
        // `cv` lines with no folds end in a trailing space; normalise.
        s.lines().map(str::trim_end).collect::<Vec<_>>().join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Forest, ForestError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        let err = |line: usize, detail: String| ForestError::ModelFormat { line, detail };
        fn num<T: std::str::FromStr>(
            line: usize,
            tok: Option<&str>,
            what: &str,
        ) -> Result<T, ForestError> {
            tok.and_then(|t| t.parse().ok())
                .ok_or_else(|| ForestError::ModelFormat {
                    line,
                    detail: format!("expected {what}"),
                })
        }
        match lines.next() {
            Some((_, MODEL_HEADER)) => {}
            Some((l, other)) => return Err(err(l, format!("unsupported header '{other}'"))),
            None => return Err(err(1, "empty model".into())),
        }
        let mut header = |key: &str| -> Result<u64, ForestError> {
            let (l, line) = lines
                .next()
                .ok_or_else(|| err(0, format!("missing {key}")))?;
            let mut tok = line.split(' ');
            if tok.next() != Some(key) {
                return Err(err(l, format!("expected '{key}'")));
            }
            num(l, tok.next(), key)
        };
        let mtry = header("mtry")? as usize;
        let n_trees = header("n_trees")? as usize;
        let min_leaf = header("min_leaf")? as usize;
        let seed = header("seed")?;
        if !(1..=N_FEATURES).contains(&mtry) {
            return Err(ForestError::InvalidMtry(mtry));
        }

        let mut cv = Vec::new();
        let mut trees: Vec<DecisionTree> = Vec::new();
        let mut expected_nodes = 0usize;
        let mut ended = false;
        for (l, line) in lines {
            if ended {
                return Err(err(l, "content after 'end'".into()));
            }
            let mut tok = line.split(' ');
            match tok.next() {
                Some("cv") if trees.is_empty() => {
                    let m: usize = num(l, tok.next(), "mtry")?;
                    let mean_auc = match tok.next() {
                        Some("NA") => None,
                        t => Some(num(l, t, "mean AUC")?),
                    };
                    let fold_aucs = tok
                        .map(|t| num(l, Some(t), "fold AUC"))
                        .collect::<Result<_, _>>()?;
                    cv.push(CandidateScore {
                        mtry: m,
                        mean_auc,
                        fold_aucs,
                    });
                }
                Some("tree") => {
                    if let Some(last) = trees.last() {
                        if last.nodes.len() != expected_nodes {
                            return Err(err(l, "previous tree is incomplete".into()));
                        }
                    }
                    let id: usize = num(l, tok.next(), "tree id")?;
                    if id != trees.len() {
                        return Err(err(l, format!("expected tree {}", trees.len())));
                    }
                    expected_nodes = num(l, tok.next(), "node count")?;
                    trees.push(DecisionTree {
                        nodes: Vec::with_capacity(expected_nodes),
                    });
                }
                Some("node") => {
                    let t: usize = num(l, tok.next(), "tree id")?;
                    let i: usize = num(l, tok.next(), "node id")?;
                    if t + 1 != trees.len() {
                        return Err(err(l, "node outside its tree".into()));
                    }
                    let tree = trees.last_mut().expect("checked above");
                    if i != tree.nodes.len() || i >= expected_nodes {
                        return Err(err(l, format!("unexpected node id {i}")));
                    }
                    let node = match tok.next() {
                        Some("split") => {
                            let feature: usize = num(l, tok.next(), "feature")?;
                            if !(1..=N_FEATURES).contains(&feature) {
                                return Err(err(l, format!("feature {feature} out of range")));
                            }
                            Node::Split {
                                feature: feature - 1,
                                threshold: num(l, tok.next(), "threshold")?,
                                left: num(l, tok.next(), "left child")?,
                                right: num(l, tok.next(), "right child")?,
                            }
                        }
                        Some("leaf") => Node::Leaf {
                            fraction: num(l, tok.next(), "leaf fraction")?,
                        },
                        _ => return Err(err(l, "node kind must be 'split' or 'leaf'".into())),
                    };
                    if tok.next().is_some() {
                        return Err(err(l, "trailing fields".into()));
                    }
                    tree.nodes.push(node);
                }
                Some("end") => ended = true,
                _ => return Err(err(l, format!("unrecognised record '{line}'"))),
            }
        }
        if !ended {
            return Err(err(text.lines().count(), "missing 'end'".into()));
        }
        if trees
            .last()
            .is_some_and(|t| t.nodes.len() != expected_nodes)
        {
            return Err(err(0, "last tree is incomplete".into()));
        }
        if trees.len() != n_trees {
            return Err(err(
                0,
                format!("header says {n_trees} trees, found {}", trees.len()),
            ));
        }
        for (t, tree) in trees.iter().enumerate() {
            tree.validate()
                .map_err(|d| err(0, format!("tree {t}: {d}")))?;
        }
        Ok(Forest {
            trees,
            mtry,
            n_trees,
            min_leaf,
            seed,
            cv,
        })
    }
}

pub const MODEL_HEADER: &str = "essd-forest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub candidates: Vec<usize>,
    pub folds: usize,
    pub n_trees: usize,
    pub min_leaf: usize,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            candidates: (1..=N_FEATURES).collect(),
            folds: 20,
            n_trees: DEFAULT_TREES,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    pub best_mtry: usize,
    pub scores: Vec<CandidateScore>,
    /// Retrained on every training row with `best_mtry`.
    pub forest: Forest,
}

impl Tuning {
    pub fn best_auc(&self) -> f64 {
        self.forest.cv_auc().unwrap_or(f64::NAN)
    }
}

/// Stratified fold of every row: each class is shuffled and dealt
/// round-robin, the second class continuing where the first stopped.
pub fn stratified_folds(training: &TrainingSet, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed);
    let mut assignment = vec![0; training.len()];
    let mut next = 0;
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..training.len())
            .filter(|&i| training.rows[i].label == class)
            .collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        for i in idx {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    assignment
}

/// Picks `mtry` by stratified k-fold cross-validated AUC (ties go to the
/// smaller value) and retrains on all rows with the winner.
pub fn tune_mtry(
    training: &TrainingSet,
    cfg: &TuneConfig,
    seed: u64,
) -> Result<Tuning, ForestError> {
    training.check_classes()?;
    if cfg.folds < 2 || training.len() < cfg.folds {
        return Err(ForestError::TooFewRows {
            rows: training.len(),
            needed: cfg.folds.max(2),
        });
    }
    let mut candidates = cfg.candidates.clone();
    candidates.sort_unstable();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(ForestError::InvalidMtry(0));
    }
    if let Some(&bad) = candidates.iter().find(|m| !(1..=N_FEATURES).contains(*m)) {
        return Err(ForestError::InvalidMtry(bad));
    }

    let fold_of = stratified_folds(
        training,
        cfg.folds,
        seed::derive_labeled(seed, "folds", &[]),
    );
    let jobs: Vec<(usize, usize)> = candidates
        .iter()
        .flat_map(|&m| (0..cfg.folds).map(move |k| (m, k)))
        .collect();
    let results = par::map(&jobs, |&(m, k)| -> Result<Option<f64>, ForestError> {
        let (test, train): (Vec<&TrainingRow>, Vec<&TrainingRow>) = training
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (fold_of[i] == k, r))
            .fold(
                (Vec::new(), Vec::new()),
                |(mut te, mut tr), (is_test, r)| {
                    if is_test {
                        te.push(r)
                    } else {
                        tr.push(r)
                    }
                    (te, tr)
                },
            );
        let labels: Vec<bool> = test.iter().map(|r| r.label).collect();
        if !labels.iter().any(|&y| y) || labels.iter().all(|&y| y) {
            return Ok(None);
        }
        let train = TrainingSet {
            rows: train.into_iter().cloned().collect(),
        };
        let sub = seed::derive_labeled(seed, "cv", &[m as u64, k as u64]);
        let forest = match train_forest(&train, m, cfg.n_trees, sub, cfg.min_leaf) {
            Ok(f) => f,
            Err(ForestError::SingleClassTraining) => return Ok(None),
            Err(e) => return Err(e),
        };
        let scores: Vec<f64> = test.iter().map(|r| forest.predict_proba(&r.x)).collect();
        Ok(Some(
            eval::auc(&scores, &labels).expect("both classes present"),
        ))
    });

    let mut scores = Vec::with_capacity(candidates.len());
    let mut results = results.into_iter();
    for &m in &candidates {
        let mut fold_aucs = Vec::new();
        for _ in 0..cfg.folds {
            if let Some(a) = results.next().expect("one result per job")? {
                fold_aucs.push(a);
            }
        }
        let mean_auc =
            (!fold_aucs.is_empty()).then(|| fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64);
        scores.push(CandidateScore {
            mtry: m,
            mean_auc,
            fold_aucs,
        });
    }
    let mut best: Option<(usize, f64)> = None;
    for c in &scores {
        if let Some(a) = c.mean_auc {
            if best.is_none_or(|(_, b)| a > b) {
                best = Some((c.mtry, a));
            }
        }
    }
    let (best_mtry, _) = best.ok_or(ForestError::NoScorableFold)?;
    let mut forest = train_forest(training, best_mtry, cfg.n_trees, seed, cfg.min_leaf)?;
    forest.cv = scores.clone();
    Ok(Tuning {
        best_mtry,
        scores,
        forest,
    })
}
