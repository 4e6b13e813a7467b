//! Synthetic longitudinal datasets with planted ground truth.
//!
//! Every patient gets a registration period, demographics, background events
//! (a monthly Bernoulli draw per leaf code) and prescriptions (a monthly
//! Bernoulli draw per drug family). Each prescription is preceded by an
//! indication event. Planted effects then add events on top:
//!
//! * `adr` — after every prescription of a covered family, one extra event in
//!   days `[1, window]`, with probability chosen so the month-after risk is
//!   `relative_risk` times the background rate.
//! * `coding_noise` — an ADR whose extra events are recorded, with some
//!   probability, under a random sibling leaf of the same depth-3 parent.
//! * `indication_confounder` — not caused by the drug: co-occurs with the
//!   indication event, anywhere within `window / 2` days of it.
//! * `progressive` — not caused by the drug: after the first prescription the
//!   monthly rate climbs linearly, levelling off after a year.
//!
//! Patients are generated independently from per-patient sub-seeds, so the
//! output does not depend on the number of workers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::Datelike;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Entry, KvFile};
use crate::eval::{self, LabeledPair};
use crate::fsio;
use crate::par;
use crate::seed::{self, Rng};
use crate::store::{
    self, date_of, parse_date, BnfCode, CodeId, Dataset, DatasetPaths, Day, DrugFamily,
    EventCodeTree, EventRow, Gender, Patient, PrescriptionRow, RowOrigin, StoreError, TreeRow,
    MAX_DEPTH,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown preset '{0}' (expected smoke, standard or confounded)")]
    UnknownPreset(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectKind {
    Adr,
    IndicationConfounder,
    ProgressiveEvent,
    CodingNoise,
}

impl EffectKind {
    /// Whether the planted pair is a true ADR.
    pub fn is_adr(self) -> bool {
        matches!(self, EffectKind::Adr | EffectKind::CodingNoise)
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectKind::Adr => "adr",
            EffectKind::IndicationConfounder => "indication_confounder",
            EffectKind::ProgressiveEvent => "progressive",
            EffectKind::CodingNoise => "coding_noise",
        })
    }
}

impl FromStr for EffectKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "adr" => Ok(EffectKind::Adr),
            "indication_confounder" => Ok(EffectKind::IndicationConfounder),
            "progressive" => Ok(EffectKind::ProgressiveEvent),
            "coding_noise" => Ok(EffectKind::CodingNoise),
            _ => Err(format!("unknown effect kind '{s}'")),
        }
    }
}

/// A planted effect on every family whose BNF code starts with `family`.
#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub family: BnfCode,
    pub event_code: String,
    pub kind: EffectKind,
    pub relative_risk: f64,
    pub window_days: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilySpec {
    pub family: DrugFamily,
    /// Chance of a prescription in any given month of registration.
    pub prescription_probability: f64,
    /// Empty means "pick automatically".
    pub indication_codes: Vec<String>,
}

/// How many effects of each kind to plant automatically. `adr`,
/// `coding_noise`, `progressive` and `negative_controls` are per family;
/// `adr_shared` and `indication_confounder` act on the shared prefix and so
/// count once for all families.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlantCounts {
    pub adr: usize,
    pub adr_shared: usize,
    pub coding_noise: usize,
    pub indication_confounder: usize,
    pub progressive: usize,
    pub negative_controls: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub study_start: Day,
    pub study_years: u32,
    pub birth_years: (i32, i32),
    /// Children per node at depths 1-5; depth-1 entries are the roots.
    pub branching: Vec<u32>,
    pub background_rate: (f64, f64),
    /// Background rate range for every labelled code, if set.
    pub labelled_rate: Option<(f64, f64)>,
    pub rate_overrides: BTreeMap<String, f64>,
    pub families: Vec<FamilySpec>,
    pub indication_lag_days: i32,
    pub acute_window_days: i32,
    pub confounder_window_days: i32,
    pub coding_noise_probability: f64,
    pub relative_risk: (f64, f64),
    pub shared_prefix: Option<BnfCode>,
    pub plant: PlantCounts,
    pub effects: Vec<Effect>,
    pub negatives: Vec<(DrugFamily, String)>,
    /// `run.*` settings copied into the generated run config.
    pub run: Vec<(String, String)>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 1000,
            study_start: parse_date("2000-01-01").expect("valid date"),
            study_years: 10,
            birth_years: (1930, 1999),
            branching: vec![4, 3, 3, 2, 3],
            background_rate: (0.001, 0.01),
            labelled_rate: None,
            rate_overrides: BTreeMap::new(),
            families: Vec::new(),
            indication_lag_days: 7,
            acute_window_days: 30,
            confounder_window_days: 30,
            coding_noise_probability: 0.5,
            relative_risk: (3.0, 6.0),
            shared_prefix: None,
            plant: PlantCounts::default(),
            effects: Vec::new(),
            negatives: Vec::new(),
            run: Vec::new(),
        }
    }
}

const GENERATOR_KEYS: &[&str] = &[
    "seed",
    "n_patients",
    "study_start",
    "study_years",
    "birth_years",
    "tree_branching",
    "background_rate_min",
    "background_rate_max",
    "labelled_rate_min",
    "labelled_rate_max",
    "rate",
    "family",
    "indication_lag_days",
    "acute_window_days",
    "confounder_window_days",
    "coding_noise_probability",
    "relative_risk_min",
    "relative_risk_max",
    "shared_prefix",
    "plant.adr",
    "plant.adr_shared",
    "plant.coding_noise",
    "plant.indication_confounder",
    "plant.progressive",
    "negative_controls",
    "effect",
    "negative",
];

fn words(e: &Entry) -> Vec<&str> {
    e.value.split_whitespace().collect()
}

impl GeneratorConfig {
    pub fn parse(text: &str, source_name: &str) -> Result<Self, SynthError> {
        Self::from_kv(&KvFile::parse(text, source_name, Path::new("."))?)
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self, SynthError> {
        kv.check_keys(
            GENERATOR_KEYS,
            &["run."],
            &["rate", "family", "effect", "negative"],
        )?;
        let d = Self::default();
        let mut c = Self {
            seed: kv.require("seed")?,
            n_patients: kv.get_or("n_patients", d.n_patients)?,
            study_years: kv.get_or("study_years", d.study_years)?,
            acute_window_days: kv.get_or("acute_window_days", d.acute_window_days)?,
            confounder_window_days: kv
                .get_or("confounder_window_days", d.confounder_window_days)?,
            indication_lag_days: kv.get_or("indication_lag_days", d.indication_lag_days)?,
            coding_noise_probability: kv
                .get_or("coding_noise_probability", d.coding_noise_probability)?,
            relative_risk: (
                kv.get_or("relative_risk_min", d.relative_risk.0)?,
                kv.get_or("relative_risk_max", d.relative_risk.1)?,
            ),
            background_rate: (
                kv.get_or("background_rate_min", d.background_rate.0)?,
                kv.get_or("background_rate_max", d.background_rate.1)?,
            ),
            shared_prefix: kv.get("shared_prefix")?,
            plant: PlantCounts {
                adr: kv.get_or("plant.adr", 0)?,
                adr_shared: kv.get_or("plant.adr_shared", 0)?,
                coding_noise: kv.get_or("plant.coding_noise", 0)?,
                indication_confounder: kv.get_or("plant.indication_confounder", 0)?,
                progressive: kv.get_or("plant.progressive", 0)?,
                negative_controls: kv.get_or("negative_controls", 0)?,
            },
            ..d
        };
        if let Some(e) = kv.entry("study_start") {
            c.study_start = parse_date(&e.value).map_err(|err| kv.invalid(e, err.to_string()))?;
        }
        if let Some(e) = kv.entry("birth_years") {
            match kv.list::<i32>(e)?.as_slice() {
                &[a, b] if a <= b => c.birth_years = (a, b),
                _ => return Err(kv.invalid(e, "expected 'first, last'").into()),
            }
        }
        if let Some(e) = kv.entry("tree_branching") {
            c.branching = kv.list(e)?;
        }
        match (
            kv.get::<f64>("labelled_rate_min")?,
            kv.get::<f64>("labelled_rate_max")?,
        ) {
            (Some(a), Some(b)) => c.labelled_rate = Some((a, b)),
            (None, None) => {}
            _ => {
                return Err(SynthError::Invalid(
                    "labelled_rate_min and labelled_rate_max go together".into(),
                ))
            }
        }
        for e in kv.all("rate") {
            match words(e).as_slice() {
                [code, r] => {
                    let r: f64 = r
                        .parse()
                        .map_err(|_| kv.invalid(e, format!("'{r}' is not a number")))?;
                    c.rate_overrides.insert(code.to_string(), r);
                }
                _ => return Err(kv.invalid(e, "expected 'CODE RATE'").into()),
            }
        }
        for e in kv.all("family") {
            let w = words(e);
            if !(2..=3).contains(&w.len()) {
                return Err(kv
                    .invalid(e, "expected 'BNF_PREFIX PROBABILITY [CODE,CODE,...]'")
                    .into());
            }
            c.families.push(FamilySpec {
                family: w[0]
                    .parse()
                    .map_err(|err: StoreError| kv.invalid(e, err.to_string()))?,
                prescription_probability: w[1]
                    .parse()
                    .map_err(|_| kv.invalid(e, format!("'{}' is not a number", w[1])))?,
                indication_codes: w
                    .get(2)
                    .map_or(Vec::new(), |s| s.split(',').map(str::to_string).collect()),
            });
        }
        for e in kv.all("effect") {
            let w = words(e);
            if !(4..=5).contains(&w.len()) {
                return Err(kv
                    .invalid(
                        e,
                        "expected 'BNF_PREFIX CODE KIND RELATIVE_RISK [WINDOW_DAYS]'",
                    )
                    .into());
            }
            let kind: EffectKind = w[2].parse().map_err(|err: String| kv.invalid(e, err))?;
            let default_window = if kind == EffectKind::IndicationConfounder {
                c.confounder_window_days
            } else {
                c.acute_window_days
            };
            c.effects.push(Effect {
                family: w[0]
                    .parse()
                    .map_err(|err: StoreError| kv.invalid(e, err.to_string()))?,
                event_code: w[1].to_string(),
                kind,
                relative_risk: w[3]
                    .parse()
                    .map_err(|_| kv.invalid(e, format!("'{}' is not a number", w[3])))?,
                window_days: match w.get(4) {
                    Some(s) => s
                        .parse()
                        .map_err(|_| kv.invalid(e, format!("'{s}' is not an integer")))?,
                    None => default_window,
                },
            });
        }
        for e in kv.all("negative") {
            match words(e).as_slice() {
                [fam, code] => c.negatives.push((
                    fam.parse()
                        .map_err(|err: StoreError| kv.invalid(e, err.to_string()))?,
                    code.to_string(),
                )),
                _ => return Err(kv.invalid(e, "expected 'FAMILY CODE'").into()),
            }
        }
        c.run = kv
            .with_prefix("run.")
            .map(|(k, e)| (k.to_string(), e.value.clone()))
            .collect();
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |s: String| Err(SynthError::Invalid(s));
        let prob = |what: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(SynthError::Invalid(format!(
                    "{what} {p} is not a probability"
                )))
            }
        };
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if self.study_years == 0 {
            return bad("study_years must be positive".into());
        }
        if self.branching.len() != MAX_DEPTH as usize || self.branching.contains(&0) {
            return bad(format!("tree_branching needs {MAX_DEPTH} positive entries"));
        }
        if self
            .branching
            .iter()
            .map(|&b| u64::from(b))
            .product::<u64>()
            > 1_000_000
        {
            return bad("tree_branching gives more than a million leaves".into());
        }
        let (lo, hi) = self.background_rate;
        prob("background rate", lo)?;
        prob("background rate", hi)?;
        if lo > hi {
            return bad("background_rate_min exceeds background_rate_max".into());
        }
        if let Some((a, b)) = self.labelled_rate {
            prob("labelled rate", a)?;
            prob("labelled rate", b)?;
            if a > b {
                return bad("labelled_rate_min exceeds labelled_rate_max".into());
            }
        }
        for (code, &r) in &self.rate_overrides {
            prob(&format!("rate of {code}"), r)?;
        }
        prob("coding_noise_probability", self.coding_noise_probability)?;
        let (a, b) = self.relative_risk;
        if !(a > 0.0 && a <= b) {
            return bad("relative risks must satisfy 0 < min <= max".into());
        }
        if self.families.is_empty() {
            return bad("no drug families configured".into());
        }
        let mut seen = BTreeSet::new();
        for f in &self.families {
            prob(
                &format!("prescription probability of {}", f.family),
                f.prescription_probability,
            )?;
            if !seen.insert(f.family) {
                return bad(format!("family {} listed twice", f.family));
            }
        }
        for e in &self.effects {
            if e.relative_risk.is_nan() || e.relative_risk <= 0.0 {
                return bad(format!(
                    "effect on {}: relative risk must be positive",
                    e.event_code
                ));
            }
            if e.window_days < 1 {
                return bad(format!(
                    "effect on {}: window must be at least one day",
                    e.event_code
                ));
            }
            if !self
                .families
                .iter()
                .any(|f| f.family.prefix.has_prefix(&e.family))
            {
                return bad(format!(
                    "effect on {}: prefix {} matches no family",
                    e.event_code, e.family
                ));
            }
        }
        if self.acute_window_days < 1
            || self.confounder_window_days < 1
            || self.indication_lag_days < 0
        {
            return bad("windows must be positive and the indication lag non-negative".into());
        }
        Ok(())
    }

    fn shared_prefix(&self) -> Option<BnfCode> {
        if let Some(p) = self.shared_prefix {
            return Some(p);
        }
        let first = self.families[0].family.prefix;
        let len = (1..=first.len()).rev().find(|&l| {
            let p = BnfCode::new(&first.groups()[..l]).expect("valid prefix");
            self.families.iter().all(|f| f.family.prefix.has_prefix(&p))
        })?;
        Some(BnfCode::new(&first.groups()[..len]).expect("valid prefix"))
    }
}

const SMOKE: &str = include_str!("../presets/smoke.conf");
const STANDARD: &str = include_str!("../presets/standard.conf");
const CONFOUNDED: &str = include_str!("../presets/confounded.conf");

pub const PRESETS: [&str; 3] = ["smoke", "standard", "confounded"];

/// The checked-in benchmark configurations.
pub fn preset(name: &str) -> Result<GeneratorConfig, SynthError> {
    let text = preset_text(name)?;
    GeneratorConfig::parse(text, &format!("preset '{name}'"))
}

pub fn preset_text(name: &str) -> Result<&'static str, SynthError> {
    match name {
        "smoke" => Ok(SMOKE),
        "standard" => Ok(STANDARD),
        "confounded" => Ok(CONFOUNDED),
        _ => Err(SynthError::UnknownPreset(name.into())),
    }
}

/// Builds the complete tree described by `branching`. Codes look like
/// `M2.1.3.1.2`.
pub fn build_tree(branching: &[u32]) -> Result<EventCodeTree, StoreError> {
    let mut rows = Vec::new();
    let mut level: Vec<String> = Vec::new();
    for (d, &b) in branching.iter().enumerate() {
        let depth = d as u8 + 1;
        let parents: Vec<Option<String>> = if d == 0 {
            vec![None]
        } else {
            level.iter().cloned().map(Some).collect()
        };
        level.clear();
        for parent in parents {
            for j in 1..=b {
                let code = match &parent {
                    None => format!("M{j}"),
                    Some(p) => format!("{p}.{j}"),
                };
                rows.push(TreeRow {
                    code: code.clone(),
                    parent: parent.clone(),
                    depth,
                    description: format!("synthetic event {code}"),
                });
                level.push(code);
            }
        }
    }
    EventCodeTree::from_rows(rows, "generated tree", |i| i + 2)
}

#[derive(Debug, Clone)]
struct PlannedEffect {
    spec: Effect,
    code: CodeId,
    families: Vec<usize>,
    rate: f64,
    siblings: Vec<CodeId>,
}

impl PlannedEffect {
    /// Extra-event probability per exposure for `adr` and `coding_noise`.
    fn exposure_probability(&self) -> f64 {
        let r = self.rate;
        if r >= 1.0 {
            return 1.0;
        }
        ((self.spec.relative_risk - 1.0) * r / (1.0 - r)).clamp(0.0, 1.0)
    }

    fn excess(&self) -> f64 {
        ((self.spec.relative_risk - 1.0) * self.rate).clamp(0.0, 1.0)
    }
}

/// Everything fixed before patients are generated.
#[derive(Debug, Clone)]
struct Plan {
    tree: EventCodeTree,
    leaves: Vec<CodeId>,
    rates: Vec<f64>,
    effects: Vec<PlannedEffect>,
    indications: Vec<Vec<CodeId>>,
    negatives: Vec<(usize, CodeId)>,
    study_end: Day,
}

fn log_uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo <= 0.0 || lo == hi {
        return rng.gen_range(lo..=hi);
    }
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn plan(cfg: &GeneratorConfig) -> Result<Plan, SynthError> {
    let tree = build_tree(&cfg.branching)?;
    let leaf_depth = MAX_DEPTH;
    let leaves: Vec<CodeId> = tree
        .ids()
        .filter(|&c| tree.depth(c) == leaf_depth)
        .collect();
    let mut rates = vec![0.0; tree.len()];
    let mut rng = seed::rng(seed::derive_labeled(cfg.seed, "rates", &[]));
    for &c in &leaves {
        rates[c.index()] = log_uniform(&mut rng, cfg.background_rate);
    }
    let lookup = |code: &str| -> Result<CodeId, SynthError> {
        let id = tree.lookup(code)?;
        if tree.depth(id) != leaf_depth {
            return Err(SynthError::Invalid(format!(
                "event code {code} is not a leaf of the generated tree"
            )));
        }
        Ok(id)
    };

    // Depth-3 subtrees and their leaves.
    let mut subtrees: BTreeMap<CodeId, Vec<CodeId>> = BTreeMap::new();
    for &c in &leaves {
        subtrees.entry(tree.ancestor_id(c, 3)).or_default().push(c);
    }
    let mut dirty: BTreeSet<CodeId> = BTreeSet::new();

    let mut indications: Vec<Vec<CodeId>> = Vec::new();
    for f in &cfg.families {
        let codes = f
            .indication_codes
            .iter()
            .map(|c| lookup(c))
            .collect::<Result<Vec<_>, _>>()?;
        dirty.extend(codes.iter().map(|&c| tree.ancestor_id(c, 3)));
        indications.push(codes);
    }
    let mut effects: Vec<(Effect, CodeId)> = Vec::new();
    for e in &cfg.effects {
        let code = lookup(&e.event_code)?;
        dirty.insert(tree.ancestor_id(code, 3));
        effects.push((e.clone(), code));
    }
    let mut negatives: Vec<(usize, CodeId)> = Vec::new();
    for (fam, code) in &cfg.negatives {
        let i = cfg
            .families
            .iter()
            .position(|f| f.family == *fam)
            .ok_or_else(|| {
                SynthError::Invalid(format!("negative control for unknown family {fam}"))
            })?;
        negatives.push((i, lookup(code)?));
    }

    let mut prng = seed::rng(seed::derive_labeled(cfg.seed, "plant", &[]));
    let mut free: Vec<CodeId> = subtrees
        .keys()
        .copied()
        .filter(|s| !dirty.contains(s))
        .collect();
    free.shuffle(&mut prng);
    let mut free = free.into_iter();
    let exhausted =
        || SynthError::Invalid("event tree too small for the requested planted effects".into());

    if indications.iter().any(Vec::is_empty) {
        let s = free.next().ok_or_else(exhausted)?;
        for ind in indications.iter_mut().filter(|i| i.is_empty()) {
            ind.clone_from(&subtrees[&s]);
        }
    }

    let rr = |rng: &mut Rng| rng.gen_range(cfg.relative_risk.0..=cfg.relative_risk.1);
    let p = cfg.plant;
    for fi in 0..cfg.families.len() {
        for _ in 0..p.coding_noise {
            let s = free.next().ok_or_else(exhausted)?;
            let code = *subtrees[&s]
                .choose(&mut prng)
                .expect("subtrees have leaves");
            let e = Effect {
                family: cfg.families[fi].family.prefix,
                event_code: tree.code(code).into(),
                kind: EffectKind::CodingNoise,
                relative_risk: rr(&mut prng),
                window_days: cfg.acute_window_days,
            };
            effects.push((e, code));
        }
    }
    // Remaining effects are packed into shared subtrees, so their codes do
    // have planted siblings.
    let mut packed: Vec<CodeId> = Vec::new();
    let mut next_leaf =
        |rng: &mut Rng, free: &mut dyn Iterator<Item = CodeId>| -> Result<CodeId, SynthError> {
            if packed.is_empty() {
                let s = free.next().ok_or_else(exhausted)?;
                packed = subtrees[&s].clone();
                packed.shuffle(rng);
            }
            Ok(packed.pop().expect("refilled above"))
        };
    let auto_shared = p.adr_shared + p.indication_confounder > 0;
    let shared = if auto_shared {
        Some(
            cfg.shared_prefix()
                .ok_or_else(|| SynthError::Invalid("families share no BNF prefix".into()))?,
        )
    } else {
        None
    };
    let mut auto: Vec<(BnfCode, EffectKind, i32)> = Vec::new();
    if let Some(s) = shared {
        auto.extend((0..p.adr_shared).map(|_| (s, EffectKind::Adr, cfg.acute_window_days)));
        auto.extend((0..p.indication_confounder).map(|_| {
            (
                s,
                EffectKind::IndicationConfounder,
                cfg.confounder_window_days,
            )
        }));
    }
    for f in &cfg.families {
        let pre = f.family.prefix;
        auto.extend((0..p.adr).map(|_| (pre, EffectKind::Adr, cfg.acute_window_days)));
        auto.extend(
            (0..p.progressive).map(|_| (pre, EffectKind::ProgressiveEvent, cfg.acute_window_days)),
        );
    }
    for (family, kind, window_days) in auto {
        let code = next_leaf(&mut prng, &mut free)?;
        let relative_risk = rr(&mut prng);
        effects.push((
            Effect {
                family,
                event_code: tree.code(code).into(),
                kind,
                relative_risk,
                window_days,
            },
            code,
        ));
    }

    if p.negative_controls > 0 {
        let clean: Vec<CodeId> = free.flat_map(|s| subtrees[&s].clone()).collect();
        for fi in 0..cfg.families.len() {
            let picks: Vec<CodeId> = clean
                .choose_multiple(&mut prng, p.negative_controls)
                .copied()
                .collect();
            if picks.len() < p.negative_controls {
                return Err(exhausted());
            }
            negatives.extend(picks.into_iter().map(|c| (fi, c)));
        }
    }

    // Labelled codes may use their own background range.
    if let Some(range) = cfg.labelled_rate {
        let mut lrng = seed::rng(seed::derive_labeled(cfg.seed, "labelled-rates", &[]));
        let labelled: BTreeSet<CodeId> = effects
            .iter()
            .map(|(_, c)| *c)
            .chain(negatives.iter().map(|(_, c)| *c))
            .collect();
        for c in labelled {
            rates[c.index()] = log_uniform(&mut lrng, range);
        }
    }
    for (code, &r) in &cfg.rate_overrides {
        rates[lookup(code)?.index()] = r;
    }

    let effects = effects
        .into_iter()
        .map(|(spec, code)| {
            let families = (0..cfg.families.len())
                .filter(|&i| cfg.families[i].family.prefix.has_prefix(&spec.family))
                .collect();
            let parent = tree.ancestor_id(code, 3);
            let siblings = subtrees[&parent]
                .iter()
                .copied()
                .filter(|&c| c != code)
                .collect();
            PlannedEffect {
                rate: rates[code.index()],
                spec,
                code,
                families,
                siblings,
            }
        })
        .collect();

    let start = date_of(cfg.study_start);
    let end = start
        .with_year(start.year() + cfg.study_years as i32)
        .ok_or_else(|| SynthError::Invalid("study span overflows the calendar".into()))?;
    Ok(Plan {
        tree,
        leaves,
        rates,
        effects,
        indications,
        negatives,
        study_end: store::day_of(end) - 1,
    })
}

/// Failures before the first success of a Bernoulli(p) sequence.
fn geometric(rng: &mut Rng, p: f64) -> u64 {
    if p >= 1.0 {
        return 0;
    }
    if p <= 0.0 {
        return u64::MAX;
    }
    let u: f64 = rng.gen();
    ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u64
}

/// Days of the 30-day blocks, counted from `start`, in which a
/// Bernoulli(p) draw succeeds; one uniformly placed day per success.
fn monthly_hits(rng: &mut Rng, start: Day, end: Day, p: f64, out: &mut Vec<Day>) {
    let blocks = ((end - start) / 30 + 1) as u64;
    let mut k = geometric(rng, p);
    while k < blocks {
        let first = start + 30 * k as i32;
        let day = first + rng.gen_range(0..30);
        if day <= end {
            out.push(day);
        }
        k = k.saturating_add(1).saturating_add(geometric(rng, p));
    }
}

struct PatientRecord {
    patient: Patient,
    events: Vec<(Day, CodeId)>,
    prescriptions: Vec<(Day, usize)>,
}

const PROGRESSIVE_PLATEAU_MONTHS: i32 = 12;

fn generate_patient(cfg: &GeneratorConfig, plan: &Plan, ordinal: usize) -> PatientRecord {
    let mut rng = seed::rng(seed::derive_labeled(cfg.seed, "patient", &[ordinal as u64]));
    let span = plan.study_end - cfg.study_start;
    let reg_start = cfg.study_start + rng.gen_range(0..=span / 2);
    let reg_end = (reg_start + rng.gen_range(365.min(span)..=span)).min(plan.study_end);
    let gender = if rng.gen_bool(0.5) {
        Gender::F
    } else {
        Gender::M
    };
    let year_of_birth = rng
        .gen_range(cfg.birth_years.0..=cfg.birth_years.1)
        .min(date_of(reg_start).year());
    let patient = Patient {
        patient_id: format!("P{:07}", ordinal + 1),
        year_of_birth,
        gender,
        reg_start,
        reg_end,
    };

    let mut events: Vec<(Day, CodeId)> = Vec::new();
    let mut days = Vec::new();
    for &c in &plan.leaves {
        days.clear();
        monthly_hits(
            &mut rng,
            reg_start,
            reg_end,
            plan.rates[c.index()],
            &mut days,
        );
        events.extend(days.iter().map(|&d| (d, c)));
    }

    let mut prescriptions: Vec<(Day, usize)> = Vec::new();
    for (fi, f) in cfg.families.iter().enumerate() {
        days.clear();
        monthly_hits(
            &mut rng,
            reg_start,
            reg_end,
            f.prescription_probability,
            &mut days,
        );
        prescriptions.extend(days.iter().map(|&d| (d, fi)));
    }
    prescriptions.sort_unstable();

    let mut first_rx: Vec<Option<Day>> = vec![None; cfg.families.len()];
    for &(t, fi) in &prescriptions {
        first_rx[fi].get_or_insert(t);
        let ind = &plan.indications[fi];
        let t_ind = t - rng.gen_range(0..=cfg.indication_lag_days);
        events.push((t_ind, ind[rng.gen_range(0..ind.len())]));
        for e in &plan.effects {
            if !e.families.contains(&fi) {
                continue;
            }
            match e.spec.kind {
                EffectKind::IndicationConfounder => {
                    if rng.gen_bool(e.excess()) {
                        let half = e.spec.window_days / 2;
                        events.push((t_ind + rng.gen_range(-half..=half), e.code));
                    }
                }
                EffectKind::Adr | EffectKind::CodingNoise => {
                    if rng.gen_bool(e.exposure_probability()) {
                        let day = t + rng.gen_range(1..=e.spec.window_days);
                        let code = if e.spec.kind == EffectKind::CodingNoise
                            && !e.siblings.is_empty()
                            && rng.gen_bool(cfg.coding_noise_probability)
                        {
                            e.siblings[rng.gen_range(0..e.siblings.len())]
                        } else {
                            e.code
                        };
                        events.push((day, code));
                    }
                }
                EffectKind::ProgressiveEvent => {}
            }
        }
    }

    for e in plan
        .effects
        .iter()
        .filter(|e| e.spec.kind == EffectKind::ProgressiveEvent)
    {
        let Some(onset) = e.families.iter().filter_map(|&fi| first_rx[fi]).min() else {
            continue;
        };
        let mut m = 0;
        loop {
            let first = onset + 1 + 30 * m;
            if first > reg_end {
                break;
            }
            let ramp = 1.0 + f64::from(m.min(PROGRESSIVE_PLATEAU_MONTHS)) / 6.0;
            if rng.gen_bool((e.excess() * ramp).min(1.0)) {
                events.push((first + rng.gen_range(0..30), e.code));
            }
            m += 1;
        }
    }

    events.retain(|&(d, _)| d >= reg_start && d <= reg_end);
    events.sort_unstable();
    PatientRecord {
        patient,
        events,
        prescriptions,
    }
}

/// One planted effect as recorded in `ground_truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantedEffect {
    pub family_prefix: String,
    pub families: Vec<String>,
    pub event_code: String,
    pub kind: EffectKind,
    pub label: bool,
    pub relative_risk: f64,
    pub window_days: i32,
    pub background_rate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coding_noise_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub n_patients: usize,
    pub effects: Vec<PlantedEffect>,
    /// Family prefix -> negative control codes.
    pub negative_controls: BTreeMap<String, Vec<String>>,
    pub indication_codes: BTreeMap<String, Vec<String>>,
    /// Every labelled pair, as written to `reference.csv`.
    #[serde(skip)]
    pub pairs: Vec<LabeledPair>,
}

impl GroundTruth {
    pub fn effects_of(&self, kind: EffectKind) -> impl Iterator<Item = &PlantedEffect> {
        self.effects.iter().filter(move |e| e.kind == kind)
    }

    /// `(family, event code)` pairs covered by effects of `kind`.
    pub fn pairs_of(&self, kind: EffectKind) -> Vec<(DrugFamily, String)> {
        let mut out: Vec<(DrugFamily, String)> = self
            .effects_of(kind)
            .flat_map(|e| {
                e.families
                    .iter()
                    .map(|f| (f.parse().expect("valid family"), e.event_code.clone()))
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serialises")
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

fn drug_id(f: &DrugFamily) -> String {
    format!("D{}", f.to_string().replace('-', ""))
}

/// Generates the dataset and its ground truth. Deterministic in `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Synthetic, SynthError> {
    cfg.validate()?;
    let plan = plan(cfg)?;
    let records = par::map_range(cfg.n_patients, |i| generate_patient(cfg, &plan, i));

    let tree = &plan.tree;
    let mut patients = Vec::with_capacity(records.len());
    let mut event_rows = Vec::new();
    let mut rx_rows = Vec::new();
    for r in records {
        for (day, code) in r.events {
            event_rows.push(EventRow {
                patient_id: r.patient.patient_id.clone(),
                day,
                event_code: tree.code(code).to_string(),
            });
        }
        for (day, fi) in r.prescriptions {
            let f = &cfg.families[fi].family;
            rx_rows.push(PrescriptionRow {
                patient_id: r.patient.patient_id.clone(),
                day,
                drug_id: drug_id(f),
                bnf: f.prefix,
            });
        }
        patients.push(r.patient);
    }
    let origin = RowOrigin {
        patients: "generated patients".into(),
        events: "generated events".into(),
        prescriptions: "generated prescriptions".into(),
        ..RowOrigin::default()
    };
    let dataset = Dataset::from_parts(
        patients,
        event_rows,
        rx_rows,
        plan.tree.clone(),
        &origin,
        vec![format!(
            "synthetic seed={} n_patients={}",
            cfg.seed, cfg.n_patients
        )],
    )?;

    let fam = |i: usize| cfg.families[i].family;
    let mut labels: BTreeMap<(DrugFamily, String), bool> = BTreeMap::new();
    for e in &plan.effects {
        for &fi in &e.families {
            let slot = labels
                .entry((fam(fi), e.spec.event_code.clone()))
                .or_insert(false);
            *slot |= e.spec.kind.is_adr();
        }
    }
    let mut negative_controls: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for &(fi, c) in &plan.negatives {
        labels
            .entry((fam(fi), tree.code(c).to_string()))
            .or_insert(false);
        negative_controls
            .entry(fam(fi).to_string())
            .or_default()
            .push(tree.code(c).to_string());
    }
    for v in negative_controls.values_mut() {
        v.sort();
    }
    let pairs = labels
        .into_iter()
        .map(|((family, event_code), label)| LabeledPair {
            family,
            event_code,
            label,
        })
        .collect();
    let effects = plan
        .effects
        .iter()
        .map(|e| PlantedEffect {
            family_prefix: e.spec.family.to_string(),
            families: e.families.iter().map(|&i| fam(i).to_string()).collect(),
            event_code: e.spec.event_code.clone(),
            kind: e.spec.kind,
            label: e.spec.kind.is_adr(),
            relative_risk: e.spec.relative_risk,
            window_days: e.spec.window_days,
            background_rate: e.rate,
            coding_noise_probability: (e.spec.kind == EffectKind::CodingNoise)
                .then_some(cfg.coding_noise_probability),
        })
        .collect();
    let indication_codes = cfg
        .families
        .iter()
        .zip(&plan.indications)
        .map(|(f, codes)| {
            (
                f.family.to_string(),
                codes.iter().map(|&c| tree.code(c).to_string()).collect(),
            )
        })
        .collect();
    Ok(Synthetic {
        dataset,
        truth: GroundTruth {
            seed: cfg.seed,
            n_patients: cfg.n_patients,
            effects,
            negative_controls,
            indication_codes,
            pairs,
        },
    })
}

/// Writes the four dataset files, `reference.csv` and `ground_truth.json`
/// into `dir`.
pub fn write_files(syn: &Synthetic, dir: &Path) -> Result<(), SynthError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| SynthError::Io { path, source }
    };
    let paths = DatasetPaths::in_dir(dir);
    store::save_dataset(&syn.dataset, &paths).map_err(io(dir))?;
    let reference = dir.join("reference.csv");
    fsio::atomic_write(&reference, |w| {
        eval::write_reference(&syn.truth.pairs, w).map_err(std::io::Error::other)
    })
    .map_err(io(&reference))?;
    let truth = dir.join("ground_truth.json");
    fsio::atomic_write_str(&truth, &(syn.truth.to_json() + "\n")).map_err(io(&truth))?;
    Ok(())
}

/// Lines of a run config pointing at files written by [`write_files`].
pub fn run_config_text(cfg: &GeneratorConfig) -> String {
    let mut s = String::from("# Written by `essd generate`.\n");
    s.push_str("data_dir = .\nreference = reference.csv\n");
    let fams: Vec<String> = cfg.families.iter().map(|f| f.family.to_string()).collect();
    s.push_str(&format!("families = {}\n", fams.join(",")));
    s.push_str(&format!("seed = {}\n", cfg.seed));
    for (k, v) in &cfg.run {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "\
seed = 11
n_patients = 300
study_years = 6
tree_branching = 2,2,3,2,3
background_rate_min = 0.005
background_rate_max = 0.02
family = 05-01-01-01 0.02
family = 05-01-01-02 0.02
family = 05-01-01-03 0.02
plant.adr = 1
plant.adr_shared = 1
plant.coding_noise = 1
plant.indication_confounder = 1
plant.progressive = 1
negative_controls = 2
run.n_trees = 10
";

    #[test]
    fn tree_shape() {
        let t = build_tree(&[4, 3, 3, 2, 3]).unwrap();
        assert_eq!(t.len(), 4 + 12 + 36 + 72 + 216);
        assert_eq!(t.depth(t.lookup("M4.3.3.2.3").unwrap()), 5);
        assert_eq!(t.ancestor_at_depth("M1.2.3.1.2", 3).unwrap(), "M1.2.3");
    }

    #[test]
    fn presets_parse() {
        for name in PRESETS {
            let c = preset(name).unwrap();
            assert_eq!(c.families.len(), 3, "{name}");
        }
        assert!(preset("smoke").unwrap().n_patients <= 2000);
        assert!(preset("confounded").unwrap().n_patients >= 20_000);
        assert!(matches!(preset("huge"), Err(SynthError::UnknownPreset(_))));
    }

    #[test]
    fn config_errors() {
        assert!(GeneratorConfig::parse("n_patients = 5\nfamily = 05 0.1\n", "t").is_err());
        assert!(GeneratorConfig::parse("seed = 1\nfamily = 05 1.5\n", "t").is_err());
        assert!(GeneratorConfig::parse("seed = 1\n", "t").is_err());
        assert!(GeneratorConfig::parse(
            "seed = 1\nfamily = 05 0.1\neffect = 05 M1.1.1.1.1 adr 0\n",
            "t"
        )
        .is_err());
        assert!(GeneratorConfig::parse(
            "seed = 1\nfamily = 05 0.1\neffect = 05 M1.1.1.1.1 cure 2\n",
            "t"
        )
        .is_err());
        let c = GeneratorConfig::parse(
            "seed = 1\nfamily = 05 0.1\neffect = 05 M9.1.1.1.1 adr 2\n",
            "t",
        )
        .unwrap();
        assert!(matches!(generate(&c), Err(SynthError::Store(_))));
    }

    #[test]
    fn labels_follow_effect_kinds() {
        let cfg = GeneratorConfig::parse(TINY, "tiny").unwrap();
        let syn = generate(&cfg).unwrap();
        let t = &syn.truth;
        // 1 shared ADR and 1 shared confounder cover all three families.
        assert_eq!(t.effects.len(), 3 + 1 + 1 + 3 + 3);
        let positives: BTreeSet<(DrugFamily, String)> = t
            .pairs
            .iter()
            .filter(|p| p.label)
            .map(|p| (p.family, p.event_code.clone()))
            .collect();
        let mut expected = BTreeSet::new();
        for k in [EffectKind::Adr, EffectKind::CodingNoise] {
            expected.extend(t.pairs_of(k));
        }
        assert_eq!(positives, expected);
        assert_eq!(t.pairs.len(), 3 * (1 + 1 + 1 + 1 + 1 + 2));
        // Coding-noise codes own their depth-3 subtree.
        let tree = syn.dataset.tree();
        for e in t.effects_of(EffectKind::CodingNoise) {
            let parent = tree.ancestor_at_depth(&e.event_code, 3).unwrap();
            let others = t
                .effects
                .iter()
                .filter(|o| tree.ancestor_at_depth(&o.event_code, 3).unwrap() == parent);
            assert_eq!(others.count(), 1);
            assert!(t.pairs.iter().all(|p| p.event_code == e.event_code
                || tree.ancestor_at_depth(&p.event_code, 3).unwrap() != parent));
        }
    }

    #[test]
    fn deterministic_and_reloadable() {
        let cfg = GeneratorConfig::parse(TINY, "tiny").unwrap();
        let a = generate(&cfg).unwrap();
        let b = par::with_workers(1, || generate(&cfg).unwrap());
        assert_eq!(a.dataset.fingerprint(), b.dataset.fingerprint());
        assert_eq!(a.truth, b.truth);

        let dir = tempfile::tempdir().unwrap();
        write_files(&a, dir.path()).unwrap();
        let back = store::load_dataset(&DatasetPaths::in_dir(dir.path())).unwrap();
        assert_eq!(back.fingerprint(), a.dataset.fingerprint());
        assert_eq!(
            eval::read_reference(&dir.path().join("reference.csv")).unwrap(),
            a.truth.pairs
        );
        let other = GeneratorConfig { seed: 12, ..cfg };
        assert_ne!(
            generate(&other).unwrap().dataset.fingerprint(),
            a.dataset.fingerprint()
        );
    }

    #[test]
    fn registration_and_events_stay_in_range() {
        let cfg = GeneratorConfig::parse(TINY, "tiny").unwrap();
        let syn = generate(&cfg).unwrap();
        let ds = &syn.dataset;
        for (i, p) in ds.patients().iter().enumerate() {
            assert!(p.reg_start >= cfg.study_start && p.reg_start <= p.reg_end);
            assert!(p.year_of_birth <= date_of(p.reg_start).year());
            assert!(ds.events_of(i).iter().all(|e| p.is_registered(e.day)));
        }
    }

    #[test]
    fn geometric_matches_its_mean() {
        let mut rng = seed::rng(3);
        let n = 20_000;
        let mean = (0..n).map(|_| geometric(&mut rng, 0.2) as f64).sum::<f64>() / n as f64;
        // Mean failures (1-p)/p = 4, sd 4.47/sqrt(n).
        assert!((mean - 4.0).abs() < 4.0 * 4.47 / (n as f64).sqrt());
        assert_eq!(geometric(&mut rng, 1.0), 0);
    }
}
