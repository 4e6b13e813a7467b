//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use essd::cohort::{self, CohortParams};
use essd::eval::{self, ConfusionCounts, LabeledPair, LofoConfig, Method};
use essd::forest::{self, Features};
use essd::measures::{self, FeatureConfig, FeatureScope, FeatureTable};
use essd::par;
use essd::pipeline::{self, GenerateSource, Overrides};
use essd::store::{
    self, DatasetPaths, DrugFamily, EventCodeTree, EventRow, Gender, Patient, PrescriptionRow,
    RowOrigin, TreeRow,
};
use essd::synth::{self, EffectKind, GeneratorConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle")
}

fn fam(s: &str) -> DrugFamily {
    s.parse().unwrap()
}

/// Every family compares against the next one in the list.
fn cyclic_config(cfg: &GeneratorConfig) -> FeatureConfig {
    let fams: Vec<DrugFamily> = cfg.families.iter().map(|f| f.family).collect();
    let comparators = fams
        .iter()
        .enumerate()
        .map(|(i, f)| (*f, fams[(i + 1) % fams.len()]))
        .collect();
    FeatureConfig::new(fams, comparators, cfg.seed)
}

fn synthetic_table(cfg: &GeneratorConfig) -> (FeatureTable, synth::GroundTruth) {
    let syn = synth::generate(cfg).expect("generate");
    let table = measures::feature_matrix(
        &syn.dataset,
        &cyclic_config(cfg),
        &syn.truth.pairs,
        FeatureScope::ReferenceOnly,
    )
    .expect("features");
    (table, syn.truth)
}

// ---------------------------------------------------------------- 1

fn c1_published_rates() -> Outcome {
    // method, TP, FP, FN, TN, sensitivity, specificity, FPR
    type Row = (&'static str, u32, u32, u32, u32, f64, f64, f64);
    let rows: [Row; 7] = [
        ("ESSD", 35, 21, 29, 120, 0.547, 0.851, 0.149),
        ("SSD1", 58, 85, 6, 56, 0.906, 0.397, 0.603),
        ("SSD2", 64, 101, 0, 40, 1.0, 0.284, 0.716),
        ("SSD3", 27, 34, 37, 107, 0.422, 0.759, 0.241),
        ("SSD4", 8, 26, 56, 115, 0.125, 0.816, 0.184),
        ("SSD5", 59, 75, 5, 66, 0.922, 0.468, 0.532),
        ("SSD6", 56, 79, 8, 62, 0.875, 0.440, 0.560),
    ];
    let r3 = |v: f64| format!("{v:.3}");
    for (name, tp, fp, fn_, tn, sens, spec, fpr) in rows {
        let r = eval::rates(&ConfusionCounts { tp, fp, fn_, tn });
        let got = [
            r.sensitivity.unwrap(),
            r.specificity.unwrap(),
            r.fpr.unwrap(),
        ]
        .map(r3);
        let want = [sens, spec, fpr].map(r3);
        ensure(got == want, || {
            format!("{name}: got {got:?}, expected {want:?}")
        })?;
    }
    Ok("7 methods x 3 rates".into())
}

// ---------------------------------------------------------------- 2

/// Straight re-implementation over the raw CSV rows, sharing nothing with the
/// library beyond the file format.
struct Oracle {
    patients: BTreeMap<String, (i32, String, NaiveDate, NaiveDate)>,
    events: Vec<(String, NaiveDate, String)>,
    rx: Vec<(String, NaiveDate, String)>,
    parent: BTreeMap<String, String>,
    depth: BTreeMap<String, u8>,
}

fn date(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

fn records(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(Result::unwrap)
        .collect()
}

impl Oracle {
    fn load(dir: &Path) -> Self {
        let mut o = Oracle {
            patients: BTreeMap::new(),
            events: Vec::new(),
            rx: Vec::new(),
            parent: BTreeMap::new(),
            depth: BTreeMap::new(),
        };
        for r in records(&dir.join("patients.csv")) {
            o.patients.insert(
                r[0].into(),
                (r[1].parse().unwrap(), r[2].into(), date(&r[3]), date(&r[4])),
            );
        }
        for r in records(&dir.join("events.csv")) {
            o.events.push((r[0].into(), date(&r[1]), r[2].into()));
        }
        for r in records(&dir.join("prescriptions.csv")) {
            o.rx.push((r[0].into(), date(&r[1]), r[3].into()));
        }
        for r in records(&dir.join("event_tree.csv")) {
            if !r[1].is_empty() {
                o.parent.insert(r[0].into(), r[1].into());
            }
            o.depth.insert(r[0].into(), r[2].parse().unwrap());
        }
        o
    }

    fn roll_up(&self, code: &str, depth: Option<u8>) -> String {
        let mut c = code.to_string();
        if let Some(d) = depth {
            while self.depth[&c] > d {
                c = self.parent[&c].clone();
            }
        }
        c
    }

    /// Patient -> index date under the 90-day washout and 30-day observation rules.
    fn new_users(&self, prefix: &str) -> BTreeMap<String, NaiveDate> {
        let mut out = BTreeMap::new();
        for (pid, (_, _, start, end)) in &self.patients {
            let dates: BTreeSet<NaiveDate> = self
                .rx
                .iter()
                .filter(|r| &r.0 == pid && r.2.starts_with(prefix))
                .map(|r| r.1)
                .collect();
            let dates: Vec<NaiveDate> = dates.into_iter().collect();
            for (k, d) in dates.iter().enumerate() {
                let washed = k == 0 || (*d - dates[k - 1]).num_days() > 90;
                let observed = (*d - *start).num_days() >= 30 && (*end - *d).num_days() >= 30;
                if washed && observed {
                    out.insert(pid.clone(), *d);
                    break;
                }
            }
        }
        out
    }

    fn has(
        &self,
        pid: &str,
        from: NaiveDate,
        to: NaiveDate,
        code: &str,
        depth: Option<u8>,
    ) -> bool {
        let want = self.roll_up(code, depth);
        self.events
            .iter()
            .any(|(p, d, c)| p == pid && from <= *d && *d <= to && self.roll_up(c, depth) == want)
    }

    /// Share of `pop` with `code` in days `[anchor + lo, anchor + hi]`.
    fn risk(
        &self,
        pop: &[(String, NaiveDate)],
        lo: i64,
        hi: i64,
        code: &str,
        depth: Option<u8>,
    ) -> f64 {
        let hits = pop
            .iter()
            .filter(|(p, a)| {
                self.has(
                    p,
                    *a + chrono::TimeDelta::days(lo),
                    *a + chrono::TimeDelta::days(hi),
                    code,
                    depth,
                )
            })
            .count() as u32;
        f64::from(hits) / f64::from(pop.len() as u32)
    }

    fn features(&self, target: &str, comparator: &str) -> BTreeMap<String, [f64; 9]> {
        let users = self.new_users(target);
        let pop: Vec<(String, NaiveDate)> = users.iter().map(|(p, d)| (p.clone(), *d)).collect();

        // Each target has exactly one same-sex, same-year never-user, whose
        // registration is one month long, so the window is fixed.
        let ever: BTreeSet<&String> = self
            .rx
            .iter()
            .filter(|r| r.2.starts_with(target))
            .map(|r| &r.0)
            .collect();
        let mut matched = Vec::new();
        for p in users.keys() {
            let (yob, g, _, _) = &self.patients[p];
            let cands: Vec<_> = self
                .patients
                .iter()
                .filter(|(q, (y, h, s, e))| {
                    !ever.contains(q) && y == yob && h == g && (*e - *s).num_days() >= 30
                })
                .collect();
            assert_eq!(cands.len(), 1, "fixture must give {p} exactly one control");
            let (q, (_, _, s, e)) = cands[0];
            assert_eq!(
                (*e - *s).num_days(),
                30,
                "control {q} must be registered for exactly one month"
            );
            matched.push((q.clone(), *s));
        }
        let comp: Vec<(String, NaiveDate)> = self
            .new_users(comparator)
            .into_iter()
            .filter(|(p, d)| users.get(p) != Some(d))
            .collect();

        let mut counts: BTreeMap<String, BTreeSet<&String>> = BTreeMap::new();
        for (p, d, c) in &self.events {
            if let Some(i) = users.get(p) {
                let off = (*d - *i).num_days();
                if (1..=30).contains(&off) {
                    counts.entry(c.clone()).or_default().insert(p);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (code, who) in counts {
            if who.len() < 3 {
                continue;
            }
            let after = self.risk(&pop, 1, 30, &code, None);
            let x1 = after - self.risk(&pop, -30, -1, &code, None);
            let mut sum = 0.0;
            let mut k = 0u32;
            for s in 1..=12i64 {
                let covered: Vec<(String, NaiveDate)> = pop
                    .iter()
                    .filter(|(p, a)| {
                        *a + chrono::TimeDelta::days(30 + 30 * s) <= self.patients[p].3
                    })
                    .cloned()
                    .collect();
                if !covered.is_empty() {
                    sum += self.risk(&covered, 1 + 30 * s, 30 + 30 * s, &code, None);
                    k += 1;
                }
            }
            let x2 = after - sum / f64::from(k);
            let x3 = after - self.risk(&matched, 1, 30, &code, None);
            let x4 = after - self.risk(&comp, 1, 30, &code, None);
            let x5 =
                self.risk(&pop, 1, 30, &code, Some(3)) - self.risk(&pop, -30, -1, &code, Some(3));
            let x6 =
                self.risk(&pop, 1, 30, &code, Some(4)) - self.risk(&pop, -30, -1, &code, Some(4));
            let ratio = |n: f64, d: f64| if d == 0.0 { n } else { n / d };
            out.insert(
                code,
                [
                    x1,
                    x2,
                    x3,
                    x4,
                    x5,
                    x6,
                    ratio(x1, x2),
                    ratio(x1, x4),
                    ratio(x1, x5),
                ],
            );
        }
        out
    }
}

fn c2_measure_oracle() -> Outcome {
    let dir = fixture_dir();
    let (a, b) = ("05-01-01-01", "05-01-01-02");
    let want = Oracle::load(&dir).features(a, b);
    ensure(want.len() >= 4, || {
        format!("fixture yields only {} risk events", want.len())
    })?;

    let ds = store::load_dataset(&DatasetPaths::in_dir(&dir)).map_err(|e| e.to_string())?;
    let mut comparators = BTreeMap::new();
    comparators.insert(fam(a), fam(b));
    let mut n_values = 0;
    for seed in [0, 1, 99] {
        let cfg = FeatureConfig::new(vec![fam(a)], comparators.clone(), seed);
        let table = measures::feature_matrix(&ds, &cfg, &[], FeatureScope::AllRiskEvents)
            .map_err(|e| e.to_string())?;
        let got: BTreeMap<String, [f64; 9]> = table
            .rows
            .iter()
            .map(|r| (r.features.event_code.clone(), r.features.x))
            .collect();
        ensure(got.keys().eq(want.keys()), || {
            format!("risk events differ: {:?} vs {:?}", got.keys(), want.keys())
        })?;
        for (code, x) in &got {
            let w = &want[code];
            for k in 0..9 {
                ensure(x[k].to_bits() == w[k].to_bits(), || {
                    format!(
                        "seed {seed}, {code}, x{}: library {} vs oracle {}",
                        k + 1,
                        x[k],
                        w[k]
                    )
                })?;
                n_values += 1;
            }
        }
    }
    let patients = ds.patients().len();
    Ok(format!(
        "{patients} patients, {} risk events, {n_values} values bit-equal over 3 seeds",
        want.len()
    ))
}

// ---------------------------------------------------------------- 3

fn auc_oracle(s: &[f64], y: &[bool]) -> Option<f64> {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1;
                twice += match s[i].partial_cmp(&s[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// Rank = 1 + higher scores + equal scores earlier in the input.
fn ap_oracle(s: &[f64], y: &[bool]) -> Option<f64> {
    let n = s.len();
    let rank: Vec<usize> = (0..n)
        .map(|i| {
            1 + (0..n)
                .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
                .count()
        })
        .collect();
    let mut pos: Vec<usize> = (0..n).filter(|&i| y[i]).map(|i| rank[i]).collect();
    if pos.is_empty() {
        return None;
    }
    pos.sort_unstable();
    let mut sum = 0.0;
    for (k, r) in pos.iter().enumerate() {
        sum += (k + 1) as f64 / *r as f64;
    }
    Some(sum / pos.len() as f64)
}

fn c3_ranking_oracle() -> Outcome {
    let alphabet = [0.1, 0.5, 0.9];
    let mut checked = 0u64;
    for n in 1..=8u32 {
        for sv in 0..3usize.pow(n) {
            let mut s = vec![0.0; n as usize];
            let mut v = sv;
            for slot in s.iter_mut() {
                *slot = alphabet[v % 3];
                v /= 3;
            }
            for lv in 0..(1u32 << n) {
                let y: Vec<bool> = (0..n).map(|i| lv >> i & 1 == 1).collect();
                let got = eval::auc(&s, &y).ok();
                let want = auc_oracle(&s, &y);
                ensure(got.map(f64::to_bits) == want.map(f64::to_bits), || {
                    format!("auc {s:?} {y:?}: {got:?} vs {want:?}")
                })?;
                let got = eval::average_precision(&s, &y).ok();
                let want = ap_oracle(&s, &y);
                ensure(got.map(f64::to_bits) == want.map(f64::to_bits), || {
                    format!("ap {s:?} {y:?}: {got:?} vs {want:?}")
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} score/label vectors"))
}

// ---------------------------------------------------------------- 4

/// Lowest weighted Gini `2aLbL/nL + 2aRbR/nR` that beats the parent's
/// `2ab/n`; ties go to the lower feature, then the lower threshold.
fn best_split_oracle(x: &[Features], y: &[bool]) -> Option<(usize, f64)> {
    let n = x.len() as i128;
    let a = y.iter().filter(|&&v| v).count() as i128;
    // Fractions as (numerator, denominator).
    let parent = (2 * a * (n - a), n);
    let mut best: Option<((i128, i128), usize, f64)> = None;
    let less = |p: (i128, i128), q: (i128, i128)| p.0 * q.1 < q.0 * p.1;
    for f in 0..9 {
        let mut vals: Vec<f64> = x.iter().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let side = |left: bool| {
                let rows: Vec<usize> = (0..x.len()).filter(|&i| (x[i][f] <= t) == left).collect();
                let pos = rows.iter().filter(|&&i| y[i]).count() as i128;
                (pos, rows.len() as i128 - pos)
            };
            let ((al, bl), (ar, br)) = (side(true), side(false));
            let (nl, nr) = (al + bl, ar + br);
            let g = (2 * al * bl * nr + 2 * ar * br * nl, nl * nr);
            if !less(g, parent) {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bg, bf, bt)) => less(g, *bg) || (!less(*bg, g) && (f, t) < (*bf, *bt)),
            };
            if better {
                best = Some((g, f, t));
            }
        }
    }
    best.map(|(_, f, t)| (f + 1, t))
}

fn c4_split_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let grid = [-0.5, 0.0, 0.25, 0.5, 1.0];
    let (mut splits, mut stumps) = (0, 0);
    for case in 0..50 {
        let n = rng.gen_range(2..=8);
        let x: Vec<Features> = (0..n)
            .map(|_| {
                std::array::from_fn(|_| {
                    if rng.gen_bool(0.6) {
                        grid[rng.gen_range(0..grid.len())]
                    } else {
                        rng.gen_range(-1.0..1.0)
                    }
                })
            })
            .collect();
        let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let tree = forest::train_tree(&x, &y, 9, rng.gen(), 1).map_err(|e| e.to_string())?;
        let want = best_split_oracle(&x, &y);
        let got = tree.root_split();
        ensure(got == want, || {
            format!("case {case}: train_tree {got:?} vs oracle {want:?} on {x:?} / {y:?}")
        })?;
        if got.is_some() {
            splits += 1;
        } else {
            stumps += 1;
        }
    }
    Ok(format!("50 sets ({splits} splits, {stumps} leaves)"))
}

// ---------------------------------------------------------------- 5

fn c5_ensemble_beats_singles() -> Outcome {
    let base = synth::preset("confounded").map_err(|e| e.to_string())?;
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let cfg = GeneratorConfig {
            seed,
            ..base.clone()
        };
        let (table, _) = synthetic_table(&cfg);
        let report = eval::leave_one_family_out(&table, &LofoConfig::new(seed))
            .map_err(|e| e.to_string())?;
        let essd = report.pooled_auc(Method::Essd).unwrap_or(f64::NAN);
        let (best_ssd, best_auc) = (1..=6u8)
            .map(|i| (i, report.pooled_auc(Method::Ssd(i)).unwrap_or(f64::NAN)))
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, v| if v.1 > acc.1 { v } else { acc },
            );
        let ok = essd >= 0.80 && essd >= best_auc;
        passes += usize::from(ok);
        lines.push(format!(
            "seed {seed}: ESSD {essd:.3} vs SSD{best_ssd} {best_auc:.3}{}",
            if ok { "" } else { " (miss)" }
        ));
    }
    let detail = format!("{passes}/5 seeds; {}", lines.join("; "));
    if passes >= 4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 6

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

fn c6_confounder_behaviour() -> Outcome {
    let cfg = synth::preset("confounded").map_err(|e| e.to_string())?;
    let (table, truth) = synthetic_table(&cfg);
    let x_of = |kind: EffectKind, k: usize| -> Vec<f64> {
        let pairs: BTreeSet<(DrugFamily, String)> = truth.pairs_of(kind).into_iter().collect();
        table
            .rows
            .iter()
            .filter(|r| pairs.contains(&(r.features.family, r.features.event_code.clone())))
            .map(|r| r.features.get(k))
            .collect()
    };
    let conf3 = x_of(EffectKind::IndicationConfounder, 3);
    let conf4 = x_of(EffectKind::IndicationConfounder, 4);
    let prog1 = x_of(EffectKind::ProgressiveEvent, 1);
    let prog2 = x_of(EffectKind::ProgressiveEvent, 2);
    let noise1 = x_of(EffectKind::CodingNoise, 1);
    let noise5 = x_of(EffectKind::CodingNoise, 5);
    for (name, v) in [
        ("confounder", &conf3),
        ("progressive", &prog1),
        ("coding noise", &noise1),
    ] {
        ensure(v.len() >= 3, || {
            format!("only {} {name} pairs reached the feature table", v.len())
        })?;
    }
    let (m3, _) = mean_sd(&conf3);
    let (m4, sd4) = mean_sd(&conf4);
    let half = 2.576 * sd4 / (conf4.len() as f64).sqrt();
    let (p1, _) = mean_sd(&prog1);
    let (p2, _) = mean_sd(&prog2);
    let (n1, _) = mean_sd(&noise1);
    let (n5, _) = mean_sd(&noise5);
    const EPS: f64 = 1e-3;
    let detail = format!(
        "confounder x3 {m3:.4} > 0, x4 {m4:.4} in +/-{half:.4}; progressive x1 {p1:.4} > x2 {p2:.4}; noise x5 {n5:.4} >= x1 {n1:.4} - {EPS}"
    );
    let ok = m3 > 0.0 && m4.abs() <= half && p1 > p2 && n5 >= n1 - EPS;
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 7

fn full_run(dir: &Path, workers: usize) -> Result<(Vec<u8>, Vec<u8>), String> {
    let ov = Overrides {
        seed: None,
        out: Some(dir.to_path_buf()),
        workers,
    };
    par::with_workers(workers, || -> Result<(), pipeline::PipelineError> {
        pipeline::cmd_generate(&GenerateSource::Preset("confounded".into()), &ov)?;
        let conf = dir.join("run.conf");
        pipeline::cmd_features(&conf, &ov)?;
        pipeline::cmd_evaluate(&conf, &ov)?;
        Ok(())
    })
    .map_err(|e| e.one_line())?;
    let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"));
    Ok((read("features.csv")?, read("report.json")?))
}

fn c7_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (one, many) = (tmp.path().join("w1"), tmp.path().join("w4"));
    let a = full_run(&one, 1)?;
    let b = full_run(&many, 4)?;
    ensure(a.0 == b.0, || {
        "features.csv differs between --workers 1 and 4".into()
    })?;
    ensure(a.1 == b.1, || {
        "report.json differs between --workers 1 and 4".into()
    })?;
    Ok(format!(
        "features.csv {} B and report.json {} B identical for workers 1 and 4",
        a.0.len(),
        a.1.len()
    ))
}

// ---------------------------------------------------------------- 8

fn c8_risk_event_rule() -> Outcome {
    let day = |s: &str| store::parse_date(s).unwrap();
    let tree_rows = [
        ("T", None, 1u8),
        ("T.1", Some("T"), 2),
        ("T.1.1", Some("T.1"), 3),
        ("TWO", Some("T.1.1"), 4),
        ("THREE", Some("T.1.1"), 4),
    ];
    let tree = EventCodeTree::from_rows(
        tree_rows
            .iter()
            .map(|(c, p, d)| TreeRow {
                code: c.to_string(),
                parent: p.map(str::to_string),
                depth: *d,
                description: String::new(),
            })
            .collect(),
        "tree",
        |i| i + 2,
    )
    .map_err(|e| e.to_string())?;
    let patient = |id: &str, yob, gender| Patient {
        patient_id: id.into(),
        year_of_birth: yob,
        gender,
        reg_start: day("2000-01-01"),
        reg_end: day("2003-12-31"),
    };
    let index = day("2001-06-01");
    let mut patients = Vec::new();
    let mut rx = Vec::new();
    let mut events = Vec::new();
    let ev = |p: &str, off: i32, code: &str| EventRow {
        patient_id: p.into(),
        day: index + off,
        event_code: code.into(),
    };
    for (i, id) in ["u1", "u2", "u3", "u4"].iter().enumerate() {
        patients.push(patient(id, 1960 + i as i32, Gender::F));
        rx.push(PrescriptionRow {
            patient_id: id.to_string(),
            day: index,
            drug_id: "DA".into(),
            bnf: "01-01".parse().unwrap(),
        });
    }
    // Two patients inside [1, 30]; a third only on the index day and a fourth at day 31.
    events.extend([
        ev("u1", 1, "TWO"),
        ev("u2", 30, "TWO"),
        ev("u3", 0, "TWO"),
        ev("u4", 31, "TWO"),
    ]);
    events.extend([
        ev("u1", 5, "THREE"),
        ev("u2", 30, "THREE"),
        ev("u3", 1, "THREE"),
        ev("u3", 2, "THREE"),
    ]);
    for (i, id) in ["n1", "n2", "n3", "n4"].iter().enumerate() {
        patients.push(patient(id, 1960 + i as i32, Gender::F));
    }
    patients.push(patient("c1", 1950, Gender::M));
    rx.push(PrescriptionRow {
        patient_id: "c1".into(),
        day: index,
        drug_id: "DB".into(),
        bnf: "01-02".parse().unwrap(),
    });
    let ds = store::Dataset::from_parts(patients, events, rx, tree, &RowOrigin::default(), vec![])
        .map_err(|e| e.to_string())?;

    let a = fam("01-01");
    let cohort =
        cohort::build_cohort(&ds, &a, &CohortParams::default()).map_err(|e| e.to_string())?;
    let rme = cohort::risk_medical_events(&ds, &cohort, 30, 3).map_err(|e| e.to_string())?;
    let two = ds.tree().lookup("TWO").unwrap();
    let three = ds.tree().lookup("THREE").unwrap();
    let counts = cohort::post_index_patient_counts(&ds, &cohort, 30);
    ensure(
        counts[two.index()] == 2 && counts[three.index()] == 3,
        || {
            format!(
                "fixture counts TWO={} THREE={}",
                counts[two.index()],
                counts[three.index()]
            )
        },
    )?;
    ensure(!rme.contains(two), || {
        "event seen in 2 patients was kept".into()
    })?;
    ensure(rme.contains(three), || {
        "event seen in 3 patients was dropped".into()
    })?;

    let mut comparators = BTreeMap::new();
    comparators.insert(a, fam("01-02"));
    let reference = [
        LabeledPair {
            family: a,
            event_code: "TWO".into(),
            label: true,
        },
        LabeledPair {
            family: a,
            event_code: "THREE".into(),
            label: false,
        },
    ];
    let table = measures::feature_matrix(
        &ds,
        &FeatureConfig::new(vec![a], comparators, 1),
        &reference,
        FeatureScope::ReferenceOnly,
    )
    .map_err(|e| e.to_string())?;
    let kept: Vec<&str> = table
        .rows
        .iter()
        .map(|r| r.features.event_code.as_str())
        .collect();
    let dropped: Vec<&str> = table
        .dropped
        .iter()
        .map(|p| p.event_code.as_str())
        .collect();
    ensure(kept == ["THREE"] && dropped == ["TWO"], || {
        format!("kept {kept:?}, dropped {dropped:?}")
    })?;
    Ok("2 patients excluded, 3 patients included".into())
}

// ----------------------------------------------------------------

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 8] = [
        (
            "pooled counts reproduce sensitivity/specificity/FPR",
            c1_published_rates,
        ),
        (
            "features x1-x9 bit-equal to brute-force scan on fixture",
            c2_measure_oracle,
        ),
        (
            "AUC/AP equal exhaustive oracles, length <= 8",
            c3_ranking_oracle,
        ),
        (
            "root split equals exhaustive best-Gini split",
            c4_split_oracle,
        ),
        (
            "confounded preset: pooled ESSD AUC >= 0.80 and >= every SSD",
            c5_ensemble_beats_singles,
        ),
        (
            "confounder classes move the features they should",
            c6_confounder_behaviour,
        ),
        (
            "byte-identical outputs across worker counts",
            c7_determinism,
        ),
        (
            "risk-event rule: 2 patients out, 3 patients in",
            c8_risk_event_rule,
        ),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} PASS [{secs:.1}s] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL [{secs:.1}s] {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
