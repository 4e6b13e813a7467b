//! Statistical checks that the generator plants what it claims to.

use std::collections::BTreeMap;

use essd::measures::{self, FeatureConfig};
use essd::store::DrugFamily;
use essd::synth::{self, GeneratorConfig};

const A: &str = "05-01-01-01";
const B: &str = "05-01-01-02";
const TARGET: &str = "M1.1.1.1.1";
const QUIET: &str = "M2.1.1.1.1";
const RATE: f64 = 0.01;

fn config(seed: u64, n_patients: usize, rr: f64) -> GeneratorConfig {
    let text = format!(
        "seed = {seed}
n_patients = {n_patients}
study_years = 8
tree_branching = 3,3,2,2,2
background_rate_min = 0.001
background_rate_max = 0.003
family = {A} 0.003 M3.1.1.1.1
family = {B} 0.003 M3.2.1.1.1
rate = {TARGET} {RATE}
rate = {QUIET} {RATE}
effect = {A} {TARGET} adr {rr}
"
    );
    GeneratorConfig::parse(&text, "test").unwrap()
}

/// x1 of (A, TARGET) and the number of new users behind it.
fn x1(cfg: &GeneratorConfig) -> (f64, u32) {
    let syn = synth::generate(cfg).unwrap();
    let (a, b): (DrugFamily, DrugFamily) = (A.parse().unwrap(), B.parse().unwrap());
    let fc = FeatureConfig::new(vec![a, b], BTreeMap::from([(a, b), (b, a)]), cfg.seed);
    let study = measures::study_family(&syn.dataset, &a, &fc).unwrap();
    let code = syn.dataset.tree().lookup(TARGET).unwrap();
    let f = study.measures.features(&syn.dataset, code);
    (f.get(1), f.support.n_target)
}

#[test]
fn null_effect_gives_zero_mean_x1_across_replicates() {
    let xs: Vec<f64> = (1..=30).map(|s| x1(&config(s, 4000, 1.0)).0).collect();
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(sd > 0.0);
    assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
}

#[test]
fn planted_relative_risk_shows_up_in_x1() {
    let rr = 5.0;
    let (x, n) = x1(&config(11, 14_000, rr));
    assert!(n >= 1500, "only {n} new users");
    // After-window risk RR*r against r before; the windows are independent.
    let (pa, pb) = (rr * RATE, RATE);
    let sd = ((pa * (1.0 - pa) + pb * (1.0 - pb)) / f64::from(n)).sqrt();
    let expected = pa - pb;
    assert!(
        (x - expected).abs() <= 2.576 * sd,
        "x1 {x}, expected {expected} +/- {}",
        2.576 * sd
    );
}

#[test]
fn background_rate_matches_the_configured_rate() {
    let syn = synth::generate(&config(5, 6000, 1.0)).unwrap();
    let ds = &syn.dataset;
    let quiet = ds.tree().lookup(QUIET).unwrap();
    let mut hits = 0u64;
    let mut blocks = 0.0;
    for (i, p) in ds.patients().iter().enumerate() {
        blocks += f64::from(p.reg_end - p.reg_start + 1) / 30.0;
        hits += ds.events_of(i).iter().filter(|e| e.code == quiet).count() as u64;
    }
    let observed = hits as f64 / blocks;
    let sd = (RATE * (1.0 - RATE) / blocks).sqrt();
    assert!(
        (observed - RATE).abs() <= 4.0 * sd,
        "observed {observed} over {blocks} months"
    );
}

#[test]
fn ground_truth_labels_planted_pairs() {
    let syn = synth::generate(&config(2, 1000, 5.0)).unwrap();
    let a: DrugFamily = A.parse().unwrap();
    let labelled: Vec<_> = syn
        .truth
        .pairs
        .iter()
        .filter(|p| p.family == a && p.event_code == TARGET)
        .collect();
    assert_eq!(labelled.len(), 1);
    assert!(labelled[0].label);
}
