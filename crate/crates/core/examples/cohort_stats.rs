//! Prints summary statistics of a generated cohort.
//!
//! `cargo run --release --example cohort_stats -- [n_speakers] [seed]`

use fatigue_core::data::DemographicField;
use fatigue_core::synthgen::{generate_cohort, CohortSpec};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut spec = CohortSpec::default();
    if let Some(n) = args.first() {
        spec.n_speakers = n.parse().expect("n_speakers must be an integer");
    }
    if let Some(s) = args.get(1) {
        spec.seed = s.parse().expect("seed must be an integer");
    }
    let ds = generate_cohort(&spec).expect("valid spec");
    let hours: Vec<f64> = ds.observations().map(|o| o.target.hours()).collect();
    let n = hours.len() as f64;
    let mean = hours.iter().sum::<f64>() / n;
    let std = (hours.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n).sqrt();
    let pos = ds.observations().filter(|o| o.target.label()).count() as f64 / n;
    println!("speakers      {}", ds.speakers().len());
    println!("observations  {}", hours.len());
    println!("per speaker   {:.2}", n / ds.speakers().len() as f64);
    println!("hours mean    {mean:.2}");
    println!("hours std     {std:.2}");
    println!("positives     {:.1}%", pos * 100.0);
    for field in DemographicField::ALL {
        let mut counts = std::collections::BTreeMap::new();
        for s in ds.speakers() {
            *counts.entry(field.group_of(&s.demographics())).or_insert(0usize) += 1;
        }
        let parts: Vec<String> = counts.iter().map(|(g, c)| format!("{g} {c}")).collect();
        println!("{:<13} {}", field.as_str(), parts.join(", "));
    }
}
