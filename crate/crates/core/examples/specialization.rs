//! Trains a mixture on the default two-group graph and compares it with
//! single-expert baselines.
//!
//! `cargo run --release --example specialization [lr] [seed]`

use mowst::graph::{generate_specialization_graph, Graph, NodeGroup, SpecializationParams, Split};
use mowst::simplex::argmax;
use mowst::tensor::Tensor;
use mowst::training::{train, train_baseline, TrainConfig, Turn};

fn test_accuracy(pred: &Tensor, g: &Graph) -> f64 {
    let test = &g.splits().test;
    let hits = test.iter().filter(|&&v| argmax(pred.row(v)) == g.labels()[v]).count();
    hits as f64 / test.len() as f64
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = SpecializationParams::default();
    let g = generate_specialization_graph(params)?;
    let mut cfg = TrainConfig::default();
    let mut args = std::env::args().skip(1);
    if let Some(lr) = args.next() {
        cfg.lr = lr.parse()?;
    }
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse()?;
    }

    let (model, report) = train(&cfg, &g)?;
    let out = model.output(&g)?;
    let (mut feat, mut struc) = (Vec::new(), Vec::new());
    for &v in &g.splits().train {
        match NodeGroup::of(v, params.n_per_group) {
            NodeGroup::FeatureSignal => feat.push(out.confidence[v]),
            _ => struc.push(out.confidence[v]),
        }
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    println!(
        "mean weak confidence: feature group {:.3}, structure group {:.3} ({} epochs)",
        mean(&feat),
        mean(&struc),
        report.losses.len()
    );
    for row in report.metrics.iter().filter(|m| m.split == Split::Test) {
        println!("mixture {} test accuracy {:.3}", row.mode, row.accuracy);
    }
    let weak = train_baseline(&cfg, &g, Turn::Weak)?;
    let strong = train_baseline(&cfg, &g, Turn::Strong)?;
    println!("weak-only {:.3}", test_accuracy(&weak.predict(&g)?, &g));
    println!("strong-only {:.3}", test_accuracy(&strong.predict(&g)?, &g));
    Ok(())
}
