//! Timing/accuracy probe for the desk-scale training protocol.
//! Usage: probe_train [run_seed]

use std::time::Instant;
use stconv::actions::{synth_glyph_dataset, synth_scaled_dataset};
use stconv::basis::{SamplingRule, ScaleGrid};
use stconv::model::{CnnModel, ScdcfModel};
use stconv::network::*;
use stconv::trainer::*;

fn scdcf_spec(m1: usize, m2: usize) -> NetworkSpec {
    NetworkSpec {
        m_in: 1,
        grid: ScaleGrid::new(1.0, 5).unwrap(),
        k: 15,
        k_alpha: 3,
        j0: 1.5,
        padding: PadMode::Replicate,
        activation: Activation::Relu,
        rule: SamplingRule::CellAverage,
        layers: vec![
            ConvLayerSpec { m_out: m1, l: 7, l_alpha: 3, avg_pool: true, batchnorm: true },
            ConvLayerSpec { m_out: m2, l: 7, l_alpha: 3, avg_pool: true, batchnorm: true },
        ],
    }
}

fn main() {
    let run_seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    println!("=== run seed {} ===", run_seed);
    let (m1, m2, hidden) = (6, 8, 48);
    let source = synth_glyph_dataset(4500, 100, 28).unwrap();
    let scaled = synth_scaled_dataset(&source, run_seed, 28).unwrap();
    let train_set = scaled.subset(0..2000);
    let eval_set = scaled.subset(2000..2500);
    let test_set = scaled.subset(2500..4500);
    let config = TrainConfig::desk_default(run_seed);

    let mut model = ScdcfModel::new(scdcf_spec(m1, m2), 28, hidden, 10, run_seed).unwrap();
    let n_params: usize = model.visit_params().iter().map(|s| s.len()).sum();
    let t0 = Instant::now();
    train(&mut model, &train_set, &eval_set, &config).unwrap();
    let test_acc = evaluate(&mut model, &test_set).unwrap();
    println!("scdcf ({} params) run: {:.1}s test acc {:.4}", n_params, t0.elapsed().as_secs_f64(), test_acc);

    let mut cnn = CnnModel::new(1, 28, &[(5, 7, true, true), (8, 7, true, true)], hidden, 10, run_seed).unwrap();
    let n_params: usize = cnn.visit_params().iter().map(|s| s.len()).sum();
    let t0 = Instant::now();
    train(&mut cnn, &train_set, &eval_set, &config).unwrap();
    let test_acc = evaluate(&mut cnn, &test_set).unwrap();
    println!("cnn ({} params) run: {:.1}s test acc {:.4}", n_params, t0.elapsed().as_secs_f64(), test_acc);
}
