//! Forward-parity probe: load a weight file that also carries a test
//! input and the reference feature activations, run the named backbone,
//! and report the largest deviation.
//!
//! The file is an ordinary weight file plus two reserved entries:
//! `__probe_input__` (a `[n, 3, h, w]` batch) and `__probe_feature__`
//! (the reference `[n, c, h', w']` feature map for that batch).
//!
//! Usage: probe_parity <backbone_id> <weights.pxwt> [tolerance]

use std::process::ExitCode;

use poxscreen_core::backbone::build_model;
use poxscreen_core::nn::load_weight_file;
use poxscreen_core::{HeadConfig, WeightInit};

const INPUT_KEY: &str = "__probe_input__";
const FEATURE_KEY: &str = "__probe_feature__";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.len() < 3 {
        eprintln!("usage: probe_parity <backbone_id> <weights.pxwt> [tolerance]");
        return ExitCode::from(2);
    }
    let id = &args[1];
    let tolerance: f32 = args
        .get(3)
        .map(|s| s.parse().expect("tolerance"))
        .unwrap_or(2e-3);

    let mut entries = load_weight_file(std::path::Path::new(&args[2])).expect("read weight file");
    let mut take = |key: &str| {
        let at = entries
            .iter()
            .position(|e| e.name == key)
            .unwrap_or_else(|| panic!("file has no {key} entry"));
        entries.swap_remove(at).value
    };
    let input = take(INPUT_KEY);
    let expected = take(FEATURE_KEY);

    let mut handle = build_model(id, &HeadConfig::default(), false, &WeightInit::Random { seed: 0 })
        .expect("build model");
    let missing = handle
        .graph_mut()
        .import_entries(entries)
        .expect("import weights");
    // Only the classifier head may be absent from a backbone file.
    for name in &missing {
        assert!(
            name.starts_with("head_dense") || name.starts_with("predictions"),
            "backbone weight missing from file: {name}"
        );
    }

    let acts = handle.graph().forward_eval(input).expect("forward");
    let got = &acts.values[handle.feature_node()];
    assert_eq!(got.shape(), expected.shape(), "feature shape");

    let scale = expected.iter().fold(0f32, |m, v| m.max(v.abs())).max(1e-6);
    let mut worst = 0f32;
    for (a, b) in got.iter().zip(expected.iter()) {
        worst = worst.max((a - b).abs());
    }
    let rel = worst / scale;
    println!(
        "{id}: max abs diff {worst:.3e}, feature scale {scale:.3e}, rel {rel:.3e}"
    );
    if rel <= tolerance {
        println!("{id}: PASS");
        ExitCode::SUCCESS
    } else {
        println!("{id}: FAIL (tolerance {tolerance:.1e})");
        ExitCode::FAILURE
    }
}
