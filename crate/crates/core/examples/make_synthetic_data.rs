//! Generates the toy moving-square datasets used by the test suites and the
//! README walkthrough:
//!
//! ```text
//! cargo run --example make_synthetic_data -- <out_dir>
//! ```
//!
//! Writes `<out_dir>/train` (one 5-frame sequence) and `<out_dir>/holdout`
//! (four 5-frame sequences), both in the flat_pairs layout.

use std::path::PathBuf;

use vsod_core::synthetic;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("synth_data"));
    synthetic::write_sequence(&out.join("train"), &synthetic::toy_train_spec())
        .expect("write train sequence");
    synthetic::write_dataset(&out.join("holdout"), &synthetic::toy_holdout_specs())
        .expect("write holdout sequences");
    println!("wrote {}", out.display());
}
