//! Regenerates `data/sample.csv`: 250 rows, predictors x1..x3, responses
//! y1..y8, true envelope dimension 2, MAR missingness at the default rates.
//!
//! cargo run -p emenv --example make_sample -- crates/emenv/data/sample.csv

use std::path::PathBuf;

use emenv_core::runner::derive_seed;
use emenv_core::sim::{gen_full_data, gen_missingness, gen_parameters, ScenarioSpec};
use emenv::table::save_table;

fn main() {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "sample.csv".into()).into();
    let mut spec = ScenarioSpec::named("normal-omega0-1000").expect("known scenario").with_dims(250, 8, 3, 2);
    spec.seed = 1;
    let params = gen_parameters(&spec, derive_seed(spec.seed, 0)).expect("valid scenario");
    let (x, y) = gen_full_data(&params, &spec, derive_seed(spec.seed, 1));
    let mask = gen_missingness(&x, &y, &spec.missingness, derive_seed(spec.seed, 2)).expect("remapped mechanisms");
    let ds = mask.apply(&x, &y).expect("no empty rows or columns");
    save_table(&out, &ds, b',').expect("writable output");
    let (mx, my) = mask.rates();
    eprintln!("wrote {} ({} rows, missing: predictors {:.3}, responses {:.3})", out.display(), ds.n(), mx, my);
    eprintln!("true beta:\n{}", params.beta);
}
