//! Writes the bundled synthetic ICU-style dataset.
//!
//! Usage: `cargo run -p scate-core --example icu_synthetic -- <output.csv>`

use scate_core::data::{save_dataset, Schema};
use scate_core::simulation::icu_synthetic_dataset;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args().nth(1).ok_or("usage: icu_synthetic <output.csv>")?;
    save_dataset(&icu_synthetic_dataset()?, &path, &Schema::default())?;
    Ok(())
}
