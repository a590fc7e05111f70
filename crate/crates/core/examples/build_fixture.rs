//! Regenerate the committed toy fixture.
//!
//! cargo run -p naegen-core --example build_fixture [seed] [out_dir]

use std::path::PathBuf;

use naegen_core::toy::{default_fixture_dir, ToyFixture, DEFAULT_FIXTURE_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(DEFAULT_FIXTURE_SEED);
    let dir = args.next().map(PathBuf::from).unwrap_or_else(default_fixture_dir);
    let fixture = ToyFixture::build(seed)?;
    let manifest = fixture.save(&dir)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}
