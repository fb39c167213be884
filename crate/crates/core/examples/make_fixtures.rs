//! Writes the small pipeline fixture (three patents, nine SDG documents,
//! citations, features, a query and a config) into a directory.
//!
//! cargo run --example make_fixtures -- crates/core/tests/fixtures

use std::path::PathBuf;

fn main() -> patent_sdg::Result<()> {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures"));
    patent_sdg::synthetic::write_fixture_dir(&dir)?;
    println!("wrote fixture to {}", dir.display());
    Ok(())
}
