//! Sanitizes a search query, splits it under a character budget and checks
//! the parts against the original by truth table.
//!
//! cargo run --example split_query -- 100

use patent_sdg::query::{self, counterexample, expand_exclusions, parse, sanitize, ExpansionMode, SplitConfig};
use patent_sdg::synthetic::FIXTURE_QUERY;

fn main() -> patent_sdg::Result<()> {
    let max_chars = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100);
    let clean = sanitize(FIXTURE_QUERY)?;
    println!("sanitized ({} chars):\n  {clean}", clean.chars().count());

    let tree = parse(&clean)?;
    let parts = query::split(&tree, &SplitConfig { max_chars, max_and_chain: 3 })?;
    println!("{} parts within {max_chars} chars:", parts.len());
    for p in &parts {
        println!("  [{:>3}] {p}", p.chars().count());
    }
    let nodes: Vec<_> = parts.iter().map(|p| parse(p)).collect::<Result<_, _>>()?;
    println!("union-equivalent: {}", counterexample(&nodes, &tree)?.is_none());

    let perm = expand_exclusions(&tree, ExpansionMode::Permutation)?;
    match counterexample(&perm, &tree)? {
        Some(witness) => println!("permutation expansion differs on {witness:?}"),
        None => println!("permutation expansion is equivalent here"),
    }
    Ok(())
}
