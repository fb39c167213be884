//! Overlapping modularity across the affinity exponent, on planted
//! communities and on a random graph.
//!
//! cargo run --release --example modularity

use std::time::Instant;

use patent_sdg::homophily::{community_terms, modularity_sweep};
use patent_sdg::synthetic::{planted_communities, random_graph, random_memberships};

fn main() -> patent_sdg::Result<()> {
    let ps = [0.35, 0.5, 0.75, 1.0];

    let (g, w) = planted_communities(10, 0.6)?;
    println!("planted: {} nodes, {} arcs", g.node_count(), g.arc_count());
    for (p, q) in modularity_sweep(&g, &w, &ps)? {
        println!("  p = {p:<4} Q = {q:.4}");
    }
    for (c, t) in community_terms(&g, &w, 0.5)?.iter().enumerate() {
        println!("  community {c}: observed {:.4}, expected {:.4}", t.observed, t.expected);
    }

    let g = random_graph(33_000, 1_000_000, 1)?;
    let w = random_memberships(33_000, 17, 2)?;
    let start = Instant::now();
    let sweep = modularity_sweep(&g, &w, &ps)?;
    println!("random: {} arcs, sweep in {:.2?}", g.arc_count(), start.elapsed());
    for (p, q) in sweep {
        println!("  p = {p:<4} Q = {q:.4}");
    }
    Ok(())
}
