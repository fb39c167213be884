//! Soft SDG labels for the fixture patents, once with the silver channel
//! set and once with all three categories.
//!
//! cargo run --example label

use patent_sdg::alignment::{label_corpus, CategorySet, HyperParams, SdgCorpus};
use patent_sdg::synthetic::fixture_corpus;

fn main() -> patent_sdg::Result<()> {
    let planted = fixture_corpus();
    let corpus = SdgCorpus::new(planted.docs)?;
    let params = HyperParams {
        tau_function: 0.5,
        tau_solution: 0.5,
        tau_application: 0.5,
        top_n: 3,
        rrf_k: 60.0,
    };
    for categories in [CategorySet::SILVER, CategorySet::ALL] {
        println!("categories: {categories}");
        for record in label_corpus(&planted.patents, &corpus, &params, categories)? {
            let nonzero: Vec<String> = record
                .sdg_vector
                .components()
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, v)| format!("SDG{}={v:.3}", i + 1))
                .collect();
            let note = if record.no_match { " (no match)" } else { "" };
            println!("  {}: {}{note}", record.patent_id, nonzero.join(" "));
        }
    }
    Ok(())
}
