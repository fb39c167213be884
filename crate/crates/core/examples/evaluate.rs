//! Recall of silver labels and a BM25 baseline against anchor SDGs, plus
//! the category ablation.
//!
//! cargo run --example evaluate

use std::collections::BTreeMap;

use patent_sdg::alignment::{label_corpus, CategorySet, HyperParams, SdgCorpus, ABLATION_CONFIGS};
use patent_sdg::evaluation::{ablation_suite, anchor_labels, binarize, bm25_labels, recall_scores};
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
    let refs = anchor_labels(&planted.patents);

    let silver: BTreeMap<_, _> = label_corpus(&planted.patents, &corpus, &params, CategorySet::SILVER)?
        .into_iter()
        .map(|r| (r.patent_id.clone(), binarize(&r.sdg_vector)))
        .collect();
    let report = recall_scores(&silver, &refs)?;
    println!("silver: macro {:.3}, micro {:.3}", report.macro_recall, report.micro_recall);

    let bm25 = bm25_labels(&planted.patents, &corpus, 3)?;
    let report = recall_scores(&bm25, &refs)?;
    println!("bm25:   macro {:.3}, micro {:.3}", report.macro_recall, report.micro_recall);

    println!("ablation:");
    for row in ablation_suite(&corpus, &planted.patents, &params, &ABLATION_CONFIGS)? {
        println!("  {:<30} macro {:.3}, micro {:.3}", row.categories, row.macro_recall, row.micro_recall);
    }
    Ok(())
}
