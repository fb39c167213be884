//! Cache-first concept extraction with a stand-in service, then embedding
//! with the hashing embedder.
//!
//! cargo run --example extract

use patent_sdg::extraction::{
    embed_concepts, ConceptService, ConceptTexts, Embedder, ExtractionConfig, Extractor, HashEmbedder,
};

/// Splits on sentence boundaries instead of calling a model.
struct Sentences;

impl ConceptService for Sentences {
    fn extract(&self, text: &str) -> patent_sdg::Result<ConceptTexts> {
        let mut s = text.split('.').map(str::trim).filter(|s| !s.is_empty()).map(String::from);
        Ok(ConceptTexts {
            functions: s.next().into_iter().collect(),
            solutions: s.next().into_iter().collect(),
            applications: s.collect(),
        })
    }
}

fn main() -> patent_sdg::Result<()> {
    let cache = tempfile::tempdir().expect("temporary directory");
    let config = ExtractionConfig {
        cache_dir: cache.path().to_path_buf(),
        offline: false,
        ..Default::default()
    };
    let service = Sentences;
    let extractor = Extractor::new(&config, Some(&service))?;
    let texts = vec![
        "Removes dyes from wastewater. A hemoglobin composite adsorbent. Textile effluent treatment.".to_string(),
        "Produces hydrogen. A solar-driven electrolyser. Clean fuel for transport.".to_string(),
    ];
    let concepts = extractor.extract_all(&texts)?;
    let embedder = HashEmbedder::new(32)?;
    for (text, c) in texts.iter().zip(&concepts) {
        let set = embed_concepts(c, &embedder, embedder.dim())?;
        println!("{}", text.split('.').next().unwrap_or_default());
        println!("  functions {:?}", c.functions);
        println!("  solutions {:?}", c.solutions);
        println!("  {} application embeddings", set.applications.len());
    }

    // A second extractor with no service answers from the cache.
    let offline = Extractor::new(&ExtractionConfig { offline: true, ..config }, None)?;
    println!("cached: {}", offline.extract(&texts[0])? == concepts[0]);
    Ok(())
}

