//! SDG co-occurrence from random label sets, row-normalized, and the rank
//! correlation between two co-occurrence structures.
//!
//! cargo run --example cooccur

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patent_sdg::evaluation::{cooccurrence, pearson, row_normalize, spearman};
use patent_sdg::model::SdgId;
use patent_sdg::synthetic::random_sdg_set;

fn main() -> patent_sdg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a: Vec<_> = (0..200).map(|_| random_sdg_set(&mut rng, 4)).collect();
    let b: Vec<_> = a
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.extend(random_sdg_set(&mut rng, 1));
            s
        })
        .collect();

    let (ca, cb) = (cooccurrence(&a), cooccurrence(&b));
    let norm = row_normalize(&ca);
    let first = SdgId::new(1).unwrap();
    let row: Vec<String> = SdgId::all().map(|j| format!("{:.2}", norm.get(first, j))).collect();
    println!("SDG1 row: {}", row.join(" "));

    let (x, y) = (ca.off_diagonal(), cb.off_diagonal());
    println!("pearson  {:.4}", pearson(&x, &y)?);
    println!("spearman {:.4}", spearman(&x, &y)?);
    Ok(())
}
