//! Recovers planted thresholds with random search and TPE.
//!
//! cargo run --release --example calibrate

use patent_sdg::alignment::{CategorySet, SdgCorpus};
use patent_sdg::calibration::{optimize, Calibrator, SearchSpace, Strategy};
use patent_sdg::synthetic::{planted_calibration, PlantedCalibration};

fn main() -> patent_sdg::Result<()> {
    let truth = PlantedCalibration::default();
    let planted = planted_calibration(&truth, 5);
    let corpus = SdgCorpus::new(planted.docs.clone())?;
    let calibrator = Calibrator::new(&planted.patents, &corpus, CategorySet::ALL)?;
    println!(
        "planted: tau = {:?}, top_n = {} ({} patents)",
        truth.tau,
        truth.top_n,
        calibrator.len()
    );

    let space = SearchSpace {
        tau_function: [0.2, 0.4],
        tau_solution: [0.1, 0.3],
        tau_application: [0.7, 0.9],
        top_n: vec![2, 3, 4, 5, 6],
        budget: 150,
        seed: 1,
        rrf_k: 60.0,
    };
    for strategy in [Strategy::Random, Strategy::Tpe] {
        let run = optimize(&space, strategy, &calibrator)?;
        let p = run.best.params;
        println!(
            "{strategy:?}: loss {:.2e} at tau = ({:.3}, {:.3}, {:.3}), top_n = {}",
            run.best.value.unwrap_or(f64::NAN),
            p.tau_function,
            p.tau_solution,
            p.tau_application,
            p.top_n
        );
    }
    Ok(())
}
