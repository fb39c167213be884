//! Trains the non-negative linear regressor on a planted problem and
//! reports per-SDG errors.
//!
//! cargo run --example regress

use patent_sdg::regressor::{error_table, train, TrainConfig};
use patent_sdg::synthetic::planted_regression;

fn main() -> patent_sdg::Result<()> {
    let (batch, _truth) = planted_regression(200, 8, 4)?;
    let config = TrainConfig {
        lr: 0.2,
        epochs: 300,
        seed: 4,
        ..Default::default()
    };
    let trained = train(&batch, &config)?;
    for (epoch, loss) in trained.history.iter().enumerate().step_by(50) {
        println!("epoch {epoch:>3}: loss {loss:.3e}");
    }
    let pred = trained.model.predict(batch.features.view())?;
    let table = error_table(pred.view(), batch.targets.view())?;
    for (j, e) in table.per_sdg.iter().enumerate().take(5) {
        println!("SDG{}: mse {:.2e}, mae {:.2e}", j + 1, e.mse, e.mae);
    }
    println!("all:  mse {:.2e}, mae {:.2e}", table.mse, table.mae);
    Ok(())
}
