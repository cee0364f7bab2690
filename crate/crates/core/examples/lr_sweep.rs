//! Learning-rate sweep for CE with and without gradient-volume matching
//! against the (1, 1) mixture.

use elmix::data::{make_blobs, split, SplitSpec};
use elmix::math::RandomSource;
use elmix::trainer::{lr_sweep, volume_matched_ce_lr};
use elmix::{Architecture, ClassifierModel, LossSpec, MixWeights, Objective, TrainConfig};

fn main() -> elmix::Result<()> {
    let data = make_blobs(3, 80, 2, 0.7, 3)?;
    let (splits, _) = split(&data, &SplitSpec::default())?.normalized()?;
    let make = || ClassifierModel::init(Architecture::Linear, 2, 3, &mut RandomSource::new(5));
    let template = TrainConfig::new(Objective::Loss(LossSpec::Ce), 30, 8, 0.0);
    let base = [0.1, 0.05, 0.01, 0.005, 0.001];

    let w = MixWeights::new(1.0, 1.0)?;
    let matched: Vec<f64> = base
        .iter()
        .map(|&lr| volume_matched_ce_lr(lr, w))
        .collect::<Result<_, _>>()?;
    for (name, lrs) in [("ce", base.to_vec()), ("ce, volume matched", matched)] {
        let outcome = lr_sweep(make, &splits, &template, &lrs)?;
        println!("{name}");
        for r in &outcome.reports {
            println!(
                "  lr {:<8.5} val {:.3} test {:.3}",
                r.lr, r.best_val_accuracy, r.test_accuracy_at_best
            );
        }
        println!("  -> best lr {}", outcome.best().lr);
    }
    Ok(())
}
