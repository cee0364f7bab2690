//! Trains a one-hidden-layer network on Gaussian blobs with the two-phase
//! schedule and prints the per-epoch log.

use elmix::data::{make_blobs, split, SplitSpec};
use elmix::math::RandomSource;
use elmix::{train, Architecture, ClassifierModel, Objective, ScheduleSpec, TrainConfig};

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

fn main() -> elmix::Result<()> {
    let data = make_blobs(4, 100, 3, 1.5, 1)?;
    let (splits, _) = split(&data, &SplitSpec::default())?.normalized()?;
    let model = ClassifierModel::init(Architecture::Mlp1, 3, 4, &mut RandomSource::new(7))?;

    let mut cfg = TrainConfig::new(Objective::Schedule(ScheduleSpec::two_phase()), 40, 16, 0.05);
    cfg.lr_milestones = vec![(30, 0.1)];
    let report = train(model, &splits, &cfg)?;

    println!("epoch  alpha  beta     F   loss  train    val   test");
    for r in &report.epochs {
        println!(
            "{:5} {:>6} {:>5} {:>5} {:6.3} {:6.3} {:6.3} {:6.3}",
            r.epoch,
            fmt(r.alpha),
            fmt(r.beta),
            fmt(r.focus),
            r.train_loss,
            r.train_acc,
            r.val_acc,
            r.test_acc
        );
    }
    println!(
        "best validation {:.3} at epoch {:?}, test {:.3}",
        report.best_val_accuracy, report.best_val_epoch, report.test_accuracy_at_best
    );
    Ok(())
}
