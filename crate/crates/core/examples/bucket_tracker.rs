//! Tracks how test samples move between the correct, wrong-with-high-p_y and
//! wrong-with-low-p_y buckets while the schedule switches from CE to a mixture.

use elmix::analysis::{bucket_partition, bucket_transition, format_percent, BUCKET_NAMES};
use elmix::data::{make_blobs, split, SplitSpec};
use elmix::math::RandomSource;
use elmix::{train, Architecture, ClassifierModel, Objective, ScheduleSpec, TrainConfig};

fn main() -> elmix::Result<()> {
    let data = make_blobs(4, 120, 2, 1.2, 11)?;
    let (splits, _) = split(&data, &SplitSpec::default())?.normalized()?;
    let model = ClassifierModel::init(Architecture::Mlp1, 2, 4, &mut RandomSource::new(3))?;
    let mut cfg = TrainConfig::new(Objective::Schedule(ScheduleSpec::two_phase()), 40, 16, 0.05);
    cfg.snapshot_epochs = vec![37, 39];
    let report = train(model, &splits, &cfg)?;

    for s in &report.snapshots {
        let (c, wh, wl) = bucket_partition(s).sizes();
        println!("epoch {}: correct {c}, wrong high {wh}, wrong low {wl}", s.epoch());
    }
    let t = bucket_transition(&report.snapshots[0], &report.snapshots[1])?;
    println!("bucket at epoch 37 -> correct / wrong at epoch 39");
    for (name, [right, wrong]) in BUCKET_NAMES.iter().zip(t.counts) {
        let n = (right + wrong).max(1);
        println!(
            "{name:>10}: {right} ({}) / {wrong} ({})",
            format_percent(right, n),
            format_percent(wrong, n)
        );
    }
    Ok(())
}
