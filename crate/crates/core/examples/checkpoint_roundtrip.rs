//! Saves a trained model, reloads it and checks predictions agree; also
//! writes and reloads a dataset as CSV.

use elmix::data::{load_csv, make_blobs, split, write_csv, CsvSchema, SplitSpec};
use elmix::math::RandomSource;
use elmix::{train, Architecture, ClassifierModel, LossSpec, Objective, TrainConfig};

fn main() -> elmix::Result<()> {
    let dir = std::env::temp_dir().join("elmix_checkpoint");
    std::fs::create_dir_all(&dir)?;
    let data = make_blobs(3, 30, 2, 1.0, 8)?;
    write_csv(&data, dir.join("blobs.csv"))?;
    let reloaded = load_csv(dir.join("blobs.csv"), &CsvSchema::default())?;
    println!("dataset: {} rows written, {} read back", data.len(), reloaded.len());

    let splits = split(&reloaded, &SplitSpec::default())?;
    let model = ClassifierModel::init(Architecture::Mlp1, 2, 3, &mut RandomSource::new(1))?;
    let report = train(
        model,
        &splits,
        &TrainConfig::new(Objective::Loss(LossSpec::Ce), 15, 8, 0.05),
    )?;
    report.final_model.save_checkpoint(dir.join("model.ckpt"))?;
    let back = ClassifierModel::load_checkpoint(dir.join("model.ckpt"))?;
    println!(
        "test accuracy {:.3} before, {:.3} after reload; params identical: {}",
        report.final_model.accuracy(&splits.test)?,
        back.accuracy(&splits.test)?,
        back.params() == report.final_model.params()
    );
    Ok(())
}
