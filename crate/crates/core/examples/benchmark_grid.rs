//! A small benchmark grid over synthetic datasets followed by the report:
//! wins, accuracy deltas, mean ranks, performance profiles and Friedman.

use elmix::analysis::{dolan_more_profile, friedman_statistic, summary_stats, tau_grid};
use elmix::cli::{run_grid, synthetic_suite, ExperimentConfig, TrainerTemplate};
use elmix::data::SplitSpec;
use elmix::Architecture;

fn main() -> elmix::Result<()> {
    let dir = std::env::temp_dir().join("elmix_benchmark_grid");
    let cfg = ExperimentConfig {
        datasets: synthetic_suite(6, 42),
        split: SplitSpec::default(),
        normalize: true,
        architectures: vec![Architecture::Linear],
        methods: ExperimentConfig::standard_methods(),
        trainer: TrainerTemplate {
            epochs: 20,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            decay_biases: true,
            lr_milestones: vec![],
            shuffle: true,
        },
        lrs: vec![0.05, 0.01, 0.005],
        seeds: vec![1, 2],
        output_dir: dir.clone(),
        parallelism: None,
        baseline: Some("ce".into()),
        taus: None,
    };
    let grid = run_grid(&cfg, &dir)?;
    let table = &grid.tables[0].1;

    println!("{:>8} {:>5} {:>8} {:>9}", "method", "wins", "dAcc%", "mean rank");
    for s in summary_stats(table, "ce")? {
        println!(
            "{:>8} {:5} {:8.2} {:9.2}",
            s.method,
            s.wins,
            100.0 * s.delta_acc,
            s.mean_rank
        );
    }
    let profile = dolan_more_profile(table, &tau_grid(0.9, 5)?)?;
    println!("\ntau    {}", profile.methods.join("  "));
    for (i, tau) in profile.taus.iter().enumerate() {
        let row: Vec<String> = profile.rho.iter().map(|r| format!("{:.2}", r[i])).collect();
        println!("{tau:.3}  {}", row.join("  "));
    }
    let f = friedman_statistic(table)?;
    println!(
        "\nFriedman chi2 = {:.3} (df {}), p = {:.4}",
        f.tie_corrected, f.df, f.p_value
    );
    println!("runs and tables in {}", dir.display());
    Ok(())
}
