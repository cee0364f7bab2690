//! Trace term, escaping-efficiency estimate and mixed-loss bound for CE and
//! mixtures at minima of a linear classifier.

use elmix::data::make_blobs;
use elmix::escape::{escape_quantities, escape_study, EscapeStudyConfig, EtaConvention, StudyNoise};
use elmix::math::RandomSource;
use elmix::{Architecture, ClassifierModel, LossSpec};

fn main() -> elmix::Result<()> {
    let data = make_blobs(3, 20, 2, 0.8, 2)?;
    let model = ClassifierModel::init(Architecture::Linear, 2, 3, &mut RandomSource::new(4))?;
    let cfg = EscapeStudyConfig {
        time: 0.5,
        lr: 0.1,
        batch_size: 8,
        dt: 0.01,
        trajectories: 1000,
        seed: 9,
        l2: 1e-2,
        eta: EtaConvention::Scaled,
        noise: StudyNoise::Covariance,
        refine_steps: 2000,
        refine_lr: 0.5,
    };
    let losses = [
        LossSpec::Ce,
        LossSpec::Mixed { alpha: 1.0, beta: 1.0 },
        LossSpec::Mixed { alpha: 1.0, beta: 2.5 },
        LossSpec::Mixed { alpha: 1.0, beta: 5.0 },
    ];
    let rows = escape_study(&model, &data, &losses, &cfg)?;
    println!(
        "{:>10} {:>10} {:>10} {:>10} {:>10}",
        "loss", "Tr(HS)", "estimate", "simulated", "bound"
    );
    for r in &rows {
        let label = r.beta.map(|b| format!("beta={b}")).unwrap_or_else(|| r.method.clone());
        let bound = r
            .rhs_bound
            .map(|b| format!("{b:10.4}"))
            .unwrap_or_else(|| format!("{:>10}", "-"));
        println!(
            "{label:>10} {:10.5} {:10.5} {:10.5} {bound}",
            r.trace_term, r.ee_estimate, r.ee_simulated
        );
    }
    let q = escape_quantities(&model, &data)?;
    println!("M = max p_y at the initial model: {:.4}", q.m_cap);
    Ok(())
}
