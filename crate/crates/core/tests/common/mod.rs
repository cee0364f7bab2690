#![allow(dead_code)]

use elmix::losses::{LossSpec, MixWeights};
use elmix::math::RandomSource;
use elmix::model::{Architecture, ClassifierModel};

/// Five-point central differences of the per-sample loss with respect to
/// every parameter: `(-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h`.
pub fn fd_gradient(model: &ClassifierModel, x: &[f64], y: usize, loss: &LossSpec, step: f64) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.param_count())
        .map(|k| {
            let theta = model.params()[k];
            let h = step * (1.0 + theta.abs());
            let mut at = |offset: f64| {
                probe.params_mut()[k] = theta + offset * h;
                probe.backward_loss(x, y, loss).unwrap().0
            };
            let d = (-at(2.0) + 8.0 * at(1.0) - 8.0 * at(-1.0) + at(-2.0)) / (12.0 * h);
            probe.params_mut()[k] = theta;
            d
        })
        .collect()
}

/// `max |a - b| / max(max |a|, max |b|)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub struct GradCase {
    pub model: ClassifierModel,
    pub x: Vec<f64>,
    pub y: usize,
    pub loss: LossSpec,
}

/// A random model, input, label and CE/EL/mixed loss, seeded by `seed`.
pub fn random_case(seed: u64) -> GradCase {
    let mut rng = RandomSource::new(seed);
    let arch = if rng.index(2) == 0 {
        Architecture::Linear
    } else {
        Architecture::Mlp1
    };
    let dim = 2 + rng.index(4);
    let classes = 2 + rng.index(4);
    let model = ClassifierModel::init(arch, dim, classes, &mut rng).unwrap();
    let x: Vec<f64> = (0..dim).map(|_| 2.0 * rng.standard_normal()).collect();
    let y = rng.index(classes);
    let loss = match rng.index(3) {
        0 => LossSpec::Ce,
        1 => LossSpec::El,
        _ => LossSpec::from(MixWeights::new(rng.uniform_range(0.0, 3.0), rng.uniform_range(0.0, 6.0)).unwrap()),
    };
    GradCase { model, x, y, loss }
}

/// Whether some probe of [`fd_gradient`] moves a hidden pre-activation to
/// within twice its own displacement of the ReLU kink.
pub fn straddles_kink(model: &ClassifierModel, x: &[f64], step: f64) -> bool {
    if model.architecture() != Architecture::Mlp1 {
        return false;
    }
    let l = &model.layers()[0];
    let p = model.params();
    let reach = |k: usize, coef: f64| 2.0 * step * (1.0 + p[k].abs()) * coef.abs();
    (0..l.cols).any(|j| {
        let b = l.bias.start + j;
        let a = p[b]
            + (0..l.rows)
                .map(|i| x[i] * p[l.weights.start + i * l.cols + j])
                .sum::<f64>();
        let widest = (0..l.rows)
            .map(|i| reach(l.weights.start + i * l.cols + j, x[i]))
            .fold(reach(b, 1.0), f64::max);
        a.abs() <= 2.0 * widest
    })
}
