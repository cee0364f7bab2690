//! Cross-entropy, expectation loss and their mixtures on a 3-class logit
//! vector, with the gradient magnitude on the target logit as `p_y` varies.

use elmix::losses::{ce_loss, el_loss, mixed_grad, mixed_loss, LossSpec, MixWeights};
use elmix::math::{softmax, LogitVector};
use elmix::schedule::focus_of;

fn main() -> elmix::Result<()> {
    let q = LogitVector::new(vec![2.0, 0.5, -1.0])?;
    let p = softmax(&q);
    println!("p = {:?}", p.as_slice());
    println!("CE = {:.4}  EL = {:.4}", ce_loss(&p, 0)?, el_loss(&p, 0)?);

    for spec in [
        LossSpec::Ce,
        LossSpec::El,
        LossSpec::focal(),
        LossSpec::Mae,
        LossSpec::Gce { q_exponent: 0.7 },
    ] {
        println!("{:>6}: {:.4}", spec.name(), spec.value(&p, 1)?);
    }

    let ladder = [(1.0, 0.0), (1.0, 1.0), (1.0, 2.5), (1.0, 5.0), (0.0, 1.0)];
    println!("\n  alpha  beta  focus   loss(y=1)");
    for (a, b) in ladder {
        let w = MixWeights::new(a, b)?;
        let f = focus_of(w)
            .map(|f| format!("{:.3}", f.focus))
            .unwrap_or_else(|_| "-".into());
        println!("{a:7} {b:5} {f:>6} {:11.4}", mixed_loss(&p, 1, w)?);
    }

    println!("\n|dL/dq_y| for two classes, p_y on the rows");
    println!("  p_y      CE   (1,2.5)      EL");
    for p_y in [0.05f64, 0.2, 0.3, 0.5, 0.7, 0.95] {
        let q = LogitVector::new(vec![(p_y / (1.0 - p_y)).ln(), 0.0])?;
        let row: Vec<String> = [(1.0, 0.0), (1.0, 2.5), (0.0, 1.0)]
            .iter()
            .map(|&(a, b)| {
                let g = mixed_grad(&q, 0, MixWeights::new(a, b).unwrap()).unwrap();
                format!("{:8.4}", g.grad_logits[0].abs())
            })
            .collect();
        println!("{p_y:5} {}", row.join("  "));
    }
    Ok(())
}
