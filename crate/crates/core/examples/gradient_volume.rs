//! Area under the gradient-magnitude curve for several mixtures.

use elmix::trainer::{gradient_volume, VolumeCase};
use elmix::MixWeights;

fn main() -> elmix::Result<()> {
    println!("alpha  beta   target  nontarget");
    for (a, b) in [(1.0, 0.0), (1.0, 1.0), (1.0, 2.5), (1.0, 5.0), (0.0, 1.0)] {
        let w = MixWeights::new(a, b)?;
        println!(
            "{a:5} {b:5} {:8.5} {:10.5}",
            gradient_volume(w, VolumeCase::Target),
            gradient_volume(w, VolumeCase::Nontarget)
        );
    }
    Ok(())
}
