//! Per-epoch weights of the constant, two-phase and gradual schedules.

use elmix::schedule::{schedule_at, ScheduleSpec};

fn main() -> elmix::Result<()> {
    let total = 20;
    let specs = [
        ScheduleSpec::ConstantF0,
        ScheduleSpec::two_phase(),
        ScheduleSpec::gradual(),
    ];
    for spec in &specs {
        println!(
            "{:>7}: focus changes at epochs {:?}",
            spec.protocol(),
            spec.boundaries(total)
        );
    }
    println!(
        "\nepoch {}",
        specs.clone().map(|s| format!("{:>14}", s.protocol())).join("")
    );
    for e in 0..total {
        let cells: Vec<String> = specs
            .iter()
            .map(|s| {
                let w = schedule_at(s, e, total).unwrap();
                format!("  a={:.2} b={:.2}", w.alpha, w.beta)
            })
            .collect();
        println!("{e:5} {}", cells.join(""));
    }
    for t in [90, 100, 240] {
        println!(
            "{t} epochs: gradual {:?}, two-phase {:?}",
            specs[2].boundaries(t),
            specs[1].boundaries(t)
        );
    }
    Ok(())
}
