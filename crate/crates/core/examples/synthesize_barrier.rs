//! Certifies the initial policy of a built-in example and checks the
//! certificate by sampling and closed-loop rollouts.
//!
//! `cargo run --release --example synthesize_barrier -- ex1`

use rampc::config::builtin;
use rampc::gbf::{check_reach, synthesize, verify_certificate, SynthesisOptions, VERIFY_TOLERANCE};

fn main() {
    let name = std::env::args().nth(1).unwrap_or_else(|| "ex1".into());
    let cfg = builtin(&name).expect("known example");
    let sets = cfg.sets().expect("valid sets");
    let controller = cfg.initial_controller().expect("feedback initial policy");
    let sys = cfg.system();
    let opts = SynthesisOptions {
        degrees: cfg.barrier_degrees.clone(),
        ..SynthesisOptions::default()
    };
    let syn = synthesize(&sys, &controller, &sets, cfg.lambda, cfg.bound, &cfg.x0, &opts).expect("certificate");
    println!(
        "degree {} with {} saturation pieces, kkt {:.1e}",
        syn.deg_v,
        syn.pieces.len(),
        syn.kkt_residual
    );
    println!("v(x0) = {:.4}", syn.barrier().value(&cfg.x0));
    let report = verify_certificate(&syn.reach_avoid, &sys, &controller, &sets, &cfg.x0, 10_000, 1);
    println!(
        "worst sampled slack {:.3e}, passes: {}",
        report.worst(),
        report.passes(VERIFY_TOLERANCE)
    );
    let reach = check_reach(&syn.reach_avoid, &sys, &controller, &sets, 100, 2);
    println!(
        "{} of {} rollouts reached the target in time",
        reach.reached, reach.rollouts
    );
}
