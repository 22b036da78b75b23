//! Runs a built-in example and prints one line per iteration.
//!
//! `cargo run --release --example run_builtin -- ex1 [out_dir] [restarts]`
//! Sweep members are named `ex2-dt01-N{n}`.

use std::path::PathBuf;

use rampc::config::{builtin, sweep_configs};
use rampc::rampc::{run, RunOptions};

fn main() {
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "ex1".into());
    let out_dir = args.next().filter(|s| !s.is_empty()).map(PathBuf::from);
    let restarts = args.next().and_then(|s| s.parse().ok());
    let cfg = builtin(&name)
        .ok()
        .or_else(|| sweep_configs().into_iter().find(|c| c.name == name))
        .expect("known example or sweep member");
    let outcome = run(
        &cfg,
        &RunOptions {
            out_dir,
            restarts,
            ..RunOptions::default()
        },
    )
    .expect("run starts");
    for (r, d) in outcome
        .reports
        .iter()
        .zip(std::iter::once(None).chain(outcome.details.iter().map(Some)))
    {
        let extra = d.map_or(String::new(), |d| {
            format!(
                "blend {} deg {} v(x0) {:.4} excluded {} shift-viol {:.1e} early {:?}",
                d.blend,
                d.certificate.deg_v,
                d.v_x0,
                d.excluded,
                d.episode.max_shift_violation(),
                d.episode.early_stop
            )
        });
        println!(
            "j={} cost={:.4} L={} delta={:?} t=({:.2},{:.2},{:.2},{:.2}) {extra}",
            r.j, r.cost, r.episode_len, r.delta_star, r.t_interp_s, r.t_gbf_s, r.t_surrogate_s, r.t_mpc_s
        );
    }
    println!("termination: {:?}", outcome.termination);
    if let Some(f) = outcome.failure {
        println!("failure: {f:?}");
    }
}
