//! Leave-one-domain-out experiment on a synthetic suite.
//!
//! cargo run --release -p fedclip-core --example desk_experiment -- [lr] [rounds] [data_seed]

use fedclip_core::config::{Algorithm, TrainSettings};
use fedclip_core::data::{generate_synthetic_suite, SynthSpec};
use fedclip_core::evaluation::{evaluate_run, MultiSeedReport};
use fedclip_core::federation::run_federation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let lr: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5e-4);
    let rounds: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(50);
    let data_seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);

    let suite = generate_synthetic_suite(&SynthSpec {
        n_domains: 4,
        n_per_domain: 200,
        dim: 32,
        n_classes: 4,
        shift: 0.5,
        seed: data_seed,
    })?;
    let start = std::time::Instant::now();
    for target in 0..suite.len() {
        let clients: Vec<_> = (0..suite.len()).filter(|&i| i != target).map(|i| suite[i].clone()).collect();
        let task = format!("target-{}", suite[target].domain_name);
        print!("{task}:");
        for alg in [Algorithm::ZeroShot, Algorithm::LocalOnly, Algorithm::Fedclip, Algorithm::FedproxAdapter] {
            let settings = TrainSettings { algorithm: alg, lr, rounds, ..TrainSettings::default() };
            let mut runs = Vec::new();
            for seed in 0..3 {
                let run = run_federation(&clients, &settings, seed)?;
                runs.push(evaluate_run(&run, &task, &clients, Some(&suite[target]))?);
            }
            let rep = MultiSeedReport::from_runs(runs)?;
            print!(
                "  {} gen {:.4} pers {:.4} comp {:.4}",
                alg,
                rep.mean.generalization.as_ref().unwrap().accuracy,
                rep.mean.personalization_average,
                rep.mean.comprehensive
            );
        }
        println!();
    }
    println!("elapsed {:?}", start.elapsed());
    Ok(())
}
