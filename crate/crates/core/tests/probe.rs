// temporary hyperparameter probe, not part of the suite
use rolldiff_core::denoiser::{smoothed, train, DenoiserConfig, TrainConfig};
use rolldiff_core::diffusion::make_schedule;
use rolldiff_core::fixtures::fixture_rolls;

#[test]
#[ignore]
fn probe_training_dynamics() {
    let rolls = fixture_rolls(8, 32);
    let dataset: Vec<_> = rolls.iter().map(|r| r.to_tensor()).collect();

    for (beta_start, beta_end) in [(1e-3, 0.05), (0.01, 0.25), (0.02, 0.3)] {
        let schedule = make_schedule(50, beta_start, beta_end).unwrap();
        for lr in [0.1, 0.5, 1.0, 2.0] {
            for momentum in [0.0, 0.9] {
                let config = TrainConfig {
                    epochs: 500, // batch 8 of 8 -> 1 step per epoch
                    batch: 8,
                    lr,
                    momentum,
                    seed: 11,
                    denoiser: DenoiserConfig {
                        width_mult: 1,
                        embed_dim: 32,
                    },
                };
                let start = std::time::Instant::now();
                match train(&dataset, &schedule, &config, |_, _| {}) {
                    Ok(outcome) => {
                        let (head, tail) = smoothed(&outcome.losses, 50);
                        let mid = smoothed(&outcome.losses[..250], 50).1;
                        println!(
                            "betas ({beta_start},{beta_end}) lr {lr:4} mom {momentum:3}: head {head:.3} mid {mid:.3} tail {tail:.3}  ratio {:.3}  ({:?})",
                            tail / head,
                            start.elapsed()
                        );
                    }
                    Err(e) => println!(
                        "betas ({beta_start},{beta_end}) lr {lr:4} mom {momentum:3}: FAILED {e}"
                    ),
                }
            }
        }
    }
}
