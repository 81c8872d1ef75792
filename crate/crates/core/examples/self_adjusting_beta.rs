//! Feed a shrinking stream of absolute regression residuals through the
//! running statistics and watch the control point follow them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use shotmask::losses::{smooth_l1_value, SelfAdjustState};

fn main() {
    let mut state = SelfAdjustState::new(0.11, false);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for step in 0..=400 {
        // residual scale decays as a detector would improve
        let scale = 0.5 * (-(step as f64) / 150.0).exp() + 0.02;
        let noise = Normal::new(0.0, scale).unwrap();
        let residuals: Vec<f64> = (0..4 * 32).map(|_| noise.sample(&mut rng)).collect();
        state.update(&residuals);
        if step % 50 == 0 {
            let b = state.betas();
            println!(
                "step {step:>3}: mean |r| {:.4}  var {:.5}  beta {:.4} {:.4} {:.4} {:.4}",
                state.running_mean[0], state.running_var[0], b[0], b[1], b[2], b[3]
            );
        }
    }
    let beta = state.beta(0);
    println!("loss at r = 0.05: {:.5} (fixed 0.11: {:.5})", smooth_l1_value(0.05, beta), smooth_l1_value(0.05, 0.11));
}
