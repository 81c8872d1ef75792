//! Build a small conv → relu → transposed conv → sigmoid graph and compare
//! its reverse-mode gradients with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shotmask::autodiff::gradcheck::check;
use shotmask::Tensor;

fn main() -> shotmask::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random = |shape: &[usize]| Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0));
    let inputs = vec![
        random(&[1, 2, 6, 6]),
        random(&[3, 2, 3, 3]),
        random(&[3]),
        random(&[3, 2, 2, 2]),
    ];
    let report = check(
        |g, v| {
            let h = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let h = g.relu(h)?;
            let h = g.conv_transpose2d_2x2(h, v[3], None)?;
            let h = g.sigmoid(h)?;
            g.mean(h)
        },
        &inputs,
        1e-5,
        64,
        1e-3,
    )?;
    println!(
        "checked {} coordinates ({} skipped at relu kinks), max relative error {:.2e}",
        report.checked, report.skipped, report.max_rel_error
    );
    println!("{}", if report.passes(1e-4) { "gradients agree" } else { "gradients DISAGREE" });
    Ok(())
}
