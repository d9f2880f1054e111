//! Shared fixtures for the criterion benches.

use normint_core::field::{HashGridConfig, SdfField};
use normint_core::Vec3;

/// A desk-sized field with non-trivial feature content.
pub fn bench_field(seed: u64) -> SdfField {
    use rand::{Rng, SeedableRng};
    let cfg = HashGridConfig::from_finest(14, 2, 16, 256, 16, 1.0);
    let mut field = SdfField::geometric_init(cfg, 0.7, 20.0, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for v in field.features.iter_mut() {
        *v = (rng.random::<f64>() * 0.1 - 0.05) as f32;
    }
    field
}

/// Sample positions around the init-sphere shell where training spends its
/// time.
pub fn shell_points(n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            let t = i as f64 / n as f64;
            let a = t * 6113.0;
            let r = 0.55 + 0.25 * (a * 0.743).sin();
            Vec3::new(
                r * a.cos() * (1.0 - 0.4 * t),
                r * a.sin(),
                0.8 * (2.0 * t - 1.0) * 0.6,
            )
        })
        .collect()
}
