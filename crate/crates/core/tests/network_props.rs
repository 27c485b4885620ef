//! Velocity-net forward properties.

use dmvae_core::networks::{Conditioning, VelocityNet, VelocityNetSpec};
use dmvae_core::rng;
use dmvae_core::Array;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Small input perturbations give proportionally small, finite output changes.
    #[test]
    fn forward_is_locally_lipschitz(seed in any::<u64>(), t in 0.01f64..1.0, scale in 1e-6f64..1e-2) {
        let net = VelocityNet::new(VelocityNetSpec::new(2).with_hidden(&[64, 64]), "v", &mut rng::seeded(seed % 8)).unwrap();
        let mut g = rng::seeded(seed);
        let z = rng::normal_array(&mut g, 16, 2).scale(3.0);
        let dz = rng::normal_array(&mut g, 16, 2).scale(scale);
        let tt = vec![t; 16];
        let a = net.predict(&z, &tt, Conditioning::Unconditional).unwrap();
        let b = net.predict(&z.add(&dz).unwrap(), &tt, Conditioning::Unconditional).unwrap();
        prop_assert!(a.is_finite() && b.is_finite());
        for r in 0..16 {
            let dv: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let dn: f64 = dz.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(dv <= 50.0 * dn, "ratio {}", dv / dn);
        }
    }

    #[test]
    fn rows_are_independent(seed in any::<u64>()) {
        let net = VelocityNet::new(VelocityNetSpec::new(2).with_hidden(&[32]), "v", &mut rng::seeded(1)).unwrap();
        let z = rng::normal_array(&mut rng::seeded(seed), 5, 2);
        let t = [0.1, 0.3, 0.5, 0.7, 0.9];
        let all = net.predict(&z, &t, Conditioning::Unconditional).unwrap();
        for r in 0..5 {
            let one = net.predict(&Array::row_vector(z.row(r)), &t[r..r + 1], Conditioning::Unconditional).unwrap();
            prop_assert_eq!(one.row(0), all.row(r));
        }
    }
}
