//! Invariants checked through the public API on randomized inputs.

use std::f64::consts::PI;
use std::sync::OnceLock;

use htsim::experiments::random_band_limited;
use htsim::fit::loglog_fit;
use htsim::io::{decode_npy, encode_npy};
use htsim::propagate::{evolve, time_averaged_expectation, Dynamics};
use htsim::{Complex64, EvolutionSpec, FiberPart, Gft, GridSpec, GroupStructure, Profile, Symbol, Window};
use proptest::prelude::*;

fn gft() -> &'static Gft {
    static G: OnceLock<Gft> = OnceLock::new();
    G.get_or_init(|| {
        let g = GroupStructure::heisenberg(1);
        Gft::new(&g, &GridSpec::new(&g, 4.0, PI, 64, 32).unwrap(), 12).unwrap()
    })
}

fn field(seed: u64) -> htsim::FiberField {
    random_band_limited(gft(), seed, 4, 4.0, 8.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn plancherel_holds_for_band_limited_data(seed in any::<u64>()) {
        let gft = gft();
        let f = gft.inverse(&field(seed));
        let back = gft.forward(&f).unwrap();
        let rel = (gft.plancherel_norm_sqr(&back) / f.norm_sqr() - 1.0).abs();
        prop_assert!(rel < 1e-8, "{rel}");
    }

    #[test]
    fn evolution_is_unitary_and_a_group(seed in any::<u64>(), s in -2.0f64..2.0, t in -2.0f64..2.0, eps in 0.05f64..1.0, tau in 0.5f64..3.0) {
        let gft = gft();
        let f = field(seed);
        let spec = EvolutionSpec { eps, tau, window: Window::Bump { start: 0.0, length: 1.0 }, intervals: None };
        let two = evolve(gft, &evolve(gft, &f, s, &spec), t, &spec);
        let one = evolve(gft, &f, s + t, &spec);
        let scale = gft.hs_norm_sqr(&f).sqrt();
        prop_assert!(two.max_diff(&one) < 1e-10 * scale);
        prop_assert!((gft.hs_norm_sqr(&one) / gft.hs_norm_sqr(&f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn averaged_mass_is_the_norm(seed in any::<u64>(), start in -1.0f64..1.0, length in 0.2f64..2.0, tau in 0.5f64..3.0) {
        let gft = gft();
        let f = field(seed);
        let window = Window::CosSq { start, length };
        let dy = Dynamics::new(gft, &f, &EvolutionSpec { eps: 0.3, tau, window, intervals: None }).unwrap();
        let one = Symbol::single(Profile::Uniform(Complex64::new(1.0, 0.0)), FiberPart::One);
        let avg = time_averaged_expectation(&dy, &one, &window).unwrap();
        let norm = gft.inverse(&f).norm_sqr();
        prop_assert!((avg.value - norm).norm() < 1e-9 * norm, "{} {norm}", avg.value);
    }

    #[test]
    fn power_laws_are_recovered(c in 0.01f64..100.0, p in -3.0f64..3.0) {
        let xs = [0.2f64, 0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x| c * x.powf(p)).collect();
        let fit = loglog_fit(&xs, &ys).unwrap();
        prop_assert!((fit.slope - p).abs() < 1e-10);
    }

    #[test]
    fn npy_roundtrip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let vals: Vec<Complex64> = (0..n).map(|k| Complex64::new(k as f64 + seed as f64, -(k as f64) / 3.0)).collect();
        let (shape, back) = decode_npy(&encode_npy(&dims, &vals)).unwrap();
        prop_assert_eq!(shape, dims);
        prop_assert_eq!(back, vals);
    }
}
