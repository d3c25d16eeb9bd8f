use isosplat_core::field::{reconstruct, reconstruct_par, AnisoParticle2D, GridSpec, IsoParticle2D};
use isosplat_core::kernels::{build_cov_2d, eval_aniso_2d, eval_iso};
use proptest::prelude::*;

fn iso_strategy(w: usize, h: usize, c: usize) -> impl Strategy<Value = IsoParticle2D> {
    (-2.0..w as f64 + 2.0, -2.0..h as f64 + 2.0, 0.3..6.0f64, prop::collection::vec(-1.0..1.0f64, c))
        .prop_map(|(x, y, s, a)| IsoParticle2D::new([x, y], s, a).unwrap())
}

fn aniso_strategy(w: usize, h: usize, c: usize) -> impl Strategy<Value = AnisoParticle2D> {
    (
        -2.0..w as f64 + 2.0,
        -2.0..h as f64 + 2.0,
        0.0..std::f64::consts::PI,
        0.3..6.0f64,
        0.3..6.0f64,
        prop::collection::vec(-1.0..1.0f64, c),
    )
        .prop_map(|(x, y, t, s1, s2, a)| AnisoParticle2D::new([x, y], t, s1, s2, a).unwrap())
}

fn naive_iso(ps: &[IsoParticle2D], w: usize, h: usize, c: usize, d: f64) -> Vec<f64> {
    let mut out = vec![0.0; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let px = [x as f64 + 0.5, y as f64 + 0.5];
            for p in ps {
                if ((px[0] - p.mu[0]).powi(2) + (px[1] - p.mu[1]).powi(2)).sqrt() < d {
                    let g = eval_iso(&px, &p.kernel_params()).unwrap();
                    for k in 0..c {
                        out[(y * w + x) * c + k] += p.amplitude[k] * g;
                    }
                }
            }
        }
    }
    out
}

fn naive_aniso(ps: &[AnisoParticle2D], w: usize, h: usize, c: usize, d: f64) -> Vec<f64> {
    let mut out = vec![0.0; w * h * c];
    for y in 0..h {
        for x in 0..w {
            let px = [x as f64 + 0.5, y as f64 + 0.5];
            for p in ps {
                if ((px[0] - p.mu[0]).powi(2) + (px[1] - p.mu[1]).powi(2)).sqrt() < d {
                    let g = eval_aniso_2d(&px, &build_cov_2d(&p.kernel_params()), &p.mu).unwrap();
                    for k in 0..c {
                        out[(y * w + x) * c + k] += p.amplitude[k] * g;
                    }
                }
            }
        }
    }
    out
}

fn max_dev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn iso_matches_naive_loop(
        (w, h, c, ps) in (1usize..24, 1usize..24, prop::sample::select(vec![1usize, 3]))
            .prop_flat_map(|(w, h, c)| (Just(w), Just(h), Just(c), prop::collection::vec(iso_strategy(w, h, c), 0..40))),
        d in 0.5..20.0f64,
    ) {
        let grid = GridSpec::new(w, h, c, d).unwrap();
        let fast = reconstruct(&ps, &grid).unwrap();
        prop_assert!(max_dev(fast.data(), &naive_iso(&ps, w, h, c, d)) <= 1e-12);
        prop_assert_eq!(reconstruct_par(&ps, &grid).unwrap(), fast);
    }

    #[test]
    fn aniso_matches_naive_loop(
        (w, h, ps) in (1usize..24, 1usize..24)
            .prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(aniso_strategy(w, h, 3), 0..30))),
        d in 0.5..20.0f64,
    ) {
        let grid = GridSpec::new(w, h, 3, d).unwrap();
        let fast = reconstruct(&ps, &grid).unwrap();
        prop_assert!(max_dev(fast.data(), &naive_aniso(&ps, w, h, 3, d)) <= 1e-12);
    }

    #[test]
    fn linear_in_amplitudes(ps in prop::collection::vec(iso_strategy(16, 16, 1), 1..10), k in -3.0..3.0f64) {
        let grid = GridSpec::new(16, 16, 1, 8.0).unwrap();
        let base = reconstruct(&ps, &grid).unwrap();
        let scaled: Vec<_> = ps.iter().map(|p| IsoParticle2D { amplitude: vec![p.amplitude[0] * k], ..p.clone() }).collect();
        let out = reconstruct(&scaled, &grid).unwrap();
        for (a, b) in base.data().iter().zip(out.data()) {
            prop_assert!((a * k - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn additive_over_particle_sets(a in prop::collection::vec(iso_strategy(12, 12, 1), 0..8), b in prop::collection::vec(iso_strategy(12, 12, 1), 0..8)) {
        let grid = GridSpec::new(12, 12, 1, 6.0).unwrap();
        let joint: Vec<_> = a.iter().chain(&b).cloned().collect();
        let (ra, rb, rj) = (reconstruct(&a, &grid).unwrap(), reconstruct(&b, &grid).unwrap(), reconstruct(&joint, &grid).unwrap());
        for i in 0..rj.data().len() {
            prop_assert!((ra.data()[i] + rb.data()[i] - rj.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn larger_support_only_adds_positive_mass(ps in prop::collection::vec(
        (0.0..16.0f64, 0.0..16.0f64, 0.5..4.0f64, 0.0..1.0f64).prop_map(|(x, y, s, a)| IsoParticle2D::new([x, y], s, vec![a]).unwrap()), 1..10),
        d in 1.0..10.0f64,
    ) {
        let small = reconstruct(&ps, &GridSpec::new(16, 16, 1, d).unwrap()).unwrap();
        let large = reconstruct(&ps, &GridSpec::new(16, 16, 1, d + 3.0).unwrap()).unwrap();
        for (s, l) in small.data().iter().zip(large.data()) {
            prop_assert!(l >= s);
        }
    }
}

#[test]
fn support_beyond_the_image_equals_no_cutoff() {
    let ps = vec![
        IsoParticle2D::new([3.0, 4.0], 2.0, vec![0.7]).unwrap(),
        IsoParticle2D::new([10.5, 1.5], 5.0, vec![-0.2]).unwrap(),
    ];
    let finite = reconstruct(&ps, &GridSpec::new(12, 8, 1, 100.0).unwrap()).unwrap();
    let infinite = reconstruct(&ps, &GridSpec::new(12, 8, 1, f64::INFINITY).unwrap()).unwrap();
    assert_eq!(finite, infinite);
}
