use isosplat_core::kernels::{quat_to_rotation, sym2_eigenvalues, AnisoKernelParams3D, Mat3};
use isosplat_core::splat3d::{
    composite, composite_with_transmittance, project_aniso, project_cov, project_iso, projection_jacobian, render,
    render_reference, AnisoSplat3D, Camera, IsoSplat3D, Splat3D,
};
use proptest::prelude::*;

const EYE: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn unit_quat() -> impl Strategy<Value = [f64; 4]> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 0.01)
        .prop_map(|(w, x, y, z)| {
            let n = (w * w + x * x + y * y + z * z).sqrt();
            [w / n, x / n, y / n, z / n]
        })
}

fn splat_strategy() -> impl Strategy<Value = Splat3D> {
    let color = (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(r, g, b)| [r, g, b]);
    let mu = (-2.0..2.0f64, -2.0..2.0f64, -1.0..6.0f64).prop_map(|(x, y, z)| [x, y, z]);
    prop_oneof![
        (mu.clone(), 0.05..0.6f64, color.clone(), 0.0..1.0f64)
            .prop_map(|(mu, s, c, a)| Splat3D::Iso(IsoSplat3D::new(mu, s, c, a).unwrap())),
        (mu, unit_quat(), (0.05..0.6f64, 0.05..0.6f64, 0.05..0.6f64), color, 0.0..1.0f64).prop_map(|(mu, q, (a, b, c), col, op)| {
            Splat3D::Aniso(AnisoSplat3D::new(AnisoKernelParams3D::new(mu, q, [a, b, c]).unwrap(), col, op).unwrap())
        }),
    ]
}

fn camera(side: usize) -> Camera {
    let c = side as f64 / 2.0;
    Camera::new(EYE, [0.0, 0.0, 4.0], side as f64, [c, c], side, side).unwrap()
}

/// Rotation by `angle` about the unit axis `n` (Rodrigues).
fn axis_rotation(n: [f64; 3], angle: f64) -> Mat3 {
    let h = angle / 2.0;
    quat_to_rotation([h.cos(), n[0] * h.sin(), n[1] * h.sin(), n[2] * h.sin()])
}

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn render_matches_reference(splats in prop::collection::vec(splat_strategy(), 0..40), side in 1usize..33, bg in 0.0..1.0f64) {
        let cam = camera(side);
        let fast = render(&splats, &cam, [bg, 0.0, 1.0 - bg], false).unwrap();
        let slow = render_reference(&splats, &cam, [bg, 0.0, 1.0 - bg]).unwrap();
        let dev = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(dev <= 1e-12, "deviation {dev}");
        prop_assert_eq!(render(&splats, &cam, [bg, 0.0, 1.0 - bg], true).unwrap(), fast);
    }

    #[test]
    fn transmittance_is_non_increasing(layers in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 0..20)) {
        let ordered: Vec<_> = layers.iter().map(|&(c, a)| ([c; 3], a)).collect();
        let (color, trans) = composite_with_transmittance(&ordered).unwrap();
        let mut prev = 1.0;
        for t in trans {
            prop_assert!((0.0..=prev).contains(&t));
            prev = t;
        }
        let max_c = layers.iter().map(|l| l.0).fold(0.0, f64::max);
        prop_assert!(color.iter().all(|&c| (0.0..=max_c + 1e-15).contains(&c)));
    }

    #[test]
    fn zero_alpha_layers_commute(c1 in 0.0..1.0f64, c2 in 0.0..1.0f64, a in 0.0..1.0f64) {
        let with = composite(&[([c1; 3], 0.0), ([c2; 3], a)]).unwrap();
        let swapped = composite(&[([c2; 3], a), ([c1; 3], 0.0)]).unwrap();
        prop_assert_eq!(with, swapped);
    }

    #[test]
    fn jacobian_matches_finite_differences(x in -3.0..3.0f64, y in -3.0..3.0f64, z in 0.5..10.0f64, f in 10.0..500.0f64) {
        let j = projection_jacobian(&[x, y, z], f).unwrap();
        let proj = |p: [f64; 3]| [f * p[0] / p[2], f * p[1] / p[2]];
        let h = 1e-6;
        for k in 0..3 {
            let mut plus = [x, y, z];
            let mut minus = [x, y, z];
            plus[k] += h;
            minus[k] -= h;
            let (pp, pm) = (proj(plus), proj(minus));
            for r in 0..2 {
                let numeric = (pp[r] - pm[r]) / (2.0 * h);
                prop_assert!((j[r][k] - numeric).abs() <= 1e-6 * numeric.abs().max(1.0));
            }
        }
    }

    #[test]
    fn iso_covariance_stays_isotropic_on_axis(s in 0.01..2.0f64, z in 0.5..20.0f64, f in 1.0..500.0f64, q in unit_quat()) {
        let cov = [[s * s, 0.0, 0.0], [0.0, s * s, 0.0], [0.0, 0.0, s * s]];
        let j = projection_jacobian(&[0.0, 0.0, z], f).unwrap();
        let ev = sym2_eigenvalues(&project_cov(&cov, &quat_to_rotation(q), &j));
        let shortcut = (s * f / z).powi(2);
        prop_assert!((ev[0] - shortcut).abs() <= 1e-9 * shortcut.max(1.0));
        prop_assert!((ev[1] - shortcut).abs() <= 1e-9 * shortcut.max(1.0));
    }

    #[test]
    fn roll_about_view_ray_only_affects_aniso(mu in (-1.0..1.0f64, -1.0..1.0f64, 2.0..6.0f64), roll in 0.2..3.0f64, q in unit_quat()) {
        let mu = [mu.0, mu.1, mu.2];
        let cam = Camera::new(EYE, [0.0; 3], 100.0, [50.0, 50.0], 100, 100).unwrap();
        let n = mu.map(|v| v / (mu[0] * mu[0] + mu[1] * mu[1] + mu[2] * mu[2]).sqrt());
        let rolled = Camera { rotation: matmul(&axis_rotation(n, roll), &EYE), ..cam };
        let iso = IsoSplat3D::new(mu, 0.3, [1.0; 3], 1.0).unwrap();
        let (a, b) = (project_iso(&iso, &cam).unwrap(), project_iso(&iso, &rolled).unwrap());
        prop_assert!((a.sigma_2d - b.sigma_2d).abs() <= 1e-12 * a.sigma_2d);
        prop_assert!((a.depth - b.depth).abs() <= 1e-12);
        let aniso = AnisoSplat3D::new(AnisoKernelParams3D::new(mu, q, [0.1, 0.3, 0.6]).unwrap(), [1.0; 3], 1.0).unwrap();
        let (pa, pb) = (project_aniso(&aniso, &cam).unwrap(), project_aniso(&aniso, &rolled).unwrap());
        let diff = (0..2).flat_map(|i| (0..2).map(move |k| (i, k))).map(|(i, k)| (pa.cov_2d[i][k] - pb.cov_2d[i][k]).abs()).fold(0.0, f64::max);
        prop_assert!(diff > 1e-6);
    }
}

#[test]
fn order_matters_for_distinct_alphas() {
    let a = ([1.0, 0.0, 0.0], 0.3);
    let b = ([0.0, 0.0, 1.0], 0.8);
    assert_ne!(composite(&[a, b]).unwrap(), composite(&[b, a]).unwrap());
}

#[test]
fn behind_camera_splats_are_culled() {
    let cam = camera(8);
    let behind = Splat3D::Iso(IsoSplat3D::new([0.0, 0.0, -10.0], 1.0, [1.0; 3], 1.0).unwrap());
    let img = render(&[behind], &cam, [0.0; 3], false).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0));
}
