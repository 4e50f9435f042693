use ifmm::kernel::{
    benchmark_kernel, generate_scene, icosphere, kernel_block, read_scene, rpy_kernel, Kernel, KernelError, SceneSpec,
};
use ifmm::refcheck::{dense_cond, dense_eigs_symmetric};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-2.0f64..2.0)
}

fn block(k: &dyn Kernel, x: [f64; 3], y: [f64; 3]) -> Vec<f64> {
    let b = k.block_dim();
    let mut out = vec![0.0; b * b];
    k.eval(x, y, &mut out);
    out
}

proptest! {
    #[test]
    fn benchmark_symmetric_and_bounded(x in point(), y in point(), d in 1e-4f64..1.0) {
        let k = benchmark_kernel(d).unwrap();
        let a = block(&k, x, y)[0];
        prop_assert_eq!(a, block(&k, y, x)[0]);
        prop_assert!(a > 0.0 && a <= 1.0);
    }

    #[test]
    fn benchmark_translation_invariant(x in point(), y in point(), t in point()) {
        let k = benchmark_kernel(0.05).unwrap();
        let shift = |p: [f64; 3]| [p[0] + t[0], p[1] + t[1], p[2] + t[2]];
        let a = block(&k, x, y)[0];
        let b = block(&k, shift(x), shift(y))[0];
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn rpy_blocks_symmetric(x in point(), y in point(), a in 0.01f64..1.0, mu in 0.1f64..10.0) {
        let k = rpy_kernel(a, mu).unwrap();
        let m = block(&k, x, y);
        let mt = block(&k, y, x);
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((m[3 * i + j] - m[3 * j + i]).abs() < 1e-14 * m[0].abs().max(1.0));
                prop_assert!((m[3 * i + j] - mt[3 * i + j]).abs() < 1e-14 * m[0].abs().max(1.0));
            }
        }
    }

    #[test]
    fn rpy_matrix_positive_definite(pts in prop::collection::vec(point(), 2..12), a in 0.05f64..0.8) {
        let k = rpy_kernel(a, 1.0).unwrap();
        let m = kernel_block(&k, &pts, &pts);
        let e = dense_eigs_symmetric(m.as_ref()).unwrap();
        prop_assert!(e[0] > -1e-12 * e[e.len() - 1]);
    }

    #[test]
    fn scenes_deterministic_per_seed(n in 1usize..300, seed in 0u64..1000) {
        let a = generate_scene(&SceneSpec::SphereSurface { n, seed }).unwrap();
        let b = generate_scene(&SceneSpec::SphereSurface { n, seed }).unwrap();
        prop_assert_eq!(a.coords(), b.coords());
        for p in a.coords() {
            prop_assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-12);
        }
        let c = generate_scene(&SceneSpec::CubeUniform { n, seed }).unwrap();
        prop_assert!(c.coords().iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(c.coords(), generate_scene(&SceneSpec::CubeUniform { n, seed }).unwrap().coords());
    }
}

#[test]
fn icosphere_sizes_and_norms() {
    assert_eq!(icosphere(1).unwrap().len(), 42);
    let big = icosphere(6).unwrap();
    assert_eq!(big.len(), 40962);
    for p in &big {
        assert!(((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - 1.0).abs() < 1e-12);
    }
    assert!(matches!(icosphere(11), Err(KernelError::InvalidSubdivision(11))));
}

#[test]
fn lattice_and_shell_sizes() {
    let lat = generate_scene(&SceneSpec::SphereLattice { nx: 4, ny: 4, nz: 4, subdivision: 1, spacing: 3.0, sphere_radius: 1.0 })
        .unwrap();
    assert_eq!(lat.points.len(), 64 * 42);
    let shells = generate_scene(&SceneSpec::ConcentricShells { subdivisions: vec![1, 2, 3], radii: vec![1.0, 2.0, 4.0] }).unwrap();
    assert_eq!(shells.points.len(), 42 + 162 + 642);
    assert!(matches!(
        generate_scene(&SceneSpec::ConcentricShells { subdivisions: vec![1], radii: vec![] }),
        Err(KernelError::ShellMismatch(1, 0))
    ));
}

#[test]
fn different_seeds_differ() {
    let a = generate_scene(&SceneSpec::CubeUniform { n: 10, seed: 1 }).unwrap();
    let b = generate_scene(&SceneSpec::CubeUniform { n: 10, seed: 2 }).unwrap();
    assert_ne!(a.coords(), b.coords());
}

#[test]
fn larger_d_is_worse_conditioned() {
    let coords = generate_scene(&SceneSpec::CubeUniform { n: 800, seed: 7 }).unwrap().coords();
    let k2 = benchmark_kernel(1e-2).unwrap();
    let k3 = benchmark_kernel(1e-3).unwrap();
    let c2 = dense_cond(kernel_block(&k2, &coords, &coords).as_ref()).unwrap();
    let c3 = dense_cond(kernel_block(&k3, &coords, &coords).as_ref()).unwrap();
    assert!(c2 > c3, "cond(d=1e-2) = {c2}, cond(d=1e-3) = {c3}");
}

#[test]
fn invalid_parameters_and_scene_text() {
    assert!(matches!(benchmark_kernel(0.0), Err(KernelError::NonPositive { name: "d", .. })));
    assert!(rpy_kernel(-1.0, 1.0).is_err());
    assert!(rpy_kernel(1.0, f64::NAN).is_err());
    assert!(matches!(read_scene(&b"1 2\n"[..]), Err(KernelError::Parse { line: 1, .. })));
    assert!(matches!(read_scene(&b"# only a comment\n"[..]), Err(KernelError::EmptyScene)));
    let s = read_scene(&b"0 0 0\n\n1 2 3\n"[..]).unwrap();
    assert_eq!(s.coords(), vec![[0.0; 3], [1.0, 2.0, 3.0]]);
}
