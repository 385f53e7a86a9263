use neural_template::diff::Tensor;
use neural_template::encoder::LatentPair;
use neural_template::geom::{self, Vec3};
use neural_template::latentops::{arithmetic_codes, interpolate_codes, CodeKind};
use neural_template::metrics::{chamfer, chamfer_brute, p2f, sample_surface};
use neural_template::shapegen::{gen_shape, marching_cubes, Family};
use neural_template::topology::{binarize, convex_polytope, NeuralTemplate};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = Family> {
    prop::sample::select(Family::ALL.to_vec())
}

fn point() -> impl Strategy<Value = Vec3> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
}

fn codes(n: usize) -> impl Strategy<Value = LatentPair> {
    (
        prop::collection::vec(-2.0..2.0f64, n),
        prop::collection::vec(-2.0..2.0f64, n),
    )
        .prop_map(|(zt, zs)| LatentPair { zt, zs })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sample_labels_match_occupancy(f in family(), seed in 0u64..1000, n in 0usize..300) {
        let shape = gen_shape(f, seed);
        let s = shape.sample_occupancy(n, 0.5, seed);
        prop_assert_eq!(s.len(), n);
        for (p, &o) in s.points.iter().zip(&s.labels) {
            prop_assert_eq!(shape.occupancy(*p), o == 1);
        }
    }

    #[test]
    fn shapes_stay_inside_the_domain(f in family(), seed in 0u64..1000) {
        let (lo, hi) = gen_shape(f, seed).bounds();
        for k in 0..3 {
            prop_assert!(lo[k] >= -1.0 && hi[k] <= 1.0 && lo[k] < hi[k]);
        }
    }

    #[test]
    fn voxelize_is_deterministic(f in family(), seed in 0u64..1000) {
        let shape = gen_shape(f, seed);
        prop_assert_eq!(shape.voxelize(16), shape.voxelize(16));
        prop_assert!(shape.voxelize(16).count() > 0);
    }

    #[test]
    fn iso_surface_is_closed(f in family(), seed in 0u64..200) {
        let shape = gen_shape(f, seed);
        let mesh = marching_cubes(|p| shape.sdf(p), 0.0, 24).unwrap();
        prop_assert!(mesh.is_closed());
        prop_assert!(mesh.indices_in_range());
        prop_assert!(mesh.signed_volume() > 0.0);
    }

    #[test]
    fn binarize_is_idempotent(data in prop::collection::vec(-0.5..1.5f64, 12)) {
        let b = Tensor::new([4, 3], data).unwrap();
        let once = binarize(&b);
        prop_assert_eq!(binarize(&once), once.clone());
        prop_assert!(once.data().iter().all(|&x| x == 0.0 || x == 1.0));
    }

    #[test]
    fn occupancy_ranges(
        h in prop::collection::vec(-1.0..1.0f64, 24),
        b in prop::collection::vec(0.0..1.0f64, 12),
        w in prop::collection::vec(0.0..1.5f64, 2),
        p in point(),
    ) {
        let soft = NeuralTemplate { h: Tensor::new([6, 4], h.clone()).unwrap(), b: Tensor::new([6, 2], b.clone()).unwrap(), w, stage: 1 };
        let o = soft.occupancy_stage1(p);
        prop_assert!((0.0..=1.0).contains(&o));
        let hard = NeuralTemplate { b: binarize(&soft.b), stage: 2, ..soft };
        prop_assert!(hard.occupancy_stage2(p) >= 0.0);
    }

    #[test]
    fn polytope_vertices_satisfy_every_plane(
        normals in prop::collection::vec(point(), 4..12),
        offsets in prop::collection::vec(0.1..0.8f64, 12),
    ) {
        let planes: Vec<[f64; 4]> = normals
            .iter()
            .zip(&offsets)
            .filter(|(n, _)| geom::norm(**n) > 1e-3)
            .map(|(n, &r)| {
                let n = geom::normalize(*n);
                [n[0], n[1], n[2], -r]
            })
            .collect();
        if let Some(mesh) = convex_polytope(&planes) {
            prop_assert!(mesh.is_closed());
            prop_assert_eq!(mesh.euler_characteristic(), 2);
            for v in &mesh.vertices {
                for pl in &planes {
                    prop_assert!(pl[0] * v[0] + pl[1] * v[1] + pl[2] * v[2] + pl[3] <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn chamfer_properties(
        p in prop::collection::vec(point(), 1..80),
        q in prop::collection::vec(point(), 1..80),
    ) {
        let d = chamfer(&p, &q).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, chamfer(&q, &p).unwrap());
        prop_assert!((d - chamfer_brute(&p, &q).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn surface_samples_lie_on_the_mesh(f in family(), seed in 0u64..200) {
        let shape = gen_shape(f, seed);
        let mesh = marching_cubes(|p| shape.sdf(p), 0.0, 16).unwrap();
        let s = sample_surface(&mesh, 200, seed).unwrap();
        prop_assert!(p2f(&s.points, &mesh).unwrap() < 1e-9);
        prop_assert_eq!(sample_surface(&mesh, 200, seed).unwrap().points, s.points);
    }

    #[test]
    fn code_edits(a in codes(5), b in codes(5), c in codes(5), t in 0.0..=1.0f64) {
        for which in [CodeKind::Topology, CodeKind::Shape] {
            prop_assert_eq!(&interpolate_codes(&a, &b, which, 0.0).unwrap(), &a);
            let mid = interpolate_codes(&a, &b, which, t).unwrap();
            match which {
                CodeKind::Topology => prop_assert_eq!(&mid.zs, &a.zs),
                CodeKind::Shape => prop_assert_eq!(&mid.zt, &a.zt),
            }
            prop_assert_eq!(&arithmetic_codes(&a, &c, &c, which).unwrap(), &a);
        }
        prop_assert!(interpolate_codes(&a, &b, CodeKind::Shape, 1.5).is_err());
    }
}
