mod common;

use adosim::geometry::{
    convex_overlap_area, footprint_polygon, min_clearance, to_curvilinear, ConvexPolygon, FootprintDims, Pose2,
    Vec2,
};
use rand::Rng;

#[test]
fn overlap_matches_monte_carlo() {
    let mut rng = common::rng(11);
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for _ in 0..200 {
        let (a, b) = common::random_pair(&mut rng);
        let got = convex_overlap_area(&a, &b);
        let want = common::mc_overlap(&a, &b, 1000, &mut rng);
        if want > 0.0 {
            nonzero += 1;
        }
        worst = worst.max((got - want).abs());
        assert!((convex_overlap_area(&b, &a) - got).abs() < 1e-12);
    }
    println!("worst overlap error {worst:e}, {nonzero} overlapping pairs");
    assert!(worst < 2e-3);
    assert!(nonzero > 80);
}

#[test]
fn clearance_matches_boundary_sampling() {
    let mut rng = common::rng(12);
    let mut separated = 0;
    for _ in 0..200 {
        let (a, b) = common::random_pair(&mut rng);
        let got = min_clearance(&a, &b);
        let want = common::boundary_clearance(&a, &b, 64);
        if want > 0.0 {
            separated += 1;
        }
        assert!((got - want).abs() < 1e-6, "clearance {got} vs {want}");
    }
    assert!(separated > 20);
}

#[test]
fn overlap_bounds() {
    let mut rng = common::rng(13);
    for _ in 0..500 {
        let (a, b) = common::random_pair(&mut rng);
        let o = convex_overlap_area(&a, &b);
        assert!(o >= 0.0 && o <= a.area().min(b.area()) + 1e-12);
        assert!((convex_overlap_area(&a, &a) - a.area()).abs() < 1e-12);
        if o > 1e-9 {
            assert_eq!(min_clearance(&a, &b), 0.0);
        }
    }
}

#[test]
fn translated_clearance_is_gap() {
    let dims = FootprintDims::new(4.5, 1.8).unwrap();
    let a = footprint_polygon(&Pose2::new(0.0, 0.0, 0.0), &dims);
    for gap in [0.1, 0.5, 3.0] {
        let b = a.translate(Vec2::new(4.5 + gap, 0.0));
        assert!((min_clearance(&a, &b) - gap).abs() < 1e-12);
        assert_eq!(convex_overlap_area(&a, &b), 0.0);
    }
}

fn homogeneous(p: &Pose2) -> [[f64; 3]; 3] {
    let (s, c) = p.theta.sin_cos();
    [[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]
}

#[test]
fn curvilinear_matches_matrix_oracle() {
    let mut rng = common::rng(14);
    for _ in 0..1000 {
        let r = Pose2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-3.1..3.1));
        let g = Pose2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(-3.1..3.1));
        let m = homogeneous(&r);
        // inverse of a rigid transform: [R^T, -R^T t]
        let inv = [
            [m[0][0], m[1][0], -(m[0][0] * m[0][2] + m[1][0] * m[1][2])],
            [m[0][1], m[1][1], -(m[0][1] * m[0][2] + m[1][1] * m[1][2])],
            [0.0, 0.0, 1.0],
        ];
        let h = homogeneous(&g);
        let mut rel = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rel[i][j] = (0..3).map(|k| inv[i][k] * h[k][j]).sum();
            }
        }
        let q = to_curvilinear(&r, &g);
        assert!((q.q_long - rel[0][2]).abs() < 1e-9);
        assert!((q.q_lat - rel[1][2]).abs() < 1e-9);
        assert!((q.q_rot - rel[1][0].atan2(rel[0][0])).abs() < 1e-9);
    }
}

#[test]
fn footprint_is_rotated_rectangle() {
    let dims = FootprintDims::new(4.0, 2.0).unwrap();
    let pose = Pose2::new(3.0, -1.0, 0.7);
    let poly = footprint_polygon(&pose, &dims);
    assert_eq!(poly.vertices().len(), 4);
    assert!((poly.area() - 8.0).abs() < 1e-12);
    for v in poly.vertices() {
        let local = pose.inverse_transform_point(*v);
        assert!((local.x.abs() - 2.0).abs() < 1e-12 && (local.y.abs() - 1.0).abs() < 1e-12);
    }
}
