use proptest::prelude::*;

use splatnav::occupancy::{build_forest, forest_query};
use splatnav::scene::{crop_point_cloud, load_point_cloud, save_point_cloud};
use splatnav::{Aabb, PointCloud, Vec3};

fn point() -> impl Strategy<Value = Vec3> {
    (-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn aabb() -> impl Strategy<Value = Aabb> {
    (point(), 0.0..2.0f64, 0.0..2.0f64, 0.0..1.0f64).prop_map(|(lo, a, b, c)| Aabb::new(lo, lo + Vec3::new(a, b, c)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_keeps_exactly_the_contained_points(pts in prop::collection::vec(point(), 0..200), b in aabb()) {
        let pc = PointCloud::new(pts, None).unwrap();
        let c = crop_point_cloud(&pc, &b);
        let expect: Vec<Vec3> = pc.points.iter().filter(|p| (0..3).all(|a| b.min[a] <= p[a] && p[a] <= b.max[a])).cloned().collect();
        prop_assert_eq!(c.points, expect);
    }

    #[test]
    fn cloud_file_roundtrip(pts in prop::collection::vec(point(), 0..100)) {
        let pc = PointCloud::new(pts, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        save_point_cloud(&pc, &p).unwrap();
        prop_assert_eq!(load_point_cloud(&p).unwrap(), pc);
    }

    /// Any box containing a cloud point collides; growing a box never
    /// loses a collision.
    #[test]
    fn forest_sees_every_point(pts in prop::collection::vec(point(), 1..150), b in aabb(), grow in 0.0..0.5f64) {
        let pc = PointCloud::new(pts, None).unwrap();
        let f = build_forest(&pc, 0.5, 4, 1).unwrap();
        for p in &pc.points {
            let point_box = Aabb { min: *p, max: *p };
            prop_assert!(forest_query(&f, &point_box));
        }
        let g = Aabb::new(b.min - Vec3::repeat(grow), b.max + Vec3::repeat(grow)).unwrap();
        prop_assert!(!forest_query(&f, &b) || forest_query(&f, &g));
    }
}
