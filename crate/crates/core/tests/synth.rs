use std::f64::consts::PI;

use amodal_core::rng::{stream, Purpose};
use amodal_core::synth::{
    dataset_files, first_hit, generate_dataset, generate_scene, load_dataset, partially_occluded, ray_box, ray_sphere,
    render_frame, render_sequence, render_solo, write_dataset, CameraOrbit, DatasetParams, Difficulty, Primitive, Ray,
    SceneSpec, Shape,
};
use amodal_core::Error;
use rand::Rng;

fn level_orbit() -> CameraOrbit {
    CameraOrbit { radius: 6.0, height: 0.0, start: -PI / 2.0, step: 2.0 * PI / 8.0 }
}

fn sphere(center: [f64; 3], radius: f64) -> Primitive {
    Primitive { shape: Shape::Sphere { radius }, center, albedo: [0.8, 0.2, 0.2] }
}

mod support;
use support::{box_faces_ref, sphere_geometric_ref};

#[test]
fn ray_box_matches_face_brute_force() {
    let mut rng = stream(11, Purpose::Data);
    let mut hits = 0;
    for _ in 0..10_000 {
        let center = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let half = [rng.random_range(0.1..1.0), rng.random_range(0.1..1.0), rng.random_range(0.1..1.0)];
        let yaw = rng.random_range(0.0..PI);
        let origin = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let target = [center[0] + rng.random_range(-1.5..1.5), center[1] + rng.random_range(-1.5..1.5), center[2]];
        let ray = Ray::new(origin, [target[0] - origin[0], target[1] - origin[1], target[2] - origin[2]]);
        let got = ray_box(center, half, yaw, &ray).map(|h| h.t);
        let want = box_faces_ref(center, half, yaw, &ray);
        match (got, want) {
            (Some(a), Some(b)) => {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                hits += 1;
            }
            (None, None) => {}
            other => panic!("hit/miss disagreement {other:?}"),
        }
    }
    assert!(hits > 1000);
}

#[test]
fn ray_sphere_matches_geometric_construction() {
    let mut rng = stream(12, Purpose::Data);
    for _ in 0..10_000 {
        let center = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let r = rng.random_range(0.1..1.5);
        let origin = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
        let ray = Ray::new(origin, [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
        let got = ray_sphere(center, r, &ray).map(|h| h.t);
        match (got, sphere_geometric_ref(center, r, &ray)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9),
            (None, None) => {}
            other => panic!("hit/miss disagreement {other:?}"),
        }
    }
}

fn centered_sphere_area(r: f64, z: f64) -> usize {
    let orbit = CameraOrbit { radius: z, ..level_orbit() };
    let spec = SceneSpec { primitives: vec![sphere([0.0; 3], r)], orbit, frames: 1, image_size: 96, seed: 0 };
    let frame = render_frame(&spec, 0);
    assert_eq!(frame.visible[0], frame.full[0]);
    frame.visible[0].count()
}

#[test]
fn centered_sphere_silhouette_area() {
    let f: f64 = 96.0;
    // small sphere: the disc of radius f·r/z
    let (r, z) = (0.5, 4.0);
    let disc = PI * (f * r / z).powi(2);
    let area = centered_sphere_area(r, z) as f64;
    assert!((area - disc).abs() / disc < 0.02, "area {area} vs {disc}");
    // larger spheres: the tangent cone widens the disc to radius f·r/sqrt(z²−r²)
    for (r, z) in [(1.0, 5.0), (1.5, 6.0), (2.0, 6.0)] {
        let exact = PI * f * f * r * r / (z * z - r * r);
        let area = centered_sphere_area(r, z) as f64;
        assert!((area - exact).abs() / exact < 0.02, "r={r} z={z}: area {area} vs {exact}");
    }
}

#[test]
fn empty_scene_is_background_only() {
    let spec = SceneSpec { primitives: vec![], orbit: level_orbit(), frames: 1, image_size: 16, seed: 0 };
    let frame = render_frame(&spec, 0);
    assert!(frame.visible.is_empty() && frame.full.is_empty());
    // sky above the horizon, ground below
    assert_ne!(frame.image.pixel(0, 0), frame.image.pixel(15, 0));
    assert!(spec.validate().is_err());
}

#[test]
fn solo_render_cases() {
    // a small sphere directly behind a large one
    let spec = SceneSpec {
        primitives: vec![sphere([0.0, 0.0, 0.0], 0.8), sphere([0.0, 0.0, 2.0], 0.3), sphere([1.6, 0.0, -0.5], 0.3)],
        orbit: level_orbit(),
        frames: 1,
        image_size: 48,
        seed: 0,
    };
    let frame = render_frame(&spec, 0);
    assert!(frame.visible[1].is_empty() && !frame.full[1].is_empty());
    assert_eq!(frame.full[2], frame.visible[2]);
    for k in 0..3 {
        assert_eq!(render_solo(&spec, 0, k), frame.full[k]);
    }
    assert_eq!(frame.depth_order, vec![2, 0, 1]);
}

#[test]
fn generated_masks_are_consistent() {
    let mut rng = stream(13, Purpose::Data);
    for seed in 0..50 {
        let difficulty = if seed % 2 == 0 { Difficulty::B } else { Difficulty::D };
        let spec = generate_scene(seed, difficulty, 48, 8).unwrap();
        let seq = render_sequence(&spec);
        for t in 0..8 {
            let k = seq.object_count();
            for a in 0..k {
                assert!(seq.visible[t][a].is_subset_of(&seq.full[t][a]));
                assert_eq!(seq.full[t][a], render_solo(&spec, t, a));
                assert_eq!(seq.boxes[t][a], seq.visible[t][a].bounding_box());
                for b in a + 1..k {
                    assert!(!seq.visible[t][a].intersects(&seq.visible[t][b]));
                }
            }
        }
        for _ in 0..1000 {
            let (t, x, y) = (rng.random_range(0..8), rng.random_range(0..48), rng.random_range(0..48));
            let owner = (0..seq.object_count()).find(|&k| seq.visible[t][k].get(y, x));
            assert_eq!(owner, first_hit(&spec, t, x, y));
        }
    }
}

#[test]
fn generator_is_deterministic_and_sized() {
    assert_eq!(generate_scene(5, Difficulty::B, 48, 8).unwrap(), generate_scene(5, Difficulty::B, 48, 8).unwrap());
    for seed in 0..100 {
        let b = generate_scene(seed, Difficulty::B, 48, 8).unwrap().primitives.len();
        let d = generate_scene(seed, Difficulty::D, 48, 8).unwrap().primitives.len();
        assert!((3..=4).contains(&b), "B scene with {b} objects");
        assert!((5..=8).contains(&d), "D scene with {d} objects");
    }
}

#[test]
fn occlusion_guarantee_over_many_seeds() {
    let mut ok = 0;
    for seed in 0..1000 {
        if let Ok(spec) = generate_scene(seed, Difficulty::B, 48, 8) {
            let frame = render_frame(&spec, 0);
            if frame.full.iter().zip(&frame.visible).any(|(m, v)| partially_occluded(m, v)) {
                ok += 1;
            }
        }
    }
    assert!(ok >= 950, "{ok}/1000 scenes occluded in frame 0");
}

#[test]
fn harder_difficulty_occludes_more() {
    let mean = |d| {
        (0..30).map(|s| render_sequence(&generate_scene(s, d, 48, 8).unwrap()).occlusion_ratio()).sum::<f64>() / 30.0
    };
    let (b, d) = (mean(Difficulty::B), mean(Difficulty::D));
    assert!(d > b, "D {d} vs B {b}");
}

#[test]
fn orbit_closes_after_full_turn() {
    let orbit = CameraOrbit { radius: 5.0, height: 0.7, start: 1.234, step: 2.0 * PI / 8.0 };
    let (a, b) = (orbit.pose(0), orbit.pose(8));
    for (u, v) in [(a.position, b.position), (a.forward, b.forward), (a.right, b.right)] {
        for i in 0..3 {
            assert!((u[i] - v[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn dataset_round_trip_is_byte_identical() {
    let params = DatasetParams { sequences: 2, seed: 3, difficulty: Difficulty::B, image_size: 24, frames: 3 };
    let seqs = generate_dataset(&params).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(&seqs, a.path()).unwrap();
    let loaded = load_dataset(a.path()).unwrap();
    assert_eq!(loaded, seqs);
    write_dataset(&loaded, b.path()).unwrap();
    let (fa, fb) = (dataset_files(a.path()).unwrap(), dataset_files(b.path()).unwrap());
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(a.path()).unwrap(), y.strip_prefix(b.path()).unwrap());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
}

#[test]
fn dataset_validation() {
    let params = DatasetParams { sequences: 1, seed: 4, difficulty: Difficulty::B, image_size: 16, frames: 2 };
    let seqs = generate_dataset(&params).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&seqs, dir.path()).unwrap();

    let meta_path = dir.path().join("seq_0000/meta.json");
    let meta = std::fs::read_to_string(&meta_path).unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&meta).unwrap();
    json.as_object_mut().unwrap().remove("intrinsics");
    std::fs::write(&meta_path, json.to_string()).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    std::fs::write(&meta_path, meta).unwrap();

    let mask_path = dir.path().join("seq_0000/full_00_0.pgm");
    let mut bytes = std::fs::read(&mask_path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] = 128;
    std::fs::write(&mask_path, &bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));

    assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
}
