use std::rc::Rc;

use amodal_core::geometry::{
    build_volume, fold_height, image_to_feature, volume_sample_table, BevCompressor, CameraIntrinsics, VoxelGridSpec,
};
use amodal_core::gradcheck::random_tensor;
use amodal_core::rng::{stream, Purpose};
use amodal_core::{Bound, ParameterStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

mod support;
use support::{volume, volume_ref};

#[test]
fn build_volume_matches_per_voxel_loop() {
    for seed in 0..10 {
        let mut rng = stream(seed, Purpose::Data);
        let feat = random_tensor(&mut rng, &[4, 8, 8]);
        let grid = VoxelGridSpec::uniform(3, 3, 2, (-1.5, 1.2), (1.0, 3.0), (-0.8, 0.9)).unwrap();
        let k = CameraIntrinsics::new(40.0, 38.0, 31.0, 33.0).unwrap();
        let got = volume(&feat, &k, &grid, (64, 64));
        let want = volume_ref(&feat, &k, &grid, (64, 64));
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn constant_feature_gives_constant_volume() {
    let feat = Tensor::full(&[2, 6, 6], 0.75);
    let grid = VoxelGridSpec::uniform(4, 4, 2, (-0.5, 0.5), (2.0, 4.0), (-0.5, 0.5)).unwrap();
    let k = CameraIntrinsics::for_image(48);
    let v = volume(&feat, &k, &grid, (48, 48));
    assert!(v.data().iter().all(|&x| (x - 0.75).abs() < 1e-15));
}

#[test]
fn single_voxel_on_integer_pixel_reads_that_feature() {
    let mut rng = stream(3, Purpose::Data);
    let feat = random_tensor(&mut rng, &[3, 6, 6]);
    // Image (20, 28) is feature (2, 3) at stride 8.
    let k = CameraIntrinsics::for_image(48);
    let z = 2.0;
    let x = (2.0 + 0.5) * 8.0 - 24.0;
    let y = (3.0 + 0.5) * 8.0 - 24.0;
    let grid = VoxelGridSpec { width: vec![x * z / 48.0], depth: vec![z], height: vec![y * z / 48.0] };
    let v = volume(&feat, &k, &grid, (48, 48));
    for c in 0..3 {
        assert!((v.data()[c] - feat.at(&[c, 3, 2])).abs() < 1e-12);
    }
}

#[test]
fn out_of_frustum_voxels_are_zero_with_zero_gradient() {
    let mut rng = stream(5, Purpose::Data);
    let feat = random_tensor(&mut rng, &[2, 6, 6]);
    let k = CameraIntrinsics::for_image(48);
    let grid = VoxelGridSpec::uniform(8, 4, 3, (-6.0, 6.0), (1.0, 3.0), (-1.0, 1.0)).unwrap();
    let table = Rc::new(volume_sample_table(&k, &grid, (48, 48), (6, 6)));
    assert!(table.valid_count() > 0 && table.valid_count() < table.points());

    let tape = Tape::new();
    let f = tape.leaf(feat);
    let vol = build_volume(f, table.clone(), &grid).unwrap();
    let (m, n, h) = grid.dims();
    let mut weight = Tensor::zeros(&[2, m, n, h]);
    for p in (0..table.points()).filter(|&p| !table.is_valid(p)) {
        for c in 0..2 {
            assert_eq!(vol.value().data()[c * m * n * h + p], 0.0);
            weight.data_mut()[c * m * n * h + p] = rng.random_range(-1.0..1.0);
        }
    }
    let loss = vol.mul(tape.constant(weight)).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(f).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn grid_outside_frustum_gives_all_zero_bev_input() {
    let mut rng = stream(6, Purpose::Data);
    let feat = random_tensor(&mut rng, &[2, 6, 6]);
    let k = CameraIntrinsics::for_image(48);
    let grid = VoxelGridSpec::uniform(4, 4, 2, (40.0, 44.0), (1.0, 3.0), (-1.0, 1.0)).unwrap();
    let v = volume(&feat, &k, &grid, (48, 48));
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn fold_height_index_map() {
    let (c, m, n, h) = (2, 3, 4, 3);
    let mut rng = stream(7, Purpose::Data);
    let vol = random_tensor(&mut rng, &[c, m, n, h]);
    let tape = Tape::new();
    let folded = fold_height(tape.constant(vol.clone())).unwrap().value();
    assert_eq!(folded.shape(), &[c * h, m, n]);
    for i in 0..m {
        for j in 0..n {
            assert_eq!(folded.at(&[h + 2, i, j]), vol.at(&[1, i, j, 2]));
            for ci in 0..c {
                for k in 0..h {
                    assert_eq!(folded.at(&[ci * h + k, i, j]), vol.at(&[ci, i, j, k]));
                }
            }
        }
    }
}

#[test]
fn compressor_output_shape() {
    let comp = BevCompressor::new("bev", 8 * 4, 16, 32);
    let mut store = ParameterStore::new();
    comp.init(&mut store, &mut stream(0, Purpose::Init)).unwrap();
    let tape = Tape::new();
    let p = Bound::frozen(&store, &tape);
    let vol = tape.constant(Tensor::ones(&[8, 16, 16, 4]));
    assert_eq!(comp.forward(&p, vol).unwrap().shape(), vec![32, 16, 16]);
}

#[test]
fn gradcheck_build_volume_and_compress() {
    let c = support::volume_compress_gradcheck();
    assert!(c.passed(), "{c}");
}

proptest! {
    #[test]
    fn projection_round_trip(x in -3.0f64..3.0, y in -2.0f64..2.0, z in 0.2f64..10.0,
                             f in 10.0f64..100.0, c in 0.0f64..64.0) {
        let k = CameraIntrinsics::new(f, f * 1.1, c, c * 0.9).unwrap();
        let (u, v) = k.project([x, y, z]).unwrap();
        let p = k.unproject(u, v, z);
        prop_assert!((p[0] - x).abs() < 1e-9 && (p[1] - y).abs() < 1e-9 && (p[2] - z).abs() < 1e-9);
    }

    #[test]
    fn feature_rescale_is_affine(u in 0.0f64..96.0) {
        let a = image_to_feature(u, 96, 12);
        prop_assert!((a - (u / 8.0 - 0.5)).abs() < 1e-12);
    }
}
