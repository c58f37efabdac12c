mod common;

use nalgebra::{DMatrix, DVector};
use orthosynth::io::ovol::{decode, encode};
use orthosynth::metrics::{discontinuity_index, frechet_distance, gaussian_stats, psnr, GaussianStats};
use orthosynth::volume::{extract_slices, stack_slices, Dims, Orientation, Volume};
use proptest::prelude::*;
use rand::RngExt;

fn volume_strategy(max: usize) -> impl Strategy<Value = Volume> {
    (1..=max, 1..=max, 1..=max).prop_flat_map(|(nz, ny, nx)| {
        proptest::collection::vec(any::<f32>(), nz * ny * nx)
            .prop_map(move |data| Volume::new(Dims::new(nz, ny, nx), data).unwrap())
    })
}

fn orientation() -> impl Strategy<Value = Orientation> {
    prop_oneof![Just(Orientation::Axial), Just(Orientation::Coronal), Just(Orientation::Sagittal)]
}

fn random_stats(seed: u64, d: usize) -> GaussianStats {
    let mut r = common::rng(seed);
    let n = d + 3 + r.random_range(0..10usize);
    let rows = DMatrix::from_fn(n, d, |_, _| r.random_range(-2.0..2.0));
    gaussian_stats(&rows).unwrap()
}

fn bits(v: &Volume) -> Vec<u32> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn slicing_round_trip_is_bitwise(v in volume_strategy(8), o in orientation()) {
        let back = stack_slices(&extract_slices(&v, o), o).unwrap();
        prop_assert_eq!(back.dims(), v.dims());
        prop_assert_eq!(bits(&back), bits(&v));
    }

    #[test]
    fn extraction_commutes_with_voxelwise_maps(v in volume_strategy(6), o in orientation()) {
        let f = |x: f32| x.abs().min(3.0) * 0.5;
        let lhs = extract_slices(&v.map(f), o);
        let mut rhs = extract_slices(&v, o);
        for s in &mut rhs.slices {
            s.data.iter_mut().for_each(|x| *x = f(*x));
        }
        prop_assert_eq!(lhs, rhs);
    }

    #[test]
    fn ovol_round_trip_is_bitwise(v in volume_strategy(6)) {
        let back = decode(&encode(&v).unwrap()).unwrap();
        prop_assert_eq!(bits(&back), bits(&v));
        prop_assert_eq!(back.dims(), v.dims());
    }

    #[test]
    fn frechet_symmetric_and_zero_on_self(seed in any::<u64>(), d in 1usize..6) {
        let a = random_stats(seed, d);
        let b = random_stats(seed.wrapping_add(1), d);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0), "{} vs {}", ab, ba);
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn stats_mean_shifts_with_data(seed in any::<u64>(), shift in -5.0f64..5.0) {
        let mut r = common::rng(seed);
        let rows = DMatrix::from_fn(6, 3, |_, _| r.random_range(-1.0..1.0));
        let shifted = rows.map(|x| x + shift);
        let a = gaussian_stats(&rows).unwrap();
        let b = gaussian_stats(&shifted).unwrap();
        prop_assert!((&b.mean - (&a.mean + DVector::from_element(3, shift))).amax() < 1e-12);
        prop_assert!((&b.covariance - &a.covariance).amax() < 1e-12);
        prop_assert_eq!(&a.covariance, &a.covariance.transpose());
    }

    #[test]
    fn discontinuity_ignores_in_slice_permutations(seed in any::<u64>(), o in orientation()) {
        let mut r = common::rng(seed);
        let v = common::random_volume(&mut r, Dims::new(3, 4, 5));
        let mut stack = extract_slices(&v, o);
        let n = stack.slices[0].data.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        for s in &mut stack.slices {
            s.data = perm.iter().map(|&i| s.data[i]).collect();
        }
        let permuted = stack_slices(&stack, o).unwrap();
        let a = discontinuity_index(&v, o).unwrap();
        let b = discontinuity_index(&permuted, o).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_slices_have_zero_discontinuity() {
    let mut r = common::rng(3);
    let base = common::random_volume(&mut r, Dims::new(1, 6, 7));
    let v = Volume::from_fn(Dims::new(5, 6, 7), |_, y, x| base.get(0, y, x)).unwrap();
    assert_eq!(discontinuity_index(&v, Orientation::Axial).unwrap(), 0.0);
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let mut r = common::rng(11);
    let reference = Volume::filled(Dims::cube(16), 0.5).unwrap();
    let unit: Vec<f32> = (0..reference.dims().len()).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let noisy = |amp: f32| Volume::new(reference.dims(), unit.iter().map(|u| 0.5 + amp * u).collect()).unwrap();
    let p: Vec<f64> = [0.01, 0.05, 0.1].iter().map(|&a| psnr(&reference, &noisy(a), 1.0).unwrap()).collect();
    assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
}
