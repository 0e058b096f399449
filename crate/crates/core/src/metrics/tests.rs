use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_d1(test: &[[f64; 3]], reference: &[[f64; 3]]) -> f64 {
    test.iter()
        .map(|p| reference.iter().map(|r| nn::sq_dist(p, r)).fold(f64::INFINITY, f64::min))
        .sum::<f64>()
        / test.len() as f64
}

fn brute_d2(test: &[[f64; 3]], reference: &[[f64; 3]], n: &NormalField) -> f64 {
    test.iter()
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for (i, r) in reference.iter().enumerate() {
                let d = nn::sq_dist(p, r);
                if d < best.1 {
                    best = (i, d);
                }
            }
            let (r, m) = (reference[best.0], n.normals[best.0]);
            let dot: f64 = (0..3).map(|k| (p[k] - r[k]) * m[k]).sum();
            dot * dot
        })
        .sum::<f64>()
        / test.len() as f64
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, side: i32) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0..side) as f64))
        .collect()
}

#[test]
fn d1_and_d2_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        let a = random_cloud(&mut rng, 1000, 128);
        let b = random_cloud(&mut rng, 1000, 128);
        assert!((d1_mse(&a, &b).unwrap() - brute_d1(&a, &b)).abs() < 1e-9);
        let n = estimate_normals(&b, 12).unwrap();
        let d2 = d2_mse(&a, &b, &n).unwrap();
        assert!((d2 - brute_d2(&a, &b, &n)).abs() < 1e-9);
        assert!(d2 <= d1_mse(&a, &b).unwrap() + 1e-12);
    }
}

#[test]
fn unit_offset_singleton() {
    let mse = d1_mse(&[[1.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
    assert_eq!(mse, 1.0);
    assert!((psnr(mse, 10) - 64.97).abs() < 0.01);
    assert!((psnr(1.0, 10) - 10.0 * (3.0f64 * 1023.0 * 1023.0).log10()).abs() < 1e-12);
}

#[test]
fn identical_clouds_hit_the_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_cloud(&mut rng, 200, 32);
    assert_eq!(d1_mse(&a, &a).unwrap(), 0.0);
    for metric in [Metric::D1, Metric::D2] {
        for mode in [SymmetricMode::MaxError, SymmetricMode::MaxPsnr] {
            assert_eq!(symmetric_psnr(&a, &a, 7, metric, mode).unwrap(), PSNR_CAP);
        }
    }
}

#[test]
fn projection_removes_tangential_error() {
    let plane: Vec<[f64; 3]> = (0..400).map(|i| [(i % 20) as f64, (i / 20) as f64, 0.0]).collect();
    let n = estimate_normals(&plane, 12).unwrap();
    let tangential = [[5.25, 5.0, 0.0]];
    assert!(d1_mse(&tangential, &plane).unwrap() > 0.0);
    assert!(d2_mse(&tangential, &plane, &n).unwrap().abs() < 1e-18);
    let normal = [[5.0, 5.0, 0.4]];
    assert!((d2_mse(&normal, &plane, &n).unwrap() - 0.16).abs() < 1e-12);
}

#[test]
fn symmetric_modes() {
    let b: Vec<[f64; 3]> = (0..30).map(|i| [i as f64, 0.0, 0.0]).collect();
    let a: Vec<[f64; 3]> = b[..10].to_vec();
    let ab = psnr(d1_mse(&a, &b).unwrap(), 6);
    let ba = psnr(d1_mse(&b, &a).unwrap(), 6);
    assert_ne!(ab, ba);
    let max_err = symmetric_psnr(&a, &b, 6, Metric::D1, SymmetricMode::MaxError).unwrap();
    let max_psnr = symmetric_psnr(&a, &b, 6, Metric::D1, SymmetricMode::MaxPsnr).unwrap();
    assert_eq!(max_err, ab.min(ba));
    assert_eq!(max_psnr, ab.max(ba));
    for mode in [SymmetricMode::MaxError, SymmetricMode::MaxPsnr] {
        assert_eq!(
            symmetric_psnr(&a, &b, 6, Metric::D1, mode).unwrap(),
            symmetric_psnr(&b, &a, 6, Metric::D1, mode).unwrap()
        );
    }
    let q = evaluate(&a, &b, 6, SymmetricMode::MaxError).unwrap();
    assert_eq!(q.d1_psnr, max_err);
    assert_eq!("max-psnr".parse::<SymmetricMode>().unwrap(), SymmetricMode::MaxPsnr);
    assert!("max".parse::<SymmetricMode>().is_err());
}

#[test]
fn empty_clouds_are_rejected() {
    assert!(matches!(d1_mse(&[], &[[0.0; 3]]), Err(Error::Degenerate(_))));
    assert!(matches!(d1_mse(&[[0.0; 3]], &[]), Err(Error::Degenerate(_))));
}

#[test]
fn csv_rows() {
    let q = Quality {
        d1_mse: 1.0,
        d2_mse: 0.5,
        d1_psnr: 60.0,
        d2_psnr: 64.5,
    };
    let row = csv_row("a,b", 0.5, 1.25, &q);
    assert_eq!(row, "a_b,0.5,1.250000,60.0000,64.5000");
    assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
}
