use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ms2d_core::ssm::{
    discretize, scan_states_parallel, scan_states_sequential, selective_params, ssm_scan_parallel, ssm_scan_sequential,
    zoh_discretize, SsmStreamParams,
};
use ms2d_core::TokenSequence;

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

fn random_sequence(rng: &mut ChaCha8Rng, len: usize, channels: usize) -> TokenSequence {
    let data = (0..len * channels).map(|_| rng.random_range(-2.0..2.0)).collect();
    TokenSequence::from_vec(len, channels, data).unwrap()
}

#[test]
fn parallel_and_sequential_scans_agree_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut lengths: Vec<usize> = (0..98).map(|_| rng.random_range(1..=2048)).collect();
    lengths.extend([1, 2048]);
    let workers = pool(4);
    let mut worst = 0.0f64;
    for (i, &len) in lengths.iter().enumerate() {
        let c = rng.random_range(1..=4);
        let n = rng.random_range(1..=4);
        let p = SsmStreamParams::new(&mut rng, c, n, 0.5);
        let x = random_sequence(&mut rng, len, c);
        let seq = ssm_scan_sequential(&x, &p).unwrap();
        let par = workers.install(|| ssm_scan_parallel(&x, &p).unwrap());
        let d = seq.max_abs_diff(&par);
        assert!(d <= 1e-10, "instance {i} (L={len}): max diff {d}");
        worst = worst.max(d);

        let sel = selective_params(&x, &p).unwrap();
        let step = discretize(&x, &sel, &p.a());
        let hs = scan_states_sequential(&step);
        let hp = workers.install(|| scan_states_parallel(&step));
        let dh = hs.iter().zip(&hp).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dh <= 1e-10, "instance {i}: state diff {dh}");
    }
    assert!(worst.is_finite());
}

#[test]
fn parallel_scan_is_thread_count_independent_in_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = SsmStreamParams::new(&mut rng, 3, 5, 0.5);
    let x = random_sequence(&mut rng, 777, 3);
    let reference = ssm_scan_sequential(&x, &p).unwrap();
    for threads in [1, 2, 3, 8] {
        let y = pool(threads).install(|| ssm_scan_parallel(&x, &p).unwrap());
        assert!(reference.max_abs_diff(&y) <= 1e-10, "{threads} threads");
    }
}

#[test]
fn zoh_matches_closed_form() {
    for (a, b, dt) in [(-1.0, 0.5, 0.1), (-3.0, 2.0, 0.7), (-0.25, -1.0, 2.0)] {
        let (ab, bb) = zoh_discretize(a, b, dt);
        let e: f64 = (a * dt).exp();
        assert!((ab - e).abs() < 1e-15);
        assert!((bb - (e - 1.0) / a * b).abs() < 1e-14);
    }
    let (ab, bb) = zoh_discretize(-1e-12, 3.0, 0.5);
    assert!((ab - 1.0).abs() < 1e-11);
    assert!((bb - 1.5).abs() < 1e-11);
}
