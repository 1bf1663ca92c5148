use augnerf::rays::{
    bin_edges, generate_rays, hierarchical_sample, sample_pdf, stratified_sample, Camera,
    DepthSamples, Midpoints,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const IDENTITY: [[f64; 4]; 3] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
];

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

#[test]
fn principal_point_ray_follows_optical_axis() {
    // even-sized images have no centre pixel, so use an odd one
    let camera = Camera::new(201, 201, 100.0, IDENTITY, 1.0, 5.0).unwrap();
    let ray = camera.ray(100, 100);
    assert_eq!(ray.direction, [0.0, 0.0, -1.0]);
    assert_eq!(ray.view_dir, [0.0, 0.0, -1.0]);
    assert_eq!(ray.origin, [0.0; 3]);
}

#[test]
fn corner_pixel_matches_pinhole_projection() {
    let camera = Camera::new(200, 200, 100.0, IDENTITY, 1.0, 5.0).unwrap();
    let rays = generate_rays(&camera);
    assert_eq!(rays.len(), 200 * 200);
    // Project the unit-depth point hit by the top-left pixel centre back to the
    // image: u = f x / -z + cx, v = -f y / -z + cy.
    let d = rays[0].direction;
    let (u, v) = (100.0 * d[0] / -d[2] + 100.0, -100.0 * d[1] / -d[2] + 100.0);
    assert!((u - 0.5).abs() < 1e-12 && (v - 0.5).abs() < 1e-12);
    let expected = normalized([-99.5, 99.5, -100.0]);
    for c in 0..3 {
        assert!((rays[0].view_dir[c] - expected[c]).abs() < 1e-15);
    }
    let last = rays[199 * 200 + 199].view_dir;
    let expected = normalized([99.5, -99.5, -100.0]);
    for c in 0..3 {
        assert!((last[c] - expected[c]).abs() < 1e-15);
    }
}

#[test]
fn rays_are_row_major() {
    let camera = Camera::new(4, 3, 3.0, IDENTITY, 1.0, 2.0).unwrap();
    let rays = generate_rays(&camera);
    for j in 0..3 {
        for i in 0..4 {
            assert_eq!(rays[j * 4 + i], camera.ray(i, j));
        }
    }
}

#[test]
fn translating_the_pose_translates_origins_only() {
    let pose = Camera::look_at([1.0, 2.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0]);
    let base = Camera::new(8, 6, 7.0, pose, 1.0, 6.0).unwrap();
    let mut moved_pose = pose;
    let shift = [0.5, -1.25, 2.0];
    for r in 0..3 {
        moved_pose[r][3] += shift[r];
    }
    let moved = Camera::new(8, 6, 7.0, moved_pose, 1.0, 6.0).unwrap();
    for (a, b) in generate_rays(&base).iter().zip(generate_rays(&moved)) {
        assert_eq!(a.direction, b.direction);
        for c in 0..3 {
            assert_eq!(b.origin[c], a.origin[c] + shift[c]);
        }
    }
}

#[test]
fn pose_round_trip_is_bitwise() {
    let pose = Camera::look_at([0.3, -4.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0]);
    let camera = Camera::new(16, 16, 20.0, pose, 2.0, 6.0).unwrap();
    let mut perturbed = camera.clone();
    perturbed.pose[0][3] += 0.1;
    perturbed.pose[1][0] += 1e-3;
    let mut restored = perturbed.clone();
    restored.pose = pose;
    assert_ne!(generate_rays(&perturbed), generate_rays(&camera));
    assert_eq!(generate_rays(&restored), generate_rays(&camera));
}

#[test]
fn invalid_cameras_are_rejected() {
    assert!(Camera::new(4, 4, 1.0, IDENTITY, 2.0, 1.0).is_err());
    assert!(Camera::new(4, 4, 1.0, IDENTITY, 0.0, 1.0).is_err());
    let mut skew = IDENTITY;
    skew[0][1] = 0.1;
    assert!(Camera::new(4, 4, 1.0, skew, 1.0, 2.0).is_err());
}

#[test]
fn midpoint_source_gives_bin_centres() {
    let (near, far, k) = (2.0, 6.0, 8);
    let s = stratified_sample(near, far, k, &mut Midpoints).unwrap();
    for (i, &t) in s.t.iter().enumerate() {
        let expected = near + (i as f64 + 0.5) * (far - near) / k as f64;
        assert!((t - expected).abs() < 1e-14);
    }
    assert!((s.terminal_gap - 0.5).abs() < 1e-15);
    assert!(stratified_sample(near, far, 1, &mut Midpoints).is_err());
}

#[test]
fn every_sample_stays_in_its_bin() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (near, far, k) = (0.5, 3.5, 16);
    let edges = bin_edges(near, far, k);
    for _ in 0..10_000 {
        let s = stratified_sample(near, far, k, &mut rng).unwrap();
        for (i, &t) in s.t.iter().enumerate() {
            assert!(t >= edges[i] && t <= edges[i + 1]);
        }
        assert!(s.t.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn first_sample_mean_is_first_bin_centre() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (near, far, k) = (2.0, 6.0, 4);
    let n = 100_000;
    let mean = (0..n)
        .map(|_| stratified_sample(near, far, k, &mut rng).unwrap().t[0])
        .sum::<f64>()
        / n as f64;
    let width = (far - near) / k as f64;
    let expected = near + width / 2.0;
    let std_err = width / 12f64.sqrt() / (n as f64).sqrt();
    assert!(
        (mean - expected).abs() < 3.0 * std_err,
        "mean {mean} expected {expected} ± {std_err}"
    );
}

/// Largest gap between the empirical CDF of `samples` and `cdf`.
fn ks_distance(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn flat_weights_sample_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let edges = bin_edges(2.0, 6.0, 16);
    let n = 100_000;
    let mut samples = sample_pdf(&[0.25; 16], &edges, n, &mut rng).unwrap();
    let d = ks_distance(&mut samples, |x| (x - 2.0) / 4.0);
    // 1% critical value of the one-sample KS statistic
    assert!(d < 1.628 / (n as f64).sqrt(), "KS distance {d}");
    let mut fallback = sample_pdf(&[0.0; 16], &edges, n, &mut rng).unwrap();
    assert!(ks_distance(&mut fallback, |x| (x - 2.0) / 4.0) < 1.628 / (n as f64).sqrt());
}

#[test]
fn single_bin_mass_confines_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let edges = bin_edges(0.0, 8.0, 8);
    let mut w = [0.0; 8];
    w[5] = 3.0;
    for t in sample_pdf(&w, &edges, 10_000, &mut rng).unwrap() {
        assert!((5.0..=6.0).contains(&t));
    }
}

#[test]
fn triangular_weights_follow_the_analytic_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = 10;
    let edges = bin_edges(0.0, 1.0, k);
    let weights: Vec<f64> = (0..k).map(|j| (j + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let cdf = |x: f64| {
        let mut acc = 0.0;
        for j in 0..k {
            let (lo, hi) = (j as f64 / k as f64, (j + 1) as f64 / k as f64);
            if x >= hi {
                acc += weights[j];
            } else if x > lo {
                acc += weights[j] * (x - lo) * k as f64;
            }
        }
        acc / total
    };
    let mut samples = sample_pdf(&weights, &edges, 100_000, &mut rng).unwrap();
    assert!(ks_distance(&mut samples, cdf) < 0.01);
}

#[test]
fn hierarchical_merge_is_sorted() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let coarse = stratified_sample(2.0, 6.0, 8, &mut rng).unwrap();
    let edges = bin_edges(2.0, 6.0, 8);
    let weights = [0.0, 0.1, 0.5, 0.9, 0.2, 0.0, 0.0, 0.3];
    let merged = hierarchical_sample(&coarse, &weights, &edges, 8, &mut rng).unwrap();
    assert_eq!(merged.len(), 16);
    assert!(merged.t.windows(2).all(|w| w[1] >= w[0]));
    assert!(merged.t.iter().all(|t| (2.0..=6.0).contains(t)));
    assert!(coarse.t.iter().all(|t| merged.t.contains(t)));
    assert!(hierarchical_sample(&coarse, &weights[..7], &edges, 8, &mut rng).is_err());
    assert!(sample_pdf(&weights, &edges[..8], 8, &mut rng).is_err());
}

#[test]
fn deltas_use_the_terminal_gap() {
    let s = DepthSamples {
        t: vec![1.0, 1.5, 3.0],
        terminal_gap: 0.25,
    };
    assert_eq!(s.deltas(), vec![0.5, 1.5, 0.25]);
}
