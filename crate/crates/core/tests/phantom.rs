use std::f64::consts::PI;

use ms2d_core::data::{generate_case, generate_phantom, subject_split};
use ms2d_core::{PhantomSpec, Sample};

fn spec(size: usize) -> PhantomSpec {
    PhantomSpec {
        n_cases: 8,
        size,
        ..Default::default()
    }
}

fn in_brain(s: &PhantomSpec, r: usize, c: usize, margin: f64) -> bool {
    let center = (s.size as f64 - 1.0) / 2.0;
    (r as f64 - center).hypot(c as f64 - center) <= s.brain_radius() - margin
}

fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Dominant gradient orientation and coherence over lesion-free tissue.
fn structure_tensor(s: &PhantomSpec, x: &Sample) -> (f64, f64) {
    let n = s.size;
    let img = x.image.data();
    let mask = x.mask.data();
    let (mut jxx, mut jyy, mut jxy) = (0.0, 0.0, 0.0);
    for r in 1..n - 1 {
        for c in 1..n - 1 {
            if !in_brain(s, r, c, 2.0) {
                continue;
            }
            let near_lesion = (r - 1..=r + 1).any(|rr| (c - 1..=c + 1).any(|cc| mask[rr * n + cc] > 0.0));
            if near_lesion {
                continue;
            }
            let gx = (img[r * n + c + 1] - img[r * n + c - 1]) / 2.0;
            let gy = (img[(r + 1) * n + c] - img[(r - 1) * n + c]) / 2.0;
            jxx += gx * gx;
            jyy += gy * gy;
            jxy += gx * gy;
        }
    }
    let orientation = 0.5 * (2.0 * jxy).atan2(jxx - jyy);
    let spread = ((jxx - jyy).powi(2) + 4.0 * jxy * jxy).sqrt();
    (orientation.rem_euclid(PI), spread / (jxx + jyy))
}

#[test]
fn texture_orientation_follows_theta() {
    for theta in [0.0, PI / 6.0, PI / 3.0, PI / 2.0, 2.0 * PI / 3.0, 5.0 * PI / 6.0] {
        let s = PhantomSpec {
            theta,
            anisotropy: 1.0,
            ..spec(64)
        };
        for i in 0..3 {
            let (phi, coherence) = structure_tensor(&s, &generate_case(&s, i).unwrap());
            assert!(angle_gap(phi, theta) < 0.1, "theta {theta}: got {phi}");
            assert!(coherence > 0.8, "theta {theta}: coherence {coherence}");
        }
    }
}

#[test]
fn coherence_grows_with_anisotropy() {
    let mut last = 0.0;
    for anisotropy in [0.0, 0.25, 1.0] {
        let s = PhantomSpec { anisotropy, ..spec(64) };
        let c: f64 = (0..4)
            .map(|i| structure_tensor(&s, &generate_case(&s, i).unwrap()).1)
            .sum::<f64>()
            / 4.0;
        assert!(c > last, "anisotropy {anisotropy}: {c} <= {last}");
        last = c;
    }
}

#[test]
fn lesions_are_brighter_than_tissue() {
    let s = spec(64);
    for x in generate_phantom(&s).unwrap() {
        let n = s.size;
        let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0, 0.0, 0);
        for r in 0..n {
            for c in 0..n {
                let v = x.image.data()[r * n + c];
                if x.mask.data()[r * n + c] > 0.0 {
                    fg += v;
                    nf += 1;
                } else if in_brain(&s, r, c, 1.0) {
                    bg += v;
                    nb += 1;
                }
            }
        }
        assert!(nf > 0 && nb > 0);
        assert!(fg / nf as f64 > bg / nb as f64 + 0.2, "{}", x.id);
    }
}

#[test]
fn single_lesion_major_axis_runs_along_stripes() {
    let s = PhantomSpec {
        n_cases: 30,
        lesions_min: 1,
        lesions_max: 1,
        eccentricity: 0.95,
        ..spec(64)
    };
    let mut checked = 0;
    for x in generate_phantom(&s).unwrap() {
        let n = s.size;
        let pts: Vec<(f64, f64)> = (0..n * n)
            .filter(|&i| x.mask.data()[i] > 0.0)
            .map(|i| ((i / n) as f64, (i % n) as f64))
            .collect();
        let m = pts.len() as f64;
        let (my, mx) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / m, a.1 + p.1 / m));
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for &(y, x) in &pts {
            sxx += (x - mx).powi(2);
            syy += (y - my).powi(2);
            sxy += (x - mx) * (y - my);
        }
        let spread = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
        let (l1, l2) = ((sxx + syy + spread) / 2.0, (sxx + syy - spread) / 2.0);
        if l1 < 3.0 * l2 {
            continue;
        }
        checked += 1;
        let axis = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        assert!(
            angle_gap(axis, s.theta + PI / 2.0) < PI / 12.0 + 0.15,
            "{}: axis {axis}",
            x.id
        );
    }
    assert!(checked >= 5, "only {checked} elongated lesions");
}

#[test]
fn cases_are_reproducible_and_bounded() {
    let s = spec(32);
    let all = generate_phantom(&s).unwrap();
    assert_eq!(all, generate_phantom(&s).unwrap());
    assert_eq!(all[5], generate_case(&s, 5).unwrap());
    let other = generate_phantom(&PhantomSpec { seed: 1, ..s.clone() }).unwrap();
    assert_ne!(all[0].image, other[0].image);
    for x in &all {
        assert!(x.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(x.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for r in 0..32 {
            for c in 0..32 {
                if !in_brain(&s, r, c, 0.0) {
                    assert_eq!(x.image.data()[r * 32 + c], 0.0);
                    assert_eq!(x.mask.data()[r * 32 + c], 0.0);
                }
            }
        }
    }
}

#[test]
fn split_is_disjoint_and_covers_every_case() {
    let ids: Vec<String> = (0..60).map(ms2d_core::data::case_id).collect();
    let split = subject_split(&ids, 3).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (42, 9, 9));
    let mut all: Vec<&String> = split.train.iter().chain(&split.val).chain(&split.test).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 60);
    assert_eq!(split, subject_split(&ids, 3).unwrap());
}
