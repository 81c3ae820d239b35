use divcon::core::{Rng, Tensor};
use divcon::metrics::{consistency_mse, vendi_score, white_noise_consistency_mse};
use divcon::world::DecodedVideo;

fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

fn vendi(rows: &[Vec<f64>]) -> f64 {
    let refs: Vec<&[f64]> = rows.iter().map(|r| &r[..]).collect();
    vendi_score(&refs).unwrap().raw
}

/// Random orthogonal matrix by Gram-Schmidt.
fn orthogonal(rng: &mut Rng, d: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let c: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

#[test]
fn vendi_range_permutation_and_rotation() {
    let mut rng = Rng::new(3);
    for _ in 0..200 {
        let n = 2 + rng.below(6);
        let d = 2 + rng.below(8);
        let rows = random_rows(&mut rng, n, d);
        let base = vendi(&rows);
        assert!((1.0 - 1e-9..=n as f64 + 1e-9).contains(&base), "{base}");
        let norm = vendi_score(&rows.iter().map(|r| &r[..]).collect::<Vec<_>>()).unwrap().normalized;
        assert!((1.0 / n as f64 - 1e-9..=1.0 + 1e-9).contains(&norm));

        let mut perm = rows.clone();
        rng.shuffle(&mut perm);
        assert!((vendi(&perm) - base).abs() < 1e-9);

        let q = orthogonal(&mut rng, d);
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| q.iter().map(|qi| qi.iter().zip(r).map(|(a, b)| a * b).sum()).collect())
            .collect();
        assert!((vendi(&rotated) - base).abs() < 1e-9);
    }
}

fn video(rng: &mut Rng, t: usize) -> DecodedVideo {
    DecodedVideo(rng.normal_tensor(&[t, 2, 3, 3]))
}

#[test]
fn consistency_is_translation_invariant_and_quadratic() {
    let mut rng = Rng::new(5);
    for _ in 0..50 {
        let t = 3 + rng.below(15);
        let s = video(&mut rng, t);
        let base = consistency_mse(&s).unwrap();
        let c = rng.normal() * 10.0;
        let shifted = DecodedVideo(Tensor::new(s.0.shape().to_vec(), s.0.data().iter().map(|x| x + c).collect()).unwrap());
        assert!((consistency_mse(&shifted).unwrap() - base).abs() < 1e-9 * (1.0 + base));
        let k = rng.uniform_in(0.1, 5.0);
        let scaled = DecodedVideo(s.0.scale(k));
        assert!((consistency_mse(&scaled).unwrap() - k * k * base).abs() < 1e-9 * (1.0 + k * k * base));
    }
}

#[test]
fn white_noise_error_matches_closed_form() {
    let mut rng = Rng::new(11);
    let trials = 400;
    let mc: f64 = (0..trials)
        .map(|_| consistency_mse(&DecodedVideo(rng.normal_tensor(&[17, 3, 8, 8]))).unwrap())
        .sum::<f64>()
        / trials as f64;
    let expect = white_noise_consistency_mse(17);
    assert!((mc / expect - 1.0).abs() < 0.2, "monte carlo {mc} vs {expect}");
}
