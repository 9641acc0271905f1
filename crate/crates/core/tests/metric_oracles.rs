//! Metric values against brute-force and Monte Carlo oracles.

use idiorank::metrics::{dcg, spearman, DcgGains};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ids(order: &[usize]) -> Vec<String> {
    order.iter().map(|i| format!("img{i}")).collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Pearson correlation of rank vectors as an exact fraction num/den.
fn rank_correlation(pred: &[usize], gold: &[usize]) -> (i64, i64) {
    let n = pred.len();
    let rank = |order: &[usize]| {
        let mut r = vec![0i64; n];
        for (pos, &item) in order.iter().enumerate() {
            r[item] = pos as i64 + 1;
        }
        r
    };
    let (rp, rg) = (rank(pred), rank(gold));
    // Work with 2r - (n+1) to stay in integers.
    let centered = |r: &[i64]| r.iter().map(|x| 2 * x - (n as i64 + 1)).collect::<Vec<_>>();
    let (cp, cg) = (centered(&rp), centered(&rg));
    let cov: i64 = cp.iter().zip(&cg).map(|(a, b)| a * b).sum();
    let var: i64 = cp.iter().map(|a| a * a).sum();
    (cov, var)
}

#[test]
fn spearman_matches_brute_force_on_all_permutations() {
    let perms = permutations(5);
    assert_eq!(perms.len(), 120);
    for gold in &perms {
        for pred in &perms {
            let rho = spearman(&ids(pred), &ids(gold)).unwrap();
            let (num, den) = rank_correlation(pred, gold);
            // Both sides are multiples of 1/10 at n=5.
            assert_eq!(den, 40);
            assert_eq!(
                (rho * 40.0).round() as i64,
                num,
                "pred {pred:?} gold {gold:?}"
            );
            assert!((rho - num as f64 / den as f64).abs() < 1e-15);
        }
    }
}

#[test]
fn spearman_hand_case() {
    let rho = spearman(&ids(&[1, 0, 2, 3, 4]), &ids(&[0, 1, 2, 3, 4])).unwrap();
    assert!((rho - 0.9).abs() < 1e-15);
}

#[test]
fn dcg_hand_cases() {
    let gains = DcgGains::default();
    let gold = ids(&[0, 1, 2, 3, 4]);
    let best = dcg(&gold, &gold, &gains).unwrap();
    assert!((best - 3.6309).abs() < 5e-5, "{best}");
    assert!((best - (3.0 + 1.0 / 3f64.log2())).abs() < 1e-12);

    // Gold top last, gold second fourth.
    let worst = dcg(&ids(&[2, 3, 4, 1, 0]), &gold, &gains).unwrap();
    assert!((worst - (3.0 / 6f64.log2() + 1.0 / 5f64.log2())).abs() < 1e-12);
    assert!((worst - 1.59123).abs() < 5e-6, "{worst}");
}

#[test]
fn dcg_is_maximized_by_gold_order() {
    let gains = DcgGains::default();
    let gold = ids(&[3, 1, 4, 0, 2]);
    let best = dcg(&gold, &gold, &gains).unwrap();
    for p in permutations(5) {
        assert!(dcg(&ids(&p), &gold, &gains).unwrap() <= best + 1e-12);
    }
}

#[test]
fn dcg_random_expectation_monte_carlo() {
    let gains = DcgGains::default();
    let gold = ids(&[0, 1, 2, 3, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut order: Vec<usize> = (0..5).collect();
    let draws = 200_000;
    let mut total = 0.0;
    for _ in 0..draws {
        order.shuffle(&mut rng);
        total += dcg(&ids(&order), &gold, &gains).unwrap();
    }
    let mean = total / draws as f64;
    let expected: f64 = 0.8 * (1..=5).map(|i| 1.0 / ((i + 1) as f64).log2()).sum::<f64>();
    assert!((expected - 2.3588).abs() < 5e-5);
    assert!((mean - 2.3588).abs() < 0.01, "monte carlo mean {mean}");
}
