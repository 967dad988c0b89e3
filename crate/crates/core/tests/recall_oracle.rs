use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_core::retrieval::{recall_at_k, RetrievalDirection, ScoreMatrix};

/// Sort-based reference: stable sort by descending score, so equal scores
/// keep their index order.
fn brute_force(m: &ScoreMatrix, gt: &[usize], k: usize, dir: RetrievalDirection) -> f64 {
    let ranked = |scores: Vec<f64>| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        idx
    };
    match dir {
        RetrievalDirection::ImageRetrieval => {
            let hits = (0..m.captions)
                .filter(|&c| {
                    let order = ranked((0..m.images).map(|i| m.get(i, c)).collect());
                    order[..k].contains(&gt[c])
                })
                .count();
            hits as f64 / m.captions as f64
        }
        RetrievalDirection::SentenceRetrieval => {
            let hits = (0..m.images)
                .filter(|&i| {
                    let order = ranked((0..m.captions).map(|c| m.get(i, c)).collect());
                    order[..k].iter().any(|&c| gt[c] == i)
                })
                .count();
            hits as f64 / m.images as f64
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, images: usize, captions: usize, levels: u32) -> ScoreMatrix {
    let data = (0..images * captions)
        .map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels))
        .collect();
    ScoreMatrix::new(images, captions, data).unwrap()
}

const DIRS: [RetrievalDirection; 2] = [
    RetrievalDirection::ImageRetrieval,
    RetrievalDirection::SentenceRetrieval,
];

#[test]
fn matches_brute_force_on_random_square_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..1000 {
        // Coarse levels on some trials so ties are common.
        let levels = if trial % 2 == 0 { 5 } else { 1_000_000 };
        let m = random_matrix(&mut rng, 20, 20, levels);
        let mut gt: Vec<usize> = (0..20).collect();
        for i in (1..20).rev() {
            gt.swap(i, rng.random_range(0..=i));
        }
        for dir in DIRS {
            for k in [1, 5, 10, 20] {
                assert_eq!(
                    recall_at_k(&m, &gt, k, dir).unwrap(),
                    brute_force(&m, &gt, k, dir),
                    "trial {trial}"
                );
            }
        }
    }
}

#[test]
fn matches_brute_force_with_five_captions_per_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let m = random_matrix(&mut rng, 8, 40, 7);
        let gt: Vec<usize> = (0..40).map(|c| c / 5).collect();
        for dir in DIRS {
            for k in [1, 3, 8] {
                assert_eq!(recall_at_k(&m, &gt, k, dir).unwrap(), brute_force(&m, &gt, k, dir));
            }
        }
    }
}

#[test]
fn k_beyond_candidates_is_a_config_error() {
    let m = ScoreMatrix::new(3, 6, vec![0.0; 18]).unwrap();
    let gt = [0, 0, 1, 1, 2, 2];
    assert!(recall_at_k(&m, &gt, 4, RetrievalDirection::ImageRetrieval).is_err());
    assert!(recall_at_k(&m, &gt, 6, RetrievalDirection::SentenceRetrieval).is_ok());
    assert!(recall_at_k(&m, &gt, 0, RetrievalDirection::SentenceRetrieval).is_err());
}

#[test]
fn all_equal_scores_rank_by_index() {
    let m = ScoreMatrix::new(4, 4, vec![0.5; 16]).unwrap();
    let gt = [0, 1, 2, 3];
    assert_eq!(
        recall_at_k(&m, &gt, 1, RetrievalDirection::ImageRetrieval).unwrap(),
        0.25
    );
    assert_eq!(
        recall_at_k(&m, &gt, 2, RetrievalDirection::SentenceRetrieval).unwrap(),
        0.5
    );
}

fn square(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (
        prop::collection::vec(-5.0..5.0f64, n * n),
        Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
    )
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k((data, gt) in square(6)) {
        let m = ScoreMatrix::new(6, 6, data).unwrap();
        for dir in DIRS {
            let mut prev = 0.0;
            for k in 1..=6 {
                let r = recall_at_k(&m, &gt, k, dir).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }

    #[test]
    fn invariant_under_increasing_transforms((data, gt) in square(6), a in 0.1..10.0f64, b in -3.0..3.0f64) {
        let m = ScoreMatrix::new(6, 6, data.clone()).unwrap();
        let t = ScoreMatrix::new(6, 6, data.iter().map(|&x| (a * x + b).exp()).collect()).unwrap();
        for dir in DIRS {
            for k in [1, 3] {
                prop_assert_eq!(recall_at_k(&m, &gt, k, dir).unwrap(), recall_at_k(&t, &gt, k, dir).unwrap());
            }
        }
    }

    #[test]
    fn invariant_under_caption_permutation((data, gt) in square(6), perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        // Distinct scores so no tie-break depends on caption order.
        let distinct: Vec<f64> = data.iter().enumerate().map(|(i, &x)| x + i as f64 * 1e-9).collect();
        let m = ScoreMatrix::new(6, 6, distinct.clone()).unwrap();
        let mut pd = vec![0.0; 36];
        let mut pgt = vec![0; 6];
        for (new, &old) in perm.iter().enumerate() {
            for i in 0..6 {
                pd[i * 6 + new] = distinct[i * 6 + old];
            }
            pgt[new] = gt[old];
        }
        let p = ScoreMatrix::new(6, 6, pd).unwrap();
        for dir in DIRS {
            prop_assert_eq!(recall_at_k(&m, &gt, 1, dir).unwrap(), recall_at_k(&p, &pgt, 1, dir).unwrap());
        }
    }
}
