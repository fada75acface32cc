mod common;

use reidpatch::evalbench::*;
use reidpatch::reid::Variant;
use reidpatch::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(angle: f64) -> Vec<f64> {
    vec![angle.cos(), angle.sin()]
}

fn item(angle: f64, identity: u32, camera: u32) -> GalleryItem {
    GalleryItem {
        embedding: unit(angle),
        identity,
        camera,
        adversarial: false,
    }
}

fn probe(identity: u32, camera: u32) -> ProbeInfo {
    ProbeInfo {
        identity,
        camera,
        adversarial: false,
    }
}

/// Result whose relevance sequence is given directly.
fn from_flags(flags: &[bool]) -> QueryResult {
    QueryResult {
        probe: probe(0, 0),
        ranked: flags.iter().enumerate().map(|(i, _)| (i, 1.0 - i as f64 * 0.01)).collect(),
        relevant: flags.to_vec(),
    }
}

fn first_hit(rank: usize, len: usize) -> QueryResult {
    from_flags(&(1..=len).map(|r| r == rank).collect::<Vec<_>>())
}

/// Rank of each gallery item by counting who beats it: a higher score, or an
/// equal score at a lower index.
fn oracle_positions(scores: &[f64]) -> Vec<usize> {
    (0..scores.len())
        .map(|i| {
            (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
        })
        .collect()
}

fn oracle_rank_k(per_query: &[Vec<bool>], k: usize) -> f64 {
    let hits = per_query.iter().filter(|f| f.iter().take(k).any(|x| *x)).count();
    hits as f64 / per_query.len() as f64
}

/// Precision at each relevant position, recomputed from counts over prefixes.
fn oracle_ap(flags: &[bool]) -> Option<f64> {
    let relevant_positions: Vec<usize> = (0..flags.len()).filter(|&i| flags[i]).collect();
    if relevant_positions.is_empty() {
        return None;
    }
    let total: f64 = relevant_positions
        .iter()
        .map(|&p| flags[..=p].iter().filter(|x| **x).count() as f64 / (p + 1) as f64)
        .sum();
    Some(total / relevant_positions.len() as f64)
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Gallery, ProbeInfo, Vec<f64>) {
    let n = rng.random_range(1..=50);
    let coarse = rng.random_bool(0.5);
    let items: Vec<GalleryItem> = (0..n)
        .map(|_| {
            let a = if coarse {
                rng.random_range(0..6) as f64 * 0.5
            } else {
                rng.random_range(0.0..6.28)
            };
            item(a, rng.random_range(1..=4), rng.random_range(1..=3))
        })
        .collect();
    let p = probe(rng.random_range(1..=4), rng.random_range(1..=3));
    (Gallery::new(items).unwrap(), p, unit(rng.random_range(0.0..6.28)))
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let queries = rng.random_range(1..6);
        let mut results = Vec::new();
        let mut oracle_flags = Vec::new();
        for _ in 0..queries {
            let (gallery, p, emb) = random_instance(&mut rng);
            let r = rank_gallery(&emb, p, &gallery, Relevance::CrossCamera).unwrap();
            // oracle: filter junk, score, place by counting
            let kept: Vec<usize> = (0..gallery.len())
                .filter(|&i| {
                    let it = &gallery.items()[i];
                    !(it.identity == p.identity && it.camera == p.camera)
                })
                .collect();
            let scores: Vec<f64> = kept
                .iter()
                .map(|&i| (1.0 + emb.iter().zip(&gallery.items()[i].embedding).map(|(a, b)| a * b).sum::<f64>()) / 2.0)
                .map(|s| s.clamp(0.0, 1.0))
                .collect();
            let pos = oracle_positions(&scores);
            let mut flags = vec![false; kept.len()];
            for (o, &i) in kept.iter().enumerate() {
                assert_eq!(r.ranked[pos[o]].0, i);
                let it = &gallery.items()[i];
                flags[pos[o]] = it.identity == p.identity && it.camera != p.camera;
            }
            assert_eq!(r.relevant, flags);
            oracle_flags.push(flags);
            results.push(r);
        }
        for k in [1, 5, 10] {
            let got = rank_k_accuracy(&results, k).unwrap().accuracy;
            assert!((got - oracle_rank_k(&oracle_flags, k)).abs() <= 1e-9);
        }
        let aps: Vec<f64> = oracle_flags.iter().filter_map(|f| oracle_ap(f)).collect();
        match mean_average_precision(&results) {
            Ok(m) => {
                let want = aps.iter().sum::<f64>() / aps.len() as f64;
                assert!((m.map - want).abs() <= 1e-9);
                assert_eq!(m.skipped, results.len() - aps.len());
            }
            Err(Error::Protocol(_)) => assert!(aps.is_empty()),
            Err(e) => panic!("{e}"),
        }
    }
}

#[test]
fn rank_k_on_hand_enumerated_ranks() {
    let results = vec![first_hit(1, 10), first_hit(3, 10), first_hit(7, 10)];
    assert!((rank_k_accuracy(&results, 1).unwrap().accuracy - 1.0 / 3.0).abs() < 1e-12);
    assert!((rank_k_accuracy(&results, 5).unwrap().accuracy - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(rank_k_accuracy(&results, 10).unwrap().accuracy, 1.0);
}

#[test]
fn perfect_and_empty_relevance() {
    let perfect = vec![first_hit(1, 4), first_hit(1, 4)];
    for k in 1..=4 {
        assert_eq!(rank_k_accuracy(&perfect, k).unwrap().accuracy, 1.0);
    }
    let none = vec![from_flags(&[false, false]), from_flags(&[false])];
    assert_eq!(rank_k_accuracy(&none, 1).unwrap().accuracy, 0.0);
    assert!(matches!(mean_average_precision(&none), Err(Error::Protocol(_))));
}

#[test]
fn oversized_k_is_clamped_and_recorded() {
    let r = rank_k_accuracy(&[first_hit(2, 3)], 10).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.clamped_queries, 1);
    assert!(rank_k_accuracy(&[first_hit(2, 3)], 0).is_err());
}

#[test]
fn average_precision_examples() {
    assert_eq!(average_precision(&[true]), Some(1.0));
    let ap = average_precision(&[true, false, true]).unwrap();
    assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    let m = mean_average_precision(&[from_flags(&[true, false, true]), from_flags(&[false])]).unwrap();
    assert_eq!(m.evaluated, 1);
    assert_eq!(m.skipped, 1);
}

#[test]
fn probe_itself_under_another_camera_ranks_first() {
    let model = common::tiny_model(Variant::ClassificationEmbedding, 2);
    let x = common::scene(1, 1, 16, 8);
    let others: Vec<_> = (2..8).map(|s| (common::scene(s, 2, 16, 8), 9, 2, false)).collect();
    let mut imgs = others.clone();
    imgs.insert(3, (x.clone(), 5, 2, false));
    let gallery = Gallery::from_images(&model, &imgs).unwrap();
    let r = run_query(&model, &x, probe(5, 1), &gallery).unwrap();
    assert_eq!(r.ranked[0].0, 3);
    assert!((r.ranked[0].1 - 1.0).abs() < 1e-9);
    assert_eq!(r.first_relevant_rank(), Some(1));
}

#[test]
fn identical_items_keep_gallery_order() {
    let gallery = Gallery::new((0..7).map(|i| item(0.3, i + 10, 2)).collect()).unwrap();
    let r = rank_gallery(&unit(1.0), probe(1, 1), &gallery, Relevance::CrossCamera).unwrap();
    assert_eq!(r.ranked.iter().map(|p| p.0).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
}

#[test]
fn random_gallery_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = common::tiny_model(Variant::SiameseVerification, 3);
    let imgs: Vec<_> = (0..10)
        .map(|s| (common::scene(100 + s, 1 + (s % 3) as u32, 16, 8), rng.random_range(1..4), 1 + (s % 3) as u32, false))
        .collect();
    let gallery = Gallery::from_images(&model, &imgs).unwrap();
    let x = common::scene(999, 1, 16, 8);
    let r = run_query_with(&model, &x, probe(77, 1), &gallery, Relevance::Identity(2)).unwrap();
    let mut oracle: Vec<(usize, f64)> = imgs.iter().enumerate().map(|(i, (g, ..))| (i, model.similarity(&x, g).unwrap())).collect();
    // insertion sort by (score desc, index asc)
    for i in 1..oracle.len() {
        let mut j = i;
        while j > 0 && (oracle[j].1 > oracle[j - 1].1 || (oracle[j].1 == oracle[j - 1].1 && oracle[j].0 < oracle[j - 1].0)) {
            oracle.swap(j, j - 1);
            j -= 1;
        }
    }
    assert_eq!(r.ranked.iter().map(|p| p.0).collect::<Vec<_>>(), oracle.iter().map(|p| p.0).collect::<Vec<_>>());
    for (i, &(g, _)) in r.ranked.iter().enumerate() {
        assert_eq!(r.relevant[i], imgs[g].1 == 2);
    }
}

#[test]
fn empty_gallery_is_rejected() {
    assert!(matches!(Gallery::new(vec![]), Err(Error::InvalidArgument(_))));
}

#[test]
fn metrics_table_renders_three_decimals() {
    let table = MetricsTable {
        rows: vec![MetricsRow {
            condition: CLEAN_SELF.into(),
            rank1: 0.87912,
            rank5: 1.0,
            rank10: 1.0,
            map: 0.5,
            ss: 0.876,
            queries: 100,
            skipped: 0,
        }],
        deltas: vec![],
    };
    assert!(table.to_text().contains("0.879"));
    let csv = table.to_csv();
    assert!(csv.lines().nth(1).unwrap().starts_with("clean self-match,0.879,1.000,1.000,0.500,0.876,100,0"));
}

proptest! {
    #[test]
    fn rank_k_is_monotone_and_bounded(flags in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..30), 1..8)) {
        let results: Vec<QueryResult> = flags.iter().map(|f| from_flags(f)).collect();
        let mut prev = 0.0;
        for k in 1..35 {
            let a = rank_k_accuracy(&results, k).unwrap().accuracy;
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(a >= prev);
            prev = a;
        }
        if let Ok(m) = mean_average_precision(&results) {
            prop_assert!((0.0..=1.0).contains(&m.map));
        }
    }

    #[test]
    fn ranking_is_invariant_to_gallery_order(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..20);
        let items: Vec<GalleryItem> = (0..n)
            .map(|_| item(rng.random_range(0.0..6.28), rng.random_range(1..4), rng.random_range(1..3)))
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<GalleryItem> = perm.iter().map(|&i| items[i].clone()).collect();
        let emb = unit(0.7);
        let p = probe(1, 1);
        let a = rank_gallery(&emb, p, &Gallery::new(items).unwrap(), Relevance::CrossCamera).unwrap();
        let b = rank_gallery(&emb, p, &Gallery::new(shuffled).unwrap(), Relevance::CrossCamera).unwrap();
        let sa: Vec<f64> = a.ranked.iter().map(|x| x.1).collect();
        let sb: Vec<f64> = b.ranked.iter().map(|x| x.1).collect();
        prop_assert_eq!(sa, sb);
        let mut orig_b: Vec<usize> = b.ranked.iter().map(|x| perm[x.0]).collect();
        let mut orig_a: Vec<usize> = a.ranked.iter().map(|x| x.0).collect();
        orig_a.sort_unstable();
        orig_b.sort_unstable();
        prop_assert_eq!(orig_a, orig_b);
        prop_assert_eq!(a.relevant_count(), b.relevant_count());
        prop_assert_eq!(rank_k_accuracy(&[a.clone()], 1).unwrap().accuracy, rank_k_accuracy(&[b.clone()], 1).unwrap().accuracy);
    }
}
