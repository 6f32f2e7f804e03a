use std::collections::BTreeSet;

use proptest::collection::{btree_set, vec};
use proptest::prelude::*;

use benchlab::correspondence::merge_labelers;
use benchlab::io_formats::{load_soft_map, parse_pgm, save_soft_map, threshold_matched, write_pgm, Raster, SoftMap};
use benchlab::label_model::{
    extract_segments, BoundarySegment, LabelerMap, MasterMap, MasterPixel, SegmentCollection, SetTag, Source,
};
use benchlab::risk_eval::{build_subset, estimate_risk, risk_utility_curve, true_strength_risk, Pooling};
use benchlab::strength_inference::{response_prob, run_em, update_strength, EmConfig, StrengthField, StrengthGrid};
use benchlab::trial_engine::{sample_trial_pairs, Choice, ResponseRecord, TrialRecord};

fn master_from(rows: &[Vec<u8>], labelers: usize) -> MasterMap {
    MasterMap {
        image_id: "p".into(),
        width: 64,
        height: 64,
        labeler_ids: (0..labelers).map(|l| format!("l{l}")).collect(),
        pixels: rows
            .iter()
            .enumerate()
            .map(|(i, r)| MasterPixel {
                pixel_id: i as u32,
                row: (i / 64) as u32,
                col: (i % 64) as u32,
                responses: r.clone(),
            })
            .collect(),
    }
}

fn response_rows(labelers: usize, max_pixels: usize) -> impl Strategy<Value = Vec<Vec<u8>>> {
    vec(vec(0u8..2, labelers), 2..max_pixels)
        .prop_filter("somebody marks every pixel", |rows| rows.iter().all(|r| r.contains(&1)))
}

fn quick_config() -> EmConfig {
    EmConfig { grid: 41, max_iters: 4, ..EmConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn labeler_permutation_permutes_profiles_only(rows in response_rows(4, 30), rot in 1usize..4) {
        let master = master_from(&rows, 4);
        let rotated_rows: Vec<Vec<u8>> = rows
            .iter()
            .map(|r| (0..4).map(|l| r[(l + rot) % 4]).collect())
            .collect();
        let mut rotated = master_from(&rotated_rows, 4);
        rotated.labeler_ids = (0..4).map(|l| master.labeler_ids[(l + rot) % 4].clone()).collect();
        let a = run_em(&master, &quick_config()).unwrap();
        let b = run_em(&rotated, &quick_config()).unwrap();
        prop_assert_eq!(&a.strengths, &b.strengths);
        for l in 0..4 {
            prop_assert_eq!(&b.profiles[l], &a.profiles[(l + rot) % 4]);
        }
    }

    #[test]
    fn pixel_permutation_permutes_strengths(rows in response_rows(3, 30), seed in any::<u64>()) {
        let n = rows.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<Vec<u8>> = order.iter().map(|&i| rows[i].clone()).collect();
        let a = run_em(&master_from(&rows, 3), &quick_config()).unwrap();
        let b = run_em(&master_from(&permuted, 3), &quick_config()).unwrap();
        for (new_id, &old_id) in order.iter().enumerate() {
            prop_assert_eq!(b.strengths.get(new_id as u32), a.strengths.get(old_id as u32));
        }
    }

    #[test]
    fn em_is_deterministic(rows in response_rows(3, 25)) {
        let m = master_from(&rows, 3);
        let a = run_em(&m, &quick_config()).unwrap();
        let b = run_em(&m, &quick_config()).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #[test]
    fn dominating_evidence_is_never_weaker(
        raw in vec(vec(0.0f64..1.0, 41), 1..6),
        ya in vec(0u8..2, 6),
        flip in vec(any::<bool>(), 6),
    ) {
        let grid = StrengthGrid::new(41, 0.15, 1e-4).unwrap();
        let profiles: Vec<Vec<f64>> = raw
            .into_iter()
            .map(|mut p| {
                p.sort_by(f64::total_cmp);
                p.into_iter().map(|v| grid.clamp_prob(v)).collect()
            })
            .collect();
        let l = profiles.len();
        let a: Vec<u8> = ya[..l].to_vec();
        let b: Vec<u8> = a.iter().zip(&flip).map(|(&y, &f)| if f { 0 } else { y }).collect();
        prop_assume!(a != b);
        prop_assert!(update_strength(&a, &profiles, &grid) >= update_strength(&b, &profiles, &grid));
    }

    #[test]
    fn response_probabilities_sum_to_one(
        raw in vec(0.0f64..1.0, 41),
        x in 0.0f64..1.0,
    ) {
        let grid = StrengthGrid::new(41, 0.15, 1e-4).unwrap();
        let p1 = response_prob(true, &raw, x, &grid);
        let p0 = response_prob(false, &raw, x, &grid);
        prop_assert!((p1 + p0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn segments_partition_the_subset(
        pixels in btree_set((0u32..40, 0u32..40), 0..150),
        window in 3u32..20,
    ) {
        let rows: Vec<Vec<u8>> = pixels.iter().map(|_| vec![1]).collect();
        let mut master = master_from(&rows, 1);
        for (p, &(r, c)) in master.pixels.iter_mut().zip(&pixels) {
            p.row = r;
            p.col = c;
        }
        let subset: BTreeSet<u32> = master.pixels.iter().map(|p| p.pixel_id).filter(|i| i % 3 != 0).collect();
        let segs = extract_segments(&master, &subset, window).unwrap();
        let mut seen = BTreeSet::new();
        for s in &segs {
            for &id in &s.member_pixel_ids {
                prop_assert!(seen.insert(id), "pixel {} in two segments", id);
            }
            let rows = s.pixels.iter().map(|p| p.0);
            let cols = s.pixels.iter().map(|p| p.1);
            prop_assert!(rows.clone().max().unwrap() - rows.min().unwrap() < window);
            prop_assert!(cols.clone().max().unwrap() - cols.min().unwrap() < window);
        }
        prop_assert_eq!(&seen, &subset);
        prop_assert_eq!(extract_segments(&master, &subset, window).unwrap(), segs);
    }

    #[test]
    fn exact_merge_is_positional_union(
        maps in vec(btree_set((0u32..12, 0u32..12), 0..30), 1..5),
    ) {
        let labelers: Vec<LabelerMap> = maps
            .iter()
            .enumerate()
            .map(|(i, px)| LabelerMap::new(&format!("l{i}"), "img", 12, 12, px.iter().copied().collect()).unwrap())
            .collect();
        let master = merge_labelers(&labelers, 0.0).unwrap();
        let union: BTreeSet<_> = maps.iter().flatten().copied().collect();
        prop_assert_eq!(master.len(), union.len());
        for p in &master.pixels {
            for (l, m) in maps.iter().enumerate() {
                prop_assert_eq!(p.responses[l] == 1, m.contains(&p.position()));
            }
        }
    }

    #[test]
    fn subsets_shrink_as_tau_grows(
        xs in vec(0.0f64..1.0, 0..60),
        t1 in 0.0f64..1.2,
        t2 in 0.0f64..1.2,
    ) {
        let field = StrengthField(xs.iter().enumerate().map(|(i, &x)| (i as u32, x)).collect());
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let small: BTreeSet<_> = build_subset(&field, hi).pixel_ids.into_iter().collect();
        let big: BTreeSet<_> = build_subset(&field, lo).pixel_ids.into_iter().collect();
        prop_assert!(small.is_subset(&big));
        prop_assert_eq!(build_subset(&field, 0.0).utility, xs.len());
        prop_assert_eq!(build_subset(&field, 2.0).utility, 0);
    }

    #[test]
    fn utility_is_nonincreasing(
        xs in vec(0.0f64..1.0, 1..60),
        a in vec(0.0f64..1.0, 1..20),
        mut taus in vec(0.0f64..1.1, 1..6),
    ) {
        taus.sort_by(f64::total_cmp);
        let field = StrengthField(xs.iter().enumerate().map(|(i, &x)| (i as u32, x)).collect());
        let rows = risk_utility_curve(&field, &taus, &a).unwrap();
        prop_assert!(rows.windows(2).all(|w| w[1].utility <= w[0].utility));
    }

    #[test]
    fn complementarity_on_distinct_values(values in btree_set(0u32..10_000, 2..40), split in 1usize..39) {
        let v: Vec<f64> = values.iter().map(|&x| f64::from(x) / 10_000.0).collect();
        let k = split.min(v.len() - 1);
        let (s, a) = v.split_at(k);
        let r = true_strength_risk(s, a).unwrap() + true_strength_risk(a, s).unwrap();
        prop_assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raster_roundtrip(
        w in 1u32..12,
        h in 1u32..12,
        wide in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let maxval: u16 = if wide { 65535 } else { 255 };
        let samples: Vec<u16> = (0..w * h)
            .map(|i| ((seed.rotate_left(i % 64) ^ u64::from(i) * 2654435761) % (u64::from(maxval) + 1)) as u16)
            .collect();
        let raster = Raster { width: w, height: h, maxval, samples };
        let bytes = write_pgm(&raster);
        prop_assert_eq!(&parse_pgm(&bytes).unwrap(), &raster);
        let soft = load_soft_map(&bytes).unwrap();
        prop_assert_eq!(save_soft_map(&soft), bytes);
    }

    #[test]
    fn json_soft_map_roundtrip(values in vec(0.0f64..=1.0, 1..50)) {
        let map = SoftMap::Values { width: values.len() as u32, height: 1, values: values.clone() };
        let bytes = save_soft_map(&map);
        let back = load_soft_map(&bytes).unwrap();
        prop_assert_eq!(&back, &map);
        prop_assert_eq!(save_soft_map(&back), bytes);
    }

    #[test]
    fn threshold_has_requested_size(values in vec(0.0f64..=1.0, 1..80), k in 0usize..80) {
        let nonzero = values.iter().filter(|&&v| v > 0.0).count();
        let map = SoftMap::Values { width: values.len() as u32, height: 1, values };
        match threshold_matched(&map, k) {
            Ok(px) => {
                prop_assert!(k <= nonzero);
                prop_assert_eq!(px.len(), k);
            }
            Err(_) => prop_assert!(k > nonzero),
        }
    }
}

fn seg(image: &str, strength: f64, source: Source) -> BoundarySegment {
    BoundarySegment {
        segment_id: format!("{image}:{source:?}"),
        image_id: image.into(),
        member_pixel_ids: vec![0],
        pixels: vec![(1, 1)],
        window_center: (2, 2),
        window_size: 5,
        source,
        strength: Some(strength),
    }
}

fn trial_fixture(n: usize, seed: u64) -> Vec<TrialRecord> {
    let human: Vec<_> = (0..n).map(|i| seg(&format!("i{i}"), 0.1 * i as f64, Source::Human)).collect();
    let algo: Vec<_> = (0..n).map(|i| seg(&format!("i{i}"), 0.05 * i as f64, Source::Algorithm)).collect();
    sample_trial_pairs(
        &SegmentCollection::new(SetTag::S1, None, human).unwrap(),
        &SegmentCollection::new(SetTag::AMinusS, None, algo).unwrap(),
        n,
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn risk_ignores_record_order(
        choices in vec(vec(any::<bool>(), 6), 1..5),
        rot_t in 0usize..6,
        rot_r in 0usize..30,
        mean in any::<bool>(),
    ) {
        let trials = trial_fixture(6, 3);
        let mut responses = Vec::new();
        for (s, row) in choices.iter().enumerate() {
            for (t, &left) in trials.iter().zip(row) {
                responses.push(ResponseRecord {
                    trial_id: t.trial_id.clone(),
                    subject_id: format!("s{s}"),
                    choice: if left { Choice::LeftStronger } else { Choice::RightStronger },
                    rt_ms: 1,
                    ts: 0,
                });
            }
        }
        let pooling = if mean { Pooling::PerSubjectMean } else { Pooling::ModeVote };
        let base = estimate_risk(&trials, &responses, pooling);
        let mut t2 = trials.clone();
        t2.rotate_left(rot_t);
        let mut r2 = responses.clone();
        let k = rot_r % r2.len();
        r2.rotate_left(k);
        r2.reverse();
        let other = estimate_risk(&t2, &r2, pooling);
        match (base, other) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn unanimous_panels_pool_to_the_single_subject_risk(row in vec(any::<bool>(), 6), subjects in 1usize..6) {
        let trials = trial_fixture(6, 11);
        let responses: Vec<ResponseRecord> = (0..subjects)
            .flat_map(|s| {
                trials.iter().zip(&row).map(move |(t, &left)| ResponseRecord {
                    trial_id: t.trial_id.clone(),
                    subject_id: format!("s{s}"),
                    choice: if left { Choice::LeftStronger } else { Choice::RightStronger },
                    rt_ms: 1,
                    ts: 0,
                })
            })
            .collect();
        let report = estimate_risk(&trials, &responses, Pooling::ModeVote).unwrap();
        prop_assert_eq!(report.excluded_trials, 0);
        prop_assert!(report.per_subject.values().all(|r| r.risk == report.pooled.risk));
    }

    #[test]
    fn trial_sampling_is_pure(n in 1usize..8, seed in any::<u64>()) {
        prop_assert_eq!(trial_fixture(8, seed)[..].len(), 8);
        let a = trial_fixture(n, seed);
        prop_assert_eq!(a, trial_fixture(n, seed));
    }
}
