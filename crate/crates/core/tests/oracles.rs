mod common;

use common::checks;
use common::*;
use looc_core::localizer::RegionLabel;
use looc_core::proposals::{iou, nms, BoxRegion, Proposal, ProposalSet};
use looc_core::pseudolabel::{build_partition, select_pseudo_labels, ScoreSource, ScoredProposalSet};
use proptest::prelude::*;

#[test]
fn nms_equals_quadratic_reference() {
    checks::nms_matches_reference(1000, 1).unwrap();
}

#[test]
fn topk_equals_exhaustive_reference() {
    checks::topk_matches_exhaustive(1000, 2).unwrap();
}

#[test]
fn blobs_equal_flood_fill() {
    checks::blobs_match_flood_fill(200, 3).unwrap();
}

#[test]
fn game_matches_reference_and_is_monotone() {
    checks::game_properties(500, 4).unwrap();
}

#[test]
fn nms_worked_example() {
    let boxes = [(0, 0, 10, 10, 0.9), (1, 1, 11, 11, 0.8), (20, 20, 30, 30, 0.7)];
    let set = ProposalSet::new(
        boxes
            .iter()
            .enumerate()
            .map(|(i, &(r0, c0, r1, c1, _))| Proposal {
                proposal_id: i,
                region: BoxRegion::new(r0, c0, r1, c1).unwrap(),
                objectness: 0.5,
            })
            .collect(),
        (32, 32),
        "t",
    )
    .unwrap();
    let scores: Vec<f64> = boxes.iter().map(|b| b.4).collect();
    // 81 / (100 + 100 - 81)
    let overlap = iou_oracle(&set.proposals[0].region, &set.proposals[1].region);
    assert!((overlap - 81.0 / 119.0).abs() < 1e-12);
    let kept: Vec<usize> = nms(&set, &scores, 0.5).unwrap().proposals.iter().map(|p| p.proposal_id).collect();
    assert_eq!(kept, vec![0, 2]);
}

fn arb_box() -> impl Strategy<Value = BoxRegion> {
    (0usize..30, 0usize..30, 1usize..15, 1usize..15).prop_map(|(r, c, h, w)| BoxRegion::new(r, c, r + h, c + w).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_bounded_and_reflexive(a in arb_box(), b in arb_box()) {
        let x = iou(&a, &b);
        prop_assert!((x - iou(&b, &a)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
        prop_assert!((x - iou_oracle(&a, &b)).abs() < 1e-12);
        if x == 0.0 {
            prop_assert_eq!(a.intersection_area(&b), 0);
        }
    }

    #[test]
    fn partition_matches_rasterizer(boxes in proptest::collection::vec(arb_box(), 0..8), mask in 0u8..=255) {
        let (h, w) = (48, 48);
        let ps: Vec<Proposal> = boxes.iter().enumerate().map(|(i, &region)| Proposal { proposal_id: i, region, objectness: 0.5 }).collect();
        let all = ProposalSet::new(ps, (h, w), "t").unwrap();
        let chosen: Vec<usize> = (0..all.len()).filter(|i| mask & (1 << i) != 0).collect();
        let selected = all.subset(&chosen);
        let part = build_partition((h, w), &all, &selected).unwrap();
        let mut counts = [0usize; 3];
        for r in 0..h {
            for c in 0..w {
                let in_sel = selected.proposals.iter().any(|p| p.region.contains_pixel(r, c));
                let in_any = all.proposals.iter().any(|p| p.region.contains_pixel(r, c));
                let want = if in_sel { RegionLabel::Foreground } else if in_any { RegionLabel::Unlabeled } else { RegionLabel::Background };
                prop_assert_eq!(*part.mask.get(r, c), want);
                counts[want as usize] += 1;
            }
        }
        prop_assert_eq!(counts.iter().sum::<usize>(), h * w);
    }

    #[test]
    fn larger_ratio_never_drops_a_selection(seed in 0u64..10_000, count in 1usize..10) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..30);
        let set = random_proposals(&mut rng, n, 32, 32);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 5.0).collect();
        let scored = ScoredProposalSet { base: set, scores, score_source: ScoreSource::CpmMean };
        let mut prev: Vec<usize> = Vec::new();
        for step in 1..=10 {
            let sel = select_pseudo_labels(&scored, "p", count, step as f64 / 10.0, 0.5).unwrap();
            let ids: Vec<usize> = sel.selected.proposals.iter().map(|p| p.proposal_id).collect();
            prop_assert!(prev.iter().all(|i| ids.contains(i)));
            prop_assert!(ids.len() <= count);
            prev = ids;
        }
    }
}
