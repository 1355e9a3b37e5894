//! Reusable correctness checks. Each returns `Ok(summary)` or
//! `Err(first failure)` so that integration tests can assert on them and the
//! acceptance run can print them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use looc_core::curriculum::{run_curriculum, CurriculumConfig, CurriculumMethod, RunOptions};
use looc_core::dataset::Point;
use looc_core::eval::{game, game_image, mae};
use looc_core::experiment::{generate_splits, ExperimentConfig};
use looc_core::grid::Grid;
use looc_core::localizer::{extract_blobs, lcfcn_loss, lcfcn_loss_and_grad, Cpm, RegionLabel};
use looc_core::proposals::{iou, nms_indices};
use looc_core::pseudolabel::{select_pseudo_labels, selection_size, ScoreSource, ScoredProposalSet};
use looc_core::ExecMode;

use super::*;

pub type Check = std::result::Result<String, String>;

/// Analytic logit gradient against central differences of the loss, in f64.
pub fn loss_gradient_matches_finite_differences(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut with_split = 0;
    for i in 0..instances {
        let z = random_logits(&mut rng, h * w);
        let (points, part) = random_labels(&mut rng, h, w, 5);
        let logits = Grid::from_vec(h, w, z.clone());
        let (loss, grad) = lcfcn_loss_and_grad(&logits, &points, &part).map_err(|e| e.to_string())?;
        if loss.split > 0.0 {
            with_split += 1;
        }
        for p in 0..h * w {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus[p] += eps;
            minus[p] -= eps;
            let lp = lcfcn_loss(&Grid::from_vec(h, w, plus), &points, &part).unwrap().total();
            let lm = lcfcn_loss(&Grid::from_vec(h, w, minus), &points, &part).unwrap().total();
            let fd = (lp - lm) / (2.0 * eps);
            let an = grad.as_slice()[p];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if an == 0.0 && fd.abs() < 1e-9 {
                continue;
            }
            worst = worst.max(rel);
            if rel >= 1e-4 {
                return Err(format!("instance {i} pixel {p}: analytic {an}, numeric {fd}, rel {rel:.2e}"));
            }
        }
    }
    Ok(format!("max relative error {worst:.2e} over {instances} instances ({with_split} with a split term)"))
}

/// The gradient vanishes exactly on every unlabeled pixel.
pub fn unlabeled_gradient_is_zero(partitions: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    for i in 0..partitions {
        let (h, w) = (rng.gen_range(4..16), rng.gen_range(4..16));
        let z: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let (points, part) = random_labels(&mut rng, h, w, 6);
        let (_, grad) =
            lcfcn_loss_and_grad(&Grid::from_vec(h, w, z), &points, &part).map_err(|e| e.to_string())?;
        for (p, (&g, &l)) in grad.as_slice().iter().zip(part.mask.as_slice()).enumerate() {
            if l == RegionLabel::Unlabeled {
                checked += 1;
                if g != 0.0 {
                    return Err(format!("partition {i} pixel {p}: gradient {g}"));
                }
            }
        }
    }
    Ok(format!("{checked} unlabeled pixels over {partitions} partitions"))
}

/// Library NMS against the quadratic reference, including tie-breaking.
pub fn nms_matches_reference(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let n = rng.gen_range(0..40);
        let set = random_proposals(&mut rng, n, 32, 32);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let thr = rng.gen_range(1..=20) as f64 / 20.0;
        let got = nms_indices(&set, &scores, thr).map_err(|e| e.to_string())?;
        let want = nms_oracle(&set, &scores, thr);
        if got != want {
            return Err(format!("trial {t}: got {got:?}, reference {want:?}"));
        }
        for (a, &i) in got.iter().enumerate() {
            for &j in &got[a + 1..] {
                if iou(&set.proposals[i].region, &set.proposals[j].region) > thr {
                    return Err(format!("trial {t}: kept {i} and {j} overlap above {thr}"));
                }
            }
        }
    }
    Ok(format!("{trials} instances identical"))
}

/// Top-k selection against an exhaustive search over subsets of the NMS
/// survivors for the maximum total score.
pub fn topk_matches_exhaustive(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..trials {
        let n = rng.gen_range(1..10);
        let set = random_proposals(&mut rng, n, 24, 24);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let count = rng.gen_range(0..8);
        let r = rng.gen_range(1..=10) as f64 / 10.0;
        let thr = rng.gen_range(1..=10) as f64 / 10.0;
        let scored = ScoredProposalSet {
            base: set.clone(),
            scores: scores.clone(),
            score_source: ScoreSource::CpmMean,
        };
        let sel = select_pseudo_labels(&scored, "t", count, r, thr).map_err(|e| e.to_string())?;
        let survivors = nms_oracle(&set, &scores, thr);
        let k = if count == 0 { 0 } else { ((r * count as f64 + 1e-9).floor() as usize).max(1) };
        let size = k.min(survivors.len());
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << survivors.len()) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let subset: Vec<usize> = (0..survivors.len()).filter(|b| mask & (1 << b) != 0).map(|b| survivors[b]).collect();
            let total: f64 = subset.iter().map(|&i| scores[i]).sum();
            if best.as_ref().map_or(true, |(s, _)| total > *s) {
                best = Some((total, subset));
            }
        }
        let mut want: Vec<usize> = best.map(|(_, s)| s).unwrap_or_default().iter().map(|&i| set.proposals[i].proposal_id).collect();
        let mut got: Vec<usize> = sel.selected.proposals.iter().map(|p| p.proposal_id).collect();
        want.sort_unstable();
        got.sort_unstable();
        if got != want {
            return Err(format!("trial {t}: selected {got:?}, exhaustive {want:?}"));
        }
        if sel.points.points.len() > count {
            return Err(format!("trial {t}: {} points for count {count}", sel.points.points.len()));
        }
        for (p, b) in sel.points.points.iter().zip(&sel.selected.proposals) {
            let (cr, cc) = ((b.region.row0 + b.region.row1) as f64 / 2.0, (b.region.col0 + b.region.col1) as f64 / 2.0);
            if (p.row - cr).abs() > 1e-12 || (p.col - cc).abs() > 1e-12 {
                return Err(format!("trial {t}: point is not the box centre"));
            }
        }
        if selection_size(count, r) != k {
            return Err(format!("trial {t}: selection size {} vs {k}", selection_size(count, r)));
        }
    }
    Ok(format!("{trials} instances identical"))
}

/// Blob extraction against a stack-based flood fill.
pub fn blobs_match_flood_fill(maps: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..maps {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let grid = random_cpm_grid(&mut rng, h, w);
        let thr = 0.5f32;
        let on: Vec<bool> = grid.as_slice().iter().map(|&v| v >= thr).collect();
        let want = flood_fill_oracle(h, w, &on);
        let cpm = Cpm::new(grid).map_err(|e| e.to_string())?;
        let blobs = extract_blobs(&cpm, thr);
        let mut got: Vec<(Vec<usize>, Point)> = blobs
            .into_iter()
            .map(|b| {
                let mut px = b.pixels;
                px.sort_unstable();
                (px, b.center)
            })
            .collect();
        got.sort_by(|a, b| a.0[0].cmp(&b.0[0]));
        if got.len() != want.len() || got.iter().zip(&want).any(|(g, w)| &g.0 != w) {
            return Err(format!("map {t}: {} blobs, reference {}", got.len(), want.len()));
        }
        for (g, px) in got.iter().zip(&want) {
            let n = px.len() as f64;
            let r = px.iter().map(|&p| (p / w) as f64 + 0.5).sum::<f64>() / n;
            let c = px.iter().map(|&p| (p % w) as f64 + 0.5).sum::<f64>() / n;
            if (g.1.row - r).abs() > 1e-9 || (g.1.col - c).abs() > 1e-9 {
                return Err(format!("map {t}: centroid mismatch"));
            }
        }
    }
    Ok(format!("{maps} maps identical"))
}

/// GAME against the cell-bounds reference, GAME(0) against MAE, and
/// monotonicity in the level.
pub fn game_properties(sets: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut shapes = Vec::new();
    for t in 0..sets {
        let h = [16usize, 32, 64][rng.gen_range(0..3)];
        let w = [16usize, 32, 64][rng.gen_range(0..3)];
        let (np, ng) = (rng.gen_range(0..15), rng.gen_range(0..15));
        let pred = random_points(&mut rng, np, h, w);
        let gt = random_points(&mut rng, ng, h, w);
        let mut prev = -1.0;
        for level in 0..=4 {
            let g = game_image(&pred, &gt, (h, w), level);
            let o = game_image_oracle(&pred, &gt, h, w, level);
            if (g - o).abs() > 1e-12 {
                return Err(format!("set {t} level {level}: {g} vs reference {o}"));
            }
            if g < prev {
                return Err(format!("set {t}: GAME({level}) = {g} < GAME({}) = {prev}", level - 1));
            }
            prev = g;
        }
        preds.push(pred);
        gts.push(gt);
        shapes.push((h, w));
    }
    let pc: Vec<f64> = preds.iter().map(|p| p.len() as f64).collect();
    let gc: Vec<usize> = gts.iter().map(|g| g.len()).collect();
    let m = mae(&pc, &gc).map_err(|e| e.to_string())?;
    let g0 = game(&preds, &gts, &shapes, 0).map_err(|e| e.to_string())?;
    let oracle = mae_oracle(&pc, &gc);
    if (g0 - m).abs() > 1e-9 || (m - oracle).abs() > 1e-9 {
        return Err(format!("GAME(0) {g0}, MAE {m}, reference MAE {oracle}"));
    }
    Ok(format!("{sets} point sets; GAME(0) = MAE = {m:.4}"))
}

/// Schedule length for r0 = delta = 0.1 and count bounds of every round of a
/// small real run.
pub fn schedule_and_counts(config: &ExperimentConfig, seed: u64) -> Check {
    let cc = CurriculumConfig {
        r0: 0.1,
        delta: 0.1,
        ..config.curriculum.clone()
    };
    let schedule = cc.schedule();
    let expected: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    if schedule.len() != 10 || schedule.iter().zip(&expected).any(|(a, b)| (a - b).abs() > 1e-9) {
        return Err(format!("schedule {schedule:?}"));
    }
    let (train, _) = generate_splits(config, seed, ExecMode::Sequential).map_err(|e| e.to_string())?;
    let counts = train.counts_only();
    for method in [CurriculumMethod::Looc, CurriculumMethod::TopK] {
        let out = run_curriculum(
            method,
            &counts,
            &config.proposals,
            &config.localizer.localizer(),
            &cc,
            seed,
            ExecMode::Sequential,
            &RunOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let st = &out.state;
        if st.history.len() != 10 || st.final_pass.is_none() || !st.finished {
            return Err(format!("{}: {} rounds, final pass {}", method.as_str(), st.history.len(), st.final_pass.is_some()));
        }
        let fin = st.final_pass.as_ref().unwrap();
        for round in st.history.iter().chain(std::iter::once(fin)) {
            for (i, (&p, img)) in round.produced.iter().zip(&counts.scenes).enumerate() {
                if p > img.count || p > round.targets[i] {
                    return Err(format!("{} round {}: image {i} got {p} points, count {}", method.as_str(), round.round, img.count));
                }
            }
        }
        for (rec, img) in out.final_labels.iter().zip(&counts.scenes) {
            if rec.points.len() > img.count {
                return Err(format!("final labels of {} exceed its count", img.scene_id));
            }
        }
    }
    Ok("10 rounds plus the final pass; pseudo-label counts within c_i".into())
}

fn copy_dir(from: &std::path::Path, to: &std::path::Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), &target).unwrap();
        }
    }
}

/// Rewrites every manifest record with `edit`.
pub fn edit_manifest(dir: &std::path::Path, edit: impl Fn(&mut serde_json::Map<String, serde_json::Value>)) {
    let path = dir.join(looc_core::dataset::MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let mut v: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line).unwrap();
        edit(&mut v);
        out.push_str(&serde_json::Value::Object(v).to_string());
        out.push('\n');
    }
    std::fs::write(&path, out).unwrap();
}

/// The weak trainers only accept a view without points, and their output
/// does not change when the points are removed from, or garbled in, the
/// files on disk. The point-supervised reference cannot train without them.
pub fn supervision_hygiene(config: &ExperimentConfig, seed: u64) -> Check {
    use looc_core::dataset::{write_dataset, CountedImage, CountsOnlySplit};
    use looc_core::experiment::{train_from_dir, Method, TrainedModel};

    // Compiles only while a counted image has exactly these fields.
    fn fields(c: &CountedImage) -> usize {
        let CountedImage { scene_id: _, image: _, count } = c;
        *count
    }
    let _: fn(&CountsOnlySplit) -> usize = |s| s.scenes.iter().map(fields).sum();

    let (train, _) = generate_splits(config, seed, ExecMode::Sequential).map_err(|e| e.to_string())?;
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = root.path().join("full");
    let stripped = root.path().join("stripped");
    let garbled = root.path().join("garbled");
    write_dataset(&train, &full).map_err(|e| e.to_string())?;
    copy_dir(&full, &stripped);
    copy_dir(&full, &garbled);
    edit_manifest(&stripped, |v| {
        v.remove("points");
    });
    edit_manifest(&garbled, |v| {
        v.insert("points".into(), serde_json::json!("withheld"));
    });

    let opts = RunOptions::default();
    let mode = ExecMode::Sequential;
    for method in [Method::Looc, Method::TopK, Method::Glance] {
        let outputs: Vec<_> = [&full, &stripped, &garbled]
            .iter()
            .map(|d| train_from_dir(method, config, d, seed, mode, &opts))
            .collect::<looc_core::Result<_>>()
            .map_err(|e| format!("{method} failed without points: {e}"))?;
        let params = |m: &TrainedModel| match m {
            TrainedModel::Localizer(l) => l.params.clone(),
            TrainedModel::Glance(g) => g.params.clone(),
        };
        let reference = &outputs[0];
        for other in &outputs[1..] {
            if params(&other.model) != params(&reference.model) || other.pseudolabels != reference.pseudolabels {
                return Err(format!("{method} output depends on the point annotations"));
            }
        }
    }
    for dir in [&stripped, &garbled] {
        if train_from_dir(Method::LcfcnSupervised, config, dir, seed, mode, &opts).is_ok() {
            return Err("point-supervised training ran without points".into());
        }
    }
    Ok("counts-only view enforced; weak methods unaffected by point files".into())
}

/// Trains every method twice in sequential mode and compares the bytes of
/// the two metrics files.
pub fn metrics_are_reproducible(config: &ExperimentConfig, seed: u64) -> Check {
    use looc_core::eval::{write_metrics_csv, MetricsRow};
    use looc_core::experiment::{evaluate, train_count_supervised, train_point_supervised, Method};

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mode = ExecMode::Sequential;
    let mut files = Vec::new();
    for run in 0..2 {
        let (train, test) = generate_splits(config, seed, mode).map_err(|e| e.to_string())?;
        let mut rows = Vec::new();
        for method in Method::ALL {
            let outcome = if method.is_count_supervised() {
                train_count_supervised(method, config, &train.counts_only(), seed, mode, &RunOptions::default())
            } else {
                train_point_supervised(config, &train, seed, mode)
            }
            .map_err(|e| e.to_string())?;
            rows.push(MetricsRow::from(&evaluate(&outcome, config, &test, mode).map_err(|e| e.to_string())?));
        }
        let path = dir.path().join(format!("metrics_{run}.csv"));
        write_metrics_csv(&path, &rows).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    if files[0] != files[1] {
        return Err("metrics.csv differs between identical runs".into());
    }
    Ok(format!("{} identical bytes", files[0].len()))
}
