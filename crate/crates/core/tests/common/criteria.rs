//! Checks behind the contract-style acceptance criteria. Each returns a short
//! summary on success and the first violation otherwise.

use std::collections::BTreeMap;

use inpaint_core::augment::{apply_plan, AugmentPlan};
use inpaint_core::corpus::{parse_level, CorpusSplit, TileAlphabet, TileGrid};
use inpaint_core::dataset::{build_dataset, DatasetConfig, Fragment, MaskRect};
use inpaint_core::eval::{score, InstanceRecord, MetricsReport, StructureSet};
use inpaint_core::models::Inpainter;
use rand::Rng;

use super::{count_metrics, rng};

/// Windows cut from a level `width` wide at stride 16: the strided ones plus
/// one flush with the right edge when they fall short.
pub fn expected_windows(width: usize) -> usize {
    let full = (width - 16) / 16 + 1;
    if (width - 16) % 16 == 0 {
        full
    } else {
        full + 1
    }
}

pub fn dataset_contract(split: &CorpusSplit, alphabet: &TileAlphabet) -> Result<String, String> {
    let ds = build_dataset::<f64>(split, alphabet, &DatasetConfig::default()).map_err(|e| e.to_string())?;
    let mut per_window: BTreeMap<(String, usize), usize> = BTreeMap::new();
    let all = ds.train.iter().chain(&ds.test);
    let mut n = 0;
    for s in all {
        n += 1;
        *per_window
            .entry((s.provenance.level_id.clone(), s.provenance.window_col))
            .or_default() += 1;
        let d = s.input.depth;
        let mut zeroed = 0;
        for r in 0..16 {
            for c in 0..16 {
                let x = &s.input.values[(r * 16 + c) * d..(r * 16 + c + 1) * d];
                let y = &s.target.values[(r * 16 + c) * d..(r * 16 + c + 1) * d];
                if x.iter().all(|&v| v == 0.0) {
                    zeroed += 1;
                }
                let inside = r >= s.mask.row && r < s.mask.row + s.mask.height && c >= s.mask.col && c < s.mask.col + s.mask.width;
                if !inside && x != y {
                    return Err(format!("{:?}: input differs from target at ({r},{c})", s.provenance));
                }
            }
        }
        if zeroed != 20 {
            return Err(format!("{:?}: {zeroed} zeroed cells", s.provenance));
        }
    }
    if let Some((k, v)) = per_window.iter().find(|(_, &v)| v != 11) {
        return Err(format!("window {k:?} yields {v} samples"));
    }
    let windows: usize = split.levels().map(|(l, _)| expected_windows(l.grid.width())).sum();
    if windows != per_window.len() {
        return Err(format!("{} windows, expected {windows}", per_window.len()));
    }
    Ok(format!("{} windows, {n} samples", per_window.len()))
}

fn random_fragment_pair(rng: &mut impl Rng, alphabet: &TileAlphabet) -> (Fragment, Fragment) {
    let h = rng.gen_range(1..=16);
    let w = rng.gen_range(1..=16);
    let mask = MaskRect::new(rng.gen_range(0..=16 - h), rng.gen_range(0..=16 - w), h, w);
    let symbols: Vec<char> = alphabet.entries().iter().map(|e| e.symbol).collect();
    let sky = alphabet.sky_symbol();
    // Sky-heavy cells make the undefined cases common.
    let sky_bias: f64 = rng.gen();
    let draw = |rng: &mut dyn rand::RngCore| {
        if rng.gen_bool(sky_bias) {
            sky
        } else {
            symbols[rng.gen_range(0..symbols.len())]
        }
    };
    let truth = Fragment {
        mask,
        cells: (0..mask.area()).map(|_| draw(rng)).collect(),
    };
    let agree: f64 = rng.gen();
    let pred = Fragment {
        mask,
        cells: truth
            .cells
            .iter()
            .map(|&t| if rng.gen_bool(agree) { t } else { draw(rng) })
            .collect(),
    };
    (pred, truth)
}

pub fn metric_oracle(cases: usize, seed: u64) -> Result<String, String> {
    let alphabet = TileAlphabet::smb();
    let set = StructureSet::for_alphabet(&alphabet);
    let mut rng = rng(seed);
    let (mut ns, mut st) = (0, 0);
    for i in 0..cases {
        let (pred, truth) = random_fragment_pair(&mut rng, &alphabet);
        let got = score(&pred, &truth, alphabet.sky_symbol(), &set).map_err(|e| e.to_string())?;
        let want = count_metrics(&pred, &truth, alphabet.sky_symbol(), &set);
        if (got.tile_by_tile, got.no_sky, got.structures) != want {
            return Err(format!("case {i}: library {got:?}, oracle {want:?}"));
        }
        ns += want.1.is_some() as usize;
        st += want.2.is_some() as usize;
    }
    Ok(format!("{cases} fragments, {ns} with NoSky defined, {st} with Structures defined"))
}

/// Recomputes every report cell from the instance log with plain loops.
pub fn flat_recompute(report: &MetricsReport, instances: &[InstanceRecord]) -> Result<(), String> {
    let runs = report.config.runs;
    for row in &report.rows {
        let level_mean = |level: &str, run: usize| -> Option<f64> {
            let vals: Vec<f64> = instances
                .iter()
                .filter(|r| r.model == row.model && r.level_id == level && r.run == run)
                .filter_map(|r| r.scores.get(row.metric))
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * a.abs().max(1.0),
            (None, None) => true,
            _ => false,
        };
        let stats = |v: &[f64]| -> (Option<f64>, Option<f64>) {
            if v.is_empty() {
                return (None, None);
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let sd = if v.len() == 1 {
                0.0
            } else {
                (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
            };
            (Some(m), Some(sd))
        };
        let mut per_run_avg = Vec::new();
        for r in 0..runs {
            let defined: Vec<f64> = report.levels.iter().filter_map(|l| level_mean(&l.id, r)).collect();
            if !defined.is_empty() {
                per_run_avg.push(defined.iter().sum::<f64>() / defined.len() as f64);
            }
        }
        let (m, sd) = stats(&per_run_avg);
        if !close(m, row.average.mean) || !close(sd, row.average.std) {
            return Err(format!("{} average: {:?} vs {:?}", row.label(), (m, sd), row.average));
        }
        for (l, summary) in report.levels.iter().zip(&row.levels) {
            let vals: Vec<f64> = (0..runs).filter_map(|r| level_mean(&l.id, r)).collect();
            let (m, sd) = stats(&vals);
            if !close(m, summary.mean) || !close(sd, summary.std) {
                return Err(format!("{} {}: {:?} vs {summary:?}", row.label(), l.id, (m, sd)));
            }
        }
    }
    Ok(())
}

fn random_plan(rng: &mut impl Rng, level_id: &str, width: usize, model_id: &str) -> AugmentPlan {
    let masks = (0..rng.gen_range(1..=4))
        .map(|_| {
            let h = rng.gen_range(1..=16);
            let w = rng.gen_range(1..=16);
            MaskRect::new(rng.gen_range(0..=16 - h), rng.gen_range(0..=width - w), h, w)
        })
        .collect();
    AugmentPlan {
        level_id: level_id.to_owned(),
        masks,
        model_id: model_id.to_owned(),
        seed: rng.gen(),
    }
}

fn check_augmented(level: &TileGrid, out: &TileGrid, plan: &AugmentPlan, alphabet: &TileAlphabet) -> Result<(), String> {
    if (out.height(), out.width()) != (level.height(), level.width()) {
        return Err(format!("{}: output is {}x{}", plan.level_id, out.height(), out.width()));
    }
    for r in 0..level.height() {
        for c in 0..level.width() {
            let masked = plan.masks.iter().any(|m| m.contains(r, c));
            if !masked && out.get(r, c) != level.get(r, c) {
                return Err(format!("{}: cell ({r},{c}) outside every mask changed", plan.level_id));
            }
        }
    }
    let reparsed = parse_level(&out.to_text(), alphabet).map_err(|e| format!("{}: {e}", plan.level_id))?;
    if &reparsed != out {
        return Err(format!("{}: re-parsed grid differs", plan.level_id));
    }
    Ok(())
}

pub fn augmentation_safety<T: inpaint_core::Scalar>(
    split: &CorpusSplit,
    alphabet: &TileAlphabet,
    model: &dyn Inpainter<T>,
    plans: usize,
    seed: u64,
) -> Result<String, String> {
    let mut rng = rng(seed);
    let mut changed = 0usize;
    for _ in 0..plans {
        let level = &split.test[rng.gen_range(0..split.test.len())];
        let plan = random_plan(&mut rng, &level.id, level.grid.width(), model.id());
        let out = apply_plan(&level.grid, alphabet, &plan, model).map_err(|e| e.to_string())?;
        check_augmented(&level.grid, &out, &plan, alphabet)?;
        let again = apply_plan(&level.grid, alphabet, &plan, model).map_err(|e| e.to_string())?;
        if again != out {
            return Err(format!("{}: replaying the plan gave a different level", plan.level_id));
        }
        changed += (0..out.height())
            .flat_map(|r| (0..out.width()).map(move |c| (r, c)))
            .filter(|&(r, c)| out.get(r, c) != level.grid.get(r, c))
            .count();
    }
    Ok(format!("{plans} plans, {changed} mask cells changed"))
}
