//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use fragdiff_core::align::rank1_matches;
use fragdiff_core::diffusion::{
    diffuse, random_walk, random_walk_traced, solve_full, DiffusionConfig, InitialState, Solver,
};
use fragdiff_core::features::{synth_two_domain, synth_two_moons, SynthParams, SynthSet};
use fragdiff_core::graph::{self, build_mutual_knn, CosineSpace, Partition, DEFAULT_K};
use fragdiff_core::metrics::{self, DEFAULT_GAMMA1, DEFAULT_GAMMA2};
use fragdiff_core::patch::{patchify, slide_windows, stitch_counts, PadPolicy, TilingLayout};
use fragdiff_core::pipeline::{self, run_pipeline, RunConfig};
use fragdiff_core::pseudolabel::{fuse, normalize_label, LABEL_FLOOR, LABEL_PEAK};
use fragdiff_core::scenario::{write_scenario, ScenarioParams, StubMode, StubTrainer};
use fragdiff_core::{Domain, FeatureSet, Raster, RasterKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Random test graphs: 50 sizes in [20, 200], each paired with one random state.
fn test_graphs() -> Vec<(graph::NormalizedGraph, InitialState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..50)
        .map(|i| {
            let n = rng.random_range(20..=200);
            let d = rng.random_range(3..=12);
            let k = rng.random_range(3..=15);
            let set = random_set(1000 + i, n, d);
            let s = graph::normalize(&build_mutual_knn(&set, k, 3.0).unwrap());
            let mut f0: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.1) { rng.random() } else { 0.0 }).collect();
            f0[rng.random_range(0..n)] = 1.0;
            (s, InitialState::new(f0).unwrap())
        })
        .collect()
}

const ALPHAS: [f64; 3] = [0.5, 0.9, 0.99];

fn solver_equivalence() -> Check {
    let start = Instant::now();
    let (mut walk_err, mut cg_err) = (0.0f64, 0.0f64);
    for (s, f0) in test_graphs() {
        let all: Vec<usize> = (0..s.node_count()).collect();
        for alpha in ALPHAS {
            let oracle = dense_fixed_point(&s.matrix, f0.values(), alpha);
            let walk = random_walk(&s, &f0, &all, alpha, 1e-12, 100_000).map_err(|e| e.to_string())?;
            if !walk.converged {
                return Err(format!("walk did not converge at alpha {alpha}"));
            }
            walk_err = walk_err.max(max_abs_diff(&walk.scores, &oracle));
            let cg = solve_full(&s, &f0, &all, alpha, 1e-10, 1000).map_err(|e| e.to_string())?;
            cg_err = cg_err.max(rel_err(&cg.scores, &oracle));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(
        walk_err <= 1e-8 && cg_err <= 1e-6 && secs < 10.0,
        format!("walk max |err| {walk_err:.2e} (<= 1e-8), cg rel err {cg_err:.2e} (<= 1e-6), {secs:.2} s (< 10 s)"),
    )
}

fn convergence_rate() -> Check {
    let mut worst = f64::NEG_INFINITY;
    let mut worst_alpha = 0.0;
    for (s, f0) in test_graphs() {
        for alpha in ALPHAS {
            let trace = random_walk_traced(&s, &f0, &[], alpha, 1e-8, 100_000).map_err(|e| e.to_string())?;
            for w in trace.step_norms.windows(2) {
                if w[0] > 0.0 && w[1] / w[0] - alpha > worst {
                    worst = w[1] / w[0] - alpha;
                    worst_alpha = alpha;
                }
            }
        }
    }
    ensure(
        worst <= 1e-6,
        format!("max (step ratio - alpha) = {worst:.2e} at alpha {worst_alpha} (<= 1e-6)"),
    )
}

fn rank1_of(set: &FeatureSet, k: usize, config: &DiffusionConfig) -> Vec<(fragdiff_core::FragmentId, fragdiff_core::FragmentId)> {
    let g = build_mutual_knn(set, k, 3.0).unwrap();
    let p = Partition::by_domain(&g.domains, Domain::Target);
    let run = diffuse(set, &g, &p, config).unwrap();
    let mut pairs: Vec<_> = rank1_matches(&run.table)
        .unwrap()
        .pairs
        .iter()
        .map(|m| (m.target_id, m.source_id))
        .collect();
    pairs.sort();
    pairs
}

fn truncation_fidelity() -> Check {
    let synth = synth_two_domain(&SynthParams {
        n_source: 200,
        m_target: 200,
        d: 16,
        clusters: 5,
        domain_shift: 0.2,
        noise: 0.05,
        seed: 7,
    })
    .map_err(|e| e.to_string())?;
    // T = 5k must cover a cluster (80 nodes) for the local solves to see the query's state
    let k = DEFAULT_K;
    let full = rank1_of(&synth.set, k, &DiffusionConfig::default());
    let trunc = rank1_of(
        &synth.set,
        k,
        &DiffusionConfig {
            solver: Solver::Truncated,
            truncation: Some(5 * k),
            ..DiffusionConfig::default()
        },
    );
    let agree = full.iter().filter(|p| trunc.binary_search(p).is_ok()).count();
    let rate = agree as f64 / 200.0;
    ensure(
        rate >= 0.95,
        format!("{agree}/200 rank-1 agree at k = {k}, T = {} ({:.1}% >= 95%)", 5 * k, 100.0 * rate),
    )
}

fn moon_accuracy(synth: &SynthSet, pairs: &[(fragdiff_core::FragmentId, fragdiff_core::FragmentId)]) -> usize {
    let label = |d, id| synth.labels[synth.set.position(d, id).unwrap()];
    pairs
        .iter()
        .filter(|(t, s)| label(Domain::Target, *t) == label(Domain::Source, *s))
        .count()
}

fn retrieval_direction() -> Check {
    let synth = synth_two_moons(100, 0.1, (0.3, 0.15), 0).map_err(|e| e.to_string())?;
    let diffusion = rank1_of(&synth.set, 10, &DiffusionConfig::default());

    let space = CosineSpace::new(&synth.set).map_err(|e| e.to_string())?;
    let domains = synth.set.domains();
    let sources: Vec<usize> = (0..domains.len()).filter(|&i| domains[i] == Domain::Source).collect();
    let cosine_pairs: Vec<_> = (0..domains.len())
        .filter(|&i| domains[i] == Domain::Target)
        .map(|t| {
            let best = sources
                .iter()
                .copied()
                .reduce(|b, j| if space.cosine(t, j) > space.cosine(t, b) { j } else { b })
                .unwrap();
            (synth.set.record(t).id, synth.set.record(best).id)
        })
        .collect();

    let d = moon_accuracy(&synth, &diffusion);
    let c = moon_accuracy(&synth, &cosine_pairs);
    ensure(d >= c, format!("diffusion {d}/200 vs cosine {c}/200 same-moon rank-1"))
}

fn label_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut blank, mut peaked) = (0, 0);
    for i in 0..10_000 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let scale = 10f64.powf(rng.random_range(-2.0..1.0));
        let mut sample = || (0..h * w).map(|_| scale * rng.random::<f64>()).collect::<Vec<f64>>();
        let g = Raster::new(h, w, RasterKind::DensityMap, sample()).unwrap();
        let p = Raster::new(h, w, RasterKind::DensityMap, sample()).unwrap();
        let w_t = rng.random::<f64>();
        let phi = fuse(&g, &p, w_t).map_err(|e| e.to_string())?;
        let label = normalize_label(&phi);
        if phi.max() < LABEL_FLOOR {
            if label.values().iter().any(|&v| v != 0.0) {
                return Err(format!("fragment {i}: max phi {} but label not blank", phi.max()));
            }
            blank += 1;
        } else {
            if label.max() != LABEL_PEAK {
                return Err(format!("fragment {i}: label max {}", label.max()));
            }
            peaked += 1;
        }
        if fuse(&g, &p, 0.0).unwrap() != g || fuse(&g, &p, 1.0).unwrap() != p {
            return Err(format!("fragment {i}: endpoint fusion differs from its input"));
        }
    }
    Ok(format!("10000 fragments: {blank} blank, {peaked} peaked at exactly 255; w_t = 0/1 reproduce g/p"))
}

fn metric_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = Raster::new(16, 16, RasterKind::DensityMap, (0..256).map(|_| rng.random()).collect()).unwrap();
    let self_ssim = metrics::ssim(&e, &e, DEFAULT_GAMMA1, DEFAULT_GAMMA2).map_err(|e| e.to_string())?;

    let mut ordered = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..500.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..500.0)).collect();
        if metrics::rmse(&p, &g).unwrap() >= metrics::mae(&p, &g).unwrap() {
            ordered += 1;
        }
    }

    let mae = metrics::mae(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
    let rmse = metrics::rmse(&[10.0, 20.0], &[12.0, 16.0]).unwrap();

    let zero = Raster::filled(8, 8, RasterKind::DensityMap, 0.0).unwrap();
    let one = Raster::filled(8, 8, RasterKind::DensityMap, 1.0).unwrap();
    let constant = metrics::ssim(&zero, &one, DEFAULT_GAMMA1, DEFAULT_GAMMA2).unwrap();
    let hand = (DEFAULT_GAMMA1 * DEFAULT_GAMMA2) / ((1.0 + DEFAULT_GAMMA1) * DEFAULT_GAMMA2);

    ensure(
        (self_ssim - 1.0).abs() <= 1e-12
            && ordered == 1000
            && (mae - 3.0).abs() <= 1e-12
            && (rmse - 10f64.sqrt()).abs() <= 1e-12
            && (constant - hand).abs() <= 1e-12,
        format!(
            "SSIM(E,E) = {self_ssim}, RMSE >= MAE on {ordered}/1000, MAE {mae}, RMSE {rmse:.15}, \
             constant SSIM {constant:.6e} vs {hand:.6e}"
        ),
    )
}

fn patch_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = Raster::new(256, 256, RasterKind::DensityMap, (0..256 * 256).map(|_| rng.random::<f64>() * 1e-3).collect())
        .unwrap();
    let patches = slide_windows(&r, 0, (128, 128), (64, 64), PadPolicy::Edge).map_err(|e| e.to_string())?;
    let tiles = patchify(&[(0, r.clone())], (128, 128), (128, 128), PadPolicy::None).map_err(|e| e.to_string())?;
    let counts: Vec<_> = tiles.patches.iter().map(|(p, x)| (*p, metrics::count(x))).collect();
    let stitched = stitch_counts(&counts, TilingLayout::tiles((128, 128))).map_err(|e| e.to_string())?;
    let rel = (stitched - r.sum()).abs() / r.sum();
    ensure(
        patches.len() == 9 && rel <= 1e-9,
        format!("{} patches (9), stitched mass rel err {rel:.2e} (<= 1e-9)", patches.len()),
    )
}

fn run_once(scenario: &Path, workspace: &Path) -> Result<(Vec<u8>, usize), String> {
    let cfg = RunConfig::load(&scenario.join("run.cfg")).map_err(|e| e.to_string())?;
    let trainer = StubTrainer {
        mode: StubMode::Improve {
            scenario: scenario.to_path_buf(),
        },
    };
    let report = run_pipeline(&cfg, workspace, &trainer).map_err(|e| e.to_string())?;
    let journal = std::fs::read(pipeline::run_dir(&cfg, workspace).join("journal.jsonl")).map_err(|e| e.to_string())?;
    Ok((journal, report.iterations_completed))
}

fn end_to_end_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = tmp.path().join("scenario");
    write_scenario(&scenario, &ScenarioParams::default(), "stub").map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (a, iterations) = run_once(&scenario, &tmp.path().join("ws_a"))?;
    let secs = start.elapsed().as_secs_f64();
    let (b, _) = run_once(&scenario, &tmp.path().join("ws_b"))?;
    ensure(
        a == b && iterations == 4 && secs < 60.0,
        format!(
            "journals {} ({} bytes), {iterations} iterations in {secs:.2} s (< 60 s)",
            if a == b { "byte-identical" } else { "differ" },
            a.len()
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("solver-equivalence", solver_equivalence),
        ("convergence-rate", convergence_rate),
        ("truncation-fidelity", truncation_fidelity),
        ("retrieval-direction", retrieval_direction),
        ("pseudo-label-contract", label_contract),
        ("metric-suite", metric_suite),
        ("patch-algebra", patch_algebra),
        ("end-to-end-determinism", end_to_end_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
