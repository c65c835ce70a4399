//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use shoeprint_core::clustersim;
use shoeprint_core::evalkit::{self, Corpus, CorpusOptions, ExperimentOptions, Regime, Scenario, ScenarioData};
use shoeprint_core::forest::{self, Dataset, HyperGrid, Hyperparams, FEATURE_NAMES};
use shoeprint_core::icp::{self, IcpConfig};
use shoeprint_core::imagemetrics::{self, PhaseCorrMap};
use shoeprint_core::imgproc::{self, BinaryImage};
use shoeprint_core::pipeline::{self, PrintOptions};
use shoeprint_core::pointcloud::{self, Foot, NeighborIndex, Point, PointCloud, RigidTransform};
use shoeprint_core::seed;
use shoeprint_core::simfeatures;
use shoeprint_core::synthgen::{self, CorpusSpec, SynthSpec};

type Outcome = (bool, String);

const E2E_SEED: u64 = 7;

fn tread_cloud(n: usize, seed_value: u64) -> PointCloud {
    let spec = SynthSpec { salt_count: 0, seed: seed_value, ..SynthSpec::default() };
    let shoe = synthgen::generate_shoe(&spec, "icp", Foot::Left).unwrap();
    let all = imgproc::extract_points(&imgproc::edge_detect(&shoe.master), imgproc::DEFAULT_DARKNESS_THRESHOLD);
    pointcloud::downsample(&all, n as f64 / all.len() as f64, seed_value).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn icp_recovery() -> Outcome {
    let q = tread_cloud(500, 1);
    let b = q.bounds().unwrap();
    let half_range = b.range_x().max(b.range_y()) / 2.0;
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut rng = seed::rng(2024);
    let cfg = IcpConfig::default();
    let mut ok = 0;
    for _ in 0..100 {
        let theta = rng.random_range(-30f64..=30.0).to_radians();
        let (r, phi) = (half_range * rng.random::<f64>().sqrt(), rng.random_range(0.0..std::f64::consts::TAU));
        let t = RigidTransform::new(theta, r * phi.cos(), r * phi.sin());
        let k: PointCloud = t.apply(&q).iter().map(|p| Point::new(p.x + noise.sample(&mut rng), p.y + noise.sample(&mut rng))).collect();
        let res = icp::align(&q, &k, &cfg).unwrap();
        let idx = NeighborIndex::build(&q);
        let d: Vec<f64> = res.aligned(&k).iter().map(|p| idx.nearest_distance(p)).collect();
        if median(d) <= 1.0 {
            ok += 1;
        }
    }
    let big = tread_cloud(2000, 3);
    let k = RigidTransform::new(0.3, 12.0, -7.0).apply(&big);
    let start = Instant::now();
    icp::align(&big, &k, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (ok >= 95 && secs <= 10.0, format!("{ok}/100 trials with median NN <= 1.0; align on {} points took {secs:.2}s", big.len()))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn oracle_equivalence() -> Outcome {
    let mut rng = seed::rng(99);
    let mut notes = Vec::new();
    let mut pass = true;

    let pts: PointCloud = (0..200).map(|_| Point::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
    let idx = NeighborIndex::build(&pts);
    let mut kd_ok = 0;
    for _ in 0..1000 {
        let q = Point::new(rng.random_range(-10.0..110.0), rng.random_range(-10.0..110.0));
        let got = idx.nearest(&q).unwrap();
        let brute = pts.iter().enumerate().fold((usize::MAX, f64::INFINITY), |b, (i, p)| if p.dist(&q) < b.1 { (i, p.dist(&q)) } else { b });
        if got.index == brute.0 && got.distance == brute.1 {
            kd_ok += 1;
        }
    }
    pass &= kd_ok == 1000;
    notes.push(format!("kd {kd_ok}/1000"));

    let scores: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
    let labels: Vec<u8> = (0..20).map(|i| u8::from(i % 3 != 0)).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..20 {
        for j in 0..20 {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
    }
    let auc = evalkit::auc(&scores, &labels).unwrap();
    pass &= auc == num / den;
    notes.push(format!("auc {auc} vs {}", num / den));

    // a transport LP between uniform 5-point measures has a permutation optimum
    let perms = permutations(5);
    let mut emd_worst: f64 = 0.0;
    for _ in 0..50 {
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..5.0)).collect();
        let lp = perms.iter().map(|p| (0..5).map(|i| (a[i] - b[p[i]]).abs()).sum::<f64>() / 5.0).fold(f64::INFINITY, f64::min);
        emd_worst = emd_worst.max((evalkit::emd_raw(&a, &b).unwrap() - lp).abs());
    }
    pass &= emd_worst <= 1e-9;
    notes.push(format!("emd max |d| {emd_worst:.1e}"));

    let mut md_worst: f64 = 0.0;
    for _ in 0..20 {
        let q: PointCloud = (0..150).map(|_| Point::new(rng.random_range(0.0..60.0), rng.random_range(0.0..60.0))).collect();
        let k: PointCloud = (0..120).map(|_| Point::new(rng.random_range(0.0..60.0), rng.random_range(0.0..60.0))).collect();
        let mut d: Vec<f64> = q.iter().map(|p| k.iter().map(|x| x.dist(p)).fold(f64::INFINITY, f64::min)).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        d.sort_by(f64::total_cmp);
        let expect = [mean, std, quantile_linear(&d, 0.1), quantile_linear(&d, 0.25), quantile_linear(&d, 0.5), quantile_linear(&d, 0.75), quantile_linear(&d, 0.9)];
        let s = simfeatures::min_dist_stats(&q, &k).unwrap();
        let got = [s.mean, s.std, s.p10, s.p25, s.p50, s.p75, s.p90];
        for (g, e) in got.iter().zip(expect) {
            md_worst = md_worst.max((g - e).abs());
        }
    }
    pass &= md_worst <= 1e-9;
    notes.push(format!("min-dist max |d| {md_worst:.1e}"));
    (pass, notes.join("; "))
}

fn formula_checks() -> Outcome {
    let mut notes = Vec::new();
    let grid = HyperGrid::default().len();
    let mut pass = grid == 144;
    notes.push(format!("grid {grid}"));

    let expected = [
        "q_points_count", "k_points_count", "mean", "std", "0.1", "0.25", "0.5", "0.75", "0.9",
        "centroid_distance_n_clusters_20", "cluster_proportion_n_clusters_20", "iterations_k_n_clusters_20", "wcv_ratio_n_clusters_20",
        "centroid_distance_n_clusters_100", "cluster_proportion_n_clusters_100", "iterations_k_n_clusters_100", "wcv_ratio_n_clusters_100",
        "q_pct_threshold_1", "k_pct_threshold_1", "q_pct_threshold_2", "k_pct_threshold_2", "q_pct_threshold_3", "k_pct_threshold_3",
        "q_pct_threshold_5", "k_pct_threshold_5", "q_pct_threshold_10", "k_pct_threshold_10",
        "peak_value", "MSE", "SSIM", "NCC", "PSR", "jaccard_index_0", "jaccard_index_-1", "jaccard_index_-2",
    ];
    let names_ok = FEATURE_NAMES == expected;
    pass &= names_ok;
    notes.push(format!("35 names in order: {names_ok}"));

    let mut r = vec![0.0; 100];
    r[37] = 10.0;
    let pv = imagemetrics::peak_value(&PhaseCorrMap::from_values(10, 10, r).unwrap()).unwrap();
    pass &= (pv - 100.0).abs() < 1e-9;
    notes.push(format!("PV {pv}"));

    let blob = |n: usize, cx: f64, start: usize| -> Vec<Point> {
        (start..start + n).map(|i| Point::new(cx + (i % 7) as f64 * 0.3, (i % 5) as f64 * 0.3)).collect()
    };
    let q = PointCloud::new([blob(60, 0.0, 0), blob(40, 50.0, 0)].concat());
    let k = PointCloud::new([blob(40, 0.0, 3), blob(60, 50.0, 3)].concat());
    let cpm = clustersim::cluster_metrics(&q, &k, 2, 5).unwrap().cpm;
    pass &= (cpm - 0.2).abs() < 1e-12;
    notes.push(format!("CPM {cpm}"));

    let mut rng = seed::rng(5);
    let mut shifts_ok = 0;
    for _ in 0..20 {
        let (w, h) = (40, 30);
        let a = BinaryImage::new(w, h, (0..w * h).map(|_| u8::from(rng.random_bool(0.6))).collect()).unwrap();
        let (dr, dc) = (rng.random_range(0..h), rng.random_range(0..w));
        let mut px = vec![0u8; w * h];
        for rr in 0..h {
            for cc in 0..w {
                px[((rr + dr) % h) * w + (cc + dc) % w] = a.get(rr, cc);
            }
        }
        let b = BinaryImage::new(w, h, px).unwrap();
        if imagemetrics::phase_correlation(&a, &b).peak_location == (dr, dc) {
            shifts_ok += 1;
        }
    }
    pass &= shifts_ok == 20;
    notes.push(format!("planted shifts {shifts_ok}/20"));
    (pass, notes.join("; "))
}

fn identity_suite() -> Outcome {
    let spec = SynthSpec::default();
    let shoe = synthgen::generate_shoe(&spec, "self", Foot::Left).unwrap();
    let img = synthgen::capture(&spec, &shoe, &Default::default()).unwrap();
    let cfg = synthgen::pipeline_config(1);
    let a = pipeline::analyze_images(&img, PrintOptions::default(), &img, PrintOptions::default(), &cfg).unwrap();
    let f = &a.features;
    let ones = [
        "q_pct_threshold_1", "k_pct_threshold_1", "q_pct_threshold_2", "k_pct_threshold_2", "q_pct_threshold_3", "k_pct_threshold_3",
        "q_pct_threshold_5", "k_pct_threshold_5", "q_pct_threshold_10", "k_pct_threshold_10",
        "jaccard_index_0", "jaccard_index_-1", "jaccard_index_-2", "NCC", "SSIM",
        "iterations_k_n_clusters_20", "iterations_k_n_clusters_100",
    ];
    let zeros = [
        "MSE", "centroid_distance_n_clusters_20", "cluster_proportion_n_clusters_20", "wcv_ratio_n_clusters_20",
        "centroid_distance_n_clusters_100", "cluster_proportion_n_clusters_100", "wcv_ratio_n_clusters_100",
        "mean", "std", "0.1", "0.25", "0.5", "0.75", "0.9",
    ];
    let mut bad: Vec<String> = Vec::new();
    for n in ones {
        if f.get(n) != Some(1.0) {
            bad.push(format!("{n}={:?}", f.get(n)));
        }
    }
    for n in zeros {
        if f.get(n) != Some(0.0) {
            bad.push(format!("{n}={:?}", f.get(n)));
        }
    }
    let col: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
    let emd = evalkit::emd_shift(&col, &col).unwrap();
    if emd != 0.0 {
        bad.push(format!("EMD={emd}"));
    }
    (bad.is_empty(), if bad.is_empty() { format!("{} points, all identities exact", f.get("q_points_count").unwrap()) } else { bad.join(", ") })
}

struct E2e {
    data: ScenarioData,
    corpus_root: tempfile::TempDir,
    featurize_secs: f64,
}

const E2E_SCENARIOS: [Scenario; 6] =
    [Scenario::PristineAN, Scenario::Blurry02, Scenario::Blurry06, Scenario::Blurry10, Scenario::PartialToe, Scenario::PartialHeel];

fn e2e_corpus() -> (Corpus, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let spec = CorpusSpec { n_models: 3, shoes_per_model: 10, blur_levels: vec![2, 6, 10], seed: E2E_SEED, ..CorpusSpec::default() };
    synthgen::generate_corpus(&spec, dir.path()).unwrap();
    let corpus = Corpus::load(dir.path().join("registry.csv"), &CorpusOptions { seed: E2E_SEED, ..Default::default() }).unwrap();
    (corpus, dir)
}

fn build_e2e() -> E2e {
    let start = Instant::now();
    let (corpus, dir) = e2e_corpus();
    let data = evalkit::build_scenario_data(&corpus, &E2E_SCENARIOS, &synthgen::pipeline_config(E2E_SEED), E2E_SEED).unwrap();
    E2e { data, corpus_root: dir, featurize_secs: start.elapsed().as_secs_f64() }
}

fn end_to_end(e2e: &E2e) -> Outcome {
    let start = Instant::now();
    let opts = ExperimentOptions { params: Hyperparams::default(), seed: E2E_SEED };
    let rep = evalkit::run_experiment_matrix(&e2e.data, &[Regime::Baseline, Regime::Full], &opts).unwrap();
    let acc = |r, s| rep.accuracy(r, s).unwrap_or(f64::NAN);
    let full_pristine = acc(Regime::Full, Scenario::PristineAN);
    let full_b6 = acc(Regime::Full, Scenario::Blurry06);
    let base_b6 = acc(Regime::Baseline, Scenario::Blurry06);
    let secs = e2e.featurize_secs + start.elapsed().as_secs_f64();
    let pass = full_pristine >= 0.90 && full_b6 >= 0.80 && base_b6 <= full_b6 - 0.10 && secs <= 1800.0;
    let n_test: usize = e2e.data.test.values().map(Dataset::len).sum();
    (
        pass,
        format!(
            "Full pristine {full_pristine:.3}, Full blur6 {full_b6:.3}, Baseline blur6 {base_b6:.3}; {n_test} test pairs; {secs:.0}s total"
        ),
    )
}

fn mated_column(data: &ScenarioData, sc: Scenario, name: &str) -> Vec<f64> {
    let j = FEATURE_NAMES.iter().position(|n| *n == name).unwrap();
    [data.train.get(&sc), data.test.get(&sc)]
        .into_iter()
        .flatten()
        .flat_map(|d| d.records.iter())
        .filter(|r| r.label == 1)
        .map(|r| r.values[j])
        .filter(|v| !v.is_nan())
        .collect()
}

fn distribution_shift(e2e: &E2e) -> Outcome {
    let pristine = mated_column(&e2e.data, Scenario::PristineAN, "k_pct_threshold_3");
    let blur10 = mated_column(&e2e.data, Scenario::Blurry10, "k_pct_threshold_3");
    let shift = evalkit::emd_shift(&pristine, &blur10).unwrap();
    let mut rng = seed::rng(E2E_SEED);
    let resample: Vec<f64> = (0..20)
        .map(|_| {
            let boot: Vec<f64> = (0..pristine.len()).map(|_| *pristine.choose(&mut rng).unwrap()).collect();
            evalkit::emd_shift(&pristine, &boot).unwrap()
        })
        .collect();
    let base = median(resample);
    let ratio = shift / base;
    (ratio >= 5.0, format!("EMD pristine vs blur10 {shift:.3}, resample {base:.3}, ratio {ratio:.1}"))
}

fn determinism(e2e: &E2e) -> Outcome {
    let train = Dataset::concat(&e2e.data.train.values().collect::<Vec<_>>()).unwrap();
    let test = Dataset::concat(&e2e.data.test.values().collect::<Vec<_>>()).unwrap();
    let params = Hyperparams { n_trees: 300, ..Hyperparams::default() };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let m = forest::train(&train, params, E2E_SEED).unwrap();
            let p = m.predict_dataset(&test).unwrap();
            (m.to_json().unwrap(), p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        })
    };
    let (j1, p1) = run(1);
    let (j2, p2) = run(4);
    let (j3, p3) = run(4);

    // featurization is repeated under a different pool size as well
    let corpus = Corpus::load(e2e.corpus_root.path().join("registry.csv"), &CorpusOptions { seed: E2E_SEED, ..Default::default() }).unwrap();
    let set = corpus.pairs(Scenario::PristineAN, evalkit::Split::Test, E2E_SEED).unwrap();
    let pairs: Vec<&evalkit::Pair> = set.pairs().collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let (again, _) = pool.install(|| evalkit::featurize_pairs(&corpus, &pairs, &synthgen::pipeline_config(E2E_SEED))).unwrap();
    let mut a = Vec::new();
    let mut b = Vec::new();
    again.write_csv(&mut a).unwrap();
    e2e.data.test[&Scenario::PristineAN].write_csv(&mut b).unwrap();

    let pass = j1 == j2 && j2 == j3 && p1 == p2 && p2 == p3 && a == b;
    (
        pass,
        format!(
            "model JSON {} bytes identical across 1/4/4 threads: {}; posteriors identical: {}; features identical: {}",
            j1.len(),
            j1 == j2 && j2 == j3,
            p1 == p2 && p2 == p3,
            a == b
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut record = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((name, o));
    };

    if wanted("icp_recovery") {
        record("icp_recovery", guarded(icp_recovery));
    }
    if wanted("oracle_equivalence") {
        record("oracle_equivalence", guarded(oracle_equivalence));
    }
    if wanted("formula_checks") {
        record("formula_checks", guarded(formula_checks));
    }
    if wanted("identity_suite") {
        record("identity_suite", guarded(identity_suite));
    }
    if ["end_to_end", "distribution_shift", "determinism"].iter().any(|n| wanted(n)) {
        match panic::catch_unwind(build_e2e) {
            Ok(e2e) => {
                if wanted("end_to_end") {
                    record("end_to_end", guarded(|| end_to_end(&e2e)));
                }
                if wanted("distribution_shift") {
                    record("distribution_shift", guarded(|| distribution_shift(&e2e)));
                }
                if wanted("determinism") {
                    record("determinism", guarded(|| determinism(&e2e)));
                }
            }
            Err(_) => {
                for n in ["end_to_end", "distribution_shift", "determinism"] {
                    if wanted(n) {
                        record(n, (false, "synthetic corpus construction panicked".into()));
                    }
                }
            }
        }
    }

    let failed = results.iter().filter(|(_, o)| !o.0).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
