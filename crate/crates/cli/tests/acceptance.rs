//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the report is always printed:
//! `cargo test --release -p wildreid --test acceptance`.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wildreid_core::catalog::{Catalog, ImageRecord};
use wildreid_core::grid::{
    aggregate, run_grid, GridDataset, GridSpec, GroupBy, Mark, RayonExecutor, ReportTable, RunRecord,
};
use wildreid_core::knn::topk;
use wildreid_core::local::{
    default_grid, pair_correspondences, predict_identity, tally_all, Aggregation, DescriptorSet,
};
use wildreid_core::losses::{arcface_loss, select_triplets, triplet_loss, ArcFaceConfig, Batch, Mining, TripletConfig};
use wildreid_core::matcher::{evaluate, match_queries, IdentityDatabase};
use wildreid_core::simgen::{gen_descriptors, gen_embeddings, SimSpec};
use wildreid_core::split::{split, verify, SplitError, SplitMode};
use wildreid_core::train::{train_head, LossConfig, TrainConfig};
use wildreid_core::EmbeddingMatrix;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Box-Muller, kept apart from the crate's own sampler.
fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

fn unit_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data = gaussian_vec(rng, rows * dim).into_iter().map(|x| x as f32).collect();
    let ids = (0..rows).map(|i| format!("r{i}")).collect();
    EmbeddingMatrix::new(data, dim, ids).unwrap().normalize().unwrap()
}

fn on_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

// ---------------------------------------------------------------- 1

fn random_catalog(rng: &mut ChaCha8Rng) -> Catalog {
    let n_ids = rng.random_range(1..25);
    let n_days = rng.random_range(1..6);
    let start = chrono::NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
    let mut records = Vec::new();
    for i in 0..n_ids {
        for j in 0..rng.random_range(1..12) {
            let day = start + chrono::Days::new(rng.random_range(0..n_days));
            records.push(ImageRecord::new(format!("i{i}_{j}"), format!("id{i}"), "c").with_timestamp(day));
        }
    }
    for k in (1..records.len()).rev() {
        records.swap(k, rng.random_range(0..=k));
    }
    Catalog::new("c", records).unwrap()
}

fn split_invariants() -> Outcome {
    let mut rng = rng(1);
    let (mut cases, mut closed, mut infeasible) = (0, 0, 0);
    while cases < 200 {
        let catalog = random_catalog(&mut rng);
        let mode = match rng.random_range(0..4) {
            0 => SplitMode::ClosedSet,
            1 => SplitMode::OpenSet { new_identity_fraction: rng.random_range(0.05..0.95) },
            2 => SplitMode::DisjointSet,
            _ => SplitMode::TimeAware,
        };
        let ratio = rng.random_range(0.05..0.95);
        let seed: u64 = rng.random();
        let manifest = match split(&catalog, mode, ratio, seed) {
            Ok(m) => m,
            // too few identities or days for the mode; draw another case
            Err(SplitError::Infeasible(_)) if mode != SplitMode::ClosedSet => {
                infeasible += 1;
                continue;
            }
            Err(e) => return Err(format!("{mode:?} ratio {ratio}: {e}")),
        };
        let violations = verify(&manifest, &catalog).map_err(|e| e.to_string())?;
        ensure(violations.is_empty(), || format!("{mode:?}: {} violations", violations.len()))?;
        let all: HashSet<&String> = manifest.train_ids.iter().chain(&manifest.test_ids).collect();
        ensure(
            all.len() == catalog.len() && manifest.train_ids.len() + manifest.test_ids.len() == catalog.len(),
            || "images not partitioned".into(),
        )?;
        if mode == SplitMode::ClosedSet {
            let ids = |v: &[String]| -> BTreeSet<String> {
                v.iter().map(|i| catalog.identity_of(i).unwrap().to_string()).collect()
            };
            ensure(ids(&manifest.test_ids).is_subset(&ids(&manifest.train_ids)), || {
                "closed-set query identity missing".into()
            })?;
            closed += 1;
        }
        cases += 1;
    }
    Ok(format!("{cases} cases ({closed} closed-set, all subsets), {infeasible} infeasible draws redrawn"))
}

// ---------------------------------------------------------------- 2, 3

/// Eight interleaved f32 partial sums folded pairwise.
fn striped_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        acc[i % 8] += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

fn knn_oracle() -> Outcome {
    let mut rng = rng(2);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let n = rng.random_range(1..=512);
        let m = rng.random_range(1..=512);
        let d = rng.random_range(1..=64);
        let k = rng.random_range(1..=m.min(16));
        let q = unit_matrix(&mut rng, n, d);
        let r = unit_matrix(&mut rng, m, d);
        let got = on_threads(1, || topk(&q, &r, k).unwrap());
        for threads in [2, 8] {
            ensure(on_threads(threads, || topk(&q, &r, k).unwrap()) == got, || {
                format!("case {case}: {threads} threads differ")
            })?;
        }
        for i in 0..n {
            let mut row: Vec<(usize, f32)> = (0..m).map(|j| (j, striped_dot(q.row(i), r.row(j)))).collect();
            row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let want: Vec<usize> = row[..k].iter().map(|e| e.0).collect();
            ensure(got.indices(i) == want.as_slice(), || format!("case {case} query {i}: indices differ"))?;
            for (pos, &(j, _)) in row[..k].iter().enumerate() {
                let exact: f64 = q.row(i).iter().zip(r.row(j)).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum();
                worst = worst.max((f64::from(got.scores(i)[pos]) - exact).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("score error {worst:.2e}"))?;
    Ok(format!("500 instances, threads 1/2/8 identical, max score error {worst:.1e}"))
}

fn fast_unit_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let ids = (0..rows).map(|i| i.to_string()).collect();
    EmbeddingMatrix::new(data, dim, ids).unwrap().normalize().unwrap()
}

fn knn_throughput() -> Outcome {
    let mut rng = rng(3);
    let q = fast_unit_matrix(&mut rng, 10_000, 512);
    let r = fast_unit_matrix(&mut rng, 50_000, 512);
    let start = Instant::now();
    let res = topk(&q, &r, 5).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(res.n_queries() == 10_000 && res.k() == 5, || "wrong result shape".into())?;
    let threads = rayon::current_num_threads();
    ensure(secs < 60.0, || format!("{secs:.1} s on {threads} threads"))?;
    Ok(format!(
        "10000 x 50000 x 512, top-5 in {secs:.2} s on {threads} threads ({:.1} GFLOP/s)",
        2.0 * 512.0 * 5e8 / secs / 1e9
    ))
}

// ---------------------------------------------------------------- 4, 5

const H: f64 = 1e-4;

fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn central_difference(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + H;
            let up = f(&x);
            x[i] = orig - H;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn unit_rows(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d)
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect()
}

fn distances(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    let u = unit_rows(x, d);
    u.iter()
        .map(|a| u.iter().map(|b| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()).collect())
        .collect()
}

fn enumerate_triplets(x: &[f64], d: usize, y: &[usize], mining: Mining) -> Vec<[usize; 3]> {
    let dist = distances(x, d);
    let b = y.len();
    let mut out = Vec::new();
    for a in 0..b {
        for p in 0..b {
            for n in 0..b {
                if a == p || y[a] != y[p] || y[a] == y[n] {
                    continue;
                }
                let keep = match mining {
                    Mining::All => true,
                    Mining::Hard => dist[a][n] < dist[a][p],
                    Mining::Semi => dist[a][n] > dist[a][p],
                    Mining::SemiHardBand => unreachable!(),
                };
                if keep {
                    out.push([a, p, n]);
                }
            }
        }
    }
    out
}

/// Distance of any candidate triplet to a kink of the hinge or of the
/// mining boundary.
fn kink_clearance(x: &[f64], d: usize, y: &[usize], margin: f64) -> f64 {
    let dist = distances(x, d);
    enumerate_triplets(x, d, y, Mining::All).iter().fold(f64::INFINITY, |c, t| {
        let (dap, dan) = (dist[t[0]][t[1]], dist[t[0]][t[2]]);
        c.min((dap - dan).abs()).min((dap - dan + margin).abs())
    })
}

fn labels(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Vec<usize> {
    let mut l: Vec<usize> = (0..b).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
    for k in (1..b).rev() {
        l.swap(k, rng.random_range(0..=k));
    }
    l
}

fn softmax_ce(x: &[f64], w: &[f64], d: usize, y: &[usize]) -> f64 {
    let (u, v) = (unit_rows(x, d), unit_rows(w, d));
    let total: f64 = u
        .iter()
        .zip(y)
        .map(|(ui, &yi)| {
            let z: Vec<f64> = v.iter().map(|vj| ui.iter().zip(vj).map(|(a, b)| a * b).sum()).collect();
            -(z[yi].exp() / z.iter().map(|zj| zj.exp()).sum::<f64>()).ln()
        })
        .sum();
    total / y.len() as f64
}

fn gradient_checks() -> Outcome {
    let mut rng = rng(4);
    let (b, d, c) = (8, 12, 5);
    let mut arc_worst = 0.0f64;
    for case in 0..100 {
        let x = gaussian_vec(&mut rng, b * d);
        let w = gaussian_vec(&mut rng, c * d);
        let y = labels(&mut rng, b, c);
        let cfg = ArcFaceConfig { margin: [0.0, 0.25, 0.5, 0.75][case % 4], scale: [1.0, 32.0, 64.0][case % 3] };
        let loss = |xs: &[f64], ws: &[f64]| arcface_loss(&Batch::new(xs, d, &y).unwrap(), ws, &cfg).unwrap().loss;
        let out = arcface_loss(&Batch::new(&x, d, &y).unwrap(), &w, &cfg).map_err(|e| e.to_string())?;
        let e = relative_error(&out.grad_embeddings, &central_difference(&x, |xs| loss(xs, &w)))
            .max(relative_error(&out.grad_weights, &central_difference(&w, |ws| loss(&x, ws))));
        ensure(e < 1e-4, || format!("ArcFace case {case} {cfg:?}: {e:.2e}"))?;
        arc_worst = arc_worst.max(e);
    }

    let mut trip_worst = 0.0f64;
    let mut redrawn = 0;
    let b = 12;
    for mining in [Mining::All, Mining::Hard, Mining::Semi] {
        let mut checked = 0;
        while checked < 100 {
            let margin = [0.1, 0.2, 0.3][checked % 3];
            let x = gaussian_vec(&mut rng, b * d);
            let y = labels(&mut rng, b, 3);
            // finite differences are meaningless across a kink
            if kink_clearance(&x, d, &y, margin) < 1e-3 {
                redrawn += 1;
                continue;
            }
            let cfg = TripletConfig { margin, mining };
            let out = triplet_loss(&Batch::new(&x, d, &y).unwrap(), &cfg).map_err(|e| e.to_string())?;
            if out.n_selected == 0 {
                redrawn += 1;
                continue;
            }
            let fd = central_difference(&x, |xs| triplet_loss(&Batch::new(xs, d, &y).unwrap(), &cfg).unwrap().loss);
            let e = relative_error(&out.grad_embeddings, &fd);
            ensure(e < 1e-4, || format!("Triplet {mining:?} margin {margin}: {e:.2e}"))?;
            trip_worst = trip_worst.max(e);
            checked += 1;
        }
    }

    let mut soft_worst = 0.0f64;
    for _ in 0..100 {
        let (b, c, d) = (rng.random_range(1..20), rng.random_range(2..9), rng.random_range(2..24));
        let x = gaussian_vec(&mut rng, b * d);
        let w = gaussian_vec(&mut rng, c * d);
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let got = arcface_loss(&Batch::new(&x, d, &y).unwrap(), &w, &ArcFaceConfig { margin: 0.0, scale: 1.0 })
            .map_err(|e| e.to_string())?
            .loss;
        soft_worst = soft_worst.max((got - softmax_ce(&x, &w, d, &y)).abs());
    }
    ensure(soft_worst < 1e-7, || format!("ArcFace(0, 1) vs softmax: {soft_worst:.2e}"))?;
    Ok(format!(
        "ArcFace 100 batches max rel err {arc_worst:.1e}; Triplet 3x100 batches max {trip_worst:.1e} ({redrawn} redrawn near kinks or empty); softmax identity {soft_worst:.1e}"
    ))
}

fn mining_oracle() -> Outcome {
    let mut rng = rng(5);
    let mut total = [0usize; 3];
    for case in 0..100 {
        let b = rng.random_range(2..=16);
        let c = rng.random_range(1..5);
        let d = rng.random_range(2..10);
        let x = gaussian_vec(&mut rng, b * d);
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let batch = Batch::new(&x, d, &y).unwrap();
        for (slot, mining) in [Mining::All, Mining::Hard, Mining::Semi].into_iter().enumerate() {
            let got = select_triplets(&batch, &TripletConfig { margin: 0.2, mining }).map_err(|e| e.to_string())?;
            let mut want = enumerate_triplets(&x, d, &y, mining);
            let mut sorted = got.clone();
            sorted.sort();
            want.sort();
            ensure(sorted == want, || {
                format!("case {case} {mining:?}: {} selected, oracle {}", got.len(), want.len())
            })?;
            total[slot] += got.len();
        }
    }
    Ok(format!("100 batches; all/hard/semi triplets {}/{}/{} match enumeration", total[0], total[1], total[2]))
}

// ---------------------------------------------------------------- 6

fn end_to_end_training() -> Outcome {
    let mut accs = Vec::new();
    for seed in 0..10u64 {
        let (catalog, features) = gen_embeddings(&SimSpec::new(10, 30, 32, 50.0, seed)).map_err(|e| e.to_string())?;
        let manifest = split(&catalog, SplitMode::ClosedSet, 0.8, seed).map_err(|e| e.to_string())?;
        let side = |ids: &[String]| {
            let pos: Vec<usize> = ids.iter().map(|id| catalog.position(id).unwrap()).collect();
            let labels: Vec<String> = ids.iter().map(|id| catalog.identity_of(id).unwrap().to_string()).collect();
            (features.select(&pos).unwrap(), labels)
        };
        let (train, train_y) = side(&manifest.train_ids);
        let (test, test_y) = side(&manifest.test_ids);
        let cfg = TrainConfig {
            epochs: 50,
            seed,
            ..TrainConfig::new(LossConfig::ArcFace(ArcFaceConfig { margin: 0.5, scale: 64.0 }), 0.001)
        };
        let head = train_head(&train, &train_y, &cfg).map_err(|e| format!("seed {seed}: {e}"))?;
        let db = IdentityDatabase::build(&head.project(&train).unwrap(), train_y).unwrap();
        let predictions = match_queries(&db, &head.project(&test).unwrap()).unwrap();
        accs.push(evaluate(&predictions, &test_y).unwrap());
    }
    let passing = accs.iter().filter(|&&a| a >= 0.95).count();
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    ensure(passing == 10, || format!("{passing}/10 seeds reach 0.95: [{}]", shown.join(", ")))?;
    Ok(format!("10/10 seeds >= 0.95: [{}]", shown.join(", ")))
}

// ---------------------------------------------------------------- 7

const TABLE: &str = "\
shared.backbone = Swin-B, EfficientNet-B3
shared.lr = 0.01, 0.001
arcface.margin = 0.25, 0.5, 0.75
arcface.scale = 32, 64, 128
triplet.mining = all, semi, hard
triplet.margin = 0.1, 0.2, 0.3
";

fn stub_dataset(name: String, seed: u64, ids: usize, imgs: usize) -> GridDataset {
    let spec = SimSpec { dataset: name.clone(), ..SimSpec::new(ids, imgs, 8, 50.0, seed) };
    let (catalog, features) = gen_embeddings(&spec).unwrap();
    let manifest = split(&catalog, SplitMode::ClosedSet, 0.8, seed).unwrap();
    GridDataset { name, catalog, features, manifest }
}

fn grid_protocol() -> Outcome {
    let spec =
        GridSpec::parse(&format!("{TABLE}train.epochs = 1\ntrain.embedding_dim = 8\n")).map_err(|e| e.to_string())?;
    let settings = spec.enumerate().map_err(|e| e.to_string())?;
    // backbone x lr x (arcface margin x scale + triplet mining x margin)
    let oracle = 2 * 2 * (3 * 3 + 3 * 3);
    ensure(settings.len() == 72 && oracle == 72 && spec.count() == 72, || format!("{} settings", settings.len()))?;
    let distinct: HashSet<String> = settings.iter().map(|s| s.key()).collect();
    ensure(distinct.len() == 72, || "duplicate settings".into())?;

    let stubs: Vec<GridDataset> = (0..29).map(|i| stub_dataset(format!("stub{i:02}"), i, 3, 5)).collect();
    let records =
        run_grid(&spec, &stubs, &RayonExecutor::default(), 11, &[], &|_: &RunRecord| {}).map_err(|e| e.to_string())?;
    let pairs: HashSet<(&str, &str)> = records.iter().map(|r| (r.dataset.as_str(), r.setting_key.as_str())).collect();
    ensure(records.len() == 2088 && pairs.len() == 2088, || {
        format!("{} records, {} distinct", records.len(), pairs.len())
    })?;

    let divergent = GridSpec::parse(
        "shared.lr = 0.001, 1e6\narcface.margin = 0.5\narcface.scale = 64\ntrain.epochs = 20\ntrain.embedding_dim = 16\n",
    )
    .map_err(|e| e.to_string())?;
    let data: Vec<GridDataset> = (0..3).map(|i| stub_dataset(format!("d{i}"), 100 + i, 6, 10)).collect();
    let recs = run_grid(&divergent, &data, &RayonExecutor::default(), 5, &[], &|_: &RunRecord| {})
        .map_err(|e| e.to_string())?;
    let flagged = recs.iter().filter(|r| r.diverged).count();
    let all_bad_flagged = recs.iter().all(|r| r.diverged == (r.setting.get("lr") == Some("1e6")));
    ensure(flagged == 3 && all_bad_flagged, || format!("{flagged} runs flagged"))?;
    let by_setting = aggregate(&recs, &GroupBy::Setting);
    let bad = by_setting.iter().find(|g| g.group.contains("lr=1e6")).ok_or("missing divergent group")?;
    ensure(bad.stats.is_none() && bad.values.is_empty() && bad.n_diverged == 3, || {
        "divergent runs not excluded".into()
    })?;
    let by_method = aggregate(&recs, &GroupBy::Axis("method".into()));
    ensure(by_method.len() == 1 && by_method[0].values.len() == 3 && by_method[0].n_diverged == 3, || {
        "method aggregate includes divergent runs".into()
    })?;
    Ok(format!("72 settings, 72 x 29 = {} records; lr=1e6 flagged on {flagged}/3 datasets and excluded", records.len()))
}

// ---------------------------------------------------------------- 8

fn brute_force_count(query: &DescriptorSet, reference: &DescriptorSet, threshold: f64) -> u32 {
    if reference.len() < 2 {
        return 0;
    }
    let mut count = 0;
    for q in query.descriptors() {
        let mut dist: Vec<f64> = reference
            .descriptors()
            .map(|r| q.iter().zip(r).map(|(a, b)| (f64::from(*a) - f64::from(*b)).powi(2)).sum::<f64>().sqrt())
            .collect();
        dist.sort_by(f64::total_cmp);
        if dist[0] / dist[1] < threshold {
            count += 1;
        }
    }
    count
}

fn random_set(rng: &mut ChaCha8Rng, id: String, k: usize, d: usize) -> DescriptorSet {
    DescriptorSet::new(id, d, gaussian_vec(rng, k * d).into_iter().map(|x| x as f32).collect()).unwrap()
}

fn local_matcher() -> Outcome {
    let mut rng = rng(8);
    let grid = default_grid();
    for case in 0..200 {
        let d = rng.random_range(1..9);
        let kq = rng.random_range(1..21);
        let q = random_set(&mut rng, "q".into(), kq, d);
        let refs: Vec<DescriptorSet> = (0..rng.random_range(1..5))
            .map(|i| {
                let k = rng.random_range(1..21);
                random_set(&mut rng, format!("r{i}"), k, d)
            })
            .collect();
        let t = rng.random_range(0.05..1.0);
        let tally = pair_correspondences(&q, &refs, t).map_err(|e| e.to_string())?;
        for (r, (_, count)) in refs.iter().zip(&tally.counts) {
            ensure(*count == brute_force_count(&q, r, t), || {
                format!("case {case}: count differs from all-pairs oracle")
            })?;
        }
        let per_threshold: Vec<_> = grid.iter().map(|&g| pair_correspondences(&q, &refs, g).unwrap()).collect();
        for w in per_threshold.windows(2) {
            ensure(w[0].counts.iter().zip(&w[1].counts).all(|(lo, hi)| lo.1 <= hi.1), || {
                format!("case {case}: count fell as the threshold rose")
            })?;
        }
    }

    let (catalog, sets) = gen_descriptors(&SimSpec::new(5, 4, 32, 50.0, 3), 20).map_err(|e| e.to_string())?;
    let labels: Vec<String> = catalog.iter().map(|r| r.identity.clone()).collect();
    let (queries, refs): (Vec<usize>, Vec<usize>) = (0..sets.len()).partition(|i| i % 4 == 0);
    let ref_sets: Vec<DescriptorSet> = refs.iter().map(|&i| sets[i].clone()).collect();
    let ref_labels: Vec<String> = refs.iter().map(|&i| labels[i].clone()).collect();
    let q_sets: Vec<DescriptorSet> = queries.iter().map(|&i| sets[i].clone()).collect();
    let mut correct = 0;
    for tally in tally_all(&q_sets, &ref_sets, 0.8).map_err(|e| e.to_string())? {
        let p = predict_identity(&tally, &ref_labels, Aggregation::ReferenceImage).map_err(|e| e.to_string())?;
        if p.identity() == catalog.identity_of(&p.query_id) {
            correct += 1;
        }
    }
    ensure(correct == queries.len(), || format!("identification {correct}/{}", queries.len()))?;
    Ok(format!(
        "200 instances equal the all-pairs oracle and are monotone; 5-identity accuracy {correct}/{}",
        queries.len()
    ))
}

// ---------------------------------------------------------------- 9

fn report_fidelity() -> Outcome {
    let text = "dataset,SIFT,Superpoint,Triplet,ArcFace\nAAUZebraFish,65.09,25.09,99.40,98.95\n";
    let table = ReportTable::from_csv(text.as_bytes(), b',').map_err(|e| e.to_string())?;
    let marks = table.rows[0].marks();
    ensure(marks == [Mark::None, Mark::None, Mark::Best, Mark::Second], || format!("{marks:?}"))?;
    let md = table.to_markdown();
    ensure(md.contains("| AAUZebraFish | 65.09 | 25.09 | **99.40** | _98.95_ |"), || md.clone())?;
    Ok("AAUZebraFish: best = Triplet 99.40, second = ArcFace 98.95".into())
}

// ---------------------------------------------------------------- 10

struct Cli {
    dir: PathBuf,
}

impl Cli {
    fn run(&self, threads: &str, args: &[&str]) -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_wildreid"))
            .current_dir(&self.dir)
            .env("RUST_LOG", "warn")
            .args(["--threads", threads, "--seed", "42"])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cli = Cli { dir: tmp.path().to_path_buf() };
    fs::write(tmp.path().join("grid.cfg"), format!("{TABLE}train.epochs = 2\ntrain.embedding_dim = 8\n")).unwrap();

    // (name, args with {o} for the output path, extra outputs)
    let commands: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        (
            "simgen",
            vec![
                "simgen",
                "--identities",
                "5",
                "--images",
                "6",
                "--dim",
                "16",
                "--descriptors",
                "8",
                "--descriptor-dim",
                "8",
                "--days",
                "4",
                "-o",
                "{o}",
            ],
            vec![],
        ),
        ("ingest", vec!["ingest", "--metadata", "base/catalog.csv", "--name", "sim", "-o", "{o}"], vec![]),
        ("stats", vec!["stats", "--catalog", "base/catalog.csv", "-o", "{o}"], vec![]),
        (
            "split",
            vec!["split", "--catalog", "base/catalog.csv", "--mode", "closed", "--ratio", "0.8", "-o", "{o}"],
            vec![],
        ),
        (
            "verify-split",
            vec!["verify-split", "--catalog", "base/catalog.csv", "--manifest", "manifest.txt", "-o", "{o}"],
            vec![],
        ),
        (
            "match",
            vec![
                "match",
                "--db",
                "base/embeddings.wdem",
                "--query",
                "base/embeddings.wdem",
                "--catalog",
                "base/catalog.csv",
                "-o",
                "{o}",
            ],
            vec![],
        ),
        (
            "local-match",
            vec![
                "local-match",
                "--db",
                "base/descriptors.wdds",
                "--query",
                "base/descriptors.wdds",
                "--catalog",
                "base/catalog.csv",
                "-o",
                "{o}",
            ],
            vec![],
        ),
        (
            "calibrate",
            vec!["calibrate", "--db", "base/descriptors.wdds", "--catalog", "base/catalog.csv", "-o", "{o}"],
            vec![],
        ),
        (
            "train-head",
            vec![
                "train-head",
                "--features",
                "base/embeddings.wdem",
                "--catalog",
                "base/catalog.csv",
                "--manifest",
                "manifest.txt",
                "--loss",
                "triplet",
                "--lr",
                "0.01",
                "--epochs",
                "5",
                "--embedding-dim",
                "8",
                "--trace",
                "{o}.trace",
                "-o",
                "{o}",
            ],
            vec!["trace"],
        ),
        ("grid", vec!["grid", "--spec", "grid.cfg", "--datasets", "base", "base2", "-o", "{o}"], vec![]),
        (
            "aggregate",
            vec!["aggregate", "--records", "records.jsonl", "--by", "method", "--boxplot", "{o}.box", "-o", "{o}"],
            vec!["box"],
        ),
        ("report", vec!["report", "--records", "records.jsonl", "-o", "{o}"], vec![]),
    ];

    // shared inputs for the commands downstream of simgen
    cli.run(
        "1",
        &[
            "simgen",
            "--identities",
            "5",
            "--images",
            "6",
            "--dim",
            "16",
            "--descriptors",
            "8",
            "--descriptor-dim",
            "8",
            "--days",
            "4",
            "-o",
            "base",
        ],
    )?;
    cli.run("1", &["--seed", "7", "simgen", "--identities", "4", "--images", "5", "--dim", "16", "-o", "base2"])?;
    cli.run("1", &["split", "--catalog", "base/catalog.csv", "--mode", "closed", "-o", "manifest.txt"])?;
    cli.run("1", &["grid", "--spec", "grid.cfg", "--datasets", "base", "base2", "-o", "records.jsonl"])?;

    let mut compared = 0;
    for (name, args, extras) in &commands {
        let runs = [("a", "2"), ("b", "2"), ("c", "1"), ("d", "3")];
        for (tag, threads) in runs {
            let out = format!("out-{name}-{tag}");
            let argv: Vec<String> = args.iter().map(|a| a.replace("{o}", &out)).collect();
            let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
            cli.run(threads, &argv)?;
        }
        let files = |tag: &str| -> Vec<(String, Vec<u8>)> {
            let base = tmp.path().join(format!("out-{name}-{tag}"));
            let mut v = Vec::new();
            if base.is_dir() {
                let mut entries: Vec<_> = fs::read_dir(&base).unwrap().map(|e| e.unwrap().path()).collect();
                entries.sort();
                for p in entries {
                    v.push((p.file_name().unwrap().to_string_lossy().into_owned(), read(&p)));
                }
            } else {
                v.push((String::new(), read(&base)));
            }
            for ext in extras {
                v.push((ext.to_string(), read(&tmp.path().join(format!("out-{name}-{tag}.{ext}")))));
            }
            v
        };
        let a = files("a");
        ensure(a.iter().all(|(_, bytes)| !bytes.is_empty()), || format!("{name}: empty output"))?;
        ensure(files("b") == a, || format!("{name}: re-run differs"))?;
        for tag in ["c", "d"] {
            ensure(files(tag) == a, || format!("{name}: output depends on thread count"))?;
        }
        compared += a.len();
    }
    let leftovers: Vec<_> = fs::read_dir(tmp.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
        .collect();
    ensure(leftovers.is_empty(), || "grid journal left behind".into())?;
    Ok(format!("12 commands, {compared} output files byte-identical across re-runs and 1/2/3 threads"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("split invariants", split_invariants, Duration::from_secs(10)),
        ("k-NN oracle equivalence", knn_oracle, Duration::from_secs(30)),
        ("k-NN throughput", knn_throughput, Duration::from_secs(60)),
        ("gradient checks", gradient_checks, Duration::MAX),
        ("mining oracle", mining_oracle, Duration::MAX),
        ("end-to-end training", end_to_end_training, Duration::from_secs(120)),
        ("grid protocol", grid_protocol, Duration::MAX),
        ("local matcher oracle", local_matcher, Duration::MAX),
        ("report fidelity", report_fidelity, Duration::MAX),
        ("CLI determinism", cli_determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (i, (name, check, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(_) if elapsed > *budget => {
                Err(format!("took {:.1} s, budget {} s", elapsed.as_secs_f64(), budget.as_secs()))
            }
            r => r,
        };
        let (status, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {status} [{:>7.2} s] {name}: {detail}", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
