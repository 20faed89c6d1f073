//! Acceptance suite: one PASS/FAIL line per criterion, followed by the
//! supporting checks measured at the same scale.
//!
//! Exact criteria (properties that hold by construction) fail the test.
//! Experimental criteria (trained-model outcomes and wall-clock budgets)
//! are reported but do not, so a weak toy result stays visible instead of
//! being hidden behind a red build.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lare::lare_core;
use lare::manifest::Split;
use lare::pipeline::{cross_matrix, Dataset};
use lare::{image_io, Config, Features, Pipeline};
use lare_core::autograd::Tape;
use lare_core::backbone::{Backbone, BackboneConfig};
use lare_core::codec::psnr;
use lare_core::diffusion::{forward_diffuse, ConvDenoiser, DenoiserConfig, NoiseSchedule};
use lare_core::egre::{
    channel_refine, fuse_and_classify, mhesa, train_detector, Detector, DetectorConfig, DetectorSample, EgreConfig,
    Mode,
};
use lare_core::grid::grids_to_cnhw;
use lare_core::lare::compute_lare;
use lare_core::metrics::{accuracy, average_precision, ScoredSet};
use lare_core::nn::{ParamStore, TrainSettings};
use lare_core::{gradcheck, rng, GridShape, LatentGrid, Tensor};
use rand::Rng;

#[derive(Default)]
struct Outcome {
    exact_failures: Vec<String>,
}

impl Outcome {
    fn line(&mut self, label: &str, exact: bool, pass: bool, text: String) {
        let line = format!("[{}] {label}: {text}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        if exact && !pass {
            self.exact_failures.push(line);
        }
    }
}

fn randn(r: &mut rng::SeededRng, shape: &[usize]) -> Tensor {
    Tensor::from_vec(shape, rng::normal_vec(r, shape.iter().product())).unwrap()
}

fn at(t: &Tensor, i: usize, j: usize) -> f64 {
    t.data()[i * t.shape()[1] + j]
}

fn naive_matmul(x: &Tensor, w: &Tensor) -> Tensor {
    let (m, k) = x.dims2();
    let n = w.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|l| at(x, i, l) * at(w, l, j)).sum();
        }
    }
    Tensor::from_vec(&[m, n], out).unwrap()
}

/// Textbook multi-head attention with explicit loops.
fn reference_mha(q: &Tensor, kv: &Tensor, store: &ParamStore, heads: usize) -> Tensor {
    let w = |h: usize, m: &str| store.get(&format!("head{h}.{m}")).unwrap();
    let (nq, n) = (q.dims2().0, kv.dims2().0);
    let mut cat: Vec<Vec<f64>> = vec![Vec::new(); nq];
    for h in 0..heads {
        let (qh, kh, vh) = (naive_matmul(q, w(h, "wq")), naive_matmul(kv, w(h, "wk")), naive_matmul(kv, w(h, "wv")));
        let d = qh.shape()[1];
        for (i, row) in cat.iter_mut().enumerate() {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..d).map(|l| at(&qh, i, l) * at(&kh, j, l)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for l in 0..d {
                row.push((0..n).map(|j| ex[j] / z * at(&vh, j, l)).sum());
            }
        }
    }
    let width = cat[0].len();
    naive_matmul(&Tensor::from_vec(&[nq, width], cat.concat()).unwrap(), store.get("wo").unwrap())
}

/// Criterion 3: largest deviation from reference attention over 100 random
/// shapes with the error projections zeroed.
fn attention_reduction() -> f64 {
    let mut r = rng::seeded(301);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let heads = r.random_range(1..=4);
        let cfg = EgreConfig {
            c1: r.random_range(1..=12),
            c2: r.random_range(1..=4),
            heads,
            head_dim: r.random_range(1..=8),
        };
        let n = r.random_range(1..=16);
        let mut store = ParamStore::new();
        for (name, shape) in cfg.param_shapes(Mode::Esr) {
            let t = if name.ends_with(".we") { Tensor::zeros(&shape) } else { randn(&mut r, &shape) };
            store.insert(name, t).unwrap();
        }
        let q = randn(&mut r, &[1, cfg.c1]);
        let kv = randn(&mut r, &[n, cfg.c1]);
        let err = randn(&mut r, &[n, cfg.c2]).map(f64::abs);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (qv, kvv, ev) = (tape.constant(q.clone()), tape.constant(kv.clone()), tape.constant(err));
        let out = mhesa(&mut tape, &p, "", &cfg, qv, kvv, ev).unwrap();
        let want = reference_mha(&q, &kv, &store, heads);
        for (a, b) in tape.value(out).data().iter().zip(want.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Criterion 4: `(operation, max relative error, tolerance)`.
fn gradient_suite() -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let mut r = rng::seeded(401);

    let den_cfg = DenoiserConfig {
        latent_channels: 2,
        width: 3,
        blocks: 2,
        time_dim: 4,
        time_hidden: 5,
    };
    let mut den = ConvDenoiser::init(den_cfg, 1).unwrap();
    for t in den.params_mut().tensors_mut() {
        *t = randn(&mut r, t.shape()).map(|v| 0.5 * v);
    }
    let x = grids_to_cnhw(&[&rng::normal_grid(&mut r, GridShape::new(3, 3, 2))]).unwrap();
    let e = grids_to_cnhw(&[&rng::normal_grid(&mut r, GridShape::new(3, 3, 2))]).unwrap();
    let rep = gradcheck::check_store(den.params(), 1e-5, |tape, p| {
        let xv = tape.constant(x.clone());
        let ev = tape.constant(e.clone());
        let y = den.forward(tape, p, xv, &[7]);
        let d = tape.sub(ev, y);
        tape.sum_squares(d)
    });
    out.push(("denoiser blocks".into(), gradcheck::max_rel_error(&rep), 1e-4));

    let bb_cfg = BackboneConfig {
        input_channels: 2,
        input_size: 8,
        widths: [3, 4, 5],
        output_size: 2,
    };
    let bb = Backbone::init(bb_cfg, 2).unwrap();
    let mut store = bb.params().clone();
    for t in store.tensors_mut() {
        *t = randn(&mut r, t.shape()).map(|v| 0.5 * v);
    }
    let imgs: Vec<LatentGrid> = (0..2).map(|_| rng::normal_grid(&mut r, GridShape::new(8, 8, 2))).collect();
    let x = grids_to_cnhw(&imgs.iter().collect::<Vec<_>>()).unwrap();
    let rep = gradcheck::check_store(&store, 1e-5, |tape, p| {
        let xv = tape.constant(x.clone());
        let fmap = bb.forward(tape, p, "", xv);
        let (s, g) = Backbone::bundle(tape, fmap, 1);
        let a = tape.sum_squares(s);
        let c = tape.sum_squares(g);
        tape.add(a, c)
    });
    out.push(("backbone".into(), gradcheck::max_rel_error(&rep), 1e-4));

    let cfg = EgreConfig {
        c1: 5,
        c2: 2,
        heads: 2,
        head_dim: 3,
    };
    let mut store = ParamStore::new();
    for (name, shape) in cfg.param_shapes(Mode::Esr) {
        if !name.starts_with("cls.") {
            store.insert(name, randn(&mut r, &shape)).unwrap();
        }
    }
    store.insert("q", randn(&mut r, &[1, 5])).unwrap();
    store.insert("kv", randn(&mut r, &[4, 5])).unwrap();
    store.insert("err", randn(&mut r, &[4, 2])).unwrap();
    let w = randn(&mut r, &[1, 5]);
    let rep = gradcheck::check_store(&store, 1e-5, |tape, p| {
        let o = mhesa(tape, p, "", &cfg, p.var("q"), p.var("kv"), p.var("err")).unwrap();
        let wv = tape.constant(w.clone());
        let y = tape.mul(o, wv);
        let s = tape.sum_squares(y);
        let m = tape.mean(y);
        tape.add(s, m)
    });
    out.push(("ESA/MHESA".into(), gradcheck::max_rel_error(&rep), 1e-4));

    let mut store = ParamStore::new();
    store.insert("gate", randn(&mut r, &[2, 5])).unwrap();
    store.insert("x", randn(&mut r, &[1, 5])).unwrap();
    store.insert("e", randn(&mut r, &[1, 2]).map(f64::abs)).unwrap();
    let rep = gradcheck::check_store(&store, 1e-5, |tape, p| {
        let y = channel_refine(tape, p, "", &cfg, p.var("x"), p.var("e")).unwrap();
        let wv = tape.constant(w.clone());
        let z = tape.mul(y, wv);
        let s = tape.sum_squares(z);
        let m = tape.mean(z);
        tape.add(s, m)
    });
    out.push(("ECR gate".into(), gradcheck::max_rel_error(&rep), 1e-4));

    let mut store = ParamStore::new();
    store.insert("cls.w", randn(&mut r, &[12, 1])).unwrap();
    store.insert("cls.b", randn(&mut r, &[1])).unwrap();
    for name in ["a", "b", "c"] {
        store.insert(name, randn(&mut r, &[1, 4])).unwrap();
    }
    let rep = gradcheck::check_store(&store, 1e-5, |tape, p| {
        let z = fuse_and_classify(tape, p, "", &[p.var("a"), p.var("b"), p.var("c")]).unwrap();
        tape.bce_with_logits(z, &[1.0])
    });
    out.push(("classifier head".into(), gradcheck::max_rel_error(&rep), 1e-4));

    let imgs: Vec<LatentGrid> = (0..2).map(|_| rng::normal_grid(&mut r, GridShape::new(8, 8, 1))).collect();
    let maps: Vec<LatentGrid> = (0..2)
        .map(|_| rng::normal_grid(&mut r, GridShape::new(4, 4, 2)).map(|v| v * v))
        .collect();
    let batch = [
        DetectorSample {
            image: &imgs[0],
            lare: &maps[0],
            label: 1,
        },
        DetectorSample {
            image: &imgs[1],
            lare: &maps[1],
            label: 0,
        },
    ];
    let mut worst = 0.0f64;
    for mode in Mode::ALL {
        let cfg = DetectorConfig {
            mode,
            image_channels: 1,
            image_size: 8,
            backbone_widths: [3, 4, 6],
            feature_size: 2,
            egre: EgreConfig {
                c1: 6,
                c2: 2,
                heads: 2,
                head_dim: 3,
            },
            error_size: 4,
        };
        let mut det = Detector::init(cfg, 3).unwrap();
        for t in det.params_mut().tensors_mut() {
            *t = randn(&mut r, t.shape()).map(|v| 0.5 * v);
        }
        let rep = gradcheck::check_store(det.params(), 1e-5, |tape, p| {
            let z = det.logits(tape, p, &batch).unwrap();
            tape.bce_with_logits(z, &[1.0, 0.0])
        });
        worst = worst.max(gradcheck::max_rel_error(&rep));
    }
    out.push(("full chain (6 modes)".into(), worst, 1e-3));
    out
}

/// Precision at each positive's rank, with ranks found by pairwise
/// comparison rather than sorting.
fn oracle_ap(scores: &[f64], labels: &[u8], ids: &[String]) -> f64 {
    let n = scores.len();
    let above = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]);
    let rank: Vec<usize> = (0..n).map(|i| 1 + (0..n).filter(|&j| above(j, i)).count()).collect();
    let mut pos: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    pos.sort_by_key(|&i| rank[i]);
    let mut total = 0.0;
    for &i in &pos {
        let hits = pos.iter().filter(|&&j| rank[j] <= rank[i]).count();
        total += hits as f64 / rank[i] as f64;
    }
    total / pos.len() as f64
}

/// Criterion 5: `(AP mismatches out of 1000, ACC hand cases all exact)`.
fn metric_oracle() -> (usize, bool) {
    let mut r = rng::seeded(501);
    let mut mismatches = 0;
    let mut done = 0;
    while done < 1000 {
        let n = r.random_range(1..=10);
        // coarse scores force plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..=4) as f64 / 4.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..=1)).collect();
        if !labels.contains(&1) {
            continue;
        }
        let ids: Vec<String> = (0..n).map(|_| format!("id{:03}", r.random_range(0..1000))).collect();
        let mut uniq = ids.clone();
        uniq.sort();
        uniq.dedup();
        if uniq.len() != n {
            continue;
        }
        let set = ScoredSet::new(scores.clone(), labels.clone(), ids.clone()).unwrap();
        if average_precision(&set).unwrap().to_bits() != oracle_ap(&scores, &labels, &ids).to_bits() {
            mismatches += 1;
        }
        done += 1;
    }
    let acc = |s: Vec<f64>, l: Vec<u8>| accuracy(&ScoredSet::unnamed(s, l).unwrap(), 0.5).unwrap();
    let hand = acc(vec![0.9, 0.1], vec![1, 0]) == 1.0
        && acc(vec![0.9, 0.1], vec![0, 1]) == 0.0
        && acc(vec![0.6, 0.4, 0.7, 0.2], vec![1, 1, 0, 0]) == 0.5;
    (mismatches, hand)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

/// Criterion 6: `(worst relative error of chain mean/variance against the
/// closed form, worst product-identity relative error)`.
fn forward_consistency() -> (f64, f64) {
    let s = NoiseSchedule::standard();
    let mut prod = 1.0;
    let mut ident = 0.0f64;
    for t in 1..=s.steps() {
        prod *= s.alpha(t);
        ident = ident.max((s.alpha_bar(t) - prod).abs() / prod);
    }
    // a large x0 keeps the surviving signal measurable at t = T
    let x0 = 200.0;
    let one = GridShape::new(1, 1, 1);
    let mut worst = 0.0f64;
    for t in [1, s.steps() / 4, s.steps()] {
        let mut r = rng::seeded(600 + t as u64);
        let chain: Vec<f64> = (0..10_000)
            .map(|_| {
                let mut x = x0;
                for k in 1..=t {
                    x = s.alpha(k).sqrt() * x + s.beta(k).sqrt() * rng::normal(&mut r);
                }
                x
            })
            .collect();
        let direct: Vec<f64> = (0..10_000)
            .map(|_| {
                let e = rng::normal_grid(&mut r, one);
                forward_diffuse(&LatentGrid::filled(one, x0), t, &e, &s).unwrap().values()[0]
            })
            .collect();
        let (cm, cv) = mean_var(&chain);
        let (dm, dv) = mean_var(&direct);
        let (m, v) = (s.alpha_bar(t).sqrt() * x0, 1.0 - s.alpha_bar(t));
        for (got, want) in [(cm, m), (cv, v), (dm, m), (dv, v)] {
            worst = worst.max((got - want).abs() / want.abs());
        }
    }
    (worst, ident)
}

/// Criterion 7: variance at e=16 over (variance at e=1)/16, averaged over
/// elements, across 50 reseeds.
fn monte_carlo_scaling() -> f64 {
    let latent = rng::normal_grid(&mut rng::seeded(701), GridShape::new(8, 8, 4));
    let model = ConvDenoiser::init(DenoiserConfig::default(), 702).unwrap();
    let s = NoiseSchedule::standard();
    let var = |e: usize| -> f64 {
        let maps: Vec<Vec<f64>> = (0..50)
            .map(|k| compute_lare(&latent, 200, e, 7000 + k, &model, &s).unwrap().map.into_values())
            .collect();
        let len = maps[0].len();
        (0..len)
            .map(|i| mean_var(&maps.iter().map(|m| m[i]).collect::<Vec<_>>()).1)
            .sum::<f64>()
            / len as f64
    };
    var(16) / (var(1) / 16.0)
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Criterion 10: every pipeline stage at a reduced scale, run twice with
/// different worker counts. Returns the differing files and the file count.
/// The timing report is excluded: it records wall-clock measurements.
fn determinism() -> (Vec<String>, usize) {
    let tiny = "optimizer = adam\nlearning_rate = 0.003\nT = 100\nt_extract = 20\ne_ensemble = 2\nepochs = 2\n\
                batch_size = 8\nbackbone_widths = 4,4,4\nheads = 2\nhead_dim = 2\npool_size = 24\n\
                reals_per_subset = 10\nfakes_per_subset = 10\ncodec_epochs = 1\ndiffusion_epochs = 2\n\
                denoiser_width = 4\nddim_steps = 5\ndire_steps = 5\nlossgap_samples = 5\nbench_images = 2\n";
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: usize| -> BTreeMap<String, Vec<u8>> {
        let mut cfg = Config::parse(tiny).unwrap();
        cfg.work_dir = dir.path().join("work");
        let p = Pipeline::new(cfg, true).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            p.run_all().unwrap();
            p.extract_dire(None).unwrap();
            p.bench().unwrap();
            p.sweep("e", &[1, 2]).unwrap();
            p.overlay(1).unwrap();
        });
        let mut snap = snapshot(&dir.path().join("work"));
        snap.remove("reports/bench.csv");
        // the sweep's extraction-seconds column is a wall-clock measurement
        let sweep = String::from_utf8(snap.remove("reports/sweep_e.csv").unwrap()).unwrap();
        let stripped: String = sweep
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
            .collect();
        snap.insert("reports/sweep_e.csv (without extract_s)".into(), stripped.into_bytes());
        std::fs::remove_dir_all(dir.path().join("work")).unwrap();
        snap
    };
    let (a, b) = (run(1), run(3));
    let mut differing: Vec<String> = a.keys().chain(b.keys()).filter(|k| a.get(*k) != b.get(*k)).cloned().collect();
    differing.dedup();
    (differing, a.len())
}

fn samples_relabelled<'a>(data: &'a Dataset, subset: &str, split: Split, label: u8) -> Vec<DetectorSample<'a>> {
    data.samples(subset, split)
        .into_iter()
        .filter(|s| s.label == 1)
        .map(|s| DetectorSample { label, ..s })
        .collect()
}

#[test]
fn acceptance() {
    let mut out = Outcome::default();

    let diff = attention_reduction();
    out.line(
        "criterion 3 (attention reduction)",
        true,
        diff <= 1e-12,
        format!("max |MHESA - MHA| = {diff:.2e} over 100 random shapes (tolerance 1e-12)"),
    );

    let start = Instant::now();
    let grads = gradient_suite();
    let secs = start.elapsed().as_secs_f64();
    let ok = grads.iter().all(|(_, e, tol)| e < tol);
    let detail: Vec<String> = grads.iter().map(|(n, e, tol)| format!("{n} {e:.1e} (<{tol:.0e})")).collect();
    out.line(
        "criterion 4 (gradient suite)",
        true,
        ok,
        format!("{}; {secs:.1}s", detail.join(", ")),
    );
    out.line("criterion 4 runtime", false, secs <= 60.0, format!("{secs:.1}s (budget 60s)"));

    let (mismatches, hand) = metric_oracle();
    out.line(
        "criterion 5 (metric oracle)",
        true,
        mismatches == 0 && hand,
        format!("{mismatches}/1000 AP mismatches against the oracle (exact); ACC hand cases exact: {hand}"),
    );

    let (worst, ident) = forward_consistency();
    out.line(
        "criterion 6 (forward-process consistency)",
        true,
        worst <= 0.05 && ident <= 1e-12,
        format!("worst mean/variance relative error {worst:.4} (<= 0.05) over 10000 trials at t = 1, T/4, T; product identity {ident:.1e} (<= 1e-12)"),
    );

    let ratio = monte_carlo_scaling();
    out.line(
        "criterion 7 (Monte Carlo scaling)",
        true,
        (1.0 / 1.5..=1.5).contains(&ratio),
        format!("var(e=16) / (var(e=1)/16) = {ratio:.3} (within a factor 1.5)"),
    );

    // the desk-scale benchmark, built from the shipped toy configuration
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = Config::read(&workspace_root().join("configs/toy.conf")).unwrap();
    cfg.work_dir = dir.path().to_path_buf();
    let p = Pipeline::new(cfg.clone(), false).unwrap();
    let start = Instant::now();
    p.forge().unwrap();
    p.train_codec().unwrap();
    p.train_diffusion(None).unwrap();
    p.build_subsets().unwrap();
    p.extract(None, None).unwrap();
    let mut matrices = BTreeMap::new();
    for mode in Mode::ALL {
        p.train_detectors(mode, None, Features::Lare).unwrap();
        matrices.insert(mode, p.eval(mode, Features::Lare, true).unwrap());
    }
    let pipeline_secs = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let t_grid: Vec<usize> = [1, 2, 3, 4, 5, 10].iter().map(|k| k * cfg.steps / 10).collect();
    let gap = p.lossgap(Some(&t_grid)).unwrap();
    let lossgap_secs = start.elapsed().as_secs_f64();
    let rows = &gap.profile.rows;
    let c1 = (0..5).all(|k| rows[k].mean_real > rows[k].mean_fake && gap.bootstrap_positive[k] >= 0.95);
    let detail: Vec<String> = (0..5)
        .map(|k| {
            format!(
                "t={} {:.2}>{:.2} ({:.0}%)",
                rows[k].t,
                rows[k].mean_real,
                rows[k].mean_fake,
                100.0 * gap.bootstrap_positive[k]
            )
        })
        .collect();
    out.line(
        "criterion 1 (loss gap)",
        false,
        c1,
        format!("real > fake with >=95% bootstrap confidence: {}", detail.join(", ")),
    );
    out.line(
        "criterion 1 runtime",
        false,
        lossgap_secs <= 300.0,
        format!("{lossgap_secs:.1}s (budget 300s)"),
    );

    let start = Instant::now();
    let timings = p.bench().unwrap();
    let bench_secs = start.elapsed().as_secs_f64();
    let get = |m: &str| timings.iter().find(|t| t.method == m).unwrap();
    let (lare4, lare8, dire) = (get("lare_e4"), get("lare_e8"), get("dire_s20"));
    let call_ratio = dire.calls_per_image / lare4.calls_per_image;
    let wall_ratio = dire.median_ms_per_image / lare4.median_ms_per_image;
    out.line(
        "criterion 2 (extraction cost, calls)",
        true,
        call_ratio == 10.0,
        format!(
            "{} / {} denoiser calls per image = {call_ratio} (exactly 10)",
            dire.calls_per_image, lare4.calls_per_image
        ),
    );
    out.line(
        "criterion 2 (extraction cost, wall clock)",
        false,
        wall_ratio >= 5.0,
        format!(
            "{:.3} / {:.3} ms per image = {wall_ratio:.2}x (>= 5x)",
            dire.median_ms_per_image, lare4.median_ms_per_image
        ),
    );
    out.line("criterion 2 runtime", false, bench_secs <= 120.0, format!("{bench_secs:.1}s (budget 120s)"));

    let avg = |m: Mode| -> f64 {
        let cells = &matrices[&m];
        cells.iter().map(|c| c.acc).sum::<f64>() / cells.len() as f64
    };
    let (base, esr, ecr, egre, concat) = (
        avg(Mode::Baseline),
        avg(Mode::Esr),
        avg(Mode::Ecr),
        avg(Mode::Egre),
        avg(Mode::Concat),
    );
    let diag: Vec<(String, f64)> = matrices[&cfg.mode]
        .iter()
        .filter(|c| c.train_tag == c.test_tag)
        .map(|c| (c.train_tag.clone(), c.acc))
        .collect();
    let ordering = egre >= concat && concat >= base && esr > base && ecr > base;
    let diag_ok = diag.iter().all(|d| d.1 >= 0.9);
    let averages: Vec<String> = Mode::ALL.iter().map(|&m| format!("{m} {:.3}", avg(m))).collect();
    let diag_text: Vec<String> = diag.iter().map(|(t, a)| format!("{t} {a:.3}")).collect();
    out.line(
        "criterion 8 (detector directionality)",
        false,
        ordering && diag_ok,
        format!(
            "average test ACC {}; need egre >= concat >= baseline, esr > baseline, ecr > baseline: {ordering}; \
             {} diagonal {} (each >= 0.9): {diag_ok}",
            averages.join(", "),
            cfg.mode,
            diag_text.join(", ")
        ),
    );
    out.line(
        "criterion 8 runtime",
        false,
        pipeline_secs <= 1200.0,
        format!("{pipeline_secs:.0}s end to end (budget 1200s)"),
    );

    // criterion 9: the configured mode trained on ddpm_a under three seeds
    let data = p.dataset(Features::Lare).unwrap();
    let mut rows = vec![matrices[&cfg.mode].clone()];
    for label in ["seed_b", "seed_c"] {
        let dets = p.train_detectors_on(&data, cfg.mode, Some("ddpm_a"), label).unwrap();
        rows.push(cross_matrix(&dets, &data).unwrap().cells().to_vec());
    }
    let cell = |cells: &[lare_core::metrics::Cell], test: &str| {
        cells
            .iter()
            .find(|c| c.train_tag == "ddpm_a" && c.test_tag == test)
            .unwrap()
            .acc
    };
    let on_ddim: f64 = rows.iter().map(|r| cell(r, "ddim_a")).sum::<f64>() / 3.0;
    let on_b: f64 = rows.iter().map(|r| cell(r, "ddpm_b")).sum::<f64>() / 3.0;
    out.line(
        "criterion 9 (cross-generator structure)",
        false,
        on_ddim > on_b,
        format!(
            "{} trained on ddpm_a, mean over 3 seeds: ACC on ddim_a {on_ddim:.3} vs ddpm_b {on_b:.3}",
            cfg.mode
        ),
    );

    let (differing, files) = determinism();
    out.line(
        "criterion 10 (determinism)",
        true,
        differing.is_empty(),
        format!(
            "{files} artifacts from two reduced-scale runs (1 and 3 workers); differing: {:?}",
            differing
        ),
    );

    // supporting checks at acceptance scale
    let codec = p.load_codec().unwrap();
    let pool: Vec<LatentGrid> = (0..cfg.pool_size)
        .map(|i| image_io::read(&dir.path().join(format!("images/pool/pool_{i:05}.limg"))).unwrap())
        .collect();
    let held: Vec<LatentGrid> = (0..200)
        .map(|i| image_io::read(&dir.path().join(format!("images/real/real_{i:05}.limg"))).unwrap())
        .collect();
    let (train_mse, held_mse) = (
        codec.reconstruction_mse(&pool).unwrap(),
        codec.reconstruction_mse(&held).unwrap(),
    );
    out.line(
        "check (codec)",
        false,
        psnr(held_mse) >= 25.0 && held_mse <= 2.0 * train_mse,
        format!(
            "held-out PSNR {:.1} dB (>= 25); held-out MSE {held_mse:.5} vs train {train_mse:.5} (<= 2x)",
            psnr(held_mse)
        ),
    );

    let last = rows_last(&gap.profile.rows);
    let smallest_early = (0..5)
        .map(|k| (gap.profile.rows[k].mean_real - gap.profile.rows[k].mean_fake).abs())
        .fold(f64::INFINITY, f64::min);
    out.line(
        "check (loss gap at t = T)",
        false,
        last.abs() < smallest_early,
        format!("|gap| at T {last:.4} vs smallest gap over 0.1T-0.5T {smallest_early:.4}"),
    );

    let e_ratio = lare8.median_ms_per_image / lare4.median_ms_per_image;
    out.line(
        "check (ensemble cost)",
        false,
        (1.4..=2.6).contains(&e_ratio),
        format!("e=8 over e=4 wall time {e_ratio:.2} (2 +/- 30%)"),
    );

    for mode in Mode::ALL {
        let cells = &matrices[&mode];
        let mut worse = Vec::new();
        for c in cells.iter().filter(|c| c.train_tag == c.test_tag) {
            let off: Vec<f64> = cells
                .iter()
                .filter(|o| o.train_tag == c.train_tag && o.test_tag != c.test_tag)
                .map(|o| o.acc)
                .collect();
            let off_mean = off.iter().sum::<f64>() / off.len() as f64;
            if c.acc < off_mean {
                worse.push(c.train_tag.clone());
            }
        }
        out.line(
            &format!("check (diagonal dominance, {mode})"),
            false,
            worse.is_empty(),
            format!("detectors whose own-subset ACC trails their off-diagonal mean: {worse:?}"),
        );
    }

    let train = [
        samples_relabelled(&data, "ddpm_a", Split::Train, 0),
        samples_relabelled(&data, "ddpm_b", Split::Train, 1),
    ]
    .concat();
    let val = [
        samples_relabelled(&data, "ddpm_a", Split::Val, 0),
        samples_relabelled(&data, "ddpm_b", Split::Val, 1),
    ]
    .concat();
    let test = [
        samples_relabelled(&data, "ddpm_a", Split::Test, 0),
        samples_relabelled(&data, "ddpm_b", Split::Test, 1),
    ]
    .concat();
    let settings = TrainSettings {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        optimizer: cfg.optimizer,
        grad_clip: None,
    };
    let (probe, _) = train_detector(&train, &val, p.detector_config(Mode::Baseline), &settings, 901).unwrap();
    let probe_acc = probe.accuracy(&test).unwrap();
    out.line(
        "check (generator identity)",
        false,
        probe_acc > 0.5,
        format!("probe separating ddpm_a from ddpm_b fakes: test ACC {probe_acc:.3} (> 0.5)"),
    );

    assert!(out.exact_failures.is_empty(), "exact criteria failed: {:#?}", out.exact_failures);
}

fn rows_last(rows: &[lare_core::lare::LossGapRow]) -> f64 {
    let r = rows.last().unwrap();
    r.mean_real - r.mean_fake
}
