//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own pass/fail line; exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use advcompose::attacks::{
    builtin_attack, defense_matrix, perceptual_pair, AttackResult, MatrixReport, PerceptualConfig, PerceptualMetric,
};
use advcompose::classifier::{adversarial_train, train, Classifier, ConvNet, TrainConfig};
use advcompose::cli::main_with_args;
use advcompose::gradcheck::run_gradcheck;
use advcompose::imagecore::{synth_dataset, Image, LabeledDataset, PixelCoord, Shape};
use advcompose::layers::{bilinear_sample, AffineParams, DeltaParams, FlowParams, LayerParams, SamplingGrid};
use advcompose::metrics::{lp_distance, lpips_style, ssim, Norm, SSIM_C1};
use advcompose::theory::{c_max, classify_contrast, contrast_scan, flow_reach_bound, flow_value, theorem_witness};
use advcompose::threat::{contains, project, ThreatSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_image(r: &mut ChaCha8Rng, shape: Shape) -> Image {
    Image::new(shape, (0..shape.len()).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap()
}

struct Nets {
    eval: LabeledDataset,
    undefended: ConvNet,
    delta: ConvNet,
    stadv: ConvNet,
}

fn train_nets() -> Nets {
    let train_set = synth_dataset(1, 200, 16).unwrap();
    let shape = train_set.shape().unwrap();
    let mut undefended = ConvNet::new(shape, 3, 1).unwrap();
    train(&mut undefended, &train_set, &TrainConfig::default()).unwrap();
    let harden = |attack: &str| {
        let mut net = ConvNet::new(shape, 3, 1).unwrap();
        let cfg = TrainConfig::hardening(builtin_attack(attack).unwrap());
        adversarial_train(&mut net, &train_set, &cfg).unwrap();
        net
    };
    Nets {
        eval: synth_dataset(2, 100, 16).unwrap(),
        undefended,
        delta: harden("delta"),
        stadv: harden("stadv"),
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let report = run_gradcheck(1, 100, None).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let worst = report
        .ops
        .iter()
        .map(|o| format!("{} {:.1e}/{:.0e}", o.op, o.max_rel_error, o.tolerance))
        .collect::<Vec<_>>()
        .join(", ");
    let code = main_with_args(["advcompose", "gradcheck", "--seed", "1", "--points", "100"]);
    check(
        report.passed && code == 0 && elapsed < Duration::from_secs(60) && report.ops.iter().all(|o| o.points == 100),
        format!("{} ops, 100 points each, cli exit {code}, {elapsed:.1?}: {worst}", report.ops.len()),
    )
}

fn closed_form_equivalence() -> Outcome {
    let t = Instant::now();
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let c: [f64; 4] = [(); 4].map(|_| r.gen_range(0.0..=1.0));
        let (eh, ev) = (r.gen_range(0.0..=1.0), r.gen_range(0.0..=1.0));
        let closed = flow_value(c[0], c[1], c[2], c[3], eh, ev).unwrap();
        let top = c[0] * (1.0 - eh) + c[1] * eh;
        let bottom = c[2] * (1.0 - eh) + c[3] * eh;
        let two_stage = top * (1.0 - ev) + bottom * ev;
        // row-major 2x2: x00 x10 / x01 x11
        let quad = Image::new(Shape::new(2, 2, 1), vec![c[0], c[1], c[2], c[3]]).unwrap();
        let grid = SamplingGrid {
            height: 2,
            width: 2,
            xs: vec![eh; 4],
            ys: vec![ev; 4],
        };
        let sampled = bilinear_sample(&quad, &grid).unwrap().get(0, 0, 0);
        worst = worst.max((closed - two_stage).abs()).max((closed - sampled).abs());
    }
    let elapsed = t.elapsed();
    check(
        worst <= 1e-12 && elapsed < Duration::from_secs(5),
        format!("10000 quadrants, max deviation {worst:.2e}, {elapsed:.1?}"),
    )
}

fn reach_bound() -> Outcome {
    let mut r = rng(3);
    let shape = Shape::new(8, 8, 3);
    let images: Vec<Image> = (0..50).map(|_| random_image(&mut r, shape)).collect();
    let mut checked = 0usize;
    let mut violations = 0usize;
    for eps in [0.1, 0.5, 1.0] {
        let per: Vec<(usize, usize)> = images
            .par_iter()
            .map(|img| {
                let (mut n, mut bad) = (0, 0);
                for ch in 0..3 {
                    for row in 1..7 {
                        for col in 1..7 {
                            let p = PixelCoord::new(row, col);
                            let reach = flow_reach_bound(img, p, ch, eps).unwrap();
                            n += 1;
                            if reach > 2.0 * eps * c_max(img, p, ch).unwrap() {
                                bad += 1;
                            }
                        }
                    }
                }
                (n, bad)
            })
            .collect();
        checked += per.iter().map(|x| x.0).sum::<usize>();
        violations += per.iter().map(|x| x.1).sum::<usize>();
    }
    check(violations == 0, format!("{checked} (image, site, eps) checks, {violations} violations"))
}

/// Exact reach of a flow with per-quadrant strength `eps` at `p`: bilinear
/// interpolation is multilinear, so its extremes over `[0, eps]^2` sit at
/// the box corners.
fn reach_oracle(img: &Image, ch: usize, p: PixelCoord, eps: f64) -> f64 {
    let v = |dr: isize, dc: isize| img.get(ch, (p.row as isize + dr) as usize, (p.col as isize + dc) as usize);
    let x00 = v(0, 0);
    let mut best: f64 = 0.0;
    for sv in [-1, 1] {
        for sh in [-1, 1] {
            for (eh, ev) in [(eps, 0.0), (0.0, eps), (eps, eps)] {
                let top = x00 * (1.0 - eh) + v(0, sh) * eh;
                let bottom = v(sv, 0) * (1.0 - eh) + v(sv, sh) * eh;
                best = best.max((top * (1.0 - ev) + bottom * ev - x00).abs());
            }
        }
    }
    best
}

/// Re-checks a witness from scratch: it differs from `original` only at two
/// pixels, delta alone cannot produce the change at `q`, and no flow of
/// strength `eps` can produce the change at `p`.
fn oracle_accepts(original: &Image, w: &Image, delta: f64, eps: f64, p: PixelCoord, q: PixelCoord) -> bool {
    let mut changed = Vec::new();
    for ch in 0..original.channels() {
        for row in 0..original.height() {
            for col in 0..original.width() {
                if original.get(ch, row, col) != w.get(ch, row, col) {
                    changed.push((ch, PixelCoord::new(row, col)));
                }
            }
        }
    }
    let at_q = changed.iter().any(|&(ch, px)| px == q && (w.get(ch, q.row, q.col) - original.get(ch, q.row, q.col)).abs() > delta);
    let at_p = changed.iter().any(|&(ch, px)| {
        px == p && (w.get(ch, p.row, p.col) - original.get(ch, p.row, p.col)).abs() > reach_oracle(original, ch, p, eps)
    });
    changed.iter().all(|&(_, px)| px == p || px == q) && at_p && at_q
}

fn theorem_certificates() -> Outcome {
    let (delta, eps) = (8.0 / 255.0, 0.05);
    let fixture = Image::new(
        Shape::new(4, 4, 1),
        (0..16).map(|i| if i % 4 == 3 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let fc = theorem_witness(&fixture, delta, eps).map_err(|e| e.to_string())?;
    let fixture_ok = fc.verify(&fixture).unwrap() && oracle_accepts(&fixture, &fc.witness, delta, eps, fc.p, fc.q);

    let data = synth_dataset(1, 128, 16).unwrap();
    let certified = data
        .images
        .par_iter()
        .filter(|img| match theorem_witness(img, delta, eps) {
            Ok(c) => c.verify(img).unwrap() && oracle_accepts(img, &c.witness, delta, eps, c.p, c.q),
            Err(_) => false,
        })
        .count();
    let fraction = certified as f64 / data.len() as f64;

    let mut violations = classify_contrast(&fixture, delta, eps).unwrap().disjointness_violations;
    for e in [eps, 0.5, 1.0] {
        violations += contrast_scan(&data, delta, e, data.len(), 1).unwrap().disjointness_violations;
    }
    check(
        fixture_ok && fraction >= 0.95 && violations == 0,
        format!(
            "fixture certified: {fixture_ok}; synth {certified}/{} = {:.1}% certified; disjointness violations {violations}",
            data.len(),
            100.0 * fraction
        ),
    )
}

fn projection_algebra() -> Outcome {
    let mut r = rng(5);
    let shape = Shape::new(8, 8, 3);
    let mut failures = 0usize;
    for _ in 0..10_000 {
        let specs_params = [
            (
                ThreatSpec::Delta { linf_bound: r.gen_range(0.0..0.3) },
                LayerParams::Delta(DeltaParams {
                    shape,
                    delta: (0..shape.len()).map(|_| r.gen_range(-1.0..1.0)).collect(),
                }),
            ),
            (
                ThreatSpec::Affine {
                    max_angle: r.gen_range(0.0..0.5),
                    max_shift: r.gen_range(0.0..4.0),
                    max_log_scale: r.gen_range(0.0..0.3),
                },
                LayerParams::Affine(AffineParams {
                    angle: r.gen_range(-1.0..1.0),
                    shift_x: r.gen_range(-8.0..8.0),
                    shift_y: r.gen_range(-8.0..8.0),
                    scale: r.gen_range(0.3..3.0),
                }),
            ),
            (
                ThreatSpec::Flow { max_disp: r.gen_range(0.0..2.0) },
                LayerParams::Flow(FlowParams {
                    height: 8,
                    width: 8,
                    u: (0..64).map(|_| r.gen_range(-4.0..4.0)).collect(),
                    v: (0..64).map(|_| r.gen_range(-4.0..4.0)).collect(),
                }),
            ),
        ];
        for (spec, p) in &specs_params {
            let q = project(p, spec).unwrap();
            if !contains(&q, spec).unwrap() || project(&q, spec).unwrap() != q {
                failures += 1;
            }
        }
    }
    check(failures == 0, format!("3 x 10000 random params, {failures} failures"))
}

fn column(report: &MatrixReport, name: &str) -> usize {
    report.attacks.iter().position(|a| a == name).unwrap()
}

fn superset_monotonicity(report: &MatrixReport, elapsed: Duration) -> Outcome {
    let (d, f, c) = (column(report, "delta"), column(report, "stadv"), column(report, "delta+stadv"));
    let mut lines = Vec::new();
    let mut ok = elapsed < Duration::from_secs(30 * 60);
    for row in &report.rows {
        let bound = row.cells[d].min(row.cells[f]) + 0.005;
        ok &= row.cells[c] <= bound;
        lines.push(format!(
            "{}: combined {:.4} vs delta {:.4} / flow {:.4}",
            row.defense, row.cells[c], row.cells[d], row.cells[f]
        ));
    }
    check(ok, format!("{} samples, {elapsed:.1?}; {}", report.rows[0].suite.samples, lines.join("; ")))
}

fn defended(report: &MatrixReport, defense: &str, attack: &str) -> f64 {
    let row = report.rows.iter().find(|r| r.defense == defense).unwrap();
    row.suite.rows.iter().find(|s| s.attack == attack).unwrap().defended_accuracy
}

fn defense_trend(report: &MatrixReport) -> Outcome {
    let gd = defended(report, "delta-trained", "delta") - defended(report, "undefended", "delta");
    let gf = defended(report, "stadv-trained", "stadv") - defended(report, "undefended", "stadv");
    check(
        gd >= 0.10 && gf >= 0.10,
        format!("defended-accuracy gain: delta {:+.1} pts, flow {:+.1} pts", 100.0 * gd, 100.0 * gf),
    )
}

fn perceptual_trend(nets: &Nets) -> Outcome {
    let net = &nets.delta;
    let picks: Vec<usize> = (0..nets.eval.len())
        .filter(|&i| net.predict(&nets.eval.images[i]).unwrap() == nets.eval.labels[i])
        .take(120)
        .collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for metric in [PerceptualMetric::LpipsStyle, PerceptualMetric::Ssim] {
        let cfg = PerceptualConfig {
            metric,
            ..PerceptualConfig::default()
        };
        let pairs: Vec<(AttackResult, AttackResult)> = picks
            .par_iter()
            .map(|&i| perceptual_pair(net, &nets.eval.images[i], nets.eval.labels[i], &cfg).unwrap())
            .collect();
        let value = |r: &AttackResult| match metric {
            PerceptualMetric::LpipsStyle => r.metrics.lpips_style.unwrap(),
            PerceptualMetric::Ssim => 1.0 - r.metrics.ssim.unwrap(),
        };
        let both: Vec<_> = pairs.iter().filter(|(a, b)| a.success && b.success).collect();
        let n = both.len() as f64;
        let a = both.iter().map(|(a, _)| value(a)).sum::<f64>() / n;
        let b = both.iter().map(|(_, b)| value(b)).sum::<f64>() / n;
        ok &= both.len() >= 100 && b <= a;
        parts.push(format!("{metric:?}: {} successes, delta {a:.5} vs delta+flow {b:.5}", both.len()));
    }
    check(ok, parts.join("; "))
}

fn metric_axioms(net: &ConvNet) -> Outcome {
    let mut r = rng(9);
    let shape = net.input_shape();
    let mut worst_sym: f64 = 0.0;
    let mut reflexive = true;
    for _ in 0..1000 {
        let (x, y) = (random_image(&mut r, shape), random_image(&mut r, shape));
        for n in [Norm::L2, Norm::Linf] {
            reflexive &= lp_distance(&x, &x, n).unwrap() == 0.0;
            worst_sym = worst_sym.max((lp_distance(&x, &y, n).unwrap() - lp_distance(&y, &x, n).unwrap()).abs());
        }
        reflexive &= ssim(&x, &x).unwrap() == 1.0 && lpips_style(net, &x, &x).unwrap() == 0.0;
        worst_sym = worst_sym
            .max((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs())
            .max((lpips_style(net, &x, &y).unwrap() - lpips_style(net, &y, &x).unwrap()).abs());
    }
    let mut worst_const: f64 = 0.0;
    for _ in 0..200 {
        let (a, b): (f64, f64) = (r.gen_range(0.0..=1.0), r.gen_range(0.0..=1.0));
        let x = Image::filled(shape, a).unwrap();
        let y = Image::filled(shape, b).unwrap();
        let expected = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        worst_const = worst_const.max((ssim(&x, &y).unwrap() - expected).abs());
    }
    check(
        reflexive && worst_sym <= 1e-12 && worst_const <= 1e-9,
        format!("1000 pairs: reflexive {reflexive}, max asymmetry {worst_sym:.1e}; constant-image SSIM error {worst_const:.1e}"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    let mut full = vec!["advcompose"];
    full.extend_from_slice(args);
    main_with_args(full)
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn replay_matches(manifest: &Path, outputs: &[PathBuf], replay_out: &Path, replay_outputs: &[PathBuf]) -> bool {
    let code = run_cli(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", replay_out.to_str().unwrap()]);
    code == 0 && outputs.iter().zip(replay_outputs).all(|(a, b)| read(a) == read(b))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let p = |name: &str| d.join(name);
    let s = |path: &PathBuf| path.to_str().unwrap().to_string();
    let mut failed = Vec::new();

    let ckpt = p("net.ckpt");
    let mut codes = vec![run_cli(&[
        "train", "--data", "synth:1:20:16", "--epochs", "3", "--out", &s(&ckpt),
    ])];
    let img = synth_dataset(7, 1, 16).unwrap().images[0].clone();
    advcompose::imagecore::save_ppm(&img, p("x.ppm")).unwrap();
    codes.push(run_cli(&[
        "matrix", "--defenses", &format!("plain={}", s(&ckpt)), "--attacks", "identity,fgsm,delta+stadv",
        "--data", "synth:2:3:16", "--out", &s(&p("m.csv")),
    ]));
    codes.push(run_cli(&[
        "sweep", "--defense", &s(&ckpt), "--delta-grid", "0,4", "--flow-grid", "0,0.8", "--data", "synth:2:2:16",
        "--out", &s(&p("sw.csv")),
    ]));
    codes.push(run_cli(&["theorem", "--data", "synth:1:4:16", "--eps", "0.05", "--out", &s(&p("th.json"))]));
    codes.push(run_cli(&[
        "attack", "--input", &s(&p("x.ppm")), "--label", "0", "--ckpt", &s(&ckpt), "--attack", "delta+stadv",
        "--out", &s(&p("att")),
    ]));
    codes.push(run_cli(&["gradcheck", "--points", "3", "--out", &s(&p("gc.json"))]));
    if codes.iter().any(|&c| c != 0) {
        return Err(format!("cli exit codes {codes:?}"));
    }

    let cases: Vec<(&str, PathBuf, Vec<&str>, &str, Vec<&str>)> = vec![
        ("train", p("net.manifest.json"), vec!["net.ckpt", "net.log.csv"], "r_net.ckpt", vec!["r_net.ckpt", "r_net.log.csv"]),
        ("matrix", p("m.manifest.json"), vec!["m.csv", "m.json"], "r_m.csv", vec!["r_m.csv", "r_m.json"]),
        (
            "sweep",
            p("sw.manifest.json"),
            vec!["sw.csv", "sw.accuracy.pgm", "sw.lpips_style.pgm"],
            "r_sw.csv",
            vec!["r_sw.csv", "r_sw.accuracy.pgm", "r_sw.lpips_style.pgm"],
        ),
        ("theorem", p("th.manifest.json"), vec!["th.json", "th.scan.csv"], "r_th.json", vec!["r_th.json", "r_th.scan.csv"]),
        (
            "attack",
            p("att/manifest.json"),
            vec!["att/result.json", "att/perturbed.ppm", "att/diff.ppm"],
            "r_att",
            vec!["r_att/result.json", "r_att/perturbed.ppm", "r_att/diff.ppm"],
        ),
        ("gradcheck", p("gc.manifest.json"), vec!["gc.json"], "r_gc.json", vec!["r_gc.json"]),
    ];
    for (name, manifest, outs, replay_out, replay_outs) in &cases {
        let outs: Vec<PathBuf> = outs.iter().map(|o| p(o)).collect();
        let routs: Vec<PathBuf> = replay_outs.iter().map(|o| p(o)).collect();
        if !replay_matches(manifest, &outs, &p(replay_out), &routs) {
            failed.push(*name);
        }
    }
    check(
        failed.is_empty(),
        format!("{} subcommands replayed from manifests; mismatched: {failed:?}", cases.len()),
    )
}

fn main() {
    let t = Instant::now();
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 gradient suite", gradient_suite()));
    results.push(("2 quadrant closed form", closed_form_equivalence()));
    results.push(("3 flow reach bound", reach_bound()));
    results.push(("4 combined-threat certificates", theorem_certificates()));
    results.push(("5 projection algebra", projection_algebra()));

    let nets = train_nets();
    let attacks: Vec<_> = ["identity", "delta", "stadv", "delta+stadv"]
        .iter()
        .map(|a| builtin_attack(a).unwrap())
        .collect();
    let named = vec![
        ("undefended".to_string(), &nets.undefended),
        ("delta-trained".to_string(), &nets.delta),
        ("stadv-trained".to_string(), &nets.stadv),
    ];
    let m = Instant::now();
    let report = defense_matrix(&named, &nets.eval, &attacks).unwrap();
    let matrix_time = m.elapsed();
    print!("{}", report.to_csv());
    results.push(("6 superset monotonicity", superset_monotonicity(&report, matrix_time)));
    results.push(("7 defense trend", defense_trend(&report)));
    results.push(("8 perceptual trend", perceptual_trend(&nets)));
    results.push(("9 metric axioms", metric_axioms(&nets.undefended)));
    results.push(("10 manifest determinism", determinism()));

    let mut all = true;
    for (name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                all = false;
                println!("FAIL criterion {name}: {d}");
            }
        }
    }
    println!("acceptance finished in {:.1?}", t.elapsed());
    if !all {
        std::process::exit(1);
    }
}
