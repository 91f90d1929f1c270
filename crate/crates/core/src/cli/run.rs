use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    load_data, resolve_attack, sibling, AttackArgs, CliError, CliResult, Command, GradcheckArgs, MatrixArgs,
    SweepArgs, TheoremArgs, TrainArgs, EXIT_CHECK, EXIT_OK,
};
use crate::attacks::{defense_matrix, run_attack, strength_sweep, AttackConfig};
use crate::classifier::{adversarial_train, load_checkpoint, save_checkpoint, train, ConvNet, TrainConfig};
use crate::error::Error;
use crate::gradcheck::run_gradcheck;
use crate::imagecore::{diff_image, load_ppm, save_ppm, Image, LabeledDataset, Shape};
use crate::sig6;
use crate::theory::{contrast_scan, theorem_witness, TheoremCertificate};

pub const TOOL: &str = "advcompose";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: String,
    pub limit: Option<usize>,
    pub config: TrainConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedPath {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRun {
    pub defenses: Vec<NamedPath>,
    pub attacks: Vec<AttackConfig>,
    pub data: String,
    pub limit: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub defense: PathBuf,
    /// 0-255 scale.
    pub delta_grid: Vec<f64>,
    /// Pixels.
    pub flow_grid: Vec<f64>,
    pub attack: AttackConfig,
    pub data: String,
    pub limit: Option<usize>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TheoremSource {
    Image(PathBuf),
    Data(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremRun {
    pub source: TheoremSource,
    /// 0-255 scale.
    pub delta: f64,
    pub eps_pixels: f64,
    pub samples: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRun {
    pub input: PathBuf,
    pub label: usize,
    pub ckpt: PathBuf,
    pub attack: AttackConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRun {
    pub seed: u64,
    pub points: usize,
    pub corrupt: Option<String>,
    pub out: Option<PathBuf>,
}

/// A fully resolved invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Run {
    Train(TrainRun),
    Matrix(MatrixRun),
    Sweep(SweepRun),
    Theorem(TheoremRun),
    Attack(AttackRun),
    Gradcheck(GradcheckRun),
}

impl Run {
    fn seed(&self) -> u64 {
        match self {
            Run::Train(r) => r.config.seed,
            Run::Matrix(r) => r.attacks.first().map_or(0, |a| a.seed),
            Run::Sweep(r) => r.attack.seed,
            Run::Theorem(r) => r.seed,
            Run::Attack(r) => r.attack.seed,
            Run::Gradcheck(r) => r.seed,
        }
    }

    pub fn out(&self) -> Option<&Path> {
        match self {
            Run::Train(r) => Some(&r.out),
            Run::Matrix(r) => Some(&r.out),
            Run::Sweep(r) => Some(&r.out),
            Run::Theorem(r) => Some(&r.out),
            Run::Attack(r) => Some(&r.out),
            Run::Gradcheck(r) => r.out.as_deref(),
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Run::Train(r) => r.out = out,
            Run::Matrix(r) => r.out = out,
            Run::Sweep(r) => r.out = out,
            Run::Theorem(r) => r.out = out,
            Run::Attack(r) => r.out = out,
            Run::Gradcheck(r) => r.out = Some(out),
        }
    }

    pub fn manifest_path(&self) -> Option<PathBuf> {
        match self {
            Run::Attack(r) => Some(r.out.join("manifest.json")),
            _ => self.out().map(|o| sibling(o, ".manifest.json")),
        }
    }

    fn outputs(&self) -> Vec<PathBuf> {
        match self {
            Run::Train(r) => vec![r.out.clone(), sibling(&r.out, ".log.csv")],
            Run::Matrix(r) => vec![r.out.clone(), sibling(&r.out, ".json")],
            Run::Sweep(r) => vec![
                r.out.clone(),
                sibling(&r.out, ".accuracy.pgm"),
                sibling(&r.out, ".lpips_style.pgm"),
            ],
            Run::Theorem(r) => vec![r.out.clone(), sibling(&r.out, ".scan.csv")],
            Run::Attack(r) => vec![
                r.out.join("perturbed.ppm"),
                r.out.join("diff.ppm"),
                r.out.join("result.json"),
            ],
            Run::Gradcheck(r) => r.out.iter().cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub run: Run,
    pub outputs: Vec<PathBuf>,
    /// Facts known only after the run, e.g. heatmap value ranges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(run: Run) -> Self {
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: run.seed(),
            outputs: run.outputs(),
            run,
            results: None,
        }
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read manifest '{}': {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("bad manifest '{}': {e}", path.display())))
    }

    fn write(&self) -> CliResult<()> {
        if let Some(p) = self.run.manifest_path() {
            write_text(&p, &pretty(self))?;
        }
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn load_net(path: &Path) -> CliResult<ConvNet> {
    load_checkpoint(path).map_err(|e| CliError::data(format!("cannot load checkpoint '{}': {e}", path.display())))
}

fn check_shapes(net: &ConvNet, data: &LabeledDataset) -> CliResult<()> {
    use crate::classifier::Classifier;
    let shape = data.shape().ok_or_else(|| CliError::data("dataset is empty"))?;
    if shape != net.input_shape() || data.num_classes != net.num_classes() {
        return Err(CliError::data(format!(
            "data ({shape}, {} classes) does not match the network ({}, {} classes)",
            data.num_classes,
            net.input_shape(),
            net.num_classes()
        )));
    }
    Ok(())
}

pub(super) fn dispatch(cmd: Command) -> CliResult<i32> {
    let run = match cmd {
        Command::Replay(a) => {
            let mut m = RunManifest::load(&a.manifest)?;
            if let Some(out) = a.out {
                m.run.set_out(out);
            }
            m.run
        }
        Command::Train(a) => resolve_train(a)?,
        Command::Matrix(a) => resolve_matrix(a)?,
        Command::Sweep(a) => resolve_sweep(a)?,
        Command::Theorem(a) => resolve_theorem(a)?,
        Command::Attack(a) => resolve_single_attack(a)?,
        Command::Gradcheck(a) => resolve_gradcheck(a)?,
    };
    execute(run)
}

fn resolve_train(a: TrainArgs) -> CliResult<Run> {
    let mut config = match (&a.config, &a.adversarial) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config(format!("cannot read config '{}': {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("bad config '{}': {e}", p.display())))?
        }
        (None, Some(spec)) => TrainConfig::hardening(resolve_attack(spec)?),
        (None, None) => TrainConfig::default(),
    };
    if let (Some(_), Some(spec)) = (&a.config, &a.adversarial) {
        let attack = TrainConfig::hardening(resolve_attack(spec)?).adversarial;
        config.adversarial = attack;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.lr {
        config.learning_rate = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(adv) = config.adversarial.as_mut() {
        if let Some(m) = a.mix {
            adv.mix = m;
        }
        if let Some(n) = a.adv_iterations {
            adv.attack = adv.attack.clone().with_iterations(n, n);
        }
    }
    config.validate()?;
    Ok(Run::Train(TrainRun {
        data: a.data,
        limit: a.limit,
        config,
        out: a.out,
    }))
}

fn resolve_matrix(a: MatrixArgs) -> CliResult<Run> {
    let defenses = a
        .defenses
        .iter()
        .map(|d| match d.split_once('=') {
            Some((n, p)) => NamedPath {
                name: n.to_string(),
                path: PathBuf::from(p),
            },
            None => NamedPath {
                name: Path::new(d).file_stem().map_or(d.clone(), |s| s.to_string_lossy().into_owned()),
                path: PathBuf::from(d),
            },
        })
        .collect();
    let attacks = a.attacks.iter().map(|s| resolve_attack(s)).collect::<CliResult<Vec<_>>>()?;
    Ok(Run::Matrix(MatrixRun {
        defenses,
        attacks,
        data: a.data,
        limit: a.limit,
        out: a.out,
    }))
}

fn resolve_sweep(a: SweepArgs) -> CliResult<Run> {
    if a.delta_grid.is_empty() || a.flow_grid.is_empty() {
        return Err(CliError::config("sweep grids must be non-empty"));
    }
    Ok(Run::Sweep(SweepRun {
        defense: a.defense,
        delta_grid: a.delta_grid,
        flow_grid: a.flow_grid,
        attack: resolve_attack(&a.attack)?,
        data: a.data,
        limit: a.limit,
        out: a.out,
    }))
}

fn resolve_theorem(a: TheoremArgs) -> CliResult<Run> {
    let source = match (a.image, a.data) {
        (Some(p), None) => TheoremSource::Image(p),
        (None, d) => TheoremSource::Data(d.unwrap_or_else(|| "synth:1:128:16".into())),
        (Some(_), Some(_)) => return Err(CliError::config("--image and --data are exclusive")),
    };
    if !(a.delta > 0.0 && a.delta.is_finite()) || !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(CliError::config("--delta and --eps must be positive"));
    }
    Ok(Run::Theorem(TheoremRun {
        source,
        delta: a.delta,
        eps_pixels: a.eps,
        samples: a.samples,
        seed: a.seed,
        out: a.out,
    }))
}

fn resolve_single_attack(a: AttackArgs) -> CliResult<Run> {
    Ok(Run::Attack(AttackRun {
        input: a.input,
        label: a.label,
        ckpt: a.ckpt,
        attack: resolve_attack(&a.attack)?,
        out: a.out,
    }))
}

fn resolve_gradcheck(a: GradcheckArgs) -> CliResult<Run> {
    Ok(Run::Gradcheck(GradcheckRun {
        seed: a.seed,
        points: a.points,
        corrupt: a.corrupt,
        out: a.out,
    }))
}

/// Writes the manifest, then runs. Returns the exit code.
pub fn execute(run: Run) -> CliResult<i32> {
    let mut manifest = RunManifest::new(run.clone());
    manifest.write()?;
    match run {
        Run::Train(r) => exec_train(&r),
        Run::Matrix(r) => exec_matrix(&r),
        Run::Sweep(r) => {
            let ranges = exec_sweep(&r)?;
            manifest.results = Some(ranges);
            manifest.write()?;
            Ok(EXIT_OK)
        }
        Run::Theorem(r) => exec_theorem(&r),
        Run::Attack(r) => exec_attack(&r),
        Run::Gradcheck(r) => exec_gradcheck(&r),
    }
}

fn exec_train(r: &TrainRun) -> CliResult<i32> {
    let data = load_data(&r.data, r.limit)?;
    let shape = data.shape().ok_or_else(|| CliError::data("dataset is empty"))?;
    let mut net = ConvNet::new(shape, data.num_classes, r.config.seed)?;
    let report = if r.config.adversarial.is_some() {
        adversarial_train(&mut net, &data, &r.config)?
    } else {
        train(&mut net, &data, &r.config)?
    };
    save_checkpoint(&net, &r.out)?;
    let mut log = String::from("epoch,mean_loss,train_accuracy\n");
    for e in &report.epochs {
        log.push_str(&format!("{},{},{}\n", e.epoch, sig6(e.mean_loss), sig6(e.train_accuracy)));
    }
    write_text(&sibling(&r.out, ".log.csv"), &log)?;
    println!(
        "trained {} epochs on {} samples: train accuracy {}",
        report.epochs.len(),
        data.len(),
        sig6(report.final_accuracy)
    );
    Ok(EXIT_OK)
}

fn exec_matrix(r: &MatrixRun) -> CliResult<i32> {
    let data = load_data(&r.data, r.limit)?;
    let nets = r.defenses.iter().map(|d| load_net(&d.path)).collect::<CliResult<Vec<_>>>()?;
    for n in &nets {
        check_shapes(n, &data)?;
    }
    let named: Vec<(String, &ConvNet)> = r.defenses.iter().zip(&nets).map(|(d, n)| (d.name.clone(), n)).collect();
    let report = defense_matrix(&named, &data, &r.attacks)?;
    let csv = report.to_csv();
    write_text(&r.out, &csv)?;
    write_text(&sibling(&r.out, ".json"), &pretty(&report))?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn heatmap(values: &[f64], rows: usize, cols: usize, path: &Path) -> CliResult<serde_json::Value> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let data = values
        .iter()
        .map(|v| if span > 0.0 { (v - min) / span } else { 0.0 })
        .collect();
    let img = Image::from_clamped(Shape::new(rows, cols, 1), data)?;
    save_ppm(&img, path)?;
    Ok(serde_json::json!({ "path": path, "min": min, "max": max }))
}

fn exec_sweep(r: &SweepRun) -> CliResult<serde_json::Value> {
    let data = load_data(&r.data, r.limit)?;
    let net = load_net(&r.defense)?;
    check_shapes(&net, &data)?;
    let deltas: Vec<f64> = r.delta_grid.iter().map(|d| d / 255.0).collect();
    let report = strength_sweep(&net, &data, &r.attack, &deltas, &r.flow_grid)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), sig6);
    let mut csv = String::from(
        "delta_255,delta,flow_px,accuracy,defended_accuracy,mean_linf,mean_l2,mean_one_minus_ssim,mean_lpips_style\n",
    );
    for (k, c) in report.cells.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            sig6(r.delta_grid[k / r.flow_grid.len()]),
            sig6(c.delta),
            sig6(c.flow),
            sig6(c.accuracy),
            sig6(c.defended_accuracy),
            sig6(c.mean_linf),
            sig6(c.mean_l2),
            opt(c.mean_one_minus_ssim),
            opt(c.mean_lpips_style)
        ));
    }
    write_text(&r.out, &csv)?;
    let (rows, cols) = (r.delta_grid.len(), r.flow_grid.len());
    let acc: Vec<f64> = report.cells.iter().map(|c| c.accuracy).collect();
    let lp: Vec<f64> = report.cells.iter().map(|c| c.mean_lpips_style.unwrap_or(0.0)).collect();
    let a = heatmap(&acc, rows, cols, &sibling(&r.out, ".accuracy.pgm"))?;
    let l = heatmap(&lp, rows, cols, &sibling(&r.out, ".lpips_style.pgm"))?;
    print!("{csv}");
    Ok(serde_json::json!({ "heatmaps": { "accuracy": a, "lpips_style": l } }))
}

#[derive(Serialize)]
struct WitnessEntry {
    image_index: usize,
    witness: Option<TheoremCertificate>,
    reason: Option<String>,
}

#[derive(Serialize)]
struct TheoremOutput {
    delta_255: f64,
    delta: f64,
    eps_pixels: f64,
    /// Per-quadrant fraction used by the contrast conditions: `min(eps_pixels, 1)`.
    eps: f64,
    images: usize,
    certified: usize,
    all_have_both: bool,
    disjointness_violations: usize,
    results: Vec<WitnessEntry>,
}

fn exec_theorem(r: &TheoremRun) -> CliResult<i32> {
    let delta = r.delta / 255.0;
    let eps = r.eps_pixels.min(1.0);
    let data = match &r.source {
        TheoremSource::Image(p) => {
            let img = load_ppm(p).map_err(|e| CliError::data(format!("cannot load image '{}': {e}", p.display())))?;
            LabeledDataset::new(vec![img], vec![0], 1)?
        }
        TheoremSource::Data(spec) => load_data(spec, None)?,
    };
    let count = r.samples.unwrap_or(data.len().min(384));
    let scan = contrast_scan(&data, delta, eps, count, r.seed)?;
    let results = scan
        .rows
        .iter()
        .map(|row| match theorem_witness(&data.images[row.image_index], delta, eps) {
            Ok(c) => Ok(WitnessEntry {
                image_index: row.image_index,
                witness: Some(c),
                reason: None,
            }),
            Err(Error::NoWitness(m)) => Ok(WitnessEntry {
                image_index: row.image_index,
                witness: None,
                reason: Some(m),
            }),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let out = TheoremOutput {
        delta_255: r.delta,
        delta,
        eps_pixels: r.eps_pixels,
        eps,
        images: results.len(),
        certified: results.iter().filter(|e| e.witness.is_some()).count(),
        all_have_both: scan.all_have_both,
        disjointness_violations: scan.disjointness_violations,
        results,
    };
    write_text(&r.out, &pretty(&out))?;
    write_text(&sibling(&r.out, ".scan.csv"), &scan.to_csv())?;
    println!(
        "{} of {} images certified; disjointness violations: {}",
        out.certified, out.images, out.disjointness_violations
    );
    Ok(EXIT_OK)
}

fn exec_attack(r: &AttackRun) -> CliResult<i32> {
    let x = load_ppm(&r.input).map_err(|e| CliError::data(format!("cannot load image '{}': {e}", r.input.display())))?;
    let net = load_net(&r.ckpt)?;
    let result = run_attack(&net, &x, r.label, &r.attack)?;
    std::fs::create_dir_all(&r.out).map_err(|e| Error::io(&r.out, e))?;
    save_ppm(&result.perturbed, r.out.join("perturbed.ppm"))?;
    save_ppm(&diff_image(&x, &result.perturbed, 5.0)?, r.out.join("diff.ppm"))?;
    write_text(&r.out.join("result.json"), &pretty(&result))?;
    println!(
        "{}: success={} predicted={} loss={} iterations={}",
        result.attack,
        result.success,
        result.predicted,
        sig6(result.final_loss),
        result.iterations
    );
    Ok(EXIT_OK)
}

fn exec_gradcheck(r: &GradcheckRun) -> CliResult<i32> {
    let report = run_gradcheck(r.seed, r.points, r.corrupt.as_deref())?;
    println!("{:<16} {:>14} {:>10}  status", "op", "max_rel_error", "tolerance");
    for o in &report.ops {
        println!(
            "{:<16} {:>14.3e} {:>10.0e}  {}",
            o.op,
            o.max_rel_error,
            o.tolerance,
            if o.passed { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &r.out {
        write_text(out, &pretty(&report))?;
    }
    if report.passed {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient check failed: {}", report.failing().join(", "));
        Ok(EXIT_CHECK)
    }
}
