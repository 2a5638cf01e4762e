use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use elnet::data::{read_labels, Dataset, Orientation, SynthConfig, SynthDataset, Volume};
use elnet::model::param_audit;
use elnet::saliency::{fullgrad, most_informative_slice, write_heatmaps};
use elnet::train::{
    evaluate, grid_search, roc_curve, stratified_kfold, train_with_progress, write_leaderboard, Classifier,
    GridSpec, MetricsReport,
};
use elnet::{ElNet, Error, Result};
use serde::Serialize;

use crate::config::{DataConfig, RunConfig};

/// Output directory of one command plus its plain-text log.
pub struct RunDir {
    pub path: PathBuf,
    log: File,
}

impl RunDir {
    /// `<root>/<name>`; the root comes from the flag, then `ELNET_RUN_ROOT`,
    /// then `runs`. The name defaults to the command and a timestamp.
    pub fn create(root: Option<&Path>, name: Option<&str>, command: &str) -> Result<Self> {
        let root = root
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os("ELNET_RUN_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let name = name.map(str::to_string).unwrap_or_else(|| {
            let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
            format!("{command}-{}-{:09}", now.as_secs(), now.subsec_nanos())
        });
        let path = root.join(name);
        std::fs::create_dir_all(&path)?;
        let log = File::create(path.join("run.log"))?;
        Ok(RunDir { path, log })
    }

    pub fn log(&mut self, line: impl AsRef<str>) {
        let line = line.as_ref();
        eprintln!("{line}");
        // the log is best effort; a failed write must not abort the run
        let _ = writeln!(self.log, "{line}");
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        std::fs::write(self.file(name), serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }
}

fn load_dataset(dir: &Path, labels: Option<&Path>, orientation: Orientation) -> Result<Dataset> {
    if dir.join("manifest.json").is_file() && labels.is_none() {
        let d = SynthDataset::read(dir)?;
        if d.config.orientation != orientation {
            return Err(Error::InvalidArgument(format!(
                "dataset {} is {}, expected {}",
                dir.display(),
                d.config.orientation.as_str(),
                orientation.as_str()
            )));
        }
        return Ok(d.dataset);
    }
    let labels = read_labels(labels.map(Path::to_path_buf).unwrap_or_else(|| dir.join("labels.csv")))?;
    let volumes = if dir.join("volumes").is_dir() { dir.join("volumes") } else { dir.to_path_buf() };
    Dataset::read_dir(volumes, &labels, orientation)
}

fn require_dir(data: &DataConfig) -> Result<&Path> {
    data.dir
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("no dataset given (set data.dir or pass --data)".into()))
}

/// Training and validation sets as configured.
fn load_split(data: &DataConfig) -> Result<(Dataset, Dataset)> {
    let all = load_dataset(require_dir(data)?, data.labels.as_deref(), data.orientation)?;
    if let Some(val_dir) = &data.val_dir {
        let val = load_dataset(val_dir, data.val_labels.as_deref(), data.orientation)?;
        return Ok((all, val));
    }
    if !(data.val_fraction > 0.0 && data.val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("val_fraction {} outside (0, 1)", data.val_fraction)));
    }
    let k = (1.0 / data.val_fraction).round().max(2.0) as usize;
    let plan = stratified_kfold(&all.labels, &vec![0; all.len()], k, data.split_seed)?;
    let (train, val) = plan.split(0);
    Ok((all.subset(&train), all.subset(&val)))
}

fn write_roc(path: &Path, scores: &[f64], labels: &[u8]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    if let Ok(points) = roc_curve(scores, labels) {
        for (fpr, tpr, t) in points {
            w.write_record([fpr.to_string(), tpr.to_string(), t.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_scores(path: &Path, data: &Dataset, scores: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["exam_id", "label", "score"])?;
    for ((v, l), s) in data.volumes.iter().zip(&data.labels).zip(scores) {
        w.write_record([v.id.clone(), l.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn fmt_metric(r: &MetricsReport) -> String {
    let auc = r.roc_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into());
    format!("auc {auc} mcc {:.4} acc {:.4} sens {:.4} spec {:.4}", r.mcc, r.accuracy, r.sensitivity, r.specificity)
}

pub struct SynthArgs {
    pub n: usize,
    pub slices: usize,
    pub size: usize,
    pub lesion_rate: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(a.n, a.slices, a.size, a.lesion_rate, a.seed);
    let data = SynthDataset::generate(&cfg)?;
    data.write(&a.out)?;
    let positives = data.dataset.labels.iter().filter(|l| **l == 1).count();
    eprintln!("wrote {} exams ({positives} positive) to {}", a.n, a.out.display());
    Ok(())
}

fn train_one(
    run: &mut RunDir,
    cfg: &RunConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    prefix: &str,
) -> Result<(Classifier, MetricsReport, Vec<f64>)> {
    let net = ElNet::new(cfg.model.clone())?;
    run.log(format!("{prefix}model {} ({} parameters)", cfg.model, net.param_count()));
    run.log(format!("{prefix}{} training / {} validation exams", train_set.len(), val_set.len()));
    let result = train_with_progress(net, train_set, Some(val_set), &cfg.train, |e| {
        let val = e.val.as_ref().map(fmt_metric).unwrap_or_default();
        run.log(format!("{prefix}epoch {:>3} loss {:.5} {val}", e.epoch, e.train_loss));
    });
    let (clf, history) = result?;
    history.save_csv(run.file(&format!("{prefix}history.csv")))?;
    let meta = BTreeMap::from([
        ("train.seed".to_string(), cfg.train.seed.to_string()),
        ("train.epochs".to_string(), cfg.train.epochs.to_string()),
    ]);
    clf.save(run.file(&format!("{prefix}checkpoint.elnet")), &meta)?;
    let eval = evaluate(&clf, val_set, cfg.train.threshold)?;
    Ok((clf, eval.report, eval.scores))
}

pub fn train(run: &mut RunDir, cfg: &RunConfig) -> Result<()> {
    run.write_json("config.json", cfg)?;
    let (train_set, val_set) = load_split(&cfg.data)?;
    let (_, report, scores) = train_one(run, cfg, &train_set, &val_set, "")?;
    run.write_json("metrics.json", &report)?;
    write_roc(&run.file("roc.csv"), &scores, &val_set.labels)?;
    write_scores(&run.file("scores.csv"), &val_set, &scores)?;
    run.log(format!("validation: {}", fmt_metric(&report)));
    Ok(())
}

pub fn eval(run: &mut RunDir, cfg: &RunConfig, checkpoint: &Path) -> Result<()> {
    run.write_json("config.json", cfg)?;
    let clf = Classifier::load(checkpoint)?;
    let data = load_dataset(require_dir(&cfg.data)?, cfg.data.labels.as_deref(), cfg.data.orientation)?;
    let eval = evaluate(&clf, &data, cfg.train.threshold)?;
    run.write_json("metrics.json", &eval.report)?;
    write_roc(&run.file("roc.csv"), &eval.scores, &data.labels)?;
    write_scores(&run.file("scores.csv"), &data, &eval.scores)?;
    run.log(format!("{} exams: {}", data.len(), fmt_metric(&eval.report)));
    Ok(())
}

#[derive(Serialize)]
struct FoldRow {
    fold: String,
    exams: usize,
    auc: Option<f64>,
    mcc: f64,
    accuracy: f64,
    sensitivity: f64,
    specificity: f64,
}

impl FoldRow {
    fn new(fold: String, exams: usize, r: &MetricsReport) -> Self {
        FoldRow {
            fold,
            exams,
            auc: r.roc_auc,
            mcc: r.mcc,
            accuracy: r.accuracy,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
        }
    }
}

pub fn crossval(run: &mut RunDir, cfg: &RunConfig) -> Result<()> {
    run.write_json("config.json", cfg)?;
    let data = load_dataset(require_dir(&cfg.data)?, cfg.data.labels.as_deref(), cfg.data.orientation)?;
    let k = cfg.crossval.k;
    if k < 2 {
        return Err(Error::InvalidArgument("cross-validation needs k >= 2".into()));
    }
    let plan = stratified_kfold(&data.labels, &vec![0; data.len()], k, cfg.data.split_seed)?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for i in 0..k {
        let (train_idx, val_idx) = plan.split(i);
        let (train_set, val_set) = (data.subset(&train_idx), data.subset(&val_idx));
        let (_, report, scores) = train_one(run, cfg, &train_set, &val_set, &format!("fold{i}_"))?;
        run.write_json(&format!("fold{i}_metrics.json"), &report)?;
        write_roc(&run.file(&format!("fold{i}_roc.csv")), &scores, &val_set.labels)?;
        run.log(format!("fold {i}: {}", fmt_metric(&report)));
        rows.push(FoldRow::new(i.to_string(), val_set.len(), &report));
        reports.push(report);
    }
    let mean = MetricsReport::mean(&reports).expect("k >= 2");
    rows.push(FoldRow::new("mean".into(), data.len(), &mean));
    let mut w = csv::Writer::from_path(run.file("folds.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    run.write_json("summary.json", &mean)?;
    run.log(format!("mean over {k} folds: {}", fmt_metric(&mean)));
    Ok(())
}

pub fn grid(run: &mut RunDir, cfg: &RunConfig) -> Result<()> {
    run.write_json("config.json", cfg)?;
    let spec = cfg.grid.clone().unwrap_or_else(|| GridSpec::single(&cfg.model, &cfg.train));
    let (train_set, val_set) = load_split(&cfg.data)?;
    run.log(format!("grid of {} points", spec.points().len()));
    let result = grid_search(&cfg.model, &cfg.train, &spec, &train_set, &val_set)?;
    write_leaderboard(run.file("leaderboard.csv"), &result.leaderboard)?;
    for r in &result.leaderboard {
        let outcome = match &r.error {
            Some(e) => format!("failed: {e}"),
            None => format!("auc {:?} mcc {:?}", r.auc, r.mcc),
        };
        run.log(format!("#{} {:?} {outcome}", r.rank, r.point));
    }
    match result.best {
        Some((model, train)) => {
            let best = RunConfig {
                model,
                train,
                grid: None,
                ..cfg.clone()
            };
            run.write_json("best_config.json", &best)
        }
        None => Err(Error::InvalidArgument("every grid point failed".into())),
    }
}

/// Prints the audit table; `Ok(false)` when a row disagrees.
pub fn params(k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let rows = param_audit(k)?;
    let mut ok = true;
    println!("{:<28} {:<16} {:>10} {:>10}", "layer", "formula", "expected", "counted");
    for r in &rows {
        ok &= r.ok();
        let mark = if r.ok() { "" } else { "  MISMATCH" };
        println!("{:<28} {:<16} {:>10} {:>10}{mark}", r.layer, r.formula, r.expected, r.enumerated);
    }
    let expected: usize = rows.iter().map(|r| r.expected).sum();
    let counted: usize = rows.iter().map(|r| r.enumerated).sum();
    let closed = elnet::model::closed_form_param_count(k);
    ok &= counted == closed;
    println!("{:<28} {:<16} {:>10} {:>10}", "total", "13120K²+348K+2", expected, counted);
    println!("trainable parameters at K={k}: {}", group_thousands(counted));
    Ok(ok)
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub struct SaliencyArgs {
    pub checkpoint: PathBuf,
    pub volume: PathBuf,
    pub class: usize,
    pub orientation: Orientation,
    pub out: PathBuf,
}

pub fn saliency(a: SaliencyArgs) -> Result<()> {
    let clf = Classifier::load(&a.checkpoint)?;
    let volume = Volume::read(&a.volume, a.orientation)?;
    let input = clf.prepare(&volume)?;
    let mut heat = fullgrad(&clf.net, &input, a.class)?;
    // report at the volume's own resolution
    let (s, h, w) = (volume.slices(), volume.height(), volume.width());
    let net_dims = [clf.net.config().input[0], clf.net.config().input[1]];
    if net_dims != [h, w] {
        let v = Volume::new(volume.id.clone(), volume.orientation, heat.heat.clone())?;
        let mut resized = elnet::data::resize_volume(&v, [h, w])?.data;
        let max = resized.max_abs();
        if max > 0.0 {
            resized.data_mut().iter_mut().for_each(|x| *x /= max);
        }
        heat.heat = resized;
        heat.slice_scores = heat.heat.data().chunks(h * w).map(|p| p.iter().map(|x| *x as f64).sum()).collect();
    }
    debug_assert_eq!(heat.heat.dims(), &[s, h, w]);
    let files = write_heatmaps(&heat, &a.out)?;
    eprintln!(
        "wrote {} heat-map slices to {}; most informative slice {}",
        files.len(),
        a.out.display(),
        most_informative_slice(&heat)
    );
    Ok(())
}
