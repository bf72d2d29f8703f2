use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eeg_dcvit::analysis::{
    class_report, confusion_matrix, eeg_heatmap, error_scatter, high_confidence_select, Viewport,
};
use eeg_dcvit::dataio::{
    decode_checkpoint_contents, read_checkpoint, read_dataset, read_dataset_header, write_atomic, write_checkpoint,
    write_dataset, CHECKPOINT_MAGIC, DATASET_MAGIC,
};
use eeg_dcvit::model::{HeadMode, Model, ModelConfig};
use eeg_dcvit::preprocess::{fit_label_clusters, generate_synthetic, relabel, split_dataset, CentroidSet};
use eeg_dcvit::train::{
    argmax_rows, cluster_labels, multi_trial, predict_dataset, rmse_from_predictions, write_metrics_csv, LossKind,
    Splits,
};
use eeg_dcvit::{Dataset, Error};
use serde_json::json;

use crate::config::{self, RunConfig};
use crate::manifest::{derived, prefix_of, RunManifest};
use crate::{AnalyzeArgs, ClusterArgs, Command, EvalArgs, Head, InspectArgs, Preset, SynthArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String, std::io::Error),
    Lib(Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(path, e) => write!(f, "{path}: {e}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(..) => 3,
            CliError::Lib(e) if e.is_numeric() => 4,
            CliError::Lib(Error::InvalidConfig(_) | Error::InvalidArgument(_)) => 2,
            CliError::Lib(_) => 3,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Creates the directory an output path lives in.
fn ensure_parent(out: &Path) -> CliResult {
    match out.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))
        }
        _ => Ok(()),
    }
}

pub fn dispatch(command: Command, argv: &[String]) -> CliResult {
    let out = match &command {
        Command::Synth(a) => Some(&a.out),
        Command::Cluster(a) => Some(&a.out),
        Command::Train(a) => Some(&a.out),
        Command::Eval(a) => Some(&a.out),
        Command::Analyze(a) => Some(&a.out),
        Command::Inspect(_) => None,
    };
    if let Some(out) = out {
        ensure_parent(out)?;
    }
    match command {
        Command::Synth(a) => synth(a, argv),
        Command::Cluster(a) => cluster(a, argv),
        Command::Train(a) => train(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Analyze(a) => analyze(a, argv),
        Command::Inspect(a) => inspect(a),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn synth(a: SynthArgs, argv: &[String]) -> CliResult {
    let start = Instant::now();
    let mut cfg = config::load(a.config.config.as_deref())?;
    if let Some(n) = a.samples {
        cfg.synth.n_samples = n;
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let data = generate_synthetic(&cfg.synth)?;
    write_dataset(&a.out, &data.dataset)?;
    let mut m = RunManifest::new("synth", argv, cfg.clone());
    m.seeds = vec![cfg.synth.seed];
    m.outputs = vec![a.out.clone()];
    let manifest = m.write(&prefix_of(&a.out), start.elapsed())?;
    println!("wrote {} samples to {} ({})", data.dataset.len(), a.out.display(), manifest.display());
    Ok(())
}

fn fit_clusters(cfg: &RunConfig, fit_on: &Dataset, seed: u64) -> CliResult<CentroidSet> {
    let grid = cfg.synth.grid_targets();
    let known = if cfg.cluster.snap_grid {
        if cfg.cluster.k != grid.len() {
            return Err(CliError::Usage(format!(
                "--snap-grid needs k = {} (one centre per grid target), got {}",
                grid.len(),
                cfg.cluster.k
            )));
        }
        Some(grid.as_slice())
    } else {
        None
    };
    Ok(fit_label_clusters(fit_on, cfg.cluster.k, known, seed)?)
}

fn centroid_csv(c: &CentroidSet, data: &Dataset) -> String {
    let mut counts = vec![0usize; c.k()];
    for l in data.labels() {
        if let Some(id) = l.cluster_id {
            counts[id as usize] += 1;
        }
    }
    let mut s = String::from("cluster,x_px,y_px,count\n");
    for (i, (p, n)) in c.centroids.iter().zip(counts).enumerate() {
        writeln!(s, "{i},{},{},{n}", p[0], p[1]).unwrap();
    }
    s
}

fn cluster(a: ClusterArgs, argv: &[String]) -> CliResult {
    let start = Instant::now();
    let mut cfg = config::load(a.config.config.as_deref())?;
    if let Some(k) = a.k {
        cfg.cluster.k = k;
    }
    if let Some(s) = a.snap_grid {
        cfg.cluster.snap_grid = s.enabled();
    }
    let seed = a.seed.unwrap_or(cfg.train.seed);
    let data = read_dataset(&a.input)?;
    let centres = fit_clusters(&cfg, &data, seed)?;
    let out = relabel(&data, &centres);
    write_dataset(&a.out, &out)?;
    let prefix = prefix_of(&a.out);
    let csv = derived(&prefix, "centroids.csv");
    write_text(&csv, &centroid_csv(&centres, &out))?;
    let mut m = RunManifest::new("cluster", argv, cfg);
    m.seeds = vec![seed];
    m.inputs = vec![a.input];
    m.outputs = vec![a.out.clone(), csv];
    m.write(&prefix, start.elapsed())?;
    println!(
        "{} labels moved onto {} centres (inertia {:.1}, {} iterations) -> {}",
        out.len(),
        centres.k(),
        centres.inertia,
        centres.iterations_run,
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs, argv: &[String]) -> CliResult {
    let start = Instant::now();
    let mut cfg = config::load(a.config.config.as_deref())?;
    if let Some(p) = a.preset {
        cfg.model = match p {
            Preset::Full => ModelConfig::default(),
            Preset::Tiny => ModelConfig::tiny(),
        };
    }
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.learning_rate = v;
    }
    if let Some(v) = a.trials {
        t.trials = v;
    }
    if let Some(v) = a.k {
        cfg.cluster.k = v;
    }
    if let Some(v) = a.snap_grid {
        cfg.cluster.snap_grid = v.enabled();
    }
    if let Some(v) = a.clustered {
        cfg.clustered = v.enabled();
    }
    if let Some(v) = a.ds_block {
        cfg.model.ds_block = v.enabled();
    }
    match a.head {
        Some(Head::Classification) => cfg.model.head = HeadMode::Classification { classes: cfg.cluster.k },
        Some(Head::Regression) => cfg.model.head = HeadMode::Regression,
        None => {}
    }
    let classification = matches!(cfg.model.head, HeadMode::Classification { .. });
    if classification && !cfg.clustered {
        return Err(CliError::Usage("a classification head needs --clustered on".into()));
    }
    cfg.train.loss = if classification { LossKind::CrossEntropy } else { LossKind::Mse };

    let data = read_dataset(&a.input)?;
    cfg.model.channels = data.channels();
    cfg.model.timesteps = data.timesteps();
    cfg.model.validate().map_err(|e| match e {
        Error::Shape { detail, .. } => Error::InvalidConfig(format!(
            "model does not fit {}x{} windows: {detail}",
            data.channels(),
            data.timesteps()
        )),
        e => e,
    })?;
    cfg.train.validate()?;

    let [train, val, test] = split_dataset(&data, cfg.split.0, cfg.train.seed)?;
    let (train, val, test) = if cfg.clustered {
        let centres = fit_clusters(&cfg, &train, cfg.train.seed)?;
        // Test labels stay as recorded for regression; classification needs
        // a cluster id on every sample.
        let test = if classification { relabel(&test, &centres) } else { test };
        (relabel(&train, &centres), relabel(&val, &centres), test)
    } else {
        (train, val, test)
    };
    let splits = Splits {
        train: &train,
        val: &val,
        test: &test,
    };
    let (summary, runs) = multi_trial(&cfg.model, &splits, &cfg.train, cfg.train.seed)?;

    let prefix = prefix_of(&a.out);
    let mut outputs = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let path = if runs.len() == 1 {
            derived(&prefix, "metrics.csv")
        } else {
            derived(&prefix, &format!("trial{i}.metrics.csv"))
        };
        write_metrics_csv(&path, run)?;
        outputs.push(path);
    }
    let best_val = |i: usize| runs[i].records[runs[i].best_epoch - 1].val_score;
    let best_trial = (0..runs.len())
        .min_by(|&x, &y| best_val(x).total_cmp(&best_val(y)))
        .expect("at least one trial");
    let ckpt = derived(&prefix, "dcvt");
    write_checkpoint(&ckpt, &runs[best_trial].best_model)?;
    outputs.push(ckpt.clone());

    let metric = if classification { "test_error_rate" } else { "test_rmse_mm" };
    let summary_json = json!({
        "metric": metric,
        "mean": summary.mean,
        "std": summary.std,
        "per_trial": summary.per_trial,
        "seeds": summary.seeds,
        "best_epochs": runs.iter().map(|r| r.best_epoch).collect::<Vec<_>>(),
        "test_mean_distance_mm": runs.iter().map(|r| r.test.as_ref().map(|t| t.mean_distance_mm)).collect::<Vec<_>>(),
        "checkpoint_trial": best_trial,
        "split_sizes": [train.len(), val.len(), test.len()],
        "clustered": cfg.clustered,
        "ds_block": cfg.model.ds_block,
    });
    let summary_path = derived(&prefix, "summary.json");
    write_text(&summary_path, &serde_json::to_string_pretty(&summary_json).unwrap())?;
    outputs.push(summary_path);

    let mut m = RunManifest::new("train", argv, cfg);
    m.seeds = summary.seeds.clone();
    m.inputs = vec![a.input];
    m.outputs = outputs;
    m.write(&prefix, start.elapsed())?;
    println!(
        "{metric}: {:.4} ± {:.4} over {} trial(s); checkpoint {}",
        summary.mean,
        summary.std,
        summary.per_trial.len(),
        ckpt.display()
    );
    Ok(())
}

fn load_model(path: &Path, data: &Dataset) -> CliResult<Model> {
    let model = read_checkpoint(path, None)?;
    let c = model.config();
    if c.channels != data.channels() || c.timesteps != data.timesteps() {
        return Err(CliError::Lib(Error::InvalidArgument(format!(
            "checkpoint expects {}x{} windows, dataset has {}x{}",
            c.channels,
            c.timesteps,
            data.channels(),
            data.timesteps()
        ))));
    }
    Ok(model)
}

fn eval(a: EvalArgs, argv: &[String]) -> CliResult {
    let start = Instant::now();
    let cfg = config::load(a.config.config.as_deref())?;
    let data = read_dataset(&a.input)?;
    let model = load_model(&a.model, &data)?;
    let preds = predict_dataset(&model, &data, 64)?;
    let prefix = prefix_of(&a.out);
    let pred_path = derived(&prefix, "predictions.csv");
    let report = match model.config().head {
        HeadMode::Regression => {
            let all: Vec<usize> = (0..data.len()).collect();
            let r = rmse_from_predictions(preds.data(), &data.targets(&all), cfg.train.px_per_mm)?;
            let mut csv = String::from("pred_x,pred_y,label_x,label_y,distance_mm\n");
            for ((p, l), d) in preds.data().chunks(2).zip(data.labels()).zip(&r.distances_px) {
                writeln!(csv, "{},{},{},{},{}", p[0], p[1], l.x_px, l.y_px, d / cfg.train.px_per_mm).unwrap();
            }
            write_text(&pred_path, &csv)?;
            json!({ "n": data.len(), "rmse_mm": r.rmse_mm, "rmse_px": r.rmse_px, "mean_distance_mm": r.mean_distance_mm })
        }
        HeadMode::Classification { .. } => {
            let truth = cluster_labels(&data)?;
            let pred = argmax_rows(&preds);
            let mut csv = String::from("pred_class,true_class\n");
            for (p, t) in pred.iter().zip(&truth) {
                writeln!(csv, "{p},{t}").unwrap();
            }
            write_text(&pred_path, &csv)?;
            let wrong = pred.iter().zip(&truth).filter(|(p, t)| p != t).count();
            json!({ "n": data.len(), "error_rate": wrong as f64 / data.len() as f64 })
        }
    };
    let report_path = derived(&prefix, "eval.json");
    write_text(&report_path, &serde_json::to_string_pretty(&report).unwrap())?;
    let mut m = RunManifest::new("eval", argv, cfg);
    m.inputs = vec![a.input, a.model];
    m.outputs = vec![pred_path, report_path];
    m.write(&prefix, start.elapsed())?;
    println!("{report}");
    Ok(())
}

fn analyze(a: AnalyzeArgs, argv: &[String]) -> CliResult {
    let start = Instant::now();
    let cfg = config::load(a.config.config.as_deref())?;
    let data = read_dataset(&a.input)?;
    let model = load_model(&a.model, &data)?;
    let prefix = prefix_of(&a.out);
    let preds = predict_dataset(&model, &data, 64)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut emit = |suffix: &str, text: &str| -> CliResult {
        let p = derived(&prefix, suffix);
        write_text(&p, text)?;
        outputs.push(p);
        Ok(())
    };
    let (c, t) = (data.channels(), data.timesteps());
    match model.config().head {
        HeadMode::Regression => {
            let p: Vec<[f64; 2]> = preds.data().chunks(2).map(|r| [r[0], r[1]]).collect();
            let l = data.positions();
            let view = Viewport {
                width: cfg.synth.screen_w,
                height: cfg.synth.screen_h,
            };
            let s = error_scatter(&p, &l, a.threshold_mm, cfg.train.px_per_mm, view)?;
            emit("scatter.svg", &s.svg)?;
            emit("scatter.csv", &s.csv)?;
            println!("{} within {} mm (blue), {} beyond (red)", s.blue, a.threshold_mm, s.red);
            if !data.is_empty() {
                let sample: Vec<f64> = data.sample(0).iter().map(|&v| v as f64).collect();
                let h = eeg_heatmap(&sample, c, t)?;
                emit("heatmap0.svg", &h.svg)?;
                emit("heatmap0.csv", &h.csv)?;
            }
        }
        HeadMode::Classification { classes } => {
            let k = a.k.unwrap_or(classes);
            let truth = cluster_labels(&data)?;
            let pred = argmax_rows(&preds);
            let cm = confusion_matrix(&truth, &pred, k)?;
            emit("confusion.csv", &cm.to_csv())?;
            emit("report.csv", &class_report(&cm)?.to_csv())?;
            let confident = high_confidence_select(&preds, a.confidence)?;
            let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
            for s in confident.iter().take(8) {
                *per_class.entry(s.class).or_default() += 1;
                let sample: Vec<f64> = data.sample(s.index).iter().map(|&v| v as f64).collect();
                let h = eeg_heatmap(&sample, c, t)?;
                emit(&format!("heatmap{}_class{}.svg", s.index, s.class), &h.svg)?;
                emit(&format!("heatmap{}_class{}.csv", s.index, s.class), &h.csv)?;
            }
            println!(
                "confusion matrix over {} samples; {} predictions at p >= {}",
                cm.total(),
                confident.len(),
                a.confidence
            );
        }
    }
    let mut m = RunManifest::new("analyze", argv, cfg);
    m.inputs = vec![a.input, a.model];
    m.outputs = outputs;
    m.write(&prefix, start.elapsed())?;
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    let bytes = std::fs::read(&a.input).map_err(|e| CliError::Io(a.input.display().to_string(), e))?;
    let info = match bytes.get(..4) {
        Some(m) if m == DATASET_MAGIC => {
            let h = read_dataset_header(&bytes)?;
            let mut info = json!({
                "format": "EEGD",
                "version": h.version,
                "n_samples": h.n_samples,
                "channels": h.channels,
                "timesteps": h.timesteps,
                "bytes": bytes.len(),
            });
            if let Ok(d) = eeg_dcvit::dataio::decode_dataset(&bytes) {
                info["participants"] = json!(d.participants().len());
                info["clustered_labels"] = json!(d.labels().iter().filter(|l| l.cluster_id.is_some()).count());
            } else {
                info["valid"] = json!(false);
            }
            info
        }
        Some(m) if m == CHECKPOINT_MAGIC => {
            let c = decode_checkpoint_contents(&bytes)?;
            let tensors: Vec<_> = c.tensors.iter().map(|(n, t)| json!({ "name": n, "shape": t.shape() })).collect();
            json!({
                "format": "DCVT",
                "config": c.config,
                "tensors": c.tensors.len(),
                "values": c.tensors.values().map(|t| t.len()).sum::<usize>(),
                "records": tensors,
            })
        }
        _ => {
            return Err(CliError::Lib(Error::Data(eeg_dcvit::DataError::Malformed {
                offset: 0,
                detail: "neither a dataset nor a checkpoint".into(),
            })))
        }
    };
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&info).unwrap());
    Ok(())
}
