use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::{json, Value};

use ibit::convattn::GridGeometry;
use ibit::data::{load_idx, synth_train_test, write_idx, LabeledImageSet, SYNTH_SEED};
use ibit::explain::{attention_rollout, diagonal_mass_fraction, export_heatmap, export_mask_evolution, HeatmapFiles};
use ibit::linalg::Matrix;
use ibit::mask::{
    compose_mask, gaussian_attention_target, roll_rows, train_mask_weights, GaussianTargetSpec, MaskTrainConfig,
    DEFAULT_FILTER_SIZE, DEFAULT_MASK_EPOCHS, DEFAULT_MASK_LR,
};
use ibit::model::{evaluate, train as train_model, Model, ModelCheckpoint, TrainConfig, TrainEvent, Variant};
use ibit::verify::{equivalence_suite, rank_suite};

use crate::logging::Logger;
use crate::output::{io_err, write_file, Manifest};
use crate::{parse_list, parse_variant, require_dir, CliError, CliResult, GlobalArgs};

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
const CHECKPOINT_DIR: &str = "checkpoints";
const CHECKPOINT_EXT: &str = "ibck";

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 8)]
    pub max_grid: usize,
    /// Comma-separated filter sizes.
    #[arg(long, default_value = "1,2,3")]
    pub filters: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Also write report.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn verify_equivalence(a: VerifyArgs, g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    let filters: Vec<usize> = parse_list(&a.filters, "filter size")?;
    let seed = g.seed.unwrap_or(0);
    log.config(
        "verify-equivalence",
        json!({ "max_grid": a.max_grid, "filters": filters, "trials": a.trials, "seed": seed }),
    );
    let eq = equivalence_suite(a.max_grid, &filters, a.trials, seed).map_err(usage)?;
    let ranks = rank_suite(a.max_grid, &filters, seed).map_err(usage)?;
    let mut failures = 0;
    for c in &eq {
        let status = if c.passed() { "ok" } else { "FAIL" };
        failures += usize::from(!c.passed());
        println!(
            "equivalence trial={} grid={}x{} f={} max_error={:e} {status}",
            c.trial, c.height, c.width, c.filter_size, c.max_error
        );
    }
    for c in &ranks {
        let status = if c.passed() { "ok" } else { "FAIL" };
        failures += usize::from(!c.passed());
        println!(
            "rank grid={}x{} f={} rolled_rank={} (<= {}) circular_rank={} {status}",
            c.height,
            c.width,
            c.filter_size,
            c.rolled_rank,
            c.filter_size * c.filter_size,
            c.circular_rank
        );
    }
    let worst = eq.iter().map(|c| c.max_error).fold(0.0, f64::max);
    println!(
        "summary equivalence_cases={} rank_cases={} worst_error={worst:e} failures={failures}",
        eq.len(),
        ranks.len()
    );
    if let Some(out) = &a.out {
        require_dir(out)?;
        let mut manifest = Manifest::new(out);
        let report = json!({ "equivalence": eq, "rank": ranks, "failures": failures });
        write_file(&out.join("report.json"), pretty(&report), &mut manifest)?;
        manifest.write("verify-equivalence")?;
    }
    if failures > 0 {
        return Err(CliError::Failed(format!("{failures} case(s) failed")));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Grid height (and width unless --width is given).
    #[arg(long, default_value_t = 7)]
    pub grid: usize,
    #[arg(long)]
    pub width: Option<usize>,
    /// Filter size the mask emulates.
    #[arg(long, default_value_t = DEFAULT_FILTER_SIZE)]
    pub filter: usize,
    /// Gaussian width in grid units (default: filter / 2).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Factor rank (default: filter²).
    #[arg(long)]
    pub fidelity: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MASK_EPOCHS)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_MASK_LR)]
    pub lr: f64,
    /// Stop once the MSE is below this; 0 disables early stopping.
    #[arg(long, default_value_t = 0.0)]
    pub early_stop: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn pretrain_mask(a: PretrainArgs, g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    let geom = GridGeometry::new(a.grid, a.width.unwrap_or(a.grid)).map_err(usage)?;
    let spec = GaussianTargetSpec {
        geom,
        sigma: a.sigma.unwrap_or(a.filter as f64 / 2.0),
        window: None,
    };
    let cfg = MaskTrainConfig {
        mask_fidelity: a.fidelity.unwrap_or(a.filter * a.filter),
        epochs: a.epochs,
        lr: a.lr,
        seed: g.seed.unwrap_or(0),
        early_stop: (a.early_stop > 0.0).then_some(a.early_stop),
    };
    log.config("pretrain-mask", json!({ "target": spec, "training": cfg }));
    let fit = train_mask_weights(&spec, &cfg).map_err(usage)?;
    require_dir(&a.out)?;
    let mut manifest = Manifest::new(&a.out);

    let mask_path = a.out.join("mask.ibmk");
    fit.pair.save(&mask_path)?;
    manifest.add(&mask_path);
    let composed = compose_mask(&fit.pair);
    let target = gaussian_attention_target(&spec)?;
    add_heatmap(&mut manifest, export_heatmap(&composed, &a.out.join("mask"))?);
    add_heatmap(&mut manifest, export_heatmap(&target, &a.out.join("target"))?);
    add_heatmap(&mut manifest, export_heatmap(&fit.pair.rolled_product(), &a.out.join("mask_rolled"))?);
    add_heatmap(&mut manifest, export_heatmap(&roll_rows(&target)?, &a.out.join("target_rolled"))?);

    let mut csv = String::from("iteration,mse\n");
    for (i, m) in fit.history.iter().enumerate() {
        writeln!(csv, "{i},{m}").expect("writing to a String");
    }
    write_file(&a.out.join("loss.csv"), csv, &mut manifest)?;

    let diag = diagonal_mass_fraction(&composed, geom, a.filter as f64)?;
    let summary = json!({
        "iterations": fit.history.len(),
        "initial_mse": fit.initial_mse,
        "final_mse": fit.final_mse,
        "diagonal_mass": diag,
    });
    write_file(&a.out.join("summary.json"), pretty(&summary), &mut manifest)?;
    manifest.write("pretrain-mask")?;
    log.event("done", summary);
    println!(
        "final_mse={:e} iterations={} diagonal_mass={diag:.4}",
        fit.final_mse,
        fit.history.len()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// JSON file with TrainConfig fields; unset fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "ibit")]
    pub variant: String,
    /// Directory with MNIST-named IDX files.
    #[arg(long)]
    pub data: PathBuf,
    /// Share of the training set to use, in (0, 1].
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train(a: TrainArgs, g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    let variant = parse_variant(&a.variant)?;
    let (train_set, test_set) = load_data(&a.data)?;
    let overrides = Overrides {
        seed: g.seed,
        fraction: a.fraction,
        epochs: a.epochs,
        lr: a.lr,
    };
    let cfg = resolve_config(a.config.as_deref(), &train_set, test_set.as_ref(), &overrides)?;
    log.config(
        "train",
        json!({ "variant": variant.to_string(), "data": a.data, "train_config": cfg }),
    );
    let ck_dir = a.out.join(CHECKPOINT_DIR);
    require_dir(&ck_dir)?;
    let mut manifest = Manifest::new(&a.out);
    write_file(&a.out.join("config.json"), cfg.to_json() + "\n", &mut manifest)?;

    let mut model = Model::new(&cfg, variant)?;
    let mut last: Option<ModelCheckpoint> = None;
    let mut saved = Vec::new();
    let report = train_model(&mut model, &train_set, test_set.as_ref(), |ev| {
        match ev {
            TrainEvent::Step(s) => log.step(s.step, s.epoch, s.loss, s.lr),
            TrainEvent::Epoch {
                epoch,
                model,
                history,
                rng,
            } => {
                if let Some(m) = history.last() {
                    log.event("epoch", serde_json::to_value(m).expect("metrics serialize"));
                }
                let ck = ModelCheckpoint::capture(model, epoch, history, Some(rng));
                let path = ck_dir.join(format!("epoch_{epoch:04}.{CHECKPOINT_EXT}"));
                ck.save(&path)?;
                saved.push(path);
                last = Some(ck);
            }
        }
        Ok(())
    })?;
    for p in saved {
        manifest.add(p);
    }
    let final_ck = last.expect("train emits epoch 0");
    let model_path = a.out.join(format!("model.{CHECKPOINT_EXT}"));
    final_ck.save(&model_path)?;
    manifest.add(&model_path);
    let metrics = json!({
        "variant": variant.to_string(),
        "train_size": report.train_size,
        "steps": report.steps,
        "history": report.history,
    });
    write_file(&a.out.join("metrics.json"), pretty(&metrics), &mut manifest)?;
    manifest.write("train")?;
    if let Some(m) = report.history.last() {
        println!(
            "epoch={} train_loss={:.4} train_acc={:.4} test_acc={}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.test_acc.map_or("n/a".into(), |t| format!("{t:.4}"))
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Which IDX pair to score: train or test.
    #[arg(long, default_value = "test")]
    pub split: String,
}

pub fn eval(a: EvalArgs, _g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    log.config("eval", json!({ "ckpt": a.ckpt, "data": a.data, "split": a.split }));
    let ck = ModelCheckpoint::load(&a.ckpt)?;
    let set = load_split(&a.data, &a.split)?;
    let acc = evaluate(&ck.model, &set)?;
    log.event("eval", json!({ "accuracy": acc, "items": set.len(), "epoch": ck.epoch }));
    println!("accuracy={acc:.6} items={}", set.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Binary (P5) or ASCII (P2) PGM image.
    #[arg(long, conflicts_with = "index")]
    pub image: Option<PathBuf>,
    /// Item of the dataset split given by --data/--split.
    #[arg(long, requires = "data")]
    pub index: Option<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn explain(a: ExplainArgs, _g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    log.config(
        "explain",
        json!({ "ckpt": a.ckpt, "image": a.image, "index": a.index, "data": a.data, "split": a.split }),
    );
    let ck = ModelCheckpoint::load(&a.ckpt)?;
    let (image, label) = match (&a.image, a.index) {
        (Some(path), None) => (read_pgm(path)?, None),
        (None, Some(i)) => {
            let set = load_split(a.data.as_ref().expect("clap enforces --data"), &a.split)?;
            let img = set
                .images()
                .get(i)
                .ok_or_else(|| CliError::Usage(format!("index {i} out of range for {} items", set.len())))?;
            (img.clone(), Some(set.labels()[i]))
        }
        _ => return Err(CliError::Usage("give exactly one of --image or --index".into())),
    };
    let s = ck.model.config().image_size;
    if image.shape() != (s, s) {
        return Err(CliError::Failed(format!(
            "image is {:?}, model expects {s}x{s}",
            image.shape()
        )));
    }
    let fwd = ck.model.forward(&[&image])?;
    let map = attention_rollout(&fwd.traces, ck.model.geometry(), 0)?;
    let prediction = argmax(fwd.logits.row(0));
    require_dir(&a.out)?;
    let mut manifest = Manifest::new(&a.out);
    add_heatmap(&mut manifest, export_heatmap(&map.values, &a.out.join("rollout"))?);
    add_heatmap(&mut manifest, export_heatmap(&image, &a.out.join("input"))?);
    let (pi, pj) = map.argmax();
    let summary = json!({
        "prediction": prediction,
        "label": label,
        "peak_patch": [pi, pj],
        "logits": fwd.logits.row(0),
    });
    write_file(&a.out.join("summary.json"), pretty(&summary), &mut manifest)?;
    manifest.write("explain")?;
    log.event("explain", summary);
    println!("prediction={prediction} peak_patch=({pi},{pj})");
    Ok(())
}

#[derive(Args, Debug)]
pub struct MasksArgs {
    /// Directory of per-epoch checkpoints (a train output or its checkpoints/ folder).
    #[arg(long)]
    pub ckpt_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn masks(a: MasksArgs, _g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    log.config(
        "masks",
        json!({ "ckpt_dir": a.ckpt_dir, "layer": a.layer, "head": a.head }),
    );
    let dir = if a.ckpt_dir.join(CHECKPOINT_DIR).is_dir() {
        a.ckpt_dir.join(CHECKPOINT_DIR)
    } else {
        a.ckpt_dir.clone()
    };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| io_err(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == CHECKPOINT_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Failed(format!("no .{CHECKPOINT_EXT} files in {}", dir.display())));
    }
    let mut cks = paths
        .iter()
        .map(|p| ModelCheckpoint::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    cks.sort_by_key(|c| c.epoch);
    require_dir(&a.out)?;
    let mut manifest = Manifest::new(&a.out);
    let files = export_mask_evolution(&cks, a.layer, a.head, &a.out.join("mask"))?;
    for f in &files {
        add_heatmap(&mut manifest, f.clone());
    }
    manifest.write("masks")?;
    log.event("masks", json!({ "checkpoints": cks.len(), "heatmaps": files.len() }));
    println!("heatmaps={}", files.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0.05,0.25,1.0")]
    pub fractions: String,
    #[arg(long, default_value = "ibit,baseline")]
    pub variants: String,
    /// Training seeds; every (variant, fraction) pair runs each one.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// CSV output path; manifest.json goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn bench_scaling(a: BenchArgs, _g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    let fractions: Vec<f64> = parse_list(&a.fractions, "fraction")?;
    let variants = a
        .variants
        .split(',')
        .map(|v| parse_variant(v.trim()))
        .collect::<CliResult<Vec<Variant>>>()?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let (train_set, test_set) = load_data(&a.data)?;
    let test_set =
        test_set.ok_or_else(|| CliError::Failed(format!("{} has no {TEST_IMAGES}", a.data.display())))?;
    let base = resolve_config(
        a.config.as_deref(),
        &train_set,
        Some(&test_set),
        &Overrides {
            seed: None,
            fraction: None,
            epochs: a.epochs,
            lr: a.lr,
        },
    )?;
    for &f in &fractions {
        TrainConfig {
            dataset_fraction: f,
            ..base.clone()
        }
        .validate()
        .map_err(usage)?;
    }
    log.config(
        "bench-scaling",
        json!({
            "data": a.data,
            "fractions": fractions,
            "variants": variants.iter().map(ToString::to_string).collect::<Vec<_>>(),
            "seeds": seeds,
            "train_config": base,
        }),
    );

    let mut csv = String::from("variant,fraction,seed,epoch,train_acc,test_acc\n");
    let mut finals: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for &variant in &variants {
        for &fraction in &fractions {
            for &seed in &seeds {
                let cfg = TrainConfig {
                    seed,
                    dataset_fraction: fraction,
                    ..base.clone()
                };
                let mut model = Model::new(&cfg, variant)?;
                let report = train_model(&mut model, &train_set, Some(&test_set), |_| Ok(()))?;
                for m in &report.history {
                    let test = m.test_acc.expect("test set given");
                    writeln!(csv, "{variant},{fraction},{seed},{},{},{test}", m.epoch, m.train_acc)
                        .expect("writing to a String");
                }
                let last = report.history.last().and_then(|m| m.test_acc).unwrap_or(f64::NAN);
                log.event(
                    "run",
                    json!({
                        "variant": variant.to_string(),
                        "fraction": fraction,
                        "seed": seed,
                        "train_size": report.train_size,
                        "test_acc": last,
                    }),
                );
                finals
                    .entry((variant.to_string(), fraction.to_string()))
                    .or_default()
                    .push(last);
            }
        }
    }
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    require_dir(&parent)?;
    let mut manifest = Manifest::new(&parent);
    write_file(&a.out, csv, &mut manifest)?;
    manifest.write("bench-scaling")?;
    for ((variant, fraction), accs) in &finals {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("variant={variant} fraction={fraction} runs={} mean_test_acc={mean:.4}", accs.len());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportSynthArgs {
    /// Total images, split into training and test parts.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 28)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export_synth(a: ExportSynthArgs, g: &GlobalArgs, log: &Logger) -> CliResult<()> {
    let seed = g.seed.unwrap_or(SYNTH_SEED);
    log.config("export-synth", json!({ "n": a.n, "size": a.size, "seed": seed }));
    let (train_set, test_set) = synth_train_test(a.n, a.size, seed).map_err(usage)?;
    require_dir(&a.out)?;
    let mut manifest = Manifest::new(&a.out);
    for (set, images, labels) in [
        (&train_set, TRAIN_IMAGES, TRAIN_LABELS),
        (&test_set, TEST_IMAGES, TEST_LABELS),
    ] {
        let (ip, lp) = (a.out.join(images), a.out.join(labels));
        write_idx(set, &ip, &lp)?;
        manifest.add(ip);
        manifest.add(lp);
    }
    manifest.write("export-synth")?;
    println!("train={} test={}", train_set.len(), test_set.len());
    Ok(())
}

struct Overrides {
    seed: Option<u64>,
    fraction: Option<f64>,
    epochs: Option<usize>,
    lr: Option<f64>,
}

/// Config file (or defaults sized to the data) with command-line overrides.
fn resolve_config(
    path: Option<&Path>,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    o: &Overrides,
) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => {
            let (h, w) = train_set.image_shape().unwrap_or((0, 0));
            if h != w {
                return Err(CliError::Failed(format!("images must be square, got {h}x{w}")));
            }
            let classes = train_set
                .num_classes()
                .max(test_set.map_or(0, LabeledImageSet::num_classes));
            TrainConfig {
                image_size: h,
                num_classes: classes,
                ..TrainConfig::default()
            }
        }
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(f) = o.fraction {
        cfg.dataset_fraction = f;
    }
    if let Some(e) = o.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.lr = lr;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> CliResult<(LabeledImageSet, Option<LabeledImageSet>)> {
    let train = load_split(dir, "train")?;
    let test = if dir.join(TEST_IMAGES).exists() {
        Some(load_split(dir, "test")?)
    } else {
        None
    };
    Ok((train, test))
}

fn load_split(dir: &Path, split: &str) -> CliResult<LabeledImageSet> {
    let (images, labels) = match split {
        "train" => (TRAIN_IMAGES, TRAIN_LABELS),
        "test" => (TEST_IMAGES, TEST_LABELS),
        other => return Err(CliError::Usage(format!("split must be train or test, got {other:?}"))),
    };
    Ok(load_idx(&dir.join(images), &dir.join(labels))?)
}

/// Grayscale PGM (P5 or P2, maxval ≤ 65535) scaled to [0, 1].
fn read_pgm(path: &Path) -> CliResult<Matrix> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_pgm(&bytes).map_err(|reason| CliError::Failed(format!("{}: {reason}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> Result<Matrix, String> {
    let mut pos = 0;
    let mut header = Vec::with_capacity(4);
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let magic = header[0].as_str();
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PGM header field {s:?}"));
    let (w, h, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(format!("bad PGM maxval {maxval}"));
    }
    let values: Vec<usize> = match magic {
        "P5" => {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            let width = if maxval < 256 { 1 } else { 2 };
            if body.len() < w * h * width {
                return Err("truncated PGM pixel data".into());
            }
            body.chunks_exact(width)
                .take(w * h)
                .map(|c| c.iter().fold(0usize, |acc, &b| acc * 256 + b as usize))
                .collect()
        }
        "P2" => String::from_utf8_lossy(&bytes[pos..])
            .split_ascii_whitespace()
            .take(w * h)
            .map(num)
            .collect::<Result<_, _>>()?,
        other => return Err(format!("unsupported PGM magic {other:?}")),
    };
    if values.len() != w * h || values.iter().any(|&v| v > maxval) {
        return Err("PGM pixel data does not match its header".into());
    }
    Matrix::new(h, w, values.iter().map(|&v| v as f64 / maxval as f64).collect()).map_err(|e| e.to_string())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn add_heatmap(manifest: &mut Manifest, files: HeatmapFiles) {
    manifest.add(files.csv);
    manifest.add(files.pgm);
}

fn usage(e: ibit::IbitError) -> CliError {
    CliError::Usage(e.to_string())
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("JSON value serializes") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_formats() {
        let p5 = b"P5\n# comment\n2 1\n255\n\x00\xff";
        assert_eq!(parse_pgm(p5).unwrap().as_slice(), &[0.0, 1.0]);
        let p2 = b"P2 2 2 4\n0 1\n2 4\n";
        assert_eq!(parse_pgm(p2).unwrap().as_slice(), &[0.0, 0.25, 0.5, 1.0]);
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(parse_pgm(b"P6\n1 1\n255\n\x00\x00\x00").is_err());
    }
}
