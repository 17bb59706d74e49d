use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use resnetplus::checkpoint::{self, Checkpoint};
use resnetplus::data::{derive_rng, Image, Manifest, Preprocessor, Source, Split, AugmentPolicy};
use resnetplus::gradcheck::{run_scope, CheckOptions, Scope};
use resnetplus::metrics::{export_report, Latency, ReportFormat};
use resnetplus::model::{Model, ModelConfig};
use resnetplus::ops::softmax;
use resnetplus::params::{Mode, ModelState};
use resnetplus::trainer::{self, evaluate, measure_latency, TrainSetup};
use resnetplus::{Error, Result};

use crate::config::{load_data, DataConfig, RunConfig, SynthSpec, Weights};

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn check(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Argument(_) | Error::Config(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

fn percent(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

/// Trains one configuration into `cfg.out_dir` and returns the selected
/// weights' test accuracy when there is a test split.
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub final_train_acc: f64,
    pub test_acc: Option<f64>,
    pub params: usize,
}

pub fn run_training(cfg: &RunConfig) -> Result<TrainSummary> {
    let data = load_data(&cfg.data)?;
    let out = &cfg.out_dir;
    fs::create_dir_all(out)?;
    if !data.splits.skipped.is_empty() {
        resnetplus::data::write_skip_report(&out.join("skipped.txt"), &data.splits.skipped)?;
    }
    let mut cfg = cfg.clone();
    cfg.model.num_classes = data.class_names().len();
    cfg.save_resolved(out)?;

    let mut model = Model::<f32>::build(&cfg.model, cfg.train.seed)?;
    let setup = TrainSetup {
        train: &data.splits.train,
        val: &data.splits.val,
        pre: &data.pre,
        out_dir: Some(out),
    };
    let outcome = trainer::train(&mut model, &setup, &cfg.train)?;
    outcome.report.write(out)?;
    let final_train_acc = outcome.report.epochs.last().map_or(0.0, |r| r.train_acc);
    let test_acc = if data.test().is_empty() {
        None
    } else {
        let weights = outcome.best_weights(cfg.train.eval_with_ema);
        Some(trainer::accuracy(&model, weights, data.test(), &data.pre)?)
    };
    Ok(TrainSummary {
        best_epoch: outcome.report.best_epoch,
        best_val_acc: outcome.report.best_val_acc,
        final_train_acc,
        test_acc,
        params: model.param_count().total,
    })
}

pub fn train(cfg: &RunConfig) -> CmdResult {
    let start = Instant::now();
    let s = run_training(cfg)?;
    println!("model       {} ({} params)", cfg.model.flag_label(), s.params);
    println!("best epoch  {} (val acc {})", s.best_epoch, percent(s.best_val_acc));
    println!("train acc   {} (final epoch)", percent(s.final_train_acc));
    if let Some(acc) = s.test_acc {
        println!("test acc    {}", percent(acc));
    }
    println!("outputs     {}", cfg.out_dir.display());
    println!("elapsed     {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

/// Rebuilds the model from a checkpoint, or from `config` when given so
/// that a mismatch against the echo is reported by tensor name.
fn open_checkpoint(path: &Path, config: Option<&Path>) -> Result<(Checkpoint, Model<f32>, Option<ModelState<f32>>)> {
    let ckpt = checkpoint::load(path)?;
    let (model, ema) = match config {
        Some(cfg_path) => {
            let mut model_cfg: ModelConfig = RunConfig::load(cfg_path)?.model;
            model_cfg.num_classes = ckpt.meta.class_names.len();
            let mut model = Model::build(&model_cfg, 0)?;
            let ema = ckpt.restore_into(&mut model)?;
            (model, ema)
        }
        None => ckpt.into_model()?,
    };
    Ok((ckpt, model, ema))
}

fn pick_weights<'a>(
    which: Weights,
    model: &'a Model<f32>,
    ema: Option<&'a ModelState<f32>>,
) -> Result<&'a ModelState<f32>> {
    match which {
        Weights::Raw => Ok(model.state()),
        Weights::Ema => ema.ok_or_else(|| Error::Format("checkpoint carries no EMA weights".into())),
    }
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub config: Option<&'a Path>,
    pub data: DataConfig,
    pub split: Split,
    pub weights: Vec<Weights>,
    pub out: &'a Path,
    pub formats: Vec<ReportFormat>,
}

pub fn eval(args: &EvalArgs<'_>) -> CmdResult {
    let (ckpt, model, ema) = open_checkpoint(args.checkpoint, args.config)?;
    let mut data_cfg = args.data.clone();
    if data_cfg.manifest.is_none() && data_cfg.synthetic.is_none() {
        return Err(Failure::usage("eval needs --manifest, --synthetic or a --config with a data section"));
    }
    data_cfg.image_size = Some(ckpt.meta.image_size);
    let data = load_data(&data_cfg)?;
    if data.class_names() != ckpt.meta.class_names.as_slice() {
        return Err(Error::Config(format!(
            "dataset classes {:?} differ from checkpoint classes {:?}",
            data.class_names(),
            ckpt.meta.class_names
        ))
        .into());
    }
    let pre = Preprocessor::new(ckpt.meta.image_size, ckpt.meta.normalization, AugmentPolicy::identity())?;
    let ds = data.splits.split(args.split);
    if ds.is_empty() {
        return Err(Error::Config(format!("{} split is empty", args.split)).into());
    }
    // Every report is computed before anything is written.
    let mut reports = Vec::new();
    for &w in &args.weights {
        let weights = pick_weights(w, &model, ema.as_ref())?;
        reports.push((w, evaluate(&model, weights, ds, &pre)?));
    }
    fs::create_dir_all(args.out)?;
    println!("{:<4} {:>7} {:>7} {:>7} {:>7} {:>7}", "", "ACC", "PRE", "REC", "F1", "AUC");
    for (w, report) in &reports {
        let name = match w {
            Weights::Raw => "raw",
            Weights::Ema => "ema",
        };
        let c = &report.classification;
        let auc = report.macro_auc.map_or("n/a".to_string(), |a| format!("{:.2}", 100.0 * a));
        println!(
            "{:<4} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7}",
            name,
            100.0 * c.accuracy,
            100.0 * c.macro_avg.precision,
            100.0 * c.macro_avg.recall,
            100.0 * c.macro_avg.f1,
            auc
        );
        let written = export_report(report, args.out, &format!("eval_{}_{name}", args.split), &args.formats)?;
        for p in written {
            log::info!("wrote {}", p.display());
        }
        if let Some(lat) = &report.latency {
            println!("     latency {:.3} ± {:.3} ms/sample", lat.mean_ms, lat.std_ms);
        }
    }
    Ok(())
}

pub fn predict(checkpoint_path: &Path, weights: Weights, images: &[PathBuf]) -> CmdResult {
    let (ckpt, model, ema) = open_checkpoint(checkpoint_path, None)?;
    let state = pick_weights(weights, &model, ema.as_ref())?;
    let pre = Preprocessor::new(ckpt.meta.image_size, ckpt.meta.normalization, AugmentPolicy::identity())?;
    let names = &ckpt.meta.class_names;
    let mut times = Vec::new();
    let mut failures = 0;
    let mut rng = derive_rng(0, 0, 0);
    for path in images {
        let result = Image::open(path).and_then(|img| {
            let x = pre.apply(&img, Mode::Eval, &mut rng)?;
            let x = x.reshape(&[1, 3, pre.size, pre.size])?;
            let start = Instant::now();
            let logits = model.logits_with(state, &x)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            softmax(&logits)
        });
        match result {
            Ok(probs) => {
                let p: Vec<f64> = probs.data().iter().map(|&v| f64::from(v)).collect();
                let best = resnetplus::metrics::argmax_rows(std::slice::from_ref(&p))[0];
                let mut line = format!("{}\t{}\t{:.4}\t", path.display(), names[best], p[best]);
                for (k, v) in p.iter().enumerate() {
                    let sep = if k == 0 { "" } else { " " };
                    let _ = write!(line, "{sep}{}={v:.4}", names[k]);
                }
                println!("{line}");
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: {}: {e}", path.display());
            }
        }
    }
    if let Some(lat) = Latency::from_millis(&times) {
        println!(
            "latency {:.3} ± {:.3} ms/image over {} images",
            lat.mean_ms, lat.std_ms, lat.samples
        );
    }
    if failures == images.len() {
        return Err(Failure {
            code: 3,
            message: "no image could be classified".into(),
        });
    }
    Ok(())
}

/// Writes `root/{train,val,test}/<class>/<index>.png` and `root/manifest.toml`.
pub fn synth(out: &Path, spec: SynthSpec, size: usize, seed: u64) -> CmdResult {
    let splits = resnetplus::data::synth_splits(spec.classes, spec.train_total, size, seed)?;
    for ds in [&splits.train, &splits.val, &splits.test] {
        let mut next = vec![0usize; ds.num_classes()];
        for s in &ds.samples {
            let dir = out.join(ds.split.dir_name()).join(&ds.class_names[s.label]);
            fs::create_dir_all(&dir)?;
            let Source::Inline(img) = &s.source else {
                unreachable!("synthetic samples are in memory")
            };
            img.save_png(&dir.join(format!("{:05}.png", next[s.label])))?;
            next[s.label] += 1;
        }
    }
    let (mut manifest, report) = Manifest::from_root(out, size)?;
    manifest.root = PathBuf::from(".");
    manifest.augment = AugmentPolicy::synthetic();
    let path = out.join("manifest.toml");
    manifest.save(&path)?;
    println!(
        "wrote {} train / {} val / {} test images and {}",
        report.train.len(),
        report.val.len(),
        report.test.len(),
        path.display()
    );
    Ok(())
}

pub fn gradcheck(scope: Scope, seed: u64, fault: Option<f64>) -> CmdResult {
    let start = Instant::now();
    let opts = CheckOptions {
        seed,
        fault,
        ..Default::default()
    };
    let results = run_scope(scope, &opts)?;
    for r in &results {
        println!("{r}");
    }
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    println!("worst relative error {worst:.3e} in {:.1}s", start.elapsed().as_secs_f64());
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Failure::check(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

/// The four switches of the ablation tables. The stem switch also replaces
/// the max pool, so the all-off row is plain ResNet50.
pub fn ablation_grid(base: &RunConfig) -> Vec<RunConfig> {
    (0..16u32)
        .rev()
        .map(|bits| {
            let mut cfg = base.clone();
            let on = |i: u32| bits & (1 << (3 - i)) != 0;
            cfg.model.cbam = on(0);
            cfg.model.sco = on(1);
            cfg.model.replace_stem = on(2);
            cfg.model.replace_maxpool = on(2);
            cfg.model.modify_shortcut = on(3);
            cfg.out_dir = base.out_dir.join(row_name(&cfg.model));
            cfg
        })
        .collect()
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "✗"
    }
}

fn row_name(m: &ModelConfig) -> String {
    format!(
        "cbam{}_sco{}_rc{}_ms{}",
        u8::from(m.cbam),
        u8::from(m.sco),
        u8::from(m.replace_stem),
        u8::from(m.modify_shortcut)
    )
}

pub fn ablate(base: &RunConfig, dry_run: bool) -> CmdResult {
    let grid = ablation_grid(base);
    if dry_run {
        for (i, cfg) in grid.iter().enumerate() {
            println!("# row {} of {}: {}", i + 1, grid.len(), row_name(&cfg.model));
            println!("{}", cfg.to_toml());
        }
        return Ok(());
    }
    fs::create_dir_all(&base.out_dir)?;
    base.save_resolved(&base.out_dir)?;
    let header = "CBAM\tSCO\tRC\tMS\tparams\tlatency_ms\tval_acc\ttest_acc";
    let mut csv = String::from("cbam,sco,rc,ms,params,latency_mean_ms,latency_std_ms,val_acc,test_acc\n");
    println!("{header}");
    for cfg in &grid {
        let s = run_training(cfg)?;
        let (classes, size) = shape_of(cfg)?;
        let mut model_cfg = cfg.model.clone();
        model_cfg.num_classes = classes;
        let model = Model::<f32>::build(&model_cfg, cfg.train.seed)?;
        let lat = measure_latency(&model, size, 10, 2)?;
        let m = &cfg.model;
        let test = s.test_acc.map_or("n/a".to_string(), percent);
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.2}±{:.2}\t{}\t{}",
            mark(m.cbam),
            mark(m.sco),
            mark(m.replace_stem),
            mark(m.modify_shortcut),
            s.params,
            lat.mean_ms,
            lat.std_ms,
            percent(s.best_val_acc),
            test
        );
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{:.6},{:.6},{:.6},{}",
            u8::from(m.cbam),
            u8::from(m.sco),
            u8::from(m.replace_stem),
            u8::from(m.modify_shortcut),
            s.params,
            lat.mean_ms,
            lat.std_ms,
            s.best_val_acc,
            s.test_acc.map_or(String::new(), |a| format!("{a:.6}"))
        );
    }
    fs::write(base.out_dir.join("ablation.csv"), csv)?;
    Ok(())
}

/// Class count and input size of a run's data, read without decoding images.
fn shape_of(cfg: &RunConfig) -> Result<(usize, usize)> {
    if let Some(spec) = cfg.data.synthetic {
        return Ok((spec.classes, cfg.data.image_size.unwrap_or(crate::config::SYNTH_IMAGE_SIZE)));
    }
    let path = cfg
        .data
        .manifest
        .as_deref()
        .ok_or_else(|| Error::Argument("no data source".into()))?;
    let m = Manifest::load(path)?;
    Ok((m.class_names.len(), cfg.data.image_size.unwrap_or(m.image_size)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_sixteen_distinct_rows() {
        let grid = ablation_grid(&RunConfig::default());
        assert_eq!(grid.len(), 16);
        let mut names: Vec<String> = grid.iter().map(|c| row_name(&c.model)).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 16);
    }

    #[test]
    fn all_off_row_is_resnet50() {
        let base = RunConfig::default();
        let grid = ablation_grid(&base);
        let last = grid.last().unwrap();
        assert_eq!(last.model, ModelConfig::resnet50(base.model.num_classes));
        assert_eq!(grid[0].model, ModelConfig::resnet50_plus(base.model.num_classes));
    }

    #[test]
    fn error_codes() {
        assert_eq!(Failure::from(Error::Format("x".into())).code, 3);
        assert_eq!(
            Failure::from(Error::Divergence {
                epoch: 0,
                step: 0,
                loss: f64::NAN
            })
            .code,
            4
        );
        assert_eq!(Failure::from(Error::Argument("x".into())).code, 2);
    }
}
