//! Subcommand implementations.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use serde_json::json;
use umbra::cnn::{CnnModel, InferenceNet, Schedule};
use umbra::detector::{detect, DetectionResult, Detector, DetectorConfig};
use umbra::evaluation::{
    benchmark, generate_synthetic, load_dataset, load_dataset_auto, synthetic_scenes, DatasetIndex,
    Layout,
};
use umbra::imageio::{probability_to_gray, read_image, write_png_file};
use umbra::pipeline::{train_cnn_dataset, train_svm_dataset, CnnTrainConfig, SvmTrainConfig};
use umbra::prior::{SvmModel, SvmParams};
use umbra::segmentation::MeanShiftParams;

use crate::config::ConfigFile;
use crate::{
    BenchArgs, Cli, Command, DataArgs, DetectArgs, DetectorArgs, EvaluateArgs, SegmentArgs, Subset,
    SynthArgs, TimingFormat, TrainCnnArgs, TrainSvmArgs, UsageError,
};

pub enum Failure {
    Usage(UsageError),
    Runtime(anyhow::Error),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<umbra::Error> for Failure {
    fn from(e: umbra::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl std::fmt::Display) -> UsageError {
    UsageError(e.to_string())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Some(jobs) = file.pick_opt(cli.jobs, "jobs")? {
        if jobs == 0 {
            return Err(usage("--jobs must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("starting the worker pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(&file, a),
        Command::TrainSvm(a) => train_svm(&file, a),
        Command::TrainCnn(a) => train_cnn(&file, a),
        Command::Detect(a) => detect_one(&file, a),
        Command::Evaluate(a) => evaluate(&file, a),
        Command::Bench(a) => bench(&file, a),
    }
}

fn mean_shift(file: &ConfigFile, a: &SegmentArgs) -> Result<MeanShiftParams, UsageError> {
    let d = MeanShiftParams::default();
    let p = MeanShiftParams {
        spatial_bandwidth: file.pick(a.spatial_bandwidth, "spatial-bandwidth", d.spatial_bandwidth)?,
        range_bandwidth: file.pick(a.range_bandwidth, "range-bandwidth", d.range_bandwidth)?,
        min_region_size: file.pick(a.min_region_size, "min-region-size", d.min_region_size)?,
    };
    p.validate().map_err(usage)?;
    Ok(p)
}

fn detector_config(file: &ConfigFile, a: &DetectorArgs) -> Result<DetectorConfig, UsageError> {
    let d = DetectorConfig::default();
    let c = DetectorConfig {
        alpha: file.pick(a.alpha, "alpha", d.alpha)?,
        binarize_threshold: file.pick(a.threshold, "threshold", d.binarize_threshold)?,
        mean_shift: mean_shift(file, &a.segment)?,
    };
    c.validate().map_err(usage)?;
    Ok(c)
}

struct DataSelection {
    layout: Option<Layout>,
    subset: Subset,
    test_fraction: f64,
    seed: u64,
}

fn data_selection(file: &ConfigFile, a: &DataArgs) -> Result<DataSelection, UsageError> {
    let layout: Option<String> = file.pick_opt(a.layout.clone(), "layout")?;
    let test_fraction = file.pick(a.test_fraction, "test-fraction", 0.25)?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(usage(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    Ok(DataSelection {
        layout: layout.map(|l| l.parse()).transpose().map_err(usage)?,
        subset: file.pick(a.subset, "subset", Subset::All)?,
        test_fraction,
        seed: file.pick(a.seed, "seed", 0)?,
    })
}

fn load_data(root: &Path, sel: &DataSelection) -> anyhow::Result<DatasetIndex> {
    let index = match sel.layout {
        Some(layout) => load_dataset(root, layout)?,
        None => load_dataset_auto(root)?,
    };
    let index = match sel.subset {
        Subset::All => index,
        Subset::Train => index.split(sel.test_fraction, sel.seed)?.0,
        Subset::Test => index.split(sel.test_fraction, sel.seed)?.1,
    };
    log::info!("{}: {} image/mask pairs", root.display(), index.pairs.len());
    Ok(index)
}

fn synth(file: &ConfigFile, a: SynthArgs) -> Result<(), Failure> {
    let seed = file.pick(a.seed, "seed", 0)?;
    let index = generate_synthetic(a.n, a.size, seed, &a.out).map_err(|e| match e {
        umbra::Error::InvalidArgument(m) => Failure::Usage(UsageError(m)),
        e => e.into(),
    })?;
    println!(
        "wrote {} pairs of {}x{} to {}",
        index.pairs.len(),
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn train_svm(file: &ConfigFile, a: TrainSvmArgs) -> Result<(), Failure> {
    let sel = data_selection(file, &a.data)?;
    let d = SvmTrainConfig::default();
    let config = SvmTrainConfig {
        params: SvmParams {
            c: file.pick(a.c, "C", d.params.c)?,
            tolerance: file.pick(a.svm_tolerance, "svm-tolerance", d.params.tolerance)?,
            cv_folds: file.pick(a.cv_folds, "cv-folds", d.params.cv_folds)?,
            seed: sel.seed,
            ..d.params
        },
        textons: file.pick(a.textons, "textons", d.textons)?,
        mean_shift: mean_shift(file, &a.segment)?,
    };
    config.validate().map_err(usage)?;
    let samples = load_data(&a.data.data, &sel)?.load_all()?;
    let t = Instant::now();
    let model = train_svm_dataset(&samples, &config)?;
    model.save(&a.out)?;
    println!(
        "model={} support_vectors={} gamma={:.6} images={} seconds={:.1}",
        a.out.display(),
        model.classifier.support_vectors.len(),
        model.classifier.gamma,
        samples.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn train_cnn(file: &ConfigFile, a: TrainCnnArgs) -> Result<(), Failure> {
    let sel = data_selection(file, &a.data)?;
    let d = CnnTrainConfig::default();
    let config = CnnTrainConfig {
        per_class: file.pick(a.per_class, "per-class", d.per_class)?,
        schedule: Schedule {
            epochs: file.pick(a.epochs, "epochs", d.schedule.epochs)?,
            batch_size: file.pick(a.batch_size, "batch-size", d.schedule.batch_size)?,
            learning_rate: file.pick(a.learning_rate, "learning-rate", d.schedule.learning_rate)?,
            momentum: file.pick(a.momentum, "momentum", d.schedule.momentum)?,
        },
        seed: sel.seed,
        mean_shift: mean_shift(file, &a.segment)?,
        ..d
    };
    config.validate().map_err(usage)?;
    let svm = SvmModel::load(&a.svm)?;
    let samples = load_data(&a.data.data, &sel)?.load_all()?;
    let t = Instant::now();
    let model = train_cnn_dataset(&samples, &svm, &config)?;
    model.save(&a.out)?;
    println!(
        "model={} final_loss={:.6} epochs={} images={} seconds={:.1}",
        a.out.display(),
        model.meta.final_loss,
        config.schedule.epochs,
        samples.len(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn load_models(a: &DetectorArgs) -> anyhow::Result<(SvmModel, InferenceNet)> {
    let svm = SvmModel::load(&a.svm)?;
    let cnn = CnnModel::load(&a.cnn)?;
    Ok((svm, InferenceNet::new(&cnn)))
}

fn write_png(path: &Path, r: &umbra::imageio::Raster<u8>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_png_file(path, r)?;
    Ok(())
}

fn dump_stages(dir: &Path, r: &DetectionResult, config: &DetectorConfig) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_png(&dir.join("prior.png"), &probability_to_gray(&r.prior))?;
    write_png(&dir.join("region_map.png"), &probability_to_gray(&r.region_map))?;
    write_png(&dir.join("refined.png"), &probability_to_gray(&r.refined_map))?;
    write_png(&dir.join("mask.png"), &r.mask.to_gray())?;
    let seg = &r.segmentation;
    let segments = dir.join("segments.png");
    fs::write(&segments, seg.label_map_png()?)
        .with_context(|| format!("writing {}", segments.display()))?;
    let doc = json!({
        "width": seg.width(),
        "height": seg.height(),
        "regions": seg.region_count(),
        "alpha": config.alpha,
        "threshold": config.binarize_threshold,
        "region_scores": r.regions.s,
        "selected": r.selected,
        "refined_pixels": r.refined_pixels,
        "cnn_invocations": r.cnn_invocations,
    });
    let path = dir.join("stages.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn detect_one(file: &ConfigFile, a: DetectArgs) -> Result<(), Failure> {
    let config = detector_config(file, &a.detector)?;
    let img = read_image(&a.image)?;
    let (svm, net) = load_models(&a.detector)?;
    let r = detect(&img, &svm, &net, &config)?;
    if let Some(p) = &a.out_prob {
        write_png(p, &probability_to_gray(&r.refined_map))?;
    }
    if let Some(p) = &a.out_mask {
        write_png(p, &r.mask.to_gray())?;
    }
    if let Some(dir) = &a.dump_stages {
        dump_stages(dir, &r, &config)?;
    }
    let t = &r.timing;
    let stages = [
        ("segmentation", t.segmentation),
        ("prior", t.prior),
        ("region_prediction", t.region_prediction),
        ("filtering", t.filtering),
        ("refinement", t.refinement),
        ("binarization", t.binarization),
    ];
    match a.timing {
        Some(TimingFormat::Json) => {
            let seconds: serde_json::Map<String, serde_json::Value> = stages
                .iter()
                .map(|(k, d)| (k.to_string(), json!(d.as_secs_f64())))
                .collect();
            let doc = json!({
                "seconds": seconds,
                "total_seconds": t.total().as_secs_f64(),
                "regions": r.segmentation.region_count(),
                "selected_regions": r.selected.len(),
                "refined_pixels": r.refined_pixels,
                "cnn_invocations": r.cnn_invocations,
            });
            println!("{}", serde_json::to_string_pretty(&doc).context("encoding timing")?);
        }
        timing => {
            let mut line = format!(
                "image={} regions={} selected={} refined_pixels={} cnn_invocations={} shadow_pixels={} seconds={:.3}",
                a.image.display(),
                r.segmentation.region_count(),
                r.selected.len(),
                r.refined_pixels,
                r.cnn_invocations,
                r.mask.count(),
                t.total().as_secs_f64()
            );
            if timing == Some(TimingFormat::Text) {
                for (k, d) in stages {
                    line.push_str(&format!(" {k}={:.4}", d.as_secs_f64()));
                }
            }
            println!("{line}");
        }
    }
    Ok(())
}

fn evaluate(file: &ConfigFile, a: EvaluateArgs) -> Result<(), Failure> {
    let config = detector_config(file, &a.detector)?;
    let sel = data_selection(file, &a.data)?;
    let index = load_data(&a.data.data, &sel)?;
    let (svm, net) = load_models(&a.detector)?;
    let detector = Detector {
        svm: &svm,
        cnn: &net,
        config,
    };
    let report = benchmark(&detector, &index)?;
    print!("{}", report.to_lines());
    if let Some(p) = &a.report {
        fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.timing_report {
        fs::write(p, report.to_timing_json())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn bench(file: &ConfigFile, a: BenchArgs) -> Result<(), Failure> {
    let config = detector_config(file, &a.detector)?;
    let seed = file.pick(a.seed, "seed", 0)?;
    if a.n == 0 || a.size < umbra::imageio::PATCH_SIZE {
        return Err(usage("bench needs --n >= 1 and --size >= 32").into());
    }
    let (svm, net) = load_models(&a.detector)?;
    let scenes = synthetic_scenes(a.n, a.size, seed);
    let pixels = (a.size * a.size) as f64;
    let mut rows = Vec::with_capacity(a.n);
    for (i, (img, _)) in scenes.iter().enumerate() {
        let t = Instant::now();
        let r = detect(img, &svm, &net, &config)?;
        let seconds = t.elapsed().as_secs_f64();
        let m = r.segmentation.region_count();
        let ratio = r.cnn_invocations as f64 / pixels;
        println!(
            "image={i} regions={m} refined_pixels={} cnn_invocations={} invocation_ratio={ratio:.4} seconds={seconds:.3}",
            r.refined_pixels, r.cnn_invocations
        );
        rows.push(json!({
            "image": i,
            "regions": m,
            "refined_pixels": r.refined_pixels,
            "cnn_invocations": r.cnn_invocations,
            "invocations_match": r.cnn_invocations == m + r.refined_pixels,
            "invocation_ratio": ratio,
            "seconds": seconds,
        }));
    }
    let col = |k: &str| rows.iter().map(|r| r[k].as_f64().unwrap_or(f64::NAN)).collect::<Vec<_>>();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (secs, ratios) = (col("seconds"), col("invocation_ratio"));
    let all_match = rows.iter().all(|r| r["invocations_match"] == true);
    println!(
        "summary images={} mean_seconds={:.3} max_seconds={:.3} mean_invocation_ratio={:.4} max_invocation_ratio={:.4} invocations_match={all_match}",
        a.n,
        mean(&secs),
        max(&secs),
        mean(&ratios),
        max(&ratios)
    );
    if let Some(p) = &a.report {
        let doc = json!({
            "images": a.n,
            "size": a.size,
            "seed": seed,
            "mean_seconds": mean(&secs),
            "max_seconds": max(&secs),
            "mean_invocation_ratio": mean(&ratios),
            "max_invocation_ratio": max(&ratios),
            "invocations_match": all_match,
            "per_image": rows,
        });
        fs::write(p, serde_json::to_string_pretty(&doc).context("encoding report")? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
