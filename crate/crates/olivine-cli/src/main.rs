//! `olivine` command-line pipeline: synthetic data generation, ingestion,
//! splitting, preprocessing, training, evaluation, prediction, and gradient
//! checking. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
//! failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use olivine::dataset::{
    class_count, class_names, generate_synthetic, read_manifest, scan_directory, stratified_split,
    write_manifest, ManifestRecord, Split, SplitSpec, SYNTHETIC_CLASSES,
};
use olivine::error::Error;
use olivine::eval::{
    confusion, derive_metrics_named, log_curves, render_report, report_key_values,
    REFERENCE_EFFICIENTNETB0, REFERENCE_MOBILENETV2,
};
use olivine::image::{read_depth, read_pnm, write_pnm};
use olivine::model::{
    build_preset, freeze_backbone, init_params, load_checkpoint, read_checkpoint_info,
    reinit_params_matching, save_checkpoint,
};
use olivine::preprocess::{normalize_to_tensor, preprocess_image, resize_bilinear};
use olivine::tensor::{argmax_slice, Tensor};
use olivine::train::{adapt_channels, gradient_check, predict_split, train_loop, DiskSource};
use olivine::Rng;
use olivine_cli::config::{config_key_help, parse_config, Config};

#[derive(Parser)]
#[command(
    name = "olivine",
    version,
    about = "Image-classification pipeline: synthetic benchmark, Otsu-based preprocessing, miniature CNN training, and evaluation",
    after_help = config_key_help()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the five-class synthetic shape benchmark (plus manifest.csv)
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "per-class")]
        per_class: usize,
        #[arg(long)]
        seed: u64,
        /// Square image size in pixels
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
    /// Scan a class-per-directory dataset root into a manifest CSV
    Ingest {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Tag manifest records with a stratified train/val/test split, in place
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Comma-separated fractions, e.g. 0.8,0.1,0.1
        #[arg(long)]
        fractions: Option<String>,
    },
    /// Blur, segment, crop, and resize every manifest image into OUT
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// AND the intensity mask with a depth-band mask from <image>.depth.pgm
        #[arg(long = "use-depth")]
        use_depth: bool,
        /// Gaussian blur sigma (overrides data.blur_sigma)
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a preset on the manifest's train split
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// mini-mobilenetv2 or mini-efficientnetb0
        #[arg(long)]
        model: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint output path (curves CSV lands next to it)
        #[arg(long)]
        out: PathBuf,
        /// Start from an existing checkpoint instead of fresh weights
        #[arg(long)]
        init: Option<PathBuf>,
        /// Freeze everything but the classifier head
        #[arg(long)]
        freeze: bool,
        /// Redraw the classifier head before training (transfer to a new task)
        #[arg(long = "reinit-head")]
        reinit_head: bool,
        /// Curves CSV path (default: checkpoint path with .curves.csv)
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Confusion matrix and metrics of a checkpoint on one split
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Append the published reference rows (display only)
        #[arg(long = "compare-paper")]
        compare_paper: bool,
        /// Also write a machine-readable key = value report
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Classify one image and print the probability vector
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Manifest supplying class names (indices are printed otherwise)
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Input size the image is resized to
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Compare analytic gradients with central finite differences (64-bit)
    Gradcheck {
        /// mini-mobilenetv2 or mini-efficientnetb0
        #[arg(long)]
        model: String,
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
}

type CmdResult = Result<(), (i32, String)>;

fn lib_err(e: Error) -> (i32, String) {
    let code = match e {
        Error::Numeric(_) => 3,
        _ => 2,
    };
    (code, e.to_string())
}

fn usage(msg: impl Into<String>) -> (i32, String) {
    (1, msg.into())
}

fn read_file(path: &Path) -> Result<Vec<u8>, (i32, String)> {
    std::fs::read(path).map_err(|e| (2, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| (2, format!("{}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| (2, format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&PathBuf>) -> Result<Config, (i32, String)> {
    let Some(path) = path else { return Ok(Config::default()) };
    let bytes = read_file(path)?;
    let (cfg, warnings) =
        parse_config(&bytes).map_err(|e| (2, format!("{}: {e}", path.display())))?;
    for w in warnings {
        eprintln!("{}: {w}", path.display());
    }
    Ok(cfg)
}

fn read_records(path: &Path) -> Result<Vec<ManifestRecord>, (i32, String)> {
    let bytes = read_file(path)?;
    read_manifest(&bytes).map_err(|e| (2, format!("{}: {e}", path.display())))
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    match std::env::var("OLIVINE_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) => olivine::threads::set_threads(n),
            Err(_) => {
                eprintln!("OLIVINE_THREADS must be a non-negative integer, got \"{v}\"");
                return 1;
            }
        },
        Err(_) => {}
    }

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };

    let result = match cli.cmd {
        Cmd::Synth { out, per_class, seed, size } => cmd_synth(&out, per_class, seed, size),
        Cmd::Ingest { root, manifest } => cmd_ingest(&root, &manifest),
        Cmd::Split { manifest, seed, fractions } => cmd_split(&manifest, seed, fractions.as_deref()),
        Cmd::Preprocess { manifest, out, use_depth, sigma, config } => {
            cmd_preprocess(&manifest, &out, use_depth, sigma, config.as_ref())
        }
        Cmd::Train { manifest, model, config, out, init, freeze, reinit_head, curves } => {
            cmd_train(&manifest, &model, config.as_ref(), &out, init.as_ref(), freeze, reinit_head, curves.as_ref())
        }
        Cmd::Evaluate { manifest, ckpt, split, compare_paper, report } => {
            cmd_evaluate(&manifest, &ckpt, &split, compare_paper, report.as_ref())
        }
        Cmd::Predict { ckpt, image, manifest, size } => cmd_predict(&ckpt, &image, manifest.as_ref(), size),
        Cmd::Gradcheck { model, size } => cmd_gradcheck(&model, size),
    };
    match result {
        Ok(()) => 0,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn cmd_synth(out: &Path, per_class: usize, seed: u64, size: usize) -> CmdResult {
    let records = generate_synthetic(out, per_class, size, seed).map_err(lib_err)?;
    println!(
        "wrote {} images ({per_class} per class: {}) at {size}x{size} under {}",
        records.len(),
        SYNTHETIC_CLASSES.join(", "),
        out.display()
    );
    println!("manifest: {}", out.join("manifest.csv").display());
    Ok(())
}

fn cmd_ingest(root: &Path, manifest: &Path) -> CmdResult {
    let records = scan_directory(root).map_err(lib_err)?;
    let names = class_names(&records);
    write_file(manifest, &write_manifest(&records).map_err(lib_err)?)?;
    println!("{} records across {} classes:", records.len(), names.len());
    for (i, name) in names.iter().enumerate() {
        let n = records.iter().filter(|r| r.class_index == i).count();
        println!("  {i}: {name} ({n} images)");
    }
    Ok(())
}

fn parse_fractions(text: &str) -> Result<SplitSpec, (i32, String)> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(usage(format!("--fractions expects three comma-separated values, got \"{text}\"")));
    }
    let mut vals = [0f64; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|_| usage(format!("--fractions: cannot parse \"{p}\"")))?;
    }
    Ok(SplitSpec { f_train: vals[0], f_val: vals[1], f_test: vals[2] })
}

fn cmd_split(manifest: &Path, seed: u64, fractions: Option<&str>) -> CmdResult {
    let records = read_records(manifest)?;
    let spec = match fractions {
        Some(f) => parse_fractions(f)?,
        None => SplitSpec::default(),
    };
    let tagged = stratified_split(&records, &spec, seed).map_err(lib_err)?;
    write_file(manifest, &write_manifest(&tagged).map_err(lib_err)?)?;
    for (split, name) in [(Split::Train, "train"), (Split::Val, "val"), (Split::Test, "test")] {
        let n = tagged.iter().filter(|r| r.split == Some(split)).count();
        println!("{name}: {n}");
    }
    Ok(())
}

fn cmd_preprocess(
    manifest: &Path,
    out: &Path,
    use_depth: bool,
    sigma: Option<f64>,
    config: Option<&PathBuf>,
) -> CmdResult {
    let records = read_records(manifest)?;
    let cfg = load_config(config)?;
    let mut opts = cfg.preprocess.clone();
    if let Some(s) = sigma {
        opts.sigma = s;
    }
    if use_depth {
        opts.use_depth = true;
    }

    let process_one = |rec: &ManifestRecord| -> Result<(ManifestRecord, Option<String>), (i32, String)> {
        let src = PathBuf::from(&rec.path);
        let img = read_pnm(&read_file(&src)?).map_err(|e| (2, format!("{}: {e}", rec.path)))?;
        let depth = if opts.use_depth {
            let dpath = src.with_extension("depth.pgm");
            Some(read_depth(&read_file(&dpath)?).map_err(|e| (2, format!("{}: {e}", dpath.display())))?)
        } else {
            None
        };
        let (processed, segmented) = preprocess_image(&img, depth.as_ref(), &opts).map_err(lib_err)?;
        let file_name = src.file_name().unwrap_or_default();
        let dst = out.join(&rec.class_name).join(file_name);
        write_file(&dst, &write_pnm(&processed))?;
        let warning = (!segmented)
            .then(|| format!("warning: {}: segmentation skipped (degenerate image), plain resize applied", rec.path));
        Ok((ManifestRecord { path: dst.to_string_lossy().into_owned(), ..rec.clone() }, warning))
    };

    let workers = olivine::threads::threads().min(records.len()).max(1);
    let results: Vec<Result<(ManifestRecord, Option<String>), (i32, String)>> = if workers <= 1 {
        records.iter().map(process_one).collect()
    } else {
        let mut results: Vec<Option<_>> = (0..records.len()).map(|_| None).collect();
        let chunk = records.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (recs, slots) in records.chunks(chunk).zip(results.chunks_mut(chunk)) {
                scope.spawn(|| {
                    for (rec, slot) in recs.iter().zip(slots.iter_mut()) {
                        *slot = Some(process_one(rec));
                    }
                });
            }
        });
        results.into_iter().map(|r| r.expect("worker filled every slot")).collect()
    };

    let mut new_records = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for result in results {
        let (rec, warning) = result?;
        if let Some(w) = warning {
            eprintln!("{w}");
            skipped += 1;
        }
        new_records.push(rec);
    }
    let out_manifest = out.join("manifest.csv");
    write_file(&out_manifest, &write_manifest(&new_records).map_err(lib_err)?)?;
    println!(
        "preprocessed {} images to {}x{} under {} ({} segmentation fallbacks)",
        new_records.len(),
        opts.out_size,
        opts.out_size,
        out.display(),
        skipped
    );
    println!("manifest: {}", out_manifest.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    manifest: &Path,
    model: &str,
    config: Option<&PathBuf>,
    out: &Path,
    init: Option<&PathBuf>,
    freeze: bool,
    reinit_head: bool,
    curves: Option<&PathBuf>,
) -> CmdResult {
    let cfg = load_config(config)?;
    let records = read_records(manifest)?;
    let k = class_count(&records);
    if k < 2 {
        return Err((2, format!("{}: need >= 2 classes, found {k}", manifest.display())));
    }

    let mut spec = build_preset(model, k, cfg.in_channels).map_err(|e| usage(e.to_string()))?;
    let mut params = match init {
        Some(path) => {
            let bytes = read_file(path)?;
            let (params, meta) =
                load_checkpoint(&bytes, &spec).map_err(|e| (2, format!("{}: {e}", path.display())))?;
            println!("initialized from {} (epoch {}, metric {:.4})", path.display(), meta.epoch, meta.best_val_metric);
            params
        }
        None => init_params(&spec, &mut Rng::new(cfg.train.seed)).map_err(lib_err)?,
    };
    if reinit_head {
        let mut rng = Rng::derive(cfg.train.seed, &[u64::from_be_bytes(*b"headinit")]);
        reinit_params_matching(&spec, &mut params, "head.fc.", &mut rng).map_err(lib_err)?;
        println!("classifier head re-initialized");
    }
    if freeze {
        spec = freeze_backbone(&spec);
        println!("backbone frozen; trainable: {}", spec.trainable_param_names().join(", "));
    }

    let outcome = train_loop(&spec, &mut params, &records, &DiskSource, &cfg.train, &cfg.aug).map_err(lib_err)?;
    for r in &outcome.history {
        println!(
            "epoch {:>3}: train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
        );
    }
    println!("best epoch {} (val metric {:.4})", outcome.meta.epoch, outcome.meta.best_val_metric);

    let ckpt = save_checkpoint(&spec, &outcome.best_params, outcome.meta).map_err(lib_err)?;
    write_file(out, &ckpt)?;
    println!("checkpoint: {}", out.display());

    let curves_path = curves.cloned().unwrap_or_else(|| out.with_extension("curves.csv"));
    write_file(&curves_path, &log_curves(&outcome.history).map_err(lib_err)?)?;
    println!("curves: {}", curves_path.display());
    Ok(())
}

/// Rebuilds the spec a checkpoint was written for: preset name from the
/// header, class count and input channels from the stored entry shapes.
fn spec_from_checkpoint(bytes: &[u8]) -> Result<olivine::model::ModelSpec, (i32, String)> {
    let info = read_checkpoint_info(bytes).map_err(lib_err)?;
    let head = info
        .entries
        .iter()
        .find(|(n, _)| n == "head.fc.w")
        .ok_or((2, "checkpoint: no head.fc.w entry".to_string()))?;
    let stem = info
        .entries
        .iter()
        .find(|(n, _)| n == "stem.conv.w")
        .ok_or((2, "checkpoint: no stem.conv.w entry".to_string()))?;
    build_preset(&info.model_name, head.1[0], stem.1[1]).map_err(lib_err)
}

fn cmd_evaluate(
    manifest: &Path,
    ckpt: &Path,
    split: &str,
    compare_paper: bool,
    report_path: Option<&PathBuf>,
) -> CmdResult {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(usage(format!("--split must be train, val, or test, got \"{other}\""))),
    };
    let records = read_records(manifest)?;
    let bytes = read_file(ckpt)?;
    let spec = spec_from_checkpoint(&bytes)?;
    let (params, _) = load_checkpoint(&bytes, &spec).map_err(|e| (2, format!("{}: {e}", ckpt.display())))?;

    let names = class_names(&records);
    if names.len() != spec.num_classes {
        return Err((2, format!(
            "{}: manifest has {} classes, checkpoint head expects {}",
            manifest.display(),
            names.len(),
            spec.num_classes
        )));
    }
    let (predictions, labels) =
        predict_split(&spec, &params, &records, &DiskSource, split, 32).map_err(lib_err)?;
    let matrix = confusion(&predictions, &labels, spec.num_classes).map_err(lib_err)?;
    let report = derive_metrics_named(&matrix, &names).map_err(lib_err)?;
    let reference = [REFERENCE_MOBILENETV2, REFERENCE_EFFICIENTNETB0];
    let text = render_report(&report, compare_paper.then_some(&reference[..]));
    print!("{text}");
    if let Some(path) = report_path {
        write_file(path, report_key_values(&report).as_bytes())?;
        println!("report: {}", path.display());
    }
    Ok(())
}

fn cmd_predict(ckpt: &Path, image: &Path, manifest: Option<&PathBuf>, size: usize) -> CmdResult {
    let bytes = read_file(ckpt)?;
    let spec = spec_from_checkpoint(&bytes)?;
    let (params, _) = load_checkpoint(&bytes, &spec).map_err(|e| (2, format!("{}: {e}", ckpt.display())))?;
    let names: Vec<String> = match manifest {
        Some(path) => {
            let names = class_names(&read_records(path)?);
            if names.len() != spec.num_classes {
                return Err((2, format!(
                    "{}: manifest has {} classes, checkpoint head expects {}",
                    path.display(),
                    names.len(),
                    spec.num_classes
                )));
            }
            names
        }
        None => (0..spec.num_classes).map(|i| format!("class{i}")).collect(),
    };

    let img = read_pnm(&read_file(image)?).map_err(|e| (2, format!("{}: {e}", image.display())))?;
    let img = adapt_channels(img, spec.in_channels);
    let img = resize_bilinear(&img, size, size).map_err(lib_err)?;
    let chw = normalize_to_tensor(&img);
    let mut shape = vec![1];
    shape.extend_from_slice(chw.shape());
    let input = Tensor::new(shape, chw.into_data()).map_err(lib_err)?;
    let probs = olivine::model::forward_infer(&spec, &params, &input).map_err(lib_err)?;
    let row = probs.data();
    let best = argmax_slice(row).map_err(lib_err)?;
    println!("prediction: {}", names[best]);
    let rendered: Vec<String> =
        names.iter().zip(row).map(|(n, p)| format!("{n}={p:.6}")).collect();
    println!("probabilities: {}", rendered.join(" "));
    Ok(())
}

fn cmd_gradcheck(model: &str, size: usize) -> CmdResult {
    let spec = build_preset(model, 5, 3).map_err(|e| usage(e.to_string()))?;
    // Fixed evaluation point, chosen so that no ReLU6 activation sits within
    // the finite-difference step of a kink (central differences across a kink
    // measure the wrong slope no matter how exact the analytic gradient is).
    let mut params = init_params::<f64>(&spec, &mut Rng::new(10)).map_err(lib_err)?;
    let mut rng = Rng::new(10_001);
    let n = 2 * 3 * size * size;
    let inputs = Tensor::<f64>::new(
        vec![2, 3, size, size],
        (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    )
    .map_err(lib_err)?;
    let err = gradient_check(&spec, &mut params, &inputs, &[0, 3], 1e-5).map_err(lib_err)?;
    println!("{model} at {size}x{size}: max relative gradient error {err:.3e}");
    if err <= 1e-4 {
        println!("gradient check PASSED (tolerance 1.0e-4)");
        Ok(())
    } else {
        Err((3, format!("gradient check FAILED: {err:.3e} exceeds tolerance 1.0e-4")))
    }
}
