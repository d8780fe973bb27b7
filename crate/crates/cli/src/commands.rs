use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use sadnn::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
use sadnn::cost::{analyze as analyze_spec, parse_spec, render_report, spec_of_graph, EnergyTable, ReportFormat};
use sadnn::data::{export_pgm, import_pgm, resize_nearest, MAGIC, SHAPE_NAMES};
use sadnn::models::{evaluate, evaluate_with, train as train_net, ModelConfig, NetworkGraph, Task, TrainOptions};
use sadnn::quant::{calibrate_samples, quantize_network};
use sadnn::verify::{dataset, run_verify, ToyRecipe, VerifyOptions};
use sadnn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{log, AnalyzeArgs, EvalArgs, Failure, Format, PredictArgs, QuantizeArgs, TrainArgs, VerifyArgs};

/// Fails early if `path` cannot be written, leaving no file behind.
fn ensure_writable(path: &Path) -> Result<(), Failure> {
    let existed = path.exists();
    if path.is_dir() {
        return Err(Failure::user(format!("{} is a directory", path.display())));
    }
    OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Failure::user(format!("cannot write {}: {e}", path.display())))?;
    if !existed {
        let _ = fs::remove_file(path);
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::user(format!("cannot write {}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Checkpoint, Failure> {
    load_checkpoint(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.msg = format!("{}: {}", path.display(), f.msg);
        f
    })
}

fn energy_table(path: Option<&Path>) -> Result<EnergyTable, Failure> {
    match path {
        None => Ok(EnergyTable::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::user(format!("{}: {e}", p.display())))?;
            Ok(EnergyTable::from_toml(&text)?)
        }
    }
}

fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Cls => "subset_accuracy",
        Task::Seg => "dsc",
    }
}

#[derive(Serialize)]
struct EpochLine<'a> {
    seed: u64,
    #[serde(flatten)]
    stats: &'a sadnn::models::EpochStats,
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut cfg = match &a.model_config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::user(format!("{}: {e}", p.display())))?;
            ModelConfig::from_toml(&text)?
        }
        None => match a.task {
            Some(t) => ToyRecipe::for_task(t).config,
            None => return Err(Failure::user("train needs --task or --model-config")),
        },
    };
    if let Some(t) = a.task {
        if t != cfg.task {
            return Err(Failure::user(format!("--task {t} but the model config is for {}", cfg.task)));
        }
    }
    if let Some(s) = a.size {
        cfg.input = [cfg.input[0], s, s];
        cfg.validate()?;
    }
    let recipe = ToyRecipe::for_task(cfg.task);
    let n = a.n.unwrap_or(recipe.train_n);
    let seed = a.seed.unwrap_or(recipe.train_seed);
    let opts = TrainOptions {
        epochs: a.epochs.unwrap_or(recipe.train.epochs),
        lr: a.lr.unwrap_or(recipe.train.lr),
        batch_size: a.batch_size.unwrap_or(recipe.train.batch_size),
        seed: a.train_seed.unwrap_or(seed),
    };
    if !(opts.lr > 0.0 && opts.lr.is_finite()) {
        return Err(Failure::user(format!("learning rate must be positive, got {}", opts.lr)));
    }
    if opts.batch_size == 0 {
        return Err(Failure::user("batch size must be positive"));
    }
    ensure_writable(&a.out)?;
    if let Some(p) = &a.log {
        ensure_writable(p)?;
    }
    let data = dataset(&cfg, n, seed)?;
    log(format!(
        "train {}: {n} images of {}x{} (seed {seed}), {} epochs, lr {}, batch {}, shuffle seed {}",
        cfg.task, cfg.input[1], cfg.input[2], opts.epochs, opts.lr, opts.batch_size, opts.seed
    ));
    let mut net = NetworkGraph::build(&cfg)?;
    let trace = train_net(&mut net, &data, &opts)?;
    for e in &trace.epochs {
        log(format!("epoch {:>3}  loss {:.5}  {} {:.4}", e.epoch, e.loss, metric_name(cfg.task), e.metric));
    }
    if !trace.dead_params.is_empty() {
        log(format!("warning: parameters without gradient: {}", trace.dead_params.join(", ")));
    }
    save_checkpoint(&Checkpoint::Float(net.clone()), &a.out)?;
    if let Some(p) = &a.log {
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(p)
            .map_err(|e| Failure::user(format!("{}: {e}", p.display())))?;
        for e in &trace.epochs {
            let line = serde_json::to_string(&EpochLine { seed: trace.seed, stats: e }).expect("epoch serializes");
            writeln!(f, "{line}").map_err(|e| Failure::user(format!("{}: {e}", p.display())))?;
        }
    }
    let test_n = a.test_n.unwrap_or(recipe.test_n);
    if test_n > 0 {
        let test_seed = a.test_seed.unwrap_or(recipe.test_seed);
        let m = evaluate(&net, &dataset(&cfg, test_n, test_seed)?, 32)?;
        log(format!("held-out {} over {test_n} images (seed {test_seed}): {m:.4}", metric_name(cfg.task)));
    }
    println!("wrote {} ({} parameters)", a.out.display(), net.param_count());
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> Result<(), Failure> {
    let net = match load(&a.checkpoint)? {
        Checkpoint::Float(n) => n,
        Checkpoint::Quantized(_) => return Err(Failure::user(format!("{} is already quantized", a.checkpoint.display()))),
    };
    ensure_writable(&a.out)?;
    let recipe = ToyRecipe::for_task(net.config.task);
    let n = a.calib_n.unwrap_or(recipe.calib_n);
    let seed = a.calib_seed.unwrap_or(recipe.train_seed);
    log(format!("calibrating on {n} images (seed {seed})"));
    let stats = calibrate_samples(&net, &dataset(&net.config, n, seed)?, a.batch_size)?;
    let q = quantize_network(&net, &stats)?;
    let bytes = encode_checkpoint(&Checkpoint::Quantized(q))?;
    write_file(&a.out, &bytes)?;
    let before = fs::metadata(&a.checkpoint).map(|m| m.len()).unwrap_or(0);
    let ratio = bytes.len() as f64 / before as f64;
    println!("wrote {} ({} bytes, {:.4} of {} bytes)", a.out.display(), bytes.len(), ratio, before);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub quantized: bool,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let ckpt = load(&a.checkpoint)?;
    let cfg = ckpt.config().clone();
    if let Some(t) = a.task {
        if t != cfg.task {
            return Err(Failure::user(format!("--task {t} but {} holds a {} model", a.checkpoint.display(), cfg.task)));
        }
    }
    let recipe = ToyRecipe::for_task(cfg.task);
    let n = a.n.unwrap_or(recipe.test_n);
    let seed = a.seed.unwrap_or(recipe.test_seed);
    log(format!("evaluating {} model on {n} images (seed {seed})", if ckpt.is_quantized() { "int8" } else { "float" }));
    let data = dataset(&cfg, n, seed)?;
    let value = evaluate_with(cfg.task, &data, a.batch_size, |x| ckpt.predict(x))?;
    let report = EvalReport {
        task: cfg.task,
        quantized: ckpt.is_quantized(),
        metric: metric_name(cfg.task).into(),
        value,
        n,
        seed,
    };
    match a.format {
        Format::Human => println!("{} {:.4}", report.metric, report.value),
        Format::Structured => print!("{}", toml::to_string(&report).expect("report serializes")),
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<Vec<usize>, Failure> {
    let dims: Result<Vec<usize>, _> = s.split(['x', 'X', ',']).map(|d| d.trim().parse()).collect();
    match dims {
        Ok(d) if !d.is_empty() && d.iter().all(|&v| v > 0) => Ok(d),
        _ => Err(Failure::user(format!("bad --input-shape {s:?}, expected CxHxW"))),
    }
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let bytes = fs::read(&a.target).map_err(|e| Failure::user(format!("{}: {e}", a.target.display())))?;
    let table = energy_table(a.energy_table.as_deref())?;
    let input = a.input_shape.as_deref().map(parse_shape).transpose()?;
    let name = a
        .name
        .clone()
        .unwrap_or_else(|| a.target.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let (spec, default_input) = if bytes.starts_with(&MAGIC) {
        let ckpt = load(&a.target)?;
        let net = NetworkGraph::build(ckpt.config())?;
        (spec_of_graph(&net), Some(net.config.input.to_vec()))
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Failure::user(format!("{} is neither a spec nor a checkpoint", a.target.display())))?;
        (parse_spec(&text)?, None)
    };
    let report = analyze_spec(&name, &spec, input.as_deref().or(default_input.as_deref()), &table)?;
    let format = match a.format {
        Format::Human => ReportFormat::Human,
        Format::Structured => ReportFormat::Structured,
    };
    let text = render_report(&report, format, a.paper_convention);
    if let Some(p) = &a.out {
        write_file(p, text.as_bytes())?;
    }
    print!("{text}");
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<(), Failure> {
    let ckpt = load(&a.checkpoint)?;
    let cfg = ckpt.config().clone();
    if cfg.task == Task::Seg && a.out.is_none() {
        return Err(Failure::user("segmentation predict needs --out for the mask"));
    }
    if let Some(p) = &a.out {
        ensure_writable(p)?;
    }
    let img = import_pgm(&a.image).map_err(|e| {
        let mut f = Failure::from(e);
        f.msg = format!("{}: {}", a.image.display(), f.msg);
        f
    })?;
    let [c, h, w] = cfg.input;
    if c != 1 {
        return Err(Failure::user(format!("model expects {c} channels; PGM images have one")));
    }
    let (ih, iw) = (img.shape()[2], img.shape()[3]);
    let x = if (ih, iw) == (h, w) { img } else { resize_nearest(&img, h, w)? };
    let probs = ckpt.predict(&x)?;
    match cfg.task {
        Task::Cls => {
            let mut scores = toml::Table::new();
            for (k, &p) in probs.data().iter().enumerate() {
                let label = if cfg.num_classes == SHAPE_NAMES.len() { SHAPE_NAMES[k].to_string() } else { format!("label{k}") };
                println!("{label} {p:.6}");
                scores.insert(label, toml::Value::Float(p as f64));
            }
            if let Some(p) = &a.out {
                write_file(p, toml::to_string(&scores).expect("scores serialize").as_bytes())?;
            }
        }
        Task::Seg => {
            let mask = probs.map(|p| if p >= 0.5 { 1.0f32 } else { 0.0 });
            let mask = Tensor::new(&[1, 1, h, w], mask.into_data())?;
            let mask = if (ih, iw) == (h, w) { mask } else { resize_nearest(&mask, ih, iw)? };
            let out = a.out.as_ref().expect("checked above");
            export_pgm(&mask, out)?;
            let fg = mask.data().iter().filter(|&&v| v > 0.0).count();
            println!("wrote {} ({fg} of {} pixels foreground)", out.display(), mask.len());
        }
    }
    Ok(())
}

pub fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let opts = VerifyOptions {
        only: (!a.only.is_empty()).then(|| a.only.iter().copied().collect::<BTreeSet<u32>>()),
        energy: energy_table(a.energy_table.as_deref())?,
    };
    if let Some(p) = &a.out {
        ensure_writable(p)?;
    }
    let report = run_verify(&opts)?;
    print!("{}", report.table());
    if let Some(p) = &a.out {
        write_file(p, report.to_toml().as_bytes())?;
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Failure::user(format!("{failed} of {} checks failed", report.checks.len())));
    }
    Ok(())
}
