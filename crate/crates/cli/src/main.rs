mod config;

use std::path::Path;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use light_yolo::data::{synth, Dataset, Split};
use light_yolo::gradsuite::{negative_control, run_suite, SUITE_TOL};
use light_yolo::metrics::fps_bench;
use light_yolo::model::{checkpoint, Arch, Detector, ModelConfig, COST_REF_SIZE};
use light_yolo::model::nms::NMS_IOU;
use light_yolo::train::{evaluate_indices, fit, EpochLog};
use light_yolo::Error;

use config::{parse_pairs, parse_split, RunConfig};

/// Lightweight fire and smoke detector: data, training, evaluation and checks.
#[derive(Parser, Debug)]
#[command(name = "light-yolo", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// `key = value` file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<String>,
    #[arg(long, global = true, value_parser = ["toy", "paper"])]
    profile: Option<String>,
    #[arg(long, global = true, value_parser = ["baseline", "light"])]
    model: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    nc: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    img: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    batch: Option<String>,
    #[arg(long, global = true, value_name = "F")]
    lr: Option<String>,
    /// Stop after this many optimizer steps.
    #[arg(long, global = true, value_name = "N")]
    iters: Option<String>,
    #[arg(long = "box", global = true, value_parser = ["iou", "giou", "diou", "ciou", "eiou", "siou"])]
    box_kind: Option<String>,
    #[arg(long, global = true, value_parser = ["leakyrelu", "hswish", "mish"])]
    act: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<String>,
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    weights: Option<String>,
    /// Worker threads; 1 is bit-reproducible.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a synthetic flame/smoke dataset to --data.
    Synth {
        /// Number of images.
        #[arg(long, value_name = "N")]
        n: Option<String>,
    },
    /// Train on --data and save the best checkpoint to --weights.
    Train,
    /// Per-class AP, precision, recall and mAP@0.5 of --weights.
    Eval {
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Per-layer parameter and FLOP table for both models at 640.
    Cost,
    /// Batch-1 inference timing.
    Bench {
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
    /// Finite-difference gradient checks for every layer type.
    Gradcheck,
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Label { .. } | Error::InvalidBox(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

impl Opts {
    fn pairs(&self) -> Vec<(String, String)> {
        let flags = [
            ("profile", &self.profile),
            ("model", &self.model),
            ("nc", &self.nc),
            ("img", &self.img),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("lr", &self.lr),
            ("iters", &self.iters),
            ("box", &self.box_kind),
            ("act", &self.act),
            ("seed", &self.seed),
            ("data", &self.data),
            ("weights", &self.weights),
            ("threads", &self.threads),
        ];
        flags.iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect()
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let file = match &cli.opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Validation(format!("cannot read {p}: {e}")))?;
            parse_pairs(&text, p).map_err(Failure::Validation)?
        }
        None => Vec::new(),
    };
    let mut flags = cli.opts.pairs();
    if let Cmd::Synth { n: Some(n) } = &cli.cmd {
        flags.push(("n".into(), n.clone()));
    }
    RunConfig::resolve(&file, &flags).map_err(Failure::Validation)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = resolve(&cli).and_then(|cfg| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        run(&cli.cmd, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: &Cmd, cfg: &RunConfig) -> Outcome {
    match cmd {
        Cmd::Synth { .. } => cmd_synth(cfg),
        Cmd::Train => cmd_train(cfg),
        Cmd::Eval { split } => cmd_eval(cfg, parse_split(split).map_err(Failure::Validation)?),
        Cmd::Cost => cmd_cost(cfg),
        Cmd::Bench { runs } => cmd_bench(cfg, *runs),
        Cmd::Gradcheck => cmd_gradcheck(cfg),
    }
}

fn cmd_synth(cfg: &RunConfig) -> Outcome {
    let s = cfg.train.img;
    synth::generate(cfg.synth_n, cfg.train.seed, &cfg.data, s, s)?;
    println!("wrote {} {s}x{s} images to {}", cfg.synth_n, cfg.data.display());
    Ok(())
}

fn epoch_line(l: &EpochLog) {
    let val = l.val_map50.map_or("-".to_string(), |m| format!("{m:.4}"));
    let s = &l.mean;
    println!(
        "{}\t{}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{:.5}\t{val}",
        l.epoch + 1,
        l.iters,
        s.loss,
        s.box_term,
        s.obj_term,
        s.cls_term,
        s.lr
    );
}

fn cmd_train(cfg: &RunConfig) -> Outcome {
    let ds = Dataset::open(&cfg.data, cfg.model.nc, cfg.train.seed)?;
    let weights = cfg.weights();
    let mut model = Detector::<f32>::build(cfg.model.clone(), cfg.train.seed)?;
    println!("# {:?} profile, {} model, {} params, {} train images", cfg.profile, cfg.model.arch, model.num_params(), ds.indices(Split::Train).len());
    println!("epoch\titers\tloss\tbox\tobj\tcls\tlr\tval_map50");
    let out = fit(&mut model, &ds, &cfg.train, Some(&weights), epoch_line)?;
    // Report on the weights that were kept, as `eval` would see them.
    checkpoint::load(&mut model.store, &weights)?;
    let train = evaluate_indices(&model, &ds, &ds.indices(Split::Train), cfg.train.img, cfg.train.batch)?;
    if let Some(b) = out.best_map50 {
        println!("best_val_map50\t{b:.4}");
    }
    println!("train_map50\t{:.4}", train.map50);
    println!("saved\t{}", weights.display());
    Ok(())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Detector<f32>, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let tensors = checkpoint::decode::<f32>(&bytes)?;
    if let Some(nc) = checkpoint::class_count(&tensors) {
        if nc != cfg.model.nc {
            return Err(Failure::Validation(format!("checkpoint has {nc} classes, config has {}", cfg.model.nc)));
        }
    }
    let mut model = Detector::<f32>::build(cfg.model.clone(), cfg.train.seed)?;
    checkpoint::restore(&mut model.store, tensors)?;
    Ok(model)
}

fn cmd_eval(cfg: &RunConfig, split: Split) -> Outcome {
    let model = load_model(cfg, &cfg.weights())?;
    let ds = Dataset::open(&cfg.data, cfg.model.nc, cfg.train.seed)?;
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Failure::Validation(format!("{split} split is empty")));
    }
    let r = evaluate_indices(&model, &ds, &idx, cfg.train.img, cfg.train.batch)?;
    println!("# {split} split, {} images", idx.len());
    println!("class\tap50\tprecision\trecall\tlabels");
    for (c, m) in r.classes.iter().enumerate() {
        match m {
            Some(m) => println!("{c}\t{:.4}\t{:.4}\t{:.4}\t{}", m.ap, m.precision, m.recall, m.num_gt),
            None => println!("{c}\t-\t-\t-\t0"),
        }
    }
    println!("mAP@0.5\t{:.4}", r.map50);
    Ok(())
}

fn cmd_cost(cfg: &RunConfig) -> Outcome {
    let s = COST_REF_SIZE;
    let mut totals = Vec::new();
    println!("layer\tparams\tflops");
    for arch in [Arch::Baseline, Arch::Light] {
        let mc = ModelConfig {
            arch,
            img: s,
            ..cfg.model.clone()
        };
        let report = Detector::<f32>::build(mc, 0)?.cost(s, s);
        for row in &report.rows {
            println!("{arch}/{}\t{}\t{}", row.name, row.cost.params, row.cost.flops);
        }
        println!("{arch}/total\t{}\t{}", report.total.params, report.total.flops);
        totals.push(report.total);
    }
    let pct = |a: u64, b: u64| 100.0 * (a as f64 - b as f64) / a as f64;
    println!(
        "reduction_pct\t{:.2}\t{:.2}",
        pct(totals[0].params, totals[1].params),
        pct(totals[0].flops, totals[1].flops)
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, runs: usize) -> Outcome {
    let model = match cfg.weights_given() {
        Some(p) => load_model(cfg, p)?,
        None => Detector::<f32>::build(cfg.model.clone(), cfg.train.seed)?,
    };
    let s = cfg.train.img;
    let scene = synth::render(cfg.train.seed, 0, s, s);
    let x = scene.image.reshaped(&[1, 3, s, s])?;
    let r = fps_bench(runs, 2, || model.detect(&x, 0.25, NMS_IOU).map(|_| ()))?;
    println!("runs\tmean_ms\tp95_ms\tfps");
    println!("{}\t{:.3}\t{:.3}\t{:.2}", r.runs, r.mean_ms, r.p95_ms, r.fps);
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Outcome {
    let entries = run_suite(cfg.train.seed)?;
    println!("layer\tmax_rel_err\tchecked\tresult");
    let mut failed = 0;
    for e in &entries {
        let ok = e.passed();
        failed += usize::from(!ok);
        let note = e.report.error.as_deref().map(|m| format!(" ({m})")).unwrap_or_default();
        println!("{}\t{:.3e}\t{}\t{}{note}", e.name, e.report.max_rel_err, e.report.checked, if ok { "pass" } else { "FAIL" });
    }
    let neg = negative_control(cfg.train.seed);
    let caught = !neg.passed();
    println!(
        "{}\t{:.3e}\t{}\t{}",
        neg.name,
        neg.report.max_rel_err,
        neg.report.checked,
        if caught { "rejected (expected)" } else { "ACCEPTED" }
    );
    println!("# tolerance {SUITE_TOL:e}, {} of {} layers pass", entries.len() - failed, entries.len());
    if failed > 0 || !caught {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}
