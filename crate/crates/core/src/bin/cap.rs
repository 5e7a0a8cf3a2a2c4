//! Batch experiment driver: every subcommand reads config + flags, writes
//! data/metric artifacts plus a `run.meta`, logs to stderr, and exits 0 on
//! success, 1 on usage errors, 2 on runtime failures.

use cap_core::apr::AprConfig;
use cap_core::attacks::{AttackLoss, AttackMethod, AttackSpec};
use cap_core::config::{ConfigMap, Source};
use cap_core::data::{self, CorruptionKind, PhantomSpec, Sample};
use cap_core::error::CapError;
use cap_core::eval;
use cap_core::filter::{self, FilterConfig};
use cap_core::fmt::fmt6;
use cap_core::meta::RunMetaBuilder;
use cap_core::objectives::{self, Metric, MetricCombo};
use cap_core::trainer::{self, TrainMode, Trainer};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cap",
    about = "Contour-attention-preserving adversarial training laboratory",
    version,
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic lung-phantom dataset (images, masks, manifest).
    GenData(GenDataArgs),
    /// Run the self-guided filter over one PGM image.
    Filter(FilterArgs),
    /// Train a model (vanilla / trades / cap).
    Train(TrainArgs),
    /// Evaluate white-box attacks against a checkpoint.
    AttackEval(AttackEvalArgs),
    /// Corruption grid evaluation (CCE / ACE).
    CorruptEval(CorruptEvalArgs),
    /// Export gradient saliency maps for dataset samples.
    Saliency(SaliencyArgs),
    /// Train the metric or component ablation grid.
    Ablate(AblateArgs),
    /// Finite-difference check of every autodiff primitive and loss.
    Gradcheck(GradcheckArgs),
    /// Random sweep of the outer-loss envelope [0, 2+2β].
    BoundCheck(BoundCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    num_samples: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0.5)]
    positive_fraction: f64,
    #[arg(long, default_value_t = 0.03)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0.25)]
    contrast_lo: f64,
    #[arg(long, default_value_t = 0.45)]
    contrast_hi: f64,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 0.003)]
    temperature: f64,
    /// Use the literal per-window reference path instead of the fast one.
    #[arg(long)]
    naive: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set apr.gamma=0.0002 (repeatable;
    /// flags win over the config file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Checkpoint cadence in epochs (0 = final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct AttackEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated list from fgsm,rfgsm,pgd,mim.
    #[arg(long, default_value = "fgsm,rfgsm,pgd,mim")]
    method: String,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    eps: f32,
    #[arg(long, default_value_t = 2.0 / 255.0)]
    step: f32,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct CorruptEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated corruption kinds (default: all five).
    #[arg(long, default_value = "gaussian_noise,shot_noise,impulse_noise,contrast,brightness")]
    kinds: String,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    eps: f32,
    #[arg(long, default_value_t = 2.0 / 255.0)]
    step: f32,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cap on the number of samples exported (0 = all).
    #[arg(long, default_value_t = 16)]
    limit: usize,
    /// Fixed class logit to differentiate (default: predicted class).
    #[arg(long)]
    class: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    train_data: PathBuf,
    #[arg(long)]
    test_data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Grid to run: `metric` (outer x inner) or `components`
    /// (trades / +sgf / +apr / +hdm).
    #[arg(long, default_value = "metric")]
    grid: String,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Storage precision: f32 or f64.
    #[arg(long, default_value = "f64")]
    precision: String,
    /// Central-difference step (default 1e-5 for f64, 5e-3 for f32).
    #[arg(long)]
    h: Option<f64>,
    /// Max relative error (default 1e-5 for f64, 1e-3 for f32).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundCheckArgs {
    #[arg(long, default_value_t = 6.0)]
    beta: f64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    cap_core::parallel::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage/help text; route usage errors to
            // stderr with exit 1 (plain --help remains exit 0).
            let code = if e.use_stderr() { 1 } else { 0 };
            eprint!("{e}");
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Filter(a) => run_filter(a),
        Command::Train(a) => train(a),
        Command::AttackEval(a) => attack_eval(a),
        Command::CorruptEval(a) => corrupt_eval(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::BoundCheck(a) => bound_check(a),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("cap: error: {e}");
            std::process::exit(2);
        }
    }
}

type R = cap_core::Result<()>;

fn gen_data(a: GenDataArgs) -> R {
    let spec = PhantomSpec {
        image_size: a.image_size,
        num_samples: a.num_samples,
        positive_fraction: a.positive_fraction,
        lesion_contrast_range: (a.contrast_lo, a.contrast_hi),
        background_noise_sigma: a.noise_sigma,
        seed: a.seed,
        ..PhantomSpec::default()
    };
    let samples = data::generate_phantoms(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let files = data::save_dataset(&a.out, &samples)?;
    let mut meta = RunMetaBuilder::new("gen-data", a.seed)
        .with_setting("num_samples", a.num_samples)
        .with_setting("image_size", a.image_size)
        .with_setting("positive_fraction", a.positive_fraction)
        .with_setting("noise_sigma", a.noise_sigma)
        .with_setting("contrast_lo", a.contrast_lo)
        .with_setting("contrast_hi", a.contrast_hi);
    for f in &files {
        meta.add_artifact(&a.out, f)?;
    }
    meta.write(&a.out)?;
    eprintln!("cap: wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn run_filter(a: FilterArgs) -> R {
    let img = cap_core::image::pgm_read(&a.input)?;
    let cfg = FilterConfig {
        window_size: a.window,
        temperature: a.temperature,
    };
    let out = if a.naive {
        filter::naive_self_guided_filter(&img, &cfg)?
    } else {
        filter::self_guided_filter(&img, &cfg)?
    };
    cap_core::image::pgm_write(&a.output, &out)?;
    eprintln!("cap: filtered {} -> {}", a.input.display(), a.output.display());
    Ok(())
}

fn resolve_config(config: Option<&Path>, sets: &[String]) -> cap_core::Result<ConfigMap> {
    let mut cfg = ConfigMap::train_defaults();
    if let Some(path) = config {
        cfg.load_file(path)?;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CapError::Config(format!("--set wants KEY=VALUE, got {kv:?}")))?;
        cfg.apply(k.trim(), v.trim(), Source::Flag)?;
    }
    Ok(cfg)
}

fn sample_refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

fn train(a: TrainArgs) -> R {
    let cfg = resolve_config(a.config.as_deref(), &a.sets)?;
    let plan = cfg.to_train_plan()?;
    let train_set = data::load_dataset(&a.train_data)?;
    let test_set = data::load_dataset(&a.test_data)?;
    std::fs::create_dir_all(&a.out)?;

    let seed = plan.seed;
    let mut trainer = Trainer::new(plan)?;
    eprintln!(
        "cap: training mode={} epochs={} on {} samples",
        trainer.plan().mode.name(),
        trainer.plan().epochs,
        train_set.len()
    );
    let mut rows = Vec::new();
    let total_epochs = trainer.plan().epochs;
    let cadence = a.checkpoint_every;
    while trainer.epoch() < total_epochs {
        let chunk = if cadence == 0 {
            total_epochs - trainer.epoch()
        } else {
            cadence.min(total_epochs - trainer.epoch())
        };
        rows.extend(trainer.train_epochs(
            &sample_refs(&train_set),
            &sample_refs(&test_set),
            chunk,
            &mut |_, _, _| {},
        )?);
        if cadence != 0 && trainer.epoch() < total_epochs {
            let ckpt = a.out.join(format!("epoch{:04}.capt", trainer.epoch()));
            trainer::save_checkpoint(&ckpt, &trainer)?;
        }
        if let Some(last) = rows.last() {
            eprintln!(
                "cap: epoch {} lr {} loss {} clean {} adv {}",
                last.epoch,
                fmt6(last.lr),
                fmt6(last.train_loss),
                fmt6(last.clean_acc),
                fmt6(last.adv_acc)
            );
        }
    }

    let log_path = a.out.join("epoch_log.csv");
    trainer::write_epoch_log(&log_path, &rows)?;
    let ckpt_path = a.out.join("model.capt");
    trainer::save_checkpoint(&ckpt_path, &trainer)?;

    let mut meta = RunMetaBuilder::new("train", seed).with_config(&cfg);
    meta.add_artifact(&a.out, &log_path)?;
    meta.add_artifact(&a.out, &ckpt_path)?;
    meta.write(&a.out)?;
    Ok(())
}

fn attack_eval(a: AttackEvalArgs) -> R {
    let model = trainer::load_model(&a.checkpoint)?;
    let samples = data::load_dataset(&a.data)?;
    let refs = sample_refs(&samples);
    let classes = model.config().num_classes;
    let clean = trainer::accuracy_on(&model, &refs, a.batch_size, classes)?;

    let mut csv = String::from("method,eps,clean_acc,adv_acc\n");
    for name in a.method.split(',') {
        let method = AttackMethod::parse(name.trim())?;
        let spec = AttackSpec {
            method,
            epsilon: a.eps,
            step_size: a.step,
            steps: a.iters,
            momentum: 1.0,
            loss: AttackLoss::Ce,
            random_start: !a.no_random_start,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let adv = trainer::adv_accuracy_on(&model, &refs, &spec, a.batch_size, classes, &mut rng)?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            method.name(),
            fmt6(a.eps as f64),
            fmt6(clean),
            fmt6(adv)
        ));
        eprintln!("cap: {} adv acc {}", method.name(), fmt6(adv));
    }
    write_artifact_with_meta(&a.out, &csv, "attack-eval", a.seed)
}

fn corrupt_eval(a: CorruptEvalArgs) -> R {
    let model = trainer::load_model(&a.checkpoint)?;
    let samples = data::load_dataset(&a.data)?;
    let refs = sample_refs(&samples);
    let kinds: Vec<CorruptionKind> = a
        .kinds
        .split(',')
        .map(|k| CorruptionKind::parse(k.trim()))
        .collect::<cap_core::Result<_>>()?;
    let attack = AttackSpec {
        method: AttackMethod::Pgd,
        epsilon: a.eps,
        step_size: a.step,
        steps: a.iters,
        momentum: 1.0,
        loss: AttackLoss::Ce,
        random_start: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let report = eval::corruption_eval(&model, &refs, &kinds, &attack, a.batch_size, a.seed, &mut rng)?;
    eprintln!(
        "cap: mean CCE {} mean ACE {}",
        fmt6(report.mean_cce()),
        fmt6(report.mean_ace())
    );
    write_artifact_with_meta(&a.out, &report.csv(), "corrupt-eval", a.seed)
}

fn saliency_cmd(a: SaliencyArgs) -> R {
    let model = trainer::load_model(&a.checkpoint)?;
    let samples = data::load_dataset(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let limit = if a.limit == 0 {
        samples.len()
    } else {
        a.limit.min(samples.len())
    };
    let mut meta = RunMetaBuilder::new("saliency", 0);
    for (i, s) in samples.iter().take(limit).enumerate() {
        let map = eval::saliency(&model, &s.image, a.class)?;
        let path = a.out.join(format!("{i:05}_saliency.pgm"));
        cap_core::image::pgm_write(&path, &map)?;
        meta.add_artifact(&a.out, &path)?;
    }
    meta.write(&a.out)?;
    eprintln!("cap: wrote {limit} saliency maps to {}", a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> R {
    let cfg = resolve_config(a.config.as_deref(), &a.sets)?;
    let base_plan = cfg.to_train_plan()?;
    let train_set = data::load_dataset(&a.train_data)?;
    let test_set = data::load_dataset(&a.test_data)?;
    std::fs::create_dir_all(&a.out)?;

    struct Cell {
        label: String,
        plan: cap_core::trainer::TrainPlan,
    }
    let mut cells = Vec::new();
    match a.grid.as_str() {
        "metric" => {
            for outer in [Metric::Se, Metric::Kl] {
                for inner in [Metric::Se, Metric::Kl] {
                    let mut plan = base_plan.clone();
                    plan.combo = MetricCombo { outer, inner };
                    cells.push(Cell {
                        label: format!("{},{}", outer.name(), inner.name()),
                        plan,
                    });
                }
            }
        }
        "components" => {
            // trades baseline, +SGF, +APR, +HDM; kl/kl until HDM lands.
            let kl = MetricCombo {
                outer: Metric::Kl,
                inner: Metric::Kl,
            };
            let mut trades = base_plan.clone();
            trades.mode = TrainMode::Trades;
            trades.combo = kl;
            cells.push(Cell {
                label: "-,-,-".into(),
                plan: trades,
            });

            let mut sgf = base_plan.clone();
            sgf.mode = TrainMode::Cap;
            sgf.combo = kl;
            sgf.filter_enabled = true;
            sgf.apr = AprConfig {
                enabled: false,
                ..sgf.apr
            };
            cells.push(Cell {
                label: "sgf,-,-".into(),
                plan: sgf,
            });

            let mut apr = base_plan.clone();
            apr.mode = TrainMode::Cap;
            apr.combo = kl;
            apr.filter_enabled = true;
            apr.apr.enabled = true;
            cells.push(Cell {
                label: "sgf,apr,-".into(),
                plan: apr,
            });

            let mut full = base_plan.clone();
            full.mode = TrainMode::Cap;
            full.combo = MetricCombo::default();
            full.filter_enabled = true;
            full.apr.enabled = true;
            cells.push(Cell {
                label: "sgf,apr,hdm".into(),
                plan: full,
            });
        }
        other => {
            return Err(CapError::Config(format!(
                "unknown grid {other:?}, want metric|components"
            )))
        }
    }

    let header = match a.grid.as_str() {
        "metric" => "outer,inner,status,clean_acc,pgd10_acc\n",
        _ => "sgf,apr,hdm,status,clean_acc,pgd10_acc\n",
    };
    let mut csv = String::from(header);
    for cell in cells {
        eprintln!("cap: ablate cell [{}]", cell.label);
        match run_cell(&cell.plan, &train_set, &test_set) {
            Ok((clean, adv)) => {
                csv.push_str(&format!("{},ok,{},{}\n", cell.label, fmt6(clean), fmt6(adv)));
            }
            Err(e) => {
                eprintln!("cap: cell [{}] failed: {e}", cell.label);
                csv.push_str(&format!("{},failed,NAN,NAN\n", cell.label));
            }
        }
    }
    let out_csv = a.out.join("ablation.csv");
    std::fs::write(&out_csv, &csv)?;
    let mut meta = RunMetaBuilder::new("ablate", base_plan.seed).with_config(&cfg);
    meta.add_artifact(&a.out, &out_csv)?;
    meta.write(&a.out)?;
    Ok(())
}

fn run_cell(
    plan: &cap_core::trainer::TrainPlan,
    train_set: &[Sample],
    test_set: &[Sample],
) -> cap_core::Result<(f64, f64)> {
    let mut t = Trainer::new(plan.clone())?;
    t.train(&sample_refs(train_set), &sample_refs(test_set))?;
    let refs = sample_refs(test_set);
    let classes = plan.model.num_classes;
    let clean = trainer::accuracy_on(&t.model, &refs, plan.batch_size, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(999);
    let adv = trainer::adv_accuracy_on(
        &t.model,
        &refs,
        &plan.eval_attack,
        plan.batch_size,
        classes,
        &mut rng,
    )?;
    Ok((clean, adv))
}

fn gradcheck(a: GradcheckArgs) -> R {
    let (h, tol, items) = match a.precision.as_str() {
        "f64" => {
            let h = a.h.unwrap_or(1e-5);
            let tol = a.tol.unwrap_or(1e-5);
            (h, tol, cap_core::battery::run_battery::<f64>(h, tol, a.seed)?)
        }
        "f32" => {
            let h = a.h.unwrap_or(5e-3);
            let tol = a.tol.unwrap_or(1e-3);
            (h, tol, cap_core::battery::run_battery::<f32>(h, tol, a.seed)?)
        }
        other => {
            return Err(CapError::Config(format!(
                "unknown precision {other:?}, want f32|f64"
            )))
        }
    };
    let mut csv = String::from("case,max_rel_err,tol,status\n");
    let mut failures = 0;
    for (name, report) in &items {
        eprintln!("cap: gradcheck {name}: {report}");
        csv.push_str(&format!(
            "{name},{},{},{}\n",
            fmt6(report.max_rel_err),
            fmt6(tol),
            if report.passed { "pass" } else { "fail" }
        ));
        if !report.passed {
            failures += 1;
        }
    }
    if let Some(out) = &a.out {
        std::fs::write(out, &csv)?;
    }
    eprintln!(
        "cap: gradcheck {} cases at h={h}, {} failures",
        items.len(),
        failures
    );
    if failures > 0 {
        return Err(CapError::NonFinite(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

fn bound_check(a: BoundCheckArgs) -> R {
    let report = objectives::bound_check(a.samples, a.beta, a.classes, a.seed)?;
    let line = format!(
        "samples,beta,classes,min_loss,max_loss,bound,violations,decomp_max_rel_err\n{},{},{},{},{},{},{},{}\n",
        report.samples,
        fmt6(report.beta),
        report.classes,
        fmt6(report.min_loss),
        fmt6(report.max_loss),
        fmt6(report.bound),
        report.violations,
        fmt6(report.decomposition_max_rel_err)
    );
    if let Some(out) = &a.out {
        std::fs::write(out, &line)?;
    }
    eprintln!(
        "cap: bound check: {} samples, max {} of bound {}, {} violations",
        report.samples,
        fmt6(report.max_loss),
        fmt6(report.bound),
        report.violations
    );
    if !report.passed() {
        return Err(CapError::InvalidArgument(format!(
            "bound violated {} times (worst excess {})",
            report.violations,
            fmt6(report.worst_violation)
        )));
    }
    Ok(())
}

fn write_artifact_with_meta(out: &Path, content: &str, subcommand: &str, seed: u64) -> R {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, content)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    let mut meta = RunMetaBuilder::new(subcommand, seed);
    meta.add_artifact(dir, out)?;
    meta.write(dir)?;
    Ok(())
}
