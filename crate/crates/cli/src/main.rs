use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use lmlt::analysis::{compare_wsa_lmlt, reference_report};
use lmlt::attention::{lmlt_forward, window_self_attention, AblationFlags, AttnParams, HeadPlan, LmltParams, PeParams};
use lmlt::autodiff::{Tape, Var};
use lmlt::error::{ImageError, TrainError, WeightIoError};
use lmlt::metrics::{png_load, png_save, psnr_y, ssim_y, PlanarImage};
use lmlt::model::{
    gradcheck_config, gradcheck_model, init_weights, load_weights, save_weights, toy_config, toy_pair, train_toy,
    upscale_parallel, ModelConfig, TrainOptions,
};
use lmlt::rng::Rng;
use lmlt::selftest::{check_names, run_selftest};
use lmlt::tensor::{FillSpec, Tensor};

mod settings;

use settings::{ModelArgs, Settings};

/// Failure carrying the process exit code.
#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 1, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
}

impl From<WeightIoError> for CliError {
    fn from(e: WeightIoError) -> Self {
        CliError::io(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        match e {
            ImageError::Format(_) => CliError::usage(e.to_string()),
            _ => CliError::io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError { code: 2, msg: e.to_string() },
            _ => CliError::usage(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser, Debug)]
#[command(name = "lmlt", version, about = "Low-to-high multi-level transformer super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write freshly initialised (or all-zero) weights
    Init(InitArgs),
    /// Upscale a PNG with a weight file
    Upscale(UpscaleArgs),
    /// Report parameters, MACs and activations at 1280×720 output
    Count(CountArgs),
    /// Finite-difference check of every parameter gradient
    Gradcheck(GradcheckArgs),
    /// Cascade vs plain window attention: analytic MACs and wall-clock
    Bench(BenchArgs),
    /// Overfit a single synthetic patch
    TrainToy(TrainArgs),
    /// Run the invariant suite
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct InitArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Every parameter zero
    #[arg(long)]
    zero: bool,
}

#[derive(Args, Debug)]
struct UpscaleArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "in")]
    input: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    weights: Option<String>,
    /// Reference HR image for PSNR/SSIM
    #[arg(long = "ref")]
    reference: Option<String>,
    /// Border removed before PSNR/SSIM; defaults to the scale
    #[arg(long)]
    shave: Option<usize>,
    /// Timed runs after one warm-up; the median is printed
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Write the per-layer report as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print every layer row
    #[arg(long)]
    layers: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tol: Option<f64>,
    /// Negative control: corrupt one gradient entry
    #[arg(long, hide = true)]
    corrupt_grad: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Head counts to compare
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    grid: Vec<u64>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 36)]
    channels: usize,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// LR patch side
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_weights: Option<String>,
    /// Per-step loss CSV; defaults to <out-weights>.loss.csv
    #[arg(long)]
    loss_csv: Option<String>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Perturb the named invariant to show the runner catches it
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Upscale(a) => cmd_upscale(a),
        Command::Count(a) => cmd_count(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_init(a: InitArgs) -> CliResult {
    let mut s = Settings::resolve(&a.model, ModelConfig::default(), &["out", "seed"])?;
    let out = s.require::<String>("out", a.out)?;
    let seed = s.require("seed", a.seed.or(Some(0)))?;
    print!("{}", s.echo());
    let mut ws = init_weights(&s.model, seed);
    if a.zero {
        ws.zero_all();
    }
    ws.meta.insert("seed".into(), seed.to_string());
    save_weights(&ws, Path::new(&out))?;
    println!("wrote {} parameters to {out}", ws.numel());
    Ok(())
}

fn to_rgb(img: PlanarImage) -> PlanarImage {
    if img.channels == 3 {
        return img;
    }
    let data = img.data.iter().flat_map(|&v| [v, v, v]).collect();
    PlanarImage { channels: 3, data, ..img }
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[xs.len() / 2]
}

fn cmd_upscale(a: UpscaleArgs) -> CliResult {
    let weights_flag = a.weights.clone().or_else(|| weights_from_config(&a.model));
    let weights_path = weights_flag.ok_or_else(|| CliError::usage("missing required --weights"))?;
    let ws = load_weights(Path::new(&weights_path))?;
    let stored = ws.config().map_err(|e| CliError::usage(e.to_string()))?;
    let extras = ["in", "out", "weights", "ref", "shave"];
    let mut s = Settings::resolve(&a.model, stored.unwrap_or_default(), &extras)?;
    if let Some(stored) = stored.filter(|c| *c != s.model) {
        return Err(CliError::usage(format!(
            "weights in {weights_path} were built for a different config (scale {} vs requested {})",
            stored.scale, s.model.scale
        )));
    }
    ws.check_against(&s.model).map_err(|e| CliError::usage(e.to_string()))?;
    let input = s.require::<String>("in", a.input)?;
    let out = s.require::<String>("out", a.out)?;
    s.require::<String>("weights", Some(weights_path))?;
    let reference = s.pick::<String>("ref", a.reference, None)?;
    let shave = s.require("shave", a.shave.or(Some(s.model.scale)))?;
    print!("{}", s.echo());

    let img = to_rgb(png_load(Path::new(&input))?);
    let x: Tensor<f32> = img.to_tensor();
    let mut y = upscale_parallel(&x, &ws, &s.model).map_err(|e| CliError::usage(e.to_string()))?;
    let mut times = Vec::with_capacity(a.runs);
    for _ in 0..a.runs {
        let t = Instant::now();
        y = upscale_parallel(&x, &ws, &s.model).map_err(|e| CliError::usage(e.to_string()))?;
        times.push(t.elapsed());
    }
    let result = PlanarImage::from_tensor(&y).map_err(CliError::from)?;
    png_save(&result, Path::new(&out))?;
    println!("output {}x{} -> {out}", result.width, result.height);
    if !times.is_empty() {
        println!("time_ms_median={:.3} (runs={})", median(times).as_secs_f64() * 1e3, a.runs);
    }
    if let Some(r) = reference {
        let r = to_rgb(png_load(Path::new(&r))?);
        let psnr = psnr_y(&result, &r, shave)?;
        let ssim = ssim_y(&result, &r, shave)?;
        if psnr.is_infinite() {
            println!("psnr_y=inf");
        } else {
            println!("psnr_y={psnr:.4}");
        }
        println!("ssim_y={ssim:.6}");
    }
    Ok(())
}

/// `weights=` from the config file, so an echoed config can be replayed alone.
fn weights_from_config(m: &ModelArgs) -> Option<String> {
    let text = std::fs::read_to_string(m.config.as_ref()?).ok()?;
    text.lines()
        .filter_map(|l| l.trim().split_once('='))
        .filter(|(k, _)| k.trim() == "weights")
        .map(|(_, v)| v.trim().to_string())
        .last()
}

fn cmd_count(a: CountArgs) -> CliResult {
    let s = Settings::resolve(&a.model, ModelConfig::default(), &[])?;
    print!("{}", s.echo());
    let r = reference_report(&s.model).map_err(|e| CliError::usage(e.to_string()))?;
    let t = r.total();
    if a.layers {
        for row in &r.rows {
            println!("{:<36} {:>10} {:>16} {:>14}", row.name, row.params, row.macs, row.acts);
        }
    }
    println!("input {}x{} (padded {}x{}), output 1280x720", r.input.1, r.input.0, r.padded.1, r.padded.0);
    println!("params={} ({:.1}K)", t.params, t.params as f64 / 1e3);
    println!("flops={} ({:.1}G MACs)", t.macs, t.macs as f64 / 1e9);
    println!("acts={} ({:.1}M)", t.acts, t.acts as f64 / 1e6);
    if let Some(p) = a.csv {
        std::fs::write(&p, r.to_csv()).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
        println!("csv -> {}", p.display());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CliResult {
    let mut s = Settings::resolve(&a.model, gradcheck_config(), &["size", "seed", "tol"])?;
    let size = s.require("size", a.size.or(Some(16)))?;
    let seed = s.require("seed", a.seed.or(Some(0)))?;
    let tol = s.require("tol", a.tol.or(Some(1e-3)))?;
    print!("{}", s.echo());
    let t = Instant::now();
    let r = gradcheck_model(&s.model, size, seed, tol, a.corrupt_grad).map_err(|e| CliError::usage(e.to_string()))?;
    let worst = r.worst_param().unwrap_or("-");
    println!(
        "checked {} coordinates over {} parameters in {:.1}s",
        r.report.checked,
        r.params.len(),
        t.elapsed().as_secs_f64()
    );
    println!("max_rel_err={:.3e} worst={worst}", r.report.max_rel_err);
    if r.report.pass {
        println!("gradcheck PASS");
        Ok(())
    } else {
        let bad: Vec<_> = r
            .params
            .iter()
            .zip(&r.report.per_input)
            .filter(|(_, &e)| e > tol)
            .map(|(n, e)| format!("{n} ({e:.2e})"))
            .collect();
        println!("gradcheck FAIL: {}", bad.join(", "));
        Err(CliError::usage(format!("max relative error {:.3e} at {worst}", r.report.max_rel_err)))
    }
}

fn random_attn(d: usize, rng: &mut Rng) -> AttnParams<f32> {
    let mut w = |shape: [usize; 4], r: f64| {
        Var::constant(Tensor::new(shape, FillSpec::Uniform { rng, lo: -r, hi: r }).expect("small tensor"))
    };
    let r = 1.0 / (d as f64).sqrt();
    AttnParams {
        wq: w([1, 1, d, d], r),
        wk: w([1, 1, d, d], r),
        wv: w([1, 1, d, d], r),
        wo: w([1, 1, d, d], r),
        bq: Some(w([1, 1, 1, d], 0.1)),
        bk: Some(w([1, 1, 1, d], 0.1)),
        bv: Some(w([1, 1, 1, d], 0.1)),
        bo: Some(w([1, 1, 1, d], 0.1)),
        pe: PeParams::Lepe { weight: w([d, 1, 3, 3], 0.3), bias: w([1, d, 1, 1], 0.1) },
    }
}

fn time_median(runs: usize, mut f: impl FnMut()) -> Duration {
    f();
    median((0..runs.max(1)).map(|_| {
        let t = Instant::now();
        f();
        t.elapsed()
    }).collect())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    println!("# effective config\nsize={}\nchannels={}\nwindow={}\nruns={}\n", a.size, a.channels, a.window, a.runs);
    let (n, d, m) = (a.size as u64, a.channels as u64, a.window as u64);
    let rows = compare_wsa_lmlt(n, n, d, m, &a.grid, true);
    let mut rng = Rng::new(0);
    let x = Var::constant(
        Tensor::<f32>::new([1, a.channels, a.size, a.size], FillSpec::Uniform { rng: &mut rng, lo: -1.0, hi: 1.0 })
            .expect("bench input"),
    );
    let wsa = random_attn(a.channels, &mut rng);
    let wsa_time = if a.size % a.window == 0 {
        Some(time_median(a.runs, || {
            let mut t = Tape::new();
            window_self_attention(&mut t, &x, &wsa, a.window, true, "wsa").expect("aligned input");
        }))
    } else {
        None
    };
    let flags = AblationFlags { aggregation: false, gelu: false, modulate: false, ..AblationFlags::default() };
    println!("heads,lmlt_macs,wsa_macs,ratio,lmlt_ms,wsa_ms,time_ratio");
    for r in rows {
        let plan = HeadPlan::new(a.channels, r.heads, 1, a.window).map_err(|e| CliError::usage(e.to_string()))?;
        let aligned = a.size % (a.window << (plan.levels(true) - 1)) == 0;
        let timing = match (aligned, wsa_time) {
            (true, Some(w)) => {
                let params = LmltParams {
                    layers: (0..r.heads).map(|_| vec![random_attn(plan.per_head, &mut rng)]).collect(),
                    merge: None,
                };
                let t = time_median(a.runs, || {
                    let mut tape = Tape::new();
                    lmlt_forward(&mut tape, &x, &plan, &params, &flags, "lmlt").expect("aligned input");
                });
                let (lt, wt) = (t.as_secs_f64() * 1e3, w.as_secs_f64() * 1e3);
                format!("{lt:.3},{wt:.3},{:.3}", lt / wt)
            }
            _ => "n/a,n/a,n/a".into(),
        };
        println!("{},{},{},{:.6},{timing}", r.heads, r.lmlt, r.wsa, r.ratio());
    }
    Ok(())
}

fn cmd_train_toy(a: TrainArgs) -> CliResult {
    let extras = ["patch", "steps", "lr", "seed", "out_weights", "loss_csv"];
    let mut s = Settings::resolve(&a.model, toy_config(), &extras)?;
    let defaults = TrainOptions::default();
    let patch = s.require("patch", a.patch.or(Some(32)))?;
    let steps = s.require("steps", a.steps.or(Some(defaults.steps)))?;
    let lr = s.require("lr", a.lr.or(Some(defaults.lr)))?;
    let seed = s.require("seed", a.seed.or(Some(defaults.seed)))?;
    let out_weights = s.pick::<String>("out_weights", a.out_weights, None)?;
    let loss_default = out_weights.as_ref().map(|p| format!("{p}.loss.csv"));
    let loss_csv = s.pick::<String>("loss_csv", a.loss_csv, loss_default)?;
    print!("{}", s.echo());

    let pair = toy_pair(patch, s.model.scale, seed);
    let opts = TrainOptions { steps, lr, seed, ..defaults };
    let t = Instant::now();
    let r = train_toy(&s.model, &[pair], &opts)?;
    println!("trained {steps} steps in {:.1}s", t.elapsed().as_secs_f64());
    if let Some(p) = &out_weights {
        save_weights(&r.weights, Path::new(p))?;
        println!("weights -> {p}");
    }
    if let Some(p) = &loss_csv {
        let mut csv = String::from("step,loss\n");
        for (i, l) in r.losses.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(p, csv).map_err(|e| CliError::io(format!("{p}: {e}")))?;
        println!("losses -> {p}");
    }
    let Some(&first) = r.losses.first() else {
        return Err(CliError::usage("no training steps were run"));
    };
    let last = r.smoothed_final(100);
    println!("initial_loss={first:.6} smoothed_final_loss={last:.6} ratio={:.4}", last / first);
    if last < 0.1 * first {
        Ok(())
    } else {
        Err(CliError::usage(format!("smoothed loss {last:.6} is not below 0.1x the initial {first:.6}")))
    }
}

fn cmd_selftest(a: SelftestArgs) -> CliResult {
    if let Some(f) = &a.inject_fault {
        if !check_names().any(|n| n == f) {
            return Err(CliError::usage(format!(
                "unknown invariant {f:?}; known: {}",
                check_names().collect::<Vec<_>>().join(", ")
            )));
        }
    }
    let t = Instant::now();
    let out = run_selftest(a.inject_fault.as_deref());
    for o in &out {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let failed: Vec<_> = out.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    println!("{} of {} invariants passed in {:.1}s", out.len() - failed.len(), out.len(), t.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::usage(format!("failed invariants: {}", failed.join(", "))))
    }
}
