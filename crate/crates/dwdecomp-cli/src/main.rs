//! `dwd` — batch frontend for the depth-wise decomposition pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/shape error, 3 numeric
//! error. Every failure prints a single machine-parsable line to stderr:
//! `error[usage|data|numeric]: <message>`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use dwdecomp::decompose::{
    decompose_network, CompensationMode, MethodTag, NetworkDecomposeOptions,
};
use dwdecomp::harness::{
    gen_synthetic_network, layerwise_csv, run_layerwise_experiment, run_sanity_experiment,
    sanity_csv, sanity_summary, LayerwiseRow, SanityConfig, SyntheticLayerSpec, SyntheticNetSpec,
};
use dwdecomp::netmodel::{deserialize_model, flops_and_speedup, serialize_model, Activation};
use dwdecomp::sampler::{ImageSource, SamplingConfig};
use dwdecomp::{DwdError, ErrorClass};

#[derive(Parser)]
#[command(
    name = "dwd",
    version,
    about = "Decompose regular convolutions into depth-wise separable pairs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Random-data sanity experiment: three methods over seeded runs.
    Sanity(SanityArgs),
    /// Generate a synthetic sequential conv model container.
    GenModel(GenModelArgs),
    /// Decompose a model file layer by layer.
    Decompose(DecomposeArgs),
    /// Replace every separable pair with its exact regular equivalent.
    Fold(FoldArgs),
    /// Relative error between two models' outputs on sample inputs.
    Eval(EvalArgs),
    /// Per-layer multiply counts and speed-up.
    Flops(FlopsArgs),
    /// Decompose each layer independently and report per-layer errors.
    Layerwise(LayerwiseArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Channel,
    Dw,
    DwComp,
}

impl From<MethodArg> for MethodTag {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Channel => MethodTag::Channel,
            MethodArg::Dw => MethodTag::Dw,
            MethodArg::DwComp => MethodTag::DwComp,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CompensationArg {
    Absolute,
    Signed,
}

impl From<CompensationArg> for CompensationMode {
    fn from(m: CompensationArg) -> Self {
        match m {
            CompensationArg::Absolute => CompensationMode::Absolute,
            CompensationArg::Signed => CompensationMode::Signed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Args)]
struct SanityArgs {
    /// Output channels n.
    #[arg(long, default_value_t = 128)]
    n: usize,
    /// Input channels c.
    #[arg(long, default_value_t = 64)]
    c: usize,
    #[arg(long, default_value_t = 3)]
    kh: usize,
    #[arg(long, default_value_t = 3)]
    kw: usize,
    /// Sampled response rows N.
    #[arg(long, default_value_t = 3000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Target acceleration for the channel baseline's rank.
    #[arg(long, default_value_t = 9.0)]
    speedup: f64,
    #[arg(long, value_enum, default_value_t = CompensationArg::Signed)]
    compensation: CompensationArg,
    /// Write the CSV report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long)]
    out: PathBuf,
    /// Input signature as c,H,W.
    #[arg(long, value_parser = parse_signature, default_value = "8,16,16")]
    input_sig: (usize, usize, usize),
    /// Comma-separated output channel counts, one per layer.
    #[arg(long, default_value = "16,16,16")]
    channels: String,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
    activation: ActivationArg,
    /// Build weights as folded random separable pairs (exact rank-1
    /// per-channel structure).
    #[arg(long)]
    separable_ground_truth: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "synthetic")]
    name: String,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::DwComp)]
    method: MethodArg,
    /// Target acceleration for the channel method's rank selection.
    #[arg(long, default_value_t = 9.0)]
    speedup: f64,
    /// Image source: a directory of raw .f32 tensors, or synthetic:<seed>.
    #[arg(long, default_value = "synthetic:1")]
    images: String,
    #[arg(long, default_value_t = 10)]
    per_image: usize,
    #[arg(long, default_value_t = 300)]
    num_images: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CompensationArg::Signed)]
    compensation: CompensationArg,
    /// Layers to decompose: "all" or a comma-separated id list.
    #[arg(long, default_value = "all")]
    layers: String,
    /// dw-comp: fit against the layer's own responses instead of the
    /// pristine network's (disables inter-layer compensation).
    #[arg(long)]
    no_layer_compensation: bool,
    /// Write the per-layer CSV report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reference model; defaults to the model itself.
    #[arg(long)]
    r#ref: Option<PathBuf>,
    #[arg(long, default_value = "synthetic:7")]
    images: String,
    #[arg(long, default_value_t = 8)]
    num_images: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reference model for the speed-up ratio.
    #[arg(long)]
    r#ref: Option<PathBuf>,
    /// Input signature c,H,W; defaults to the model's own.
    #[arg(long, value_parser = parse_signature)]
    input_sig: Option<(usize, usize, usize)>,
}

#[derive(Args)]
struct LayerwiseArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated subset of channel,dw,dw-comp.
    #[arg(long, default_value = "channel,dw,dw-comp")]
    methods: String,
    #[arg(long, default_value = "synthetic:1")]
    images: String,
    #[arg(long, default_value_t = 10)]
    per_image: usize,
    #[arg(long, default_value_t = 300)]
    num_images: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 9.0)]
    speedup: f64,
    #[arg(long, value_enum, default_value_t = CompensationArg::Signed)]
    compensation: CompensationArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

// ── error mapping ───────────────────────────────────────────────────────────

enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (class, msg) = match self {
            CliError::Usage(m) => ("usage", m),
            CliError::Data(m) => ("data", m),
            CliError::Numeric(m) => ("numeric", m),
        };
        format!("error[{class}]: {}", msg.replace('\n', " "))
    }
}

impl From<DwdError> for CliError {
    fn from(e: DwdError) -> Self {
        match e.class() {
            ErrorClass::Numeric => CliError::Numeric(e.to_string()),
            ErrorClass::Data => CliError::Data(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

fn parse_signature(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected c,H,W, got '{s}'"));
    }
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    if dims.contains(&0) {
        return Err("signature extents must be positive".into());
    }
    Ok((dims[0], dims[1], dims[2]))
}

fn parse_images(spec: &str) -> Result<ImageSource, CliError> {
    if let Some(seed) = spec.strip_prefix("synthetic:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| CliError::Usage(format!("invalid synthetic seed '{seed}'")))?;
        return Ok(ImageSource::Synthetic { seed });
    }
    let path = PathBuf::from(spec);
    if !path.is_dir() {
        return Err(CliError::Data(format!(
            "image source '{spec}' is neither a directory nor synthetic:<seed>"
        )));
    }
    Ok(ImageSource::Directory(path))
}

fn parse_layer_list(spec: &str) -> Result<Option<Vec<usize>>, CliError> {
    if spec == "all" {
        return Ok(None);
    }
    let ids = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Usage(format!("invalid layer list '{spec}'")))?;
    if ids.is_empty() {
        return Err(CliError::Usage("empty layer list".into()));
    }
    Ok(Some(ids))
}

fn parse_channel_list(spec: &str) -> Result<Vec<usize>, CliError> {
    let chans = spec
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Usage(format!("invalid channel list '{spec}'")))?;
    if chans.is_empty() || chans.contains(&0) {
        return Err(CliError::Usage(
            "channel list must be non-empty positive integers".into(),
        ));
    }
    Ok(chans)
}

fn write_atomic_text(path: &Path, text: &str) -> CliResult {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(e.to_string()))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("invalid output path {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, text).map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

// ── commands ────────────────────────────────────────────────────────────────

fn cmd_sanity(args: SanityArgs) -> CliResult {
    let cfg = SanityConfig {
        samples: args.samples,
        out_channels: args.n,
        in_channels: args.c,
        kh: args.kh,
        kw: args.kw,
        seed: args.seed,
        runs: args.runs,
        speedup: args.speedup,
        mode: args.compensation.into(),
    };
    let table = run_sanity_experiment(&cfg)?;
    print!("{}", sanity_summary(&table));
    if let Some(out) = args.out {
        write_atomic_text(&out, &sanity_csv(&table))?;
        println!("csv={}", out.display());
    }
    Ok(())
}

fn cmd_gen_model(args: GenModelArgs) -> CliResult {
    let channels = parse_channel_list(&args.channels)?;
    if args.kernel == 0 {
        return Err(CliError::Usage("kernel must be >= 1".into()));
    }
    let layers = channels
        .iter()
        .map(|&n| SyntheticLayerSpec {
            out_channels: n,
            kh: args.kernel,
            kw: args.kernel,
            stride: (1, 1),
            padding: (args.kernel / 2, args.kernel / 2),
            activation: args.activation.into(),
        })
        .collect();
    let spec = SyntheticNetSpec {
        name: args.name,
        input: args.input_sig,
        layers,
        seed: args.seed,
        separable_ground_truth: args.separable_ground_truth,
    };
    let (model, _) = gen_synthetic_network(&spec)?;
    serialize_model(&model, &args.out)?;
    println!("model={}", args.out.display());
    println!("layers={}", model.len());
    Ok(())
}

fn outcome_rows(outcomes: &[dwdecomp::decompose::LayerOutcome]) -> Vec<LayerwiseRow> {
    outcomes
        .iter()
        .filter_map(|o| {
            o.report.as_ref().map(|r| LayerwiseRow {
                layer_id: o.layer_id,
                method: r.method,
                relative_error: r.relative_error,
                flops_before: r.flops_before,
                flops_after: r.flops_after,
            })
        })
        .collect()
}

fn cmd_decompose(args: DecomposeArgs) -> CliResult {
    let model = deserialize_model(&args.model)?;
    let images = parse_images(&args.images)?;
    let cfg = SamplingConfig::new(args.per_image, args.num_images, args.seed)?;
    let opts = NetworkDecomposeOptions {
        method: args.method.into(),
        speedup: args.speedup,
        mode: args.compensation.into(),
        compensate_layers: !args.no_layer_compensation,
        layers: parse_layer_list(&args.layers)?,
    };
    let (decomposed, outcomes) = decompose_network(&model, &images, &cfg, &opts)?;
    serialize_model(&decomposed, &args.out)?;

    for o in &outcomes {
        match (&o.report, &o.note) {
            (Some(r), _) => {
                let gt = o
                    .ground_truth_error
                    .map(|v| format!(" ground_truth_error={v}"))
                    .unwrap_or_default();
                let comp = r
                    .compensation_error
                    .map(|v| format!(" compensation_error={v}"))
                    .unwrap_or_default();
                println!(
                    "layer={} method={} relative_error={}{gt}{comp} flops_before={} flops_after={} speedup={}",
                    o.layer_id,
                    r.method.as_str(),
                    r.relative_error,
                    r.flops_before,
                    r.flops_after,
                    r.speedup
                );
            }
            (None, Some(note)) => println!("layer={} note={}", o.layer_id, note),
            (None, None) => {}
        }
    }
    println!("model={}", args.out.display());
    if let Some(report) = args.report {
        write_atomic_text(&report, &layerwise_csv(&outcome_rows(&outcomes)))?;
        println!("csv={}", report.display());
    }
    Ok(())
}

fn cmd_fold(args: FoldArgs) -> CliResult {
    let model = deserialize_model(&args.model)?;
    let (folded, count) = model.fold_all();
    if count == 0 {
        println!("note=model has no separable layers; copied unchanged");
    }
    serialize_model(&folded, &args.out)?;
    println!("folded_layers={count}");
    println!("model={}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult {
    let model = deserialize_model(&args.model)?;
    let reference = match &args.r#ref {
        Some(p) => deserialize_model(p)?,
        None => model.clone(),
    };
    if reference.input_signature != model.input_signature {
        return Err(CliError::Data(format!(
            "input signatures differ: model {:?} vs ref {:?}",
            model.input_signature, reference.input_signature
        )));
    }
    let images = parse_images(&args.images)?;
    if args.num_images == 0 {
        return Err(CliError::Usage("num-images must be >= 1".into()));
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for idx in 0..args.num_images {
        let img = images
            .image(idx, model.input_signature)
            .map_err(CliError::from)?;
        let a = model.forward(&img)?;
        let b = reference.forward(&img)?;
        for (x, y) in a.data().iter().zip(b.data()) {
            num += (f64::from(*x) - f64::from(*y)).powi(2);
            den += f64::from(*y).powi(2);
        }
    }
    if den == 0.0 {
        return Err(CliError::Numeric(
            "reference outputs are all zero; relative error undefined".into(),
        ));
    }
    println!("relative_error={}", (num / den).sqrt());
    Ok(())
}

fn cmd_flops(args: FlopsArgs) -> CliResult {
    let model = deserialize_model(&args.model)?;
    let reference = args
        .r#ref
        .as_ref()
        .map(|p| deserialize_model(p))
        .transpose()?;
    let sig = args.input_sig.unwrap_or(model.input_signature);
    // The reference is the baseline; the model under --model is the
    // transformed one when a reference is supplied.
    let report = match &reference {
        Some(r) => flops_and_speedup(r, Some(&model), sig)?,
        None => flops_and_speedup(&model, None, sig)?,
    };
    let primary = report.transformed.as_ref().unwrap_or(&report.reference);
    for lf in &primary.layers {
        println!(
            "layer={} kind={} per_position={} positions={} total={}",
            lf.layer_id, lf.kind, lf.per_position, lf.positions, lf.total
        );
    }
    println!("total={}", primary.total);
    if let Some(s) = report.speedup {
        println!("reference_total={}", report.reference.total);
        println!("speedup={s}");
    }
    Ok(())
}

fn cmd_layerwise(args: LayerwiseArgs) -> CliResult {
    let model = deserialize_model(&args.model)?;
    let images = parse_images(&args.images)?;
    let cfg = SamplingConfig::new(args.per_image, args.num_images, args.seed)?;
    let methods = args
        .methods
        .split(',')
        .map(|m| MethodTag::parse(m.trim()).map_err(CliError::from))
        .collect::<Result<Vec<_>, _>>()?;
    if methods.is_empty() {
        return Err(CliError::Usage("empty method list".into()));
    }
    let rows = run_layerwise_experiment(
        &model,
        &images,
        &cfg,
        &methods,
        args.speedup,
        args.compensation.into(),
    )?;
    for row in &rows {
        println!(
            "layer={} method={} relative_error={} flops_before={} flops_after={}",
            row.layer_id,
            row.method.as_str(),
            row.relative_error,
            row.flops_before,
            row.flops_after
        );
    }
    if let Some(out) = args.out {
        write_atomic_text(&out, &layerwise_csv(&rows))?;
        println!("csv={}", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.cmd {
        Cmd::Sanity(a) => cmd_sanity(a),
        Cmd::GenModel(a) => cmd_gen_model(a),
        Cmd::Decompose(a) => cmd_decompose(a),
        Cmd::Fold(a) => cmd_fold(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Flops(a) => cmd_flops(a),
        Cmd::Layerwise(a) => cmd_layerwise(a),
    }
}

fn configure_threads() {
    if let Ok(v) = std::env::var("DWD_THREADS") {
        if let Ok(k) = v.parse::<usize>() {
            if k >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(k)
                    .build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("{}", e.line());
                ExitCode::from(e.code())
            }
        },
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                ExitCode::SUCCESS
            } else {
                let msg = e.to_string();
                let first = msg
                    .lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: ");
                eprintln!("error[usage]: {first} (run dwd --help)");
                ExitCode::from(1)
            }
        }
    }
}
