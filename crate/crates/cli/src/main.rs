use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use jacprop::container;
use jacprop::convlower::{lower_to_dense_layer, ConvFilter, ConvSpec};
use jacprop::gradcheck::{oracle_triangle, sample_instance, Stencil, TriangleTolerances};
use jacprop::train::{self, evaluate, load_dataset, load_idx, stream_rng, TrainConfig};
use jacprop::{ActivationKind, DenseMatrix, HeadKind, Network, NetworkShape};

#[derive(Parser)]
#[command(
    name = "jacprop",
    version,
    about = "Jacobian backprop: gradient checks, training, convolution lowering"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check structured backprop against the dense reference and finite differences.
    Gradcheck(GradcheckArgs),
    /// Train with seeded SGD from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Lower a single-channel convolution to a one-layer dense model.
    LowerConv(LowerArgs),
    /// Mean loss and accuracy of a saved model.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StencilArg {
    Central2,
    Central4,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layer widths, input first.
    #[arg(long, default_value = "4,5,3", value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value = "softmax_ce")]
    head: HeadKind,
    /// Activation of every hidden layer.
    #[arg(long, default_value = "sigmoid")]
    activation: ActivationKind,
    /// Finite-difference tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1e-12)]
    dense_tol: f64,
    #[arg(long, value_enum, default_value = "central4")]
    stencil: StencilArg,
    /// Random networks and inputs to check.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    /// Append one JSON record per sample.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(clap::Args)]
struct LowerArgs {
    /// Input image shape, e.g. 28x28.
    #[arg(long, value_parser = parse_shape)]
    input_shape: (usize, usize),
    /// Kernel matrices: whitespace-separated rows, filters separated by blank lines.
    #[arg(long)]
    kernel: PathBuf,
    /// Bias matrices in the same layout, one per filter; zero if omitted.
    #[arg(long)]
    bias: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["data", "config"])))]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// IDX image and label files.
    #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
    data: Option<Vec<PathBuf>>,
    /// Evaluate on the data source of a training config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |v: &str| match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("bad dimension {v:?} in {s:?}")),
    };
    Ok((dim(h)?, dim(w)?))
}

/// Matrices separated by blank lines; `#` starts a comment.
fn parse_matrices(text: &str) -> Result<Vec<DenseMatrix>> {
    let mut out = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut flush = |rows: &mut Vec<Vec<f64>>| -> Result<()> {
        if !rows.is_empty() {
            out.push(DenseMatrix::from_rows(rows).with_context(|| format!("matrix {}", out.len() + 1))?);
            rows.clear();
        }
        Ok(())
    };
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            flush(&mut rows)?;
            continue;
        }
        let row = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .with_context(|| format!("line {}: bad number {t:?}", n + 1))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    flush(&mut rows)?;
    Ok(out)
}

fn read_matrices(path: &Path) -> Result<Vec<DenseMatrix>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m = parse_matrices(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(!m.is_empty(), "{}: no matrices", path.display());
    Ok(m)
}

fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    let hidden = vec![args.activation; args.layers.len().saturating_sub(2)];
    let shape = NetworkShape::new(args.layers.clone(), hidden, args.head)?;
    let stencil = match args.stencil {
        StencilArg::Central2 => Stencil::Central2,
        StencilArg::Central4 => Stencil::Central4,
    };
    let tol = TriangleTolerances {
        dense: args.dense_tol,
        finite_diff: args.tol,
        stencil,
    };
    let dims: Vec<String> = args.layers.iter().map(usize::to_string).collect();
    println!(
        "network {} ({:?} hidden, {:?} head), {} parameters, seed {}",
        dims.join("-"),
        args.activation,
        args.head,
        shape.param_count(),
        args.seed
    );
    let mut log = args
        .log
        .as_ref()
        .map(|p| {
            File::options()
                .create(true)
                .append(true)
                .open(p)
                .map(BufWriter::new)
                .with_context(|| format!("opening {}", p.display()))
        })
        .transpose()?;
    let mut rng = stream_rng(args.seed, 0);
    let mut all = true;
    for i in 0..args.samples {
        let inst = sample_instance(&shape, stencil.kink_margin(), &mut rng);
        let rep = oracle_triangle(&inst, tol)?;
        all &= rep.pass();
        println!("sample {}: loss {:.6}", i + 1, rep.loss);
        print!("structured vs dense reference: {}", rep.dense);
        print!("structured vs finite differences ({stencil:?}): {}", rep.finite_diff);
        if let Some(w) = log.as_mut() {
            let rec = serde_json::json!({
                "seed": args.seed,
                "sample": i,
                "layers": args.layers,
                "head": args.head,
                "activation": args.activation,
                "report": rep,
            });
            writeln!(w, "{rec}")?;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Ok(all)
}

fn train_cmd(config: &Path) -> Result<()> {
    let cfg = TrainConfig::from_file(config)?;
    let out = train::train(&cfg, |r| println!("{}", serde_json::to_string(r).expect("plain data")))?;
    let last = out.records.last().expect("epoch 0 is always recorded");
    eprintln!(
        "trained {} epochs: train loss {:.6} -> {:.6}{}",
        cfg.epochs,
        out.records[0].train_loss,
        last.train_loss,
        last.holdout_accuracy
            .map(|a| format!(", holdout accuracy {:.2}%", 100.0 * a))
            .unwrap_or_default()
    );
    if let Some(p) = &cfg.output.model {
        eprintln!("model written to {}", p.display());
    }
    Ok(())
}

fn lower_conv(args: LowerArgs) -> Result<()> {
    let kernels = read_matrices(&args.kernel)?;
    let spec = match &args.bias {
        None => ConvSpec::unbiased(args.input_shape, kernels)?,
        Some(p) => {
            let biases = read_matrices(p)?;
            ensure!(
                biases.len() == kernels.len(),
                "{} kernels but {} bias matrices",
                kernels.len(),
                biases.len()
            );
            let filters = kernels
                .into_iter()
                .zip(biases)
                .map(|(kernel, bias)| ConvFilter { kernel, bias })
                .collect();
            ConvSpec::new(args.input_shape, filters)?
        }
    };
    let layer = lower_to_dense_layer(&spec, None)?;
    let (n_in, n_out) = (layer.n_in(), layer.n_out());
    let net = Network::new(vec![layer], HeadKind::IdentitySe)?;
    container::save(&net, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    let (h, w) = args.input_shape;
    println!("input {h}x{w} -> {n_in} units (row-major)");
    for (r, f) in spec.filters().iter().enumerate() {
        let (kh, kw) = f.kernel.shape();
        let (oh, ow) = f.bias.shape();
        println!(
            "filter {}: kernel {kh}x{kw}, output {oh}x{ow}, units {}..{}",
            r + 1,
            r * oh * ow,
            (r + 1) * oh * ow
        );
    }
    println!(
        "dense layer W {n_in}x{n_out}, b {n_out}, {} parameters -> {}",
        net.param_count(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let net = container::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let mut data = match (&args.data, &args.config) {
        (Some(paths), _) => load_idx(&paths[0], &paths[1], args.limit)?,
        (None, Some(cfg)) => load_dataset(&TrainConfig::from_file(cfg)?)?,
        (None, None) => bail!("one of --data or --config is required"),
    };
    if let Some(n) = args.limit {
        data.truncate(n);
    }
    let shape = net.shape();
    ensure!(
        shape.input_dim() == data.feature_dim() && shape.output_dim() == data.target_dim(),
        "model maps {} -> {} but data has {} features and {} targets",
        shape.input_dim(),
        shape.output_dim(),
        data.feature_dim(),
        data.target_dim()
    );
    data.check_head(net.head())?;
    let e = evaluate(&net, data.samples())?;
    let rec = serde_json::json!({ "samples": data.len(), "loss": e.loss, "accuracy": e.accuracy });
    println!("{rec}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train { config } => train_cmd(&config).map(|_| true),
        Command::LowerConv(a) => lower_conv(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse() {
        assert_eq!(parse_shape("28x28"), Ok((28, 28)));
        assert_eq!(parse_shape("3X5"), Ok((3, 5)));
        assert!(parse_shape("3").is_err());
        assert!(parse_shape("0x3").is_err());
    }

    #[test]
    fn matrices_split_on_blank_lines() {
        let m = parse_matrices("1 2\n3 4  # k\n\n\n5, 6\n").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m[1].shape(), (1, 2));
        assert!(parse_matrices("1 2\n3\n").is_err());
        assert!(parse_matrices("1 x\n").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
