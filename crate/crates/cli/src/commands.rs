use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use pgpc::codec::{bitstream_report, decode_bytes, encode, Bitstream, CodecConfig};
use pgpc::geometry::{read_ply, sample_surface_poisson, voxelize, write_ply_bytes, PlyFormat, PointCloud};
use pgpc::io::write_atomic;
use pgpc::metrics::{csv_row, evaluate, SymmetricMode, CSV_HEADER};
use pgpc::network::Model;
use pgpc::prior::{fit_params, read_params_file, select_template, write_params_text, FitConfig, TemplateModel};
use pgpc::training::{toy_dataset, train};
use pgpc::Coord3;

use crate::config::{TrainFile, SCHEMA_VERSION};

/// Invocation problems that are not about the data (exit status 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Debug, Parser)]
#[command(name = "pgpc", version, about = "Prior-guided point cloud geometry codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a point cloud PLY into a bitstream.
    Encode(EncodeArgs),
    /// Reconstruct a point cloud PLY from a bitstream.
    Decode(DecodeArgs),
    /// Measure D1/D2 PSNR and bpp, appending one CSV row per input.
    Eval(EvalArgs),
    /// Train one model per λ on procedurally posed toy clouds.
    Train(TrainArgs),
    /// Fit body-prior parameters to a cloud and write them as text.
    Fit(FitArgs),
    /// Poisson-disk sample a mesh PLY into a point cloud PLY.
    Sample(SampleArgs),
    /// Print the composition of a bitstream.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    /// Body template file; repeat for a second template. Defaults to the
    /// built-in toy humanoid.
    #[arg(long = "template", value_name = "FILE")]
    templates: Vec<PathBuf>,
}

impl TemplateArgs {
    fn load(&self) -> Result<Vec<TemplateModel>> {
        if self.templates.is_empty() {
            return Ok(vec![TemplateModel::toy_humanoid()]);
        }
        self.templates
            .iter()
            .map(|p| TemplateModel::load(p).with_context(|| format!("loading template {}", p.display())))
            .collect()
    }
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[command(flatten)]
    templates: TemplateArgs,
    /// Parameter text file to use instead of running the fitter.
    #[arg(long, value_name = "FILE", conflicts_with = "no_prior")]
    params: Option<PathBuf>,
    /// Bit depth; required unless the input already holds lattice coordinates.
    #[arg(long)]
    precision: Option<u8>,
    /// Code the latent features directly, without the body prior.
    #[arg(long)]
    no_prior: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prior surface samples per source point.
    #[arg(long, default_value_t = 1.0)]
    sampling_ratio: f64,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[command(flatten)]
    templates: TemplateArgs,
    /// Write binary little-endian PLY instead of ASCII.
    #[arg(long)]
    binary: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Source cloud; repeat together with --bitstream for several inputs.
    #[arg(long = "source", value_name = "FILE", required = true)]
    sources: Vec<PathBuf>,
    /// Bitstream of the matching source.
    #[arg(long = "bitstream", value_name = "FILE", required = true)]
    bitstreams: Vec<PathBuf>,
    /// Already decoded clouds, one per source. Without them the bitstreams
    /// are decoded with --model.
    #[arg(long = "decoded", value_name = "FILE")]
    decoded: Vec<PathBuf>,
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    #[command(flatten)]
    templates: TemplateArgs,
    /// CSV file the rows are appended to; the header is written when it is new.
    #[arg(long, value_name = "FILE")]
    csv: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Sequence name for the rows; defaults to each source's file stem.
    #[arg(long)]
    sequence: Option<String>,
    #[arg(long, default_value_t = SymmetricMode::MaxError)]
    symmetric_mode: SymmetricMode,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON configuration file.
    config: PathBuf,
    /// Directory receiving `lambda_<λ>.pgw`, `train.log` and the effective configuration.
    #[arg(long, value_name = "DIR", required_unless_present = "init")]
    out: Option<PathBuf>,
    /// Write the default configuration to CONFIG and exit.
    #[arg(long)]
    init: bool,
    #[command(flatten)]
    templates: TemplateArgs,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the λ list; repeat for several values.
    #[arg(long = "lambda")]
    lambdas: Vec<f64>,
    /// Overrides the epochs per λ.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    templates: TemplateArgs,
    #[arg(long)]
    precision: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    input: PathBuf,
    output: PathBuf,
    /// Number of surface samples.
    #[arg(long)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Voxelize the samples onto the 2^p lattice.
    #[arg(long)]
    precision: Option<u8>,
    #[arg(long)]
    binary: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    input: PathBuf,
    /// Also write the composition as JSON.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Encode(a) => run_encode(a),
        Command::Decode(a) => run_decode(a),
        Command::Eval(a) => run_eval(a),
        Command::Train(a) => run_train(a),
        Command::Fit(a) => run_fit(a),
        Command::Sample(a) => run_sample(a),
        Command::Report(a) => run_report(a),
    }
}

fn read_cloud(path: &Path) -> Result<PointCloud> {
    let data = read_ply(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(data.into_cloud())
}

/// Lattice coordinates of `cloud` at `precision`, or at the smallest depth
/// holding an integral cloud when no precision is given.
fn lattice(cloud: &PointCloud, precision: Option<u8>) -> Result<(Vec<Coord3>, u8)> {
    let p = match precision {
        Some(p) => p,
        None => {
            if !cloud.is_integral() || cloud.is_empty() {
                return usage("the input is not on an integer lattice; pass --precision");
            }
            let top = cloud.points.iter().flatten().fold(0.0f64, |m, &v| m.max(v));
            if cloud.points.iter().flatten().any(|&v| v < 0.0) {
                return usage("the input has negative coordinates; pass --precision");
            }
            (1..=16u8)
                .find(|&p| top < (1u32 << p) as f64)
                .ok_or_else(|| UsageError("coordinates exceed 16 bits".into()))?
        }
    };
    let v = voxelize(cloud, p)?;
    Ok((v.to_coords()?, p))
}

fn write_cloud(path: &Path, coords: &[Coord3], binary: bool) -> Result<()> {
    let points: Vec<[f64; 3]> = coords.iter().map(|c| c.to_array().map(f64::from)).collect();
    write_points(path, &points, binary)
}

fn write_points(path: &Path, points: &[[f64; 3]], binary: bool) -> Result<()> {
    let format = if binary {
        PlyFormat::BinaryLittleEndian
    } else {
        PlyFormat::Ascii
    };
    write_atomic(path, &write_ply_bytes(points, &[], format)).with_context(|| format!("writing {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn run_encode(a: EncodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let templates = a.templates.load()?;
    let (coords, precision) = lattice(&read_cloud(&a.input)?, a.precision)?;
    let params = match &a.params {
        Some(p) => Some(read_params_file(p).with_context(|| format!("reading parameters {}", p.display()))?),
        None => None,
    };
    let config = CodecConfig {
        prior: !a.no_prior,
        params,
        sampling_ratio: a.sampling_ratio,
        seed: a.seed,
        ..CodecConfig::default()
    };
    let enc = encode(&coords, precision, &templates, &model, &config)?;
    let bytes = enc.bitstream.to_bytes();
    write_atomic(&a.output, &bytes).with_context(|| format!("writing {}", a.output.display()))?;
    log::info!(
        "{} points at {precision} bits -> {} bytes ({:.4} bpp)",
        coords.len(),
        bytes.len(),
        8.0 * bytes.len() as f64 / coords.len() as f64
    );
    Ok(())
}

fn run_decode(a: DecodeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let templates = a.templates.load()?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let dec = decode_bytes(&bytes, &templates, &model)?;
    if dec.clamped {
        log::warn!("a header count exceeded the available candidates; output was clamped");
    }
    write_cloud(&a.output, &dec.coords, a.binary)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    if a.sources.len() != a.bitstreams.len() {
        return usage(format!("{} --source for {} --bitstream", a.sources.len(), a.bitstreams.len()));
    }
    if !a.decoded.is_empty() && a.decoded.len() != a.sources.len() {
        return usage(format!("{} --decoded for {} --source", a.decoded.len(), a.sources.len()));
    }
    let model = match (&a.model, a.decoded.is_empty()) {
        (Some(p), true) => Some(load_model(p)?),
        (None, true) => return usage("eval needs --model or one --decoded per source"),
        _ => None,
    };
    let templates = a.templates.load()?;
    let rows = (0..a.sources.len())
        .into_par_iter()
        .map(|i| -> Result<String> {
            let bytes = fs::read(&a.bitstreams[i]).with_context(|| format!("reading {}", a.bitstreams[i].display()))?;
            let header = Bitstream::parse(&bytes)
                .with_context(|| format!("parsing {}", a.bitstreams[i].display()))?
                .header;
            let p = header.precision;
            let (source, _) = lattice(&read_cloud(&a.sources[i])?, Some(p))?;
            let decoded = match &model {
                Some(m) => decode_bytes(&bytes, &templates, m)?.coords,
                None => lattice(&read_cloud(&a.decoded[i])?, Some(p))?.0,
            };
            let n0 = header.counts.first().copied().unwrap_or(0);
            if n0 != source.len() as u64 {
                bail!("bitstream codes {n0} points but the source has {}", source.len());
            }
            let bpp = 8.0 * bytes.len() as f64 / n0 as f64;
            let points = |c: &[Coord3]| PointCloud::from_coords(c, p).points;
            let quality = evaluate(&points(&decoded), &points(&source), p, a.symmetric_mode)?;
            let name = match &a.sequence {
                Some(s) => s.clone(),
                None => a.sources[i].file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            };
            Ok(csv_row(&name, a.lambda, bpp, &quality))
        })
        .collect::<Result<Vec<_>>>()?;
    append_csv(&a.csv, &rows)
}

/// Appends `rows` in one write, preceded by the header when the file is new
/// or empty.
fn append_csv(path: &Path, rows: &[String]) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    if a.init {
        let text = serde_json::to_string_pretty(&TrainFile::default())?;
        return write_atomic(&a.config, format!("{text}\n").as_bytes()).map_err(Into::into);
    }
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut file: TrainFile =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if file.version != SCHEMA_VERSION {
        bail!("configuration version {} is not supported (expected {SCHEMA_VERSION})", file.version);
    }
    if let Some(s) = a.seed {
        file.training.seed = s;
    }
    if !a.lambdas.is_empty() {
        file.training.lambdas = a.lambdas.clone();
    }
    if let Some(e) = a.epochs {
        file.training.epochs = e;
    }
    let out = a.out.expect("required unless --init");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    file.training.checkpoint_dir = Some(out.clone());
    let templates = a.templates.load()?;
    let d = &file.dataset;
    if d.precisions.is_empty() {
        bail!("dataset.precisions is empty");
    }
    let data = toy_dataset(&templates[0], d.count, &d.precisions, d.seed)?;
    write_atomic(out.join("config.json"), serde_json::to_string_pretty(&file)?.as_bytes())?;
    let mut log = Ticker {
        inner: Vec::new(),
        lines: 0,
    };
    let result = train(&data, &templates, &file.training, &mut log);
    write_atomic(out.join("train.log"), &log.inner)?;
    for m in result? {
        log::info!(
            "lambda {}: R {:.4} D {:.4} total {:.4}",
            m.lambda,
            m.last.rate,
            m.last.distortion,
            m.last.total
        );
    }
    Ok(())
}

/// Collects the training log and echoes every 50th line to stderr.
struct Ticker {
    inner: Vec<u8>,
    lines: usize,
}

impl Write for Ticker {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        for line in buf.split_inclusive(|&b| b == b'\n') {
            if line.ends_with(b"\n") {
                self.lines += 1;
                if self.lines.is_multiple_of(50) {
                    eprint!("step {}", String::from_utf8_lossy(line));
                }
            }
        }
        self.inner.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

fn run_fit(a: FitArgs) -> Result<()> {
    let templates = a.templates.load()?;
    let (coords, _) = lattice(&read_cloud(&a.input)?, a.precision)?;
    let target: Vec<[f64; 3]> = coords.iter().map(|c| c.to_array().map(f64::from)).collect();
    let template = select_template(&templates, 0.0).expect("at least one template");
    let config = FitConfig {
        seed: a.seed,
        ..FitConfig::default()
    };
    let params = fit_params(&target, template, &config)?;
    write_atomic(&a.output, write_params_text(&params).as_bytes())
        .with_context(|| format!("writing {}", a.output.display()))
}

fn run_sample(a: SampleArgs) -> Result<()> {
    if a.points == 0 {
        return usage("--points must be positive");
    }
    let data = read_ply(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if !data.is_mesh() {
        bail!("{} has no faces", a.input.display());
    }
    let cloud = sample_surface_poisson(&data.into_mesh()?, a.points, a.seed)?;
    match a.precision {
        Some(p) => write_points(&a.output, &voxelize(&cloud, p)?.points, a.binary),
        None => write_points(&a.output, &cloud.points, a.binary),
    }
}

fn run_report(a: ReportArgs) -> Result<()> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let bs = Bitstream::parse(&bytes)?;
    let r = bitstream_report(&bs);
    let h = &bs.header;
    println!("points      {}", r.points);
    println!("precision   {}", h.precision);
    println!("scales      {}", h.scales);
    println!("prior       {}", h.prior);
    println!("total       {} bits ({:.4} bpp)", r.total_bits, r.bpp);
    println!("header      {} bits", r.header_bits);
    println!("framing     {} bits", r.framing_bits);
    println!("parameters  {} bits ({:.2}%)", r.param_bits, r.param_share);
    println!("coordinates {} bits ({:.2}%)", r.coord_bits, r.coord_share);
    println!("features    {} bits ({:.2}%)", r.feature_bits, r.feature_share);
    if let Some(path) = &a.json {
        let value = serde_json::json!({
            "version": SCHEMA_VERSION,
            "points": r.points,
            "precision": h.precision,
            "scales": h.scales,
            "prior": h.prior,
            "total_bits": r.total_bits,
            "header_bits": r.header_bits,
            "framing_bits": r.framing_bits,
            "param_bits": r.param_bits,
            "coord_bits": r.coord_bits,
            "feature_bits": r.feature_bits,
            "param_share": r.param_share,
            "coord_share": r.coord_share,
            "feature_share": r.feature_share,
            "bpp": r.bpp,
        });
        write_atomic(path, format!("{}\n", serde_json::to_string_pretty(&value)?).as_bytes())?;
    }
    Ok(())
}
