//! `mif` — simulate a codec proxy, train the filtering networks, enhance
//! reconstructions, and evaluate rate-distortion deltas.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use mif_core::bd::{bd_psnr, bd_rate, read_rd_csv};
use mif_core::codec::{proxy_encode, ProxyCodecConfig};
use mif_core::dataset::{build_patch_dataset, build_ranking_groups};
use mif_core::error::{MifError, Result};
use mif_core::experiment::{run_experiment, ExperimentManifest};
use mif_core::filters::{decisions_to_csv, enhance_sequence, refs_to_csv, FilterModels};
use mif_core::frame::{read_yuv_sequence, write_yuv_sequence, Frame, FrameRole};
use mif_core::partition::{rasterize_partition, read_partition_sidecar, write_partition_sidecar, PartitionMaps};
use mif_core::rfs::{RfsConfig, RfsNet};
use mif_core::training::{
    bundle::expect_kind, train_if, train_mif, train_rfs, ModelBundle, TrainConfig,
};
use mif_core::{IfNet, MifNet};

#[derive(Parser)]
#[command(name = "mif", version, about = "Multi-frame in-loop filtering toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Proxy-encode a raw sequence into reconstructions plus partition maps.
    Simulate(SimulateArgs),
    /// Train the reference-ranking network.
    TrainRfs(TrainArgs),
    /// Train the single-frame filter network.
    TrainIf(TrainArgs),
    /// Train the multi-frame filter network.
    TrainMif(TrainMifArgs),
    /// Run the in-loop filter over a coded sequence.
    Enhance(EnhanceArgs),
    /// Compute Bjøntegaard deltas between RD-curve CSV files.
    Evaluate(EvaluateArgs),
    /// Run a full manifest-driven experiment.
    RunExperiment(RunExperimentArgs),
}

#[derive(Args)]
struct SequenceArgs {
    /// Raw planar 4:2:0 input file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    bit_depth: u32,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    seq: SequenceArgs,
    #[arg(long)]
    qp: i32,
    #[arg(long, default_value_t = 4)]
    gop: usize,
    /// Comma-separated per-position QP offsets.
    #[arg(long, default_value = "0,4,3,4")]
    offsets: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Key=value training configuration file.
    #[arg(long)]
    config: PathBuf,
    /// JSON dataset manifest.
    #[arg(long)]
    dataset: PathBuf,
    /// Output model bundle.
    #[arg(long)]
    output: PathBuf,
    /// Optional training-log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct TrainMifArgs {
    #[command(flatten)]
    common: TrainArgs,
    /// Trained ranking-network bundle used to pick references.
    #[arg(long)]
    rfs_model: PathBuf,
    /// References per frame.
    #[arg(long, default_value_t = 2)]
    m: usize,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Reconstructed (unfiltered) sequence.
    #[arg(long)]
    urf: PathBuf,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    bit_depth: u32,
    /// Partition sidecar JSON produced by `simulate`.
    #[arg(long)]
    partitions: PathBuf,
    /// Raw sequence (encoder-side mode selection scores against it).
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    mif_model: PathBuf,
    #[arg(long)]
    if_model: PathBuf,
    #[arg(long)]
    rfs_model: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Anchor RD curves (`label,bitrate,psnr` CSV).
    #[arg(long)]
    anchor: PathBuf,
    /// Test RD curves to compare against the anchor.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args)]
struct RunExperimentArgs {
    /// Experiment manifest JSON.
    #[arg(long)]
    manifest: PathBuf,
}

// ---------------------------------------------------------------------------
// Key=value config files.
// ---------------------------------------------------------------------------

fn parse_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
    let mut config = TrainConfig::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            MifError::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| {
            MifError::Config(format!("{}:{}: bad {what} `{value}`", path.display(), lineno + 1))
        };
        match key {
            "batch_size" => config.batch_size = value.parse().map_err(|_| bad("batch size"))?,
            "learning_rate" => config.learning_rate = value.parse().map_err(|_| bad("learning rate"))?,
            "iterations" => config.iterations = value.parse().map_err(|_| bad("iteration count"))?,
            "finetune_iterations" => {
                config.finetune_iterations = value.parse().map_err(|_| bad("iteration count"))?
            }
            "qp" => config.qp = value.parse().map_err(|_| bad("qp"))?,
            "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
            "init_from" => config.init_from = Some(PathBuf::from(value)),
            other => {
                return Err(MifError::Config(format!(
                    "{}:{}: unknown key `{other}`",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(config)
}

// ---------------------------------------------------------------------------
// Training dataset manifest.
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct DatasetManifest {
    sequences: Vec<DatasetSequence>,
    #[serde(default = "default_stride")]
    stride: usize,
    #[serde(default)]
    rfs: Option<RfsSection>,
}

#[derive(Deserialize)]
struct DatasetSequence {
    raw: PathBuf,
    urf: PathBuf,
    partitions: PathBuf,
    width: usize,
    height: usize,
    #[serde(default = "default_bit_depth")]
    bit_depth: u32,
}

#[derive(Deserialize)]
struct RfsSection {
    pool_size: Option<usize>,
    cc_threshold: Option<f64>,
    num_selected: Option<usize>,
}

fn default_stride() -> usize {
    64
}
fn default_bit_depth() -> u32 {
    8
}

struct LoadedSequence {
    raws: Vec<Frame>,
    urfs: Vec<Frame>,
    maps: Vec<PartitionMaps>,
}

fn load_dataset(path: &Path) -> Result<(Vec<LoadedSequence>, usize, RfsConfig)> {
    let text = std::fs::read_to_string(path).map_err(|e| MifError::io(path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| MifError::Format(format!("{}: {e}", path.display())))?;
    if manifest.sequences.is_empty() {
        return Err(MifError::Validation("dataset manifest lists no sequences".into()));
    }
    let mut rfs = RfsConfig::default();
    if let Some(section) = &manifest.rfs {
        if let Some(v) = section.pool_size {
            rfs.pool_size = v;
        }
        if let Some(v) = section.cc_threshold {
            rfs.cc_threshold = v;
        }
        if let Some(v) = section.num_selected {
            rfs.num_selected = v;
        }
    }
    let mut out = Vec::new();
    for seq in &manifest.sequences {
        let raws = read_yuv_sequence(&seq.raw, seq.width, seq.height, seq.bit_depth, FrameRole::Raw)?;
        let urfs = read_yuv_sequence(&seq.urf, seq.width, seq.height, seq.bit_depth, FrameRole::Urf)?;
        if raws.len() != urfs.len() {
            return Err(MifError::Validation(format!(
                "{}: raw has {} frames, reconstruction {}",
                seq.raw.display(),
                raws.len(),
                urfs.len()
            )));
        }
        let layouts = read_partition_sidecar(&seq.partitions)?;
        if layouts.len() != urfs.len() {
            return Err(MifError::Validation(format!(
                "{}: {} layouts for {} frames",
                seq.partitions.display(),
                layouts.len(),
                urfs.len()
            )));
        }
        let maps = layouts
            .iter()
            .map(|l| rasterize_partition(l, seq.width, seq.height))
            .collect::<Result<Vec<_>>>()?;
        out.push(LoadedSequence { raws, urfs, maps });
    }
    Ok((out, manifest.stride, rfs))
}

// ---------------------------------------------------------------------------
// Subcommand bodies.
// ---------------------------------------------------------------------------

fn parse_offsets(s: &str) -> Result<Vec<i32>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<i32>()
                .map_err(|_| MifError::Config(format!("bad offset `{t}`")))
        })
        .collect()
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let raws = read_yuv_sequence(
        &args.seq.input,
        args.seq.width,
        args.seq.height,
        args.seq.bit_depth,
        FrameRole::Raw,
    )?;
    let config = ProxyCodecConfig {
        qp_base: args.qp,
        gop_size: args.gop,
        qp_offsets: parse_offsets(&args.offsets)?,
        seed: args.seed,
    };
    let coded = proxy_encode(&raws, &config)?;
    std::fs::create_dir_all(&args.output_dir).map_err(|e| MifError::io(&args.output_dir, e))?;
    write_yuv_sequence(args.output_dir.join("urf.yuv"), &coded.urfs, args.seq.bit_depth)?;
    write_partition_sidecar(args.output_dir.join("partitions.json"), &coded.layouts)?;
    std::fs::write(
        args.output_dir.join("stats.txt"),
        format!("frames,{}\nbitrate_estimate,{:.6}\n", coded.urfs.len(), coded.bitrate_estimate),
    )
    .map_err(|e| MifError::io(&args.output_dir, e))?;
    println!(
        "coded {} frames at qp {} -> {} (rate proxy {:.1})",
        coded.urfs.len(),
        args.qp,
        args.output_dir.display(),
        coded.bitrate_estimate
    );
    Ok(())
}

fn write_log(path: &Option<PathBuf>, log: &mif_core::training::TrainLog) -> Result<()> {
    if let Some(p) = path {
        std::fs::write(p, log.to_csv()).map_err(|e| MifError::io(p, e))?;
    }
    Ok(())
}

fn cmd_train_rfs(args: TrainArgs) -> Result<()> {
    let config = parse_train_config(&args.config)?;
    let (sequences, _, rfs_config) = load_dataset(&args.dataset)?;
    let mut groups = Vec::new();
    for seq in &sequences {
        groups.extend(build_ranking_groups(&seq.urfs, &seq.raws, &rfs_config)?);
    }
    let (bundle, log) = train_rfs(&groups, &config)?;
    bundle.save(&args.output)?;
    write_log(&args.log, &log)?;
    println!("trained ranking network on {} groups -> {}", groups.len(), args.output.display());
    Ok(())
}

fn cmd_train_if(args: TrainArgs) -> Result<()> {
    let config = parse_train_config(&args.config)?;
    let (sequences, stride, _) = load_dataset(&args.dataset)?;
    let mut dataset = Vec::new();
    for seq in &sequences {
        dataset.extend(build_patch_dataset(&seq.urfs, &seq.maps, &seq.raws, None, 0, stride)?);
    }
    let (bundle, log) = train_if(&dataset, &config)?;
    bundle.save(&args.output)?;
    write_log(&args.log, &log)?;
    println!("trained single-frame filter on {} patches -> {}", dataset.len(), args.output.display());
    Ok(())
}

fn cmd_train_mif(args: TrainMifArgs) -> Result<()> {
    let config = parse_train_config(&args.common.config)?;
    let (sequences, stride, rfs_config) = load_dataset(&args.common.dataset)?;
    let rfs_bundle = ModelBundle::load(&args.rfs_model)?;
    expect_kind(&rfs_bundle, "rfs")?;
    let net = RfsNet::from_params(rfs_bundle.params.cast())?;
    let mut dataset = Vec::new();
    for seq in &sequences {
        dataset.extend(build_patch_dataset(
            &seq.urfs,
            &seq.maps,
            &seq.raws,
            Some((&net, &rfs_config)),
            args.m,
            stride,
        )?);
    }
    let (bundle, log) = train_mif(&dataset, &config)?;
    bundle.save(&args.common.output)?;
    write_log(&args.common.log, &log)?;
    println!(
        "trained multi-frame filter on {} patches -> {}",
        dataset.len(),
        args.common.output.display()
    );
    Ok(())
}

fn cmd_enhance(args: EnhanceArgs) -> Result<()> {
    let urfs = read_yuv_sequence(&args.urf, args.width, args.height, args.bit_depth, FrameRole::Urf)?;
    let raws = read_yuv_sequence(&args.raw, args.width, args.height, args.bit_depth, FrameRole::Raw)?;
    let layouts = read_partition_sidecar(&args.partitions)?;
    if layouts.len() != urfs.len() {
        return Err(MifError::Validation(format!(
            "{} layouts for {} frames",
            layouts.len(),
            urfs.len()
        )));
    }
    let maps = layouts
        .iter()
        .map(|l| rasterize_partition(l, args.width, args.height))
        .collect::<Result<Vec<_>>>()?;

    let mif_bundle = ModelBundle::load(&args.mif_model)?;
    expect_kind(&mif_bundle, "mif")?;
    let if_bundle = ModelBundle::load(&args.if_model)?;
    expect_kind(&if_bundle, "if")?;
    let rfs_bundle = ModelBundle::load(&args.rfs_model)?;
    expect_kind(&rfs_bundle, "rfs")?;
    let m = mif_bundle.manifest.m.max(1);
    let models = FilterModels {
        mif: MifNet::from_params(m, mif_bundle.params)?,
        single: IfNet::from_params(if_bundle.params)?,
        rfs: RfsNet::from_params(rfs_bundle.params.cast())?,
        rfs_config: RfsConfig { num_selected: m, ..RfsConfig::default() },
    };

    let (enhanced, decisions) = enhance_sequence(&urfs, &maps, &raws, &models)?;
    std::fs::create_dir_all(&args.output_dir).map_err(|e| MifError::io(&args.output_dir, e))?;
    write_yuv_sequence(args.output_dir.join("enhanced.yuv"), &enhanced, args.bit_depth)?;
    std::fs::write(args.output_dir.join("decisions.csv"), decisions_to_csv(&decisions))
        .map_err(|e| MifError::io(&args.output_dir, e))?;
    std::fs::write(args.output_dir.join("references.csv"), refs_to_csv(&decisions))
        .map_err(|e| MifError::io(&args.output_dir, e))?;
    println!("enhanced {} frames -> {}", enhanced.len(), args.output_dir.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let anchors = read_rd_csv(&args.anchor)?;
    let tests = read_rd_csv(&args.test)?;
    std::fs::create_dir_all(&args.output_dir).map_err(|e| MifError::io(&args.output_dir, e))?;

    let mut csv = String::from("anchor,test,bd_rate_percent,bd_psnr_db\n");
    let mut text = String::new();
    for (test_label, test_curve) in &tests {
        let anchor = anchors
            .iter()
            .find(|(l, _)| l == test_label)
            .or_else(|| anchors.first())
            .ok_or_else(|| MifError::Validation("anchor CSV holds no curves".into()))?;
        let rate = bd_rate(&anchor.1, test_curve)?;
        let quality = bd_psnr(&anchor.1, test_curve)?;
        csv.push_str(&format!("{},{},{:.6},{:.6}\n", anchor.0, test_label, rate, quality));
        text.push_str(&format!(
            "{} vs {}: bd-rate {:+.4}% | bd-psnr {:+.4} dB\n",
            test_label, anchor.0, rate, quality
        ));
    }
    std::fs::write(args.output_dir.join("bd_summary.csv"), &csv)
        .map_err(|e| MifError::io(&args.output_dir, e))?;
    std::fs::write(args.output_dir.join("summary.txt"), &text)
        .map_err(|e| MifError::io(&args.output_dir, e))?;
    print!("{text}");
    Ok(())
}

fn cmd_run_experiment(args: RunExperimentArgs) -> Result<()> {
    let manifest = ExperimentManifest::load(&args.manifest)?;
    let report = run_experiment(&manifest)?;
    println!(
        "bd-rate {:+.4}% | bd-psnr {:+.4} dB | reports in {}",
        report.bd_rate_percent,
        report.bd_psnr_db,
        manifest.output_dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::TrainRfs(args) => cmd_train_rfs(args),
        Command::TrainIf(args) => cmd_train_if(args),
        Command::TrainMif(args) => cmd_train_mif(args),
        Command::Enhance(args) => cmd_enhance(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::RunExperiment(args) => cmd_run_experiment(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // One machine-parsable line: `error: category=<token> msg=<text>`.
            eprintln!("error: category={} msg={:?}", err.category(), err.to_string());
            let code = match err.category() {
                "validation" => 2,
                "io" => 3,
                "config" => 4,
                "computation" => 5,
                _ => 6,
            };
            ExitCode::from(code)
        }
    }
}
