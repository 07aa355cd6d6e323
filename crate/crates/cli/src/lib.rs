//! Command implementations behind the `waspnet` binary.
//!
//! Every command is a plain function over parsed arguments so integration
//! tests can drive them without spawning processes. Exit-code policy:
//! 0 success, 1 configuration errors, 2 data/file errors, 3 numerical
//! failures.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use waspnet_core::archcfg::{parse_network_config, serialize_network_config};
use waspnet_core::container;
use waspnet_core::crf::{self, CrfParams, UnaryField};
use waspnet_core::error::Error;
use waspnet_core::graph::{
    build_head, build_network, receptive_field, ModuleGraph, NetworkConfig, WaspConfig,
};
use waspnet_core::metrics::{miou, ConfusionMatrix};
use waspnet_core::pnm;
use waspnet_core::report::{rf_csv, sweep_csv, CompareReport, CrfRow, RfRow, SweepRow};
use waspnet_core::schedule::PolySchedule;
use waspnet_core::synth::{self, Dataset, SynthConfig};
use waspnet_core::tensor::{Shape, Tensor};
use waspnet_core::train::{evaluate, predict_labels, train, TrainConfig};
use waspnet_core::{Result, IGNORE_LABEL};

#[derive(Parser, Debug)]
#[command(
    name = "waspnet",
    about = "Dilated-convolution segmentation toolkit: multi-scale heads, parameter accounting, CRF refinement, toy-scale training",
    version
)]
pub struct Cli {
    /// Worker threads (overrides the WASPNET_THREADS environment variable).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Count parameters of one architecture.
    Params(ParamsArgs),
    /// Compare parameter counts and receptive fields across heads.
    Compare(CompareArgs),
    /// Report per-branch and output receptive fields.
    Rf(RfArgs),
    /// Train a toy network on a dataset directory.
    Train(TrainArgs),
    /// Run inference on one image with a trained model.
    Infer(InferArgs),
    /// Score a directory of predictions against ground truth.
    Eval(EvalArgs),
    /// Refine a probability map with the dense CRF.
    Crf(CrfArgs),
    /// Train/evaluate the waterfall head across dilation-rate sets.
    Sweep(SweepArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct ArchSelect {
    /// Architecture config file; overrides --head.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    /// Head kind with reference defaults: aspp, cascade, res2net-seg, wasp.
    #[arg(long)]
    pub head: Option<String>,
}

impl ArchSelect {
    fn resolve(&self) -> Result<NetworkConfig> {
        match (&self.arch, &self.head) {
            (Some(path), _) => parse_network_config(&fs::read_to_string(path)?),
            (None, Some(head)) => NetworkConfig::reference(head),
            (None, None) => Err(Error::Config(
                "specify an architecture with --arch <file> or --head <kind>".into(),
            )),
        }
    }
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub arch: ArchSelect,
    /// Write the row as CSV to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Comma-separated head kinds.
    #[arg(long, default_value = "aspp,res2net-seg,wasp")]
    pub heads: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RfArgs {
    #[command(flatten)]
    pub arch: ArchSelect,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory (images/*.ppm + labels/*.pgm).
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset directory; defaults to a held-out tenth of --data.
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[command(flatten)]
    pub arch: ArchSelect,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random-scale augmentation in [0.5, 1.5].
    #[arg(long, default_value_t = false)]
    pub augment: bool,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    /// Output prefix; writes <prefix>.arch, <prefix>.params, <prefix>.trace.csv.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Model prefix as written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Output label map (P5).
    #[arg(long)]
    pub out: PathBuf,
    /// Also store softmax probabilities as a tensor container.
    #[arg(long)]
    pub probs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted label maps (*.pgm).
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth label maps (*.pgm).
    #[arg(long)]
    pub truth: PathBuf,
    /// Class count; inferred from the data when omitted.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CrfArgs {
    /// Probability container holding one tensor shaped 1 x classes x h x w.
    #[arg(long)]
    pub probs: PathBuf,
    /// The RGB image (P6) the probabilities describe.
    #[arg(long)]
    pub image: PathBuf,
    /// Optional ground truth (P5) for the mIOU columns.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 4.0)]
    pub w1: f64,
    #[arg(long, default_value_t = 3.0)]
    pub w2: f64,
    #[arg(long, default_value_t = 50.0)]
    pub sigma_alpha: f64,
    #[arg(long, default_value_t = 5.0)]
    pub sigma_beta: f64,
    #[arg(long, default_value_t = 3.0)]
    pub sigma_gamma: f64,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    /// Output prefix; writes <prefix>.refined.wspt, <prefix>.labels.pgm,
    /// <prefix>.crf.csv.
    #[arg(long)]
    pub out_prefix: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.05)]
    pub base_lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<()> {
    match path {
        Some(p) => Ok(fs::write(p, content)?),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

/// Head receptive field at the graph output.
fn head_output_rf(cfg: &NetworkConfig) -> Result<usize> {
    let head = build_head(&cfg.head)?;
    Ok(receptive_field(&head)?[head.output_node()].receptive_field)
}

fn compare_entry(cfg: &NetworkConfig) -> Result<(String, usize, usize, Option<f64>)> {
    let net = build_network(cfg)?;
    Ok((
        cfg.head.kind_name().to_string(),
        net.count_parameters(),
        head_output_rf(cfg)?,
        None,
    ))
}

pub fn cmd_params(args: &ParamsArgs) -> Result<()> {
    let cfg = args.arch.resolve()?;
    let report = CompareReport::new(vec![compare_entry(&cfg)?]);
    print!("{}", report.to_table());
    if args.out.is_some() {
        write_or_print(&args.out, &report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut entries = Vec::new();
    for head in args.heads.split(',') {
        let head = head.trim();
        if head.is_empty() {
            continue;
        }
        entries.push(compare_entry(&NetworkConfig::reference(head)?)?);
    }
    if entries.is_empty() {
        return Err(Error::Config("compare: no heads given".into()));
    }
    let report = CompareReport::new(entries);
    print!("{}", report.to_table());
    if args.out.is_some() {
        write_or_print(&args.out, &report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_rf(args: &RfArgs) -> Result<()> {
    let cfg = args.arch.resolve()?;
    let rows = rf_rows(&cfg)?;
    let csv = rf_csv(&rows);
    print!("{csv}");
    if args.out.is_some() {
        write_or_print(&args.out, &csv)?;
    }
    Ok(())
}

/// Per-branch and output receptive-field rows for a head.
pub fn rf_rows(cfg: &NetworkConfig) -> Result<Vec<RfRow>> {
    let head = build_head(&cfg.head)?;
    let states = receptive_field(&head)?;
    let kind = cfg.head.kind_name();
    // stage naming and the rates actually applied per conv stage
    let (stage_prefix, stage_offset, stage_rates): (&str, usize, Vec<usize>) = match &cfg.head {
        waspnet_core::graph::HeadConfig::Cascade(c) => ("s", 1, c.rates.clone()),
        // scale 1 passes through; convs start at scale 2
        waspnet_core::graph::HeadConfig::Res2netSeg(c) => {
            ("scale", 2, c.effective_rates()?.to_vec())
        }
        _ => ("b", 1, cfg.head.rates().to_vec()),
    };
    let mut rows = Vec::new();
    for (i, rate) in stage_rates.iter().enumerate() {
        let stage = format!("{stage_prefix}{}", i + stage_offset);
        let Some(id) = head.find_node(&format!("{kind}.{stage}.conv")) else {
            continue;
        };
        rows.push(RfRow {
            head: kind.to_string(),
            stage,
            rate: Some(*rate),
            effective_kernel: Some(waspnet_core::graph::effective_kernel(3, *rate)),
            receptive_field: states[id].receptive_field,
        });
    }
    rows.push(RfRow {
        head: kind.to_string(),
        stage: "output".into(),
        rate: None,
        effective_kernel: None,
        receptive_field: states[head.output_node()].receptive_field,
    });
    Ok(rows)
}

fn split_train_val(data: Dataset, val_data: Option<Dataset>) -> (Dataset, Dataset) {
    match val_data {
        Some(val) => (data, val),
        None => {
            // hold out the last tenth (at least one item) for validation
            let n = data.items.len();
            let val_n = (n / 10).max(1).min(n - 1).max(1);
            let split = n - val_n;
            let mut items = data.items;
            let val_items = items.split_off(split.max(1));
            (Dataset { items }, Dataset { items: val_items })
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.arch.resolve()?;
    if matches!(cfg.backbone, waspnet_core::graph::BackboneKind::Resnet101Counting) {
        return Err(Error::Config(
            "the resnet101-counting backbone is for parameter accounting only; train with 'backbone toy-resnet <depth> <width>'".into(),
        ));
    }
    let data = synth::load_dataset(&args.data)?;
    if data.items.len() < 2 && args.val_data.is_none() {
        return Err(Error::Config(
            "need at least 2 images to split off validation; pass --val-data".into(),
        ));
    }
    let val = match &args.val_data {
        Some(p) => Some(synth::load_dataset(p)?),
        None => None,
    };
    let (train_set, val_set) = split_train_val(data, val);

    let mut graph = build_network(&cfg)?;
    graph.init_parameters(args.seed);
    let mut tc = TrainConfig::new(
        args.steps,
        PolySchedule::new(args.base_lr, args.steps)?,
        cfg.decoder.num_classes,
    );
    tc.batch_size = args.batch;
    tc.seed = args.seed;
    tc.eval_every = args.eval_every;
    if args.augment {
        tc.augment = Some(waspnet_core::augment::AugmentConfig::default());
    }
    let trace = train(&mut graph, &train_set, &val_set, &tc)?;

    let prefix = args.out_prefix.display();
    fs::write(format!("{prefix}.arch"), serialize_network_config(&cfg))?;
    container::save_params(format!("{prefix}.params"), &graph)?;
    fs::write(format!("{prefix}.trace.csv"), trace.to_csv())?;
    println!(
        "trained {} for {} steps; final loss {:.4}, val miou {}, checksum {}",
        cfg.head.kind_name(),
        args.steps,
        trace.rows.last().map_or(f64::NAN, |r| r.loss),
        trace
            .final_miou()
            .map_or_else(|| "-".into(), |m| format!("{m:.4}")),
        container::params_checksum(&graph),
    );
    Ok(())
}

pub fn load_model(prefix: &Path) -> Result<(NetworkConfig, ModuleGraph)> {
    let prefix = prefix.display();
    let cfg = parse_network_config(&fs::read_to_string(format!("{prefix}.arch"))?)?;
    let mut graph = build_network(&cfg)?;
    graph.init_parameters(0);
    container::load_params(&mut graph, format!("{prefix}.params"))?;
    Ok((cfg, graph))
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let (cfg, graph) = load_model(&args.model)?;
    let image = pnm::read_ppm(&args.image)?;
    let labels = predict_labels(&graph, &image)?;
    pnm::write_pgm(&args.out, &labels)?;
    if let Some(probs_path) = &args.probs {
        let x = image.to_tensor();
        let logits = graph.forward(&[&x])?;
        let probs = waspnet_core::ops::softmax_channels(&logits)?;
        container::save_tensors(probs_path, &[("probs".to_string(), &probs)])?;
    }
    println!(
        "inferred {} labels over {} classes -> {}",
        cfg.head.kind_name(),
        cfg.decoder.num_classes,
        args.out.display()
    );
    Ok(())
}

fn pgm_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "pgm") {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .pgm files under {}",
            dir.display()
        )));
    }
    Ok(stems)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let stems = pgm_stems(&args.truth)?;
    let mut pairs = Vec::new();
    let mut max_label = 0u8;
    for stem in &stems {
        let pred = pnm::read_pgm(args.pred.join(format!("{stem}.pgm")))?;
        let truth = pnm::read_pgm(args.truth.join(format!("{stem}.pgm")))?;
        for v in pred.data.iter().chain(&truth.data) {
            if *v != IGNORE_LABEL {
                max_label = max_label.max(*v);
            }
        }
        pairs.push((pred, truth));
    }
    let classes = args.classes.unwrap_or(max_label as usize + 1);
    let mut conf = ConfusionMatrix::new(classes);
    for (pred, truth) in &pairs {
        conf.accumulate(pred, truth)?;
    }
    let report = miou(&conf)?;
    let mut csv = String::from("class,iou\n");
    for (c, iou) in report.per_class.iter().enumerate() {
        if let Some(iou) = iou {
            csv.push_str(&format!("{c},{iou:.6}\n"));
        }
    }
    csv.push_str(&format!("miou,{:.6}\n", report.miou));
    print!("{csv}");
    if args.out.is_some() {
        write_or_print(&args.out, &csv)?;
    }
    Ok(())
}

pub fn cmd_crf(args: &CrfArgs) -> Result<()> {
    let tensors = container::load_tensors(&args.probs)?;
    if tensors.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "probability container must hold exactly one tensor, found {}",
            tensors.len()
        )));
    }
    let (_, probs) = &tensors[0];
    let s = probs.shape();
    if s.n != 1 {
        return Err(Error::shape(
            "crf probabilities",
            format!("expected batch 1, got {}", s.n),
        ));
    }
    let image = pnm::read_ppm(&args.image)?;
    if image.h != s.h || image.w != s.w {
        return Err(Error::shape(
            "crf image",
            format!("image {}x{} vs probabilities {}x{}", image.h, image.w, s.h, s.w),
        ));
    }
    let params = CrfParams {
        w1: args.w1,
        w2: args.w2,
        sigma_alpha: args.sigma_alpha,
        sigma_beta: args.sigma_beta,
        sigma_gamma: args.sigma_gamma,
        iterations: args.iterations,
    };
    params.validate()?;
    let unary = UnaryField::new(s.c, image, probs.data().iter().map(|v| *v as f64).collect())?;

    let before_labels = unary.argmax();
    let refined = crf::mean_field_refine(&unary, &params)?;
    let refined_field = UnaryField::new(s.c, unary.image().clone(), refined.clone())?;
    let after_labels = refined_field.argmax();

    let energy_before = crf::energy(&before_labels, &unary, &params)?;
    let energy_after = crf::energy(&after_labels, &unary, &params)?;

    let (miou_before, miou_after) = match &args.labels {
        None => (None, None),
        Some(path) => {
            let truth = pnm::read_pgm(path)?;
            (
                Some(waspnet_core::metrics::miou_of(&before_labels, &truth, s.c)?),
                Some(waspnet_core::metrics::miou_of(&after_labels, &truth, s.c)?),
            )
        }
    };

    let prefix = args.out_prefix.display();
    let refined_tensor = Tensor::from_vec(
        Shape::new(1, s.c, s.h, s.w),
        refined.iter().map(|v| *v as f32).collect(),
    )?;
    container::save_tensors(
        format!("{prefix}.refined.wspt"),
        &[("probs".to_string(), &refined_tensor)],
    )?;
    pnm::write_pgm(format!("{prefix}.labels.pgm"), &after_labels)?;
    let rows = vec![CrfRow {
        image: args
            .image
            .file_name()
            .map_or_else(|| args.image.display().to_string(), |n| n.to_string_lossy().into_owned()),
        energy_before: energy_before.total,
        energy_after: energy_after.total,
        clamped: energy_before.clamped + energy_after.clamped,
        miou_before,
        miou_after,
    }];
    let csv = waspnet_core::report::crf_csv(&rows);
    fs::write(format!("{prefix}.crf.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// The four dilation-rate sets the sweep walks.
pub const SWEEP_RATE_SETS: [[usize; 4]; 4] = [
    [2, 4, 6, 8],
    [4, 8, 12, 16],
    [6, 12, 18, 24],
    [8, 16, 24, 32],
];

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let data = synth::load_dataset(&args.data)?;
    if data.items.len() < 2 {
        return Err(Error::Config("sweep: need at least 2 images".into()));
    }
    let (train_set, val_set) = split_train_val(data, None);
    let classes = 1 + train_set
        .items
        .iter()
        .flat_map(|(_, m)| m.data.iter())
        .filter(|l| **l != IGNORE_LABEL)
        .map(|l| *l as usize)
        .max()
        .unwrap_or(0);

    let mut rows = Vec::new();
    for rates in SWEEP_RATE_SETS {
        let mut cfg = NetworkConfig::toy("wasp", classes)?;
        if let waspnet_core::graph::HeadConfig::Wasp(WaspConfig { rates: r, .. }) = &mut cfg.head {
            *r = rates.to_vec();
        }
        cfg.decoder.dropout = 0.1;
        let mut graph = build_network(&cfg)?;
        graph.init_parameters(args.seed);
        let mut tc = TrainConfig::new(
            args.steps,
            PolySchedule::new(args.base_lr, args.steps)?,
            classes,
        );
        tc.seed = args.seed;
        tc.eval_every = 0; // only the final evaluation matters here
        train(&mut graph, &train_set, &val_set, &tc)?;
        let miou_val = evaluate(&graph, &val_set, classes)?;
        rows.push(SweepRow {
            rates: rates.to_vec(),
            parameters: graph.count_parameters(),
            output_rf: head_output_rf(&cfg)?,
            miou: miou_val,
        });
        eprintln!("rates {rates:?}: miou {miou_val:.4}");
    }
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if args.out.is_some() {
        write_or_print(&args.out, &csv)?;
    }
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_images: args.count,
        size: args.size,
        num_classes: args.classes,
        seed: args.seed,
    };
    synth::make_synthetic_dataset(&args.out, &cfg)?;
    println!(
        "wrote {} images of {}x{} with {} classes under {}",
        args.count,
        args.size,
        args.size,
        args.classes,
        args.out.display()
    );
    Ok(())
}

/// Exit code for an error per the documented policy.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Io(_) | Error::Format { .. } | Error::ShapeMismatch { .. } => 2,
        Error::NonFinite { .. } | Error::Divergence { .. } => 3,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let threads = cli.threads.or_else(|| {
        std::env::var("WASPNET_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // a second init in the same process is harmless to ignore
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Params(a) => cmd_params(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Rf(a) => cmd_rf(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Crf(a) => cmd_crf(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Synth(a) => cmd_synth(a),
    }
}
