use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vit_surgeon::diagnostics::{self, SimilarityStatistic, TokenChoice, ValueSpace};
use vit_surgeon::encoder::{self, EncodeMode, Variant};
use vit_surgeon::error::{Category, Error};
use vit_surgeon::eval::{self, Dataset};
use vit_surgeon::model::{ModelBundle, MODEL_CFG, MODEL_GTF};
use vit_surgeon::netpbm;
use vit_surgeon::pipeline::{self, InferenceConfig, TextBank};
use vit_surgeon::surgery::{self, FusionConfig, FusionVariant, SuppressionConfig, SuppressionStart};
use vit_surgeon::{gtf, Tensor};

/// Marker comment written into the config of a suppressed bundle.
const SUPPRESSED_MARK: &str = "# channel-suppressed from block";

#[derive(Parser)]
#[command(name = "vit-surgeon", version, about = "Training-free open-vocabulary segmentation with a CLIP ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one image and write a P5 class-index mask.
    Segment(SegmentArgs),
    /// Score a dataset directory and print per-class IoU and mIoU.
    Eval(EvalArgs),
    /// Write an analysis report as CSV.
    Diagnose(DiagnoseArgs),
    /// Apply channel suppression to a checkpoint and save it.
    Suppress(SuppressArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Vanilla,
    Clearclip,
    Gclip,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum AmfVariant {
    Global,
    Cls,
}

#[derive(Clone, Copy)]
enum AmfWidth {
    None,
    Blocks(usize),
}

fn parse_amf_width(s: &str) -> Result<AmfWidth, String> {
    match s {
        "none" => Ok(AmfWidth::None),
        n => n
            .parse()
            .map(AmfWidth::Blocks)
            .map_err(|_| format!("expected a block count or `none`, got `{n}`")),
    }
}

#[derive(Args)]
struct ModelArgs {
    /// Directory holding model.gtf and model.cfg.
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args)]
struct SurgeryArgs {
    #[arg(long, value_enum, default_value = "gclip")]
    mode: Mode,
    /// Extra fused blocks after the emergence block, or `none`.
    #[arg(long = "amf-l", value_parser = parse_amf_width, default_value = "1")]
    amf_l: AmfWidth,
    #[arg(long = "amf-variant", value_enum, default_value = "global")]
    amf_variant: AmfVariant,
    /// Channel suppression; defaults to on for gclip and off otherwise.
    #[arg(long, value_enum)]
    cs: Option<Switch>,
    #[arg(long = "cs-start", default_value = "auto")]
    cs_start: SuppressionStart,
    #[arg(long = "cs-dual", value_enum, default_value = "on")]
    cs_dual: Switch,
}

impl SurgeryArgs {
    fn encode_mode(&self) -> EncodeMode {
        let variant = match self.mode {
            Mode::Vanilla => Variant::Vanilla,
            Mode::Clearclip => Variant::ClearClip,
            Mode::Gclip => Variant::GClip,
        };
        let cs = self.cs.unwrap_or(if variant == Variant::GClip { Switch::On } else { Switch::Off });
        let suppression = SuppressionConfig {
            enabled: cs == Switch::On,
            start: self.cs_start,
            dual_stream: self.cs_dual == Switch::On,
            ..SuppressionConfig::default()
        };
        let fusion = match (variant, self.amf_l) {
            (Variant::GClip, AmfWidth::Blocks(width)) => Some(FusionConfig {
                width,
                variant: match self.amf_variant {
                    AmfVariant::Global => FusionVariant::GlobalBlocks,
                    AmfVariant::Cls => FusionVariant::ClsDuplicate,
                },
                ..FusionConfig::default()
            }),
            _ => None,
        };
        EncodeMode {
            variant,
            fusion,
            suppression,
        }
    }
}

#[derive(Args)]
struct WindowArgs {
    /// Short side after resizing; defaults to 1.5x the model input size.
    #[arg(long)]
    resize: Option<usize>,
    /// Window size; must equal the model input size.
    #[arg(long)]
    window: Option<usize>,
    /// Window stride; defaults to half the window.
    #[arg(long)]
    stride: Option<usize>,
}

impl WindowArgs {
    fn inference(&self, bundle: &ModelBundle, mode: EncodeMode) -> InferenceConfig {
        let mut cfg = InferenceConfig::for_model(bundle.config(), mode);
        if let Some(r) = self.resize {
            cfg.resize_short_side = r;
        }
        if let Some(w) = self.window {
            cfg.window = w;
        }
        if let Some(s) = self.stride {
            cfg.stride = s;
        }
        cfg
    }
}

#[derive(Args)]
struct BankArgs {
    /// GTF file holding the `text_embeddings` tensor.
    #[arg(long)]
    text: PathBuf,
    /// Class names, one per line.
    #[arg(long)]
    classes: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    bank: BankArgs,
    /// Binary P6 input image.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    surgery: SurgeryArgs,
    #[command(flatten)]
    window: WindowArgs,
    /// Output P5 mask path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the `[H x W x C]` logits at the resized resolution as GTF.
    #[arg(long)]
    logits: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    bank: BankArgs,
    /// Dataset directory with classes.txt, images/ and labels/.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    surgery: SurgeryArgs,
    #[command(flatten)]
    window: WindowArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Entropy,
    GlobalTokens,
    ValueSim,
    Agreement,
}

#[derive(Clone, Copy, ValueEnum)]
enum TokenArg {
    Global,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Pre,
    Post,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatArg {
    Pairwise,
    Centroid,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    report: Report,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Text embeddings, needed by the agreement report.
    #[arg(long)]
    text: Option<PathBuf>,
    /// Class names; defaults to the dataset's classes.txt.
    #[arg(long)]
    classes: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "global")]
    token: TokenArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Suppression start for the value-sim comparison.
    #[arg(long = "cs-start", default_value = "auto")]
    cs_start: SuppressionStart,
    #[arg(long = "value-space", value_enum, default_value = "pre")]
    value_space: SpaceArg,
    #[arg(long, value_enum, default_value = "pairwise")]
    similarity: StatArg,
}

#[derive(Args)]
struct SuppressArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long = "cs-start", default_value = "auto")]
    cs_start: SuppressionStart,
    /// Output directory for the suppressed model.gtf and model.cfg.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Stage(&'static str, Error),
}

type CliResult<T> = Result<T, Failure>;

trait Stage<T> {
    fn stage(self, name: &'static str) -> CliResult<T>;
}

impl<T> Stage<T> for Result<T, Error> {
    fn stage(self, name: &'static str) -> CliResult<T> {
        self.map_err(|e| Failure::Stage(name, e))
    }
}

fn usage(msg: impl Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("VIT_SURGEON_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("VIT_SURGEON_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot size the worker pool: {e}")))
}

fn load_bank(args: &BankArgs) -> CliResult<TextBank> {
    pipeline::build_text_bank(&args.text, &args.classes).stage("load text embeddings")
}

fn load_model(args: &ModelArgs) -> CliResult<ModelBundle> {
    ModelBundle::load_dir(&args.model).stage("load model")
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Stage("write output", Error::io(path, e)))
}

fn segment(args: &SegmentArgs) -> CliResult<()> {
    let bundle = load_model(&args.model)?;
    let bank = load_bank(&args.bank)?;
    let image = netpbm::read_ppm(&args.image).stage("read image")?;
    let cfg = args.window.inference(&bundle, args.surgery.encode_mode());
    let seg = pipeline::sliding_window_segment(&image, &bundle, &bank, &cfg).stage("segment")?;
    netpbm::write_pgm(&args.out, &seg.mask).stage("write mask")?;
    if let Some(path) = &args.logits {
        let bytes = gtf::write_gtf([("logits", &seg.logits.values)]).stage("write logits")?;
        std::fs::write(path, bytes).map_err(|e| Failure::Stage("write logits", Error::io(path, e)))?;
    }
    for (plan, windows) in seg.plan_summary() {
        println!("plan: {plan} ({windows} windows)");
    }
    println!("mask: {}", args.out.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> CliResult<()> {
    let bundle = load_model(&args.model)?;
    let bank = load_bank(&args.bank)?;
    let dataset = Dataset::open(&args.data).stage("open dataset")?;
    let cfg = args.window.inference(&bundle, args.surgery.encode_mode());
    let report = eval::evaluate(&dataset, &bundle, &bank, &cfg).stage("evaluate")?;
    let width = report.classes.iter().map(String::len).max().unwrap_or(0).max(5);
    println!("{:<width$}  IoU", "class");
    for (name, iou) in report.classes.iter().zip(&report.ious) {
        match iou {
            Some(v) => println!("{name:<width$}  {:.1}", v * 100.0),
            None => println!("{name:<width$}  -"),
        }
    }
    println!("{:<width$}  {:.1}", "mIoU", report.miou * 100.0);
    Ok(())
}

fn first_image(args: &DiagnoseArgs) -> CliResult<PathBuf> {
    if let Some(p) = &args.image {
        return Ok(p.clone());
    }
    if let Some(d) = &args.data {
        let ds = Dataset::open(d).stage("open dataset")?;
        return Ok(ds.samples[0].image.clone());
    }
    Err(usage("this report needs --image or --data"))
}

fn diagnose(args: &DiagnoseArgs) -> CliResult<()> {
    let bundle = load_model(&args.model)?;
    let model = bundle.config();
    let csv = match args.report {
        Report::Entropy => {
            let profile = diagnostics::entropy_profile(&bundle).stage("entropy profile")?;
            let rows: Vec<(usize, String)> = profile.iter().map(|&(b, h)| (b, format!("{h:.6}"))).collect();
            for (b, h) in &rows {
                println!("block {b}: entropy {h}");
            }
            match surgery::find_suppression_start(&bundle, &SuppressionConfig::default()) {
                Ok(s) => println!("auto s={s}"),
                Err(e) => println!("auto s=- ({e})"),
            }
            diagnostics::to_csv("block,entropy", &rows)
        }
        Report::GlobalTokens => {
            let path = first_image(args)?;
            let image = netpbm::read_ppm(&path).stage("read image")?;
            let input = diagnostics::model_input(&image, model).stage("prepare image")?;
            let out = encoder::encode(&input, &bundle, &EncodeMode::vanilla()).stage("encode")?;
            let report =
                diagnostics::global_token_report(&out.record, &FusionConfig::default()).stage("detect global tokens")?;
            match report.g {
                Some(g) => println!("g={g}"),
                None => println!("g=- (no global tokens detected)"),
            }
            for b in report.blocks.iter().filter(|b| !b.columns.is_empty()) {
                let cols: Vec<String> = b.columns.iter().map(ToString::to_string).collect();
                println!("block {}: columns {}", b.block, cols.join(","));
            }
            diagnostics::global_tokens_csv(&report)
        }
        Report::ValueSim => value_sim(args, &bundle)?,
        Report::Agreement => {
            let Some(data) = &args.data else {
                return Err(usage("the agreement report requires --data"));
            };
            let Some(text) = &args.text else {
                return Err(usage("the agreement report requires --text"));
            };
            let ds = Dataset::open(data).stage("open dataset")?;
            let classes = args.classes.clone().unwrap_or_else(|| data.join("classes.txt"));
            let bank = pipeline::build_text_bank(text, &classes).stage("load text embeddings")?;
            let images: Vec<Tensor> = ds
                .samples
                .iter()
                .map(|s| {
                    let img = netpbm::read_ppm(&s.image)?;
                    diagnostics::model_input(&img, model)
                })
                .collect::<Result<_, Error>>()
                .stage("read images")?;
            let (choice, name) = match args.token {
                TokenArg::Global => (TokenChoice::Global, "global"),
                TokenArg::Random => (TokenChoice::Random, "random"),
            };
            let frac = diagnostics::token_cls_agreement(&bundle, &bank, &images, choice, args.seed)
                .stage("token agreement")?;
            println!("{name} token agreement with CLS: {:.1}% over {} images", frac * 100.0, images.len());
            diagnostics::to_csv("token,agreement", &[(name, format!("{frac:.6}"))])
        }
    };
    write_file(&args.out, &csv)
}

fn value_sim(args: &DiagnoseArgs, bundle: &ModelBundle) -> CliResult<String> {
    let Some(data) = &args.data else {
        return Err(usage("the value-sim report requires --data"));
    };
    let ds = Dataset::open(data).stage("open dataset")?;
    let model = bundle.config();
    let space = match args.value_space {
        SpaceArg::Pre => ValueSpace::PreProj,
        SpaceArg::Post => ValueSpace::PostProj,
    };
    let stat = match args.similarity {
        StatArg::Pairwise => SimilarityStatistic::Pairwise,
        StatArg::Centroid => SimilarityStatistic::Centroid,
    };
    let off = EncodeMode::clearclip();
    let mut on = EncodeMode::clearclip();
    on.suppression = SuppressionConfig {
        start: args.cs_start,
        ..SuppressionConfig::default()
    };
    let mut csv = String::from("sample,cs,in_in,in_out\n");
    let mut totals = [(0.0, 0.0); 2];
    let mut counted = 0usize;
    for s in &ds.samples {
        let img = netpbm::read_ppm(&s.image).stage("read image")?;
        let label = netpbm::read_pgm(&s.label).stage("read label")?;
        let input = diagnostics::model_input(&img, model).stage("prepare image")?;
        let regions = diagnostics::patch_regions(&label, model, ds.ignore_index);
        let mut row = Vec::with_capacity(2);
        for mode in [&off, &on] {
            let out = encoder::encode(&input, bundle, mode).stage("encode")?;
            let v = diagnostics::patch_value_vectors(&out.record, bundle, space).stage("value vectors")?;
            match diagnostics::value_similarity_report(&v, &regions, stat) {
                Ok(r) => row.push(r),
                Err(Error::Domain(msg)) => {
                    eprintln!("skipping `{}`: {msg}", s.stem);
                    break;
                }
                Err(e) => return Err(Failure::Stage("value similarity", e)),
            }
        }
        if row.len() == 2 {
            counted += 1;
            for ((cs, r), t) in ["off", "on"].iter().zip(&row).zip(&mut totals) {
                csv.push_str(&format!("{},{cs},{:.6},{:.6}\n", s.stem, r.in_in, r.in_out));
                t.0 += r.in_in;
                t.1 += r.in_out;
            }
        }
    }
    if counted == 0 {
        return Err(Failure::Stage(
            "value similarity",
            Error::Domain("no sample has two labeled regions with repeated patches".into()),
        ));
    }
    for (cs, t) in ["off", "on"].iter().zip(totals) {
        println!(
            "cs {cs}: in_in {:.4} in_out {:.4} ({counted} samples)",
            t.0 / counted as f64,
            t.1 / counted as f64
        );
    }
    Ok(csv)
}

fn suppress(args: &SuppressArgs) -> CliResult<()> {
    let bundle = load_model(&args.model)?;
    let cfg_path = args.model.model.join(MODEL_CFG);
    let cfg_text = std::fs::read_to_string(&cfg_path)
        .map_err(|e| Failure::Stage("load model", Error::io(&cfg_path, e)))?;
    let cs = SuppressionConfig {
        start: args.cs_start,
        ..SuppressionConfig::default()
    };
    let out = surgery::apply_cs(&bundle, &cs).stage("channel suppression")?;
    let s = out.start.expect("suppression enabled");
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Stage("write model", Error::io(&args.out, e)))?;
    gtf::save_gtf(&args.out.join(MODEL_GTF), out.bundle.tensors()).stage("write model")?;
    write_file(
        &args.out.join(MODEL_CFG),
        &format!("{}{SUPPRESSED_MARK} {s}\n", with_newline(&cfg_text)),
    )?;
    let f = bundle.config().last_block();
    println!("suppressed fc2 of blocks {s}..={f}, s={s}");
    if let Some(line) = cfg_text.lines().find(|l| l.starts_with(SUPPRESSED_MARK)) {
        println!(
            "note: input was already suppressed ({}); suppression is not idempotent, so this pass flattened the next-strongest channel",
            line.trim_start_matches("# ")
        );
    } else {
        println!("note: suppression is not idempotent; re-applying it to the output flattens the next-strongest channel");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn with_newline(s: &str) -> String {
    if s.is_empty() || s.ends_with('\n') {
        s.to_owned()
    } else {
        format!("{s}\n")
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Segment(a) => segment(a),
        Command::Eval(a) => run_eval(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Suppress(a) => suppress(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(stage, err)) => {
            eprintln!("error: {stage}: {err}");
            ExitCode::from(match err.category() {
                Category::Data => 2,
                Category::Model => 3,
            })
        }
    }
}
