use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bimatch_core::gradsuite::{run_suite, TOLERANCE};
use bimatch_core::numkernel::checkpoint;
use bimatch_core::patchlabel::label_patches;
use bimatch_core::synthdata::pnm::{decode_pgm, encode_pgm};
use bimatch_core::synthdata::{generate_dataset, read_dataset, write_dataset, Dataset, GenConfig};
use bimatch_core::trainer::{
    ablation_csv, evaluate_checkpoint, loss_chart, mim_comparison_csv, parse_sweep_csv, run_ablation,
    run_mim_comparison, run_sweep, sweep_charts, sweep_csv, sweep_points, train, ExperimentRun,
    RunReport, TrainConfig, SWEEP_BETAS, SWEEP_BETA_MASK_RATES, SWEEP_MASK_RATES,
};

#[derive(Parser)]
#[command(name = "bimatch", version, about = "Text-to-image person retrieval with bidirectional masked modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Compute majority-vote patch labels of parse maps.
    LabelPatches(LabelArgs),
    /// Train a model and evaluate it on the held-out identities.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out identities.
    Eval(EvalArgs),
    /// Run the four-way component ablation.
    Ablate(SuiteArgs),
    /// Compare the masked-image objectives.
    MimCompare(SuiteArgs),
    /// Sweep the image mask rate and the masked-image loss weight.
    Sweep(SweepArgs),
    /// Finite-difference gradient checks of every loss and component.
    GradCheck(GradCheckArgs),
    /// Render SVG charts from a sweep CSV or a training report.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    identities: usize,
    #[arg(long, default_value_t = 4)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 2)]
    captions_per_image: usize,
    /// 8, or 7 to merge hat into hair.
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
}

#[derive(Args)]
struct LabelArgs {
    /// A single parse map (PGM).
    #[arg(long, conflicts_with = "dataset")]
    parse: Option<PathBuf>,
    /// Label every parse map of a dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    patch_size: usize,
    #[arg(long, default_value_t = 8)]
    num_classes: usize,
    /// Output PGM (single map) or directory (dataset).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory; overrides the `dataset` key of the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory; overrides the `output_dir` key of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write the result as JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: PathBuf,
    /// Mask rates swept at unit loss weight.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_MASK_RATES)]
    mask_rates: Vec<f64>,
    /// Loss weights swept at each of `--beta-mask-rates`.
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_BETAS)]
    betas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_BETA_MASK_RATES)]
    beta_mask_rates: Vec<f64>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 10)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotArgs {
    /// Sweep CSV; charts are written into `--out` as a directory.
    #[arg(long, conflicts_with = "report")]
    sweep: Option<PathBuf>,
    /// Training report; the loss curve is written to `--out`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(a) => gen_data(a),
        Command::LabelPatches(a) => label(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => suite(a, "ablation", |c, d, p| run_ablation(c, d, p), ablation_csv),
        Command::MimCompare(a) => suite(a, "mim_comparison", |c, d, p| run_mim_comparison(c, d, p), mim_comparison_csv),
        Command::Sweep(a) => sweep_cmd(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Plot(a) => plot(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        seed: a.seed,
        num_identities: a.identities,
        images_per_identity: a.images_per_identity,
        captions_per_image: a.captions_per_image,
        num_classes: a.num_classes,
        ..GenConfig::default()
    };
    let (ds, _) = generate_dataset(&cfg)?;
    write_dataset(&ds, &a.out)?;
    println!(
        "wrote {} images and {} captions to {}",
        ds.images.len(),
        ds.captions.len(),
        a.out.display()
    );
    Ok(())
}

fn label(a: LabelArgs) -> Result<()> {
    match (&a.parse, &a.dataset) {
        (Some(path), None) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let map = decode_pgm(&bytes, a.num_classes, path)?;
            let grid = label_patches(&map, a.patch_size, a.num_classes)?;
            for r in 0..grid.rows {
                let row: Vec<String> = (0..grid.cols).map(|c| grid.get(r, c).to_string()).collect();
                println!("{}", row.join(" "));
            }
            if let Some(out) = &a.out {
                write(out, encode_pgm(&grid.to_parse_map()))?;
            }
        }
        (None, Some(dir)) => {
            let ds = read_dataset(dir)?;
            let out = a.out.clone().unwrap_or_else(|| dir.join("patch_labels"));
            for (i, img) in ds.images.iter().enumerate() {
                let grid = label_patches(&img.parse, a.patch_size, ds.scheme.num_classes)?;
                write(&out.join(format!("{i:04}.pgm")), encode_pgm(&grid.to_parse_map()))?;
            }
            println!("labelled {} parse maps into {}", ds.images.len(), out.display());
        }
        _ => bail!("give exactly one of --parse or --dataset"),
    }
    Ok(())
}

/// Reads the config file verbatim and loads the dataset it points to.
fn load_run(a: &RunArgs) -> Result<(String, TrainConfig, Dataset)> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = TrainConfig::parse(&text).with_context(|| format!("parsing {}", a.config.display()))?;
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    let Some(dir) = cfg.dataset.clone() else {
        bail!("no dataset: pass --dataset or set `dataset` in the config");
    };
    let ds = read_dataset(&dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok((text, cfg, ds))
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write(&dir.join("report.json"), report.to_json()?)?;
    write(&dir.join("metrics.csv"), report.metrics_csv())?;
    write(
        &dir.join("timing.json"),
        format!("{{\n  \"wall_clock_seconds\": {}\n}}\n", report.wall_clock_seconds),
    )?;
    Ok(())
}

fn summary(report: &RunReport) -> String {
    let t = &report.test;
    format!(
        "loss {:.4} -> {:.4}, R@1 {:.2}, R@5 {:.2}, R@10 {:.2}, mAP {:.2} ({:.0}s)",
        report.first_total(),
        report.final_total(),
        100.0 * t.rank(1),
        100.0 * t.rank(5),
        100.0 * t.rank(10),
        100.0 * t.mean_ap,
        report.wall_clock_seconds
    )
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (text, mut cfg, ds) = load_run(&a.run)?;
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    let Some(out) = cfg.output_dir.clone() else {
        bail!("no output directory: pass --out or set `output_dir` in the config");
    };
    let run = train(&cfg, &ds, &text)?;
    write_report(&out, &run.report)?;
    checkpoint::save(&run.store, &out.join("checkpoint.bin"))?;
    write(&out.join("loss.svg"), loss_chart(&[("total".into(), &run.report)])?)?;
    println!("{}", summary(&run.report));
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (_, cfg, ds) = load_run(&a.run)?;
    let result = evaluate_checkpoint(&cfg, &ds, &a.checkpoint)?;
    let json = result.to_json()?;
    println!("{json}");
    if let Some(out) = &a.out {
        write(out, json + "\n")?;
    }
    Ok(())
}

type SuiteFn = fn(&TrainConfig, &Dataset, &mut dyn FnMut(&ExperimentRun)) -> bimatch_core::Result<Vec<ExperimentRun>>;

fn progress(out: &Path) -> impl FnMut(&ExperimentRun) + '_ {
    move |r: &ExperimentRun| {
        let dir = out.join(r.label.replace([',', '='], "_"));
        if let Err(e) = write_report(&dir, &r.report) {
            eprintln!("warning: {e:#}");
        }
        println!("{:<24} {}", r.label, summary(&r.report));
    }
}

fn suite(a: SuiteArgs, name: &str, f: SuiteFn, csv: fn(&[ExperimentRun]) -> String) -> Result<()> {
    let (_, cfg, ds) = load_run(&a.run)?;
    let runs = f(&cfg, &ds, &mut progress(&a.out))?;
    write(&a.out.join(format!("{name}.csv")), csv(&runs))?;
    let curves: Vec<(String, &RunReport)> = runs.iter().map(|r| (r.label.clone(), &r.report)).collect();
    write(&a.out.join(format!("{name}_loss.svg")), loss_chart(&curves)?)?;
    print!("{}", csv(&runs));
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let (_, cfg, ds) = load_run(&a.run)?;
    let points = sweep_points(&a.mask_rates, &a.betas, &a.beta_mask_rates)?;
    let runs = run_sweep(&cfg, &ds, &points, &mut progress(&a.out))?;
    let table = sweep_csv(&runs);
    write(&a.out.join("sweep.csv"), &table)?;
    for (stem, svg) in sweep_charts(&parse_sweep_csv(&table)?)? {
        write(&a.out.join(format!("{stem}.svg")), svg)?;
    }
    print!("{table}");
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    if a.instances == 0 {
        bail!("--instances must be positive");
    }
    let entries = run_suite(a.instances, a.seed)?;
    let mut failed = 0;
    for e in &entries {
        let ok = e.passes();
        failed += usize::from(!ok);
        println!(
            "{:<18} {:>3} instances {:>6} entries  max rel {:.2e}  {}",
            e.name,
            e.instances,
            e.check.checked,
            e.check.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!("{failed} gradient checks exceed relative error {TOLERANCE:e}");
    }
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    match (&a.sweep, &a.report) {
        (Some(csv), None) => {
            let text = fs::read_to_string(csv).with_context(|| format!("reading {}", csv.display()))?;
            for (stem, svg) in sweep_charts(&parse_sweep_csv(&text)?)? {
                let path = a.out.join(format!("{stem}.svg"));
                write(&path, svg)?;
                println!("{}", path.display());
            }
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let report = RunReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
            write(&a.out, loss_chart(&[("total".into(), &report)])?)?;
            println!("{}", a.out.display());
        }
        _ => bail!("give exactly one of --sweep or --report"),
    }
    Ok(())
}
