use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dsgdn_core::data::{write_jsonl, DialogueRecord};
use dsgdn_core::harness::bench::{run_bench, BenchConfig};
use dsgdn_core::harness::dump::{attention_dump, graph_dump};
use dsgdn_core::harness::eval::{load_split, noise_grid, write_reports};
use dsgdn_core::harness::gradcheck::run_gradcheck;
use dsgdn_core::harness::sweep::{parse_grid, run_sweep, SweepParam};
use dsgdn_core::harness::{dataset, train, Ablation, Checkpoint, RunConfig};
use dsgdn_core::synth;

/// Environment variable naming the root directory for run outputs.
const OUT_ENV: &str = "DSGDN_OUT";

#[derive(Parser)]
#[command(name = "dsgdn", version, about = "Multimodal dialogue emotion recognition: train, evaluate, sweep, benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a grid of feature-noise levels.
    Eval(EvalArgs),
    /// Train once per grid point of one hyperparameter.
    Sweep(SweepArgs),
    /// Time differential vs plain graph attention.
    Bench(BenchArgs),
    /// Finite-difference check of the full loss.
    Gradcheck(GradcheckArgs),
    /// Write the relational subgraphs of dialogues as JSON.
    Graphdump(GraphdumpArgs),
    /// Write the attention maps of one dialogue as JSON.
    AttnDump(AttnDumpArgs),
    /// Write a synthetic dataset as JSON lines.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. `--set window=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Synthetic data preset (tiny, bench, meld-like, paper-dims, default).
    #[arg(long)]
    synth: Option<String>,
    /// Dialogue JSON-lines file, split 70/10/20.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// full, w/o-md, w/o-diffrgcn or no-graph.
    #[arg(long)]
    ablate: Option<String>,
    /// Disable modality balancing.
    #[arg(long)]
    no_balance: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = &self.synth {
            cfg.set("synth", s)?;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(a) = &self.ablate {
            cfg.apply_ablation(Ablation::parse(a)?);
        }
        cfg.apply_overrides(&self.sets)?;
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.set("precision", p)?;
        }
        if self.no_balance {
            cfg.balance.enabled = false;
        }
        Ok(cfg)
    }
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

fn resolve_out(explicit: Option<&Path>, cfg: &RunConfig, default_name: &str) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| out_root().join(default_name))
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory (default: $DSGDN_OUT/train-<config hash>, with `runs` as the root).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from <out>/checkpoint.json.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CheckpointArgs {
    /// Checkpoint file.
    #[arg(long, conflicts_with = "run")]
    checkpoint: Option<PathBuf>,
    /// Run directory; its best.json is used.
    #[arg(long)]
    run: Option<PathBuf>,
}

impl CheckpointArgs {
    fn path(&self) -> Result<PathBuf> {
        match (&self.checkpoint, &self.run) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(r)) => Ok(r.join("best.json")),
            (None, None) => bail!("give --checkpoint or --run"),
        }
    }
}

/// Data source overrides applied on top of the checkpoint's own config.
#[derive(Args)]
struct DataOverride {
    /// Dialogue JSON-lines file to evaluate instead of the training data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override one key of the stored config (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// train, valid or test.
    #[arg(long, default_value = "test")]
    split: String,
}

impl DataOverride {
    fn config(&self, ck: &Checkpoint) -> Result<RunConfig> {
        let mut cfg = ck.run_config()?;
        cfg.apply_overrides(&self.sets)?;
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
            cfg.train_data = None;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[command(flatten)]
    data: DataOverride,
    /// Comma-separated noise levels (default from the stored config).
    #[arg(long, value_delimiter = ',')]
    noise: Option<Vec<f64>>,
    /// Output directory (default: next to the checkpoint, `eval/`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// window, heads, warmup or q_base,p_exe.
    #[arg(long)]
    param: String,
    /// Grid values, e.g. `1,3,5`; two axes separated by `;` for q_base,p_exe.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, value_delimiter = ',', default_value = "16,64,128,256")]
    lengths: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Also write the table as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct Selection {
    /// Dialogue index within the split.
    #[arg(long)]
    index: Option<usize>,
    /// Dialogue id.
    #[arg(long)]
    id: Option<String>,
}

impl Selection {
    fn pick<'a>(&self, records: &'a [DialogueRecord]) -> Result<Vec<&'a DialogueRecord>> {
        if let Some(id) = &self.id {
            let r = records.iter().find(|r| &r.id == id).with_context(|| format!("no dialogue with id `{id}`"))?;
            return Ok(vec![r]);
        }
        if let Some(i) = self.index {
            let r = records.get(i).with_context(|| format!("index {i} out of range ({} dialogues)", records.len()))?;
            return Ok(vec![r]);
        }
        Ok(records.iter().collect())
    }
}

#[derive(Args)]
struct GraphdumpArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value = "test")]
    split: String,
    #[command(flatten)]
    sel: Selection,
    /// Window (default from the config).
    #[arg(long)]
    window: Option<usize>,
    /// Output file (default stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttnDumpArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[command(flatten)]
    data: DataOverride,
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "default")]
    preset: String,
    /// Override a generator key, e.g. `--set dialogues=50` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let cfg = a.cfg.build()?;
    let name = format!("train-{}", cfg.trajectory_hash());
    let out = resolve_out(a.out.as_deref(), &cfg, &name);
    let s = train(&cfg, Some(&out), a.resume)?;
    println!("run directory: {}", out.display());
    if let (Some(e), Some(f)) = (s.best_epoch, s.best_valid_wa_f1) {
        println!("best epoch {e} (valid wa_f1 {f:.4})");
    }
    println!("final train: wa_acc {:.4} wa_f1 {:.4}", s.final_train.wa_acc, s.final_train.wa_f1);
    println!("test:        wa_acc {:.4} wa_f1 {:.4} (n = {})", s.test.wa_acc, s.test.wa_f1, s.test.n);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let ck_path = a.ck.path()?;
    let ck = Checkpoint::load(&ck_path)?;
    let cfg = a.data.config(&ck)?;
    let records = load_split(&ck, &cfg, &a.data.split)?;
    let grid = a.noise.unwrap_or_else(|| cfg.noise_grid.clone());
    let rows = noise_grid(&ck, &records, &grid, cfg.seed, cfg.batch_size)?;
    let out = a
        .out
        .unwrap_or_else(|| ck_path.parent().unwrap_or(Path::new(".")).join("eval"));
    write_reports(&out, &rows)?;
    println!("sigma  wa_acc  wa_f1");
    for r in &rows {
        println!("{:<5}  {:.4}  {:.4}", r.sigma, r.metrics.wa_acc, r.metrics.wa_f1);
    }
    println!("wrote {}/noise.csv and confusion.json", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    let cfg = a.cfg.build()?;
    let param = SweepParam::parse(&a.param)?;
    let axes = match &a.grid {
        Some(g) => parse_grid(param, g)?,
        None => param.default_grid(),
    };
    let name = format!("sweep-{}-{}", param.keys().join("-"), cfg.trajectory_hash());
    let out = resolve_out(a.out.as_deref(), &cfg, &name);
    let rows = run_sweep(&cfg, param, &axes, Some(&out))?;
    for r in &rows {
        let point: Vec<String> = r.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{:<24} wa_acc {:.4} wa_f1 {:.4}", point.join(" "), r.wa_acc, r.wa_f1);
    }
    println!("wrote {}/sweep.csv", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(a: BenchArgs) -> Result<ExitCode> {
    let cfg = BenchConfig {
        batch: a.batch,
        hidden: a.hidden,
        heads: a.heads,
        lengths: a.lengths,
        window: a.window,
        reps: a.reps,
        seed: 0,
    };
    let rep = run_bench(&cfg)?;
    print!("{}", rep.to_csv());
    let large: Vec<usize> = cfg.lengths.iter().copied().filter(|&l| l >= 64).collect();
    if large.len() >= 2 {
        for kind in ["diffrgcn", "plain-gat"] {
            let w = rep.slope(kind, false, &large).unwrap_or(f64::NAN);
            let d = rep.slope(kind, true, &large).unwrap_or(f64::NAN);
            println!("{kind}: log-log slope windowed {w:.3}, dense {d:.3}");
        }
    }
    if let Some(p) = a.out {
        fs::write(&p, rep.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let outcome = run_gradcheck(a.seed, a.tol)?;
    println!("{outcome}");
    Ok(if outcome.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_graphdump(a: GraphdumpArgs) -> Result<ExitCode> {
    let cfg = a.cfg.build()?;
    let data = dataset::load(&cfg)?;
    let picked: Vec<DialogueRecord> = a.sel.pick(data.split(&a.split)?)?.into_iter().cloned().collect();
    let dump = graph_dump(&picked, a.window.unwrap_or(cfg.window));
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&dump)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_attn_dump(a: AttnDumpArgs) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.ck.path()?)?;
    let cfg = a.data.config(&ck)?;
    let records = load_split(&ck, &cfg, &a.data.split)?;
    let sel = Selection {
        index: a.sel.index.or(if a.sel.id.is_none() { Some(0) } else { None }),
        id: a.sel.id.clone(),
    };
    let rec = sel.pick(&records)?[0];
    let dump = attention_dump(&ck, rec)?;
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&dump)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::default();
    cfg.set("synth", &a.preset)?;
    for s in &a.sets {
        let (k, v) = s.split_once('=').with_context(|| format!("`{s}` is not key=value"))?;
        cfg.set(&format!("synth.{}", k.trim()), v)?;
    }
    let sc = cfg.synth.expect("preset set above");
    let records = synth::generate(&sc)?;
    write_jsonl(&a.out, &records)?;
    println!("wrote {} dialogues to {}", records.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Graphdump(a) => cmd_graphdump(a),
        Command::AttnDump(a) => cmd_attn_dump(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
