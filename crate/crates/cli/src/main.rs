use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use relaygrid::analysis::{cost_report, extract_attention, CostReport};
use relaygrid::data::raster::Raster;
use relaygrid::data::{load_split, write_split, SPLITS};
use relaygrid::train::{load_model, RunDir};
use relaygrid::{evaluate, sliding_infer, Checkpoint, Error, RelayVariant, Result, RunConfig, Trainer};

#[derive(Parser, Debug)]
#[command(name = "relaygrid", version, about = "Relay-token multi-scale segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "RELAYGRID_THREADS")]
    threads: Option<usize>,
    /// Overrides `train.max_steps`, the update count training stops at.
    #[arg(long, global = true)]
    steps: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic train/val/test scene sets.
    Synth,
    /// Train, or resume from --checkpoint.
    Train,
    /// Score a checkpoint on the test split.
    Eval,
    /// Write relay attention maps of a checkpoint.
    Attn,
    /// Print the analytic cost of every variant.
    Cost,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut over = String::new();
    if let Some(s) = cli.seed {
        writeln!(over, "seed={s}").unwrap();
    }
    if let Some(n) = cli.steps {
        writeln!(over, "train.max_steps={n}").unwrap();
    }
    cfg.apply(&over)?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = load_config(cli)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, cli.out.as_deref()),
        Command::Train => cmd_train(&cfg, cli),
        Command::Eval => cmd_eval(&cfg, cli),
        Command::Attn => cmd_attn(&cfg, cli),
        Command::Cost => cmd_cost(&cfg),
    }
}

fn require_checkpoint(cli: &Cli) -> Result<Checkpoint> {
    let p = cli
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    Checkpoint::load(p)
}

fn cmd_synth(cfg: &RunConfig, out: Option<&Path>) -> Result<()> {
    let dir = out.unwrap_or(&cfg.data_dir);
    let counts = [cfg.splits.train, cfg.splits.val, cfg.splits.test];
    for (i, (name, count)) in SPLITS.iter().zip(counts).enumerate() {
        let rows = write_split(dir, &cfg.synth, cfg.synth_seed, i, name, count)?;
        println!("{name}={}", rows.len());
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, cli: &Cli) -> Result<()> {
    let dir = RunDir::create(cli.out.as_deref().unwrap_or(Path::new("run")))?;
    let train = load_split(&cfg.data_dir, "train")?;
    let val = if cfg.train.eval_every > 0 {
        load_split(&cfg.data_dir, "val")?
    } else {
        Vec::new()
    };
    let mut t = match &cli.checkpoint {
        Some(p) => Trainer::<f32>::resume(cfg, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg)?,
    };
    let start = t.state.step;
    let logs = t.run(&train, &val, Some(&dir), |r| {
        if r.step % 50 == 0 {
            log::info!("step {} loss {:.5} lr {:.3e}", r.step, r.loss, r.lr);
        }
    })?;
    println!("steps={}..{}", start, t.state.step);
    if let Some(last) = logs.last() {
        println!("loss={:?}", last.loss);
    }
    if t.state.best_miou.is_finite() {
        println!("best_val_miou={:?}", t.state.best_miou);
    }
    println!("checkpoint={}", dir.last().display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, cli: &Cli) -> Result<()> {
    let model = load_model::<f32>(cfg, &require_checkpoint(cli)?)?;
    let test = load_split(&cfg.data_dir, "test")?;
    let m = evaluate(&test, &model, &cfg.sampler, cfg.eval_overlap, cfg.train.infer_batch)?;
    let report = format!("{}miou_exact={:?}\n", m.report(), m.miou);
    print!("{report}");
    if let Some(out) = &cli.out {
        let dir = RunDir::create(out)?;
        fs::write(out.join("metrics.txt"), &report)?;
        fs::write(out.join("metrics.csv"), m.csv())?;
        for (i, sc) in test.iter().enumerate() {
            let pred = sliding_infer(sc, &model, &cfg.sampler, cfg.eval_overlap, cfg.train.infer_batch)?;
            Raster::from_labels(&pred).write(&dir.rasters().join(format!("pred_{i:04}.pgm")))?;
        }
    }
    Ok(())
}

/// Scales a map to `0..=255` and repeats each cell `up` times per axis.
fn map_raster(map: &[f64], grid: usize, up: usize) -> Raster {
    let max = map.iter().cloned().fold(0.0, f64::max);
    let n = grid * up;
    let data = (0..n * n)
        .map(|i| {
            let v = map[(i / n / up) * grid + (i % n) / up];
            if max > 0.0 {
                (v / max * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Raster {
        width: n,
        height: n,
        channels: 1,
        data,
    }
}

fn cmd_attn(cfg: &RunConfig, cli: &Cli) -> Result<()> {
    let model = load_model::<f32>(cfg, &require_checkpoint(cli)?)?;
    let dir = RunDir::create(cli.out.as_deref().unwrap_or(Path::new("attn")))?;
    let scenes = load_split(&cfg.data_dir, "val")?;
    let sampler = relaygrid::data::Sampler::new(cfg.sampler.clone())?;
    let with_global = model.variant.uses_global();
    let pairs = (0..cfg.attn_pairs as u64)
        .map(|i| sampler.draw(&scenes, i, with_global))
        .collect::<Result<Vec<_>>>()?;
    let maps = extract_attention(&model, &pairs)?;
    let mut csv = String::from("relay,scale,row,col,weight\n");
    for a in &maps {
        let mut scales = vec![("local", &a.local)];
        if let Some(g) = &a.global {
            scales.push(("global", g));
        }
        for (scale, map) in scales {
            for (k, w) in map.iter().enumerate() {
                writeln!(csv, "{},{scale},{},{},{w:?}", a.relay, k / a.grid, k % a.grid).unwrap();
            }
            map_raster(map, a.grid, cfg.model.patch_size)
                .write(&dir.rasters().join(format!("attn_{scale}_r{}.pgm", a.relay)))?;
        }
    }
    fs::write(dir.root.join("attn.csv"), &csv)?;
    println!("maps={}", maps.len());
    println!("out={}", dir.root.display());
    Ok(())
}

fn cmd_cost(cfg: &RunConfig) -> Result<()> {
    let batch = cfg.optim.batch;
    let base = cost_report(&cfg.model, RelayVariant::LocalOnly, batch);
    let mut variants: Vec<RelayVariant> = RelayVariant::ALL.to_vec();
    if !variants.contains(&cfg.variant) {
        variants.push(cfg.variant);
    }
    println!("{},flops_vs_baseline", CostReport::CSV_HEADER);
    for v in variants {
        if v.validate(&cfg.model).is_err() {
            continue;
        }
        let r = cost_report(&cfg.model, v, batch);
        println!("{},{:.4}", r.csv_row(v), r.flops_forward as f64 / base.flops_forward as f64);
    }
    Ok(())
}
