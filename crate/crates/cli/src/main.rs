use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use srmt::config::{spaced_lengths, ConfigError, ExperimentConfig, MapSource};
use srmt::evalkit::{
    evaluate_tasks, memory_trace, sweep_corridors, write_reports_csv, write_trace_csv, EpisodeRecord, EvalError,
    EvalOptions, MetricReport,
};
use srmt::maps::{gen_maze, gen_random, parse_movingai, BottleneckSpec, MapDoc, MapError, MapMeta};
use srmt::policy::Policy;
use srmt::trainer::{load_checkpoint, save_checkpoint, train, TaskSet, TrainState, TrainerError};

#[derive(Parser, Debug)]
#[command(name = "srmt", version, about = "Shared recurrent memory transformer pathfinding lab")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MapKind {
    Bottleneck,
    Random,
    Maze,
    MovingaiImport,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write map JSON files and a manifest.
    GenMaps {
        #[arg(long, value_enum)]
        kind: MapKind,
        #[arg(long)]
        out: PathBuf,
        /// Corridor lengths: `A..B` (evenly spaced, see --count) or `a,b,c`.
        #[arg(long)]
        lengths: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value_t = 5)]
        room_size: usize,
        /// Side of random and maze maps.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        density: Option<f64>,
        /// MovingAI `.map` file to import.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a map directory or a corridor sweep.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "sweep_corridors")]
        maps: Option<PathBuf>,
        /// `A..B` or `a,b,c`.
        #[arg(long)]
        sweep_corridors: Option<String>,
        /// Points in an `A..B` sweep.
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        /// Episodes per seed.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        record_memory: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a recorded episode into the memory/grid distance table.
    AnalyzeMemory {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
            CliError::Io(m) => write!(f, "I/O error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MapError> for CliError {
    fn from(e: MapError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Io(e) => CliError::Io(e.to_string()),
            TrainerError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io(e) => CliError::Io(e.to_string()),
            EvalError::Trainer(t) => t.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io<T>(r: std::io::Result<T>, what: &Path) -> Result<T, CliError> {
    r.map_err(|e| CliError::Io(format!("{}: {e}", what.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    io(fs::write(path, text), path)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    io(fs::create_dir_all(path), path)
}

/// `SRMT_SEED` wins over any seed given on the command line or in a config.
fn seed_override(seed: u64) -> Result<u64, CliError> {
    match std::env::var("SRMT_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("SRMT_SEED `{v}` is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

fn parse_lengths(text: &str, count: usize) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Config(format!("lengths `{text}`: expected `A..B` or a comma list"));
    if let Some((a, b)) = text.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| bad())?;
        let hi: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if lo == 0 || lo > hi {
            return Err(bad());
        }
        return Ok(spaced_lengths(lo, hi, count));
    }
    let v: Vec<usize> = text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?;
    if v.is_empty() || v.contains(&0) {
        return Err(bad());
    }
    Ok(v)
}

fn threads(cap: Option<usize>, wanted: usize) -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    wanted.min(cap.unwrap_or(avail)).max(1)
}

fn gen_maps(cmd: &Cmd) -> Result<(), CliError> {
    let Cmd::GenMaps { kind, out, lengths, count, room_size, size, density, input, seed } = cmd else { unreachable!() };
    let seed = seed_override(*seed)?;
    let mut docs: Vec<MapDoc> = Vec::new();
    match kind {
        MapKind::Bottleneck => {
            let count = count.unwrap_or(16);
            let lengths = parse_lengths(lengths.as_deref().unwrap_or("3..30"), count)?;
            for l in lengths {
                let spec = BottleneckSpec { corridor_len: l, room_size: *room_size };
                let map = spec.build_map()?;
                let meta = MapMeta::Bottleneck { corridor_len: l, room_size: *room_size };
                docs.push(MapDoc::from_grid(&map, Some(format!("bottleneck-{l}")), Some(meta)));
            }
        }
        MapKind::Random | MapKind::Maze => {
            let size = size.ok_or_else(|| CliError::Config("--size is required".into()))?;
            for i in 0..count.unwrap_or(1) {
                let s = seed.wrapping_add(i as u64);
                let (map, meta, name) = match kind {
                    MapKind::Random => {
                        let d = density.ok_or_else(|| CliError::Config("--density is required".into()))?;
                        (gen_random(size, size, d, s)?, MapMeta::Random { density: d, seed: s }, format!("random-{size}-{i}"))
                    }
                    _ => (gen_maze(size, size, s)?, MapMeta::Maze { seed: s }, format!("maze-{size}-{i}")),
                };
                docs.push(MapDoc::from_grid(&map, Some(name), Some(meta)));
            }
        }
        MapKind::MovingaiImport => {
            let path = input.as_ref().ok_or_else(|| CliError::Config("--in is required".into()))?;
            let text = io(fs::read_to_string(path), path)?;
            let map = parse_movingai(&text).and_then(|m| m.to_grid())?;
            let stem = path.file_stem().map_or("map".into(), |s| s.to_string_lossy().into_owned());
            let meta = MapMeta::Movingai { source: path.display().to_string() };
            docs.push(MapDoc::from_grid(&map, Some(stem), Some(meta)));
        }
    }
    create_dir(out)?;
    let mut files = Vec::new();
    for doc in &docs {
        let name = format!("{}.json", doc.name.as_deref().unwrap_or("map"));
        let text = doc.to_json();
        // documents are checked on write
        MapDoc::from_json(&text)?;
        write_file(&out.join(&name), &text)?;
        files.push(name);
    }
    let manifest = json!({
        "kind": format!("{kind:?}").to_lowercase(),
        "seed": seed,
        "room_size": room_size,
        "size": size,
        "density": density,
        "files": files,
    });
    write_file(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest).expect("json"))?;
    println!("wrote {} maps to {}", docs.len(), out.display());
    Ok(())
}

fn run_train(config: &Path, resume: Option<&Path>, workers: Option<usize>) -> Result<(), CliError> {
    let text = io(fs::read_to_string(config), config)?;
    let mut exp = ExperimentConfig::from_json(&text)?;
    exp.seed = seed_override(exp.seed)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let tasks = exp.tasks(base)?;
    let out = if exp.output_dir.is_absolute() { exp.output_dir.clone() } else { base.join(&exp.output_dir) };
    for d in ["configs", "checkpoints", "logs", "reports"] {
        create_dir(&out.join(d))?;
    }
    write_file(&out.join("configs").join("effective.json"), &exp.to_json())?;
    let state = match resume {
        Some(p) => {
            let (state, _) = load(p)?;
            if state.policy.config() != &exp.policy {
                return Err(CliError::Config(format!("{}: policy differs from the config", p.display())));
            }
            state
        }
        None => {
            let policy = Policy::new(exp.policy.clone()).map_err(|e| CliError::Config(e.to_string()))?;
            TrainState::new(policy, exp.ppo.lr)
        }
    };
    let log_path = out.join("logs").join("train.jsonl");
    let mut log = BufWriter::new(io(fs::OpenOptions::new().create(true).append(true).open(&log_path), &log_path)?);
    let meta = serde_json::to_value(&exp).expect("config serializes");
    let ckpt_dir = out.join("checkpoints");
    let n_threads = threads(workers, exp.threads);
    let result = train(state, &tasks, &exp.reward, &exp.ppo, exp.seed, n_threads, |st, l| {
        writeln!(log, "{}", serde_json::to_string(l).expect("log serializes"))?;
        log.flush()?;
        if st.iteration % exp.checkpoint_every == 0 {
            save_checkpoint(&ckpt_dir.join(format!("iter-{:06}.ckpt", st.iteration)), st, meta.clone())?;
            save_checkpoint(&ckpt_dir.join("latest.ckpt"), st, meta.clone())?;
        }
        let csr = l.csr.map_or("-".into(), |c| format!("{c:.2}"));
        println!("iter {:>5} transitions {:>9} lr {:.2e} kl {:.4} csr {csr}", l.iteration, l.transitions, l.lr, l.kl);
        Ok(true)
    });
    let outcome = match result {
        Ok(o) => o,
        Err(TrainerError::NonFinite { iteration, detail }) => {
            let dump = json!({ "iteration": iteration, "detail": detail, "config": meta });
            write_file(&out.join("logs").join("abort.json"), &serde_json::to_string_pretty(&dump).expect("json"))?;
            return Err(CliError::Runtime(format!("non-finite loss at iteration {iteration}: {detail}")));
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt_dir.join("final.ckpt"), &outcome.state, meta.clone())?;
    save_checkpoint(&ckpt_dir.join("latest.ckpt"), &outcome.state, meta)?;
    println!("done after {} iterations, {} transitions", outcome.state.iteration, outcome.state.transitions);
    Ok(())
}

fn load(path: &Path) -> Result<(TrainState, serde_json::Value), CliError> {
    load_checkpoint(path).map_err(|e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
    })
}

fn map_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = io(fs::read_dir(dir), dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name != "manifest.json" && p.extension().is_some_and(|e| e == "json" || e == "map")
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("{}: no map files", dir.display())));
    }
    Ok(files)
}

fn write_reports(out: &Path, reports: &[MetricReport]) -> Result<(), CliError> {
    let dir = out.join("reports");
    create_dir(&dir)?;
    let csv_path = dir.join("metrics.csv");
    let f = io(fs::File::create(&csv_path), &csv_path)?;
    write_reports_csv(BufWriter::new(f), reports)?;
    write_file(&dir.join("metrics.json"), &serde_json::to_string_pretty(reports).expect("json"))?;
    Ok(())
}

fn write_traces(out: &Path, records: &[EpisodeRecord]) -> Result<(), CliError> {
    let dir = out.join("traces");
    create_dir(&dir)?;
    for (i, rec) in records.iter().enumerate() {
        let stem = format!("{}-{i:04}", rec.map);
        write_file(&dir.join(format!("{stem}.json")), &serde_json::to_string(rec).expect("json"))?;
        let rows = memory_trace(rec)?;
        let p = dir.join(format!("{stem}.csv"));
        write_trace_csv(BufWriter::new(io(fs::File::create(&p), &p)?), &rows)?;
    }
    Ok(())
}

fn run_eval(cmd: &Cmd, workers: Option<usize>) -> Result<(), CliError> {
    let Cmd::Eval { ckpt, maps, sweep_corridors: sweep, points, seeds, episodes, seed, agents, greedy, record_memory, out } = cmd
    else {
        unreachable!()
    };
    if *seeds == 0 || *episodes == 0 {
        return Err(CliError::Config("--seeds and --episodes must be at least 1".into()));
    }
    let base_seed = seed_override(*seed)?;
    let (state, extra) = load(ckpt)?;
    let exp = if extra.is_null() { None } else { Some(ExperimentConfig::from_effective(&extra.to_string())?) };
    let policy = state.policy;
    let seed_list: Vec<u64> = (0..*seeds as u64).map(|s| base_seed.wrapping_add(s)).collect();
    let opts = EvalOptions {
        greedy: *greedy,
        record_memory: *record_memory,
        threads: threads(workers, exp.as_ref().map_or(1, |e| e.threads)),
        ..EvalOptions::default()
    };
    let (reports, records) = match (maps, sweep) {
        (_, Some(s)) => {
            let lengths = parse_lengths(s, *points)?;
            let room = match exp.as_ref().map(|e| &e.maps) {
                Some(MapSource::Bottleneck { room_size, .. }) => *room_size,
                _ => 5,
            };
            sweep_corridors(&policy, &lengths, &seed_list, *episodes, room, &opts)?
        }
        (Some(dir), None) => {
            let source = MapSource::Files { paths: map_files(dir)? };
            let task_maps = source.build(Path::new("")).map_err(CliError::Config)?;
            let mut env = exp.as_ref().map_or_else(srmt::gridenv::EnvConfig::classical, |e| e.env);
            env.obs_size = policy.config().obs_size;
            let n = agents.or(exp.as_ref().map(|e| e.agents)).unwrap_or(2);
            let tasks = TaskSet::new(task_maps, n, env)?;
            evaluate_tasks(&policy, &tasks, &seed_list, *episodes, &opts)?
        }
        (None, None) => return Err(CliError::Config("give --maps DIR or --sweep-corridors".into())),
    };
    create_dir(out)?;
    create_dir(&out.join("configs"))?;
    let provenance = json!({
        "checkpoint": ckpt.display().to_string(),
        "maps": maps.as_ref().map(|p| p.display().to_string()),
        "sweep_corridors": sweep,
        "points": points,
        "seeds": seed_list,
        "episodes_per_seed": episodes,
        "greedy": greedy,
        "record_memory": record_memory,
    });
    write_file(&out.join("configs").join("eval.json"), &serde_json::to_string_pretty(&provenance).expect("json"))?;
    write_reports(out, &reports)?;
    if *record_memory {
        write_traces(out, &records)?;
    }
    for r in &reports {
        println!("{:<20} {:<6} {:>10.4} ± {:.4} (n={})", r.label, r.metric, r.value, r.ci95, r.n);
    }
    Ok(())
}

fn analyze_memory(trace: &Path, out: &Path) -> Result<(), CliError> {
    let text = io(fs::read_to_string(trace), trace)?;
    let rec: EpisodeRecord =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: not an episode record: {e}", trace.display())))?;
    let rows = memory_trace(&rec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_trace_csv(BufWriter::new(io(fs::File::create(out), out)?), &rows)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        c @ Cmd::GenMaps { .. } => gen_maps(c),
        Cmd::Train { config, resume } => run_train(config, resume.as_deref(), cli.workers),
        c @ Cmd::Eval { .. } => run_eval(c, cli.workers),
        Cmd::AnalyzeMemory { trace, out } => analyze_memory(trace, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("srmt: {e}");
            ExitCode::from(e.code())
        }
    }
}
