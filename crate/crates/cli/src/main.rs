//! `nafp`: prepare audio, train the fingerprinter, build and query a
//! fingerprint database, and evaluate retrieval.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use neuralfp::audio::{read_wav, resample, write_wav, CANONICAL_RATE};
use neuralfp::augment::{load_wav_dir, AugmentPools, Augmentor, PoolSplit};
use neuralfp::config::Config;
use neuralfp::eval::{evaluate, synthesize_queries, EvalSpec};
use neuralfp::search::{ResultRecord, Searcher};
use neuralfp::synth::CorpusSpec;
use neuralfp::train::{extract_sources, Trainer};
use neuralfp::{write_atomic, AudioClip, Encoder, FeatureExtractor, FingerprintDb, IvfPqIndex};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "nafp", version, about = "Neural audio fingerprinting")]
struct Cli {
    /// TOML config file; every key is optional (sections: features, augment,
    /// encoder, train, index, search, eval).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Resample WAV files to 8 kHz mono and cut them into fixed-length clips.
    Prepare(PrepareArgs),
    /// Generate a synthetic corpus (music, noise, impulse responses) with
    /// disjoint train and test splits.
    Synth(SynthArgs),
    /// Train the encoder on `<corpus>/music.train` with the `*.train` pools.
    Train(TrainArgs),
    /// Fingerprint every WAV file of a directory into a database.
    Fingerprint(FingerprintArgs),
    /// Build an IVF-PQ index over a fingerprint database.
    BuildIndex(BuildIndexArgs),
    /// Identify one query recording.
    Search(SearchArgs),
    /// Synthesize degraded queries from held-out audio and report Top-1 hit rates.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    /// Directory of WAV files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clip length: 1.2 for training sources, 30 for database clips.
    #[arg(long)]
    seconds: f32,
    /// Hop between clip starts [default: --seconds].
    #[arg(long)]
    hop: Option<f32>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 240)]
    train_tracks: usize,
    #[arg(long, default_value_t = 100)]
    test_tracks: usize,
    #[arg(long, default_value_t = 30.0)]
    track_secs: f32,
    /// Noise clips per split.
    #[arg(long, default_value_t = 40)]
    noise_clips: usize,
    #[arg(long, default_value_t = 30.0)]
    noise_secs: f32,
    /// Microphone and room impulse responses per split (each).
    #[arg(long, default_value_t = 20)]
    irs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus root holding music.train, noise.train, mic_ir.train, room_ir.train.
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Hop in seconds between training sources cut from each track.
    #[arg(long, default_value_t = 1.0)]
    source_hop: f32,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FingerprintArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of WAV files; each file becomes one track named by its stem.
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Coarse cells [default: 200].
    #[arg(long)]
    nlist: Option<usize>,
    /// PQ sub-quantizers [default: 64 if d is a multiple of 64, else d].
    #[arg(long)]
    m: Option<usize>,
    /// Cells probed per query [default: 20].
    #[arg(long)]
    nprobe: Option<usize>,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// IVF-PQ index; without it the database is searched exhaustively.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Query WAV file.
    #[arg(long)]
    query: PathBuf,
    /// Hits gathered per query segment [default: 20].
    #[arg(long)]
    k: Option<usize>,
    /// Search the database exhaustively even when an index is given.
    #[arg(long)]
    exhaustive: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    db: PathBuf,
    #[arg(long)]
    index: Option<PathBuf>,
    /// Directory with the audio the database was built from.
    #[arg(long)]
    testdb: PathBuf,
    /// Directory holding noise.test, mic_ir.test and room_ir.test.
    #[arg(long)]
    pools: PathBuf,
    /// TOML file with evaluation keys (query_lengths, queries_per_length,
    /// snr_db_min, snr_db_max, near_tolerance, grid_aligned, nested, seed);
    /// overrides the [eval] section of --config.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// JSON report path; a text grid is written next to it with a .txt suffix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    exhaustive: bool,
    /// Queries per length [default: 200].
    #[arg(long)]
    queries: Option<usize>,
}

/// Raises glibc's mmap and trim thresholds so the large per-step training
/// buffers are recycled instead of being mapped and faulted in again.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator parameters.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    tune_allocator();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<neuralfp::Error>() {
            return if err.is_data_error() { EXIT_DATA } else { EXIT_INTERNAL };
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => Config::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => Config::default(),
    };
    match cli.cmd {
        Command::Prepare(a) => prepare(&config, a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(config, a),
        Command::Fingerprint(a) => fingerprint(&config, a),
        Command::BuildIndex(a) => build_index(config, a),
        Command::Search(a) => search(config, a),
        Command::Evaluate(a) => evaluate_cmd(config, a),
    }
}

/// Path of the config echo written next to an artifact.
fn echo_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    artifact.with_file_name(name)
}

fn write_echo(artifact: &Path, config: &Config) -> Result<()> {
    let path = echo_path(artifact);
    write_atomic(&path, config.to_toml_string().as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn require_dir(p: &Path) -> Result<()> {
    if !p.is_dir() {
        bail!(neuralfp::Error::InvalidArgument(format!("{} is not a directory", p.display())));
    }
    Ok(())
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!(neuralfp::Error::InvalidArgument(format!("{} does not exist", p.display())));
    }
    Ok(())
}

fn wav_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    require_dir(dir)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!(neuralfp::Error::InvalidArgument(format!("no WAV files in {}", dir.display())));
    }
    Ok(paths)
}

fn stem(p: &Path) -> String {
    p.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn prepare(config: &Config, a: PrepareArgs) -> Result<()> {
    if !(a.seconds > 0.0) || a.hop.is_some_and(|h| !(h > 0.0)) {
        return Err(usage("--seconds and --hop must be positive"));
    }
    let rate = config.features.sample_rate;
    let len = (a.seconds * rate as f32).round() as usize;
    let hop = (a.hop.unwrap_or(a.seconds) * rate as f32).round() as usize;
    let paths = wav_paths(&a.input)?;
    fs::create_dir_all(&a.out)?;
    let mut written = 0usize;
    for p in &paths {
        let clip = resample(&read_wav(p).with_context(|| format!("reading {}", p.display()))?, rate)?;
        if clip.len() < len {
            log::warn!("{} is shorter than {} s; skipped", p.display(), a.seconds);
            continue;
        }
        let mut start = 0;
        let mut i = 0;
        while start + len <= clip.len() {
            write_wav(a.out.join(format!("{}_{i:04}.wav", stem(p))), &clip.slice(start, len)?)?;
            start += hop;
            i += 1;
        }
        written += i;
    }
    let mut echo = config.clone();
    echo.features.sample_rate = rate;
    write_echo(&a.out.join("prepare"), &echo)?;
    println!("wrote {written} clips of {} s to {}", a.seconds, a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = CorpusSpec {
        seed: a.seed,
        train_tracks: a.train_tracks,
        test_tracks: a.test_tracks,
        track_secs: a.track_secs,
        noise_clips: a.noise_clips,
        noise_secs: a.noise_secs,
        mic_irs: a.irs,
        room_irs: a.irs,
    };
    spec.write(&a.out)?;
    println!("synthetic corpus written to {}", a.out.display());
    Ok(())
}

fn pools_in(root: &Path, split: PoolSplit) -> Result<AugmentPools> {
    let dir = |name: &str| root.join(format!("{name}{}", split.suffix()));
    let (noise, mic, room) = (dir("noise"), dir("mic_ir"), dir("room_ir"));
    for d in [&noise, &mic, &room] {
        require_dir(d)?;
    }
    Ok(AugmentPools::load(&noise, &mic, &room)?)
}

fn train(config: Config, a: TrainArgs) -> Result<()> {
    let music = a.corpus.join(format!("music{}", PoolSplit::Train.suffix()));
    require_dir(&music)?;
    let pools = pools_in(&a.corpus, PoolSplit::Train)?;
    let extractor = FeatureExtractor::new(config.features.clone())?;
    let augmentor = Augmentor::new(config.augment.clone(), pools, extractor)?;
    let tracks = load_wav_dir(&music)?;
    let hop = (a.source_hop * CANONICAL_RATE as f32).round() as usize;
    let sources = extract_sources(&tracks, augmentor.source_samples(), hop.max(1))?;
    log::info!("{} tracks, {} training sources", tracks.len(), sources.len());
    let mut encoder = match &a.init {
        Some(p) => {
            let e = Encoder::<f32>::load(p)?;
            if e.config() != &config.encoder {
                log::warn!("--init checkpoint overrides the [encoder] section of the config");
            }
            e
        }
        None => Encoder::new(config.encoder.clone())?,
    };
    let mut echo = config.clone();
    echo.encoder = encoder.config().clone();
    fs::create_dir_all(&a.out)?;
    write_echo(&a.out.join("train"), &echo)?;
    let log_file = fs::File::create(a.out.join("train_log.jsonl"))?;
    let summary = Trainer::new(config.train.clone(), &augmentor)?
        .with_checkpoint_dir(&a.out)
        .with_log(std::io::BufWriter::new(log_file))
        .run(&mut encoder, &sources)?;
    let last = a.out.join("final.ckpt");
    encoder.save(&last)?;
    println!(
        "{} steps, final loss {:.4}, checkpoint {}",
        summary.steps,
        summary.tail_loss(10),
        last.display()
    );
    Ok(())
}

/// Encoder whose input shape matches the configured frontend.
fn load_encoder(path: &Path, config: &Config) -> Result<Encoder<f32>> {
    require_file(path)?;
    let enc = Encoder::<f32>::load(path)?;
    let (ec, fp) = (enc.config(), &config.features);
    if ec.mel_bins != fp.mel_bins || ec.frames != fp.segment_frames() {
        bail!(neuralfp::Error::Config(format!(
            "checkpoint expects {}x{} spectrograms, frontend produces {}x{}",
            ec.mel_bins,
            ec.frames,
            fp.mel_bins,
            fp.segment_frames()
        )));
    }
    Ok(enc)
}

fn fingerprint(config: &Config, a: FingerprintArgs) -> Result<()> {
    let encoder = load_encoder(&a.ckpt, config)?;
    let extractor = FeatureExtractor::new(config.features.clone())?;
    let mut db = FingerprintDb::new(encoder.config().d);
    for p in wav_paths(&a.audio)? {
        let clip = resample(&read_wav(&p).with_context(|| format!("reading {}", p.display()))?, config.features.sample_rate)?;
        let mels = extractor
            .segment_features(&clip)
            .with_context(|| format!("segmenting {}", p.display()))?;
        db.add_track(&stem(&p), &encoder.fingerprint_batch(&mels)?)?;
    }
    db.save(&a.out)?;
    let mut echo = config.clone();
    echo.encoder = encoder.config().clone();
    write_echo(&a.out, &echo)?;
    println!("{} segments from {} tracks written to {}", db.len(), db.num_tracks(), a.out.display());
    Ok(())
}

fn build_index(mut config: Config, a: BuildIndexArgs) -> Result<()> {
    require_file(&a.db)?;
    if let Some(n) = a.nlist {
        config.index.nlist = n;
    }
    if a.m.is_some() {
        config.index.m = a.m;
    }
    if let Some(n) = a.nprobe {
        config.index.nprobe = n;
    }
    config.validate()?;
    let db = FingerprintDb::load(&a.db)?;
    let index = IvfPqIndex::build(db.vectors(), db.dim(), &config.index)?;
    index.save(&a.out)?;
    config.index.m = Some(index.m());
    write_echo(&a.out, &config)?;
    println!(
        "index over {} vectors: nlist {}, m {}, nbits {}, nprobe {}",
        index.len(),
        index.nlist(),
        index.m(),
        index.nbits(),
        index.nprobe()
    );
    Ok(())
}

fn load_index(path: Option<&Path>, db: &FingerprintDb) -> Result<Option<IvfPqIndex>> {
    let Some(p) = path else { return Ok(None) };
    require_file(p)?;
    let index = IvfPqIndex::load(p)?;
    if index.dim() != db.dim() || index.len() != db.len() {
        bail!(neuralfp::Error::InvalidArgument(format!(
            "index ({} x {}) does not match database ({} x {})",
            index.len(),
            index.dim(),
            db.len(),
            db.dim()
        )));
    }
    Ok(Some(index))
}

fn load_db(path: &Path, encoder: &Encoder<f32>) -> Result<FingerprintDb> {
    require_file(path)?;
    let db = FingerprintDb::load(path)?;
    if db.dim() != encoder.config().d {
        bail!(neuralfp::Error::InvalidArgument(format!(
            "database holds {}-d fingerprints, checkpoint produces {}-d",
            db.dim(),
            encoder.config().d
        )));
    }
    Ok(db)
}

fn search(mut config: Config, a: SearchArgs) -> Result<()> {
    if let Some(k) = a.k {
        config.search.k = k;
    }
    config.search.exhaustive |= a.exhaustive;
    config.validate()?;
    let encoder = load_encoder(&a.ckpt, &config)?;
    let db = load_db(&a.db, &encoder)?;
    let index = load_index(a.index.as_deref(), &db)?;
    let extractor = FeatureExtractor::new(config.features.clone())?;
    require_file(&a.query)?;
    let clip = resample(&read_wav(&a.query)?, config.features.sample_rate)?;
    let searcher = Searcher {
        encoder: &encoder,
        extractor: &extractor,
        db: &db,
        index: index.as_ref(),
        config: config.search.clone(),
    };
    let result = searcher.search(&clip)?;
    let record = ResultRecord::new(&stem(&a.query), &db, &result);
    let mut out = serde_json::to_value(&record)?;
    out["config"] = config.to_json();
    println!("{}", serde_json::to_string(&out)?);
    eprintln!("{} at {:.1} s (score {:.3})", record.track, record.time_offset_seconds, record.score);
    Ok(())
}

fn evaluate_cmd(mut config: Config, a: EvaluateArgs) -> Result<()> {
    if let Some(p) = &a.spec {
        require_file(p)?;
        let text = fs::read_to_string(p)?;
        config.eval = Config::from_toml_str(&format!("[eval]\n{text}"))
            .with_context(|| format!("reading eval spec {}", p.display()))?
            .eval;
    }
    if let Some(n) = a.queries {
        config.eval.queries_per_length = n;
    }
    config.search.exhaustive |= a.exhaustive;
    config.validate()?;
    let spec: &EvalSpec = &config.eval;
    let encoder = load_encoder(&a.ckpt, &config)?;
    let db = load_db(&a.db, &encoder)?;
    let index = load_index(a.index.as_deref(), &db)?;
    let extractor = FeatureExtractor::new(config.features.clone())?;
    let pools = pools_in(&a.pools, PoolSplit::Test)?;
    let augmentor = Augmentor::new(config.augment.clone(), pools, extractor.clone())?;

    // Track i of the query source list must be db track i.
    let files: std::collections::HashMap<String, PathBuf> =
        wav_paths(&a.testdb)?.into_iter().map(|p| (stem(&p), p)).collect();
    let mut tracks: Vec<AudioClip> = Vec::with_capacity(db.num_tracks());
    for id in 0..db.num_tracks() as u32 {
        let name = db.track_name(id).unwrap_or_default();
        let p = files.get(name).ok_or_else(|| {
            neuralfp::Error::InvalidArgument(format!("db track {name} has no file in {}", a.testdb.display()))
        })?;
        tracks.push(resample(&read_wav(p)?, config.features.sample_rate)?);
    }
    let queries = synthesize_queries(&tracks, &augmentor, spec)?;
    let searcher = Searcher {
        encoder: &encoder,
        extractor: &extractor,
        db: &db,
        index: index.as_ref(),
        config: config.search.clone(),
    };
    let mut echo = config.to_json();
    echo["encoder"] = serde_json::to_value(encoder.config())?;
    echo["index_file"] = serde_json::json!(a.index.as_ref().map(|p| p.display().to_string()));
    let report = evaluate(&searcher, &db, &queries, spec.near_tolerance, echo)?;
    write_atomic(&a.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut txt = a.out.as_os_str().to_os_string();
    txt.push(".txt");
    let text = report.to_text();
    write_atomic(Path::new(&txt), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
