use std::collections::BTreeSet;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pwlm::corpus::{load_leak, parse_leak, split_rockyou_style, Corpus, LeakFormat, TrainingView};
use pwlm::error::{EXIT_OK, EXIT_USAGE};
use pwlm::eval::{
    draw_guesses, escape_password, evaluate, unescape_password, GptSource, GuessSource,
    GuidedSource, VqtSource,
};
use pwlm::gpt::{score_passwords, train, GptModel};
use pwlm::guided::Template;
use pwlm::persist::{
    inspect_checkpoint, load_checkpoint, load_codes, load_vqt, read_checkpoint_bytes,
    save_checkpoint, RunConfig, SavedModel,
};
use pwlm::strength::{bundled_dictionaries, Dictionary, HeuristicEstimator, StrengthEstimator};
use pwlm::synth::synthetic_corpus;
use pwlm::vqt::{train_codes_model, train_vqt, CodesModel, VqtModel};
use pwlm::Error;

/// Character-level transformer password models.
#[derive(Parser)]
#[command(name = "pwlm", version)]
struct Cli {
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set gpt.d_model=128`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Sampler threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a leak into training pairs and a held-out test set.
    Split(SplitArgs),
    /// Train a password model.
    Train(TrainArgs),
    /// Train a quantized autoencoder.
    TrainVqt(TrainArgs),
    /// Train a codes model for a quantized autoencoder.
    TrainCodes(TrainCodesArgs),
    /// Sample passwords.
    Sample(SampleArgs),
    /// Sample passwords matching a template.
    Guide(GuideArgs),
    /// Score passwords: log10 probability, per-position entropy, strength.
    Score(ScoreArgs),
    /// Evaluate guessing performance against held-out sets.
    Eval(EvalArgs),
    /// Print checkpoint metadata.
    Inspect { checkpoint: PathBuf },
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct CorpusArgs {
    /// `lines` or `pairs`; `.tsv` files default to pairs.
    #[arg(long)]
    format: Option<LeakFormat>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct SplitArgs {
    /// Leak file; omit with --synthetic.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Generate the synthetic desk corpus instead of reading a leak.
    #[arg(long)]
    synthetic: bool,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus.
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    /// `unique` or `all`.
    #[arg(long)]
    view: Option<TrainingView>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCodesArgs {
    #[command(flatten)]
    base: TrainArgs,
    /// Quantized autoencoder checkpoint.
    #[arg(long)]
    vqt: PathBuf,
}

#[derive(Args)]
struct SamplerArgs {
    /// Model checkpoint (gpt, or vqt together with --codes).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codes: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_new: Option<usize>,
    /// Output file; stdout by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    s: SamplerArgs,
}

#[derive(Args)]
struct GuideArgs {
    #[command(flatten)]
    s: SamplerArgs,
    /// Classes `l u d p *`, `=c` for a literal, `\xHH` for a byte.
    #[arg(long)]
    template: String,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// One password per line; stdin by default.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Input lines use the sampler escapes (`\\`, `\xHH`).
    #[arg(long)]
    escaped: bool,
    /// Extra `rank<TAB>word` dictionary for the strength estimator. Repeatable.
    #[arg(long)]
    dictionary: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Generator checkpoints. Repeatable.
    #[arg(long, required = true)]
    model: Vec<PathBuf>,
    /// Codes model for a quantized generator.
    #[arg(long)]
    codes: Option<PathBuf>,
    /// Held-out set, `PATH` or `NAME=PATH`, one password per line. Repeatable.
    #[arg(long, required = true)]
    test: Vec<String>,
    /// Comma-separated guess budgets.
    #[arg(long)]
    budgets: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Template for guided generation from gpt models.
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    dictionary: Vec<PathBuf>,
    /// Directory for report.txt and CSV tables; stdout by default.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn run_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(w) = cli.workers {
        cfg.eval.workers = w;
    }
    Ok(cfg)
}

fn leak_format(path: &Path, args: &CorpusArgs, cfg: &RunConfig) -> LeakFormat {
    args.format
        .unwrap_or(if path.extension().is_some_and(|e| e == "tsv") {
            LeakFormat::Pairs
        } else {
            cfg.corpus_format
        })
}

fn load_corpus(path: &Path, args: &CorpusArgs, cfg: &RunConfig) -> Result<Corpus, Error> {
    let max_len = args.max_len.unwrap_or(cfg.corpus_max_len);
    Ok(load_leak(path, max_len, leak_format(path, args, cfg))?)
}

fn open_out(path: Option<&Path>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p).map_err(io_err(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_passwords(out: Option<&Path>, pws: &[Vec<u8>]) -> Result<(), Error> {
    let mut w = open_out(out)?;
    let path = out.unwrap_or(Path::new("<stdout>"));
    for pw in pws {
        w.write_all(&escape_password(pw)).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_input(path: Option<&Path>) -> Result<Vec<u8>, Error> {
    match path {
        Some(p) => fs::read(p).map_err(io_err(p)),
        None => {
            let mut buf = Vec::new();
            io::stdin()
                .read_to_end(&mut buf)
                .map_err(io_err(Path::new("<stdin>")))?;
            Ok(buf)
        }
    }
}

fn estimator(extra: &[PathBuf]) -> Result<HeuristicEstimator, Error> {
    let mut dicts = bundled_dictionaries();
    for p in extra {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        dicts.push(Dictionary::load(name, p)?);
    }
    Ok(HeuristicEstimator::new(dicts))
}

fn cmd_split(cfg: &RunConfig, a: &SplitArgs) -> Result<(), Error> {
    let mut spec = cfg.split;
    if let Some(f) = a.train_fraction {
        spec.train_fraction = f;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = match (&a.input, a.synthetic) {
        (Some(p), false) => load_corpus(p, &a.corpus, cfg)?,
        (None, true) => synthetic_corpus(&cfg.synth),
        _ => return Err(usage("give exactly one of --input or --synthetic")),
    };
    let result = split_rockyou_style(&corpus, &spec)?;
    result.write_manifests(&a.out_dir, &spec)?;
    eprint!("{}", result.stats.to_kv_text(&spec));
    Ok(())
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(v) = a.view {
        cfg.view = v;
    }
    if let Some(e) = a.epochs {
        cfg.gpt.epochs = e;
        cfg.vqt.epochs = e;
        cfg.codes.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.gpt.seed = s;
        cfg.vqt.seed = s;
        cfg.codes.seed = s;
    }
}

fn cmd_train(mut cfg: RunConfig, a: &TrainArgs) -> Result<(), Error> {
    apply_train(&mut cfg, a);
    let corpus = load_corpus(&a.train, &a.corpus, &cfg)?;
    cfg.gpt.max_len = cfg.gpt.max_len.max(corpus.max_len);
    let (model, report) = train(&corpus, &cfg.gpt, cfg.view)?;
    eprintln!(
        "trained {} steps, final loss {:.6}",
        report.steps,
        report.final_loss()
    );
    save_checkpoint(&SavedModel::Gpt(model), &a.out)?;
    Ok(())
}

fn cmd_train_vqt(mut cfg: RunConfig, a: &TrainArgs) -> Result<(), Error> {
    apply_train(&mut cfg, a);
    let corpus = load_corpus(&a.train, &a.corpus, &cfg)?;
    cfg.vqt.max_len = cfg.vqt.max_len.max(corpus.max_len);
    let (model, report) = train_vqt(&corpus, &cfg.vqt, cfg.view)?;
    eprintln!(
        "trained {} steps, final loss {:.6}",
        report.train.steps,
        report.train.final_loss()
    );
    for (epoch, d) in report.dead_codes.iter().enumerate() {
        if d.fires() {
            eprintln!(
                "epoch {}: {} of {} codes unused",
                epoch + 1,
                d.unused,
                d.total
            );
        }
    }
    save_checkpoint(&SavedModel::Vqt(model), &a.out)?;
    Ok(())
}

fn cmd_train_codes(mut cfg: RunConfig, a: &TrainCodesArgs) -> Result<(), Error> {
    apply_train(&mut cfg, &a.base);
    let vqt = load_vqt(&a.vqt)?;
    let corpus = load_corpus(&a.base.train, &a.base.corpus, &cfg)?;
    let (codes, report) = train_codes_model(&corpus, &vqt, &cfg.codes, cfg.view)?;
    eprintln!(
        "trained {} steps, final loss {:.6}",
        report.steps,
        report.final_loss()
    );
    save_checkpoint(&SavedModel::Codes(codes), &a.base.out)?;
    Ok(())
}

#[allow(clippy::large_enum_variant)]
enum Generator {
    Gpt(GptModel),
    Vqt(VqtModel, CodesModel),
}

fn load_generator(model: &Path, codes: Option<&Path>) -> Result<Generator, Error> {
    match load_checkpoint(model)? {
        SavedModel::Gpt(m) => Ok(Generator::Gpt(m)),
        SavedModel::Vqt(v) => {
            let c = codes.ok_or_else(|| usage("a quantized model needs --codes"))?;
            Ok(Generator::Vqt(v, load_codes(c)?))
        }
        SavedModel::Codes(_) => Err(usage("a codes model cannot generate passwords on its own")),
    }
}

fn sample_opts(cfg: &RunConfig, s: &SamplerArgs) -> pwlm::gpt::SampleOpts {
    let mut o = cfg.sample.clone();
    if let Some(t) = s.temperature {
        o.temperature = t;
    }
    if let Some(k) = s.top_k {
        o.top_k = (k > 0).then_some(k);
    }
    if let Some(seed) = s.seed {
        o.seed = seed;
    }
    if let Some(m) = s.max_new {
        o.max_new = m;
    }
    o
}

fn cmd_sample(cfg: &RunConfig, s: &SamplerArgs, template: Option<&str>) -> Result<(), Error> {
    let opts = sample_opts(cfg, s);
    let gen = load_generator(&s.model, s.codes.as_deref())?;
    let name = s.model.display().to_string();
    let source: Box<dyn GuessSource + '_> = match (&gen, template) {
        (Generator::Gpt(m), None) => Box::new(GptSource {
            name,
            model: m,
            opts: opts.clone(),
        }),
        (Generator::Gpt(m), Some(t)) => {
            let template: Template = t.parse()?;
            Box::new(GuidedSource {
                name,
                model: m,
                template,
                opts,
            })
        }
        (Generator::Vqt(v, c), None) => Box::new(VqtSource {
            name,
            vqt: v,
            codes: c,
            opts,
        }),
        (Generator::Vqt(..), Some(_)) => return Err(usage("templates need a gpt model")),
    };
    let pws = draw_guesses(source.as_ref(), s.n, cfg.eval.workers)?;
    write_passwords(s.out.as_deref(), &pws)
}

fn cmd_score(a: &ScoreArgs) -> Result<(), Error> {
    let SavedModel::Gpt(model) = load_checkpoint(&a.model)? else {
        return Err(usage("score needs a gpt checkpoint"));
    };
    let est = estimator(&a.dictionary)?;
    let data = read_input(a.input.as_deref())?;
    let mut pws = Vec::new();
    for (line, raw) in pwlm::corpus::raw_lines(&data) {
        let pw = if a.escaped {
            unescape_password(raw)
                .ok_or_else(|| Error::Usage(format!("line {line}: bad escape")))?
        } else {
            raw.to_vec()
        };
        pws.push(pw);
    }
    let refs: Vec<&[u8]> = pws.iter().map(Vec::as_slice).collect();
    let scores = score_passwords(&model, &refs)?;
    let mut w = open_out(a.out.as_deref())?;
    let path = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut text = String::from("password\tlog10_prob\tentropy_bits\tstrength\n");
    for (pw, sc) in pws.iter().zip(&scores) {
        let ent: Vec<String> = sc.entropy_bits.iter().map(|h| format!("{h:.6}")).collect();
        let strength = est.estimate(pw).score;
        text.push_str(&format!(
            "{}\t{:.6}\t{}\t{strength}\n",
            pwlm::eval::display_password(pw),
            sc.log10_prob,
            ent.join(",")
        ));
    }
    w.write_all(text.as_bytes()).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))
}

fn read_test_set(spec: &str, idx: usize) -> Result<(String, BTreeSet<Vec<u8>>), Error> {
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let p = PathBuf::from(spec);
            let n = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("test{idx}"));
            (n, p)
        }
    };
    let data = fs::read(&path).map_err(io_err(&path))?;
    let corpus = parse_leak(&data, &name, usize::MAX, LeakFormat::Lines)?;
    Ok((name, corpus.entries().keys().cloned().collect()))
}

fn cmd_eval(mut cfg: RunConfig, a: &EvalArgs) -> Result<(), Error> {
    if let Some(b) = &a.budgets {
        cfg.set("eval.budgets", b)?;
    }
    let opts = sample_opts(
        &cfg,
        &SamplerArgs {
            model: PathBuf::new(),
            codes: None,
            n: 0,
            temperature: a.temperature,
            top_k: a.top_k,
            seed: a.seed,
            max_new: None,
            out: None,
        },
    );
    let template = a
        .template
        .as_deref()
        .map(str::parse::<Template>)
        .transpose()?;
    let gens = a
        .model
        .iter()
        .map(|p| load_generator(p, a.codes.as_deref()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sources: Vec<Box<dyn GuessSource + '_>> = Vec::new();
    for (p, g) in a.model.iter().zip(&gens) {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        sources.push(match (g, &template) {
            (Generator::Gpt(m), None) => Box::new(GptSource {
                name,
                model: m,
                opts: opts.clone(),
            }),
            (Generator::Gpt(m), Some(t)) => Box::new(GuidedSource {
                name,
                model: m,
                template: t.clone(),
                opts: opts.clone(),
            }),
            (Generator::Vqt(v, c), _) => Box::new(VqtSource {
                name,
                vqt: v,
                codes: c,
                opts: opts.clone(),
            }),
        });
    }
    let tests = a
        .test
        .iter()
        .enumerate()
        .map(|(i, t)| read_test_set(t, i))
        .collect::<Result<Vec<_>, _>>()?;
    let scorer = gens.iter().find_map(|g| match g {
        Generator::Gpt(m) => Some(m),
        Generator::Vqt(..) => None,
    });
    let est = estimator(&a.dictionary)?;
    let refs: Vec<&dyn GuessSource> = sources.iter().map(|b| b.as_ref()).collect();
    let mut report = evaluate(&refs, &tests, scorer, &est, &cfg.eval)?;
    report
        .metadata
        .insert("sample.temperature".into(), opts.temperature.to_string());
    report.metadata.insert(
        "sample.top_k".into(),
        opts.top_k.map_or("none".into(), |k| k.to_string()),
    );
    if let Some(t) = &template {
        report.metadata.insert("template".into(), t.to_string());
    }
    let text = report.to_text();
    match &a.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("report.txt");
            fs::write(&p, &text).map_err(io_err(&p))?;
            for (name, body) in report.csv_tables() {
                let p = dir.join(name);
                fs::write(&p, body).map_err(io_err(&p))?;
            }
            let p = dir.join("config.txt");
            fs::write(&p, cfg.to_text()).map_err(io_err(&p))?;
        }
        None => {
            let mut w = open_out(None)?;
            w.write_all(text.as_bytes())
                .map_err(io_err(Path::new("<stdout>")))?;
            w.flush().map_err(io_err(Path::new("<stdout>")))?;
        }
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<(), Error> {
    let info = inspect_checkpoint(&read_checkpoint_bytes(path)?)?;
    let mut s = format!(
        "kind={}\nversion={}\nchecksum={:016x}\nparameters={}\n",
        info.kind,
        info.version,
        info.checksum,
        info.num_scalars()
    );
    for (k, v) in &info.config {
        s.push_str(&format!("config.{k}={v}\n"));
    }
    for (name, shape) in &info.blocks {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        s.push_str(&format!("block.{name}=[{}]\n", dims.join(",")));
    }
    print!("{s}");
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = run_config(cli)?;
    match &cli.command {
        Command::Split(a) => cmd_split(&cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::TrainVqt(a) => cmd_train_vqt(cfg, a),
        Command::TrainCodes(a) => cmd_train_codes(cfg, a),
        Command::Sample(a) => cmd_sample(&cfg, &a.s, None),
        Command::Guide(a) => cmd_sample(&cfg, &a.s, Some(&a.template)),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Inspect { checkpoint } => cmd_inspect(checkpoint),
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
