use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use cassnat::analysis::{
    cosine_neighbors, dump_attention, extract_embeddings, format_attention, format_pca, pca_2d, AttentionSelector,
    EmbeddingTable, EmbeddingTap, LayerSelector,
};
use cassnat::bench::{format_bench, run_bench};
use cassnat::config::{ModelConfig, RunConfig};
use cassnat::ctc::{alignment_to_segments, ctc_forced_align, LogPosteriorGrid};
use cassnat::data::{SyntheticTask, TEST_STREAM, TRAIN_STREAM, VALID_STREAM};
use cassnat::formats::{feature_paths, read_features, utterance_id, write_features, Checkpoint};
use cassnat::gradcheck::{gradcheck_suite, SuiteOptions};
use cassnat::model::{init_encoder_from_at, AtBaseline, CassNat, Model, ModelKind};
use cassnat::nn::{ForwardCtx, Mode, ParamStore};
use cassnat::train::train_synthetic;
use cassnat::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "cassnat", version, about = "Train, decode and inspect CTC-alignment non-autoregressive models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic task described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Copy encoder and CTC head from a trained baseline checkpoint.
        #[arg(long)]
        init_encoder: Option<PathBuf>,
        /// Train the autoregressive baseline instead.
        #[arg(long)]
        at_baseline: bool,
    },
    /// Write a split of the synthetic task as feature files plus labels.txt.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Defaults to the split size in the config.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Decode feature files; one line per utterance.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Force-align label sequences and print token segmentations.
    Align {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Compare decode latency of the two model families.
    Bench {
        #[arg(long)]
        ckpt_nat: Option<PathBuf>,
        #[arg(long)]
        ckpt_at: Option<PathBuf>,
        /// Architecture for untrained models when checkpoints are omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "10,25,50")]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Finite-difference gradient checks of every block.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        module: Option<String>,
        /// Corrupt one block's gradient to exercise the harness.
        #[arg(long)]
        inject_fault: Option<String>,
        #[arg(long, default_value_t = 4)]
        probes: usize,
    },
    /// Attention dumps, embedding tables, PCA and cosine neighbours.
    Analyze {
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        /// Reference labels, one line per input file in name order.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Precomputed embedding table (pca and neighbors modes).
        #[arg(long)]
        table: Option<PathBuf>,
        /// `all`, `last` or comma-separated layer names.
        #[arg(long, default_value = "all")]
        layer: String,
        /// 1-based head range such as `1-4` or `2`.
        #[arg(long)]
        heads: Option<String>,
        #[arg(long)]
        token: Option<usize>,
        #[arg(short = 'n', default_value_t = 3)]
        n: usize,
        /// Tap the final decoder states instead of the extractor output.
        #[arg(long)]
        decoder_states: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum AnalyzeMode {
    Attn,
    Embed,
    Pca,
    Neighbors,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::ConfigLine { .. } | Error::Parameter(_) => 1,
        Error::NonFinite { .. } | Error::Diverged { .. } => 3,
        _ => 2,
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&fs::read_to_string(path)?)?;
    if let Ok(s) = std::env::var("CASSNAT_SEED") {
        cfg.seed = s.parse().map_err(|_| Error::Usage(format!("CASSNAT_SEED={s} is not an integer")))?;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<(Model, ParamStore)> {
    Checkpoint::load(path)?.model()
}

fn inputs(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let paths = feature_paths(path)?;
    if paths.is_empty() {
        return Err(Error::Usage(format!("no .feat files under {}", path.display())));
    }
    paths.iter().map(|p| Ok((utterance_id(p), read_features(p)?))).collect()
}

fn read_labels(path: &Path) -> Result<Vec<Vec<usize>>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::ConfigLine { line: i + 1, detail: format!("bad token id {t}") }))
                .collect()
        })
        .collect()
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

fn print(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn cmd_train(config: &Path, out: &Path, init_encoder: Option<&Path>, at_baseline: bool) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let kind = if at_baseline { ModelKind::AtBaseline } else { ModelKind::CassNat };
    let init = match init_encoder {
        None => None,
        Some(p) => {
            let source = Checkpoint::load(p)?;
            let (_, mut store) = Model::build(kind, &cfg.model, cfg.seed)?;
            let n = init_encoder_from_at(&source.params, &mut store)?;
            info!("initialized {n} encoder tensors from {}", p.display());
            Some(store)
        }
    };
    fs::create_dir_all(out)?;
    fs::write(out.join("config.cfg"), cfg.to_text())?;
    let mut epochs_log = String::from("epoch\ttrain_loss\ttoken_acc\tseq_err\n");
    let (_, outcome) = train_synthetic(&cfg, kind, init, &mut |s| {
        let e = s.epochs.last().expect("epoch just finished");
        info!("epoch {} loss {:.4} valid {}", e.epoch, e.train_loss, e.valid);
        writeln!(epochs_log, "{}\t{}\t{}\t{}", e.epoch, e.train_loss, e.valid.token_accuracy(), e.valid.sequence_error())
            .expect("string write");
        fs::write(out.join("epochs.log"), &epochs_log)?;
        Ok(())
    })?;
    let state = &outcome.state;
    let log: String = state.log.iter().map(|l| format!("{l}\n")).collect();
    fs::write(out.join("loss.log"), format!("step\tloss\tctc_final\tctc_mid\tce_final\tce_mid\n{log}"))?;
    let save = |name: &str, params: ParamStore| {
        Checkpoint { kind, config: cfg.model.clone(), params }.save(&out.join(name))
    };
    save("last.ckpt", state.store.clone())?;
    if let Some(best) = state.best.first() {
        save("best.ckpt", best.store.clone())?;
    }
    save("averaged.ckpt", state.averaged()?)?;
    if let Some(step) = outcome.diverged {
        eprintln!("training diverged at step {step}; last good parameters saved");
        return Ok(ExitCode::from(3));
    }
    match state.epochs.last() {
        Some(e) => println!(
            "final validation token_acc {:.4} seq_err {:.4} after {} epochs",
            e.valid.token_accuracy(),
            e.valid.sequence_error(),
            e.epoch
        ),
        None => println!("no epochs run"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(config: &Path, out: &Path, split: Split, count: Option<usize>) -> Result<()> {
    let cfg = load_config(config)?;
    let (stream, name, default) = match split {
        Split::Train => (TRAIN_STREAM, "train", cfg.train_utterances),
        Split::Valid => (VALID_STREAM, "valid", cfg.valid_utterances),
        Split::Test => (TEST_STREAM, "test", cfg.test_utterances),
    };
    let task = SyntheticTask::new(&cfg.data)?;
    fs::create_dir_all(out)?;
    let mut labels = String::new();
    for i in 0..count.unwrap_or(default) {
        let u = task.utterance(stream, i as u64);
        write_features(&out.join(format!("{name}_{i:05}.feat")), &u.features)?;
        writeln!(labels, "{}", join(&u.labels)).expect("string write");
    }
    fs::write(out.join("labels.txt"), labels)?;
    Ok(())
}

fn cmd_decode(ckpt: &Path, input: &Path, beam: Option<usize>) -> Result<()> {
    let (model, store) = load_model(ckpt)?;
    let mut text = String::new();
    for (id, x) in inputs(input)? {
        let (tokens, score, passes) = match (&model, beam) {
            (Model::CassNat(m), Some(b)) => {
                let nb = m.decode_nbest(&store, &x, b)?;
                let best = &nb.hypotheses[0];
                let score = if best.tokens.is_empty() { 0.0 } else { best.score };
                (best.tokens.clone(), score, nb.decoder_passes)
            }
            (Model::At(_), Some(_)) => {
                return Err(Error::Usage("--beam applies to the non-autoregressive model only".into()))
            }
            (m, None) => {
                let d = m.decode(&store, &x)?;
                (d.tokens.clone(), d.mean_log_posterior(), d.decoder_passes)
            }
        };
        writeln!(text, "{id}\t{}\t{score}\t{passes}", join(&tokens)).expect("string write");
    }
    print(&text)
}

fn ctc_grid(model: &Model, store: &ParamStore, x: &Tensor) -> Result<LogPosteriorGrid> {
    let mut ctx = ForwardCtx::new(store, Mode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let enc = match model {
        Model::CassNat(m) => m.encode(&mut ctx, xv, false)?,
        Model::At(m) => m.encoder.forward(&mut ctx, xv, false)?,
    };
    let lp = ctx.tape.value(enc.ctc_final);
    LogPosteriorGrid::from_log_probs(lp.rows(), lp.cols(), lp.data().to_vec())
}

fn cmd_align(ckpt: &Path, input: &Path, labels: &Path) -> Result<ExitCode> {
    let (model, store) = load_model(ckpt)?;
    let utts = inputs(input)?;
    let labels = read_labels(labels)?;
    if labels.len() != utts.len() {
        return Err(Error::Usage(format!("{} label lines for {} inputs", labels.len(), utts.len())));
    }
    let mut failed = 0;
    for ((id, x), y) in utts.iter().zip(&labels) {
        let seg = ctc_grid(&model, &store, x).and_then(|g| alignment_to_segments(&ctc_forced_align(&g, y)?));
        match seg {
            Ok(s) => print(&format!("# {id}\n{s}"))?,
            Err(e @ (Error::Infeasible { .. } | Error::NoTokens | Error::Usage(_))) => {
                failed += 1;
                eprintln!("{id}: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn cmd_bench(
    nat: Option<&Path>,
    at: Option<&Path>,
    config: Option<&Path>,
    lengths: &[usize],
    repeats: usize,
) -> Result<()> {
    let arch = match config {
        Some(p) => load_config(p)?.model,
        None => ModelConfig::default(),
    };
    let (nat_model, nat_store) = match nat {
        Some(p) => match load_model(p)? {
            (Model::CassNat(m), s) => (m, s),
            _ => return Err(Error::Usage(format!("{} is not a non-autoregressive checkpoint", p.display()))),
        },
        None => CassNat::build(&arch, 1)?,
    };
    let (at_model, at_store) = match at {
        Some(p) => match load_model(p)? {
            (Model::At(m), s) => (m, s),
            _ => return Err(Error::Usage(format!("{} is not a baseline checkpoint", p.display()))),
        },
        None => AtBaseline::build(&nat_model.cfg, 2)?,
    };
    let rows = run_bench((&nat_model, &nat_store), (&at_model, &at_store), lengths, repeats, 1)?;
    print(&format_bench(&rows))
}

fn cmd_gradcheck(config: Option<&Path>, module: Option<&str>, fault: Option<&str>, probes: usize) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => load_config(p)?.model,
        None => ModelConfig::default(),
    };
    let opts = SuiteOptions { max_probes: probes, ..SuiteOptions::default() };
    let results = gradcheck_suite(&cfg, module, fault, &opts)?;
    let mut text = String::new();
    for r in &results {
        let worst = r.worst.as_ref().map_or(String::new(), |(n, p)| {
            format!("{n}[{}] analytic {:.6e} numeric {:.6e}", p.index, p.analytic, p.numeric)
        });
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(text, "{}\t{verdict}\t{:.3e}\t{worst}", r.block, r.max_rel_error).expect("string write");
    }
    print(&text)?;
    Ok(if results.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn parse_heads(s: &str) -> Result<std::ops::RangeInclusive<usize>> {
    let bad = || Error::Usage(format!("bad head range {s}; expected N or N-M"));
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    Ok(a.trim().parse().map_err(|_| bad())?..=b.trim().parse().map_err(|_| bad())?)
}

fn nat_model(ckpt: Option<&Path>) -> Result<(CassNat, ParamStore)> {
    let p = ckpt.ok_or_else(|| Error::Usage("--ckpt is required for this mode".into()))?;
    match load_model(p)? {
        (Model::CassNat(m), s) => Ok((m, s)),
        _ => Err(Error::Usage("analysis needs a non-autoregressive checkpoint".into())),
    }
}

struct AnalyzeArgs<'a> {
    mode: AnalyzeMode,
    ckpt: Option<&'a Path>,
    input: Option<&'a Path>,
    labels: Option<&'a Path>,
    table: Option<&'a Path>,
    layer: &'a str,
    heads: Option<&'a str>,
    token: Option<usize>,
    n: usize,
    decoder_states: bool,
}

fn embedding_table(a: &AnalyzeArgs<'_>) -> Result<EmbeddingTable> {
    if let Some(t) = a.table {
        return EmbeddingTable::from_text(&fs::read_to_string(t)?);
    }
    let (model, store) = nat_model(a.ckpt)?;
    let input = a.input.ok_or_else(|| Error::Usage("--input or --table is required".into()))?;
    let labels = read_labels(a.labels.ok_or_else(|| Error::Usage("--labels is required with --input".into()))?)?;
    let utts = inputs(input)?;
    if labels.len() != utts.len() {
        return Err(Error::Usage(format!("{} label lines for {} inputs", labels.len(), utts.len())));
    }
    let data: Vec<_> = utts
        .into_iter()
        .zip(labels)
        .map(|((_, features), labels)| cassnat::data::Utterance {
            features,
            labels,
            durations: Vec::new(),
            lead_silence: 0,
            trail_silence: 0,
        })
        .collect();
    let tap = if a.decoder_states { EmbeddingTap::DecoderOutput } else { EmbeddingTap::Extractor };
    let (table, skipped) = extract_embeddings(&model, &store, &data, tap)?;
    if skipped > 0 {
        warn!("{skipped} utterances skipped as infeasible");
    }
    Ok(table)
}

fn cmd_analyze(a: &AnalyzeArgs<'_>) -> Result<()> {
    match a.mode {
        AnalyzeMode::Attn => {
            let (model, store) = nat_model(a.ckpt)?;
            let input = a.input.ok_or_else(|| Error::Usage("--input is required".into()))?;
            let layers = match a.layer {
                "all" => LayerSelector::All,
                "last" => LayerSelector::Last,
                names => LayerSelector::Named(names.split(',').map(str::to_string).collect()),
            };
            let selector = AttentionSelector { layers, heads: a.heads.map(parse_heads).transpose()? };
            let utts = inputs(input)?;
            let labels = a.labels.map(read_labels).transpose()?;
            let mut text = String::new();
            for (i, (id, x)) in utts.iter().enumerate() {
                let y = labels.as_ref().and_then(|l| l.get(i)).map(Vec::as_slice);
                if utts.len() > 1 {
                    writeln!(text, "# utterance={id}").expect("string write");
                }
                text += &format_attention(&dump_attention(&model, &store, x, y, &selector)?);
            }
            print(&text)
        }
        AnalyzeMode::Embed => print(&embedding_table(a)?.to_text()),
        AnalyzeMode::Pca => {
            let table = embedding_table(a)?;
            let tokens = table.tokens();
            let vectors: Vec<Vec<f64>> = tokens.iter().map(|t| table.get(*t).expect("listed").0.to_vec()).collect();
            print(&format_pca(&tokens, &pca_2d(&vectors)?))
        }
        AnalyzeMode::Neighbors => {
            let token = a.token.ok_or_else(|| Error::Usage("--token is required".into()))?;
            let table = embedding_table(a)?;
            let text: String =
                cosine_neighbors(&table, token, a.n)?.iter().map(|(t, s)| format!("{t}\t{s}\n")).collect();
            print(&text)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out, init_encoder, at_baseline } => {
            cmd_train(&config, &out, init_encoder.as_deref(), at_baseline)
        }
        Command::Generate { config, out, split, count } => cmd_generate(&config, &out, split, count).map(|_| ExitCode::SUCCESS),
        Command::Decode { ckpt, input, beam } => cmd_decode(&ckpt, &input, beam).map(|_| ExitCode::SUCCESS),
        Command::Align { ckpt, input, labels } => cmd_align(&ckpt, &input, &labels),
        Command::Bench { ckpt_nat, ckpt_at, config, lengths, repeats } => {
            cmd_bench(ckpt_nat.as_deref(), ckpt_at.as_deref(), config.as_deref(), &lengths, repeats)
                .map(|_| ExitCode::SUCCESS)
        }
        Command::Gradcheck { config, module, inject_fault, probes } => {
            cmd_gradcheck(config.as_deref(), module.as_deref(), inject_fault.as_deref(), probes)
        }
        Command::Analyze { mode, ckpt, input, labels, table, layer, heads, token, n, decoder_states } => {
            cmd_analyze(&AnalyzeArgs {
                mode,
                ckpt: ckpt.as_deref(),
                input: input.as_deref(),
                labels: labels.as_deref(),
                table: table.as_deref(),
                layer: &layer,
                heads: heads.as_deref(),
                token,
                n,
                decoder_states,
            })
            .map(|_| ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
