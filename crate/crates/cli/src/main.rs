use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use bayes_transformer::bayes::KlMode;
use bayes_transformer::checkpoint::Checkpoint;
use bayes_transformer::config::{TrainConfig, PAPER_LEARNING_RATE};
use bayes_transformer::data::{generate_synthetic, Dataset, SynthConfig, Vocab};
use bayes_transformer::decode::{beam_search, greedy_decode, ModelScorer};
use bayes_transformer::featfile::{read_features, write_features};
use bayes_transformer::losses::KlWeightForm;
use bayes_transformer::optim::OptimizerKind;
use bayes_transformer::selftest::{run_selftest, SelftestOptions};
use bayes_transformer::train::{
    check_compatible, decode_spec, eval_set, evaluate, train_set, EvalOptions, EvalReport,
    MetricsSink, Trainer,
    CHECKPOINT_FILE, CONFIG_FILE, VOCAB_FILE,
};
use bayes_transformer::{bayes::Noise, Error};
use clap::{Args, Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_SELFTEST: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "bayes-transformer", version, about = "Variational transformer for sequence transduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its vocabulary.
    GenData(GenDataArgs),
    /// Train a model; writes config, vocabulary, metrics and checkpoint to the output directory.
    Train(TrainArgs),
    /// Beam-decode a dataset and report WER, CER and loss.
    Eval(EvalArgs),
    /// Print one decoded transcript per utterance.
    Decode(DecodeArgs),
    /// Run the oracle suite.
    Selftest(SelftestArgs),
}

/// Command-line overrides of [`TrainConfig`]; each wins over the config file.
#[derive(Args, Default)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Use the paper's fixed learning rate of 1e-6.
    #[arg(long, conflicts_with = "learning_rate")]
    paper_learning_rate: bool,
    /// adam | sgd
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ctc_weight: Option<f64>,
    #[arg(long)]
    ce_weight: Option<f64>,
    /// standard | paper-verbatim
    #[arg(long, value_parser = parse_kl_mode)]
    kl_mode: Option<KlMode>,
    /// printed | classic
    #[arg(long, value_parser = parse_weight_form)]
    kl_weight_form: Option<KlWeightForm>,
    #[arg(long)]
    schedule_divisor: Option<u32>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    length_norm: bool,
    /// Sample ε while decoding instead of using posterior means.
    #[arg(long)]
    sampled_eval: bool,
    #[arg(long)]
    max_decode_len: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut c = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $($target:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { c.$($target).+ = v; })*
            };
        }
        set!(
            epochs => epochs,
            batch_size => batch_size,
            learning_rate => learning_rate,
            optimizer => optimizer,
            seed => seed,
            ctc_weight => ctc_weight,
            ce_weight => ce_weight,
            kl_mode => kl_mode,
            kl_weight_form => kl_weight_form,
            schedule_divisor => schedule_divisor,
            beam_width => beam_width,
            max_decode_len => max_decode_len,
            out_dir => out_dir,
            eval_seed => eval_seed,
            eval_samples => eval_samples,
            samples => synth.num_samples,
            noise => synth.noise,
            d_model => model.d_model,
            d_ff => model.d_ff,
            n_heads => model.n_heads,
            encoder_layers => model.encoder_layers,
            decoder_layers => model.decoder_layers,
        );
        if self.train_data.is_some() {
            c.train_data = self.train_data.clone();
        }
        if self.eval_data.is_some() {
            c.eval_data = self.eval_data.clone();
        }
        if self.paper_learning_rate {
            c.learning_rate = PAPER_LEARNING_RATE;
        }
        c.length_norm |= self.length_norm;
        c.sampled_eval |= self.sampled_eval;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output feature file.
    #[arg(long)]
    out: PathBuf,
    /// Vocabulary file; defaults to `<out>.vocab`.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    /// TOML file whose `[synth]` table configures the generator.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Skip the evaluation after training.
    #[arg(long)]
    no_eval: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Feature file to decode; defaults to the run's eval set.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    length_norm: bool,
    #[arg(long)]
    sampled: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Greedy decoding instead of beam search.
    #[arg(long)]
    greedy: bool,
}

#[derive(Args)]
struct SelftestArgs {
    /// Smaller sample counts.
    #[arg(long)]
    quick: bool,
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    match s {
        "adam" => Ok(OptimizerKind::Adam),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(format!("unknown optimizer `{s}` (adam | sgd)")),
    }
}

fn parse_kl_mode(s: &str) -> Result<KlMode, String> {
    match s {
        "standard" => Ok(KlMode::Standard),
        "paper-verbatim" => Ok(KlMode::PaperVerbatim),
        _ => Err(format!("unknown KL mode `{s}` (standard | paper-verbatim)")),
    }
}

fn parse_weight_form(s: &str) -> Result<KlWeightForm, String> {
    match s {
        "printed" => Ok(KlWeightForm::Printed),
        "classic" => Ok(KlWeightForm::Classic),
        _ => Err(format!("unknown KL weight form `{s}` (printed | classic)")),
    }
}

fn print_report(r: &EvalReport) {
    println!(
        "samples={} beam_width={} wer={:.4} cer={:.4} loss={:.6} mean_log_prob={:.6}",
        r.samples, r.beam_width, r.wer, r.cer, r.loss, r.mean_log_prob
    );
}

fn gen_data(args: &GenDataArgs) -> Result<(), Error> {
    let mut synth = match &args.config {
        Some(path) => TrainConfig::load(path)?.synth,
        None => SynthConfig::default(),
    };
    if let Some(n) = args.samples {
        synth.num_samples = n;
    }
    if let Some(noise) = args.noise {
        synth.noise = noise;
    }
    let (data, report) = generate_synthetic(&synth, args.seed)?;
    write_features(&args.out, &data)?;
    let vocab_path = args
        .vocab_out
        .clone()
        .unwrap_or_else(|| args.out.with_extension("vocab"));
    synth.vocab()?.save(&vocab_path)?;
    println!(
        "samples={} frames={} tokens={} min_template_distance={:.6} injective={}",
        report.samples,
        report.total_frames,
        report.total_tokens,
        report.min_template_distance,
        report.min_template_distance > 0.0
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<(), Error> {
    let config = args.overrides.resolve()?;
    let dir = config.out_dir.clone();
    let data = train_set(&config)?;
    let vocab = config.synth.vocab()?;
    let mut trainer = if args.resume {
        Trainer::resume(config, Checkpoint::load(&dir.join(CHECKPOINT_FILE))?)?
    } else {
        Trainer::new(config)?
    };
    check_compatible(&trainer.model, &vocab, &data)?;
    fs::create_dir_all(&dir)?;
    trainer.config.save(&dir.join(CONFIG_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let mut sink = MetricsSink::open(&dir, args.resume)?;
    while trainer.epoch < trainer.config.epochs {
        let r = trainer.train_epoch(&data, Some(&mut sink))?;
        println!(
            "epoch={} kl_weight={:.6} kl={:.3} ctc={:.4} ce={:.4} total={:.4}",
            r.epoch, r.kl_weight, r.kl_raw, r.ctc, r.ce, r.total
        );
        trainer.save_run(&dir, &vocab)?;
    }
    trainer.save_run(&dir, &vocab)?;
    if !args.no_eval {
        let eval = eval_set(&trainer.config)?;
        let report = evaluate(
            &trainer.model,
            &trainer.store,
            &vocab,
            &eval,
            &EvalOptions::from_config(&trainer.config),
        )?;
        fs::write(dir.join("eval.json"), report.to_json() + "\n")?;
        print_report(&report);
    }
    Ok(())
}

struct LoadedRun {
    config: TrainConfig,
    checkpoint: Checkpoint,
    vocab: Vocab,
    data: Dataset,
}

fn load_run(args: &RunArgs) -> Result<LoadedRun, Error> {
    let mut config = TrainConfig::load(&args.run.join(CONFIG_FILE))?;
    let checkpoint = Checkpoint::load(&args.run.join(CHECKPOINT_FILE))?;
    let vocab = Vocab::load(&args.run.join(VOCAB_FILE))?;
    if let Some(w) = args.beam_width {
        config.beam_width = w;
    }
    config.length_norm |= args.length_norm;
    config.sampled_eval |= args.sampled;
    config.validate()?;
    let data = match &args.data {
        Some(path) => read_features(path)?,
        None => eval_set(&config)?,
    };
    Ok(LoadedRun {
        config,
        checkpoint,
        vocab,
        data,
    })
}

fn eval(args: &EvalArgs) -> Result<(), Error> {
    let run = load_run(&args.run)?;
    let model = run.checkpoint.model()?;
    let report = evaluate(
        &model,
        &run.checkpoint.params,
        &run.vocab,
        &run.data,
        &EvalOptions::from_config(&run.config),
    )?;
    print_report(&report);
    Ok(())
}

fn decode(args: &DecodeArgs) -> Result<(), Error> {
    let run = load_run(&args.run)?;
    let model = run.checkpoint.model()?;
    check_compatible(&model, &run.vocab, &run.data)?;
    let spec = decode_spec(&model, run.config.max_decode_len);
    for sample in &run.data.samples {
        let mut scorer = ModelScorer::new(
            &model,
            &run.checkpoint.params,
            &sample.features,
            Noise::Off,
            run.config.kl_mode,
        )?;
        let out = if args.greedy {
            greedy_decode(&mut scorer, &spec)?
        } else {
            beam_search(&mut scorer, &spec, run.config.beam_width, run.config.length_norm)?
        };
        println!("{}", run.vocab.render(&out.tokens));
    }
    Ok(())
}

fn selftest(args: &SelftestArgs) -> Result<bool, Error> {
    let opts = if args.quick {
        SelftestOptions::quick()
    } else {
        SelftestOptions::full()
    };
    let reports = run_selftest(&opts)?;
    for r in &reports {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    Ok(reports.iter().all(|r| r.passed))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Decode(a) => decode(a),
        Command::Selftest(a) => match selftest(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_SELFTEST),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
