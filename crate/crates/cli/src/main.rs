//! Command-line interface: training, evaluation, diagnostics, data
//! generation, and correctness checks. Exit codes: 0 success, 1 validation
//! failure, 2 numerical failure.

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segsyn::autodiff::Graph;
use segsyn::checkpoint;
use segsyn::config::Config;
use segsyn::data::{
    load_dataset, save_dataset, LabelVocab, Polarity, SentenceRecord, TokenVocab,
};
use segsyn::error::{Error, Result};
use segsyn::gradcheck::grad_check;
use segsyn::inspect::dump_record;
use segsyn::latent::{tree_marginals, validate_marginals, MttVariant};
use segsyn::matrix::Matrix;
use segsyn::model::{Model, RecordInputs};
use segsyn::oracle::enumerate_arborescences;
use segsyn::params::ParamStore;
use segsyn::synth::{generate_synthetic, label_counts, GenProfile};
use segsyn::train::{ablation_sweep, build_inputs, evaluate, train};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "segsyn",
    version,
    about = "Segment-aware and latent-syntax graph model for aspect sentiment"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint, vocab, config, and metrics log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default train_out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of the full-model gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare latent-tree marginals against brute-force enumeration.
    OracleCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Dump attention, mask, tree, and weight artifacts for one record.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record_id: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every ablation and fusion mode over three seeds and tabulate.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic labeled dataset.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Emit mostly multi-clause sentences with distinct aspect labels.
        #[arg(long)]
        multi_aspect: bool,
    },
    /// Print the named parameters and the total scalar count.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numerical(_) => 2,
                Error::Invalid(_) | Error::Io(_) => 1,
            };
            std::process::exit(code);
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { config, out } => cmd_train(&config, out.as_deref()),
        Cmd::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data),
        Cmd::Gradcheck { seed } => cmd_gradcheck(seed),
        Cmd::OracleCheck { trials } => cmd_oracle_check(trials),
        Cmd::Inspect {
            checkpoint,
            record_id,
            out,
        } => cmd_inspect(&checkpoint, record_id, &out),
        Cmd::Ablate { config } => cmd_ablate(&config),
        Cmd::GenData {
            seed,
            size,
            out,
            multi_aspect,
        } => cmd_gen_data(seed, size, &out, multi_aspect),
        Cmd::Params { config } => cmd_params(&config),
    }
}

fn load_configured_data(cfg: &Config) -> Result<(Vec<SentenceRecord>, Vec<SentenceRecord>)> {
    if cfg.train_data.is_empty() || cfg.dev_data.is_empty() {
        return Err(Error::invalid(
            "config must set train_data and dev_data paths",
        ));
    }
    let train = load_dataset(Path::new(&cfg.train_data))?;
    let dev = load_dataset(Path::new(&cfg.dev_data))?;
    Ok((train, dev))
}

fn cmd_train(config: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = Config::load(config)?;
    let (train_records, dev_records) = load_configured_data(&cfg)?;
    let outcome = train(&cfg, &train_records, &dev_records)?;

    let out_dir = out.unwrap_or(Path::new("train_out"));
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", out_dir.display())))?;
    checkpoint::save(&outcome.store, &out_dir.join("model.ckpt"))?;
    outcome.vocab.save(&out_dir.join("vocab.txt"))?;
    outcome.labels.save(&out_dir.join("labels.txt"))?;
    std::fs::write(out_dir.join("config.cfg"), cfg.to_text())
        .map_err(|e| Error::invalid(format!("cannot write config sidecar: {e}")))?;
    std::fs::write(out_dir.join("metrics.log"), &outcome.log)
        .map_err(|e| Error::invalid(format!("cannot write metrics log: {e}")))?;

    print!("{}", outcome.log);
    println!(
        "best epoch={} dev_acc={:.6} dev_f1={:.6} params={}",
        outcome.best_epoch,
        outcome.best_dev.accuracy(),
        outcome.best_dev.macro_f1(),
        outcome.store.count_scalars()
    );
    println!("saved {}", out_dir.join("model.ckpt").display());
    Ok(())
}

/// Loads checkpoint plus the sidecar config and vocabularies written next
/// to it by `train`.
fn load_bundle(ckpt: &Path) -> Result<(ParamStore, Config, TokenVocab, LabelVocab)> {
    let dir = ckpt
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let store = checkpoint::load(ckpt)?;
    let cfg = Config::load(&dir.join("config.cfg"))?;
    let vocab = TokenVocab::load(&dir.join("vocab.txt"))?;
    let labels = LabelVocab::load(&dir.join("labels.txt"))?;
    Ok((store, cfg, vocab, labels))
}

fn cmd_eval(ckpt: &Path, data: &Path) -> Result<()> {
    let (mut store, cfg, vocab, labels) = load_bundle(ckpt)?;
    let records = load_dataset(data)?;
    let model = Model {
        cfg: cfg.clone(),
        vocab_size: vocab.len(),
        n_labels: labels.len(),
    };
    let inputs = build_inputs(&records, &vocab, &labels, cfg.l)?;
    let (metrics, _) = evaluate(&model, &mut store, &inputs)?;
    print!("{}", metrics.format_report());
    Ok(())
}

fn gradcheck_record() -> SentenceRecord {
    SentenceRecord {
        tokens: vec![
            "the".into(),
            "pasta".into(),
            "dish".into(),
            "was".into(),
            "fine".into(),
        ],
        aspect_from: 1,
        aspect_to: 2,
        polarity: Polarity::Neutral,
        dep_head: vec![2, 3, 4, 0, 4],
        dep_label: vec![
            "det".into(),
            "compound".into(),
            "nsubj".into(),
            "root".into(),
            "acomp".into(),
        ],
        constituency: "(S (NP the pasta dish) (VP was fine))".into(),
    }
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let record = gradcheck_record();
    let records = std::slice::from_ref(&record);
    let vocab = TokenVocab::from_records(records);
    let labels = LabelVocab::from_records(records);
    let mut cfg = Config::default();
    cfg.d = 16;
    cfg.l = 2;
    cfg.gcn_layers = 2;
    cfg.n_head_sylg = 2;
    cfg.d_r = 4;
    cfg.n_max = 8;
    cfg.seed = seed;
    let model = Model {
        cfg,
        vocab_size: vocab.len(),
        n_labels: labels.len(),
    };
    let inputs = RecordInputs::build(&record, &vocab, &labels, 2)?;

    let mut store = ParamStore::new(seed);
    let report = grad_check(
        &mut store,
        |s, with_grads| {
            let g = Graph::new();
            let fwd = model.forward(&g, s, &inputs)?;
            let loss = model.loss_for(&g, &fwd, inputs.label)?;
            if with_grads {
                g.backward(loss.total)?;
                g.export_grads(s);
            }
            Ok(loss.total.scalar_value())
        },
        1e-5,
        1e-4,
    )?;
    print!("{}", report.format_table());
    if report.pass() {
        println!(
            "gradcheck passed: max relative error {:.3e} within 1e-4",
            report.max_rel_err()
        );
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "gradcheck failed: max relative error {:.3e} exceeds 1e-4",
            report.max_rel_err()
        )))
    }
}

fn cmd_oracle_check(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::invalid("trials must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut max_err = 0.0f64;
    for t in 0..trials {
        let n = 2 + t % 5;
        let mut edge = Matrix::zeros(n, n);
        let mut root = vec![0.0; n];
        for i in 0..n {
            root[i] = 1.0 - rng.gen_range(0.0..1.0);
            for j in 0..n {
                if i != j {
                    edge.set(i, j, 1.0 - rng.gen_range(0.0..1.0));
                }
            }
        }
        let (_, exp_marg, exp_roots) = enumerate_arborescences(&edge, &root)?;

        let g = Graph::new();
        let phi = Matrix::from_vec(n, 1, root.clone());
        let tm = tree_marginals(&g, g.constant(edge), g.constant(phi), MttVariant::FirstRow)?;
        let marg = tm.marginals.value();
        let roots = tm.root_probs.value();
        validate_marginals(&marg, &roots, 1e-8).map_err(|e| {
            Error::numerical(format!("trial {t} (n={n}): distribution law violated: {e}"))
        })?;

        max_err = max_err.max(marg.max_abs_diff(&exp_marg));
        for i in 0..n {
            max_err = max_err.max((roots.get(i, 0) - exp_roots[i]).abs());
        }
        if max_err > 1e-8 {
            return Err(Error::numerical(format!(
                "trial {t} (n={n}): marginals deviate from enumeration by {max_err:.3e}"
            )));
        }
    }
    println!(
        "oracle-check passed: {trials} trials, n in 2..=6, max deviation {max_err:.3e} within 1e-8"
    );
    Ok(())
}

fn cmd_inspect(ckpt: &Path, record_id: usize, out: &Path) -> Result<()> {
    let (mut store, cfg, vocab, labels) = load_bundle(ckpt)?;
    if cfg.dev_data.is_empty() {
        return Err(Error::invalid("checkpoint config has no dev_data path"));
    }
    let records = load_dataset(Path::new(&cfg.dev_data))?;
    let record = records.get(record_id).ok_or_else(|| {
        Error::invalid(format!(
            "record-id {record_id} out of range: dataset has {} records",
            records.len()
        ))
    })?;
    let model = Model {
        cfg: cfg.clone(),
        vocab_size: vocab.len(),
        n_labels: labels.len(),
    };
    let inputs = RecordInputs::build(record, &vocab, &labels, cfg.l)?;
    let files = dump_record(&model, &mut store, &inputs, record_id, out)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_ablate(config: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    let (train_records, dev_records) = load_configured_data(&cfg)?;
    let seeds = [cfg.seed, cfg.seed + 1, cfg.seed + 2];
    let rows = ablation_sweep(&cfg, &train_records, &dev_records, &seeds)?;
    println!(
        "{:<10} {:>8} {:>8} {:>8} {:>9} {:>9}",
        "mode", "acc_s0", "acc_s1", "acc_s2", "mean_acc", "mean_f1"
    );
    for row in &rows {
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4}",
            row.mode,
            row.accuracies[0],
            row.accuracies[1],
            row.accuracies[2],
            row.mean_accuracy(),
            row.mean_f1()
        );
    }
    Ok(())
}

fn cmd_gen_data(seed: u64, size: usize, out: &Path, multi_aspect: bool) -> Result<()> {
    if size == 0 {
        return Err(Error::invalid("size must be positive"));
    }
    let profile = if multi_aspect {
        GenProfile::multi_aspect()
    } else {
        GenProfile::single_aspect()
    };
    let records = generate_synthetic(seed, size, profile);
    save_dataset(out, &records)?;
    let counts = label_counts(&records);
    println!(
        "wrote {} records to {} (positive={} negative={} neutral={})",
        records.len(),
        out.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

fn cmd_params(config: &Path) -> Result<()> {
    let cfg = Config::load(config)?;
    if cfg.train_data.is_empty() {
        return Err(Error::invalid(
            "params needs train_data in the config to size the vocabularies",
        ));
    }
    let records = load_dataset(Path::new(&cfg.train_data))?;
    if records.is_empty() {
        return Err(Error::invalid("train_data is empty"));
    }
    let vocab = TokenVocab::from_records(&records);
    let labels = LabelVocab::from_records(&records);
    let model = Model {
        cfg: cfg.clone(),
        vocab_size: vocab.len(),
        n_labels: labels.len(),
    };
    let inputs = RecordInputs::build(&records[0], &vocab, &labels, cfg.l)?;
    let mut store = ParamStore::new(cfg.seed);
    let g = Graph::new();
    let _ = model.forward(&g, &mut store, &inputs)?;
    for p in store.iter() {
        println!(
            "{:<28} {:>5} x {:<5} = {}",
            p.name,
            p.value.rows(),
            p.value.cols(),
            p.value.rows() * p.value.cols()
        );
    }
    println!("total parameters: {}", store.count_scalars());
    Ok(())
}
