use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use fltlm::datagen::{corpus_stats, generate_split, sample_seed, Split};
use fltlm::diagnostics::{filter_loss_gradients, loss_identities, model_gradients, Check};
use fltlm::evaluator::{
    attention_analysis, oracle_scores, random_scores, recall_curve, run_matrix, score_samples, summary_table,
    write_report_csv, DecodeOptions, Reader, ReportRow, System,
};
use fltlm::experiment::{filter_layers_for, train_model};
use fltlm::forward::PassSpec;
use fltlm::input::{read_dataset, write_dataset, QaSample};
use fltlm::model::ModelConfig;
use fltlm::trainer::{load_checkpoint, save_checkpoint, CheckpointMeta, Margin, Regime, StepLog, LOG_HEADER};
use fltlm::vocab::Vocab;
use fltlm::Params32;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> CliError {
    move |source| CliError::Io { context, source }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    let f = File::create(path).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(BufWriter::new(f))
}

/// Writes `body` after a `# ` line holding the resolved config and seed.
fn write_with_header(path: &Path, cfg: &RunConfig, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut out = create(path)?;
    let ctx = || format!("writing {}", path.display());
    writeln!(out, "# seed={} config={}", cfg.experiment.train.seed, cfg.record()).map_err(io_err(ctx()))?;
    body(&mut out).map_err(io_err(ctx()))?;
    out.flush().map_err(io_err(ctx()))
}

/// First line of a dataset file.
#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    split: String,
    seed: u64,
    config: RunConfig,
}

fn dataset_path(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.paths.data.join(format!("{}.jsonl", split.name()))
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let (vocab, _) = cfg.experiment.resolve()?;
    let d = &cfg.experiment.data;
    for (split, count) in [(Split::Train, d.train_size), (Split::Eval, d.eval_size)] {
        let samples = generate_split(d, &vocab, split, count).map_err(fltlm::Error::from)?;
        let path = dataset_path(cfg, split);
        let mut out = create(&path)?;
        let ctx = || format!("writing {}", path.display());
        let header = DatasetHeader {
            split: split.name().into(),
            seed: d.seed,
            config: cfg.clone(),
        };
        writeln!(out, "{}", json(&header)?).map_err(io_err(ctx()))?;
        write_dataset(&mut out, &samples).map_err(fltlm::Error::from)?;
        out.flush().map_err(io_err(ctx()))?;
        let st = corpus_stats(&samples);
        println!(
            "{}: {} samples, {:.2} docs, {:.2} relevant, {:.1} words, {} question entities -> {}",
            split.name(),
            st.samples,
            st.mean_docs,
            st.mean_relevant,
            st.mean_words,
            st.distinct_question_entities,
            path.display()
        );
    }
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string(v).map_err(|e| CliError::Failed(format!("serializing: {e}")))
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<Vec<QaSample>, CliError> {
    let path = dataset_path(cfg, split);
    let f = File::open(&path).map_err(|source| CliError::Io {
        context: format!("opening {} (run gen-data first)", path.display()),
        source,
    })?;
    let mut reader = BufReader::new(f);
    let bad = |e: String| CliError::Usage(format!("{}: {e}", path.display()));
    let mut first = String::new();
    reader.read_line(&mut first).map_err(io_err(path.display().to_string()))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
    if header.config.experiment.vocab != cfg.experiment.vocab {
        return Err(bad("generated with a different vocabulary configuration".into()));
    }
    read_dataset(reader).map_err(|e| bad(e.to_string()))
}

fn checkpoint_path(cfg: &RunConfig, name: &str) -> PathBuf {
    let p = PathBuf::from(name);
    if p.exists() {
        p
    } else {
        cfg.paths.checkpoints.join(format!("{name}.ckpt"))
    }
}

fn head(samples: Vec<QaSample>, n: usize) -> Vec<QaSample> {
    if n == 0 {
        samples
    } else {
        samples.into_iter().take(n).collect()
    }
}

/// Trains the configured regime; writes `<name>.ckpt` and `<name>.log.csv`.
pub fn train(cfg: &RunConfig, name: &str) -> Result<(Params32, Vec<StepLog>), CliError> {
    let train = load_split(cfg, Split::Train)?;
    let eval = load_split(cfg, Split::Eval)?;
    let probe = head(eval, cfg.eval.probe_samples.max(1));
    let exp = &cfg.experiment;
    let (_, model) = exp.resolve()?;
    eprintln!("training {} on {} samples ({name})", exp.train.regime, train.len());
    let (params, logs) = train_model(exp, &exp.train, &train, &probe)?;

    let ckpt = checkpoint_path(cfg, name);
    create(&ckpt)?;
    let meta = CheckpointMeta {
        model,
        vocab: exp.vocab.clone(),
        train: Some(exp.train.clone()),
        seed: exp.train.seed,
        epoch: Some(exp.train.epochs - 1),
        run: serde_json::to_value(cfg).ok(),
    };
    save_checkpoint(&ckpt, &params, &meta)?;
    let log = cfg.paths.reports.join(format!("{name}.log.csv"));
    write_with_header(&log, cfg, |o| {
        writeln!(o, "{LOG_HEADER}")?;
        logs.iter().try_for_each(|l| writeln!(o, "{}", l.csv_row()))
    })?;
    if let Some(last) = logs.last() {
        println!("{name}: loss {:.4} w {:.4} b {:.4} -> {}", last.loss, last.w, last.b, ckpt.display());
    }
    Ok((params, logs))
}

struct Loaded {
    name: String,
    params: Params32,
    model: ModelConfig,
    spec: PassSpec,
    regime: Regime,
}

fn load(cfg: &RunConfig, name: &str) -> Result<Loaded, CliError> {
    let path = checkpoint_path(cfg, name);
    let (params, meta) = load_checkpoint(&path)?;
    let train = meta
        .train
        .ok_or_else(|| CliError::Usage(format!("{} records no training configuration", path.display())))?;
    if meta.vocab != cfg.experiment.vocab {
        return Err(CliError::Usage(format!("{} uses a different vocabulary", path.display())));
    }
    let stem = path.file_stem().map_or(name.to_string(), |s| s.to_string_lossy().into_owned());
    Ok(Loaded {
        name: stem,
        params,
        model: meta.model,
        spec: train.regime.pass_spec(train.strategy),
        regime: train.regime,
    })
}

impl Loaded {
    fn reader(&self) -> Reader<'_> {
        Reader {
            params: &self.params,
            model: &self.model,
            spec: &self.spec,
        }
    }
}

pub struct EvalOutputs {
    pub recall_curve: bool,
    pub attention: bool,
    pub report: String,
}

pub fn eval(cfg: &RunConfig, checkpoints: &[String], two_stage: &[String], opts: &EvalOutputs) -> Result<(), CliError> {
    let (vocab, _) = cfg.experiment.resolve()?;
    let samples = head(load_split(cfg, Split::Eval)?, cfg.eval.samples);
    let conditions = cfg.eval.conditions()?;
    let decode = DecodeOptions {
        max_new_tokens: cfg.eval.max_new_tokens,
    };
    let singles: Vec<Loaded> = checkpoints.iter().map(|c| load(cfg, c)).collect::<Result<_, _>>()?;
    let pairs: Vec<(Loaded, Loaded)> = two_stage
        .iter()
        .map(|p| {
            let (f, r) = p
                .split_once(':')
                .ok_or_else(|| CliError::Usage(format!("--two-stage wants FILTER:READER, got {p:?}")))?;
            Ok((load(cfg, f)?, load(cfg, r)?))
        })
        .collect::<Result<_, CliError>>()?;
    let mut systems: Vec<System> = singles
        .iter()
        .map(|l| System::OneStage {
            name: l.name.clone(),
            reader: l.reader(),
        })
        .collect();
    for (f, r) in &pairs {
        let name = format!("{}>{}", f.name, r.name);
        systems.push(if f.regime.uses_filter() && r.regime.reads() {
            System::TwoStage {
                name,
                filter: f.reader(),
                reader: r.reader(),
            }
        } else {
            System::Missing {
                name,
                reason: "filter stage needs a filter checkpoint and reader stage a reading one".into(),
            }
        });
    }
    let rows = run_matrix(&systems, &vocab, &samples, &conditions, decode)?;
    let csv = cfg.paths.reports.join(format!("{}.csv", opts.report));
    write_with_header(&csv, cfg, |o| write_report_csv(o, &rows))?;
    let table = summary_table(&rows);
    let txt = cfg.paths.reports.join(format!("{}.txt", opts.report));
    write_with_header(&txt, cfg, |o| o.write_all(table.as_bytes()))?;
    print!("{table}");

    if opts.recall_curve {
        recall_report(cfg, &vocab, &singles, &samples, &opts.report)?;
    }
    if opts.attention {
        let n = cfg.eval.attention_samples.min(samples.len());
        let mut lines = Vec::new();
        for l in singles.iter().filter(|l| l.regime.reads()) {
            let a = attention_analysis(l.reader(), &vocab, &samples[..n])?;
            println!("attention {}: positive {:.4} negative {:.4}", l.name, a.positive, a.negative);
            lines.push(format!("{},{},{},{}", l.name, a.positive, a.negative, a.ratio()));
        }
        let path = cfg.paths.reports.join(format!("{}.attention.csv", opts.report));
        write_with_header(&path, cfg, |o| {
            writeln!(o, "system,positive,negative,ratio")?;
            lines.iter().try_for_each(|l| writeln!(o, "{l}"))
        })?;
    }
    Ok(())
}

fn recall_report(cfg: &RunConfig, vocab: &Vocab, models: &[Loaded], samples: &[QaSample], report: &str) -> Result<(), CliError> {
    let gold: Vec<Vec<usize>> = samples.iter().map(|s| s.relevant_indices()).collect();
    let max_k = samples.iter().map(|s| s.documents.len()).min().unwrap_or(0);
    let mut curves: Vec<(String, Vec<f64>)> = Vec::new();
    for l in models.iter().filter(|l| l.regime.uses_filter()) {
        let scores = score_samples(l.reader(), vocab, samples)?;
        curves.push((l.name.clone(), recall_curve(&scores, &gold, max_k)?));
    }
    let oracle: Vec<Vec<f64>> = samples.iter().zip(&gold).map(|(s, g)| oracle_scores(s.documents.len(), g)).collect();
    curves.push(("oracle".into(), recall_curve(&oracle, &gold, max_k)?));
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.experiment.train.seed, Split::Eval, 0));
    let random: Vec<Vec<f64>> = samples.iter().map(|s| random_scores(s.documents.len(), &mut rng)).collect();
    curves.push(("random".into(), recall_curve(&random, &gold, max_k)?));
    let path = cfg.paths.reports.join(format!("{report}.recall.csv"));
    write_with_header(&path, cfg, |o| {
        writeln!(o, "system,k,recall")?;
        for (name, c) in &curves {
            for (k, r) in c.iter().enumerate() {
                writeln!(o, "{name},{},{r}", k + 1)?;
            }
        }
        Ok(())
    })
}

#[derive(Clone, Copy, Debug)]
pub enum SweepAxis {
    Lambda,
    Proportion,
    Margin,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Proportion => "proportion",
            SweepAxis::Margin => "margin",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: &str) -> Result<(), CliError> {
        let bad = |e: String| CliError::Usage(format!("{} value {value:?}: {e}", self.name()));
        let exp = &mut cfg.experiment;
        match self {
            SweepAxis::Lambda => exp.train.lambda = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            SweepAxis::Proportion => {
                let p: f64 = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                filter_layers_for(p, exp.model.n_layers)?;
                exp.filter_proportion = Some(p);
            }
            SweepAxis::Margin => {
                exp.train.margin = if value == "learnable" {
                    Margin::Learnable
                } else {
                    let v = if value.starts_with("fixed:") { value.to_string() } else { format!("fixed:{value}") };
                    v.parse().map_err(bad)?
                }
            }
        }
        Ok(())
    }
}

/// Trains and evaluates each point with seed `seed + i`. A failed point is
/// reported and the sweep moves on; the command fails at the end.
pub fn ablate(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<(), CliError> {
    let (vocab, _) = cfg.experiment.resolve()?;
    let samples = head(load_split(cfg, Split::Eval)?, cfg.eval.samples);
    let conditions = cfg.eval.conditions()?;
    let decode = DecodeOptions {
        max_new_tokens: cfg.eval.max_new_tokens,
    };
    let mut lines = Vec::new();
    let mut failures = 0;
    for (i, value) in values.iter().enumerate() {
        let mut point = cfg.clone();
        point.experiment.train.seed = cfg.experiment.train.seed + i as u64;
        let name = format!("ablate-{}-{}", axis.name(), value.replace(':', "_"));
        let outcome = axis.apply(&mut point, value).and_then(|()| {
            let (params, logs) = train(&point, &name)?;
            let (_, model) = point.experiment.resolve()?;
            let spec = point.experiment.train.regime.pass_spec(point.experiment.train.strategy);
            let reader = Reader {
                params: &params,
                model: &model,
                spec: &spec,
            };
            let system = System::OneStage {
                name: name.clone(),
                reader,
            };
            let rows = run_matrix(std::slice::from_ref(&system), &vocab, &samples, &conditions, decode)?;
            Ok((rows, logs.last().cloned()))
        });
        let seed = point.experiment.train.seed;
        match outcome {
            Ok((rows, last)) => {
                let (w, b) = last.map_or((f64::NAN, f64::NAN), |l| (l.w, l.b));
                for r in rows {
                    lines.push(sweep_line(axis, value, seed, &r, w, b));
                }
            }
            Err(e) => {
                failures += 1;
                eprintln!("{} = {value}: {e}", axis.name());
                let r = ReportRow::missing(&name, "-", &e.to_string().replace(',', ";"));
                lines.push(sweep_line(axis, value, seed, &r, f64::NAN, f64::NAN));
            }
        }
    }
    let path = cfg.paths.reports.join(format!("ablate-{}.csv", axis.name()));
    write_with_header(&path, cfg, |o| {
        writeln!(o, "axis,value,seed,condition,qa_f1,filter_f1,w,b,status")?;
        lines.iter().try_for_each(|l| writeln!(o, "{l}"))
    })?;
    println!("{} points -> {}", values.len(), path.display());
    if failures > 0 {
        return Err(CliError::Failed(format!("{failures} of {} sweep points failed", values.len())));
    }
    Ok(())
}

fn sweep_line(axis: SweepAxis, value: &str, seed: u64, r: &ReportRow, w: f64, b: f64) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    format!(
        "{},{value},{seed},{},{},{},{w},{b},{}",
        axis.name(),
        r.condition,
        opt(r.qa_f1),
        opt(r.filter.map(|f| f.f1)),
        r.status
    )
}

pub fn grad_check(seed: u64) -> Result<(), CliError> {
    let mut checks: Vec<Check> = loss_identities(seed)?;
    checks.extend(filter_loss_gradients(seed)?);
    checks.extend(model_gradients(seed)?);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        return Err(CliError::Failed(format!("{failed} checks failed")));
    }
    Ok(())
}
