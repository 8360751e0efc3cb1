use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anatomy_core::audit::{self, ContextUtilizationReport, Corpus, VocabCoverageReport, DEFAULT_TOPK};
use anatomy_core::intrinsic::{self, IdEstimate, PointCloud, TwoNnFit};
use anatomy_core::ltxt::EmbeddingMatrix;
use anatomy_core::probe::{self, ProbeConfig, ProbeInstance, ProbeReport, ProbeSummary};
use anatomy_core::spectral::{self, SimilarityReport, SpectrumReport};
use anatomy_core::{AnatomyError, Exec, MergeTable};
use anatomy_distill::io::{write_curve, write_params};
use anatomy_distill::optim::LrSchedule;
use anatomy_distill::train::{CurvePoint, Evaluation};
use anatomy_distill::{
    teacher_targets, train, DistillTask, EncoderConfig, LossWeights, Params, PromptSet, Real, TrainConfig,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::manifest::{sidecar, RunManifest};
use crate::{json, svg, CliError, CliResult};

const EXEC: Exec = Exec::Parallel;

#[derive(Debug, Parser)]
#[command(name = "anatomy", version, about = "Anatomical analysis of prompt text encoders", arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode prompts into fixed-length token sequences (JSON lines).
    Tokenize(TokenizeArgs),
    /// Context-window utilization and vocabulary coverage of a corpus.
    Audit(AuditArgs),
    /// Singular-value spectrum and rank summaries of an LTXT matrix.
    Svd(SvdArgs),
    /// Positional cosine-similarity groups of a positional embedding matrix.
    Possim(PossimArgs),
    /// Intrinsic dimensionality of the rows of an LTXT matrix.
    Id(IdArgs),
    /// Distill a small student encoder from a frozen random teacher.
    Distill(DistillArgs),
    /// Softmax error-attenuation probe over random attention instances.
    Probe(ProbeArgs),
    /// Audit, spectrum, positional similarity and intrinsic dimension in one summary.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long)]
    pub context: usize,
    #[arg(long, required_unless_present = "corpus", conflicts_with = "corpus")]
    pub text: Vec<String>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Write the JSON lines (and a manifest) here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AuditArgs {
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "32,16,8")]
    pub context: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SvdArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    /// Subtract the mean row first.
    #[arg(long)]
    pub center: bool,
    #[arg(long, default_value = "spectrum.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PossimArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub split: usize,
    #[arg(long, default_value = "possim.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Twonn,
    Mle,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct IdArgs {
    #[arg(long)]
    pub matrix: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    #[arg(long, default_value_t = intrinsic::DEFAULT_DISCARD)]
    pub discard: f64,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
    pub ks: Vec<usize>,
    /// Subsample this many rows without replacement when the cloud is larger.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// With `--sample`, repeat over seeds `seed..seed+repeats` and report the spread.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long, default_value = "id.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Precision {
    #[value(name = "32")]
    #[serde(rename = "32")]
    F32,
    #[value(name = "64")]
    #[serde(rename = "64")]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(Debug, Args, Serialize)]
pub struct DistillArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub context: usize,
    #[arg(long, default_value_t = 2)]
    pub student_layers: usize,
    #[arg(long, default_value_t = 32)]
    pub student_width: usize,
    #[arg(long, default_value_t = 2)]
    pub student_heads: usize,
    #[arg(long, default_value_t = 2)]
    pub teacher_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub teacher_width: usize,
    #[arg(long, default_value_t = 4)]
    pub teacher_heads: usize,
    #[arg(long, default_value_t = 0)]
    pub teacher_seed: u64,
    /// Embedding dimension shared by teacher and student.
    #[arg(long, default_value_t = 16)]
    pub out_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    pub lambda_cos: f64,
    #[arg(long, default_value_t = 0.1)]
    pub lambda_consist: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub warmup: usize,
    #[arg(long, value_enum, default_value = "cosine")]
    pub schedule: ScheduleArg,
    #[arg(long, default_value_t = 250)]
    pub eval_every: usize,
    /// Stop once held-out mean cosine reaches this value.
    #[arg(long)]
    pub stop_at_cosine: Option<f64>,
    /// Held-out prompts taken from the end of the corpus (default: a fifth).
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long, value_enum, default_value = "64")]
    pub precision: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceArg {
    Random,
    Peaked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsMode {
    /// `--eps` is the noise norm.
    Absolute,
    /// Noise norm is `eps * ||q|| / sqrt(d)`.
    Relative,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = 256)]
    pub d: usize,
    #[arg(long, default_value_t = 64)]
    pub keys: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    #[arg(long, value_enum, default_value = "absolute")]
    pub eps_mode: EpsMode,
    #[arg(long, value_delimiter = ',', default_value = "0.1,1,10")]
    pub sharpness: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    pub seeds: u64,
    /// First seed; seeds run from here upward.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    pub instance: InstanceArg,
    /// Unit-sharpness logit gap of the peaked instance.
    #[arg(long, default_value_t = 10.0)]
    pub gap: f64,
    #[arg(long, default_value = "probe.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub merges: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "32,16,8")]
    pub context: Vec<usize>,
    /// Token embedding matrix for the spectrum and intrinsic dimension.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub center: bool,
    /// Positional embedding matrix for the similarity groups.
    #[arg(long)]
    pub positional: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub split: usize,
    #[arg(long, default_value_t = intrinsic::DEFAULT_DISCARD)]
    pub discard: f64,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Directory for `hist.svg` and `heatmap.svg`.
    #[arg(long)]
    pub svg_dir: Option<PathBuf>,
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Tokenize(a) => tokenize(&a),
        Command::Audit(a) => run_audit(&a),
        Command::Svd(a) => svd(&a),
        Command::Possim(a) => possim(&a),
        Command::Id(a) => id(&a),
        Command::Distill(a) => distill(&a),
        Command::Probe(a) => run_probe(&a),
        Command::Report(a) => report(&a),
    }
}

fn config_of<T: Serialize>(args: &T) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(args)?)
}

/// Writes a report and its sidecar manifest.
fn emit<T: Serialize>(out: &Path, payload: &T, mut manifest: RunManifest, started: Instant) -> CliResult<()> {
    json::write(out, payload)?;
    manifest.output(out);
    manifest.finish(started.elapsed(), &sidecar(out))?;
    Ok(())
}

fn load_table(path: &Path, manifest: &mut RunManifest) -> CliResult<MergeTable> {
    manifest.input(path)?;
    Ok(MergeTable::from_path(path)?)
}

fn load_matrix(path: &Path, manifest: &mut RunManifest) -> CliResult<EmbeddingMatrix> {
    manifest.input(path)?;
    Ok(EmbeddingMatrix::read_path(path)?)
}

fn load_corpus(paths: &[PathBuf], manifest: &mut RunManifest) -> CliResult<Corpus> {
    let mut records = Vec::new();
    for p in paths {
        manifest.input(p)?;
        records.extend(audit::read_prompts(p)?);
    }
    Ok(Corpus::from_records(records))
}

#[derive(Serialize)]
struct TokenizeLine<'a> {
    text: &'a str,
    ids: &'a [u32],
    content_len: usize,
    truncated: bool,
    dropped: usize,
}

fn tokenize(a: &TokenizeArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("tokenize", config_of(a)?);
    let table = load_table(&a.merges, &mut manifest)?;
    let texts: Vec<String> = match &a.corpus {
        Some(p) => {
            manifest.input(p)?;
            audit::read_prompts(p)?
                .into_iter()
                .map(|r| r.map(|r| r.text))
                .collect::<anatomy_core::Result<_>>()?
        }
        None => a.text.clone(),
    };
    let mut out = String::new();
    for text in &texts {
        let seq = table.encode(text, a.context)?;
        out.push_str(&json::to_line(&TokenizeLine {
            text,
            ids: &seq.ids,
            content_len: seq.content_len,
            truncated: seq.truncated,
            dropped: seq.dropped_tokens,
        })?);
        out.push('\n');
    }
    match &a.out {
        Some(path) => {
            std::fs::write(path, out)?;
            manifest.output(path);
            manifest.finish(started.elapsed(), &sidecar(path))?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusSummary {
    pub n_prompts: usize,
    pub skipped: usize,
    pub duplicates_removed: usize,
    pub empty_removed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditOutput {
    pub schema: &'static str,
    pub corpus: CorpusSummary,
    pub contexts: Vec<ContextUtilizationReport>,
    pub vocab: VocabCoverageReport,
}

fn audit_corpus(corpus: &Corpus, table: &MergeTable, contexts: &[usize]) -> CliResult<AuditOutput> {
    if contexts.is_empty() {
        return Err(AnatomyError::InvalidArgument("no context lengths given".into()).into());
    }
    if corpus.is_empty() {
        return Err(AnatomyError::Validation("corpus is empty after deduplication".into()).into());
    }
    let acc = audit::accumulate_with(corpus, table, EXEC);
    let reports = contexts.iter().map(|&l| acc.context_report(l)).collect::<anatomy_core::Result<Vec<_>>>()?;
    Ok(AuditOutput {
        schema: "anatomy/audit/v1",
        corpus: CorpusSummary {
            n_prompts: corpus.len(),
            skipped: corpus.skipped,
            duplicates_removed: corpus.duplicates_removed,
            empty_removed: corpus.empty_removed,
        },
        contexts: reports,
        vocab: acc.vocab_report(table, &DEFAULT_TOPK)?,
    })
}

fn write_audit_csv(path: &Path, reports: &[ContextUtilizationReport]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run_audit(a: &AuditArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("audit", config_of(a)?);
    let table = load_table(&a.merges, &mut manifest)?;
    let corpus = load_corpus(&a.corpus, &mut manifest)?;
    let report = audit_corpus(&corpus, &table, &a.context)?;
    if let Some(p) = &a.csv {
        write_audit_csv(p, &report.contexts)?;
        manifest.output(p);
    }
    if let Some(p) = &a.svg {
        svg::write(p, &svg::histogram(&report.vocab.histogram, "Token length distribution")?)?;
        manifest.output(p);
    }
    emit(&a.out, &report, manifest, started)
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumOutput {
    pub schema: &'static str,
    #[serde(flatten)]
    pub spectrum: SpectrumReport,
    pub rank_definitions: BTreeMap<&'static str, &'static str>,
}

fn rank_definitions() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("effective_rank", "exp(entropy of p_i = s_i / sum_j s_j)"),
        ("effective_rank_energy", "exp(entropy of p_i = s_i^2 / sum_j s_j^2)"),
    ])
}

fn svd(a: &SvdArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("svd", config_of(a)?);
    let m = load_matrix(&a.matrix, &mut manifest)?;
    let spectrum = spectral::singular_values_with(&m, a.center, EXEC)?;
    emit(&a.out, &SpectrumOutput { schema: "anatomy/spectrum/v1", spectrum, rank_definitions: rank_definitions() }, manifest, started)
}

#[derive(Debug, Clone, Serialize)]
pub struct PossimOutput {
    pub schema: &'static str,
    #[serde(flatten)]
    pub similarity: SimilarityReport,
}

fn possim(a: &PossimArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("possim", config_of(a)?);
    let m = load_matrix(&a.matrix, &mut manifest)?;
    let similarity = spectral::positional_similarity(&m, a.split)?;
    if let Some(p) = &a.svg {
        svg::write(p, &svg::heatmap(&similarity.matrix, "Positional cosine similarity")?)?;
        manifest.output(p);
    }
    emit(&a.out, &PossimOutput { schema: "anatomy/possim/v1", similarity }, manifest, started)
}

#[derive(Debug, Clone, Serialize)]
pub struct IdOutput {
    pub schema: &'static str,
    pub rows: usize,
    pub dims: usize,
    pub duplicates_removed: usize,
    pub n_used: usize,
    pub sample_seed: Option<u64>,
    pub estimates: Vec<IdEstimate>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub spread: Vec<IdSpread>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdSpread {
    pub method: intrinsic::IdMethod,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

fn spread_of(method: intrinsic::IdMethod, seeds: Vec<u64>, values: Vec<f64>) -> IdSpread {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    IdSpread { method, seeds, values, mean, std: var.sqrt(), min, max }
}

fn estimate_id(
    m: &EmbeddingMatrix,
    method: MethodArg,
    discard: f64,
    ks: &[usize],
    sample: Option<usize>,
    seed: u64,
) -> CliResult<IdOutput> {
    let full = PointCloud::from_matrix(m)?;
    let (cloud, sample_seed) = match sample {
        Some(0) => return Err(AnatomyError::InvalidArgument("--sample must be at least 1".into()).into()),
        Some(s) if full.n() > s => (full.subsample(s, seed)?, Some(seed)),
        _ => (full.clone(), None),
    };
    let estimates = match method {
        MethodArg::Twonn => vec![intrinsic::twonn(&cloud, discard, TwoNnFit::Regression)?],
        MethodArg::Mle => vec![intrinsic::mle_id(&cloud, ks)?],
        MethodArg::Both => {
            let (t, l) = intrinsic::estimate_both_with(&cloud, discard, ks, EXEC)?;
            vec![t, l]
        }
    };
    Ok(IdOutput {
        schema: "anatomy/id/v1",
        rows: m.rows(),
        dims: m.cols(),
        duplicates_removed: full.duplicates_removed(),
        n_used: cloud.n(),
        sample_seed,
        estimates,
        spread: Vec::new(),
    })
}

fn id(a: &IdArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("id", config_of(a)?);
    let m = load_matrix(&a.matrix, &mut manifest)?;
    if a.repeats == 0 {
        return Err(AnatomyError::InvalidArgument("--repeats must be at least 1".into()).into());
    }
    let mut out = estimate_id(&m, a.method, a.discard, &a.ks, a.sample, a.seed)?;
    if out.sample_seed.is_some() {
        manifest.seeds.push(a.seed);
        if a.repeats > 1 {
            let seeds: Vec<u64> = (a.seed..a.seed + a.repeats).collect();
            let mut values = vec![Vec::new(); out.estimates.len()];
            for &s in &seeds {
                let run = if s == a.seed { out.estimates.clone() } else { estimate_id(&m, a.method, a.discard, &a.ks, a.sample, s)?.estimates };
                for (v, e) in values.iter_mut().zip(&run) {
                    v.push(e.value);
                }
            }
            out.spread = out.estimates.iter().zip(values).map(|(e, v)| spread_of(e.method, seeds.clone(), v)).collect();
            manifest.seeds = seeds;
        }
    }
    emit(&a.out, &out, manifest, started)
}

#[derive(Debug, Clone, Serialize)]
pub struct DistillMetrics {
    pub schema: &'static str,
    pub precision: Precision,
    pub teacher: EncoderConfig,
    pub student: EncoderConfig,
    pub teacher_seed: u64,
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub n_prompts: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub teacher_parameters: usize,
    pub student_parameters: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub final_loss: Option<CurvePoint>,
    pub final_eval: Option<Evaluation>,
    pub evals: Vec<Evaluation>,
}

struct DistillSetup {
    prompts: PromptSet,
    teacher: EncoderConfig,
    student: EncoderConfig,
    train_idx: Vec<usize>,
    heldout_idx: Vec<usize>,
    weights: LossWeights,
    cfg: TrainConfig,
}

fn distill_run<T: Real>(
    a: &DistillArgs,
    s: &DistillSetup,
) -> CliResult<(DistillMetrics, Params<T>, Vec<CurvePoint>)> {
    let teacher = Params::<T>::teacher(&s.teacher, a.teacher_seed)?;
    let targets = teacher_targets(&s.teacher, &teacher, &s.prompts, EXEC)?;
    let task = DistillTask {
        config: s.student,
        prompts: &s.prompts,
        targets: &targets,
        train: s.train_idx.clone(),
        heldout: s.heldout_idx.clone(),
    };
    let init = Params::<T>::init(&s.student, a.seed)?;
    let student_parameters = init.n_parameters();
    let run = train(&task, init, &s.weights, &s.cfg, EXEC)?;
    let metrics = DistillMetrics {
        schema: "anatomy/distill/v1",
        precision: a.precision,
        teacher: s.teacher,
        student: s.student,
        teacher_seed: a.teacher_seed,
        train: s.cfg,
        loss_weights: s.weights,
        n_prompts: s.prompts.len(),
        n_train: s.train_idx.len(),
        n_heldout: s.heldout_idx.len(),
        teacher_parameters: teacher.n_parameters(),
        student_parameters,
        steps_run: run.steps_run,
        stopped_early: run.stopped_early,
        final_loss: run.curve.last().copied(),
        final_eval: run.final_eval().copied(),
        evals: run.evals.clone(),
    };
    Ok((metrics, run.params, run.curve))
}

fn distill(a: &DistillArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("distill", config_of(a)?);
    manifest.seeds = vec![a.seed, a.teacher_seed];
    let table = load_table(&a.merges, &mut manifest)?;
    let corpus = load_corpus(std::slice::from_ref(&a.corpus), &mut manifest)?;
    let texts: Vec<&str> = corpus.records.iter().map(|r| r.text.as_str()).collect();
    if texts.len() < 2 {
        return Err(AnatomyError::Validation("distillation needs at least 2 distinct prompts".into()).into());
    }
    let prompts = PromptSet::build(&table, &texts, a.context)?;
    let n = prompts.len();
    let heldout = a.heldout.unwrap_or(n / 5).max(1);
    if heldout >= n {
        return Err(AnatomyError::InvalidArgument(format!("--heldout {heldout} leaves no training prompts out of {n}")).into());
    }
    let teacher = EncoderConfig {
        n_layers: a.teacher_layers,
        width: a.teacher_width,
        n_heads: a.teacher_heads,
        context: a.context,
        vocab: prompts.vocab.len(),
        out_dim: a.out_dim,
    };
    let student = EncoderConfig { n_layers: a.student_layers, width: a.student_width, n_heads: a.student_heads, ..teacher };
    teacher.validate()?;
    student.validate()?;
    let cfg = TrainConfig {
        lr: a.lr,
        steps: a.steps,
        seed: a.seed,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        warmup: a.warmup,
        schedule: match a.schedule {
            ScheduleArg::Cosine => LrSchedule::Cosine,
            ScheduleArg::Constant => LrSchedule::Constant,
        },
        eval_every: a.eval_every,
        stop_at_cosine: a.stop_at_cosine,
    };
    let setup = DistillSetup {
        prompts,
        teacher,
        student,
        train_idx: (0..n - heldout).collect(),
        heldout_idx: (n - heldout..n).collect(),
        weights: LossWeights::new(a.lambda_cos, a.lambda_consist)?,
        cfg,
    };
    std::fs::create_dir_all(&a.out)?;
    let params_dir = a.out.join("params");
    let (metrics, curve) = match a.precision {
        Precision::F32 => {
            let (m, p, c) = distill_run::<f32>(a, &setup)?;
            write_params(&params_dir, &p)?;
            (m, c)
        }
        Precision::F64 => {
            let (m, p, c) = distill_run::<f64>(a, &setup)?;
            write_params(&params_dir, &p)?;
            (m, c)
        }
    };
    let curve_path = a.out.join("curve.csv");
    write_curve(&curve_path, &curve)?;
    let metrics_path = a.out.join("metrics.json");
    json::write(&metrics_path, &metrics)?;
    manifest.output(&params_dir);
    manifest.output(&curve_path);
    manifest.output(&metrics_path);
    manifest.results = Some(config_of(&metrics)?);
    manifest.finish(started.elapsed(), &a.out.join("manifest.json"))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeOutput {
    pub schema: &'static str,
    pub d: usize,
    pub keys: usize,
    pub eps: f64,
    pub eps_mode: EpsMode,
    pub instance: InstanceArg,
    pub gap: Option<f64>,
    pub seeds: Vec<u64>,
    pub summaries: Vec<ProbeSummary>,
    pub per_seed: Vec<Vec<ProbeReport>>,
}

#[derive(Serialize)]
struct ProbeRow {
    seed: u64,
    sharpness: f64,
    eps: f64,
    input_err: f64,
    logit_err: f64,
    logit_err_inf: f64,
    output_err: f64,
    reduction_factor: Option<f64>,
    argmax_flipped: bool,
    teacher_gap: f64,
    teacher_max_weight: f64,
    query_cosine: f64,
}

pub fn probe_sweep(a: &ProbeArgs) -> CliResult<ProbeOutput> {
    if a.seeds == 0 {
        return Err(AnatomyError::InvalidArgument("--seeds must be at least 1".into()).into());
    }
    let first = *a.sharpness.first().ok_or_else(|| CliError::Usage("no sharpness scales given".into()))?;
    let config = ProbeConfig { d: a.d, n_keys: a.keys, eps: a.eps, sharpness: first, seed: a.seed };
    config.validate()?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let (d, keys, gap, instance) = (a.d, a.keys, a.gap, a.instance);
    let make = move |seed: u64| match instance {
        InstanceArg::Random => ProbeInstance::random(d, keys, seed),
        InstanceArg::Peaked => ProbeInstance::peaked(d, keys, gap, seed),
    };
    let (eps, mode) = (a.eps, a.eps_mode);
    let eps_of = move |q: &[f64]| match mode {
        EpsMode::Absolute => eps,
        EpsMode::Relative => probe::relative_eps(eps, q),
    };
    let per_seed = probe::sweep_seeds(&config, &a.sharpness, &seeds, make, eps_of, EXEC)?;
    Ok(ProbeOutput {
        schema: "anatomy/probe/v1",
        d: a.d,
        keys: a.keys,
        eps: a.eps,
        eps_mode: a.eps_mode,
        instance: a.instance,
        gap: (a.instance == InstanceArg::Peaked).then_some(a.gap),
        summaries: probe::summarize(&per_seed),
        seeds,
        per_seed,
    })
}

fn run_probe(a: &ProbeArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("probe", config_of(a)?);
    let out = probe_sweep(a)?;
    manifest.seeds = out.seeds.clone();
    if let Some(p) = &a.csv {
        let mut w = csv::Writer::from_path(p)?;
        for r in out.per_seed.iter().flatten() {
            w.serialize(ProbeRow {
                seed: r.seed,
                sharpness: r.sharpness,
                eps: r.eps,
                input_err: r.input_err,
                logit_err: r.logit_err,
                logit_err_inf: r.logit_err_inf,
                output_err: r.output_err,
                reduction_factor: r.reduction_factor,
                argmax_flipped: r.argmax_flipped,
                teacher_gap: r.teacher_gap,
                teacher_max_weight: r.teacher_max_weight,
                query_cosine: r.query_cosine,
            })?;
        }
        w.flush()?;
        manifest.output(p);
    }
    emit(&a.out, &out, manifest, started)
}

/// The headline numbers of a bundled report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub n_prompts: usize,
    pub mean_tokens: f64,
    pub info_density: BTreeMap<usize, f64>,
    pub truncation_rate: BTreeMap<usize, f64>,
    pub vocab_coverage: f64,
    pub effective_rank: Option<f64>,
    pub dims_90: Option<usize>,
    pub dims_95: Option<usize>,
    pub positional_ratio: Option<f64>,
    pub twonn: Option<f64>,
    pub mle: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PositionalSummary {
    pub rows: usize,
    pub split: usize,
    pub within_early: f64,
    pub within_late: f64,
    pub ratio: f64,
    pub ratio_defined: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportOutput {
    pub schema: &'static str,
    pub summary: ReportSummary,
    pub audit: AuditOutput,
    pub spectrum: Option<SpectrumReport>,
    pub positional: Option<PositionalSummary>,
    pub intrinsic: Option<IdOutput>,
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("report", config_of(a)?);
    let table = load_table(&a.merges, &mut manifest)?;
    let corpus = load_corpus(&a.corpus, &mut manifest)?;
    let audit = audit_corpus(&corpus, &table, &a.context)?;

    let (spectrum, intrinsic) = match &a.embeddings {
        Some(p) => {
            let m = load_matrix(p, &mut manifest)?;
            let s = spectral::singular_values_with(&m, a.center, EXEC)?;
            let i = estimate_id(&m, MethodArg::Both, a.discard, &a.ks, a.sample, a.seed)?;
            if i.sample_seed.is_some() {
                manifest.seeds.push(a.seed);
            }
            (Some(s), Some(i))
        }
        None => (None, None),
    };
    let similarity = match &a.positional {
        Some(p) => Some(spectral::positional_similarity(&load_matrix(p, &mut manifest)?, a.split)?),
        None => None,
    };

    if let Some(dir) = &a.svg_dir {
        std::fs::create_dir_all(dir)?;
        let hist = dir.join("hist.svg");
        svg::write(&hist, &svg::histogram(&audit.vocab.histogram, "Token length distribution")?)?;
        manifest.output(&hist);
        if let Some(s) = &similarity {
            let heat = dir.join("heatmap.svg");
            svg::write(&heat, &svg::heatmap(&s.matrix, "Positional cosine similarity")?)?;
            manifest.output(&heat);
        }
    }

    let estimate = |m: intrinsic::IdMethod| {
        intrinsic.as_ref().and_then(|i| i.estimates.iter().find(|e| e.method == m).map(|e| e.value))
    };
    let summary = ReportSummary {
        n_prompts: audit.corpus.n_prompts,
        mean_tokens: audit.vocab.mean_tokens,
        info_density: audit.contexts.iter().map(|r| (r.context, r.info_density)).collect(),
        truncation_rate: audit.contexts.iter().map(|r| (r.context, r.truncation_rate)).collect(),
        vocab_coverage: audit.vocab.coverage,
        effective_rank: spectrum.as_ref().map(|s| s.effective_rank),
        dims_90: spectrum.as_ref().and_then(|s| s.dims_for(0.90)),
        dims_95: spectrum.as_ref().and_then(|s| s.dims_for(0.95)),
        positional_ratio: similarity.as_ref().filter(|s| s.ratio_defined).map(|s| s.ratio),
        twonn: estimate(intrinsic::IdMethod::Twonn),
        mle: estimate(intrinsic::IdMethod::Mle),
    };
    let out = ReportOutput {
        schema: "anatomy/report/v1",
        summary,
        audit,
        spectrum,
        positional: similarity.map(|s| PositionalSummary {
            rows: s.rows,
            split: s.split,
            within_early: s.within_early,
            within_late: s.within_late,
            ratio: s.ratio,
            ratio_defined: s.ratio_defined,
        }),
        intrinsic,
    };
    emit(&a.out, &out, manifest, started)
}
