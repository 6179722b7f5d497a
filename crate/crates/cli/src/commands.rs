//! One function per subcommand. Each writes into its run directory and
//! appends a manifest line there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stylepo::corpus::{
    content_id, default_suite, generate_synthetic_corpus, load_corpus, regroup_segments, segment_text, Corpus, Split,
    StyleSpec,
};
use stylepo::eval::{
    align_units, document_units, evaluate_run, pair_units, read_records, resampled_paired_ttest, write_records, MetricsReport,
    StyleModels, TTestResult, TransferRecord,
};
use stylepo::paraphraser::{
    build_pseudo_parallel, neutralize, read_paraphrase_pairs, read_transfer_examples, train_paraphraser,
    write_paraphrase_pairs,
    write_transfer_examples,
};
use stylepo::po::preference::preference_train;
use stylepo::po::{
    attach_exemplars, build_po_dataset, build_preference_pairs, generate_candidates, ppo_train, write_pairs, Algo,
};
use stylepo::policy::checkpoint::{load_policy, save_policy, CONFIG_FILE};
use stylepo::policy::tokenizer::Tokenizer;
use stylepo::policy::train::{train_per_style, train_sft, ExemplarPool};
use stylepo::policy::{GenerationConfig, PolicyMode, PolicyModel};
use stylepo::reward::{train_style_classifier, train_style_embedder, RewardBackend};
use stylepo::seed::derive_seed;
use stylepo::Error;

use crate::config::RunConfig;
use crate::manifest::Recorder;
use crate::{AlgoArg, Cli, CliError, Command, Stage};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const STYLES_FILE: &str = "styles.json";
pub const PARAPHRASE_FILE: &str = "paraphrase.jsonl";
pub const TRANSFER_FILE: &str = "transfer.jsonl";
pub const MODEL_DIR: &str = "model";
pub const REWARD_DIR: &str = "reward";
pub const CANDIDATES_FILE: &str = "candidates.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const SEGMENTS_FILE: &str = "segments.json";
pub const REPORT_FILE: &str = "report.json";

/// Metrics compared against a baseline, when both reports have them.
const TESTED_METRICS: [&str; 5] = ["toward", "away", "confusion", "content", "oracle_confusion"];

struct Ctx<'a> {
    config: RunConfig,
    seed: u64,
    dir: PathBuf,
    rec: Recorder,
    cli: &'a Cli,
}

/// Runs the parsed command and returns its run directory.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let seed = config.seed;
    let dir = run_dir(cli);
    fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let config_value = serde_json::to_value(&config).map_err(Error::from)?;
    let mut rec = Recorder::new(cli.command.name(), config_value, seed);
    if let Some(p) = &cli.config {
        rec.input(p)?;
    }
    let mut ctx = Ctx {
        config,
        seed,
        dir: dir.clone(),
        rec,
        cli,
    };
    match &cli.command {
        Command::GenCorpus => gen_corpus(&mut ctx)?,
        Command::BuildData { corpus } => build_data(&mut ctx, corpus)?,
        Command::Train { stage, data, corpus } => train(&mut ctx, *stage, data.as_deref(), corpus.as_deref())?,
        Command::TrainPo {
            algo,
            sft,
            reward,
            data,
        } => train_po(&mut ctx, *algo, sft, reward, data)?,
        Command::Transfer { .. } => transfer(&mut ctx)?,
        Command::Eval { .. } => eval(&mut ctx)?,
    }
    ctx.rec.finish(&dir)?;
    Ok(dir)
}

fn run_dir(cli: &Cli) -> PathBuf {
    if let Some(d) = &cli.run_dir {
        return d.clone();
    }
    let base = std::env::var_os("STYLEPO_RUN_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    base.join(cli.command.name())
}

impl Ctx<'_> {
    fn out(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.rec.output(&p);
        p
    }

    fn stage_seed(&self, key: &str) -> u64 {
        derive_seed(self.seed, key)
    }

    fn corpus(&mut self, path: &Path) -> Result<Corpus, CliError> {
        self.rec.input(path)?;
        Ok(load_corpus(path)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(Error::from)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn gen_corpus(ctx: &mut Ctx) -> Result<(), CliError> {
    let mut suite = default_suite();
    let wanted = &ctx.config.corpus.styles;
    if !wanted.is_empty() {
        for w in wanted {
            if !suite.iter().any(|s| &s.style == w) {
                return Err(Error::UnknownStyle(w.clone()).into());
            }
        }
        suite.retain(|s| wanted.contains(&s.style));
    }
    let corpus = generate_synthetic_corpus(&suite, ctx.config.corpus.per_style, ctx.stage_seed("corpus"))?;
    corpus.write_jsonl(&ctx.out(CORPUS_FILE))?;
    write_json(&ctx.out(STYLES_FILE), &suite)?;
    Ok(())
}

fn build_data(ctx: &mut Ctx, corpus: &Path) -> Result<(), CliError> {
    let corpus = ctx.corpus(corpus)?;
    let (pairs, examples) = build_pseudo_parallel(&corpus, Split::Train)?;
    write_paraphrase_pairs(&ctx.out(PARAPHRASE_FILE), &pairs)?;
    write_transfer_examples(&ctx.out(TRANSFER_FILE), &examples)?;
    Ok(())
}

fn train(ctx: &mut Ctx, stage: Stage, data: Option<&Path>, corpus: Option<&Path>) -> Result<(), CliError> {
    let missing = |flag: &str| CliError::Config(format!("this stage needs --{flag}"));
    match stage {
        Stage::SftParaphrase => {
            let data = data.ok_or_else(|| missing("data"))?;
            ctx.rec.input(data)?;
            let pairs = read_paraphrase_pairs(data)?;
            let (model, log) = train_paraphraser(&pairs, &ctx.config.paraphrase, ctx.stage_seed("sft-paraphrase"))?;
            save_policy(&ctx.out(MODEL_DIR), &model, &log)?;
        }
        Stage::SftTransfer => {
            let data = data.ok_or_else(|| missing("data"))?;
            ctx.rec.input(data)?;
            let examples = read_transfer_examples(data)?;
            let seed = ctx.stage_seed("sft-transfer");
            if ctx.config.transfer.per_style_models {
                for (style, (model, log)) in train_per_style(&examples, &ctx.config.sft, seed)? {
                    save_policy(&ctx.out(MODEL_DIR).join(style), &model, &log)?;
                }
            } else {
                let mode = ctx.config.transfer.policy_mode();
                let (model, log) = train_sft(&examples, mode, &ctx.config.sft, seed)?;
                save_policy(&ctx.out(MODEL_DIR), &model, &log)?;
            }
        }
        Stage::RewardClassifier => {
            let corpus = ctx.corpus(corpus.ok_or_else(|| missing("corpus"))?)?;
            let clf = train_style_classifier(&corpus, &ctx.config.reward, ctx.stage_seed("reward-classifier"))?;
            RewardBackend::Classifier(clf).save(&ctx.out(REWARD_DIR))?;
        }
        Stage::RewardEmbedder => {
            let corpus = ctx.corpus(corpus.ok_or_else(|| missing("corpus"))?)?;
            let emb = train_style_embedder(&corpus, &ctx.config.reward, ctx.stage_seed("reward-embedder"))?;
            RewardBackend::embedding(emb, &corpus)?.save(&ctx.out(REWARD_DIR))?;
        }
    }
    Ok(())
}

fn train_po(ctx: &mut Ctx, algo: AlgoArg, sft: &Path, reward: &Path, data: &Path) -> Result<(), CliError> {
    let algo = match algo {
        AlgoArg::Ppo => Algo::Ppo,
        AlgoArg::Dpo => Algo::Dpo,
        AlgoArg::Cpo => Algo::Cpo,
    };
    let config = ctx.config.po_config(algo)?;
    for p in [sft, reward, data] {
        ctx.rec.input(p)?;
    }
    let reference = match TransferModels::load(sft)? {
        TransferModels::Shared(m) => m,
        TransferModels::PerStyle(_) => {
            return Err(CliError::Config("policy optimization needs a single transfer model, not per-style models".into()))
        }
    };
    let backend = RewardBackend::load(reward)?;
    let examples = read_transfer_examples(data)?;
    let mut prompts = build_po_dataset(&examples)?;
    let pool = ExemplarPool::from_examples(&examples);
    attach_exemplars(&mut prompts, reference.mode, &pool, ctx.stage_seed("po/exemplars"))?;
    let seed = ctx.stage_seed(&format!("po/{}", algo.as_str()));
    let mut policy = reference.clone();
    match algo {
        Algo::Ppo => {
            let run = ppo_train(&mut policy, &reference, &backend, &prompts, &config, seed)?;
            write_json(&ctx.out(STATS_FILE), &run)?;
        }
        Algo::Dpo | Algo::Cpo => {
            let candidates = generate_candidates(
                &reference,
                &prompts,
                config.candidates_per_prompt,
                &config.gen,
                ctx.stage_seed("po/candidates"),
            )?;
            write_json(&ctx.out(CANDIDATES_FILE), &candidates)?;
            let (pairs, pair_stats) =
                build_preference_pairs(&prompts, &candidates, &backend, &config.reward, config.pair_margin)?;
            write_pairs(&ctx.out(PAIRS_FILE), &pairs)?;
            let frozen = (algo == Algo::Dpo).then_some(&reference);
            let epochs = preference_train(algo, &mut policy, frozen, &pairs, &config, seed)?;
            #[derive(Serialize)]
            struct Stats<'a> {
                pairs: &'a stylepo::po::PairStats,
                epochs: &'a [stylepo::po::PreferenceEpochStats],
            }
            write_json(
                &ctx.out(STATS_FILE),
                &Stats {
                    pairs: &pair_stats,
                    epochs: &epochs,
                },
            )?;
        }
    }
    save_policy(&ctx.out(MODEL_DIR), &policy, &[])?;
    Ok(())
}

/// One line of `transfer --input`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputText {
    id: Option<String>,
    text: String,
    style: String,
    split: Option<Split>,
}

fn read_inputs(path: &Path) -> Result<Vec<InputText>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: InputText = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Where the exemplars for a target style come from in individual mode.
enum Exemplars {
    None,
    Fixed(Vec<String>),
    Pool(ExemplarPool),
}

fn transfer(ctx: &mut Ctx) -> Result<(), CliError> {
    let Command::Transfer {
        input,
        split,
        paraphraser,
        rule_neutralizer: _,
        model,
        target,
        exemplars,
        corpus,
    } = &ctx.cli.command
    else {
        unreachable!("dispatched on the transfer command")
    };
    let split: Option<Split> = split.as_deref().map(str::parse).transpose()?;
    for p in [Some(input), paraphraser.as_ref(), Some(model)].into_iter().flatten() {
        ctx.rec.input(p)?;
    }
    // None selects the rule-based neutralizer
    let para = paraphraser.as_deref().map(load_policy).transpose()?;
    if let Some(para) = &para {
        if para.mode != PolicyMode::Plain {
            return Err(CliError::Config(format!(
                "--paraphraser must be a plain-prompt model, got {}",
                para.mode.name()
            )));
        }
    }
    let models = TransferModels::load(model)?;
    let mode = models.mode();
    let mut styles = models.styles();
    let exemplar_source = match mode {
        PolicyMode::Individual { .. } => match (exemplars, corpus) {
            (Some(path), _) => {
                if target.is_none() {
                    return Err(CliError::Config("--exemplars needs --target".into()));
                }
                ctx.rec.input(path)?;
                Exemplars::Fixed(read_json(path)?)
            }
            (None, Some(path)) => {
                let c = ctx.corpus(path)?;
                styles = c.styles().to_vec();
                let mut pool = ExemplarPool::new();
                for item in c.split_items(Split::Train) {
                    pool.add(&item.style, &item.id, &item.text);
                }
                Exemplars::Pool(pool)
            }
            (None, None) => {
                return Err(CliError::Config("individual mode needs --exemplars or --corpus".into()));
            }
        },
        _ => Exemplars::None,
    };
    if let Some(t) = target {
        if !styles.is_empty() && !styles.contains(t) {
            return Err(Error::UnknownStyle(t.clone()).into());
        }
    }
    let n_exemplars = match mode {
        PolicyMode::Individual { n_exemplars } => n_exemplars,
        _ => 0,
    };
    let segment_len = ctx.config.transfer.segment_tokens;
    let gen = ctx.config.generation.clone();
    let gen_seed = ctx.stage_seed("transfer");

    let mut records = Vec::new();
    let mut segments_per_record = BTreeMap::new();
    for item in read_inputs(input)? {
        let id = item.id.clone().unwrap_or_else(|| content_id(&item.style, &item.text));
        let item_split = item.split.unwrap_or_else(|| Split::from_id(&id));
        if split.is_some_and(|s| s != item_split) {
            continue;
        }
        let target_style = match target {
            Some(t) => t.clone(),
            None => next_style(&styles, &item.style)?,
        };
        if target_style == item.style {
            log::warn!("input {id} is already in style {target_style}; skipped");
            continue;
        }
        let refs = match &exemplar_source {
            Exemplars::None => Vec::new(),
            Exemplars::Fixed(v) => v.clone(),
            Exemplars::Pool(pool) => pool.draw(&target_style, &id, n_exemplars, gen_seed, &id)?,
        };
        let pieces = if item.text.len() > segment_len {
            segment_text(&item.text, segment_len)
        } else {
            vec![item.text.clone()]
        };
        let policy = models.for_style(&target_style)?;
        let budget = neutral_budget(policy, &target_style, &refs)?;
        let mut neutral = Vec::with_capacity(pieces.len());
        let mut out = Vec::with_capacity(pieces.len());
        for (k, piece) in pieces.iter().enumerate() {
            let piece = Tokenizer::strip_markers(piece);
            let paraphrased = match &para {
                Some(para) => {
                    let prompt = para.format_prompt(&piece, None, &[])?;
                    let max_new = gen.max_new_tokens.unwrap_or(2 * piece.len().max(4)).min(budget);
                    let g = GenerationConfig {
                        max_new_tokens: Some(max_new),
                        ..gen.with_seed(derive_seed(gen_seed, &format!("paraphrase/{id}/{k}")))
                    };
                    Tokenizer::strip_markers(&para.generate(&prompt, &g)?)
                }
                None => neutralize(&piece),
            };
            let n = truncate_bytes(paraphrased, budget);
            let prompt = policy.format_prompt(&n, Some(&target_style), &refs)?;
            let g = gen.with_seed(derive_seed(gen_seed, &format!("transfer/{id}/{k}")));
            out.push(policy.generate(&prompt, &g)?);
            neutral.push(n);
        }
        segments_per_record.insert(id.clone(), pieces.len());
        records.push(TransferRecord {
            id,
            source_text: item.text,
            transferred_text: regroup_segments(&out),
            source_style: item.style,
            target_style,
            neutral: Some(regroup_segments(&neutral)),
        });
    }
    if records.is_empty() {
        log::warn!("no inputs were transferred");
    }
    write_records(&ctx.out(RECORDS_FILE), &records)?;
    write_json(&ctx.out(SEGMENTS_FILE), &segments_per_record)?;
    Ok(())
}

/// A shared transfer model, or one plain-prompt model per target style.
enum TransferModels {
    Shared(PolicyModel),
    PerStyle(BTreeMap<String, PolicyModel>),
}

impl TransferModels {
    /// A checkpoint directory, or a directory of checkpoints named by style.
    fn load(dir: &Path) -> Result<Self, CliError> {
        if !dir.is_dir() || dir.join(CONFIG_FILE).exists() {
            return Ok(TransferModels::Shared(load_policy(dir)?));
        }
        let mut models = BTreeMap::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                let style = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                models.insert(style, load_policy(&path)?);
            }
        }
        if models.is_empty() {
            return Ok(TransferModels::Shared(load_policy(dir)?));
        }
        Ok(TransferModels::PerStyle(models))
    }

    fn mode(&self) -> PolicyMode {
        match self {
            TransferModels::Shared(m) => m.mode,
            TransferModels::PerStyle(_) => PolicyMode::Plain,
        }
    }

    fn styles(&self) -> Vec<String> {
        match self {
            TransferModels::Shared(m) => m.tokenizer.styles().to_vec(),
            TransferModels::PerStyle(models) => models.keys().cloned().collect(),
        }
    }

    fn for_style(&self, style: &str) -> Result<&PolicyModel, CliError> {
        match self {
            TransferModels::Shared(m) => Ok(m),
            TransferModels::PerStyle(models) => {
                models.get(style).ok_or_else(|| Error::UnknownStyle(style.to_string()).into())
            }
        }
    }
}

/// Longest paraphrase that still leaves room for one generated token in the
/// transfer prompt.
fn neutral_budget(policy: &PolicyModel, target: &str, exemplars: &[String]) -> Result<usize, CliError> {
    let overhead = policy
        .tokenizer
        .encode_prompt(&policy.format_prompt("", Some(target), exemplars)?)?
        .len();
    let context = policy.context_length();
    if overhead + 2 >= context {
        return Err(Error::ContextOverflow {
            id: None,
            len: overhead,
            context,
        }
        .into());
    }
    Ok(context - overhead - 2)
}

/// Cuts at a char boundary; lossy decoding can make a sample longer in bytes
/// than the number of tokens generated.
fn truncate_bytes(mut text: String, max: usize) -> String {
    if text.len() > max {
        let mut cut = max;
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        text.truncate(cut);
    }
    text
}

/// The style after `style` in sorted order, wrapping around.
fn next_style(styles: &[String], style: &str) -> Result<String, CliError> {
    let mut sorted = styles.to_vec();
    sorted.sort();
    let i = sorted
        .iter()
        .position(|s| s == style)
        .ok_or_else(|| Error::UnknownStyle(style.to_string()))?;
    Ok(sorted[(i + 1) % sorted.len()].clone())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    #[serde(flatten)]
    report: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<MetricsReport>,
    /// Paired tests of this run against the baseline, per metric.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    significance: BTreeMap<String, TTestResult>,
}

fn eval(ctx: &mut Ctx) -> Result<(), CliError> {
    let Command::Eval {
        records,
        reward,
        corpus,
        oracle,
        baseline,
    } = &ctx.cli.command
    else {
        unreachable!("dispatched on the eval command")
    };
    for p in [records, reward] {
        ctx.rec.input(p)?;
    }
    let backend = RewardBackend::load(reward)?;
    let target_texts: BTreeMap<String, Vec<String>> = match (&backend, corpus) {
        (RewardBackend::Embedding { .. }, Some(path)) => {
            let c = ctx.corpus(path)?;
            let mut by_style: BTreeMap<String, Vec<String>> = BTreeMap::new();
            for item in c.split_items(Split::Val) {
                by_style.entry(item.style.clone()).or_default().push(item.text.clone());
            }
            by_style
        }
        (RewardBackend::Embedding { .. }, None) => {
            return Err(CliError::Config("an embedding reward needs --corpus for target style texts".into()));
        }
        (RewardBackend::Classifier(_), _) => BTreeMap::new(),
    };
    let models = match &backend {
        RewardBackend::Classifier(classifier) => StyleModels::Community { classifier },
        RewardBackend::Embedding { embedder, .. } => StyleModels::Individual {
            embedder,
            target_texts: &target_texts,
        },
    };
    let suite: Option<Vec<StyleSpec>> = match oracle {
        Some(p) => {
            ctx.rec.input(p)?;
            Some(read_json(p)?)
        }
        None => None,
    };
    let system = read_records(records)?;
    let report = evaluate_run(&system, models, suite.as_deref())?;
    let mut significance = BTreeMap::new();
    let base_report = match baseline {
        Some(p) => {
            ctx.rec.input(p)?;
            let base_records = read_records(p)?;
            let base = evaluate_run(&base_records, models, suite.as_deref())?;
            for metric in TESTED_METRICS {
                if metric == "oracle_confusion" && (report.oracle_confusion.is_none() || base.oracle_confusion.is_none())
                {
                    continue;
                }
                // documents are the units for community styles, style pairs for individual ones
                let (ua, ub) = match models {
                    StyleModels::Community { classifier } => (
                        document_units(&system, classifier, suite.as_deref(), metric)?,
                        document_units(&base_records, classifier, suite.as_deref(), metric)?,
                    ),
                    StyleModels::Individual { .. } => (pair_units(&report, metric)?, pair_units(&base, metric)?),
                };
                let (a, b) = align_units(&ua, &ub)?;
                let seed = ctx.stage_seed(&format!("eval/{metric}"));
                significance.insert(metric.to_string(), resampled_paired_ttest(&a, &b, &ctx.config.eval, seed)?);
            }
            Some(base)
        }
        None => None,
    };
    write_json(
        &ctx.out(REPORT_FILE),
        &EvalOutput {
            report,
            baseline: base_report,
            significance,
        },
    )?;
    Ok(())
}
