//! Recipe execution: data generation, source pre-training, continued
//! pre-training per arm, fine-tuning and evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fusdom_core::backbone::ModelSnapshot;
use fusdom_core::datagen::{make_domain, Split};
use fusdom_core::dataset::{build_corpus, read_dataset, split_path};
use fusdom_core::downstream::{
    evaluate, finetune_e2e, frozen_probe, EvalResult, FinetuneMode, FinetunedModel,
    LabeledUtterance, Vocab,
};
use fusdom_core::seeds::{hash_str, mix};
use fusdom_core::trainer::{pretrain_from_scratch, run_cp_stage, Strategy};
use fusdom_core::{Error, Tensor};

use crate::checkpoint::{load_checkpoint, save_checkpoint, save_finetuned};
use crate::config::{ExperimentConfig, Recipe};
use crate::error::{CliError, Result};
use crate::report::{write_report, ExperimentReport, Row};

/// File locations under a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn data_dir(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("data")
    }

    pub fn dataset(&self, seed: u64, domain: &str, split: Split) -> PathBuf {
        split_path(&self.data_dir(seed), domain, split)
    }

    pub fn source_checkpoint(&self, seed: u64) -> PathBuf {
        self.seed_dir(seed).join("ckpt").join("source.fusd")
    }

    pub fn cp_checkpoint(&self, seed: u64, arm: Strategy, order: &[String]) -> PathBuf {
        self.seed_dir(seed)
            .join("ckpt")
            .join(format!("{arm}@{}.fusd", order.join("+")))
    }

    /// `lineage` names the backbone: `source` or `{arm}@{order}`.
    pub fn finetuned(&self, seed: u64, lineage: &str, domain: &str, mode: FinetuneMode) -> PathBuf {
        self.seed_dir(seed)
            .join("ft")
            .join(lineage)
            .join(format!("{domain}.{mode}.fusd"))
    }

    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }
}

/// Seed for the CP stage at `position` on `domain`, shared by every arm
/// so that arms see identical masks and batch orders.
pub fn stage_seed(seed: u64, domain: &str, position: usize) -> u64 {
    mix(&[seed, hash_str("cp"), hash_str(domain), position as u64])
}

pub fn pretrain_seed(seed: u64) -> u64 {
    mix(&[seed, hash_str("pretrain")])
}

/// Fine-tuning seed, shared by every arm fine-tuned on `domain`.
pub fn finetune_seed(seed: u64, domain: &str) -> u64 {
    mix(&[seed, hash_str("finetune"), hash_str(domain)])
}

/// Writes every split of every domain a run needs. Returns written paths.
pub fn generate_data(
    config: &ExperimentConfig,
    layout: &Layout,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for domain in config.domains() {
        let spec = make_domain(&domain, &config.data.shape, seed)?;
        paths.extend(build_corpus(
            &spec,
            &config.sizes_for(&domain),
            seed,
            &layout.data_dir(seed),
        )?);
    }
    Ok(paths)
}

pub fn load_unlabeled(path: &Path) -> Result<Vec<Tensor>> {
    Ok(read_dataset(path)?
        .utterances
        .into_iter()
        .map(|u| u.frames)
        .collect())
}

pub fn load_labeled(path: &Path, vocab: &Vocab) -> Result<Vec<LabeledUtterance<f64>>> {
    let data = read_dataset(path)?;
    data.utterances
        .into_iter()
        .map(|u| {
            let seed = u.seed;
            let tokens = u.tokens.ok_or_else(|| {
                Error::Data(format!(
                    "{}: utterance {seed} has no labels",
                    path.display()
                ))
            })?;
            Ok(LabeledUtterance::new(u.frames, tokens, vocab)?)
        })
        .collect()
}

pub fn finetune(
    snapshot: &ModelSnapshot<f64>,
    train: &[LabeledUtterance<f64>],
    vocab: &Vocab,
    config: &ExperimentConfig,
    seed: u64,
    mode: FinetuneMode,
) -> Result<FinetunedModel<f64>> {
    let cfg = config.finetune_config(seed);
    let (model, _) = match mode {
        FinetuneMode::E2e => finetune_e2e(snapshot, train, vocab, &cfg)?,
        FinetuneMode::Probe => frozen_probe(snapshot, train, vocab, &cfg)?,
    };
    Ok(model)
}

struct Corpus {
    train: Vec<LabeledUtterance<f64>>,
    test: Vec<LabeledUtterance<f64>>,
    unlabeled: Vec<Tensor>,
}

#[derive(Clone)]
struct CpResult {
    snapshot: ModelSnapshot<f64>,
    final_loss: Option<f64>,
    elapsed: Duration,
}

#[derive(Clone)]
struct Evaluated {
    result: EvalResult,
    checkpoint: String,
    elapsed: Duration,
}

/// Everything computed for one seed, with memoized CP stages and
/// fine-tuning runs so recipes can share work.
struct SeedRun<'a> {
    config: &'a ExperimentConfig,
    layout: &'a Layout,
    seed: u64,
    vocab: Vocab,
    corpora: HashMap<String, Corpus>,
    source: ModelSnapshot<f64>,
    cp_cache: HashMap<(Strategy, Vec<String>), std::result::Result<CpResult, String>>,
    ft_cache: HashMap<(String, String, FinetuneMode), std::result::Result<Evaluated, String>>,
}

impl<'a> SeedRun<'a> {
    fn prepare(config: &'a ExperimentConfig, layout: &'a Layout, seed: u64) -> Result<Self> {
        generate_data(config, layout, seed)?;
        let vocab = Vocab::synthetic(config.data.shape.vocab_size)?;
        let mut corpora = HashMap::new();
        for domain in config.domains() {
            let corpus = Corpus {
                train: load_labeled(&layout.dataset(seed, &domain, Split::Train), &vocab)?,
                test: load_labeled(&layout.dataset(seed, &domain, Split::Test), &vocab)?,
                unlabeled: load_unlabeled(&layout.dataset(seed, &domain, Split::Pretrain))?,
            };
            corpora.insert(domain, corpus);
        }
        let opts = config.pretext_options();
        let plan = config.pretrain_plan(pretrain_seed(seed));
        let (source, _) = pretrain_from_scratch(
            config.backbone,
            &corpora[&config.data.source].unlabeled,
            &plan,
            &opts,
        )?;
        save_checkpoint(&source, &layout.source_checkpoint(seed))?;
        Ok(Self {
            config,
            layout,
            seed,
            vocab,
            corpora,
            source,
            cp_cache: HashMap::new(),
            ft_cache: HashMap::new(),
        })
    }

    fn cp(&mut self, arm: Strategy, order: &[String]) -> std::result::Result<CpResult, String> {
        let Some((domain, prefix)) = order.split_last() else {
            return Ok(CpResult {
                snapshot: self.source.clone(),
                final_loss: None,
                elapsed: Duration::ZERO,
            });
        };
        let key = (arm, order.to_vec());
        if let Some(hit) = self.cp_cache.get(&key) {
            return hit.clone();
        }
        let result = self.cp(arm, prefix).and_then(|prev| {
            let plan =
                self.config
                    .cp_plan(domain, arm, stage_seed(self.seed, domain, prefix.len()));
            let out = run_cp_stage(
                &prev.snapshot,
                &self.corpora[domain].unlabeled,
                &plan,
                &self.config.pretext_options(),
            )
            .map_err(|e| e.to_string())?;
            save_checkpoint(
                &out.snapshot,
                &self.layout.cp_checkpoint(self.seed, arm, order),
            )
            .map_err(|e| e.to_string())?;
            Ok(CpResult {
                snapshot: out.snapshot,
                final_loss: out.epoch_losses.last().copied().or(prev.final_loss),
                elapsed: prev.elapsed + out.wall_clock,
            })
        });
        self.cp_cache.insert(key, result.clone());
        result
    }

    fn evaluate(
        &mut self,
        lineage: &str,
        snapshot: &ModelSnapshot<f64>,
        domain: &str,
        mode: FinetuneMode,
    ) -> std::result::Result<Evaluated, String> {
        let key = (lineage.to_string(), domain.to_string(), mode);
        if let Some(hit) = self.ft_cache.get(&key) {
            return hit.clone();
        }
        let started = Instant::now();
        let corpus = &self.corpora[domain];
        let path = self.layout.finetuned(self.seed, lineage, domain, mode);
        let result = finetune(
            snapshot,
            &corpus.train,
            &self.vocab,
            self.config,
            finetune_seed(self.seed, domain),
            mode,
        )
        .and_then(|model| {
            save_finetuned(&model, &path)?;
            Ok(evaluate(&model, &corpus.test)?)
        })
        .map(|result| Evaluated {
            result,
            checkpoint: self.layout.relative(&path),
            elapsed: started.elapsed(),
        })
        .map_err(|e| e.to_string());
        self.ft_cache.insert(key, result.clone());
        result
    }

    /// CP with `arm` along `order`, then fine-tune and evaluate on `domain`.
    fn row(
        &mut self,
        recipe: Recipe,
        arm: Strategy,
        order: &[String],
        domain: &str,
        mode: FinetuneMode,
    ) -> Row {
        let mut row = Row::pending(recipe, arm, self.seed, order, domain, mode);
        let cp = match self.cp(arm, order) {
            Ok(cp) => cp,
            Err(e) => {
                row.fail(format!("continued pre-training failed: {e}"));
                return row;
            }
        };
        row.pretext_final_loss = cp.final_loss;
        // No-CP leaves the parameters untouched, so its fine-tuned models
        // are those of the pre-trained model.
        let (lineage, backbone) = match arm {
            Strategy::NoCp => ("source".to_string(), self.source.clone()),
            _ => (format!("{arm}@{}", order.join("+")), cp.snapshot),
        };
        match self.evaluate(&lineage, &backbone, domain, mode) {
            Ok(ev) => {
                row.set_eval(&ev.result);
                row.checkpoint = ev.checkpoint;
                row.wall_clock_s = (cp.elapsed + ev.elapsed).as_secs_f64();
            }
            Err(e) => row.fail(format!("fine-tuning or evaluation failed: {e}")),
        }
        row
    }

    fn recipe_rows(&mut self, recipe: Recipe) -> Vec<Row> {
        let config = self.config;
        let data = &config.data;
        let mut rows = Vec::new();
        match recipe {
            Recipe::R1 => {
                let order = [data.target.clone()];
                for &arm in &config.arms {
                    for &mode in &config.modes {
                        rows.push(self.row(recipe, arm, &order, &data.target, mode));
                    }
                }
            }
            Recipe::R2 => {
                let order = [data.target.clone()];
                for &mode in &config.modes {
                    let source = self.source.clone();
                    let before = self.evaluate("source", &source, &data.source, mode);
                    for &arm in &config.arms {
                        let mut row = self.row(recipe, arm, &order, &data.source, mode);
                        match (&before, row.wer) {
                            (Ok(b), Some(after)) => {
                                row.wer_before_cp = Some(b.result.wer);
                                row.forgetting_delta = Some(after - b.result.wer);
                            }
                            (Err(e), _) => row.fail(format!("pre-CP baseline failed: {e}")),
                            _ => {}
                        }
                        rows.push(row);
                    }
                }
            }
            Recipe::R3 => {
                let (a, b) = (data.stream[0].clone(), data.stream[1].clone());
                let domains = [data.source.clone(), a.clone(), b.clone()];
                for order in [[a.clone(), b.clone()], [b, a]] {
                    for &arm in &config.arms {
                        for domain in &domains {
                            for &mode in &config.modes {
                                rows.push(self.row(recipe, arm, &order, domain, mode));
                            }
                        }
                    }
                }
            }
        }
        rows
    }
}

/// Rows a recipe produces for one seed, all marked failed with `reason`.
fn failed_rows(config: &ExperimentConfig, seed: u64, reason: &str) -> Vec<Row> {
    let data = &config.data;
    let mut rows = Vec::new();
    let mut push = |recipe, arm, order: &[String], domain: &str, mode| {
        let mut row = Row::pending(recipe, arm, seed, order, domain, mode);
        row.fail(reason);
        rows.push(row);
    };
    for &recipe in &config.recipes {
        for &arm in &config.arms {
            for &mode in &config.modes {
                match recipe {
                    Recipe::R1 => push(recipe, arm, &[data.target.clone()], &data.target, mode),
                    Recipe::R2 => push(recipe, arm, &[data.target.clone()], &data.source, mode),
                    Recipe::R3 => {
                        let (a, b) = (&data.stream[0], &data.stream[1]);
                        for order in [[a.clone(), b.clone()], [b.clone(), a.clone()]] {
                            for d in [&data.source, a, b] {
                                push(recipe, arm, &order, d, mode);
                            }
                        }
                    }
                }
            }
        }
    }
    rows
}

/// Runs every configured recipe for every seed, writes the echoed
/// config, checkpoints and the report into `config.out`, and returns
/// the report. Stage failures become failed rows rather than errors.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let layout = Layout::new(&config.out);
    std::fs::create_dir_all(&layout.root).map_err(|e| CliError::io(&layout.root, e))?;
    let echo = layout.root.join("config.toml");
    std::fs::write(&echo, config.to_toml_string()).map_err(|e| CliError::io(&echo, e))?;

    let mut rows = Vec::new();
    for &seed in &config.seeds {
        match SeedRun::prepare(config, &layout, seed) {
            Ok(mut run) => {
                for &recipe in &config.recipes {
                    rows.extend(run.recipe_rows(recipe));
                }
            }
            Err(e) => rows.extend(failed_rows(
                config,
                seed,
                &format!("seed setup failed: {e}"),
            )),
        }
    }
    let report = ExperimentReport::new(config.clone(), rows);
    write_report(&report, &layout.root)?;
    Ok(report)
}

/// Loads the pre-trained model of `seed`, failing if `pretrain` has not
/// been run.
pub fn load_source(layout: &Layout, seed: u64) -> Result<ModelSnapshot<f64>> {
    Ok(load_checkpoint(&layout.source_checkpoint(seed))?)
}
