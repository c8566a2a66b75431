//! Training and evaluation drivers.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use relrl_core::a2c::{evaluate, Domain, Environment, EpisodeResult, EpochMetrics, Hyperparams, Trainer, METRICS_HEADER};
use relrl_core::gnn::GnnConfig;
use relrl_core::graph::GraphShape;
use relrl_core::numerics::{load_checkpoint, Manifest, ParameterStore};
use relrl_core::policy::{ActionSchema, PolicyModel};
use relrl_envs::blockworld::{self, BlockWorld, BlockWorldDomain, ORACLE_MAX_BLOCKS};
use relrl_envs::sokoban::{self, generate_level, Sokoban, SokobanDomain};
use relrl_envs::sysadmin::{self, SysAdmin, SysAdminDomain};

use crate::config::{apply_hyperparam, DomainKind, DomainSpec, RunConfig};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.csv";

pub fn shape_of(kind: DomainKind) -> GraphShape {
    match kind {
        DomainKind::BlockWorld => blockworld::shape(),
        DomainKind::Sokoban => sokoban::shape(),
        DomainKind::SysAdminS | DomainKind::SysAdminM => sysadmin::shape(),
    }
}

pub fn schemas_of(kind: DomainKind) -> Vec<ActionSchema> {
    match kind {
        DomainKind::BlockWorld => blockworld::schemas(),
        DomainKind::Sokoban => sokoban::schemas(),
        DomainKind::SysAdminS => sysadmin::schemas(sysadmin::Mode::Single),
        DomainKind::SysAdminM => sysadmin::schemas(sysadmin::Mode::Multi),
    }
}

pub fn model_of(kind: DomainKind, hp: &Hyperparams) -> PolicyModel {
    PolicyModel::new(
        GnnConfig {
            shape: shape_of(kind),
            emb_size: hp.emb_size,
            mp_steps: hp.mp_steps,
        },
        schemas_of(kind),
    )
}

/// Reads every level from a Boxoban file or from each `.txt` file of a directory.
pub fn load_levels(path: &Path) -> Result<Vec<Sokoban>> {
    let mut files = Vec::new();
    if path.is_dir() {
        for entry in fs::read_dir(path).with_context(|| format!("reading {}", path.display()))? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "txt") {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let mut levels = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
        levels.extend(Sokoban::parse_collection(&text).with_context(|| format!("parsing {}", f.display()))?);
    }
    if levels.is_empty() {
        bail!("no levels found in {}", path.display());
    }
    Ok(levels)
}

fn sokoban_domain(spec: &DomainSpec) -> Result<SokobanDomain> {
    let DomainSpec::Sokoban { width, height, boxes, levels } = spec else {
        unreachable!("called with a Sokoban spec")
    };
    Ok(match levels {
        Some(path) => SokobanDomain::Levels(Arc::new(load_levels(path)?)),
        None => SokobanDomain::Generated {
            width: *width,
            height: *height,
            boxes: *boxes,
        },
    })
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Trains per `cfg`, writing `config.txt`, `metrics.csv` and checkpoints under `cfg.out`.
pub fn train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainSummary> {
    match &cfg.domain {
        DomainSpec::BlockWorld { n } => train_with(BlockWorldDomain { n: *n }, cfg, on_epoch),
        DomainSpec::SysAdmin { n, mode } => train_with(SysAdminDomain { n: *n, mode: *mode }, cfg, on_epoch),
        spec @ DomainSpec::Sokoban { .. } => train_with(sokoban_domain(spec)?, cfg, on_epoch),
    }
}

fn train_with<D: Domain>(domain: D, cfg: &RunConfig, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainSummary> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    fs::write(cfg.out.join("config.txt"), cfg.render())?;
    let mut metrics = File::create(cfg.out.join(METRICS_FILE))?;
    writeln!(metrics, "{METRICS_HEADER}")?;

    let mut manifest = Manifest::default();
    manifest.set("domain", cfg.domain.kind());
    manifest.set("size", cfg.domain.size_label());
    manifest.set("seed", cfg.seed);

    let mut trainer = Trainer::new(domain, cfg.hp.clone(), cfg.seed)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for e in 1..=cfg.epochs {
        let m = trainer.train_epoch()?;
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        on_epoch(&m);
        if cfg.checkpoint_every > 0 && e % cfg.checkpoint_every == 0 {
            trainer.save(&cfg.out.join(format!("checkpoint-{e:04}")), &manifest)?;
        }
        let stop = cfg.stop_solved.is_some_and(|s| m.solved_fraction >= s);
        epochs.push(m);
        if stop {
            break;
        }
    }
    let checkpoint = cfg.out.join(CHECKPOINT_DIR);
    trainer.save(&checkpoint, &manifest)?;
    Ok(TrainSummary { epochs, checkpoint })
}

/// A trained policy restored from a checkpoint directory.
#[derive(Clone, Debug)]
pub struct Policy {
    pub kind: DomainKind,
    /// Domain and size the policy was trained on.
    pub trained_on: DomainSpec,
    pub hp: Hyperparams,
    pub model: PolicyModel,
    pub params: ParameterStore<f32>,
}

impl Policy {
    pub fn load(dir: &Path) -> Result<Self> {
        let (params, manifest) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
        let field = |k: &str| manifest.get(k).ok_or_else(|| anyhow!("checkpoint manifest lacks `{k}`"));
        let kind: DomainKind = field("domain")?.parse()?;
        let trained_on = DomainSpec::parse(kind, field("size")?)?;
        let mut hp = trained_on.default_hyperparams();
        for (k, v) in &manifest.0 {
            apply_hyperparam(&mut hp, k, v)?;
        }
        let model = model_of(kind, &hp);
        let policy = Self {
            kind,
            trained_on,
            hp,
            model,
            params,
        };
        policy.check_parameters()?;
        Ok(policy)
    }

    /// Wraps in-memory parameters, e.g. straight from a trainer.
    pub fn from_parts(trained_on: DomainSpec, hp: Hyperparams, params: ParameterStore<f32>) -> Result<Self> {
        let kind = trained_on.kind();
        let policy = Self {
            kind,
            model: model_of(kind, &hp),
            trained_on,
            hp,
            params,
        };
        policy.check_parameters()?;
        Ok(policy)
    }

    fn check_parameters(&self) -> Result<()> {
        let expected: ParameterStore<f32> = self.model.init_params(&mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, p) in expected.iter() {
            let got = self
                .params
                .get(name)
                .map_err(|_| anyhow!("checkpoint does not fit the {} model: missing `{name}`", self.kind))?;
            if got.shape != p.shape {
                bail!(
                    "checkpoint does not fit the {} model: `{name}` has shape {:?}, expected {:?}",
                    self.kind,
                    got.shape,
                    p.shape
                );
            }
        }
        if self.params.len() != expected.len() {
            bail!("checkpoint does not fit the {} model: unexpected extra parameters", self.kind);
        }
        Ok(())
    }

    /// The action schemas must match the evaluation domain's.
    pub fn ensure_compatible(&self, spec: &DomainSpec) -> Result<()> {
        if schemas_of(spec.kind()) != self.model.schemas || shape_of(spec.kind()) != self.model.gnn.shape {
            bail!(
                "schema mismatch: checkpoint was trained on {} and cannot act in {}",
                self.kind,
                spec.kind()
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub episodes: usize,
    pub greedy: bool,
    pub seed: u64,
    /// Overrides the trained step limit.
    pub step_limit: Option<usize>,
    /// Compute BlockWorld optimality when the oracle allows it.
    pub optimality: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 1000,
            greedy: false,
            seed: 0,
            step_limit: None,
            optimality: true,
        }
    }
}

pub const REPORT_HEADER: &str =
    "domain,size,episodes,greedy,solved_fraction,mean_steps,mean_return,optimality,baseline_return,normalized_score";

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub domain: DomainKind,
    pub size: String,
    pub episodes: usize,
    pub greedy: bool,
    pub solved_fraction: f64,
    pub mean_steps: f64,
    pub mean_return: f64,
    /// BlockWorld only, when the oracle bound allows.
    pub optimality: Option<f64>,
    /// SysAdmin only.
    pub baseline_return: Option<f64>,
    pub normalized_score: Option<f64>,
}

impl Report {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.domain,
            self.size,
            self.episodes,
            self.greedy,
            self.solved_fraction,
            self.mean_steps,
            self.mean_return,
            opt(self.optimality),
            opt(self.baseline_return),
            opt(self.normalized_score)
        )
    }
}

pub fn write_reports(path: &Path, reports: &[Report]) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(f, "{REPORT_HEADER}")?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

fn instance_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Evaluates `policy` on `opts.episodes` fresh instances of `spec`.
///
/// Instances come from stream 0 of `opts.seed`; episode `i` uses streams
/// `2i+1` (transitions) and `2i+2` (actions), so a report is a pure function
/// of the parameters, the domain and the options.
pub fn evaluate_policy(policy: &Policy, spec: &DomainSpec, opts: &EvalOptions) -> Result<Report> {
    policy.ensure_compatible(spec)?;
    spec.validate()?;
    let limit = opts.step_limit.unwrap_or(policy.hp.step_limit);
    let mut rng = instance_rng(opts.seed);
    fn play<E: Environment>(instances: Vec<E>, policy: &Policy, limit: usize, opts: &EvalOptions) -> Result<Vec<EpisodeResult>> {
        Ok(evaluate(instances, &policy.params, &policy.model, limit, opts.greedy, opts.seed)?)
    }
    let mut report = Report {
        domain: spec.kind(),
        size: spec.size_label(),
        episodes: opts.episodes,
        greedy: opts.greedy,
        solved_fraction: 0.0,
        mean_steps: 0.0,
        mean_return: 0.0,
        optimality: None,
        baseline_return: None,
        normalized_score: None,
    };
    let results: Vec<EpisodeResult> = match spec {
        DomainSpec::BlockWorld { n } => {
            let instances: Vec<BlockWorld> = (0..opts.episodes).map(|_| BlockWorld::generate(*n, &mut rng)).collect();
            // Already-solved draws finish at step 0 and are optimal.
            let pending: Vec<BlockWorld> = instances.iter().filter(|b| !b.is_solved()).cloned().collect();
            let mut played = play(pending, policy, limit, opts)?.into_iter();
            let results: Vec<EpisodeResult> = instances
                .iter()
                .map(|b| match b.is_solved() {
                    true => EpisodeResult {
                        total_reward: 0.0,
                        steps: 0,
                        solved: true,
                    },
                    false => played.next().expect("one result per pending instance"),
                })
                .collect();
            if opts.optimality && *n <= ORACLE_MAX_BLOCKS {
                let mut ratios = Vec::with_capacity(results.len());
                for (b, r) in instances.iter().zip(&results) {
                    ratios.push(match (r.solved, r.steps) {
                        (false, _) => 0.0,
                        (true, 0) => 1.0,
                        (true, steps) => b.optimal_steps()? as f64 / steps as f64,
                    });
                }
                report.optimality = Some(mean(ratios.into_iter()));
            }
            results
        }
        DomainSpec::Sokoban { width, height, boxes, levels } => {
            let instances: Vec<Sokoban> = match levels {
                Some(path) => {
                    let all = load_levels(path)?;
                    (0..opts.episodes).map(|_| all[rng.gen_range(0..all.len())].clone()).collect()
                }
                None => (0..opts.episodes)
                    .map(|_| generate_level(*width, *height, *boxes, &mut rng))
                    .collect::<Result<_, _>>()?,
            };
            play(instances, policy, limit, opts)?
        }
        DomainSpec::SysAdmin { n, mode } => {
            let instances: Vec<SysAdmin> = (0..opts.episodes)
                .map(|_| SysAdmin::generate(*n, *mode, &mut rng))
                .collect::<Result<_, _>>()?;
            let baseline = baseline_returns(&instances, limit, opts.seed)?;
            let results = play(instances, policy, limit, opts)?;
            let b = mean(baseline.into_iter());
            let agent = mean(results.iter().map(|r| r.total_reward));
            report.baseline_return = Some(b);
            report.normalized_score = Some(agent / b);
            results
        }
    };
    report.solved_fraction = results.iter().filter(|r| r.solved).count() as f64 / results.len().max(1) as f64;
    report.mean_steps = mean(results.iter().map(|r| r.steps as f64));
    report.mean_return = mean(results.iter().map(|r| r.total_reward));
    Ok(report)
}

/// Returns of the normalization baseline, with the same per-episode streams as [`evaluate`].
pub fn baseline_returns(instances: &[SysAdmin], step_limit: usize, seed: u64) -> Result<Vec<f64>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut env = inst.clone();
            let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
            env_rng.set_stream(2 * i as u64 + 1);
            let mut choice_rng = ChaCha8Rng::seed_from_u64(seed);
            choice_rng.set_stream(2 * i as u64 + 2);
            let mut total = 0.0;
            for _ in 0..step_limit {
                let action = env.baseline_action(&mut choice_rng);
                total += env.step(&action, &mut env_rng)?.reward;
            }
            Ok(total)
        })
        .collect()
}

/// Evaluates the same policy across several sizes of its domain.
pub fn generalize(policy: &Policy, kind: DomainKind, sizes: &[String], opts: &EvalOptions) -> Result<Vec<Report>> {
    sizes
        .iter()
        .map(|s| evaluate_policy(policy, &DomainSpec::parse(kind, s)?, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn tiny(domain: &str, size: &str, out: &Path) -> RunConfig {
        let kv: BTreeMap<String, String> = [
            ("domain", domain),
            ("size", size),
            ("p_envs", "4"),
            ("epoch", "3"),
            ("epochs", "2"),
            ("emb_size", "8"),
            ("mp_steps", "1"),
            ("seed", "3"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let mut cfg = RunConfig::resolve(&kv, &BTreeMap::new()).unwrap();
        cfg.out = out.to_path_buf();
        cfg
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_reports() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("blockworld", "3", dir.path());
        let summary = train(&cfg, |_| {}).unwrap();
        assert_eq!(summary.epochs.len(), 2);
        let loaded = Policy::load(&summary.checkpoint).unwrap();
        let opts = EvalOptions {
            episodes: 20,
            ..EvalOptions::default()
        };
        let from_disk = evaluate_policy(&loaded, &cfg.domain, &opts).unwrap();
        let in_memory = Policy::from_parts(cfg.domain.clone(), cfg.hp.clone(), loaded.params.clone()).unwrap();
        assert_eq!(evaluate_policy(&in_memory, &cfg.domain, &opts).unwrap(), from_disk);
        assert!(from_disk.optimality.is_some());
    }

    #[test]
    fn incompatible_checkpoint_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("sysadmin_s", "5", dir.path());
        let summary = train(&cfg, |_| {}).unwrap();
        let policy = Policy::load(&summary.checkpoint).unwrap();
        let err = evaluate_policy(&policy, &DomainSpec::parse(DomainKind::SysAdminM, "5").unwrap(), &EvalOptions::default())
            .unwrap_err();
        assert!(err.to_string().contains("schema mismatch"), "{err}");
        let report = evaluate_policy(
            &policy,
            &DomainSpec::parse(DomainKind::SysAdminS, "6").unwrap(),
            &EvalOptions {
                episodes: 4,
                ..EvalOptions::default()
            },
        )
        .unwrap();
        assert!(report.baseline_return.unwrap() > 0.0);
        assert_eq!(report.solved_fraction, 0.0);
    }

    #[test]
    fn baseline_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst: Vec<SysAdmin> = (0..3)
            .map(|_| SysAdmin::generate(6, sysadmin::Mode::Single, &mut rng).unwrap())
            .collect();
        assert_eq!(baseline_returns(&inst, 20, 9).unwrap(), baseline_returns(&inst, 20, 9).unwrap());
    }
}
