//! Flat `key = value` run configuration.
//!
//! Values are layered: domain defaults, then a config file, then command-line
//! overrides. Every hyperparameter is a key under its field name; `q_range`
//! takes `low,high`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use relrl_core::a2c::Hyperparams;
use relrl_envs::sysadmin::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainKind {
    BlockWorld,
    Sokoban,
    SysAdminS,
    SysAdminM,
}

impl DomainKind {
    pub fn name(self) -> &'static str {
        match self {
            DomainKind::BlockWorld => "blockworld",
            DomainKind::Sokoban => "sokoban",
            DomainKind::SysAdminS => "sysadmin_s",
            DomainKind::SysAdminM => "sysadmin_m",
        }
    }
}

impl FromStr for DomainKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "blockworld" | "bw" => DomainKind::BlockWorld,
            "sokoban" => DomainKind::Sokoban,
            "sysadmin_s" | "sysadmin-s" => DomainKind::SysAdminS,
            "sysadmin_m" | "sysadmin-m" => DomainKind::SysAdminM,
            _ => bail!("unknown domain `{s}` (expected blockworld, sokoban, sysadmin_s or sysadmin_m)"),
        })
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A domain together with its instance size.
#[derive(Clone, Debug, PartialEq)]
pub enum DomainSpec {
    BlockWorld {
        n: usize,
    },
    Sokoban {
        width: usize,
        height: usize,
        boxes: usize,
        /// Directory or file of Boxoban levels; overrides the generator.
        levels: Option<PathBuf>,
    },
    SysAdmin {
        n: usize,
        mode: Mode,
    },
}

impl DomainSpec {
    /// Sizes are `N` for BlockWorld and SysAdmin, `WxH/B` for Sokoban.
    pub fn parse(kind: DomainKind, size: &str) -> Result<Self> {
        let size = size.trim();
        let int = |s: &str| s.trim().parse::<usize>().with_context(|| format!("bad size `{s}`"));
        Ok(match kind {
            DomainKind::BlockWorld => DomainSpec::BlockWorld { n: int(size)? },
            DomainKind::SysAdminS => DomainSpec::SysAdmin {
                n: int(size)?,
                mode: Mode::Single,
            },
            DomainKind::SysAdminM => DomainSpec::SysAdmin {
                n: int(size)?,
                mode: Mode::Multi,
            },
            DomainKind::Sokoban => {
                let (grid, boxes) = size
                    .split_once('/')
                    .ok_or_else(|| anyhow!("Sokoban sizes look like 10x10/4, got `{size}`"))?;
                let (w, h) = grid
                    .split_once(['x', 'X'])
                    .ok_or_else(|| anyhow!("Sokoban sizes look like 10x10/4, got `{size}`"))?;
                DomainSpec::Sokoban {
                    width: int(w)?,
                    height: int(h)?,
                    boxes: int(boxes)?,
                    levels: None,
                }
            }
        })
    }

    pub fn kind(&self) -> DomainKind {
        match self {
            DomainSpec::BlockWorld { .. } => DomainKind::BlockWorld,
            DomainSpec::Sokoban { .. } => DomainKind::Sokoban,
            DomainSpec::SysAdmin { mode: Mode::Single, .. } => DomainKind::SysAdminS,
            DomainSpec::SysAdmin { mode: Mode::Multi, .. } => DomainKind::SysAdminM,
        }
    }

    pub fn size_label(&self) -> String {
        match self {
            DomainSpec::BlockWorld { n } | DomainSpec::SysAdmin { n, .. } => n.to_string(),
            DomainSpec::Sokoban { width, height, boxes, .. } => format!("{width}x{height}/{boxes}"),
        }
    }

    pub fn default_hyperparams(&self) -> Hyperparams {
        match self {
            DomainSpec::BlockWorld { .. } => Hyperparams::blockworld(),
            DomainSpec::Sokoban { .. } => Hyperparams::sokoban(),
            DomainSpec::SysAdmin { n, mode } => Hyperparams::sysadmin(*n, *mode == Mode::Multi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DomainSpec::BlockWorld { n } if *n == 0 => bail!("BlockWorld needs at least one block"),
            DomainSpec::SysAdmin { n, .. } if *n < 4 => bail!("SysAdmin needs at least 4 computers"),
            DomainSpec::Sokoban { width, height, boxes, levels: None } if *width < 3 || *height < 3 || *boxes == 0 => {
                bail!("Sokoban needs a grid of at least 3x3 and one box")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub hp: Hyperparams,
    pub seed: u64,
    pub epochs: usize,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub out: PathBuf,
    /// Stop once an epoch's solved fraction reaches this value.
    pub stop_solved: Option<f64>,
}

const HP_KEYS: [&str; 17] = [
    "p_envs",
    "rho",
    "gamma",
    "epoch",
    "step_limit",
    "mp_steps",
    "emb_size",
    "lr_start",
    "lr_end",
    "grad_max_norm",
    "q_range",
    "q_low",
    "q_high",
    "alpha_v",
    "alpha_h_start",
    "alpha_h_end",
    "weight_decay",
];
const RUN_KEYS: [&str; 8] = ["domain", "size", "levels", "seed", "epochs", "checkpoint_every", "out", "stop_solved"];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| anyhow!("`{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => bail!("`{key}`: expected a boolean, got `{value}`"),
    }
}

/// Applies one hyperparameter key. Returns `false` for keys that are not hyperparameters.
pub fn apply_hyperparam(hp: &mut Hyperparams, key: &str, value: &str) -> Result<bool> {
    match key {
        "p_envs" => hp.p_envs = parse_value(key, value)?,
        "rho" => hp.rho = parse_value(key, value)?,
        "gamma" => hp.gamma = parse_value(key, value)?,
        "epoch" => hp.epoch = parse_value(key, value)?,
        "step_limit" => hp.step_limit = parse_value(key, value)?,
        "mp_steps" => hp.mp_steps = parse_value(key, value)?,
        "emb_size" => hp.emb_size = parse_value(key, value)?,
        "lr_start" => hp.lr_start = parse_value(key, value)?,
        "lr_end" => hp.lr_end = parse_value(key, value)?,
        "grad_max_norm" => hp.grad_max_norm = parse_value(key, value)?,
        "q_low" => hp.q_range.0 = parse_value(key, value)?,
        "q_high" => hp.q_range.1 = parse_value(key, value)?,
        "q_range" => {
            let (lo, hi) = value
                .trim_matches(|c| c == '[' || c == ']' || c == '(' || c == ')')
                .split_once(',')
                .ok_or_else(|| anyhow!("`q_range`: expected `low,high`, got `{value}`"))?;
            hp.q_range = (parse_value(key, lo.trim())?, parse_value(key, hi.trim())?);
        }
        "alpha_v" => hp.alpha_v = parse_value(key, value)?,
        "alpha_h_start" => hp.alpha_h_start = parse_value(key, value)?,
        "alpha_h_end" => hp.alpha_h_end = parse_value(key, value)?,
        "weight_decay" => hp.weight_decay = parse_value(key, value)?,
        "entropy_normalization" => hp.entropy_normalization = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Layers `file` over the domain defaults and `overrides` over the file.
    ///
    /// `domain` and `size` must appear in one of the two sources.
    pub fn resolve(file: &BTreeMap<String, String>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| overrides.get(k).or_else(|| file.get(k)).map(String::as_str);
        for key in file.keys().chain(overrides.keys()) {
            if !HP_KEYS.contains(&key.as_str()) && !RUN_KEYS.contains(&key.as_str()) && key != "entropy_normalization" {
                bail!("unknown configuration key `{key}`");
            }
        }
        let kind: DomainKind = get("domain").ok_or_else(|| anyhow!("no `domain` configured"))?.parse()?;
        let mut domain = DomainSpec::parse(kind, get("size").ok_or_else(|| anyhow!("no `size` configured"))?)?;
        if let (DomainSpec::Sokoban { levels, .. }, Some(path)) = (&mut domain, get("levels")) {
            *levels = Some(PathBuf::from(path));
        }
        domain.validate()?;

        let mut hp = domain.default_hyperparams();
        for source in [file, overrides] {
            for (k, v) in source {
                apply_hyperparam(&mut hp, k, v)?;
            }
        }
        hp.validate()?;

        Ok(Self {
            domain,
            hp,
            seed: get("seed").map(|v| parse_value("seed", v)).transpose()?.unwrap_or(0),
            epochs: get("epochs").map(|v| parse_value("epochs", v)).transpose()?.unwrap_or(30),
            checkpoint_every: get("checkpoint_every")
                .map(|v| parse_value("checkpoint_every", v))
                .transpose()?
                .unwrap_or(0),
            out: PathBuf::from(get("out").unwrap_or("runs/default")),
            stop_solved: get("stop_solved").map(|v| parse_value("stop_solved", v)).transpose()?,
        })
    }

    /// Every key with its resolved value, in the config file format.
    pub fn render(&self) -> String {
        let hp = &self.hp;
        let mut lines = vec![
            format!("domain = {}", self.domain.kind()),
            format!("size = {}", self.domain.size_label()),
        ];
        if let DomainSpec::Sokoban { levels: Some(p), .. } = &self.domain {
            lines.push(format!("levels = {}", p.display()));
        }
        lines.extend([
            format!("seed = {}", self.seed),
            format!("epochs = {}", self.epochs),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("out = {}", self.out.display()),
            format!("p_envs = {}", hp.p_envs),
            format!("rho = {}", hp.rho),
            format!("gamma = {}", hp.gamma),
            format!("epoch = {}", hp.epoch),
            format!("step_limit = {}", hp.step_limit),
            format!("mp_steps = {}", hp.mp_steps),
            format!("emb_size = {}", hp.emb_size),
            format!("lr_start = {}", hp.lr_start),
            format!("lr_end = {}", hp.lr_end),
            format!("grad_max_norm = {}", hp.grad_max_norm),
            format!("q_range = {},{}", hp.q_range.0, hp.q_range.1),
            format!("alpha_v = {}", hp.alpha_v),
            format!("alpha_h_start = {}", hp.alpha_h_start),
            format!("alpha_h_end = {}", hp.alpha_h_end),
            format!("weight_decay = {}", hp.weight_decay),
            format!("entropy_normalization = {}", hp.entropy_normalization),
        ]);
        if let Some(s) = self.stop_solved {
            lines.push(format!("stop_solved = {s}"));
        }
        lines.join("\n") + "\n"
    }
}
