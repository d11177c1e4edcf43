//! Experiment configuration: a flat `key = value` text format with `#`
//! comments, no nesting. Unknown keys are rejected so typos fail loudly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use spsg_core::adversarial::AttackKind;
use spsg_core::oracle::QueryMode;
use spsg_core::prada::PradaParams;
use spsg_core::proxy::{Grad2Mode, ProbLossVariant, StealConfig};
use spsg_core::spgq::LabelFlipPolicy;
use spsg_core::superpixel::SegSpec;
use spsg_core::{Error, Result};

/// Parses the flat config text into a key→value map. Later assignments to
/// the same key are rejected rather than silently overriding.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("config line {}: expected `key = value`", lineno + 1))
        })?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::Format(format!(
                "config line {}: duplicate key {k:?}",
                lineno + 1
            )));
        }
    }
    Ok(map)
}

/// Where the images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSpec {
    /// IDX ubyte image + label pair (MNIST layout).
    Idx { images: PathBuf, labels: PathBuf },
    /// One or more CIFAR-10 binary batch files.
    Cifar10 { batches: Vec<PathBuf> },
    /// Directory of PPM/PGM files with an optional labels.csv.
    PnmDir { dir: PathBuf },
}

/// Victim / proxy architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ArchSpec {
    Cnn { c1: usize, c2: usize },
    Mlp { hidden: Vec<usize> },
}

impl ArchSpec {
    pub fn to_config_string(&self) -> String {
        match self {
            ArchSpec::Cnn { c1, c2 } => format!("cnn {c1} {c2}"),
            ArchSpec::Mlp { hidden } => {
                let hs: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp {}", hs.join(" "))
            }
        }
    }

    pub fn from_config_string(s: &str) -> Result<Self> {
        let mut toks = s.split_whitespace();
        let kind = toks
            .next()
            .ok_or_else(|| Error::Format("empty arch spec".into()))?;
        let nums: Result<Vec<usize>> = toks
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad arch size {t:?}")))
            })
            .collect();
        let nums = nums?;
        match kind {
            "cnn" => {
                if nums.len() != 2 {
                    return Err(Error::Format("cnn arch needs two channel counts".into()));
                }
                Ok(ArchSpec::Cnn { c1: nums[0], c2: nums[1] })
            }
            "mlp" => {
                if nums.is_empty() {
                    return Err(Error::Format("mlp arch needs hidden sizes".into()));
                }
                Ok(ArchSpec::Mlp { hidden: nums })
            }
            other => Err(Error::Format(format!("unknown arch {other:?}"))),
        }
    }
}

/// Full experiment description. One query mode applies to every stage.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    /// Sizes of the disjoint victim-train / attack / test splits.
    pub split_train: usize,
    pub split_attack: usize,
    pub split_test: usize,
    pub split_seed: u64,

    pub victim_arch: ArchSpec,
    pub victim_epochs: usize,
    pub victim_batch_size: usize,
    pub victim_learning_rate: f64,
    pub victim_momentum: f64,
    pub victim_decay_factor: f64,
    pub victim_decay_period: usize,
    pub victim_seed: u64,

    pub mode: QueryMode,
    pub round_confidence: bool,

    pub seg: SegSpec,
    pub epsilon: f64,
    pub policy: LabelFlipPolicy,
    pub grad_fraction: f64,

    pub proxy_arch: ArchSpec,
    pub proxy_seed: u64,
    pub steal: StealConfig,

    pub prada_enabled: bool,
    pub prada: PradaParams,

    pub attacks: Vec<AttackKind>,
    pub attack_epsilon: f64,
    pub attack_alpha: f64,
    pub attack_steps: usize,

    /// Gradient records rendered as SG-Maps in the report.
    pub sgmap_count: usize,

    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSpec::Idx {
                images: PathBuf::from("data/digits-images-idx3-ubyte"),
                labels: PathBuf::from("data/digits-labels-idx1-ubyte"),
            },
            split_train: 700,
            split_attack: 1000,
            split_test: 97,
            split_seed: 0,
            victim_arch: ArchSpec::Cnn { c1: 8, c2: 16 },
            victim_epochs: 30,
            victim_batch_size: 32,
            victim_learning_rate: 0.05,
            victim_momentum: 0.9,
            victim_decay_factor: 0.1,
            victim_decay_period: 20,
            victim_seed: 7,
            mode: QueryMode::Probability,
            round_confidence: true,
            seg: SegSpec::Grid { block: 2 },
            epsilon: 1e-5,
            policy: LabelFlipPolicy::SurrogateLog,
            grad_fraction: 1.0,
            proxy_arch: ArchSpec::Cnn { c1: 8, c2: 16 },
            proxy_seed: 11,
            steal: StealConfig::default(),
            prada_enabled: false,
            prada: PradaParams::default(),
            attacks: vec![AttackKind::Fgsm, AttackKind::Bim, AttackKind::Pgd],
            attack_epsilon: 10.0 / 255.0,
            attack_alpha: 2.0 / 255.0,
            attack_steps: 10,
            sgmap_count: 4,
            seed: 0,
            out: PathBuf::from("out"),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::Format(format!("config key {key:?}: bad value {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Format(format!(
            "config key {key:?}: expected true/false, got {v:?}"
        ))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = parse_kv(text)?;
        let cfg = Self::from_map(&mut map)?;
        if let Some(k) = map.keys().next() {
            return Err(Error::Format(format!("unknown config key {k:?}")));
        }
        Ok(cfg)
    }

    fn from_map(map: &mut BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        macro_rules! take {
            ($key:expr, $slot:expr) => {
                if let Some(v) = map.remove($key) {
                    $slot = parse_as($key, &v)?;
                }
            };
        }
        macro_rules! take_bool {
            ($key:expr, $slot:expr) => {
                if let Some(v) = map.remove($key) {
                    $slot = parse_bool($key, &v)?;
                }
            };
        }

        if let Some(fmt) = map.remove("data.format") {
            cfg.data = match fmt.as_str() {
                "idx" => DataSpec::Idx {
                    images: PathBuf::from(map.remove("data.images").ok_or_else(|| {
                        Error::Format("data.format = idx needs data.images".into())
                    })?),
                    labels: PathBuf::from(map.remove("data.labels").ok_or_else(|| {
                        Error::Format("data.format = idx needs data.labels".into())
                    })?),
                },
                "cifar10" => {
                    let batches = map.remove("data.batches").ok_or_else(|| {
                        Error::Format("data.format = cifar10 needs data.batches".into())
                    })?;
                    DataSpec::Cifar10 {
                        batches: batches.split(',').map(|p| PathBuf::from(p.trim())).collect(),
                    }
                }
                "pnm-dir" => DataSpec::PnmDir {
                    dir: PathBuf::from(map.remove("data.dir").ok_or_else(|| {
                        Error::Format("data.format = pnm-dir needs data.dir".into())
                    })?),
                },
                other => {
                    return Err(Error::Format(format!("unknown data.format {other:?}")));
                }
            };
        }

        take!("split.train", cfg.split_train);
        take!("split.attack", cfg.split_attack);
        take!("split.test", cfg.split_test);
        take!("split.seed", cfg.split_seed);

        if let Some(v) = map.remove("victim.arch") {
            cfg.victim_arch = ArchSpec::from_config_string(&v)?;
        }
        take!("victim.epochs", cfg.victim_epochs);
        take!("victim.batch_size", cfg.victim_batch_size);
        take!("victim.learning_rate", cfg.victim_learning_rate);
        take!("victim.momentum", cfg.victim_momentum);
        take!("victim.decay_factor", cfg.victim_decay_factor);
        take!("victim.decay_period", cfg.victim_decay_period);
        take!("victim.seed", cfg.victim_seed);

        if let Some(v) = map.remove("oracle.mode") {
            cfg.mode = QueryMode::from_name(&v)
                .ok_or_else(|| Error::Format(format!("unknown oracle.mode {v:?}")))?;
        }
        take_bool!("oracle.round_confidence", cfg.round_confidence);

        if let Some(v) = map.remove("seg") {
            cfg.seg = SegSpec::from_header_string(&v)?;
        }
        take!("spgq.epsilon", cfg.epsilon);
        if let Some(v) = map.remove("spgq.policy") {
            cfg.policy = LabelFlipPolicy::from_name(&v)
                .ok_or_else(|| Error::Format(format!("unknown spgq.policy {v:?}")))?;
        }
        take!("spgq.grad_fraction", cfg.grad_fraction);

        if let Some(v) = map.remove("proxy.arch") {
            cfg.proxy_arch = ArchSpec::from_config_string(&v)?;
        }
        take!("proxy.seed", cfg.proxy_seed);
        take!("steal.epochs", cfg.steal.epochs);
        take!("steal.batch_size", cfg.steal.batch_size);
        take!("steal.learning_rate", cfg.steal.learning_rate);
        take!("steal.momentum", cfg.steal.momentum);
        take!("steal.decay_factor", cfg.steal.decay_factor);
        take!("steal.decay_period", cfg.steal.decay_period);
        take!("steal.beta", cfg.steal.beta);
        take!("steal.grad1_samples", cfg.steal.grad1_samples);
        if let Some(v) = map.remove("steal.prob_loss") {
            cfg.steal.prob_loss = ProbLossVariant::from_name(&v)
                .ok_or_else(|| Error::Format(format!("unknown steal.prob_loss {v:?}")))?;
        }
        if let Some(v) = map.remove("steal.grad2_mode") {
            cfg.steal.grad2_mode = Grad2Mode::from_name(&v)
                .ok_or_else(|| Error::Format(format!("unknown steal.grad2_mode {v:?}")))?;
        }
        take_bool!("steal.grad2_use_purified", cfg.steal.grad2_use_purified);

        take_bool!("prada.enabled", cfg.prada_enabled);
        take!("prada.delta", cfg.prada.delta);
        take!("prada.warmup", cfg.prada.warmup);
        take!("prada.threshold_coef", cfg.prada.threshold_coef);
        take!("prada.w_window", cfg.prada.w_window);

        if let Some(v) = map.remove("attack.kinds") {
            let kinds: Option<Vec<AttackKind>> = v
                .split(',')
                .map(|t| AttackKind::from_name(t.trim()))
                .collect();
            cfg.attacks =
                kinds.ok_or_else(|| Error::Format(format!("bad attack.kinds {v:?}")))?;
        }
        take!("attack.epsilon", cfg.attack_epsilon);
        take!("attack.alpha", cfg.attack_alpha);
        take!("attack.steps", cfg.attack_steps);

        take!("sgmap.count", cfg.sgmap_count);
        take!("seed", cfg.seed);
        if let Some(v) = map.remove("out") {
            cfg.out = PathBuf::from(v);
        }

        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidArgument("spgq.epsilon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.grad_fraction) {
            return Err(Error::InvalidArgument(
                "spgq.grad_fraction must lie in [0,1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.steal.beta) {
            return Err(Error::InvalidArgument("steal.beta must lie in [0,1)".into()));
        }
        if self.split_train == 0 || self.split_attack == 0 || self.split_test == 0 {
            return Err(Error::InvalidArgument("split sizes must be positive".into()));
        }
        Ok(())
    }

    /// Canonical serialization: every key, one per line, sorted layout.
    /// `from_text(cfg.to_config_string())` reproduces the config exactly.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        match &self.data {
            DataSpec::Idx { images, labels } => {
                writeln!(s, "data.format = idx").unwrap();
                writeln!(s, "data.images = {}", images.display()).unwrap();
                writeln!(s, "data.labels = {}", labels.display()).unwrap();
            }
            DataSpec::Cifar10 { batches } => {
                writeln!(s, "data.format = cifar10").unwrap();
                let bs: Vec<String> = batches.iter().map(|b| b.display().to_string()).collect();
                writeln!(s, "data.batches = {}", bs.join(",")).unwrap();
            }
            DataSpec::PnmDir { dir } => {
                writeln!(s, "data.format = pnm-dir").unwrap();
                writeln!(s, "data.dir = {}", dir.display()).unwrap();
            }
        }
        writeln!(s, "split.train = {}", self.split_train).unwrap();
        writeln!(s, "split.attack = {}", self.split_attack).unwrap();
        writeln!(s, "split.test = {}", self.split_test).unwrap();
        writeln!(s, "split.seed = {}", self.split_seed).unwrap();
        writeln!(s, "victim.arch = {}", self.victim_arch.to_config_string()).unwrap();
        writeln!(s, "victim.epochs = {}", self.victim_epochs).unwrap();
        writeln!(s, "victim.batch_size = {}", self.victim_batch_size).unwrap();
        writeln!(s, "victim.learning_rate = {}", self.victim_learning_rate).unwrap();
        writeln!(s, "victim.momentum = {}", self.victim_momentum).unwrap();
        writeln!(s, "victim.decay_factor = {}", self.victim_decay_factor).unwrap();
        writeln!(s, "victim.decay_period = {}", self.victim_decay_period).unwrap();
        writeln!(s, "victim.seed = {}", self.victim_seed).unwrap();
        writeln!(s, "oracle.mode = {}", self.mode.name()).unwrap();
        writeln!(s, "oracle.round_confidence = {}", self.round_confidence).unwrap();
        writeln!(s, "seg = {}", self.seg.to_header_string()).unwrap();
        writeln!(s, "spgq.epsilon = {}", self.epsilon).unwrap();
        writeln!(s, "spgq.policy = {}", self.policy.name()).unwrap();
        writeln!(s, "spgq.grad_fraction = {}", self.grad_fraction).unwrap();
        writeln!(s, "proxy.arch = {}", self.proxy_arch.to_config_string()).unwrap();
        writeln!(s, "proxy.seed = {}", self.proxy_seed).unwrap();
        writeln!(s, "steal.epochs = {}", self.steal.epochs).unwrap();
        writeln!(s, "steal.batch_size = {}", self.steal.batch_size).unwrap();
        writeln!(s, "steal.learning_rate = {}", self.steal.learning_rate).unwrap();
        writeln!(s, "steal.momentum = {}", self.steal.momentum).unwrap();
        writeln!(s, "steal.decay_factor = {}", self.steal.decay_factor).unwrap();
        writeln!(s, "steal.decay_period = {}", self.steal.decay_period).unwrap();
        writeln!(s, "steal.beta = {}", self.steal.beta).unwrap();
        writeln!(s, "steal.grad1_samples = {}", self.steal.grad1_samples).unwrap();
        writeln!(s, "steal.prob_loss = {}", self.steal.prob_loss.name()).unwrap();
        writeln!(s, "steal.grad2_mode = {}", self.steal.grad2_mode.name()).unwrap();
        writeln!(s, "steal.grad2_use_purified = {}", self.steal.grad2_use_purified).unwrap();
        writeln!(s, "prada.enabled = {}", self.prada_enabled).unwrap();
        writeln!(s, "prada.delta = {}", self.prada.delta).unwrap();
        writeln!(s, "prada.warmup = {}", self.prada.warmup).unwrap();
        writeln!(s, "prada.threshold_coef = {}", self.prada.threshold_coef).unwrap();
        writeln!(s, "prada.w_window = {}", self.prada.w_window).unwrap();
        let kinds: Vec<&str> = self.attacks.iter().map(|k| k.name()).collect();
        writeln!(s, "attack.kinds = {}", kinds.join(",")).unwrap();
        writeln!(s, "attack.epsilon = {}", self.attack_epsilon).unwrap();
        writeln!(s, "attack.alpha = {}", self.attack_alpha).unwrap();
        writeln!(s, "attack.steps = {}", self.attack_steps).unwrap();
        writeln!(s, "sgmap.count = {}", self.sgmap_count).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "out = {}", self.out.display()).unwrap();
        s
    }

    /// Paths of every input file named by the data spec.
    pub fn input_paths(&self) -> Vec<PathBuf> {
        match &self.data {
            DataSpec::Idx { images, labels } => vec![images.clone(), labels.clone()],
            DataSpec::Cifar10 { batches } => batches.clone(),
            DataSpec::PnmDir { dir } => vec![dir.clone()],
        }
    }
}
