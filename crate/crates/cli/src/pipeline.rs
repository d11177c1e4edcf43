//! Experiment orchestration: each stage is a standalone function backing
//! one CLI subcommand; `run_experiment` chains them and writes a
//! self-describing report directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spsg_core::adversarial::{transfer_asr, AttackSpec};
use spsg_core::dataset::{self, Dataset};
use spsg_core::eval;
use spsg_core::nn::{self, Network, OptimizerState, Targets};
use spsg_core::oracle::VictimOracle;
use spsg_core::prada::PradaMonitor;
use spsg_core::proxy::{self, ValSet};
use spsg_core::sgmap;
use spsg_core::spgq::{self, QuerySet};
use spsg_core::{Error, Result, Tensor};

use crate::config::{ArchSpec, DataSpec, ExperimentConfig};

/// Prefixes errors with the failing stage's name so pipeline aborts are
/// attributable.
pub fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Format(format!("stage {name}: {e}")))
}

// ---------------------------------------------------------------------------
// Data loading and splitting

pub struct Splits {
    pub train: Dataset,
    pub attack: Dataset,
    pub test: Dataset,
}

pub fn load_dataset(spec: &DataSpec) -> Result<Dataset> {
    match spec {
        DataSpec::Idx { images, labels } => dataset::load_idx(images, labels),
        DataSpec::Cifar10 { batches } => {
            let refs: Vec<&Path> = batches.iter().map(|p| p.as_path()).collect();
            dataset::load_cifar10_bin(&refs)
        }
        DataSpec::PnmDir { dir } => {
            let tagged = dataset::load_pnm_dir(dir)?;
            if tagged.is_empty() {
                return Err(Error::Empty(format!("no PNM images in {}", dir.display())));
            }
            let labels_csv = dir.join("labels.csv");
            let (ids, images): (Vec<String>, Vec<Tensor>) = tagged.into_iter().unzip();
            // Unlabeled directories get placeholder labels and
            // num_classes = 0, the "no labels" marker.
            let (labels, num_classes) = if labels_csv.exists() {
                let text = fs::read_to_string(&labels_csv)?;
                let mut by_id = std::collections::BTreeMap::new();
                for line in text.lines().filter(|l| !l.trim().is_empty()) {
                    let (id, lab) = line.split_once(',').ok_or_else(|| {
                        Error::Format("labels.csv lines must be `id,label`".into())
                    })?;
                    let lab: usize = lab.trim().parse().map_err(|_| {
                        Error::Format(format!("labels.csv: bad label {lab:?}"))
                    })?;
                    by_id.insert(id.trim().to_string(), lab);
                }
                let labels: Result<Vec<usize>> = ids
                    .iter()
                    .map(|id| {
                        by_id.get(id).copied().ok_or_else(|| {
                            Error::Format(format!("labels.csv missing id {id:?}"))
                        })
                    })
                    .collect();
                let labels = labels?;
                let k = labels.iter().max().map_or(0, |m| m + 1);
                (labels, k)
            } else {
                (vec![0; ids.len()], 0)
            };
            Ok(Dataset { ids, images, labels, num_classes })
        }
    }
}

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let full = load_dataset(&cfg.data)?;
    let parts = dataset::split_indices(
        full.len(),
        &[cfg.split_train, cfg.split_attack, cfg.split_test],
        cfg.split_seed,
    )?;
    Ok(Splits {
        train: full.subset(&parts[0]),
        attack: full.subset(&parts[1]),
        test: full.subset(&parts[2]),
    })
}

// ---------------------------------------------------------------------------
// Victim training

pub fn build_network(arch: &ArchSpec, seed: u64, input_shape: &[usize], k: usize) -> Network {
    match arch {
        ArchSpec::Cnn { c1, c2 } => nn::random_cnn(seed, input_shape, *c1, *c2, k),
        ArchSpec::Mlp { hidden } => nn::random_mlp(seed, input_shape, hidden, k),
    }
}

/// Supervised momentum-SGD training on hard labels. Returns per-epoch
/// (mean loss, test accuracy) rows.
pub fn train_victim(
    cfg: &ExperimentConfig,
    splits: &Splits,
) -> Result<(Network, Vec<(usize, f64, f64)>)> {
    if splits.train.num_classes == 0 {
        return Err(Error::InvalidArgument("victim training needs labels".into()));
    }
    let labels = &splits.train.labels;
    let test_labels = &splits.test.labels;
    let input_shape = splits.train.images[0].shape().to_vec();
    let k = splits.train.num_classes;
    let mut net = build_network(&cfg.victim_arch, cfg.victim_seed, &input_shape, k);
    let mut opt = OptimizerState::new(
        cfg.victim_learning_rate,
        cfg.victim_momentum,
        cfg.victim_decay_factor,
        cfg.victim_decay_period,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.victim_seed ^ 0x5eed);
    let n = splits.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    for epoch in 0..cfg.victim_epochs {
        opt.set_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.victim_batch_size.max(1)) {
            let batch = splits.train.batch(chunk)?;
            let targets = Targets::Labels(chunk.iter().map(|&i| labels[i]).collect());
            loss_sum += net.train_step(&batch, &targets, &mut opt)?;
            batches += 1;
        }
        let acc = eval::accuracy(&net, &splits.test.images, test_labels)?;
        history.push((epoch, loss_sum / batches.max(1) as f64, acc));
    }
    Ok((net, history))
}

pub fn write_victim_metrics(path: &Path, history: &[(usize, f64, f64)]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,test_accuracy\n");
    for (e, loss, acc) in history {
        s.push_str(&format!("{e},{loss},{acc}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Query-set construction

/// Wraps the victim as the configured oracle, optionally with a Prada
/// monitor attached.
pub fn make_oracle(cfg: &ExperimentConfig, net: Network, with_monitor: bool) -> VictimOracle {
    let k = net.num_classes();
    let mut oracle = VictimOracle::new(net, cfg.mode);
    oracle.round_confidence = cfg.round_confidence;
    if with_monitor {
        oracle.attach_monitor(PradaMonitor::new(k, cfg.prada.clone()));
    }
    oracle
}

pub fn build_queryset(
    cfg: &ExperimentConfig,
    oracle: &VictimOracle,
    attack: &Dataset,
) -> Result<QuerySet> {
    spgq::build_query_set(
        oracle,
        &attack.tagged_images(),
        &cfg.seg,
        cfg.epsilon,
        cfg.policy,
        cfg.grad_fraction,
        cfg.seed,
    )
}

// ---------------------------------------------------------------------------
// Stealing

pub fn steal_proxy(
    cfg: &ExperimentConfig,
    victim: &Network,
    qs: &QuerySet,
    attack: &Dataset,
    test: &Dataset,
) -> Result<(Network, Vec<proxy::EpochMetrics>)> {
    let input_shape = attack.images[0].shape().to_vec();
    let k = victim.num_classes();
    let mut net = build_network(&cfg.proxy_arch, cfg.proxy_seed, &input_shape, k);
    let val = ValSet {
        images: test.images.clone(),
        labels: (test.num_classes > 0).then(|| test.labels.clone()),
        victim_labels: eval::predict_all(victim, &test.images)?,
    };
    let mut steal_cfg = cfg.steal.clone();
    steal_cfg.seed = cfg.seed;
    let history = proxy::steal(&mut net, qs, &attack.images, &steal_cfg, Some(&val))?;
    Ok((net, history))
}

// ---------------------------------------------------------------------------
// Evaluation

/// `metric,value` rows: accuracies, agreement, and per-attack transfer ASR.
pub fn evaluate(
    cfg: &ExperimentConfig,
    victim: &Network,
    proxy_net: &Network,
    test: &Dataset,
) -> Result<Vec<(String, f64)>> {
    if test.num_classes == 0 {
        return Err(Error::InvalidArgument("evaluation needs test labels".into()));
    }
    let labels = &test.labels;
    let mut rows = Vec::new();
    rows.push((
        "victim_test_accuracy".to_string(),
        eval::accuracy(victim, &test.images, labels)?,
    ));
    rows.push((
        "proxy_test_accuracy".to_string(),
        eval::accuracy(proxy_net, &test.images, labels)?,
    ));
    rows.push((
        "agreement".to_string(),
        eval::agreement(proxy_net, victim, &test.images)?,
    ));
    for kind in &cfg.attacks {
        let spec = AttackSpec {
            epsilon: cfg.attack_epsilon,
            alpha: cfg.attack_alpha,
            steps: cfg.attack_steps,
            seed: cfg.seed,
            ..AttackSpec::new(*kind)
        };
        let r = transfer_asr(proxy_net, victim, &test.images, labels, &spec)?;
        rows.push((format!("asr_{}", kind.name()), r.asr()));
    }
    Ok(rows)
}

pub fn write_metric_rows(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut s = String::from("metric,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// SG-Maps

fn safe_filename(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Renders SG-Maps for the first `count` gradient records into `dir`.
/// Returns the written paths.
pub fn write_sgmaps(qs: &QuerySet, count: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for rec in qs.records.iter().filter(|r| r.gradient.is_some()).take(count) {
        let gp = rec.gradient.as_ref().unwrap();
        let grad = sgmap::record_gradient_image(gp)?;
        let map = sgmap::sg_map(&grad, sgmap::default_pool(grad.shape()[1]))?;
        let path = dir.join(format!("{}.pgm", safe_filename(&rec.image_id)));
        sgmap::render_pgm(&map, &path)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Manifest

/// Config echo + input checksums + ledger totals + version: everything
/// needed to re-run the experiment bit-identically.
pub fn write_manifest(
    cfg: &ExperimentConfig,
    out: &Path,
    ledger: Option<&spsg_core::oracle::QueryLedger>,
) -> Result<()> {
    let mut s = String::new();
    s.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    for path in cfg.input_paths() {
        if path.is_file() {
            let bytes = fs::read(&path)?;
            s.push_str(&format!(
                "input.crc32 {} = {:08x}\n",
                path.display(),
                crc32fast::hash(&bytes)
            ));
        } else if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(&path)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for p in entries {
                let bytes = fs::read(&p)?;
                s.push_str(&format!(
                    "input.crc32 {} = {:08x}\n",
                    p.display(),
                    crc32fast::hash(&bytes)
                ));
            }
        }
    }
    if let Some(l) = ledger {
        s.push_str(&format!("ledger.total = {}\n", l.total()));
        for (id, n) in l.breakdown() {
            s.push_str(&format!("ledger.image {id} = {n}\n"));
        }
    }
    s.push_str("# --- config ---\n");
    s.push_str(&cfg.to_config_string());
    fs::write(out.join("manifest.txt"), s)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Full pipeline

/// Executes train → monitor → query → steal → evaluate → report into
/// `cfg.out`. With `steal.epochs = 0` the pipeline stops after the query
/// set. Fully reproducible from (config, seeds).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<()> {
    let out = cfg.out.clone();
    fs::create_dir_all(&out)?;

    let splits = stage("load-data", load_splits(cfg))?;
    let (victim, vh) = stage("train-victim", train_victim(cfg, &splits))?;
    stage("train-victim", victim.save(&out.join("victim.net")))?;
    stage(
        "train-victim",
        write_victim_metrics(&out.join("victim_metrics.csv"), &vh),
    )?;

    let oracle = make_oracle(cfg, victim.clone(), cfg.prada_enabled);
    let qs = stage("build-queryset", build_queryset(cfg, &oracle, &splits.attack))?;
    stage("build-queryset", spgq::save_query_set(&qs, &out.join("queryset.spsgqs")))?;
    stage("sgmap", write_sgmaps(&qs, cfg.sgmap_count, &out.join("sgmaps")).map(|_| ()))?;

    let mut oracle = oracle;
    if let Some(monitor) = oracle.take_monitor() {
        let pdir = out.join("prada");
        fs::create_dir_all(&pdir)?;
        stage("prada-report", monitor.report(&pdir))?;
    }
    stage("manifest", write_manifest(cfg, &out, Some(oracle.ledger())))?;

    if cfg.steal.epochs == 0 {
        return Ok(());
    }

    let (proxy_net, sh) =
        stage("steal", steal_proxy(cfg, &victim, &qs, &splits.attack, &splits.test))?;
    stage("steal", proxy_net.save(&out.join("proxy.net")))?;
    stage(
        "steal",
        proxy::write_metrics_csv(&out.join("steal_metrics.csv"), &sh),
    )?;

    let rows = stage("evaluate", evaluate(cfg, &victim, &proxy_net, &splits.test))?;
    stage("evaluate", write_metric_rows(&out.join("evaluation.csv"), &rows))?;
    Ok(())
}
