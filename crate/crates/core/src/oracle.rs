//! Black-box access to a trained victim network.
//!
//! The oracle is the only path by which attack code may touch the victim:
//! it returns a [`QueryResponse`] in one of two fixed query modes, counts
//! every successful query in a monotonic ledger, and forwards each
//! observation to an optionally attached defense monitor.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::Result;
use crate::nn::{argmax, Network};
use crate::prada::PradaMonitor;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Probability,
    HardLabel,
}

impl QueryMode {
    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Probability => "probability",
            QueryMode::HardLabel => "hard_label",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "probability" => Some(QueryMode::Probability),
            "hard_label" => Some(QueryMode::HardLabel),
            _ => None,
        }
    }
}

/// Victim output under a query mode: the full distribution in probability
/// mode, top-1 label ŷ/p only in hard-label mode.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryResponse {
    pub mode: QueryMode,
    pub probs: Option<Vec<f64>>,
    pub top_label: usize,
    pub top_prob: f64,
}

impl QueryResponse {
    /// Projects a probability-mode response onto its hard-label view.
    pub fn to_hard_label(&self, round_confidence: bool) -> QueryResponse {
        QueryResponse {
            mode: QueryMode::HardLabel,
            probs: None,
            top_label: self.top_label,
            top_prob: if round_confidence {
                round4(self.top_prob)
            } else {
                self.top_prob
            },
        }
    }
}

fn round4(p: f64) -> f64 {
    (p * 10000.0).round() / 10000.0
}

/// Monotonic query counter with a per-image breakdown.
#[derive(Default)]
pub struct QueryLedger {
    total: AtomicU64,
    per_image: Mutex<BTreeMap<String, u64>>,
}

impl QueryLedger {
    pub fn total(&self) -> u64 {
        self.total.load(Ordering::SeqCst)
    }

    pub fn breakdown(&self) -> BTreeMap<String, u64> {
        self.per_image.lock().unwrap().clone()
    }

    fn record(&self, image_id: &str) {
        self.total.fetch_add(1, Ordering::SeqCst);
        *self
            .per_image
            .lock()
            .unwrap()
            .entry(image_id.to_string())
            .or_insert(0) += 1;
    }
}

pub struct VictimOracle {
    net: Network,
    mode: QueryMode,
    /// MLaaS-style truncation of the hard-label confidence to 4 decimals.
    pub round_confidence: bool,
    ledger: QueryLedger,
    monitor: Option<Mutex<PradaMonitor>>,
}

impl VictimOracle {
    pub fn new(net: Network, mode: QueryMode) -> Self {
        Self {
            net,
            mode,
            round_confidence: true,
            ledger: QueryLedger::default(),
            monitor: None,
        }
    }

    pub fn attach_monitor(&mut self, monitor: PradaMonitor) {
        self.monitor = Some(Mutex::new(monitor));
    }

    pub fn take_monitor(&mut self) -> Option<PradaMonitor> {
        self.monitor.take().map(|m| m.into_inner().unwrap())
    }

    pub fn monitor(&self) -> Option<&Mutex<PradaMonitor>> {
        self.monitor.as_ref()
    }

    pub fn mode(&self) -> QueryMode {
        self.mode
    }

    pub fn ledger(&self) -> &QueryLedger {
        &self.ledger
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    pub fn input_shape(&self) -> &[usize] {
        self.net.input_shape()
    }

    /// A stable fingerprint of the victim parameters, recorded in query-set
    /// headers so a cache is bound to the model that produced it.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in self.net.flat_params() {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }

    pub fn query(&self, image: &Tensor) -> Result<QueryResponse> {
        self.query_tagged("(untagged)", image)
    }

    /// Queries the victim, attributing the ledger entry to `image_id`.
    /// Inputs are intentionally not clipped to [0,1]: clipping saturated
    /// pixels would zero forward differences.
    pub fn query_tagged(&self, image_id: &str, image: &Tensor) -> Result<QueryResponse> {
        let probs = self.net.forward_single(image)?; // shape errors leave the ledger untouched
        self.ledger.record(image_id);
        let p = argmax(probs.data());
        if let Some(mon) = &self.monitor {
            mon.lock().unwrap().observe(image, p);
        }
        let top_prob = probs.data()[p];
        Ok(match self.mode {
            QueryMode::Probability => QueryResponse {
                mode: QueryMode::Probability,
                probs: Some(probs.into_data()),
                top_label: p,
                top_prob,
            },
            QueryMode::HardLabel => QueryResponse {
                mode: QueryMode::HardLabel,
                probs: None,
                top_label: p,
                top_prob: if self.round_confidence {
                    round4(top_prob)
                } else {
                    top_prob
                },
            },
        })
    }

    pub fn query_batch(&self, images: &[Tensor]) -> Result<Vec<QueryResponse>> {
        images.iter().map(|img| self.query(img)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::random_mlp;
    use crate::prada::{PradaMonitor, PradaParams};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 3, 3], (0..9).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn probability_mode_returns_full_distribution() {
        let oracle = VictimOracle::new(random_mlp(1, &[1, 3, 3], &[6], 4), QueryMode::Probability);
        let r = oracle.query(&img(0)).unwrap();
        let probs = r.probs.as_ref().unwrap();
        assert_eq!(probs.len(), 4);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r.top_label, crate::nn::argmax(probs));
        assert_eq!(r.top_prob, probs[r.top_label]);
    }

    #[test]
    fn hard_label_mode_rounds_confidence() {
        let net = random_mlp(1, &[1, 3, 3], &[6], 4);
        let full = VictimOracle::new(net.clone(), QueryMode::Probability);
        let mut hard = VictimOracle::new(net, QueryMode::HardLabel);
        let x = img(1);
        let rf = full.query(&x).unwrap();
        let rh = hard.query(&x).unwrap();
        assert!(rh.probs.is_none());
        assert_eq!(rh.top_label, rf.top_label);
        assert_eq!(rh.top_prob, round4(rf.top_prob));
        // the 4-decimal grid
        assert_eq!((rh.top_prob * 1e4).round() / 1e4, rh.top_prob);
        hard.round_confidence = false;
        let r2 = hard.query(&x).unwrap();
        assert_eq!(r2.top_prob, rf.top_prob);
    }

    #[test]
    fn ledger_counts_per_image_and_ignores_bad_shapes() {
        let oracle = VictimOracle::new(random_mlp(2, &[1, 3, 3], &[6], 4), QueryMode::Probability);
        oracle.query_tagged("a", &img(0)).unwrap();
        oracle.query_tagged("a", &img(1)).unwrap();
        oracle.query_tagged("b", &img(2)).unwrap();
        let bad = Tensor::zeros(vec![1, 2, 2]);
        assert!(oracle.query_tagged("c", &bad).is_err());
        assert_eq!(oracle.ledger().total(), 3);
        let b = oracle.ledger().breakdown();
        assert_eq!(b.get("a"), Some(&2));
        assert_eq!(b.get("b"), Some(&1));
        assert_eq!(b.get("c"), None);
    }

    #[test]
    fn fingerprint_is_stable_and_parameter_sensitive() {
        let a = VictimOracle::new(random_mlp(3, &[1, 3, 3], &[6], 4), QueryMode::Probability);
        let b = VictimOracle::new(random_mlp(4, &[1, 3, 3], &[6], 4), QueryMode::Probability);
        assert_eq!(a.fingerprint(), a.fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn attached_monitor_sees_every_query() {
        let mut oracle =
            VictimOracle::new(random_mlp(5, &[1, 3, 3], &[6], 4), QueryMode::Probability);
        oracle.attach_monitor(PradaMonitor::new(4, PradaParams::default()));
        for i in 0..7 {
            oracle.query(&img(i)).unwrap();
        }
        let mon = oracle.take_monitor().unwrap();
        assert_eq!(mon.observed(), 7);
        assert_eq!(mon.timeline().len(), 7);
    }

    #[test]
    fn hard_label_projection_of_probability_response() {
        let oracle = VictimOracle::new(random_mlp(6, &[1, 3, 3], &[6], 4), QueryMode::Probability);
        let r = oracle.query(&img(3)).unwrap();
        let h = r.to_hard_label(true);
        assert!(h.probs.is_none());
        assert_eq!(h.mode, QueryMode::HardLabel);
        assert_eq!(h.top_label, r.top_label);
        assert_eq!(h.top_prob, round4(r.top_prob));
    }
}
