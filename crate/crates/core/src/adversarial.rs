//! Untargeted L∞ evasion attacks (FGSM, BIM, PGD) and transfer-rate
//! evaluation: craft on one network, measure misclassification on another.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{argmax, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "fgsm" => Some(AttackKind::Fgsm),
            "bim" => Some(AttackKind::Bim),
            "pgd" => Some(AttackKind::Pgd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// L∞ budget.
    pub epsilon: f64,
    /// Per-iteration step for BIM/PGD.
    pub alpha: f64,
    /// Iterations for BIM/PGD.
    pub steps: usize,
    /// Uniform random start inside the ball (PGD).
    pub random_start: bool,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind) -> Self {
        AttackSpec {
            kind,
            epsilon: 10.0 / 255.0,
            alpha: 2.0 / 255.0,
            steps: 10,
            random_start: kind == AttackKind::Pgd,
            seed: 0,
        }
    }
}

/// sign with sign(0) = 0 (f64::signum maps +0 to 1).
fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Crafts one adversarial example against `net` from a clean image in
/// [0,1]. Untargeted: ascends the cross-entropy of `label`. The result
/// stays inside the ε-ball around the input and inside [0,1].
pub fn attack(net: &Network, image: &Tensor, label: usize, spec: &AttackSpec) -> Result<Tensor> {
    if spec.epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let (steps, step) = match spec.kind {
        AttackKind::Fgsm => (1, spec.epsilon),
        AttackKind::Bim | AttackKind::Pgd => (spec.steps.max(1), spec.alpha),
    };
    let mut x = image.clone();
    if spec.kind == AttackKind::Pgd && spec.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in x.data_mut() {
            *v = (*v + rng.gen_range(-spec.epsilon..=spec.epsilon)).clamp(0.0, 1.0);
        }
    }
    for _ in 0..steps {
        let g = net.backward_input(&x, label)?;
        for i in 0..x.len() {
            let v = x.data()[i] + step * sgn(g.data()[i]);
            // L∞ projection onto the ball around the clean image, then the
            // valid pixel range.
            let lo = (image.data()[i] - spec.epsilon).max(0.0);
            let hi = (image.data()[i] + spec.epsilon).min(1.0);
            x.data_mut()[i] = v.clamp(lo, hi);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferResult {
    /// Images the target classified correctly before the attack.
    pub eligible: usize,
    /// Of those, how many the crafted example pushed to a wrong label.
    pub flipped: usize,
}

impl TransferResult {
    pub fn asr(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.flipped as f64 / self.eligible as f64
        }
    }
}

/// Transfer attack success rate: adversarial examples are crafted on
/// `source` (gradient access) and scored on `target`. Only images the
/// target originally gets right count toward the rate.
pub fn transfer_asr(
    source: &Network,
    target: &Network,
    images: &[Tensor],
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<TransferResult> {
    if images.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images vs {} labels",
            images.len(),
            labels.len()
        )));
    }
    let mut eligible = 0;
    let mut flipped = 0;
    for (i, (img, &label)) in images.iter().zip(labels).enumerate() {
        let clean = argmax(target.forward_single(img)?.data());
        if clean != label {
            continue;
        }
        eligible += 1;
        let per_spec = AttackSpec {
            seed: spec.seed.wrapping_add(i as u64),
            ..*spec
        };
        let adv = attack(source, img, label, &per_spec)?;
        if argmax(target.forward_single(&adv)?.data()) != label {
            flipped += 1;
        }
    }
    Ok(TransferResult { eligible, flipped })
}
