//! Batch-mean loss evaluators for the translation networks, plus domain
//! label encoding and augmentation sampling. Everything here is a pure
//! function over caller-supplied arrays; network execution stays outside.

use ndarray::ArrayD;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::GeometricMap;

pub const EXPRESSION_CLASSES: usize = 20;
pub const GENDER_CLASSES: usize = 2;
pub const LABEL_DIM: usize = 23;
pub const AGE_YEARS_MIN: f64 = 16.0;
pub const AGE_YEARS_MAX: f64 = 70.0;

pub const AUGMENT_SCALE_MIN: f64 = 0.9;
pub const AUGMENT_SCALE_MAX: f64 = 1.1;
pub const AUGMENT_ANGLE_LIMIT_DEG: f64 = 10.0;

/// One-hot expression and gender plus a normalized age scalar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainLabel {
    expression: usize,
    gender: usize,
    age: f64,
}

impl DomainLabel {
    /// Builds a label from indices and an already normalized age in
    /// [-1, 1].
    pub fn new(expression: usize, gender: usize, age: f64) -> Result<Self> {
        if expression >= EXPRESSION_CLASSES {
            return Err(Error::Shape(format!(
                "expression id {expression} out of range 0..{EXPRESSION_CLASSES}"
            )));
        }
        if gender >= GENDER_CLASSES {
            return Err(Error::Shape(format!(
                "gender id {gender} out of range 0..{GENDER_CLASSES}"
            )));
        }
        if !(-1.0..=1.0).contains(&age) {
            return Err(Error::Shape(format!(
                "normalized age {age} outside [-1, 1]"
            )));
        }
        Ok(Self {
            expression,
            gender,
            age,
        })
    }

    pub fn expression(&self) -> usize {
        self.expression
    }

    pub fn gender(&self) -> usize {
        self.gender
    }

    pub fn age(&self) -> f64 {
        self.age
    }

    /// The 23-vector view: one-hot expression, one-hot gender, age.
    pub fn packed(&self) -> [f64; LABEL_DIM] {
        let mut v = [0.0; LABEL_DIM];
        v[self.expression] = 1.0;
        v[EXPRESSION_CLASSES + self.gender] = 1.0;
        v[LABEL_DIM - 1] = self.age;
        v
    }
}

/// Encodes raw attribute values, mapping age affinely from [16, 70]
/// years onto [-1, 1].
pub fn encode_label(expression: usize, gender: usize, age_years: f64) -> Result<DomainLabel> {
    if !(AGE_YEARS_MIN..=AGE_YEARS_MAX).contains(&age_years) {
        return Err(Error::Shape(format!(
            "age {age_years} outside [{AGE_YEARS_MIN}, {AGE_YEARS_MAX}] years"
        )));
    }
    let mid = 0.5 * (AGE_YEARS_MIN + AGE_YEARS_MAX);
    let half = 0.5 * (AGE_YEARS_MAX - AGE_YEARS_MIN);
    DomainLabel::new(expression, gender, (age_years - mid) / half)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls_c: f64,
    pub lambda_cls_m: f64,
    pub lambda_cyc: f64,
    pub lambda_rec: f64,
    pub lambda_sym: f64,
    pub lambda_gp: f64,
    /// Target norm of discriminator gradients at interpolates.
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cls_c: 0.02,
            lambda_cls_m: 0.05,
            lambda_cyc: 2.0,
            lambda_rec: 0.1,
            lambda_sym: 0.5,
            lambda_gp: 0.2,
            alpha: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_cls_c", self.lambda_cls_c),
            ("lambda_cls_m", self.lambda_cls_m),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_rec", self.lambda_rec),
            ("lambda_sym", self.lambda_sym),
            ("lambda_gp", self.lambda_gp),
            ("alpha", self.alpha),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Shape(format!(
                    "loss weight {name} = {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Wasserstein pieces of the adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdversarialTerms {
    /// Full adversarial value as the discriminator sees it: critic gap
    /// minus the weighted gradient penalty. Enters the discriminator
    /// objective negated and the generator objective as-is.
    pub d_loss_part: f64,
    /// The generator-controlled piece alone, with the sign it carries
    /// inside the generator objective.
    pub g_loss_part: f64,
    /// mean((|grad| - alpha)^2) over the batch.
    pub gp: f64,
}

pub fn adversarial_terms(
    d_real: &[f64],
    d_fake: &[f64],
    grad_norms: &[f64],
    alpha: f64,
    lambda_gp: f64,
) -> Result<AdversarialTerms> {
    if d_real.len() != d_fake.len() || d_real.len() != grad_norms.len() {
        return Err(Error::Shape(format!(
            "batch sizes differ: {} real, {} fake, {} gradient norms",
            d_real.len(),
            d_fake.len(),
            grad_norms.len()
        )));
    }
    if d_real.is_empty() {
        return Err(Error::Shape("empty adversarial batch".into()));
    }
    let n = d_real.len() as f64;
    let mean_real = d_real.iter().sum::<f64>() / n;
    let mean_fake = d_fake.iter().sum::<f64>() / n;
    let gp = grad_norms.iter().map(|g| (g - alpha).powi(2)).sum::<f64>() / n;
    Ok(AdversarialTerms {
        d_loss_part: mean_real - mean_fake - lambda_gp * gp,
        g_loss_part: -mean_fake,
        gp,
    })
}

/// Gradient of the penalty term with respect to each gradient norm.
pub fn gradient_penalty_grad(grad_norms: &[f64], alpha: f64) -> Vec<f64> {
    let n = grad_norms.len() as f64;
    grad_norms.iter().map(|g| 2.0 * (g - alpha) / n).collect()
}

/// Which network the classification term is training. The formula is
/// identical; the caller feeds the source label in Real mode and the
/// target label in Fake mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassificationMode {
    Real,
    Fake,
}

/// Cross-entropy over the discrete segments plus squared error on age,
/// both batch-mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationLoss {
    pub discrete: f64,
    pub age: f64,
}

impl ClassificationLoss {
    pub fn total(&self) -> f64 {
        self.discrete + self.age
    }
}

fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn classification_loss(
    scores: &[[f64; LABEL_DIM]],
    targets: &[DomainLabel],
    _mode: ClassificationMode,
) -> Result<ClassificationLoss> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Shape("empty classification batch".into()));
    }
    let n = scores.len() as f64;
    let mut discrete = 0.0;
    let mut age = 0.0;
    for (s, t) in scores.iter().zip(targets) {
        let expr = &s[..EXPRESSION_CLASSES];
        let gend = &s[EXPRESSION_CLASSES..EXPRESSION_CLASSES + GENDER_CLASSES];
        discrete += log_sum_exp(expr) - expr[t.expression()];
        discrete += log_sum_exp(gend) - gend[t.gender()];
        age += (s[LABEL_DIM - 1] - t.age()).powi(2);
    }
    Ok(ClassificationLoss {
        discrete: discrete / n,
        age: age / n,
    })
}

/// Gradient of `classification_loss` total with respect to the scores.
pub fn classification_grad(
    scores: &[[f64; LABEL_DIM]],
    targets: &[DomainLabel],
    _mode: ClassificationMode,
) -> Result<Vec<[f64; LABEL_DIM]>> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} score rows for {} labels",
            scores.len(),
            targets.len()
        )));
    }
    let n = scores.len() as f64;
    let mut out = Vec::with_capacity(scores.len());
    for (s, t) in scores.iter().zip(targets) {
        let mut g = [0.0; LABEL_DIM];
        let lse_e = log_sum_exp(&s[..EXPRESSION_CLASSES]);
        for i in 0..EXPRESSION_CLASSES {
            g[i] = (s[i] - lse_e).exp() / n;
        }
        g[t.expression()] -= 1.0 / n;
        let gend = &s[EXPRESSION_CLASSES..EXPRESSION_CLASSES + GENDER_CLASSES];
        let lse_g = log_sum_exp(gend);
        for i in 0..GENDER_CLASSES {
            g[EXPRESSION_CLASSES + i] = (gend[i] - lse_g).exp() / n;
        }
        g[EXPRESSION_CLASSES + t.gender()] -= 1.0 / n;
        g[LABEL_DIM - 1] = 2.0 * (s[LABEL_DIM - 1] - t.age()) / n;
        out.push(g);
    }
    Ok(out)
}

fn l1_mean(x: &ArrayD<f64>, y: &ArrayD<f64>, what: &str) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape(format!("{what}: empty input")));
    }
    let sum: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / x.len() as f64)
}

fn l1_mean_grad(x: &ArrayD<f64>, y: &ArrayD<f64>, what: &str) -> Result<ArrayD<f64>> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    let n = x.len() as f64;
    let mut g = x.clone();
    ndarray::Zip::from(&mut g).and(y).for_each(|gi, &yi| {
        *gi = (*gi - yi).signum() / n;
    });
    Ok(g)
}

/// Mean absolute difference between a batch of shapes and its
/// round-trip translation.
pub fn cycle_loss(x: &ArrayD<f64>, x_cycled: &ArrayD<f64>) -> Result<f64> {
    l1_mean(x, x_cycled, "cycle loss")
}

pub fn cycle_loss_grad(x: &ArrayD<f64>, x_cycled: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    l1_mean_grad(x, x_cycled, "cycle loss")
}

/// Mean absolute difference between a batch of shapes and their
/// same-domain translations.
pub fn reconstruction_loss(x: &ArrayD<f64>, x_same_domain: &ArrayD<f64>) -> Result<f64> {
    l1_mean(x, x_same_domain, "reconstruction loss")
}

pub fn reconstruction_loss_grad(
    x: &ArrayD<f64>,
    x_same_domain: &ArrayD<f64>,
) -> Result<ArrayD<f64>> {
    l1_mean_grad(x, x_same_domain, "reconstruction loss")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymmetryValue {
    pub value: f64,
    /// Set when every sample in the batch was excluded as asymmetric.
    pub all_excluded: bool,
}

/// Per-pixel L1 distance between each map and its left-right flip,
/// averaged over pixels valid in both and then over the non-excluded
/// samples. Samples flagged asymmetric do not participate.
pub fn symmetry_loss(maps: &[GeometricMap], asymmetric: &[bool]) -> Result<SymmetryValue> {
    if maps.len() != asymmetric.len() {
        return Err(Error::Shape(format!(
            "{} maps with {} asymmetry flags",
            maps.len(),
            asymmetric.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::Shape("empty symmetry batch".into()));
    }
    let mut total = 0.0;
    let mut active = 0usize;
    for (map, &skip) in maps.iter().zip(asymmetric) {
        if skip {
            continue;
        }
        total += sample_symmetry(map).0;
        active += 1;
    }
    if active == 0 {
        return Ok(SymmetryValue {
            value: 0.0,
            all_excluded: true,
        });
    }
    Ok(SymmetryValue {
        value: total / active as f64,
        all_excluded: false,
    })
}

fn sample_symmetry(map: &GeometricMap) -> (f64, usize) {
    let h = map.resolution();
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..h {
            if map.masked(x, y) || map.masked(h - 1 - x, y) {
                continue;
            }
            let a = map.get(x, y);
            let b = map.get(h - 1 - x, y);
            sum += (a[0] + b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
            count += 1;
        }
    }
    if count == 0 {
        (0.0, 0)
    } else {
        (sum / count as f64, count)
    }
}

/// Gradient of `symmetry_loss` with respect to each map's data buffer
/// (row-major, channel-interleaved like the map itself). Flagged
/// samples get zero gradients.
pub fn symmetry_loss_grad(maps: &[GeometricMap], asymmetric: &[bool]) -> Result<Vec<Vec<f64>>> {
    if maps.len() != asymmetric.len() {
        return Err(Error::Shape(format!(
            "{} maps with {} asymmetry flags",
            maps.len(),
            asymmetric.len()
        )));
    }
    let active = asymmetric.iter().filter(|&&s| !s).count();
    let mut out = Vec::with_capacity(maps.len());
    for (map, &skip) in maps.iter().zip(asymmetric) {
        let h = map.resolution();
        let mut g = vec![0.0; h * h * 3];
        if !skip && active > 0 {
            let (_, count) = sample_symmetry(map);
            if count > 0 {
                let scale = 1.0 / (count as f64 * active as f64);
                for y in 0..h {
                    for x in 0..h {
                        if map.masked(x, y) || map.masked(h - 1 - x, y) {
                            continue;
                        }
                        let a = map.get(x, y);
                        let b = map.get(h - 1 - x, y);
                        let i = (y * h + x) * 3;
                        let j = (y * h + h - 1 - x) * 3;
                        let s0 = (a[0] + b[0]).signum();
                        g[i] += s0 * scale;
                        g[j] += s0 * scale;
                        let s1 = (a[1] - b[1]).signum();
                        g[i + 1] += s1 * scale;
                        g[j + 1] -= s1 * scale;
                        let s2 = (a[2] - b[2]).signum();
                        g[i + 2] += s2 * scale;
                        g[j + 2] -= s2 * scale;
                    }
                }
            }
        }
        out.push(g);
    }
    Ok(out)
}

/// Component values entering the two network objectives. The
/// adversarial entry is the full critic-side value from
/// `adversarial_terms::d_loss_part`; classification values come in
/// split into discrete and age segments so the two weights can apply.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub adversarial: f64,
    pub cls_real_discrete: f64,
    pub cls_real_age: f64,
    pub cls_fake_discrete: f64,
    pub cls_fake_age: f64,
    pub cycle: f64,
    pub reconstruction: f64,
    pub symmetry: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TotalLosses {
    pub discriminator: f64,
    pub generator: f64,
}

pub fn total_losses(parts: &LossParts, w: &LossWeights) -> Result<TotalLosses> {
    w.validate()?;
    let fields = [
        ("adversarial", parts.adversarial),
        ("cls_real_discrete", parts.cls_real_discrete),
        ("cls_real_age", parts.cls_real_age),
        ("cls_fake_discrete", parts.cls_fake_discrete),
        ("cls_fake_age", parts.cls_fake_age),
        ("cycle", parts.cycle),
        ("reconstruction", parts.reconstruction),
        ("symmetry", parts.symmetry),
    ];
    for (name, v) in fields {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss part {name} = {v}")));
        }
    }
    let discriminator = -parts.adversarial
        + w.lambda_cls_c * parts.cls_real_discrete
        + w.lambda_cls_m * parts.cls_real_age;
    let generator = parts.adversarial
        + w.lambda_cls_c * parts.cls_fake_discrete
        + w.lambda_cls_m * parts.cls_fake_age
        + w.lambda_cyc * parts.cycle
        + w.lambda_rec * parts.reconstruction
        + w.lambda_sym * parts.symmetry;
    Ok(TotalLosses {
        discriminator,
        generator,
    })
}

/// One random training augmentation: uniform scale in [0.9, 1.1] and
/// three independent rotation angles within 10 degrees, in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub scale: f64,
    pub euler: [f64; 3],
}

pub fn sample_augmentation(seed: u64) -> Augmentation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = rng.gen_range(AUGMENT_SCALE_MIN..AUGMENT_SCALE_MAX);
    let limit = AUGMENT_ANGLE_LIMIT_DEG.to_radians();
    let euler = [
        rng.gen_range(-limit..limit),
        rng.gen_range(-limit..limit),
        rng.gen_range(-limit..limit),
    ];
    Augmentation { scale, euler }
}
