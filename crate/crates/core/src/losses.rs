//! SFT and DPO objectives over per-token log-probabilities, plus a bigram
//! toy model with hand-derived gradients for checking them end to end.
//!
//! Both objectives use the length-normalized log-likelihood
//! `ℓ(y|x) = (1/|y|) Σ_t log p(y_t | y_<t, x)`, where `|y|` counts only
//! the tokens left unmasked by the response-only loss mask.
//!
//! ```text
//! sft = -ℓθ(y|x) + η Σ_k w_k |p̃_k - t_k| / 100
//! dpo = -log σ( β(ℓθ(y+) - ℓθ(y-)) - β(ℓref(y+) - ℓref(y-)) )
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::schema::TraitVector;

pub const MAX_ALPHABET: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("no unmasked tokens")]
    EmptyResponse,
    #[error("{values} log-probs but {mask} mask entries")]
    LengthMismatch { values: usize, mask: usize },
    #[error("log-probability at position {index} is {value}; must be finite and <= 0")]
    BadLogProb { index: usize, value: f64 },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("symbol {0:?} is not in the alphabet")]
    UnknownSymbol(char),
    #[error("alphabet must have 1..={MAX_ALPHABET} distinct symbols, got {0}")]
    BadAlphabet(usize),
}

/// Realized-token log-probabilities with the response mask (`true` = trained on).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs {
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl TokenLogProbs {
    pub fn new(values: Vec<f64>, mask: Vec<bool>) -> Result<Self, LossError> {
        if values.len() != mask.len() {
            return Err(LossError::LengthMismatch {
                values: values.len(),
                mask: mask.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v <= 0.0))
        {
            return Err(LossError::BadLogProb { index, value });
        }
        Ok(TokenLogProbs { values, mask })
    }

    /// Every position unmasked.
    pub fn unmasked(values: Vec<f64>) -> Result<Self, LossError> {
        let mask = vec![true; values.len()];
        Self::new(values, mask)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn n_unmasked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub fn length_norm_ll(lp: &TokenLogProbs) -> Result<f64, LossError> {
    let n = lp.n_unmasked();
    if n == 0 {
        return Err(LossError::EmptyResponse);
    }
    let sum: f64 = lp
        .values
        .iter()
        .zip(&lp.mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| v)
        .sum();
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub eta: f64,
    pub weights: [f64; 5],
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            eta: 0.5,
            weights: [0.2; 5],
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(LossError::InvalidConfig(format!("eta = {} must be >= 0", self.eta)));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(LossError::InvalidConfig("trait weights must be >= 0".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(LossError::InvalidConfig(format!("trait weights sum to {s}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 0.1 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LossError::InvalidConfig(format!("beta = {} must be > 0", self.beta)));
        }
        Ok(())
    }
}

/// `η Σ_k w_k |p̃_k - t_k| / 100`, always in `[0, η]`.
pub fn trait_penalty(scored: &TraitVector, target: &TraitVector, cfg: &SftConfig) -> f64 {
    let p = scored.as_array();
    let t = target.as_array();
    cfg.eta
        * (0..5)
            .map(|k| cfg.weights[k] * (p[k] - t[k]).abs() / 100.0)
            .sum::<f64>()
}

pub fn sft_loss(
    lp: &TokenLogProbs,
    scored: &TraitVector,
    target: &TraitVector,
    cfg: &SftConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    Ok(-length_norm_ll(lp)? + trait_penalty(scored, target, cfg))
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log σ(x)` as `-softplus(-x)`; finite for any finite `x`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `β(ℓθ(y+) - ℓθ(y-)) - β(ℓref(y+) - ℓref(y-))` from the four length-normalized values.
pub fn dpo_margin_from_ll(theta_plus: f64, theta_minus: f64, ref_plus: f64, ref_minus: f64, beta: f64) -> f64 {
    beta * (theta_plus - theta_minus) - beta * (ref_plus - ref_minus)
}

pub fn dpo_loss(
    lp_plus: &TokenLogProbs,
    lp_minus: &TokenLogProbs,
    ref_plus: &TokenLogProbs,
    ref_minus: &TokenLogProbs,
    cfg: &DpoConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    let m = dpo_margin_from_ll(
        length_norm_ll(lp_plus)?,
        length_norm_ll(lp_minus)?,
        length_norm_ll(ref_plus)?,
        length_norm_ll(ref_minus)?,
        cfg.beta,
    );
    Ok(-log_sigmoid(m))
}

/// Folds arbitrary text onto a fixed 32-symbol alphabet so corpus text can be
/// fed to [`ToyLm`].
pub fn fold_char(c: char) -> char {
    match c {
        'a'..='z' | ' ' | '.' | ',' => c,
        'A'..='Z' => c.to_ascii_lowercase(),
        '0'..='9' => '0',
        '\n' | '\t' | '\r' => ' ',
        _ => '?',
    }
}

pub fn folded_alphabet() -> Vec<char> {
    let mut a: Vec<char> = ('a'..='z').collect();
    a.extend([' ', '.', ',', '0', '?']);
    a
}

pub fn fold_text(s: &str) -> String {
    s.chars().map(fold_char).collect()
}

/// A token sequence with its response mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySequence {
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Bigram categorical model. Row `c` of the logit table holds next-symbol
/// logits after symbol `c`; the last row is the start-of-sequence context.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    alphabet: Vec<char>,
    logits: Vec<f64>,
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(row) {
        *o = z - lse;
    }
}

impl ToyLm {
    pub fn uniform(alphabet: &[char]) -> Result<Self, LossError> {
        let v = alphabet.len();
        let mut uniq = alphabet.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        if v == 0 || v > MAX_ALPHABET || uniq.len() != v {
            return Err(LossError::BadAlphabet(v));
        }
        Ok(ToyLm {
            alphabet: alphabet.to_vec(),
            logits: vec![0.0; (v + 1) * v],
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(alphabet: &[char], seed: u64, scale: f64) -> Result<Self, LossError> {
        let mut m = Self::uniform(alphabet)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for z in &mut m.logits {
            *z = rng.gen_range(-scale..=scale);
        }
        Ok(m)
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.logits
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn bos(&self) -> usize {
        self.vocab()
    }

    pub fn symbol(&self, c: char) -> Result<usize, LossError> {
        self.alphabet
            .iter()
            .position(|a| *a == c)
            .ok_or(LossError::UnknownSymbol(c))
    }

    /// Encodes `prompt` (masked) followed by `completion` (trained on).
    pub fn encode(&self, prompt: &str, completion: &str) -> Result<ToySequence, LossError> {
        let mut tokens = Vec::new();
        let mut mask = Vec::new();
        for (text, m) in [(prompt, false), (completion, true)] {
            for c in text.chars() {
                tokens.push(self.symbol(c)?);
                mask.push(m);
            }
        }
        Ok(ToySequence { tokens, mask })
    }

    fn context(&self, seq: &ToySequence, i: usize) -> usize {
        if i == 0 {
            self.bos()
        } else {
            seq.tokens[i - 1]
        }
    }

    fn log_probs_table(&self) -> Vec<f64> {
        let v = self.vocab();
        let mut out = vec![0.0; self.logits.len()];
        for (row, o) in self.logits.chunks(v).zip(out.chunks_mut(v)) {
            log_softmax_row(row, o);
        }
        out
    }

    pub fn log_probs(&self, seq: &ToySequence) -> Result<TokenLogProbs, LossError> {
        let v = self.vocab();
        if let Some(&t) = seq.tokens.iter().find(|t| **t >= v) {
            return Err(LossError::InvalidConfig(format!("token id {t} out of range")));
        }
        let table = self.log_probs_table();
        let values = (0..seq.tokens.len())
            .map(|i| table[self.context(seq, i) * v + seq.tokens[i]])
            .collect();
        TokenLogProbs::new(values, seq.mask.clone())
    }

    pub fn ll(&self, seq: &ToySequence) -> Result<f64, LossError> {
        length_norm_ll(&self.log_probs(seq)?)
    }

    /// Adds `scale · ∂ℓ/∂logits` for one sequence into `grad`.
    fn add_ll_grad(&self, table: &[f64], seq: &ToySequence, scale: f64, grad: &mut [f64]) -> Result<(), LossError> {
        let v = self.vocab();
        let n = seq.mask.iter().filter(|m| **m).count();
        if n == 0 {
            return Err(LossError::EmptyResponse);
        }
        let w = scale / n as f64;
        for i in 0..seq.tokens.len() {
            if !seq.mask[i] {
                continue;
            }
            let c = self.context(seq, i);
            let row = &table[c * v..(c + 1) * v];
            let g = &mut grad[c * v..(c + 1) * v];
            for k in 0..v {
                g[k] -= w * row[k].exp();
            }
            g[seq.tokens[i]] += w;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub seq: ToySequence,
    pub scored: TraitVector,
    pub target: TraitVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoExample {
    pub chosen: ToySequence,
    pub rejected: ToySequence,
}

/// A batch objective, averaged over its examples.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Sft {
        batch: &'a [SftExample],
        cfg: SftConfig,
    },
    Dpo {
        batch: &'a [DpoExample],
        reference: &'a ToyLm,
        cfg: DpoConfig,
    },
}

impl Objective<'_> {
    fn validate(&self) -> Result<usize, LossError> {
        let n = match self {
            Objective::Sft { batch, cfg } => {
                cfg.validate()?;
                batch.len()
            }
            Objective::Dpo { batch, cfg, .. } => {
                cfg.validate()?;
                batch.len()
            }
        };
        if n == 0 {
            return Err(LossError::InvalidConfig("empty batch".into()));
        }
        Ok(n)
    }
}

/// Mean DPO margin over the batch, `β(Δθ - Δref)`.
pub fn dpo_margin(model: &ToyLm, reference: &ToyLm, ex: &DpoExample, cfg: &DpoConfig) -> Result<f64, LossError> {
    Ok(dpo_margin_from_ll(
        model.ll(&ex.chosen)?,
        model.ll(&ex.rejected)?,
        reference.ll(&ex.chosen)?,
        reference.ll(&ex.rejected)?,
        cfg.beta,
    ))
}

pub fn objective_value(model: &ToyLm, obj: &Objective) -> Result<f64, LossError> {
    let n = obj.validate()?;
    let mut total = 0.0;
    match obj {
        Objective::Sft { batch, cfg } => {
            for ex in batch.iter() {
                total += sft_loss(&model.log_probs(&ex.seq)?, &ex.scored, &ex.target, cfg)?;
            }
        }
        Objective::Dpo { batch, reference, cfg } => {
            for ex in batch.iter() {
                total += dpo_loss(
                    &model.log_probs(&ex.chosen)?,
                    &model.log_probs(&ex.rejected)?,
                    &reference.log_probs(&ex.chosen)?,
                    &reference.log_probs(&ex.rejected)?,
                    cfg,
                )?;
            }
        }
    }
    Ok(total / n as f64)
}

/// Loss and its analytic gradient with respect to every logit.
///
/// SFT: the trait penalty does not depend on θ, so only `-ℓ` contributes.
/// DPO: `∂/∂m [-log σ(m)] = -σ(-m)`, chained through `m = β(ℓθ+ - ℓθ-) - const`.
pub fn objective_grad(model: &ToyLm, obj: &Objective) -> Result<(f64, Vec<f64>), LossError> {
    let n = obj.validate()? as f64;
    let table = model.log_probs_table();
    let mut grad = vec![0.0; model.logits.len()];
    let mut total = 0.0;
    match obj {
        Objective::Sft { batch, cfg } => {
            for ex in batch.iter() {
                total += sft_loss(&model.log_probs(&ex.seq)?, &ex.scored, &ex.target, cfg)?;
                model.add_ll_grad(&table, &ex.seq, -1.0 / n, &mut grad)?;
            }
        }
        Objective::Dpo { batch, reference, cfg } => {
            for ex in batch.iter() {
                let m = dpo_margin(model, reference, ex, cfg)?;
                total += -log_sigmoid(m);
                let dm = -sigmoid(-m) * cfg.beta / n;
                model.add_ll_grad(&table, &ex.chosen, dm, &mut grad)?;
                model.add_ll_grad(&table, &ex.rejected, -dm, &mut grad)?;
            }
        }
    }
    Ok((total / n, grad))
}

/// One plain gradient-descent step. Returns the updated model and the loss
/// measured before the step.
pub fn toy_train_step(model: &ToyLm, obj: &Objective, lr: f64) -> Result<(ToyLm, f64), LossError> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(LossError::InvalidConfig(format!("learning rate {lr}")));
    }
    let (loss, grad) = objective_grad(model, obj)?;
    let mut next = model.clone();
    for (z, g) in next.logits.iter_mut().zip(&grad) {
        *z -= lr * g;
    }
    Ok((next, loss))
}

/// Denominator floor for [`relative_error`]. A central difference with
/// `epsilon = 1e-5` on a loss near 1 carries roughly `1e-11` of roundoff, so
/// a parameter whose true gradient is exactly zero still shows a numeric
/// gradient of a few `1e-12`. Below this floor the error is effectively
/// absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative error used by [`grad_check`]: `|a-n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub n_params: usize,
}

/// Compares the analytic gradient with central finite differences on every
/// parameter.
pub fn grad_check(model: &ToyLm, obj: &Objective, epsilon: f64) -> Result<GradCheck, LossError> {
    if !(1e-8..=1e-3).contains(&epsilon) {
        return Err(LossError::InvalidConfig(format!("epsilon {epsilon} outside [1e-8, 1e-3]")));
    }
    let (_, analytic) = objective_grad(model, obj)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..analytic.len() {
        let orig = probe.logits[i];
        probe.logits[i] = orig + epsilon;
        let up = objective_value(&probe, obj)?;
        probe.logits[i] = orig - epsilon;
        let down = objective_value(&probe, obj)?;
        probe.logits[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        max_abs_grad: analytic.iter().fold(0.0, |m, g| m.max(g.abs())),
        n_params: analytic.len(),
    })
}

/// A random instance used by the gradient-check suite: a model over
/// `vocab` symbols, plus an SFT batch and a DPO pair drawn from the same seed.
pub fn random_instance(seed: u64, vocab: usize) -> Result<(ToyLm, ToyLm, Vec<SftExample>, Vec<DpoExample>), LossError> {
    let alphabet: Vec<char> = folded_alphabet().into_iter().take(vocab).collect();
    let model = ToyLm::random(&alphabet, seed, 1.5)?;
    let reference = ToyLm::random(&alphabet, seed ^ 0x9e37_79b9_7f4a_7c15, 1.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let v = alphabet.len();
    let seq = |rng: &mut ChaCha8Rng| {
        let p = rng.gen_range(0..5);
        let c = rng.gen_range(1..9);
        ToySequence {
            tokens: (0..p + c).map(|_| rng.gen_range(0..v)).collect(),
            mask: (0..p + c).map(|i| i >= p).collect(),
        }
    };
    let tv = |rng: &mut ChaCha8Rng| {
        crate::schema::validate_trait_vector([(); 5].map(|_| rng.gen_range(0.0..=100.0))).expect("in range")
    };
    let sft = (0..3)
        .map(|_| SftExample {
            seq: seq(&mut rng),
            scored: tv(&mut rng),
            target: tv(&mut rng),
        })
        .collect();
    let dpo = (0..2)
        .map(|_| DpoExample {
            chosen: seq(&mut rng),
            rejected: seq(&mut rng),
        })
        .collect();
    Ok((model, reference, sft, dpo))
}
