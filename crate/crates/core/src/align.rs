//! Weighted preference optimization: Bradley–Terry preferences, the
//! latent-distance-weighted alignment loss, its gradient with a
//! finite-difference verifier, one alignment iteration, and the full
//! iterative driver.
//!
//! The loss over a batch of weighted pairs is
//!
//! ```text
//! L = mean_i  w_i · softplus(−z_i),     z = β[(log pθ(y|x) − log pref(y|x))
//!                                            − (log pθ(y′|x) − log pref(y′|x))]
//! ```
//!
//! which reduces to standard DPO when every weight is 1. Its exact gradient
//! scales each pair's (∇log p(y|x) − ∇log p(y′|x)) by w_i·β·σ(−z_i): gold
//! likelihood is pushed up, generated likelihood down, harder for pairs far
//! apart in latent space.

use std::path::Path;

use sha2::{Digest, Sha256};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, GenerationRecord, TokenId};
use crate::error::{Error, Result};
use crate::guide::{distance_records, DistanceRecord, GuideParams};
use crate::lm::{
    conditional_log_prob, encode_for_scoring, generate_for_dataset, sample_response, scored_backward,
    scored_forward, DecodeConfig, LmParams,
};
use crate::nn::adam::AdamState;
use crate::nn::params::{axpy_into, hex, ParamContainer};
use crate::rng::{self, Purpose};
use crate::scalar::{sigmoid, softplus, Real};

/// Bradley–Terry preference probability from two reward values, computed in
/// the numerically stable logistic form.
pub fn bradley_terry(r_win: f64, r_lose: f64) -> f64 {
    sigmoid(r_win - r_lose)
}

/// One weighted preference pair: gold response (winner) vs model-generated
/// response (loser) for the same prompt, with its normalized latent-distance
/// weight s/S.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPreferencePair {
    pub prompt: Vec<TokenId>,
    pub win: Vec<TokenId>,
    pub lose: Vec<TokenId>,
    pub weight: f64,
}

fn check_pair(pair: &WeightedPreferencePair) -> Result<()> {
    if !pair.weight.is_finite() || pair.weight < 0.0 {
        return Err(Error::config(format!("invalid weight {}", pair.weight)));
    }
    Ok(())
}

fn check_same_config<T: Real>(theta: &LmParams<T>, reference: &LmParams<T>) -> Result<()> {
    if theta.config != reference.config {
        return Err(Error::config("policy and reference configs differ"));
    }
    Ok(())
}

/// z: the β-scaled policy-vs-reference log-ratio margin between winner and
/// loser. Exactly zero when `theta` and `reference` hold identical values.
pub fn implicit_reward_margin<T: Real>(
    theta: &LmParams<T>,
    reference: &LmParams<T>,
    x: &[TokenId],
    y_win: &[TokenId],
    y_lose: &[TokenId],
    beta: f64,
) -> Result<f64> {
    check_same_config(theta, reference)?;
    let win_ratio =
        conditional_log_prob(theta, x, y_win)? - conditional_log_prob(reference, x, y_win)?;
    let lose_ratio =
        conditional_log_prob(theta, x, y_lose)? - conditional_log_prob(reference, x, y_lose)?;
    Ok(beta * (win_ratio - lose_ratio))
}

/// Per-pair loss term: w · softplus(−z) = −w · log σ(z).
pub fn pair_loss(z: f64, weight: f64) -> f64 {
    weight * softplus(-z)
}

/// Reference log-probabilities (win, lose) per pair; constant within an
/// iteration, so callers may precompute them once.
fn reference_log_probs<T: Real>(
    reference: &LmParams<T>,
    batch: &[WeightedPreferencePair],
) -> Result<Vec<(f64, f64)>> {
    batch
        .iter()
        .map(|p| {
            let w = conditional_log_prob(reference, &p.prompt, &p.win)?;
            let l = conditional_log_prob(reference, &p.prompt, &p.lose)?;
            Ok((w, l))
        })
        .collect()
}

fn margins_with_ref<T: Real>(
    theta: &LmParams<T>,
    batch: &[WeightedPreferencePair],
    ref_lps: &[(f64, f64)],
    beta: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len());
    for (pair, &(ref_w, ref_l)) in batch.iter().zip(ref_lps.iter()) {
        check_pair(pair)?;
        let lt_w = conditional_log_prob(theta, &pair.prompt, &pair.win)?;
        let lt_l = conditional_log_prob(theta, &pair.prompt, &pair.lose)?;
        out.push(beta * ((lt_w - ref_w) - (lt_l - ref_l)));
    }
    Ok(out)
}

fn dpo_loss_with_ref<T: Real>(
    theta: &LmParams<T>,
    batch: &[WeightedPreferencePair],
    ref_lps: &[(f64, f64)],
    beta: f64,
) -> Result<f64> {
    let margins = margins_with_ref(theta, batch, ref_lps, beta)?;
    let total: f64 = margins
        .iter()
        .zip(batch.iter())
        .map(|(&z, p)| pair_loss(z, p.weight))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean over the batch of −w·log σ(z). With all weights 1 this is exactly
/// the standard DPO loss.
pub fn weighted_dpo_loss<T: Real>(
    theta: &LmParams<T>,
    reference: &LmParams<T>,
    batch: &[WeightedPreferencePair],
    beta: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    check_same_config(theta, reference)?;
    let ref_lps = reference_log_probs(reference, batch)?;
    dpo_loss_with_ref(theta, batch, &ref_lps, beta)
}

fn dpo_grad_with_ref<T: Real>(
    theta: &LmParams<T>,
    batch: &[WeightedPreferencePair],
    ref_lps: &[(f64, f64)],
    beta: f64,
) -> Result<(f64, LmParams<T>)> {
    let mut grads = theta.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (pair, &(ref_w, ref_l)) in batch.iter().zip(ref_lps.iter()) {
        check_pair(pair)?;
        let enc_win = encode_for_scoring(theta, &pair.prompt, &pair.win)?;
        let enc_lose = encode_for_scoring(theta, &pair.prompt, &pair.lose)?;
        let lt_w = scored_forward(theta, &enc_win);
        let lt_l = scored_forward(theta, &enc_lose);
        let z = beta * ((lt_w - ref_w) - (lt_l - ref_l));
        total += pair_loss(z, pair.weight);
        // dL/dz = −w·σ(−z)/B; winner log-prob enters z with +β, loser with −β
        let coeff = pair.weight * beta * sigmoid(-z) * inv_b;
        scored_backward(theta, &enc_win, coeff, &mut grads);
        scored_backward(theta, &enc_lose, -coeff, &mut grads);
    }
    Ok((total * inv_b, grads))
}

/// Loss and gradient of `weighted_dpo_loss` with respect to `theta`.
pub fn weighted_dpo_grad<T: Real>(
    theta: &LmParams<T>,
    reference: &LmParams<T>,
    batch: &[WeightedPreferencePair],
    beta: f64,
) -> Result<(f64, LmParams<T>)> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    check_same_config(theta, reference)?;
    let ref_lps = reference_log_probs(reference, batch)?;
    dpo_grad_with_ref(theta, batch, &ref_lps, beta)
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub probe_count: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Fault-injection hook: corrupt the analytic gradient before comparing,
    /// so the failure path itself is testable.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            probe_count: 64,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_offset: usize,
    pub probes: usize,
    /// Max relative deviation between the fused gradient and the per-pair
    /// weight-scaled (∇log p win − ∇log p lose) recombination.
    pub structural_max_rel_err: f64,
}

/// Compare the analytic gradient of `weighted_dpo_loss` against central
/// finite differences on randomly probed parameters (float64), and check the
/// gradient's structural decomposition: a weight-scaled combination that
/// raises winner likelihood and lowers loser likelihood.
pub fn verify_gradient(
    theta: &LmParams<f64>,
    reference: &LmParams<f64>,
    batch: &[WeightedPreferencePair],
    beta: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    check_same_config(theta, reference)?;
    let n = theta.param_count();
    if n > 50_000 {
        return Err(Error::config(format!(
            "gradient verification needs a tiny model (<= 50k params), got {n}"
        )));
    }
    let ref_lps = reference_log_probs(reference, batch)?;
    let (_, grads) = dpo_grad_with_ref(theta, batch, &ref_lps, beta)?;

    // Structural route: per-sequence log-prob gradients combined afterwards.
    let margins = margins_with_ref(theta, batch, &ref_lps, beta)?;
    let mut recombined = theta.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;
    for (pair, &z) in batch.iter().zip(margins.iter()) {
        let scale = pair.weight * beta * sigmoid(-z) * inv_b;
        if scale == 0.0 {
            continue;
        }
        let mut g_win = theta.zeros_like();
        let enc_win = encode_for_scoring(theta, &pair.prompt, &pair.win)?;
        scored_backward(theta, &enc_win, 1.0, &mut g_win);
        axpy_into(&mut recombined, &g_win, scale);
        let mut g_lose = theta.zeros_like();
        let enc_lose = encode_for_scoring(theta, &pair.prompt, &pair.lose)?;
        scored_backward(theta, &enc_lose, 1.0, &mut g_lose);
        axpy_into(&mut recombined, &g_lose, -scale);
    }
    let mut structural_max_rel_err: f64 = 0.0;
    for (a, b) in grads.arrays().iter().zip(recombined.arrays().iter()) {
        for (&x, &y) in a.data.iter().zip(b.data.iter()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
            structural_max_rel_err = structural_max_rel_err.max(rel);
        }
    }
    if structural_max_rel_err > 1e-8 {
        return Err(Error::Verification {
            check: "gradient-structure".into(),
            detail: format!(
                "fused gradient deviates from weight-scaled log-prob combination by {structural_max_rel_err:.3e}"
            ),
        });
    }

    // Finite differences on probed parameters.
    let mut rng = rng::stream(opts.seed, Purpose::Probe, 0, 0);
    let probes = opts.probe_count.min(n);
    let mut indices: Vec<usize> = Vec::with_capacity(probes);
    while indices.len() < probes {
        let idx = rng.gen_range(0..n);
        if !indices.contains(&idx) {
            indices.push(idx);
        }
    }

    let mut probe_params = theta.clone();
    let mut max_rel_err: f64 = 0.0;
    let mut worst = (String::new(), 0usize);
    for &idx in &indices {
        let orig = probe_params.get_flat(idx);
        probe_params.set_flat(idx, orig + opts.step);
        let up = dpo_loss_with_ref(&probe_params, batch, &ref_lps, beta)?;
        probe_params.set_flat(idx, orig - opts.step);
        let down = dpo_loss_with_ref(&probe_params, batch, &ref_lps, beta)?;
        probe_params.set_flat(idx, orig);
        let fd = (up - down) / (2.0 * opts.step);
        let mut analytic = grads.get_flat(idx);
        if opts.corrupt_gradient {
            analytic = analytic * 1.5 + 1e-3;
        }
        // scale floor keeps finite-difference noise on near-zero entries from
        // registering as huge relative errors
        let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = theta.locate_flat(idx);
        }
    }

    if max_rel_err > opts.tolerance {
        return Err(Error::Verification {
            check: "gradient".into(),
            detail: format!(
                "max relative error {max_rel_err:.3e} > {:.1e} at {}[{}]",
                opts.tolerance, worst.0, worst.1
            ),
        });
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_param: worst.0,
        worst_offset: worst.1,
        probes,
        structural_max_rel_err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub beta: f64,
    /// Number of alignment iterations T.
    pub iterations: usize,
    pub lr: f64,
    pub steps_per_iteration: usize,
    pub batch_size: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            beta: 0.1,
            iterations: 3,
            lr: 1e-4,
            steps_per_iteration: 200,
            batch_size: 8,
            decode: DecodeConfig::default(),
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.decode.temperature < 0.0 {
            return Err(Error::config("temperature must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    /// Index of the policy that generated this cohort: report t describes
    /// samples from θ_t. Training reports run 0..T−1; a final evaluation
    /// report at index T describes samples from the finished model.
    pub iteration: usize,
    pub mean_distance: f64,
    pub mean_weight: f64,
    pub mean_heldout_margin: Option<f64>,
    pub losses: Vec<f64>,
}

pub struct IterationOutcome<T> {
    pub theta_next: LmParams<T>,
    pub report: IterationReport,
    pub distance_records: Vec<DistanceRecord>,
    pub generations: Vec<GenerationRecord>,
}

fn weights_hash(records: &[DistanceRecord]) -> String {
    let mut hasher = Sha256::new();
    for r in records {
        hasher.update(r.weight.to_le_bytes());
        hasher.update(r.s.to_le_bytes());
    }
    hex(&hasher.finalize())
}

/// Mean implicit margin of `theta` against `reference` on heldout prompts,
/// with loser responses sampled from `reference`.
fn mean_margin_on<T: Real>(
    theta: &LmParams<T>,
    reference: &LmParams<T>,
    heldout: &Dataset,
    beta: f64,
    decode: &DecodeConfig,
    stream_tag: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, pair) in heldout.pairs.iter().enumerate() {
        let seed = rng::derive_seed(decode.seed, Purpose::EvalGenA, i as u64, stream_tag);
        let per_pair = DecodeConfig { seed, ..*decode };
        let sample = sample_response(reference, &pair.prompt_tokens, &per_pair)?;
        let z = implicit_reward_margin(
            theta,
            reference,
            &pair.prompt_tokens,
            pair.response_body(),
            &sample.tokens,
            beta,
        )?;
        total += z;
    }
    Ok(total / heldout.len() as f64)
}

/// One alignment iteration over cohort `cohort` (samples from θ_cohort):
/// generate per-pair responses, weight each pair by its normalized latent
/// distance, then optimize the weighted preference loss with the generating
/// policy frozen as reference. Weights and reference stay fixed throughout.
pub fn align_iteration<T: Real>(
    theta_prev: &LmParams<T>,
    guide: &GuideParams<T>,
    dataset: &Dataset,
    heldout: Option<&Dataset>,
    config: &AlignConfig,
    cohort: usize,
) -> Result<IterationOutcome<T>> {
    config.validate()?;
    let ref_hash_before = theta_prev.content_hash();

    // stream tags are offset by one: tag 0 belongs to the guide-training cohort
    let generations =
        generate_for_dataset(theta_prev, dataset, &config.decode, cohort, cohort as u64 + 1)?;
    let records = distance_records(guide, dataset, &generations, cohort)?;
    let weights_before = weights_hash(&records);

    let batch_pool: Vec<WeightedPreferencePair> = dataset
        .pairs
        .iter()
        .zip(generations.iter().zip(records.iter()))
        .map(|(pair, (gen, rec))| WeightedPreferencePair {
            prompt: pair.prompt_tokens.clone(),
            win: pair.response_body().to_vec(),
            lose: gen.body().to_vec(),
            weight: rec.weight,
        })
        .collect();
    let ref_lps = reference_log_probs(theta_prev, &batch_pool)?;

    let mut theta = theta_prev.clone();
    let mut losses = Vec::with_capacity(config.steps_per_iteration);
    if config.steps_per_iteration > 0 {
        let mut adam = AdamState::new(&theta);
        let mut rng = rng::stream(config.seed, Purpose::AlignBatch, cohort as u64, 0);
        let mut step = 0;
        'outer: loop {
            let mut order: Vec<usize> = (0..batch_pool.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<WeightedPreferencePair> =
                    chunk.iter().map(|&i| batch_pool[i].clone()).collect();
                let lps: Vec<(f64, f64)> = chunk.iter().map(|&i| ref_lps[i]).collect();
                let (loss, grads) = dpo_grad_with_ref(&theta, &batch, &lps, config.beta)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step, loss });
                }
                adam.step(&mut theta, &grads, config.lr);
                losses.push(loss);
                step += 1;
                if step >= config.steps_per_iteration {
                    break 'outer;
                }
            }
        }
    }

    // the reference and the weight cohort must not have moved
    if theta_prev.content_hash() != ref_hash_before {
        return Err(Error::Verification {
            check: "reference-immutability".into(),
            detail: "reference parameters changed within an iteration".into(),
        });
    }
    if weights_hash(&records) != weights_before {
        return Err(Error::Verification {
            check: "weight-immutability".into(),
            detail: "distance weights changed within an iteration".into(),
        });
    }

    let n = records.len() as f64;
    let mean_distance = records.iter().map(|r| r.s).sum::<f64>() / n;
    let mean_weight = records.iter().map(|r| r.weight).sum::<f64>() / n;
    let mean_heldout_margin = match heldout {
        Some(h) => Some(mean_margin_on(
            &theta,
            theta_prev,
            h,
            config.beta,
            &config.decode,
            cohort as u64,
        )?),
        None => None,
    };

    Ok(IterationOutcome {
        theta_next: theta,
        report: IterationReport {
            iteration: cohort,
            mean_distance,
            mean_weight,
            mean_heldout_margin,
            losses,
        },
        distance_records: records,
        generations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLossRecord {
    pub iteration: usize,
    pub step: usize,
    pub loss: f64,
}

impl crate::metrics::CsvRecord for StepLossRecord {
    fn headers() -> &'static [&'static str] {
        &["iteration", "step", "loss"]
    }
}

fn persist_iteration<T: Real>(
    out_dir: &Path,
    cohort: usize,
    theta_next: Option<&LmParams<T>>,
    report: &IterationReport,
    records: &[DistanceRecord],
) -> Result<()> {
    let ckpt_dir = out_dir.join("checkpoints");
    let report_dir = out_dir.join("reports");
    let metrics_dir = out_dir.join("metrics");
    for d in [&ckpt_dir, &report_dir, &metrics_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    if let Some(theta) = theta_next {
        crate::checkpoint::save_lm(&ckpt_dir.join(format!("theta_{}", cohort + 1)), &theta.cast())?;
    }
    let report_path = report_dir.join(format!("iteration_{cohort}.json"));
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(&report_path, json).map_err(|e| Error::io(&report_path, e))?;
    crate::metrics::write_csv(
        &metrics_dir.join(format!("distances_{cohort}.csv")),
        records,
        false,
    )?;
    if !report.losses.is_empty() {
        let rows: Vec<StepLossRecord> = report
            .losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| StepLossRecord {
                iteration: cohort,
                step,
                loss,
            })
            .collect();
        crate::metrics::write_csv(
            &metrics_dir.join(format!("align_loss_{cohort}.csv")),
            &rows,
            false,
        )?;
    }
    Ok(())
}

/// Run T alignment iterations from a fine-tuned model with a trained, frozen
/// guide, chaining θ_{t} → θ_{t+1} with the reference reset each iteration.
/// Appends a final evaluation report (cohort from the finished model) so the
/// report list covers iterations 0..=T. With `out_dir` set, each iteration
/// persists a checkpoint, report JSON, distance CSV, and loss CSV.
pub fn run_ld_align<T: Real>(
    theta_0: &LmParams<T>,
    guide: &GuideParams<T>,
    train: &Dataset,
    heldout: Option<&Dataset>,
    config: &AlignConfig,
    out_dir: Option<&Path>,
) -> Result<(LmParams<T>, Vec<IterationReport>)> {
    config.validate()?;
    let mut theta = theta_0.clone();
    let mut reports = Vec::new();
    if config.iterations == 0 {
        return Ok((theta, reports));
    }
    for t in 0..config.iterations {
        let outcome = align_iteration(&theta, guide, train, heldout, config, t)
            .map_err(|e| e.at_iteration(t))?;
        if let Some(dir) = out_dir {
            persist_iteration(
                dir,
                t,
                Some(&outcome.theta_next),
                &outcome.report,
                &outcome.distance_records,
            )
            .map_err(|e| e.at_iteration(t))?;
        }
        reports.push(outcome.report);
        theta = outcome.theta_next;
    }

    // final evaluation cohort: how far the finished model sits from gold
    let t_final = config.iterations;
    let generations =
        generate_for_dataset(&theta, train, &config.decode, t_final, t_final as u64 + 1)
            .map_err(|e| e.at_iteration(t_final))?;
    let records = distance_records(guide, train, &generations, t_final)
        .map_err(|e| e.at_iteration(t_final))?;
    let n = records.len() as f64;
    let mean_heldout_margin = match heldout {
        Some(h) => Some(
            mean_margin_on(&theta, theta_0, h, config.beta, &config.decode, t_final as u64)
                .map_err(|e| e.at_iteration(t_final))?,
        ),
        None => None,
    };
    let final_report = IterationReport {
        iteration: t_final,
        mean_distance: records.iter().map(|r| r.s).sum::<f64>() / n,
        mean_weight: records.iter().map(|r| r.weight).sum::<f64>() / n,
        mean_heldout_margin,
        losses: Vec::new(),
    };
    if let Some(dir) = out_dir {
        persist_iteration::<T>(dir, t_final, None, &final_report, &records)
            .map_err(|e| e.at_iteration(t_final))?;
    }
    reports.push(final_report);
    Ok((theta, reports))
}

/// The full pipeline: sample the initial cohort from θ_0, train the guide
/// once on it, freeze it, then run the alignment loop.
pub fn run_ld_align_full<T: Real>(
    theta_0: &LmParams<T>,
    guide_init: &GuideParams<T>,
    guide_hyper: &crate::lm::TrainHyper,
    train: &Dataset,
    heldout: Option<&Dataset>,
    config: &AlignConfig,
    out_dir: Option<&Path>,
) -> Result<(GuideParams<T>, LmParams<T>, Vec<IterationReport>)> {
    config.validate()?;
    let theta_hash = theta_0.content_hash();
    let generations = generate_for_dataset(theta_0, train, &config.decode, 0, 0)?;
    let guide = crate::guide::train_guide(
        guide_init,
        train,
        &generations,
        guide_hyper,
        &mut crate::metrics::NullSink,
    )?;
    if theta_0.content_hash() != theta_hash {
        return Err(Error::Verification {
            check: "parameter-isolation".into(),
            detail: "guide training mutated language model parameters".into(),
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::corpus::save_generations(&dir.join("generations_0.jsonl"), &generations)?;
        crate::checkpoint::save_guide(&dir.join("checkpoints").join("guide"), &guide.cast())?;
    }
    let (theta_t, reports) = run_ld_align(theta_0, &guide, train, heldout, config, out_dir)?;
    Ok((guide, theta_t, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{PromptResponsePair, SplitTag};
    use crate::guide::GuideConfig;
    use crate::lm::LMConfig;

    fn tiny_lm_config() -> LMConfig {
        LMConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            context_len: 24,
            vocab_size: 12,
        }
    }

    fn tiny_pair_batch(n: usize) -> Vec<WeightedPreferencePair> {
        (0..n)
            .map(|i| WeightedPreferencePair {
                prompt: vec![(i % 4) as u32, 1],
                win: vec![2, (3 + i % 3) as u32],
                lose: vec![6, (i % 5) as u32],
                weight: 0.25 + 0.5 * (i % 4) as f64,
            })
            .collect()
    }

    #[test]
    fn bradley_terry_symmetric_and_hand_values() {
        assert_eq!(bradley_terry(0.0, 0.0), 0.5);
        assert!((bradley_terry(3.0f64.ln(), 0.0) - 0.75).abs() < 1e-12);
        // frozen from a high-precision evaluation of exp-ratio form
        assert!((bradley_terry(1.2, -0.3) - 0.8175744761936437).abs() < 1e-12);
    }

    #[test]
    fn bradley_terry_complement_and_shift_invariance() {
        let mut rng = rng::stream(1, Purpose::Probe, 0, 0);
        for _ in 0..200 {
            let a: f64 = rng.gen_range(-8.0..8.0);
            let b: f64 = rng.gen_range(-8.0..8.0);
            let c: f64 = rng.gen_range(-5.0..5.0);
            assert!((bradley_terry(a, b) + bradley_terry(b, a) - 1.0).abs() < 1e-12);
            assert!((bradley_terry(a + c, b + c) - bradley_terry(a, b)).abs() < 1e-12);
            assert!(bradley_terry(a, b) > 0.0 && bradley_terry(a, b) < 1.0);
        }
    }

    #[test]
    fn margin_zero_at_reference_and_antisymmetric() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 1).unwrap();
        let z = implicit_reward_margin(&theta, &theta, &[0, 1], &[2], &[3], 0.1).unwrap();
        assert_eq!(z, 0.0);

        let other = LmParams::<f64>::init(tiny_lm_config(), 2).unwrap();
        let fwd = implicit_reward_margin(&theta, &other, &[0, 1], &[2], &[3], 0.1).unwrap();
        let rev = implicit_reward_margin(&theta, &other, &[0, 1], &[3], &[2], 0.1).unwrap();
        assert_eq!(fwd, -rev);
        assert_ne!(fwd, 0.0);
    }

    #[test]
    fn margin_hand_arithmetic() {
        // θ gives (−1, −4), ref gives (−2, −3), β = 0.1 → 0.1·((−1+2) − (−4+3)) = 0.2
        let z = 0.1 * ((-1.0f64 - -2.0) - (-4.0f64 - -3.0));
        assert!((z - 0.2).abs() < 1e-15);
    }

    #[test]
    fn pair_loss_frozen_oracle_value() {
        // softplus(−2) · 1.5, frozen from a high-precision oracle
        assert!((pair_loss(2.0, 1.5) - 0.19039201656445874).abs() < 1e-12);
        assert_eq!(pair_loss(3.0, 0.0), 0.0);
    }

    #[test]
    fn loss_at_reference_point_is_mean_weight_ln2() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 3).unwrap();
        let batch = tiny_pair_batch(5);
        let mean_w: f64 = batch.iter().map(|p| p.weight).sum::<f64>() / batch.len() as f64;
        let loss = weighted_dpo_loss(&theta, &theta, &batch, 0.1).unwrap();
        assert!((loss - mean_w * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_is_exactly_linear_in_weights() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 4).unwrap();
        let reference = LmParams::<f64>::init(tiny_lm_config(), 5).unwrap();
        let batch = tiny_pair_batch(4);
        let doubled: Vec<WeightedPreferencePair> = batch
            .iter()
            .map(|p| WeightedPreferencePair {
                weight: 2.0 * p.weight,
                ..p.clone()
            })
            .collect();
        let a = weighted_dpo_loss(&theta, &reference, &batch, 0.1).unwrap();
        let b = weighted_dpo_loss(&theta, &reference, &doubled, 0.1).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn uniform_weights_match_independent_dpo_formula() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 6).unwrap();
        let reference = LmParams::<f64>::init(tiny_lm_config(), 7).unwrap();
        let mut batch = tiny_pair_batch(6);
        for p in batch.iter_mut() {
            p.weight = 1.0;
        }
        let loss = weighted_dpo_loss(&theta, &reference, &batch, 0.1).unwrap();
        // independent route: −mean log σ(z) with z from public log-probs
        let mut oracle = 0.0;
        for p in &batch {
            let z = implicit_reward_margin(&theta, &reference, &p.prompt, &p.win, &p.lose, 0.1)
                .unwrap();
            oracle -= sigmoid(z).ln();
        }
        oracle /= batch.len() as f64;
        assert!((loss - oracle).abs() < 1e-10, "{loss} vs {oracle}");
    }

    #[test]
    fn zero_weights_give_exactly_zero_gradient() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 8).unwrap();
        let reference = LmParams::<f64>::init(tiny_lm_config(), 9).unwrap();
        let mut batch = tiny_pair_batch(3);
        for p in batch.iter_mut() {
            p.weight = 0.0;
        }
        let (_, grads) = weighted_dpo_grad(&theta, &reference, &batch, 0.1).unwrap();
        for a in grads.arrays() {
            assert!(a.data.iter().all(|&g| g == 0.0), "nonzero grad in {}", a.name);
        }
    }

    #[test]
    fn doubling_weights_doubles_the_gradient_exactly() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 10).unwrap();
        let reference = LmParams::<f64>::init(tiny_lm_config(), 11).unwrap();
        let batch = tiny_pair_batch(3);
        let doubled: Vec<WeightedPreferencePair> = batch
            .iter()
            .map(|p| WeightedPreferencePair {
                weight: 2.0 * p.weight,
                ..p.clone()
            })
            .collect();
        let (_, g1) = weighted_dpo_grad(&theta, &reference, &batch, 0.1).unwrap();
        let (_, g2) = weighted_dpo_grad(&theta, &reference, &doubled, 0.1).unwrap();
        for (a, b) in g1.arrays().iter().zip(g2.arrays().iter()) {
            for (&x, &y) in a.data.iter().zip(b.data.iter()) {
                assert_eq!(y, 2.0 * x, "array {}", a.name);
            }
        }
    }

    #[test]
    fn gradient_verifier_passes_on_random_tiny_model() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 12).unwrap();
        let reference = LmParams::<f64>::init(tiny_lm_config(), 13).unwrap();
        let batch = tiny_pair_batch(4);
        let report =
            verify_gradient(&theta, &reference, &batch, 0.1, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err < 1e-4, "{}", report.max_rel_err);
        assert_eq!(report.probes, 64);
    }

    #[test]
    fn gradient_verifier_catches_corruption() {
        let theta = LmParams::<f64>::init(tiny_lm_config(), 14).unwrap();
        let reference = LmParams::<f64>::init(tiny_lm_config(), 15).unwrap();
        let batch = tiny_pair_batch(4);
        let opts = GradCheckOptions {
            corrupt_gradient: true,
            ..Default::default()
        };
        match verify_gradient(&theta, &reference, &batch, 0.1, &opts) {
            Err(Error::Verification { check, .. }) => assert_eq!(check, "gradient"),
            other => panic!("expected verification failure, got {other:?}"),
        }
    }

    #[test]
    fn gradient_verifier_rejects_large_models() {
        let theta = LmParams::<f64>::init(LMConfig::default(), 1).unwrap();
        let batch = tiny_pair_batch(1);
        assert!(verify_gradient(&theta, &theta.clone(), &batch, 0.1, &Default::default()).is_err());
    }

    fn toy_world() -> (LmParams<f32>, GuideParams<f32>, Dataset) {
        let lm_cfg = LMConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            context_len: 32,
            vocab_size: 260,
        };
        let shape = LMConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            context_len: 32,
            vocab_size: 260,
        };
        let g_cfg = GuideConfig {
            latent_dim: 4,
            encoder: shape,
            decoder: shape,
        };
        let pairs = (0..6)
            .map(|i| PromptResponsePair::new(vec![97 + i as u32, 98], vec![99, 100 + i as u32]).unwrap())
            .collect();
        (
            LmParams::init(lm_cfg, 20).unwrap(),
            GuideParams::init(g_cfg, 21).unwrap(),
            Dataset::new(pairs, "mem".into(), SplitTag::Train).unwrap(),
        )
    }

    fn smoke_config(iterations: usize, steps: usize) -> AlignConfig {
        AlignConfig {
            beta: 0.1,
            iterations,
            lr: 1e-3,
            steps_per_iteration: steps,
            batch_size: 3,
            decode: DecodeConfig {
                temperature: 1.0,
                max_new_tokens: 6,
                seed: 9,
            },
            seed: 17,
        }
    }

    #[test]
    fn align_iteration_zero_steps_is_identity_with_unit_mean_weight() {
        let (theta, guide, ds) = toy_world();
        let outcome = align_iteration(&theta, &guide, &ds, None, &smoke_config(1, 0), 0).unwrap();
        assert_eq!(outcome.theta_next.content_hash(), theta.content_hash());
        assert!((outcome.report.mean_weight - 1.0).abs() < 1e-9);
        assert_eq!(outcome.report.iteration, 0);
        assert!(outcome.report.losses.is_empty());
        assert_eq!(outcome.generations.len(), ds.len());
    }

    #[test]
    fn run_ld_align_t0_returns_input_with_no_reports() {
        let (theta, guide, ds) = toy_world();
        let (theta_out, reports) =
            run_ld_align(&theta, &guide, &ds, None, &smoke_config(0, 5), None).unwrap();
        assert!(reports.is_empty());
        assert_eq!(theta_out.content_hash(), theta.content_hash());
    }

    #[test]
    fn run_ld_align_is_deterministic_and_reports_cover_final_cohort() {
        let (theta, guide, ds) = toy_world();
        let config = smoke_config(2, 4);
        let (a, reports_a) = run_ld_align(&theta, &guide, &ds, None, &config, None).unwrap();
        let (b, reports_b) = run_ld_align(&theta, &guide, &ds, None, &config, None).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(reports_a, reports_b);
        // iterations 0, 1 plus the final evaluation entry at index 2
        assert_eq!(reports_a.len(), 3);
        assert_eq!(reports_a[0].iteration, 0);
        assert_eq!(reports_a[2].iteration, 2);
        assert!(reports_a[2].losses.is_empty());
        for r in &reports_a {
            assert!((r.mean_weight - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn run_ld_align_persists_checkpoints_and_reports() {
        let (theta, guide, ds) = toy_world();
        let dir = tempfile::tempdir().unwrap();
        let config = smoke_config(1, 2);
        run_ld_align(&theta, &guide, &ds, None, &config, Some(dir.path())).unwrap();
        assert!(dir.path().join("checkpoints/theta_1/manifest.json").exists());
        assert!(dir.path().join("reports/iteration_0.json").exists());
        assert!(dir.path().join("reports/iteration_1.json").exists());
        assert!(dir.path().join("metrics/distances_0.csv").exists());
        assert!(dir.path().join("metrics/distances_1.csv").exists());
        assert!(dir.path().join("metrics/align_loss_0.csv").exists());
        let ckpt = crate::checkpoint::load_lm(&dir.path().join("checkpoints/theta_1")).unwrap();
        assert_eq!(ckpt.config, theta.config);
    }
}
