//! Evaluation and analysis of a trained model under sparse expert selection.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::eval_windows;
use crate::error::{Error, Result};
use crate::gating::{GateBatch, SelectionStrategy};
use crate::model::{active_flops_per_token, count_params_active, ActiveParams, DsMoeModel, GateRecord, LayerKind};
use crate::tensor::{token_nll, Tensor};

/// Windows per forward pass. Fixed so that batch-level selection rules see
/// the same batches whatever the thread count.
pub const EVAL_CHUNK: usize = 8;

/// Relative perplexity increase over dense that marks the knee of a sweep.
pub const KNEE_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub strategy: SelectionStrategy,
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
    pub windows: usize,
    pub active: ActiveParams,
    /// Gate records of all windows, concatenated per layer.
    pub gates: Vec<GateRecord>,
}

fn merge_gates(parts: Vec<Vec<GateRecord>>) -> Result<Vec<GateRecord>> {
    let mut iter = parts.into_iter();
    let Some(first) = iter.next() else {
        return Ok(Vec::new());
    };
    let mut scores: Vec<Vec<f64>> = first.iter().map(|r| r.gate.scores.data().to_vec()).collect();
    let mut merged = first;
    for part in iter {
        for (j, rec) in part.into_iter().enumerate() {
            scores[j].extend_from_slice(rec.gate.scores.data());
            merged[j].gate.selected.extend(rec.gate.selected);
        }
    }
    for (rec, s) in merged.iter_mut().zip(scores) {
        let n = rec.gate.num_experts();
        rec.gate.scores = Tensor::new(&[s.len() / n, n], s)?;
    }
    Ok(merged)
}

/// Perplexity over non-overlapping input windows of `seq_len` tokens. With
/// `max_windows`, only the leading windows are used.
pub fn eval_perplexity(
    model: &DsMoeModel,
    tokens: &[usize],
    seq_len: usize,
    strategy: SelectionStrategy,
    max_windows: Option<usize>,
) -> Result<EvalReport> {
    strategy.validate(model.config.n_ffd.max(model.config.n_att))?;
    let mut windows = eval_windows(tokens, seq_len)?;
    if let Some(m) = max_windows {
        windows.truncate(m.max(1));
    }
    let chunks: Vec<_> = windows.chunks(EVAL_CHUNK).collect();
    let parts: Vec<Result<(f64, Vec<GateRecord>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let inputs: Vec<Vec<usize>> = chunk.iter().map(|w| w.0.clone()).collect();
            let out = model.forward(&inputs, strategy)?;
            let vocab = model.config.vocab_size;
            let len = inputs[0].len();
            let mut nll = 0.0;
            for (b, (_, targets)) in chunk.iter().enumerate() {
                for (p, &t) in targets.iter().enumerate() {
                    let row = (b * len + p) * vocab;
                    nll += token_nll(&out.logits.data()[row..row + vocab], t);
                }
            }
            Ok((nll, out.gates))
        })
        .collect();
    let mut total_nll = 0.0;
    let mut gate_parts = Vec::with_capacity(parts.len());
    for part in parts {
        let (nll, gates) = part?;
        total_nll += nll;
        gate_parts.push(gates);
    }
    let n_tokens: usize = windows.iter().map(|w| w.1.len()).sum();
    let mean_nll = total_nll / n_tokens as f64;
    let gates = merge_gates(gate_parts)?;
    let active = count_params_active(&model.config, &gates);
    Ok(EvalReport {
        strategy,
        ppl: mean_nll.exp(),
        mean_nll,
        tokens: n_tokens,
        windows: windows.len(),
        active,
        gates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStat {
    pub layer: usize,
    pub kind: LayerKind,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-layer fraction `|A|/N` of activated experts, over tokens.
pub fn layer_utilization(gates: &[GateRecord]) -> Vec<UtilizationStat> {
    gates
        .iter()
        .map(|r| {
            let n = r.gate.num_experts() as f64;
            let fr: Vec<f64> = r.gate.selected.iter().map(|s| s.len() as f64 / n).collect();
            let count = fr.len().max(1) as f64;
            UtilizationStat {
                layer: r.layer,
                kind: r.kind,
                mean: fr.iter().sum::<f64>() / count,
                min: fr.iter().copied().fold(f64::INFINITY, f64::min),
                max: fr.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub strategy: SelectionStrategy,
    pub active_params: f64,
    pub active_hidden_fraction: f64,
    pub ppl: f64,
    pub utilization: Vec<UtilizationStat>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub dense_ppl: f64,
    /// Most to least active.
    pub points: Vec<SweepPoint>,
    /// Index into `points` of the first point worse than dense by more
    /// than [`KNEE_TOLERANCE`].
    pub knee: Option<usize>,
}

/// `N, N/2, N/4, ..., 1` TopK strategies.
pub fn topk_grid(num_experts: usize) -> Vec<SelectionStrategy> {
    let mut out = Vec::new();
    let mut k = num_experts;
    while k >= 1 {
        out.push(SelectionStrategy::TopK { k });
        if k == 1 {
            break;
        }
        k /= 2;
    }
    out
}

pub fn sparsity_sweep(
    model: &DsMoeModel,
    tokens: &[usize],
    seq_len: usize,
    grid: &[SelectionStrategy],
    max_windows: Option<usize>,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::Strategy("empty sweep grid".into()));
    }
    let dense = eval_perplexity(model, tokens, seq_len, SelectionStrategy::Dense, max_windows)?;
    let mut points = Vec::with_capacity(grid.len());
    for &strategy in grid {
        let r = eval_perplexity(model, tokens, seq_len, strategy, max_windows)?;
        points.push(SweepPoint {
            strategy,
            active_params: r.active.active_total,
            active_hidden_fraction: r.active.active_hidden_fraction,
            ppl: r.ppl,
            utilization: layer_utilization(&r.gates),
        });
    }
    points.sort_by(|a, b| b.active_params.total_cmp(&a.active_params));
    let limit = dense.ppl * (1.0 + KNEE_TOLERANCE);
    let knee = points.iter().position(|p| p.ppl > limit);
    Ok(SweepReport {
        dense_ppl: dense.ppl,
        points,
        knee,
    })
}

#[derive(Serialize)]
struct SweepRow<'a> {
    strategy: String,
    active_params: f64,
    active_hidden_fraction: f64,
    ppl: f64,
    dense_ppl: f64,
    knee: &'a str,
}

impl SweepReport {
    /// One row per point with a `knee` marker column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            w.serialize(SweepRow {
                strategy: p.strategy.to_string(),
                active_params: p.active_params,
                active_hidden_fraction: p.active_hidden_fraction,
                ppl: p.ppl,
                dense_ppl: self.dense_ppl,
                knee: if self.knee == Some(i) { "yes" } else { "" },
            })
            .map_err(|e| Error::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Logits that produced each generated token.
    pub logits: Vec<Vec<f64>>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn pick(logits: &[f64], sampler: Sampler, rng: &mut ChaCha8Rng) -> Result<usize> {
    match sampler {
        Sampler::Greedy => Ok(argmax(logits)),
        Sampler::Temperature { temperature, .. } => {
            if !(temperature > 0.0) {
                return Err(Error::Data(format!("temperature must be positive, got {temperature}")));
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| ((l - m) / temperature).exp()).collect();
            let dist = WeightedIndex::new(&w).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
            Ok(dist.sample(rng))
        }
    }
}

/// Continues `prompt` by `n_tokens`. With `use_cache` the per-layer KV
/// caches are used; otherwise every step reruns the full forward pass.
pub fn generate(
    model: &DsMoeModel,
    prompt: &[usize],
    n_tokens: usize,
    strategy: SelectionStrategy,
    sampler: Sampler,
    use_cache: bool,
) -> Result<Generation> {
    if prompt.is_empty() {
        return Err(Error::Data("prompt must contain at least one token".into()));
    }
    let max = model.config.max_seq_len;
    if prompt.len() + n_tokens > max {
        return Err(Error::CacheOverflow { capacity: max });
    }
    let seed = match sampler {
        Sampler::Temperature { seed, .. } => seed,
        Sampler::Greedy => 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Generation {
        tokens: Vec::with_capacity(n_tokens),
        logits: Vec::with_capacity(n_tokens),
    };
    if n_tokens == 0 {
        return Ok(out);
    }
    if use_cache {
        let mut caches = model.new_caches(prompt.len() + n_tokens);
        let mut logits = Vec::new();
        for &t in prompt {
            logits = model.decode_step(t, &mut caches, strategy)?;
        }
        loop {
            let next = pick(&logits, sampler, &mut rng)?;
            out.tokens.push(next);
            out.logits.push(logits);
            if out.tokens.len() == n_tokens {
                break;
            }
            logits = model.decode_step(next, &mut caches, strategy)?;
        }
    } else {
        let mut seq = prompt.to_vec();
        let vocab = model.config.vocab_size;
        while out.tokens.len() < n_tokens {
            let f = model.forward(std::slice::from_ref(&seq), strategy)?;
            let last = (seq.len() - 1) * vocab;
            let logits = f.logits.data()[last..last + vocab].to_vec();
            let next = pick(&logits, sampler, &mut rng)?;
            out.tokens.push(next);
            out.logits.push(logits);
            seq.push(next);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStat {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl TimingStat {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        TimingStat {
            mean,
            std: var.sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub strategy: SelectionStrategy,
    pub batch: usize,
    pub seq_len: usize,
    pub n_decode: usize,
    pub repetitions: usize,
    pub input_tokens_per_sec: TimingStat,
    pub output_tokens_per_sec: TimingStat,
    pub prefill_seconds: TimingStat,
    pub decode_seconds: TimingStat,
    pub prefill_flops_per_token: f64,
    pub decode_flops_per_token: f64,
}

pub const MIN_BENCH_REPS: usize = 5;

/// Times a batched prefill and per-stream cached decoding. One warmup
/// repetition is discarded; at least [`MIN_BENCH_REPS`] are measured.
pub fn throughput_bench(
    model: &DsMoeModel,
    batch: usize,
    seq_len: usize,
    n_decode: usize,
    strategy: SelectionStrategy,
    repetitions: usize,
    seed: u64,
) -> Result<BenchReport> {
    let reps = repetitions.max(MIN_BENCH_REPS);
    if batch == 0 || seq_len == 0 || n_decode == 0 {
        return Err(Error::Data("bench sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size;
    let inputs: Vec<Vec<usize>> = (0..batch)
        .map(|_| (0..seq_len).map(|_| rng.random_range(0..vocab)).collect())
        .collect();
    let mut prefill = Vec::with_capacity(reps);
    let mut decode = Vec::with_capacity(reps);
    let mut gates = Vec::new();
    let mut decode_gates = Vec::new();
    for rep in 0..=reps {
        let t0 = Instant::now();
        let out = model.forward(&inputs, strategy)?;
        let dt_prefill = t0.elapsed().as_secs_f64();

        let t0 = Instant::now();
        for row in &inputs {
            generate(model, &row[..1], n_decode, strategy, Sampler::Greedy, true)?;
        }
        let dt_decode = t0.elapsed().as_secs_f64();
        if rep == 0 {
            gates = out.gates;
            let gen = generate(model, &inputs[0][..1], n_decode, strategy, Sampler::Greedy, true)?;
            let mut seq = vec![inputs[0][0]];
            seq.extend(&gen.tokens[..gen.tokens.len() - 1]);
            decode_gates = model.forward(&[seq], strategy)?.gates;
            continue;
        }
        prefill.push(dt_prefill);
        decode.push(dt_decode);
    }
    let rate = |secs: &[f64], n: usize| -> Vec<f64> { secs.iter().map(|s| n as f64 / s.max(1e-12)).collect() };
    Ok(BenchReport {
        strategy,
        batch,
        seq_len,
        n_decode,
        repetitions: reps,
        input_tokens_per_sec: TimingStat::from_samples(&rate(&prefill, batch * seq_len)),
        output_tokens_per_sec: TimingStat::from_samples(&rate(&decode, batch * n_decode)),
        prefill_seconds: TimingStat::from_samples(&prefill),
        decode_seconds: TimingStat::from_samples(&decode),
        prefill_flops_per_token: active_flops_per_token(&model.config, &gates, (seq_len + 1) as f64 / 2.0),
        decode_flops_per_token: active_flops_per_token(&model.config, &decode_gates, (n_decode + 1) as f64 / 2.0),
    })
}

/// Selection masks for one layer as a flat boolean table, for external
/// recounting.
pub fn gate_masks(gate: &GateBatch) -> Vec<Vec<bool>> {
    (0..gate.tokens()).map(|t| gate.mask(t)).collect()
}
