//! Multi-objective genetic search over clip masks and exit quantiles:
//! genome encoding, fast non-dominated sorting, rank-weighted selection,
//! and the evolutionary loop.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::clipping::ClipMask;
use crate::error::{Error, Result};
use crate::objectives::{evaluate_candidate, EvalContext, ExitSetting, ObjectiveVector, RuntimeModel};
use crate::sae::SaeShape;

/// Final-exit calibration quantile used when exit genes are frozen.
pub const FROZEN_FINAL_QUANTILE: f64 = 0.95;

/// Clip bits over all hidden neurons (layer-major) plus one 32-bit float
/// pattern per exit, the last being the final threshold quantile.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    pub clip_bits: Vec<bool>,
    pub exit_patterns: Vec<u32>,
}

impl Genome {
    pub fn expected_clip_len(shape: &SaeShape) -> usize {
        shape.widths.iter().sum()
    }

    /// Canonical byte form: clip bits packed MSB-first, then each pattern
    /// little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.clip_bits.len() / 8 + 1 + 4 * self.exit_patterns.len());
        let mut acc = 0u8;
        let mut used = 0;
        for &bit in &self.clip_bits {
            acc = (acc << 1) | bit as u8;
            used += 1;
            if used == 8 {
                bytes.push(acc);
                acc = 0;
                used = 0;
            }
        }
        if used > 0 {
            bytes.push(acc << (8 - used));
        }
        for p in &self.exit_patterns {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        bytes
    }

    pub fn to_hex(&self) -> String {
        self.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits the clip segment into per-layer masks and reinterprets exit
/// patterns as quantiles. Repairs: NaN/infinite patterns become 0.5, finite
/// ones clamp into [0,1]; an all-zero layer keeps its highest-index neuron.
pub fn decode_genome(g: &Genome, shape: &SaeShape) -> Result<(ClipMask, Vec<f64>)> {
    if g.clip_bits.len() != Genome::expected_clip_len(shape) {
        return Err(Error::DimensionMismatch(format!(
            "clip segment has {} bits, shape needs {}",
            g.clip_bits.len(),
            Genome::expected_clip_len(shape)
        )));
    }
    if g.exit_patterns.len() != shape.num_exits() {
        return Err(Error::DimensionMismatch(format!(
            "exit segment has {} patterns, shape has {} exits",
            g.exit_patterns.len(),
            shape.num_exits()
        )));
    }
    let mut layers = Vec::with_capacity(shape.widths.len());
    let mut offset = 0;
    for &width in &shape.widths {
        let mut bits = g.clip_bits[offset..offset + width].to_vec();
        if !bits.iter().any(|b| *b) {
            bits[width - 1] = true;
        }
        layers.push(bits);
        offset += width;
    }
    let mask = ClipMask::new(layers, shape)?;
    let quantiles = g
        .exit_patterns
        .iter()
        .map(|p| {
            let v = f32::from_bits(*p);
            if v.is_finite() {
                (v as f64).clamp(0.0, 1.0)
            } else {
                0.5
            }
        })
        .collect();
    Ok((mask, quantiles))
}

/// True iff `a` is no worse in every minimized coordinate and strictly
/// better in at least one.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> bool {
    let am = a.minimized();
    let bm = b.minimized();
    let mut strict = false;
    for (x, y) in am.iter().zip(&bm) {
        if x > y {
            return false;
        }
        if x < y {
            strict = true;
        }
    }
    strict
}

/// Fronts F_1..F_k with per-individual 1-based ranks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrontSet {
    fronts: Vec<Vec<usize>>,
    ranks: Vec<usize>,
}

impl FrontSet {
    pub fn fronts(&self) -> &[Vec<usize>] {
        &self.fronts
    }

    pub fn first_front(&self) -> &[usize] {
        &self.fronts[0]
    }

    pub fn rank(&self, individual: usize) -> usize {
        self.ranks[individual]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn num_fronts(&self) -> usize {
        self.fronts.len()
    }

    pub fn population_len(&self) -> usize {
        self.ranks.len()
    }
}

/// Builds each individual's dominated set and domination counter, peels
/// F_1 = {n_p = 0}, then iteratively decrements counters front by front.
pub fn fast_nondominated_sort(objs: &[ObjectiveVector]) -> FrontSet {
    let n = objs.len();
    let mut dominated: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut counter = vec![0usize; n];
    for p in 0..n {
        for q in p + 1..n {
            if dominates(&objs[p], &objs[q]) {
                dominated[p].push(q);
                counter[q] += 1;
            } else if dominates(&objs[q], &objs[p]) {
                dominated[q].push(p);
                counter[p] += 1;
            }
        }
    }
    let mut ranks = vec![0usize; n];
    let mut current: Vec<usize> = (0..n).filter(|&p| counter[p] == 0).collect();
    let mut fronts = Vec::new();
    let mut rank = 1;
    while !current.is_empty() {
        for &p in &current {
            ranks[p] = rank;
        }
        let mut next = Vec::new();
        for &p in &current {
            for &q in &dominated[p] {
                counter[q] -= 1;
                if counter[q] == 0 {
                    next.push(q);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
        rank += 1;
    }
    FrontSet { fronts, ranks }
}

/// Rank-weighted selection: an individual in front Z_i gets
/// (1/i) / Σ_j (1/j)·count(Z_j).
pub fn selection_probabilities(fronts: &FrontSet) -> Vec<f64> {
    let mut denom = 0.0;
    for (i, front) in fronts.fronts.iter().enumerate() {
        denom += front.len() as f64 / (i + 1) as f64;
    }
    fronts
        .ranks
        .iter()
        .map(|rank| (1.0 / *rank as f64) / denom)
        .collect()
}

/// GA hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 || self.population % 2 != 0 {
            return Err(Error::InvalidParam(format!(
                "population must be even and >= 4, got {}",
                self.population
            )));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return Err(Error::InvalidParam(format!(
                "crossover_rate must be in [0,1], got {}",
                self.crossover_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::InvalidParam(format!(
                "mutation_rate must be in [0,1], got {}",
                self.mutation_rate
            )));
        }
        if self.elitism > self.population {
            return Err(Error::InvalidParam(format!(
                "elitism {} exceeds population {}",
                self.elitism, self.population
            )));
        }
        Ok(())
    }
}

fn roulette(probabilities: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probabilities.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probabilities.len() - 1
}

fn crossover_bits(a: &mut [bool], b: &mut [bool], rng: &mut ChaCha8Rng) {
    if a.len() < 2 {
        return;
    }
    let point = rng.gen_range(1..a.len());
    for i in point..a.len() {
        std::mem::swap(&mut a[i], &mut b[i]);
    }
}

fn crossover_patterns(a: &mut [u32], b: &mut [u32], rng: &mut ChaCha8Rng) {
    let total_bits = a.len() * 32;
    if total_bits < 2 {
        return;
    }
    let point = rng.gen_range(1..total_bits);
    for bit in point..total_bits {
        let (word, offset) = (bit / 32, 31 - bit % 32);
        let mask = 1u32 << offset;
        let av = a[word] & mask;
        let bv = b[word] & mask;
        a[word] = (a[word] & !mask) | bv;
        b[word] = (b[word] & !mask) | av;
    }
}

fn mutate(g: &mut Genome, rate: f64, rng: &mut ChaCha8Rng) {
    for bit in g.clip_bits.iter_mut() {
        if rng.gen_bool(rate) {
            *bit = !*bit;
        }
    }
    for pattern in g.exit_patterns.iter_mut() {
        for offset in (0..32).rev() {
            if rng.gen_bool(rate) {
                *pattern ^= 1 << offset;
            }
        }
    }
}

/// One generation: non-dominated sort, rank-weighted roulette selection,
/// per-segment single-point crossover, per-bit mutation, and elitism.
pub fn evolve_step(
    pop: &[Genome],
    objs: &[ObjectiveVector],
    cfg: &GaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Genome>> {
    cfg.validate()?;
    if pop.len() != cfg.population || objs.len() != cfg.population {
        return Err(Error::DimensionMismatch(format!(
            "population {} and objectives {} must both match cfg.population {}",
            pop.len(),
            objs.len(),
            cfg.population
        )));
    }
    let fronts = fast_nondominated_sort(objs);
    let probs = selection_probabilities(&fronts);

    // elites: lowest rank first, index as the tiebreak, emitted in original
    // order so full elitism reproduces the population exactly
    let mut by_rank: Vec<usize> = (0..pop.len()).collect();
    by_rank.sort_by_key(|&i| (fronts.rank(i), i));
    let mut elite_idx: Vec<usize> = by_rank.into_iter().take(cfg.elitism).collect();
    elite_idx.sort_unstable();

    let mut next: Vec<Genome> = elite_idx.iter().map(|&i| pop[i].clone()).collect();
    while next.len() < cfg.population {
        let pa = &pop[roulette(&probs, rng)];
        let pb = &pop[roulette(&probs, rng)];
        let mut child_a = pa.clone();
        let mut child_b = pb.clone();
        if rng.gen_bool(cfg.crossover_rate) {
            crossover_bits(&mut child_a.clip_bits, &mut child_b.clip_bits, rng);
        }
        if rng.gen_bool(cfg.crossover_rate) {
            crossover_patterns(&mut child_a.exit_patterns, &mut child_b.exit_patterns, rng);
        }
        mutate(&mut child_a, cfg.mutation_rate, rng);
        mutate(&mut child_b, cfg.mutation_rate, rng);
        next.push(child_a);
        if next.len() < cfg.population {
            next.push(child_b);
        }
    }
    Ok(next)
}

/// Which genome segments the optimizer may evolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerMode {
    /// Exit genes frozen; early exits disabled, final quantile fixed.
    ClipOnly,
    /// Clip genes frozen at all-ones.
    ExitOnly,
    Joint,
}

/// One evaluated candidate.
#[derive(Debug, Clone)]
pub struct ArchiveEntry {
    pub generation: usize,
    pub genome: Genome,
    pub objectives: ObjectiveVector,
    /// Rank in the archive-wide final sort (1 = first front).
    pub front_rank: usize,
}

fn freeze(mode: OptimizerMode, g: &mut Genome) {
    match mode {
        OptimizerMode::ClipOnly => {
            for p in g.exit_patterns.iter_mut() {
                *p = 0;
            }
        }
        OptimizerMode::ExitOnly => {
            for b in g.clip_bits.iter_mut() {
                *b = true;
            }
        }
        OptimizerMode::Joint => {}
    }
}

fn candidate_setting(mode: OptimizerMode, quantiles: Vec<f64>) -> ExitSetting {
    match mode {
        OptimizerMode::ClipOnly => ExitSetting::DisabledEarly {
            final_quantile: FROZEN_FINAL_QUANTILE,
        },
        _ => ExitSetting::Quantiles(quantiles),
    }
}

fn random_genome(shape: &SaeShape, rng: &mut ChaCha8Rng) -> Genome {
    let clip_bits = (0..Genome::expected_clip_len(shape))
        .map(|_| rng.gen_bool(0.5))
        .collect();
    let exit_patterns = (0..shape.num_exits())
        .map(|_| (rng.gen_range(0.0..=1.0f32)).to_bits())
        .collect();
    Genome {
        clip_bits,
        exit_patterns,
    }
}

/// Runs the evolutionary loop, scoring every genome through the evaluation
/// context; returns the archive-wide first front and the full archive.
///
/// Runtime inside the loop uses the context's calibrated MAC-scaled
/// estimate (measured once), so selection is deterministic per seed.
pub fn run_optimizer(
    ctx: &EvalContext,
    cfg: &GaConfig,
    mode: OptimizerMode,
) -> Result<(FrontSet, Vec<ArchiveEntry>)> {
    cfg.validate()?;
    let shape = ctx.model.shape();

    let mut scoring = EvalContext {
        model: ctx.model,
        eval: ctx.eval,
        calib: ctx.calib,
        timing_reps: ctx.timing_reps,
        runtime_model: ctx.runtime_model,
    };
    if matches!(scoring.runtime_model, RuntimeModel::Measured) {
        scoring.calibrate_runtime_model()?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop: Vec<Genome> = (0..cfg.population)
        .map(|_| {
            let mut g = random_genome(&shape, &mut rng);
            freeze(mode, &mut g);
            g
        })
        .collect();

    let mut cache: HashMap<Vec<u8>, ObjectiveVector> = HashMap::new();
    let mut archive: Vec<(usize, Genome, ObjectiveVector)> = Vec::new();

    for generation in 0..=cfg.generations {
        let fresh: Vec<Genome> = {
            let mut seen = std::collections::HashSet::new();
            pop.iter()
                .filter(|g| !cache.contains_key(&g.to_bytes()) && seen.insert(g.to_bytes()))
                .cloned()
                .collect()
        };
        let scored: Vec<(Vec<u8>, ObjectiveVector)> = fresh
            .par_iter()
            .map(|g| {
                let (mask, quantiles) = decode_genome(g, &shape)?;
                let setting = candidate_setting(mode, quantiles);
                let obj = evaluate_candidate(&scoring, &mask, &setting)?;
                Ok((g.to_bytes(), obj))
            })
            .collect::<Result<_>>()?;
        cache.extend(scored);

        let objs: Vec<ObjectiveVector> = pop
            .iter()
            .map(|g| cache[&g.to_bytes()])
            .collect();
        for (g, obj) in pop.iter().zip(&objs) {
            archive.push((generation, g.clone(), *obj));
        }
        if generation == cfg.generations {
            break;
        }
        pop = evolve_step(&pop, &objs, cfg, &mut rng)?;
        for g in pop.iter_mut() {
            freeze(mode, g);
        }
    }

    let archive_objs: Vec<ObjectiveVector> = archive.iter().map(|(_, _, o)| *o).collect();
    let fronts = fast_nondominated_sort(&archive_objs);
    let entries = archive
        .into_iter()
        .enumerate()
        .map(|(i, (generation, genome, objectives))| ArchiveEntry {
            generation,
            genome,
            objectives,
            front_rank: fronts.rank(i),
        })
        .collect();
    Ok((fronts, entries))
}
