//! Choosing which feature groups compute in 4 bits at a target ratio.
//!
//! A chromosome holds one flag per group of every selectable layer. The
//! evolutionary search minimises the mean L2 distance between mixed and
//! all-8-bit logits. Greedy and random selectors serve as baselines.

use std::collections::{HashMap, HashSet};
use std::sync::Mutex;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::exec::{Assignment, Executor};
use crate::netsim::graph::NetworkGraph;
use crate::netsim::metrics::l2_distance;
use crate::par::Schedule;
use crate::qtensor::FloatTensor;
use crate::rng::split_rng;
use crate::scoring::ScoreTable;

/// Added to scores before inverting them into sampling weights.
pub const SCORE_EPSILON: f64 = 1e-12;

pub type Flags = Vec<Vec<bool>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chromosome {
    pub flags: Flags,
    pub target_ratio: f64,
}

impl Chromosome {
    pub fn empty(group_counts: &[usize], ratio: f64) -> Self {
        Chromosome {
            flags: group_counts.iter().map(|&n| vec![false; n]).collect(),
            target_ratio: ratio,
        }
    }

    pub fn count(&self) -> usize {
        count_set(&self.flags)
    }

    pub fn total(&self) -> usize {
        self.flags.iter().map(Vec::len).sum()
    }

    /// Whether every flag set in `other` is also set here.
    pub fn includes(&self, other: &Flags) -> bool {
        includes(&self.flags, other)
    }
}

pub fn count_set(flags: &Flags) -> usize {
    flags.iter().flatten().filter(|&&f| f).count()
}

pub fn includes(outer: &Flags, inner: &Flags) -> bool {
    outer.len() == inner.len()
        && outer
            .iter()
            .zip(inner)
            .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(&a, &b)| a || !b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvoConfig {
    pub population: usize,
    pub generations: usize,
    pub elites: usize,
    pub parents: usize,
    pub mutation: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        EvoConfig {
            population: 50,
            generations: 50,
            elites: 2,
            parents: 10,
            mutation: 0.01,
            samples: 256,
            seed: 0,
        }
    }
}

impl EvoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.elites < self.parents && self.parents <= self.population) {
            return Err(Error::InvalidParams(format!(
                "need elites < parents <= population, got {} / {} / {}",
                self.elites, self.parents, self.population
            )));
        }
        if !(self.mutation > 0.0 && self.mutation < 1.0) {
            return Err(Error::InvalidParams(format!("mutation probability {} outside (0, 1)", self.mutation)));
        }
        if self.samples == 0 {
            return Err(Error::InvalidParams("fitness needs at least one sample".into()));
        }
        Ok(())
    }
}

/// Number of groups a ratio asks for; ratios that do not land on a whole
/// group count are rejected with the nearest representable neighbours.
pub fn target_count(ratio: f64, total: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidParams(format!("ratio {ratio} outside [0, 1]")));
    }
    let exact = ratio * total as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 {
        return Err(Error::UnrepresentableRatio {
            ratio,
            total,
            lower: exact.floor() / total as f64,
            upper: exact.ceil() / total as f64,
        });
    }
    Ok(rounded as usize)
}

fn check_shape(flags: &Flags, counts: &[usize], what: &str) -> Result<()> {
    if flags.len() != counts.len() || flags.iter().zip(counts).any(|(f, &n)| f.len() != n) {
        return Err(Error::InvalidConfig(format!("{what} does not match the layer group counts")));
    }
    Ok(())
}

/// Mean L2 distance of mixed-precision logits from the all-8-bit logits.
pub struct FitnessEval<'a> {
    exec: Executor<'a>,
    /// Values up to the first selectable layer, per sample.
    prefixes: Vec<Vec<FloatTensor>>,
    reference: Vec<Vec<f32>>,
    counts: Vec<usize>,
    cache: Mutex<HashMap<Flags, f64>>,
}

impl<'a> FitnessEval<'a> {
    pub fn new(net: &'a NetworkGraph, samples: &[FloatTensor], schedule: Schedule) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidParams("fitness needs at least one sample".into()));
        }
        let exec = Executor::new(net)?;
        let int8 = exec.resolve(crate::netsim::PrecisionMode::Int8)?;
        let stop = net.selectable_nodes().first().copied().unwrap_or(net.nodes.len());
        let prefixes: Vec<Vec<FloatTensor>> = schedule
            .map(samples, |x| exec.run_prefix(x, stop, int8.as_ref(), None))
            .into_iter()
            .collect::<Result<_>>()?;
        let reference = schedule
            .map(&prefixes, |p| exec.resume(p, int8.as_ref(), None).map(FloatTensor::into_data))
            .into_iter()
            .collect::<Result<_>>()?;
        Ok(FitnessEval {
            counts: net.selectable_group_counts(),
            exec,
            prefixes,
            reference,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn group_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn samples(&self) -> usize {
        self.prefixes.len()
    }

    fn assignment(&self, flags: &Flags) -> Result<Assignment> {
        check_shape(flags, &self.counts, "chromosome")?;
        self.exec.assignment_from_selectable(flags)
    }

    /// Fitness of one chromosome, evaluating samples under `schedule`.
    pub fn fitness(&self, flags: &Flags, schedule: Schedule) -> Result<f64> {
        if let Some(&f) = self.cache.lock().expect("cache lock").get(flags) {
            return Ok(f);
        }
        let a = self.assignment(flags)?;
        let dists: Vec<f64> = schedule
            .map_range(self.prefixes.len(), |i| {
                let y = self.exec.resume(&self.prefixes[i], Some(&a), None)?;
                l2_distance(y.data(), &self.reference[i])
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let f = dists.iter().sum::<f64>() / dists.len() as f64;
        self.cache.lock().expect("cache lock").insert(flags.clone(), f);
        Ok(f)
    }

    /// Fitness of a population. Chromosomes are spread over the schedule;
    /// the values never depend on it.
    pub fn fitness_batch(&self, pop: &[Flags], schedule: Schedule) -> Result<Vec<f64>> {
        schedule
            .map(pop, |c| self.fitness(c, Schedule::Sequential))
            .into_iter()
            .collect()
    }
}

/// Swaps the layers from `point` onwards. `point` is a layer boundary in
/// `0..=layers`; 0 and `layers` leave the parents unchanged.
pub fn crossover_at(a: &Flags, b: &Flags, point: usize) -> (Flags, Flags) {
    let p = point.min(a.len());
    let mut c = a[..p].to_vec();
    c.extend_from_slice(&b[p..]);
    let mut d = b[..p].to_vec();
    d.extend_from_slice(&a[p..]);
    (c, d)
}

/// Single-point crossover at a random internal layer boundary.
pub fn crossover(a: &Flags, b: &Flags, rng: &mut ChaCha8Rng) -> (Flags, Flags) {
    if a.len() < 2 {
        return (a.clone(), b.clone());
    }
    let point = rng.random_range(1..a.len());
    crossover_at(a, b, point)
}

/// Picks an index with probability proportional to `weights`.
fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn inverse_score(s: f64) -> f64 {
    1.0 / (s + SCORE_EPSILON)
}

/// Flips each non-baseline set flag with probability `p`, swapping in an
/// unset flag of the same layer chosen with weight `1 / (score + eps)`.
pub fn mutate(flags: &mut Flags, scores: &ScoreTable, p: f64, baseline: Option<&Flags>, rng: &mut ChaCha8Rng) {
    for l in 0..flags.len() {
        let originally_set: Vec<usize> = (0..flags[l].len()).filter(|&g| flags[l][g]).collect();
        for g in originally_set {
            if baseline.is_some_and(|b| b[l][g]) {
                continue;
            }
            if rng.random::<f64>() >= p {
                continue;
            }
            let candidates: Vec<usize> = (0..flags[l].len()).filter(|&h| h != g && !flags[l][h]).collect();
            if candidates.is_empty() {
                continue;
            }
            let weights: Vec<f64> = candidates.iter().map(|&h| inverse_score(scores.get(l, h))).collect();
            let h = candidates[weighted_pick(&weights, rng)];
            flags[l][g] = false;
            flags[l][h] = true;
        }
    }
}

/// Restores the target count: unsets highest-score non-baseline flags or
/// sets lowest-score unset flags. Ties follow (layer, group) order.
pub fn repair(flags: &mut Flags, scores: &ScoreTable, target: usize, baseline: Option<&Flags>) {
    let order = scores.ascending();
    let mut count = count_set(flags);
    for &(l, g) in order.iter().rev() {
        if count <= target {
            break;
        }
        if flags[l][g] && !baseline.is_some_and(|b| b[l][g]) {
            flags[l][g] = false;
            count -= 1;
        }
    }
    for &(l, g) in &order {
        if count >= target {
            break;
        }
        if !flags[l][g] {
            flags[l][g] = true;
            count += 1;
        }
    }
}

/// One count-preserving swap across the whole chromosome: a random
/// non-baseline set flag is cleared and a random unset flag is set.
/// Used to break up duplicate offspring.
fn perturb(flags: &mut Flags, baseline: Option<&Flags>, rng: &mut ChaCha8Rng) {
    let mut set = Vec::new();
    let mut unset = Vec::new();
    for (l, layer) in flags.iter().enumerate() {
        for (g, &f) in layer.iter().enumerate() {
            if !f {
                unset.push((l, g));
            } else if !baseline.is_some_and(|b| b[l][g]) {
                set.push((l, g));
            }
        }
    }
    if set.is_empty() || unset.is_empty() {
        return;
    }
    let (l, g) = set[rng.random_range(0..set.len())];
    let (m, h) = unset[rng.random_range(0..unset.len())];
    flags[l][g] = false;
    flags[m][h] = true;
}

/// Perturbation attempts for an offspring that duplicates a chromosome
/// already in the generation.
const DUPLICATE_RETRIES: usize = 8;

fn start_flags(counts: &[usize], baseline: Option<&Flags>) -> Flags {
    baseline
        .cloned()
        .unwrap_or_else(|| counts.iter().map(|&n| vec![false; n]).collect())
}

fn check_baseline(counts: &[usize], target: usize, baseline: Option<&Flags>) -> Result<()> {
    if let Some(b) = baseline {
        check_shape(b, counts, "baseline")?;
        if count_set(b) > target {
            return Err(Error::InvalidConfig(format!(
                "baseline has {} groups, more than the target {target}",
                count_set(b)
            )));
        }
    }
    Ok(())
}

/// Lowest-score groups model-wide until the ratio is met.
pub fn select_greedy(scores: &ScoreTable, ratio: f64, baseline: Option<&Flags>) -> Result<Chromosome> {
    let counts: Vec<usize> = scores.per_layer.iter().map(Vec::len).collect();
    let target = target_count(ratio, counts.iter().sum())?;
    check_baseline(&counts, target, baseline)?;
    let mut flags = start_flags(&counts, baseline);
    repair(&mut flags, scores, target, baseline);
    Ok(Chromosome { flags, target_ratio: ratio })
}

/// Each layer takes its own share of lowest-score groups; the model-wide
/// count is then repaired to the target.
pub fn select_layer_greedy(scores: &ScoreTable, ratio: f64, baseline: Option<&Flags>) -> Result<Chromosome> {
    let counts: Vec<usize> = scores.per_layer.iter().map(Vec::len).collect();
    let target = target_count(ratio, counts.iter().sum())?;
    check_baseline(&counts, target, baseline)?;
    let mut flags = start_flags(&counts, baseline);
    for (l, layer) in scores.per_layer.iter().enumerate() {
        let want = (ratio * layer.len() as f64).round() as usize;
        let mut order: Vec<usize> = (0..layer.len()).collect();
        order.sort_by(|&a, &b| layer[a].total_cmp(&layer[b]).then(a.cmp(&b)));
        let mut have = flags[l].iter().filter(|&&f| f).count();
        for g in order {
            if have >= want {
                break;
            }
            if !flags[l][g] {
                flags[l][g] = true;
                have += 1;
            }
        }
    }
    repair(&mut flags, scores, target, baseline);
    Ok(Chromosome { flags, target_ratio: ratio })
}

/// Uniformly random groups on top of the baseline.
pub fn select_random(
    counts: &[usize],
    ratio: f64,
    baseline: Option<&Flags>,
    rng: &mut ChaCha8Rng,
) -> Result<Chromosome> {
    let target = target_count(ratio, counts.iter().sum())?;
    check_baseline(counts, target, baseline)?;
    let mut flags = start_flags(counts, baseline);
    let free: Vec<(usize, usize)> = flags
        .iter()
        .enumerate()
        .flat_map(|(l, f)| f.iter().enumerate().filter(|(_, &s)| !s).map(move |(g, _)| (l, g)))
        .collect();
    let need = target - count_set(&flags);
    for i in rand::seq::index::sample(rng, free.len(), need) {
        let (l, g) = free[i];
        flags[l][g] = true;
    }
    Ok(Chromosome { flags, target_ratio: ratio })
}

/// Random groups drawn without replacement with weight `1 / (score + eps)`.
fn select_biased(scores: &ScoreTable, target: usize, baseline: Option<&Flags>, rng: &mut ChaCha8Rng) -> Flags {
    let counts: Vec<usize> = scores.per_layer.iter().map(Vec::len).collect();
    let mut flags = start_flags(&counts, baseline);
    let need = target - count_set(&flags);
    // Weighted sampling by keys ln(u) / w: the `need` largest keys win.
    let mut keys: Vec<(f64, usize, usize)> = Vec::new();
    for (l, layer) in flags.iter().enumerate() {
        for (g, &set) in layer.iter().enumerate() {
            if !set {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                keys.push((u.ln() * (scores.get(l, g) + SCORE_EPSILON), l, g));
            }
        }
    }
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, l, g) in keys.iter().take(need) {
        flags[l][g] = true;
    }
    flags
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvoResult {
    pub chromosome: Chromosome,
    pub fitness: f64,
    /// Best fitness of the initial population, then after each generation.
    pub history: Vec<f64>,
}

fn best(fit: &[f64]) -> f64 {
    fit.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Population indices sorted by fitness, ties by index.
fn ranking(fit: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fit.len()).collect();
    idx.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
    idx
}

/// Evolutionary search at one ratio. Seeds are the model-wide greedy
/// selection, a per-layer greedy selection, score-biased random and uniform
/// random chromosomes. Every generation keeps the elites and breeds the rest
/// from the best `parents` by crossover, mutation and repair.
pub fn select_channels(
    eval: &FitnessEval<'_>,
    scores: &ScoreTable,
    ratio: f64,
    cfg: &EvoConfig,
    baseline: Option<&Flags>,
    schedule: Schedule,
) -> Result<EvoResult> {
    cfg.validate()?;
    let counts = eval.group_counts().to_vec();
    check_shape(&scores.per_layer.iter().map(|l| vec![false; l.len()]).collect(), &counts, "score table")?;
    let total: usize = counts.iter().sum();
    let target = target_count(ratio, total)?;
    check_baseline(&counts, target, baseline)?;

    let base_count = baseline.map_or(0, count_set);
    if target == base_count || target == total {
        let mut flags = start_flags(&counts, baseline);
        repair(&mut flags, scores, target, baseline);
        let f = eval.fitness(&flags, schedule)?;
        return Ok(EvoResult {
            chromosome: Chromosome { flags, target_ratio: ratio },
            fitness: f,
            history: vec![f],
        });
    }

    let mut pop: Vec<Flags> = Vec::with_capacity(cfg.population);
    pop.push(select_greedy(scores, ratio, baseline)?.flags);
    pop.push(select_layer_greedy(scores, ratio, baseline)?.flags);
    let mut i = pop.len() as u64;
    while pop.len() < cfg.population {
        let mut rng = split_rng(cfg.seed, i);
        let flags = if i % 2 == 0 {
            select_biased(scores, target, baseline, &mut rng)
        } else {
            select_random(&counts, ratio, baseline, &mut rng)?.flags
        };
        pop.push(flags);
        i += 1;
    }
    let mut fit = eval.fitness_batch(&pop, schedule)?;
    let mut history = vec![best(&fit)];

    let pop_size = cfg.population as u64;
    for gen in 0..cfg.generations {
        let rank = ranking(&fit);
        let mut next: Vec<Flags> = rank[..cfg.elites].iter().map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<f64> = rank[..cfg.elites].iter().map(|&i| fit[i]).collect();
        let parents = &rank[..cfg.parents];
        let mut children = Vec::with_capacity(cfg.population - cfg.elites);
        let mut seen: HashSet<Flags> = pop.iter().cloned().collect();
        let mut pair = 0u64;
        while children.len() < cfg.population - cfg.elites {
            let mut rng = split_rng(cfg.seed, (gen as u64 + 1) * pop_size + pair);
            let i = rng.random_range(0..parents.len());
            let mut j = rng.random_range(0..parents.len() - 1);
            if j >= i {
                j += 1;
            }
            let (mut c, mut d) = crossover(&pop[parents[i]], &pop[parents[j]], &mut rng);
            for child in [&mut c, &mut d] {
                mutate(child, scores, cfg.mutation, baseline, &mut rng);
                repair(child, scores, target, baseline);
                for _ in 0..DUPLICATE_RETRIES {
                    if !seen.contains(&*child) {
                        break;
                    }
                    perturb(child, baseline, &mut rng);
                }
            }
            seen.insert(c.clone());
            children.push(c);
            if children.len() < cfg.population - cfg.elites {
                seen.insert(d.clone());
                children.push(d);
            }
            pair += 1;
        }
        let child_fit = eval.fitness_batch(&children, schedule)?;
        next.extend(children);
        next_fit.extend(child_fit);
        pop = next;
        fit = next_fit;
        history.push(best(&fit));
    }
    let winner = ranking(&fit)[0];
    Ok(EvoResult {
        chromosome: Chromosome {
            flags: pop.swap_remove(winner),
            target_ratio: ratio,
        },
        fitness: fit[winner],
        history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Evo,
    Greedy,
    Random,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "evo" => Ok(Algorithm::Evo),
            "greedy" => Ok(Algorithm::Greedy),
            "random" => Ok(Algorithm::Random),
            other => Err(Error::InvalidParams(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// One selection per ratio, ascending, each including the previous one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub ratio: f64,
    pub flags: Flags,
    pub fitness: f64,
    pub history: Vec<f64>,
}

pub fn select_chain(
    eval: &FitnessEval<'_>,
    scores: &ScoreTable,
    ratios: &[f64],
    algo: Algorithm,
    cfg: &EvoConfig,
    schedule: Schedule,
) -> Result<Vec<ChainResult>> {
    let mut sorted = ratios.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup_by(|a, b| crate::netsim::graph::same_ratio(*a, *b));
    let total: usize = eval.group_counts().iter().sum();
    for &r in &sorted {
        target_count(r, total)?;
    }
    let mut out: Vec<ChainResult> = Vec::new();
    for (k, &ratio) in sorted.iter().enumerate() {
        let baseline = out.last().map(|c| &c.flags);
        let (flags, history) = match algo {
            Algorithm::Evo => {
                let cfg = EvoConfig {
                    seed: cfg.seed.wrapping_add(k as u64),
                    ..*cfg
                };
                let r = select_channels(eval, scores, ratio, &cfg, baseline, schedule)?;
                (r.chromosome.flags, r.history)
            }
            Algorithm::Greedy => (select_greedy(scores, ratio, baseline)?.flags, Vec::new()),
            Algorithm::Random => {
                let mut rng = split_rng(cfg.seed, k as u64);
                (select_random(eval.group_counts(), ratio, baseline, &mut rng)?.flags, Vec::new())
            }
        };
        let fitness = eval.fitness(&flags, schedule)?;
        out.push(ChainResult { ratio, flags, fitness, history });
    }
    Ok(out)
}
