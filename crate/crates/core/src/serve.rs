//! Discrete-event serving simulator with an adaptive 4-bit ratio controller.
//!
//! Time is simulated in seconds. A single FIFO server takes up to
//! `batch_size` waiting requests at once; service time comes from the cost
//! model at the ratio in force when the batch starts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::graph::{same_ratio, NetworkGraph};
use crate::par::Schedule;
use crate::rng::split_rng;

/// Parametric latency model. Matmul time falls linearly from the 8-bit cost
/// to `cost / speedup_4bit` as the 4-bit ratio goes from 0 to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Matmul time per request at 8 bits, seconds.
    pub matmul_8bit: f64,
    pub speedup_4bit: f64,
    /// Non-matmul time per request, seconds.
    pub float_ops: f64,
    /// Runtime reorder operators and their cost as a fraction of one
    /// average matmul layer.
    pub reorders: usize,
    pub reorder_fraction: f64,
    pub matmul_layers: usize,
    /// Extra matmul time when extraction positions are found at runtime.
    pub dynamic_overhead: f64,
    /// Time charged when a batch starts at a different ratio than the last.
    pub switch_cost: f64,
    /// Cost of each additional request in a batch relative to the first.
    pub batch_marginal: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            matmul_8bit: 1e-3,
            speedup_4bit: 1.43,
            float_ops: 0.0,
            reorders: 0,
            reorder_fraction: 0.03,
            matmul_layers: 1,
            dynamic_overhead: 0.0,
            switch_cost: 0.0,
            batch_marginal: 1.0,
        }
    }
}

impl CostModel {
    /// Costs derived from a network: matmul time proportional to MACs.
    pub fn for_network(net: &NetworkGraph, seconds_per_mac: f64, dynamic: bool) -> Result<Self> {
        let shapes = net.value_shapes()?;
        let macs: usize = net
            .matmul_nodes()
            .iter()
            .map(|&n| {
                let m = net.matmul(n).expect("matmul");
                m.features() * m.macs_per_channel(&shapes[net.nodes[n].input])
            })
            .sum();
        Ok(CostModel {
            matmul_8bit: macs as f64 * seconds_per_mac,
            reorders: net.count_reorders(),
            matmul_layers: net.matmul_nodes().len().max(1),
            dynamic_overhead: if dynamic { 0.035 } else { 0.0 },
            ..CostModel::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.matmul_8bit > 0.0
            && self.speedup_4bit >= 1.0
            && self.float_ops >= 0.0
            && self.reorder_fraction >= 0.0
            && self.dynamic_overhead >= 0.0
            && self.switch_cost >= 0.0
            && self.batch_marginal > 0.0
            && self.matmul_layers > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid cost model {self:?}")))
        }
    }

    /// Service time of one request at `ratio`.
    pub fn request_time(&self, ratio: f64) -> f64 {
        let matmul = self.matmul_8bit * (1.0 - ratio * (1.0 - 1.0 / self.speedup_4bit));
        let reorder = self.reorders as f64 * self.reorder_fraction * self.matmul_8bit / self.matmul_layers as f64;
        matmul * (1.0 + self.dynamic_overhead) + reorder + self.float_ops
    }

    pub fn batch_time(&self, ratio: f64, batch: usize) -> f64 {
        self.request_time(ratio) * (1.0 + (batch.max(1) - 1) as f64 * self.batch_marginal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub duration: f64,
    /// Mean arrival rate, requests per second.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingTrace {
    pub arrivals: Vec<f64>,
    pub duration: f64,
    pub intervals: Vec<Interval>,
    /// Peak to minimum rate of the generating profile, when known.
    pub peak_to_min: Option<f64>,
}

impl ServingTrace {
    /// A trace from explicit arrival times (sorted here).
    pub fn from_arrivals(mut arrivals: Vec<f64>, duration: f64) -> Result<Self> {
        if arrivals.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidParams("arrival times must be finite and non-negative".into()));
        }
        arrivals.sort_by(f64::total_cmp);
        let duration = duration.max(arrivals.last().copied().unwrap_or(0.0));
        Ok(ServingTrace {
            arrivals,
            duration,
            intervals: Vec::new(),
            peak_to_min: None,
        })
    }
}

fn poisson_into(out: &mut Vec<f64>, start: f64, duration: f64, rate: f64, rng: &mut ChaCha8Rng) {
    if rate <= 0.0 || duration <= 0.0 {
        return;
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = start;
    loop {
        t += exp.sample(rng);
        if t >= start + duration {
            break;
        }
        out.push(t);
    }
}

/// Homogeneous Poisson arrivals.
pub fn gen_poisson(rate: f64, duration: f64, seed: u64) -> Result<ServingTrace> {
    gen_intervals(
        &[Interval {
            start: 0.0,
            duration,
            rate,
        }],
        seed,
    )
}

/// Piecewise Poisson arrivals; intervals are laid end to end in order.
pub fn gen_intervals(intervals: &[Interval], seed: u64) -> Result<ServingTrace> {
    if intervals.iter().any(|i| !(i.rate >= 0.0 && i.duration >= 0.0 && i.rate.is_finite())) {
        return Err(Error::InvalidParams("interval rates and durations must be non-negative".into()));
    }
    let mut arrivals = Vec::new();
    let mut laid = Vec::with_capacity(intervals.len());
    let mut t = 0.0;
    for (k, iv) in intervals.iter().enumerate() {
        let mut rng = split_rng(seed, k as u64);
        poisson_into(&mut arrivals, t, iv.duration, iv.rate, &mut rng);
        laid.push(Interval { start: t, ..*iv });
        t += iv.duration;
    }
    let rates: Vec<f64> = intervals.iter().map(|i| i.rate).filter(|&r| r > 0.0).collect();
    let peak_to_min = (!rates.is_empty()).then(|| {
        rates.iter().copied().fold(0.0, f64::max) / rates.iter().copied().fold(f64::INFINITY, f64::min)
    });
    Ok(ServingTrace {
        arrivals,
        duration: t,
        intervals: laid,
        peak_to_min,
    })
}

/// Shape of a fluctuating production load: a smooth daily-style cycle whose
/// peak rate is exactly three times its minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuatingLoad {
    pub min_rate: f64,
    pub period: f64,
    pub duration: f64,
    /// Length of each constant-rate step.
    pub step: f64,
}

pub const PEAK_TO_MIN: f64 = 3.0;

impl FluctuatingLoad {
    pub fn intervals(&self) -> Vec<Interval> {
        let steps = (self.duration / self.step).ceil() as usize;
        let peak = self.min_rate * PEAK_TO_MIN;
        // Rate sampled at step midpoints; the extremes are pinned so the
        // 3x ratio holds exactly.
        let mut rates: Vec<f64> = (0..steps)
            .map(|k| {
                let t = (k as f64 + 0.5) * self.step;
                let phase = (1.0 - (2.0 * std::f64::consts::PI * t / self.period).cos()) / 2.0;
                self.min_rate + (peak - self.min_rate) * phase
            })
            .collect();
        if let Some(i) = argext(&rates, f64::gt) {
            rates[i] = peak;
        }
        if let Some(i) = argext(&rates, f64::lt) {
            rates[i] = self.min_rate;
        }
        rates
            .into_iter()
            .enumerate()
            .map(|(k, rate)| Interval {
                start: k as f64 * self.step,
                duration: self.step.min(self.duration - k as f64 * self.step),
                rate,
            })
            .collect()
    }

    pub fn trace(&self, seed: u64) -> Result<ServingTrace> {
        if !(self.min_rate > 0.0 && self.period > 0.0 && self.step > 0.0 && self.duration > 0.0) {
            return Err(Error::InvalidParams(format!("invalid load profile {self:?}")));
        }
        let mut t = gen_intervals(&self.intervals(), seed)?;
        t.peak_to_min = Some(PEAK_TO_MIN);
        Ok(t)
    }
}

fn argext(v: &[f64], better: fn(&f64, &f64) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if best.is_none_or(|b| better(x, &v[b])) {
            best = Some(i);
        }
    }
    best
}

/// Profiled latency by (rate, ratio), from fixed-ratio pre-simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    pub rates: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Median latency, `[rate][ratio]`.
    pub latency: Vec<Vec<f64>>,
}

impl ProfileTable {
    /// Runs one Poisson simulation per grid point.
    pub fn build(
        cost: &CostModel,
        rates: &[f64],
        ratios: &[f64],
        duration: f64,
        batch_size: usize,
        seed: u64,
        schedule: Schedule,
    ) -> Result<Self> {
        if rates.is_empty() || ratios.is_empty() {
            return Err(Error::InvalidParams("profile grid is empty".into()));
        }
        let mut rates = rates.to_vec();
        rates.sort_by(f64::total_cmp);
        let n = ratios.len();
        let cells: Vec<Result<f64>> = schedule.map_range(rates.len() * n, |k| {
            let (i, j) = (k / n, k % n);
            let trace = gen_poisson(rates[i], duration, seed.wrapping_add(i as u64))?;
            let sim = simulate(&trace, cost, &Policy::Fixed { ratio: ratios[j], window: duration }, batch_size)?;
            Ok(median(&sim.requests.iter().map(RequestLog::latency).collect::<Vec<_>>()))
        });
        let flat = cells.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(ProfileTable {
            latency: flat.chunks(n).map(<[f64]>::to_vec).collect(),
            rates,
            ratios: ratios.to_vec(),
        })
    }

    /// Latency at `rate`, linear between profiled rates, clamped at the ends.
    pub fn lookup(&self, rate: f64, ratio: f64) -> Result<f64> {
        let j = self
            .ratios
            .iter()
            .position(|&r| same_ratio(r, ratio))
            .ok_or_else(|| Error::UnpreparedRatio {
                requested: ratio,
                available: self.ratios.clone(),
            })?;
        let col: Vec<f64> = self.latency.iter().map(|row| row[j]).collect();
        let r = &self.rates;
        if rate <= r[0] {
            return Ok(col[0]);
        }
        if rate >= r[r.len() - 1] {
            return Ok(col[r.len() - 1]);
        }
        let i = r.iter().position(|&x| x > rate).expect("inside range") - 1;
        let w = (rate - r[i]) / (r[i + 1] - r[i]);
        Ok(col[i] * (1.0 - w) + col[i + 1] * w)
    }
}

/// Decreases happen only when the lower ratio's profiled latency is below
/// this fraction of the threshold.
pub const DECREASE_MARGIN: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerPolicy {
    /// Monitoring window, seconds.
    pub window: f64,
    /// Latency threshold, seconds.
    pub threshold: f64,
    pub step: f64,
    /// Prepared ratios, ascending; moves go to the adjacent entry.
    pub ratios: Vec<f64>,
    pub table: ProfileTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    /// Constant ratio; `window` only sets the metrics window.
    Fixed { ratio: f64, window: f64 },
    Adaptive(ControllerPolicy),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestLog {
    pub arrival: f64,
    pub start: f64,
    pub completion: f64,
    pub ratio: f64,
}

impl RequestLog {
    pub fn latency(&self) -> f64 {
        self.completion - self.arrival
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub start: f64,
    /// Arrivals per second in this window.
    pub rate: f64,
    /// Ratio in force at the window start.
    pub ratio: f64,
    pub requests: usize,
    pub median: f64,
    pub p90: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioSpan {
    pub start: f64,
    pub end: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub windows: Vec<WindowStats>,
    pub timeline: Vec<RatioSpan>,
    pub requests: Vec<RequestLog>,
    /// Completed by the end of the trace horizon.
    pub completed_in_horizon: usize,
    /// Still waiting or in service at the end of the horizon.
    pub in_queue_at_end: usize,
    /// Mean load exceeds capacity even at the highest ratio.
    pub saturated: bool,
}

/// Nearest-rank quantile of unsorted values; NaN when empty.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Ratio per monitoring window. Decisions read only arrival counts, so the
/// whole timeline is known before service is simulated.
fn controller_timeline(trace: &ServingTrace, policy: &ControllerPolicy) -> Result<Vec<f64>> {
    if !(policy.window > 0.0 && policy.threshold > 0.0) || policy.ratios.is_empty() {
        return Err(Error::InvalidConfig("controller needs a positive window, threshold and ratios".into()));
    }
    let mut ratios = policy.ratios.clone();
    ratios.sort_by(f64::total_cmp);
    for w in ratios.windows(2) {
        if (w[1] - w[0] - policy.step).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "prepared ratios must be spaced by the step {}",
                policy.step
            )));
        }
    }
    let windows = (trace.duration / policy.window).ceil().max(1.0) as usize;
    let mut counts = vec![0usize; windows];
    for &t in &trace.arrivals {
        counts[((t / policy.window) as usize).min(windows - 1)] += 1;
    }
    let mut idx = 0;
    let mut out = Vec::with_capacity(windows);
    for w in 0..windows {
        if w > 0 {
            let rate = counts[w - 1] as f64 / policy.window;
            if policy.table.lookup(rate, ratios[idx])? > policy.threshold && idx + 1 < ratios.len() {
                idx += 1;
            } else if idx > 0 && policy.table.lookup(rate, ratios[idx - 1])? < DECREASE_MARGIN * policy.threshold {
                idx -= 1;
            }
        }
        out.push(ratios[idx]);
    }
    Ok(out)
}

/// Runs the trace to completion under a fixed or adaptive ratio.
pub fn simulate(trace: &ServingTrace, cost: &CostModel, policy: &Policy, batch_size: usize) -> Result<SimResult> {
    cost.validate()?;
    if batch_size == 0 {
        return Err(Error::InvalidParams("batch size must be positive".into()));
    }
    let (window, per_window, max_ratio) = match policy {
        Policy::Fixed { ratio, window } => {
            if !(0.0..=1.0).contains(ratio) || !(*window > 0.0) {
                return Err(Error::InvalidParams(format!("fixed policy needs a ratio in [0, 1] and a positive window, got {ratio}, {window}")));
            }
            let n = (trace.duration / window).ceil().max(1.0) as usize;
            (*window, vec![*ratio; n], *ratio)
        }
        Policy::Adaptive(p) => {
            let t = controller_timeline(trace, p)?;
            let max = p.ratios.iter().copied().fold(0.0, f64::max);
            (p.window, t, max)
        }
    };
    let ratio_at = |t: f64| per_window[((t / window) as usize).min(per_window.len() - 1)];

    let arr = &trace.arrivals;
    let mut requests = Vec::with_capacity(arr.len());
    let mut free = 0.0f64;
    let mut last_ratio: Option<f64> = None;
    let mut i = 0;
    while i < arr.len() {
        let start = free.max(arr[i]);
        let mut j = i;
        while j < arr.len() && j - i < batch_size && arr[j] <= start {
            j += 1;
        }
        let ratio = ratio_at(start);
        let mut time = cost.batch_time(ratio, j - i);
        if last_ratio.is_some_and(|r| !same_ratio(r, ratio)) {
            time += cost.switch_cost;
        }
        last_ratio = Some(ratio);
        let completion = start + time;
        for &a in &arr[i..j] {
            requests.push(RequestLog {
                arrival: a,
                start,
                completion,
                ratio,
            });
        }
        free = completion;
        i = j;
    }

    let windows = per_window
        .iter()
        .enumerate()
        .map(|(w, &ratio)| {
            let lo = w as f64 * window;
            let hi = lo + window;
            let lat: Vec<f64> = requests
                .iter()
                .filter(|r| r.arrival >= lo && r.arrival < hi)
                .map(RequestLog::latency)
                .collect();
            WindowStats {
                start: lo,
                rate: lat.len() as f64 / window,
                ratio,
                requests: lat.len(),
                median: median(&lat),
                p90: quantile(&lat, 0.9),
            }
        })
        .collect();

    let mut timeline: Vec<RatioSpan> = Vec::new();
    for (w, &ratio) in per_window.iter().enumerate() {
        let start = w as f64 * window;
        let end = (start + window).min(trace.duration.max(start));
        match timeline.last_mut() {
            Some(s) if same_ratio(s.ratio, ratio) => s.end = end,
            _ => timeline.push(RatioSpan { start, end, ratio }),
        }
    }

    let completed_in_horizon = requests.iter().filter(|r| r.completion <= trace.duration).count();
    let mean_rate = if trace.duration > 0.0 {
        arr.len() as f64 / trace.duration
    } else {
        0.0
    };
    let capacity = batch_size as f64 / cost.batch_time(max_ratio, batch_size);
    Ok(SimResult {
        windows: if arr.is_empty() { Vec::new() } else { windows },
        timeline,
        in_queue_at_end: arr.len() - completed_in_horizon,
        completed_in_horizon,
        saturated: mean_rate > capacity,
        requests,
    })
}

/// Time-weighted mean quality over a ratio timeline.
pub fn effective_accuracy(timeline: &[RatioSpan], quality: &[(f64, f64)]) -> Result<f64> {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for span in timeline {
        let q = quality
            .iter()
            .find(|(r, _)| same_ratio(*r, span.ratio))
            .map(|&(_, q)| q)
            .ok_or_else(|| Error::UnpreparedRatio {
                requested: span.ratio,
                available: quality.iter().map(|&(r, _)| r).collect(),
            })?;
        let d = span.end - span.start;
        weighted += q * d;
        total += d;
    }
    if total <= 0.0 {
        return Err(Error::InvalidParams("timeline has zero length".into()));
    }
    Ok(weighted / total)
}

pub fn windows_csv(windows: &[WindowStats]) -> String {
    let mut s = String::from("time,rate,ratio,median,p90\n");
    for w in windows {
        s.push_str(&format!("{},{},{},{},{}\n", w.start, w.rate, w.ratio, w.median, w.p90));
    }
    s
}

/// Fraction of windows whose median latency exceeds `threshold`.
pub fn fraction_over(windows: &[WindowStats], threshold: f64) -> f64 {
    if windows.is_empty() {
        return 0.0;
    }
    windows.iter().filter(|w| w.median > threshold).count() as f64 / windows.len() as f64
}

/// Serving scenario shipped as the default configuration: a load whose peak
/// is three times its minimum, against the default cost model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub cost: CostModel,
    pub load: FluctuatingLoad,
    pub window: f64,
    pub threshold: f64,
    pub batch_size: usize,
    pub ratios: Vec<f64>,
    pub profile_rates: Vec<f64>,
    pub profile_duration: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            cost: CostModel::default(),
            load: FluctuatingLoad {
                min_rate: 400.0,
                period: 240.0,
                duration: 480.0,
                step: 1.0,
            },
            window: 1.0,
            threshold: 4e-3,
            batch_size: 1,
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            profile_rates: (1..=40).map(|k| f64::from(k) * 50.0).collect(),
            profile_duration: 30.0,
        }
    }
}

impl Scenario {
    pub fn profile(&self, seed: u64, schedule: Schedule) -> Result<ProfileTable> {
        ProfileTable::build(
            &self.cost,
            &self.profile_rates,
            &self.ratios,
            self.profile_duration,
            self.batch_size,
            seed,
            schedule,
        )
    }

    pub fn controller(&self, table: ProfileTable) -> ControllerPolicy {
        ControllerPolicy {
            window: self.window,
            threshold: self.threshold,
            step: 0.25,
            ratios: self.ratios.clone(),
            table,
        }
    }

    pub fn trace(&self, seed: u64) -> Result<ServingTrace> {
        self.load.trace(seed)
    }

    pub fn fixed(&self, ratio: f64) -> Policy {
        Policy::Fixed { ratio, window: self.window }
    }

    pub fn run(&self, trace: &ServingTrace, policy: &Policy) -> Result<SimResult> {
        simulate(trace, &self.cost, policy, self.batch_size)
    }
}

/// Random draw helper for tests and sweeps that need a jittered rate.
pub fn jitter(rng: &mut ChaCha8Rng, rate: f64, fraction: f64) -> f64 {
    rate * (1.0 + fraction * (2.0 * rng.random::<f64>() - 1.0))
}
