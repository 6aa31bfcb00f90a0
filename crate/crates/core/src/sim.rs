//! Batch simulation: a jumping true value, noisy arriving traders and one
//! market maker, run through the engine.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::bmm::BmmConfig;
use crate::engine::{
    Endowment, Engine, MarketSpec, MetricsAccumulator, MetricsConfig, OpenConfig, RunMetrics, TradeEvent, TruthSeries,
};
use crate::{MarketMakerConfig, Side};

pub const MARKET: &str = "SIM";
pub const TRADER: &str = "crowd";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JumpKind {
    /// Add N(0, σ_j²) to the current value.
    Gaussian { sigma_j: f64 },
    /// Redraw uniformly on [0, 100].
    Uniform,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub steps: u32,
    pub init_mean: f64,
    pub init_sd: f64,
    /// Fixed starting value instead of a draw.
    pub init_value: Option<f64>,
    pub p_j: f64,
    pub jumps: JumpKind,
    /// Standard deviation of trader valuations around the true value.
    pub sigma_eps: f64,
    /// Rate of the exponential trade size; mean size is about 1/rate.
    pub qty_rate: f64,
    pub mm: MarketMakerConfig,
    pub seed: u64,
    /// Forced `(step, value)` changes on top of the random jumps.
    pub scripted: Vec<(u32, f64)>,
    pub metrics: MetricsConfig,
    pub keep_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            init_mean: 50.0,
            init_sd: 12.0,
            init_value: None,
            p_j: 0.01,
            jumps: JumpKind::Gaussian { sigma_j: 5.0 },
            sigma_eps: 5.0,
            qty_rate: 0.05,
            mm: MarketMakerConfig::lmsr(125.0),
            seed: 0,
            scripted: Vec::new(),
            metrics: MetricsConfig::simulation(),
            keep_events: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps == 0 {
            return Err("steps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_j) {
            return Err(format!("jump probability must lie in [0, 1], got {}", self.p_j));
        }
        if !(self.sigma_eps > 0.0 && self.sigma_eps.is_finite()) {
            return Err(format!("trader noise must be positive, got {}", self.sigma_eps));
        }
        if !(self.qty_rate > 0.0 && self.qty_rate.is_finite()) {
            return Err(format!("quantity rate must be positive, got {}", self.qty_rate));
        }
        if !(self.init_sd >= 0.0) {
            return Err(format!("initial sd must be non-negative, got {}", self.init_sd));
        }
        if let JumpKind::Gaussian { sigma_j } = self.jumps {
            if !(sigma_j >= 0.0 && sigma_j.is_finite()) {
                return Err(format!("jump sd must be non-negative, got {sigma_j}"));
            }
        }
        self.mm.validate()
    }
}

/// Market maker settings for the simulated market: LMSR with `b`, or a
/// Bayesian market maker with window `window` whose noise matches the traders.
pub fn mm_for(kind: &str, b: f64, window: usize, alpha: f64, sigma_eps: f64) -> Result<MarketMakerConfig, String> {
    let bmm = |adaptive| {
        MarketMakerConfig::Bmm(BmmConfig {
            sigma_eps,
            window,
            alpha,
            adaptive,
            ..BmmConfig::default()
        })
    };
    match kind {
        "lmsr" => Ok(MarketMakerConfig::lmsr(b)),
        "bmm" => Ok(bmm(true)),
        "zp" => Ok(bmm(false)),
        other => Err(format!("unknown market maker `{other}` (expected lmsr, bmm or zp)")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub truth: f64,
    pub spot: f64,
    pub spread: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub metrics: RunMetrics,
    pub series: Vec<StepRecord>,
    pub truth: TruthSeries,
    /// Empty unless `keep_events` was set.
    pub events: Vec<TradeEvent>,
}

/// One simulated trading period.
pub fn run_simulation(config: &SimConfig) -> Result<RunOutput, String> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = Normal::new(0.0, config.sigma_eps).map_err(|e| e.to_string())?;
    let size = Exp::new(config.qty_rate).map_err(|e| e.to_string())?;
    let scripted: BTreeMap<u32, f64> = config.scripted.iter().copied().collect();

    let open = OpenConfig {
        markets: vec![MarketSpec {
            id: MARKET.into(),
            mm: config.mm,
        }],
        quote_ttl_ms: 0,
    };
    let err = |e: crate::engine::EngineError| e.to_string();
    let mut engine = Engine::open(&format!("sim-{}", config.seed), open, 0).map_err(err)?;
    engine
        .register_trader(
            TRADER,
            Endowment {
                cash: 0.0,
                shares: 0.0,
                short_allowed: true,
            },
            0,
        )
        .map_err(err)?;
    engine.start(0, None).map_err(err)?;

    let mut value = match config.init_value {
        Some(v) => v,
        None => config.init_mean + config.init_sd * standard_normal(&mut rng),
    }
    .clamp(0.0, 100.0);
    let mut truth = TruthSeries::new();
    let mut acc = MetricsAccumulator::new(config.metrics);
    let mut series = Vec::with_capacity(config.steps as usize);

    for t in 0..config.steps {
        let ts = u64::from(t);
        let before = value;
        if t > 0 {
            let u: f64 = rng.random();
            if u < config.p_j {
                value = match config.jumps {
                    JumpKind::Gaussian { sigma_j } => value + sigma_j * standard_normal(&mut rng),
                    JumpKind::Uniform => 100.0 * rng.random::<f64>(),
                    JumpKind::None => value,
                }
                .clamp(0.0, 100.0);
            }
        }
        if let Some(&v) = scripted.get(&t) {
            value = v.clamp(0.0, 100.0);
        }
        if t == 0 || value != before {
            engine.record_true_value(MARKET, value, ts).map_err(err)?;
            truth.push(ts, value);
        }

        let w = value + noise.sample(&mut rng);
        let qty = size.sample(&mut rng).ceil().max(1.0).min(f64::from(u32::MAX)) as u32;
        let spot = engine.market(MARKET).expect("sim market").mm.spot();
        let side = if w > spot { Side::Buy } else { Side::Sell };
        let quote = engine.request_quote(TRADER, MARKET, side, qty, ts).map_err(err)?;
        let accept = match side {
            Side::Buy => quote.vwap <= w,
            Side::Sell => quote.vwap >= w,
        };
        let resolved = engine.confirm_quote(quote.id, accept, ts).map_err(err)?;
        let book = engine.market(MARKET).expect("sim market");
        if accept {
            acc.record_fill(side, &book.mm);
        }
        acc.record_price(ts, resolved.spot_after, value);
        let spread = book.mm.probe_spread(config.metrics.probe_qty);
        series.push(StepRecord {
            t,
            truth: value,
            spot: resolved.spot_after,
            spread: if config.metrics.half_spread { 0.5 * spread } else { spread },
        });
    }

    let end = u64::from(config.steps);
    engine.end(end).map_err(err)?;
    let values = BTreeMap::from([(MARKET.to_string(), value)]);
    let report = engine.settle(&values, end).map_err(err)?;
    let profit = report.market(MARKET).expect("sim market").mm_profit;
    let metrics = acc.finish(profit, &truth, end);
    Ok(RunOutput {
        seed: config.seed,
        metrics,
        series,
        truth,
        events: if config.keep_events {
            engine.into_events()
        } else {
            Vec::new()
        },
    })
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Seed of run `index` in a batch started from `base`.
pub fn run_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn batch_config(config: &SimConfig, index: u64) -> SimConfig {
    SimConfig {
        seed: run_seed(config.seed, index),
        ..config.clone()
    }
}

/// `runs` independent simulations in run-index order, one thread per core.
#[cfg(feature = "parallel")]
pub fn run_batch(config: &SimConfig, runs: usize) -> Result<Vec<RunOutput>, String> {
    use rayon::prelude::*;
    (0..runs as u64)
        .into_par_iter()
        .map(|i| run_simulation(&batch_config(config, i)))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch(config: &SimConfig, runs: usize) -> Result<Vec<RunOutput>, String> {
    run_batch_sequential(config, runs)
}

pub fn run_batch_sequential(config: &SimConfig, runs: usize) -> Result<Vec<RunOutput>, String> {
    (0..runs as u64)
        .map(|i| run_simulation(&batch_config(config, i)))
        .collect()
}

/// One row of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub runs: usize,
    pub mean_profit: f64,
    /// Worst single-run loss.
    pub max_loss: f64,
    /// Mean over runs that traded at least once.
    pub mean_spread: f64,
    pub mean_rmsd: f64,
    pub mean_rmsd_eq: f64,
}

pub fn aggregate(runs: &[RunMetrics]) -> Summary {
    assert!(!runs.is_empty(), "cannot aggregate zero runs");
    let mean = |f: &dyn Fn(&RunMetrics) -> f64| {
        let (sum, n) = runs
            .iter()
            .map(f)
            .filter(|v| !v.is_nan())
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    };
    Summary {
        runs: runs.len(),
        mean_profit: mean(&|m| m.mm_profit),
        max_loss: runs.iter().map(|m| m.mm_max_loss).fold(0.0, f64::max),
        mean_spread: mean(&|m| m.avg_spread),
        mean_rmsd: mean(&|m| m.rmsd),
        mean_rmsd_eq: mean(&|m| m.rmsd_eq),
    }
}

#[derive(Serialize)]
struct RunRow {
    run: usize,
    seed: u64,
    mm_profit: f64,
    mm_max_loss: f64,
    avg_spread: f64,
    rmsd: f64,
    rmsd_eq: f64,
    buys: u64,
    sells: u64,
}

#[derive(Serialize)]
struct SeriesRow {
    run: usize,
    t: u32,
    truth: f64,
    spot: f64,
    spread: f64,
}

pub fn write_runs_csv<W: Write>(writer: W, runs: &[RunOutput]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for (i, r) in runs.iter().enumerate() {
        let m = r.metrics;
        w.serialize(RunRow {
            run: i,
            seed: r.seed,
            mm_profit: m.mm_profit,
            mm_max_loss: m.mm_max_loss,
            avg_spread: m.avg_spread,
            rmsd: m.rmsd,
            rmsd_eq: m.rmsd_eq,
            buys: m.buys,
            sells: m.sells,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_series_csv<W: Write>(writer: W, runs: &[RunOutput]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for (i, r) in runs.iter().enumerate() {
        for s in &r.series {
            w.serialize(SeriesRow {
                run: i,
                t: s.t,
                truth: s.truth,
                spot: s.spot,
                spread: s.spread,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
