//! Attention cost of decoding the full grid versus decoding the local fields.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mve::{
    attention_pair_count, format_counts, sample_window_plan, AttentionScope, WindowCounts,
};
use crate::rng::{substream, trunc_normal};
use crate::tensor::{ParamStore, Session, Tensor};
use crate::vit::{Stack, StackConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSetup {
    pub stack: StackConfig,
    pub window_plan: WindowCounts,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub grid: usize,
    /// Closed-form score entries per attention layer.
    pub global_pairs: u64,
    pub windowed_pairs: u64,
    /// Entries observed during one instrumented forward, per layer.
    pub counted_global: u64,
    pub counted_windowed: u64,
    /// Median seconds per forward.
    pub global_seconds: f64,
    pub windowed_seconds: f64,
    /// `global_seconds / windowed_seconds`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub stack: StackConfig,
    pub window_plan: String,
    pub trials: usize,
    pub warmup: usize,
    pub seed: u64,
    pub entries: Vec<BenchEntry>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Forward-only passes of one decoder stack over the full grid and over
/// each window, with instrumented pair counts and median timings.
pub fn run_bench(grids: &[usize], setup: &BenchSetup) -> Result<BenchReport> {
    if setup.trials == 0 {
        return Err(Error::config("bench_trials", "must be positive"));
    }
    setup.stack.validate("bench")?;
    let mut store = ParamStore::<f32>::new();
    let stack = Stack::new(
        &mut store,
        "bench.decoder",
        setup.stack,
        false,
        &mut substream(setup.seed, "init", &[2]),
    )?;
    let layers = setup.stack.depth.max(1) as u64;

    let mut entries = Vec::with_capacity(grids.len());
    for &g in grids {
        let grid = (g, g);
        let plan = sample_window_plan(grid, &setup.window_plan, setup.seed)?;
        let tokens: Tensor<f32> = trunc_normal(
            &[g * g, setup.stack.dim],
            1.0,
            &mut substream(setup.seed, "data", &[g as u64]),
        );

        let global = || -> Result<u64> {
            let s = Session::no_grad(&store);
            stack.forward(&s, s.constant(tokens.clone()))?;
            Ok(s.tape().attention_entries())
        };
        let windowed = || -> Result<u64> {
            let s = Session::no_grad(&store);
            let x = s.constant(tokens.clone());
            for w in &plan.specs {
                stack.forward(&s, x.gather(&w.token_indices)?)?;
            }
            Ok(s.tape().attention_entries())
        };

        let counted_global = global()? / layers;
        let counted_windowed = windowed()? / layers;
        let time = |f: &dyn Fn() -> Result<u64>| -> Result<f64> {
            for _ in 0..setup.warmup {
                f()?;
            }
            let mut samples = Vec::with_capacity(setup.trials);
            for _ in 0..setup.trials {
                let t0 = Instant::now();
                f()?;
                samples.push(t0.elapsed().as_secs_f64());
            }
            Ok(median(samples))
        };
        let global_seconds = time(&global)?;
        let windowed_seconds = time(&windowed)?;
        entries.push(BenchEntry {
            grid: g,
            global_pairs: attention_pair_count(&AttentionScope::Global(grid)),
            windowed_pairs: attention_pair_count(&AttentionScope::Windowed(&plan)),
            counted_global,
            counted_windowed,
            global_seconds,
            windowed_seconds,
            ratio: global_seconds / windowed_seconds,
        });
    }
    Ok(BenchReport {
        stack: setup.stack,
        window_plan: format_counts(&setup.window_plan),
        trials: setup.trials,
        warmup: setup.warmup,
        seed: setup.seed,
        entries,
    })
}

impl BenchReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "decoder depth {} dim {} heads {}, plan {}, median of {} trials\n",
            self.stack.depth, self.stack.dim, self.stack.heads, self.window_plan, self.trials
        );
        out.push_str(&format!(
            "{:>6} {:>12} {:>12} {:>12} {:>12} {:>8}\n",
            "grid", "global_pairs", "window_pairs", "global_ms", "window_ms", "ratio"
        ));
        for e in &self.entries {
            out.push_str(&format!(
                "{:>6} {:>12} {:>12} {:>12.3} {:>12.3} {:>8.2}\n",
                format!("{0}x{0}", e.grid),
                e.counted_global,
                e.counted_windowed,
                e.global_seconds * 1e3,
                e.windowed_seconds * 1e3,
                e.ratio
            ));
        }
        out
    }
}
