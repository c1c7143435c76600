//! Fixtures shared by the criterion benches.

use localmim::mve::{default_counts, sample_window_plan, WindowPlan};
use localmim::rng::{substream, trunc_normal};
use localmim::vit::{Stack, StackConfig};
use localmim::{ParamStore, RunConfig, Tensor};

/// A frozen decoder stack, random grid tokens and a window plan for one grid.
pub struct DecodeFixture {
    pub store: ParamStore<f32>,
    pub stack: Stack,
    pub tokens: Tensor<f32>,
    pub plan: WindowPlan,
}

impl DecodeFixture {
    pub fn new(grid: usize, cfg: &RunConfig) -> Self {
        let dec: StackConfig = cfg.decoder();
        let mut store = ParamStore::new();
        let stack = Stack::new(
            &mut store,
            "decoder",
            dec,
            false,
            &mut substream(7, "init", &[]),
        )
        .unwrap();
        let tokens = trunc_normal(&[grid * grid, dec.dim], 1.0, &mut substream(7, "data", &[]));
        let plan = sample_window_plan((grid, grid), &default_counts(), 7).unwrap();
        Self {
            store,
            stack,
            tokens,
            plan,
        }
    }
}
