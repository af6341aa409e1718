//! Parameter counting, FLOP estimates and latency measurement.

mod flops;
mod latency;
mod params;

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use flops::{flops_estimate, FlopEstimate};
pub use latency::{
    bench_forward, breakdown_latency, BenchOptions, LatencyReport, LatencyRow, ReportMeta,
    CSV_HEADER,
};
pub use params::{count_params, ParamBreakdown, ParamCount};

/// Submodule a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Ff,
    Sa,
    Conv,
    Ln,
    PersistentMemory,
}

impl ParamKind {
    pub const ALL: [ParamKind; 5] = [
        ParamKind::Ff,
        ParamKind::Sa,
        ParamKind::Conv,
        ParamKind::Ln,
        ParamKind::PersistentMemory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Ff => "ff",
            ParamKind::Sa => "sa",
            ParamKind::Conv => "conv",
            ParamKind::Ln => "ln",
            ParamKind::PersistentMemory => "persistent_memory",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Attention maps computed and reused during forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCounter {
    /// Layers that computed their own per-head maps.
    pub maps_computed: usize,
    /// Layers that consumed a leader's maps.
    pub maps_reused: usize,
}

impl AttentionCounter {
    pub fn total(&self) -> usize {
        self.maps_computed + self.maps_reused
    }
}

/// Timed regions of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    Ff,
    Conv,
    /// Attention in layers that compute their own map.
    Sa,
    /// Attention in reuse followers.
    ReuseSa,
    /// Closing LayerNorm of a Conformer layer.
    Norm,
}

impl Submodule {
    pub const ALL: [Submodule; 5] = [
        Submodule::Ff,
        Submodule::Conv,
        Submodule::Sa,
        Submodule::ReuseSa,
        Submodule::Norm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Submodule::Ff => "ff",
            Submodule::Conv => "conv",
            Submodule::Sa => "sa",
            Submodule::ReuseSa => "reuse_sa",
            Submodule::Norm => "norm",
        }
    }
}

impl fmt::Display for Submodule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Hook wrapped around each submodule call of a forward pass.
pub trait Probe {
    fn span<R>(&mut self, part: Submodule, f: impl FnOnce() -> R) -> R;
}

/// No instrumentation; compiles down to the bare call.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoProbe;

impl Probe for NoProbe {
    #[inline(always)]
    fn span<R>(&mut self, _part: Submodule, f: impl FnOnce() -> R) -> R {
        f()
    }
}

/// Accumulates monotonic wall time per submodule.
#[derive(Debug, Clone, Default)]
pub struct SpanTimer {
    totals: [Duration; 5],
}

impl SpanTimer {
    pub fn get(&self, part: Submodule) -> Duration {
        self.totals[part as usize]
    }

    pub fn sum(&self) -> Duration {
        self.totals.iter().sum()
    }

    pub fn reset(&mut self) {
        self.totals = Default::default();
    }
}

impl Probe for SpanTimer {
    fn span<R>(&mut self, part: Submodule, f: impl FnOnce() -> R) -> R {
        let start = Instant::now();
        let out = f();
        self.totals[part as usize] += start.elapsed();
        out
    }
}
