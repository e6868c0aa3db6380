use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::Real;

/// How coarse (level `l > 0`) key/value tokens carry their weight `W = B^l`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ReweightMode {
    /// Multiply coarse keys and values by `W` before attention.
    #[default]
    ScaleKv,
    /// Add `ln W` to coarse logits; keys and values stay unscaled. This counts a
    /// coarse token as `W` identical fine tokens.
    LogitBias,
}

impl ReweightMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReweightMode::ScaleKv => "scale-kv",
            ReweightMode::LogitBias => "logit-bias",
        }
    }
}

impl std::str::FromStr for ReweightMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scale-kv" | "scalekv" | "ScaleKV" | "ScaleKv" => Ok(Self::ScaleKv),
            "logit-bias" | "logitbias" | "LogitBias" => Ok(Self::LogitBias),
            other => Err(format!("unknown reweight mode `{other}`")),
        }
    }
}

/// Unvalidated parameters. Call [`LlsaConfig::validate`] before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlsaConfig {
    /// Sequence length N.
    pub n: usize,
    /// Feature dimension d.
    pub d: usize,
    /// Block size B.
    pub block_size: usize,
    /// Key blocks kept per query block and level.
    pub top_k: usize,
    /// Number of coarse levels L.
    pub levels: usize,
    /// Number of coarse levels whose KV tokens are appended (L_e).
    pub enrich_levels: usize,
    /// Logit scale; `None` means `1 / sqrt(d)`.
    pub softmax_scale: Option<Real>,
    pub reweight_mode: ReweightMode,
    /// Subtract the running row maximum before exponentiating.
    pub safe_softmax: bool,
}

impl LlsaConfig {
    /// Config with `L_e = L`, default scale, [`ReweightMode::ScaleKv`] and safe softmax.
    pub fn new(n: usize, d: usize, block_size: usize, top_k: usize, levels: usize) -> Self {
        Self {
            n,
            d,
            block_size,
            top_k,
            levels,
            enrich_levels: levels,
            softmax_scale: None,
            reweight_mode: ReweightMode::ScaleKv,
            safe_softmax: true,
        }
    }

    pub fn with_enrich_levels(mut self, enrich_levels: usize) -> Self {
        self.enrich_levels = enrich_levels;
        self
    }

    pub fn with_mode(mut self, mode: ReweightMode) -> Self {
        self.reweight_mode = mode;
        self
    }

    pub fn with_scale(mut self, scale: Real) -> Self {
        self.softmax_scale = Some(scale);
        self
    }

    pub fn with_safe_softmax(mut self, on: bool) -> Self {
        self.safe_softmax = on;
        self
    }

    /// Checks every invariant in a fixed order and returns the first failure.
    pub fn validate(self) -> Result<ValidatedConfig, ConfigError> {
        let b = self.block_size;
        if b < 2 {
            return Err(ConfigError::BlockSize(b));
        }
        if self.n == 0 || self.d == 0 {
            return Err(ConfigError::EmptyShape { n: self.n, d: self.d });
        }
        let max = max_levels(self.n, b);
        if self.levels < 1 || self.levels > max {
            return Err(ConfigError::Levels {
                levels: self.levels,
                max,
            });
        }
        // Level-L tokens are themselves tiled into blocks of B, so the finest
        // tokens must split evenly into B^(L+1)-sized groups.
        let required = b.pow(self.levels as u32 + 1);
        if !self.n.is_multiple_of(required) {
            return Err(ConfigError::Divisibility { n: self.n, required });
        }
        if self.enrich_levels > self.levels {
            return Err(ConfigError::EnrichLevels {
                enrich: self.enrich_levels,
                levels: self.levels,
            });
        }
        let coarsest_tokens = self.n / b.pow(self.levels as u32);
        if self.top_k < 1 || self.top_k > coarsest_tokens {
            return Err(ConfigError::TopK {
                k: self.top_k,
                max: coarsest_tokens,
            });
        }
        let scale = self.softmax_scale.unwrap_or_else(|| 1.0 / (self.d as Real).sqrt());
        if !scale.is_finite() || scale <= 0.0 {
            return Err(ConfigError::Scale(scale as f64));
        }
        if self.n / b > u32::MAX as usize {
            return Err(ConfigError::IndexOverflow(self.n / b));
        }
        Ok(ValidatedConfig { raw: self, scale })
    }
}

/// Largest admissible level count, `floor(log_B N) - 1` (0 when N < B^2).
pub fn max_levels(n: usize, block_size: usize) -> usize {
    if block_size < 2 {
        return 0;
    }
    let mut log: usize = 0;
    let mut p = block_size;
    while p <= n {
        log += 1;
        match p.checked_mul(block_size) {
            Some(next) => p = next,
            None => break,
        }
    }
    log.saturating_sub(1)
}

/// Deepest level count that validates for `(n, b, k)`, if any.
pub fn auto_levels(n: usize, d: usize, block_size: usize, top_k: usize) -> Option<usize> {
    (1..=max_levels(n, block_size))
        .rev()
        .find(|&l| LlsaConfig::new(n, d, block_size, top_k, l).validate().is_ok())
}

/// A config whose invariants hold. Immutable.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    raw: LlsaConfig,
    scale: Real,
}

impl ValidatedConfig {
    pub fn n(&self) -> usize {
        self.raw.n
    }
    pub fn d(&self) -> usize {
        self.raw.d
    }
    pub fn block_size(&self) -> usize {
        self.raw.block_size
    }
    pub fn top_k(&self) -> usize {
        self.raw.top_k
    }
    pub fn levels(&self) -> usize {
        self.raw.levels
    }
    pub fn enrich_levels(&self) -> usize {
        self.raw.enrich_levels
    }
    pub fn scale(&self) -> Real {
        self.scale
    }
    pub fn reweight_mode(&self) -> ReweightMode {
        self.raw.reweight_mode
    }
    pub fn safe_softmax(&self) -> bool {
        self.raw.safe_softmax
    }
    pub fn raw(&self) -> &LlsaConfig {
        &self.raw
    }

    /// `B^l`
    pub fn pow(&self, l: usize) -> usize {
        self.raw.block_size.pow(l as u32)
    }

    /// Token count at level `l`, `N / B^l`.
    pub fn tokens_at(&self, l: usize) -> usize {
        self.raw.n / self.pow(l)
    }

    /// Block count at level `l`, `N / B^(l+1)`.
    pub fn blocks_at(&self, l: usize) -> usize {
        self.raw.n / self.pow(l + 1)
    }

    /// Number of fine query blocks `N / B`.
    pub fn fine_blocks(&self) -> usize {
        self.blocks_at(0)
    }
}

/// Key blocks each fine query block attends to: `K` per selected level plus
/// every coarsest block when enrichment reaches level `L`.
pub fn effective_block_count(cfg: &ValidatedConfig) -> usize {
    let (l, le) = (cfg.levels(), cfg.enrich_levels());
    let selected = cfg.top_k() * (le + 1).min(l);
    let coarsest = if le == l { cfg.blocks_at(l) } else { 0 };
    selected + coarsest
}
