//! Convenience wrapper running the full LLSA pipeline for one head.

use crate::attention::{build_plan, llsa_forward, EnrichedKvPlan, ForwardState};
use crate::config::ValidatedConfig;
use crate::error::Result;
use crate::grad::{llsa_backward, GradientSet};
use crate::indexmap::{transpose_all, TransposedIndices};
use crate::matrix::FeatureMatrix;
use crate::pyramid::{build_pyramid, Pyramid};
use crate::selection::{hierarchical_topk, SelectionResult};

/// Pyramids, selection and plan for fixed Q, K, V.
#[derive(Debug, Clone)]
pub struct Llsa<'a> {
    pub cfg: &'a ValidatedConfig,
    pub q: &'a FeatureMatrix,
    pub k: &'a FeatureMatrix,
    pub v: &'a FeatureMatrix,
    pub pyr_q: Pyramid,
    pub pyr_k: Pyramid,
    pub pyr_v: Pyramid,
    pub selection: SelectionResult,
    pub plan: EnrichedKvPlan,
}

impl<'a> Llsa<'a> {
    /// Pools, selects and plans.
    pub fn prepare(
        q: &'a FeatureMatrix,
        k: &'a FeatureMatrix,
        v: &'a FeatureMatrix,
        cfg: &'a ValidatedConfig,
    ) -> Result<Self> {
        let (b, l) = (cfg.block_size(), cfg.levels());
        let pyr_q = build_pyramid(q, b, l)?;
        let pyr_k = build_pyramid(k, b, l)?;
        let pyr_v = build_pyramid(v, b, l)?;
        let selection = hierarchical_topk(&pyr_q, &pyr_k, cfg)?;
        let plan = build_plan(&selection, cfg)?;
        Ok(Self {
            cfg,
            q,
            k,
            v,
            pyr_q,
            pyr_k,
            pyr_v,
            selection,
            plan,
        })
    }

    pub fn forward(&self) -> Result<ForwardState> {
        llsa_forward(self.q, self.k, self.v, &self.pyr_k, &self.pyr_v, &self.plan, self.cfg)
    }

    pub fn transposed(&self) -> Result<Vec<TransposedIndices>> {
        transpose_all(&self.selection, self.cfg)
    }

    /// Transposes the selection and runs the backward.
    pub fn backward(&self, d_out: &FeatureMatrix, saved: &ForwardState) -> Result<GradientSet> {
        let transposed = self.transposed()?;
        self.backward_with(d_out, saved, &transposed)
    }

    pub fn backward_with(
        &self,
        d_out: &FeatureMatrix,
        saved: &ForwardState,
        transposed: &[TransposedIndices],
    ) -> Result<GradientSet> {
        llsa_backward(
            d_out,
            saved,
            self.q,
            self.k,
            self.v,
            &self.pyr_k,
            &self.pyr_v,
            &self.plan,
            transposed,
            self.cfg,
        )
    }
}
