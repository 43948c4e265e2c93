//! Per-(layer, clock) gradient accumulation with a deterministic reduction
//! order and exactly one solver application per clock.
//!
//! The same structure runs at the server (for server-routed layers) and
//! replicated at every worker (for broadcast layers): contributions from all
//! P workers are collected, summed in worker-id order, and released in clock
//! order, so every holder of a replica applies bit-identical updates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::network::LayerTensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Accepted,
    /// Same (layer, clock, worker) already recorded; contribution dropped.
    Duplicate,
    /// Clock at or below the layer's applied clock; contribution dropped.
    Stale,
}

#[derive(Debug)]
struct LayerAgg<S: Scalar> {
    pending: BTreeMap<u32, Vec<Option<LayerTensor<S>>>>,
    applied_through: u32,
    /// Per-worker clock whose update is incorporated in the layer's params.
    stamps: Vec<u32>,
}

/// Accumulates updates for a set of layers across P workers.
#[derive(Debug)]
pub struct UpdateAggregator<S: Scalar> {
    workers: u16,
    layers: BTreeMap<u16, LayerAgg<S>>,
}

impl<S: Scalar> UpdateAggregator<S> {
    pub fn new(layer_ids: &[u16], workers: u16) -> Self {
        Self::resume(layer_ids, workers, 0)
    }

    /// Rebuilds an aggregator as it stands at an iteration boundary, with
    /// everything through `applied_through` already incorporated.
    pub fn resume(layer_ids: &[u16], workers: u16, applied_through: u32) -> Self {
        let layers = layer_ids
            .iter()
            .map(|&l| {
                (
                    l,
                    LayerAgg {
                        pending: BTreeMap::new(),
                        applied_through,
                        stamps: vec![applied_through; workers as usize],
                    },
                )
            })
            .collect();
        UpdateAggregator { workers, layers }
    }

    pub fn tracks(&self, layer: u16) -> bool {
        self.layers.contains_key(&layer)
    }

    pub fn layer_ids(&self) -> impl Iterator<Item = u16> + '_ {
        self.layers.keys().copied()
    }

    pub fn add(
        &mut self,
        layer: u16,
        clock: u32,
        worker: u16,
        grad: LayerTensor<S>,
    ) -> Result<AddOutcome> {
        let agg = self
            .layers
            .get_mut(&layer)
            .ok_or_else(|| Error::protocol(format!("layer {layer} not aggregated here")))?;
        if clock <= agg.applied_through {
            return Ok(AddOutcome::Stale);
        }
        let slots = agg
            .pending
            .entry(clock)
            .or_insert_with(|| vec![None; self.workers as usize]);
        let slot = &mut slots[(worker - 1) as usize];
        if slot.is_some() {
            return Ok(AddOutcome::Duplicate);
        }
        *slot = Some(grad);
        Ok(AddOutcome::Accepted)
    }

    /// Releases the next clock's aggregated sum for `layer` if every worker's
    /// contribution has arrived. Sums in worker-id order; marks the clock
    /// applied (the caller must apply the returned sum exactly once).
    pub fn take_ready(&mut self, layer: u16) -> Result<Option<(u32, LayerTensor<S>)>> {
        let agg = self
            .layers
            .get_mut(&layer)
            .ok_or_else(|| Error::protocol(format!("layer {layer} not aggregated here")))?;
        let next = agg.applied_through + 1;
        let complete = matches!(
            agg.pending.get(&next),
            Some(slots) if slots.iter().all(Option::is_some)
        );
        if !complete {
            return Ok(None);
        }
        let slots = agg.pending.remove(&next).unwrap();
        let mut iter = slots.into_iter().map(Option::unwrap);
        let mut sum = iter.next().expect("at least one worker");
        for grad in iter {
            sum.axpy_into(S::one(), &grad)?;
        }
        agg.applied_through = next;
        for s in &mut agg.stamps {
            *s = next;
        }
        Ok(Some((next, sum)))
    }

    pub fn applied_through(&self, layer: u16) -> u32 {
        self.layers
            .get(&layer)
            .map(|a| a.applied_through)
            .unwrap_or(0)
    }

    /// Per-worker applied clocks for the layer (the version stamps sent in
    /// pull responses).
    pub fn stamps(&self, layer: u16) -> Vec<u32> {
        self.layers
            .get(&layer)
            .map(|a| a.stamps.clone())
            .unwrap_or_default()
    }

    pub fn min_stamp(&self, layer: u16) -> u32 {
        self.layers
            .get(&layer)
            .map(|a| *a.stamps.iter().min().unwrap())
            .unwrap_or(0)
    }

    /// True when every tracked layer has applied all clocks through `clock`.
    pub fn fully_applied(&self, clock: u32) -> bool {
        self.layers.values().all(|a| a.applied_through >= clock)
    }

    /// True when a contribution for (layer, clock, worker) is recorded or
    /// already applied.
    pub fn has_contribution(&self, layer: u16, clock: u32, worker: u16) -> bool {
        match self.layers.get(&layer) {
            None => false,
            Some(agg) => {
                clock <= agg.applied_through
                    || agg
                        .pending
                        .get(&clock)
                        .is_some_and(|slots| slots[(worker - 1) as usize].is_some())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;

    fn grad(v: f64) -> LayerTensor<f64> {
        LayerTensor {
            weights: DenseMatrix::from_vec(1, 2, vec![v, 2.0 * v]).unwrap(),
            bias: None,
        }
    }

    #[test]
    fn releases_only_complete_clocks_in_order() {
        let mut agg: UpdateAggregator<f64> = UpdateAggregator::new(&[5], 2);
        assert_eq!(agg.add(5, 1, 1, grad(1.0)).unwrap(), AddOutcome::Accepted);
        assert!(agg.take_ready(5).unwrap().is_none());
        // Worker 1 races ahead to clock 2.
        assert_eq!(agg.add(5, 2, 1, grad(10.0)).unwrap(), AddOutcome::Accepted);
        assert!(agg.take_ready(5).unwrap().is_none());
        assert_eq!(agg.add(5, 1, 2, grad(0.5)).unwrap(), AddOutcome::Accepted);
        let (clock, sum) = agg.take_ready(5).unwrap().unwrap();
        assert_eq!(clock, 1);
        assert_eq!(sum.weights.as_slice(), &[1.5, 3.0]);
        assert!(agg.take_ready(5).unwrap().is_none());
        assert_eq!(agg.add(5, 2, 2, grad(1.0)).unwrap(), AddOutcome::Accepted);
        let (clock, _) = agg.take_ready(5).unwrap().unwrap();
        assert_eq!(clock, 2);
        assert_eq!(agg.stamps(5), vec![2, 2]);
    }

    #[test]
    fn duplicates_and_stale_clocks_are_flagged() {
        let mut agg: UpdateAggregator<f64> = UpdateAggregator::new(&[1], 2);
        assert_eq!(agg.add(1, 1, 1, grad(1.0)).unwrap(), AddOutcome::Accepted);
        assert_eq!(agg.add(1, 1, 1, grad(9.0)).unwrap(), AddOutcome::Duplicate);
        agg.add(1, 1, 2, grad(1.0)).unwrap();
        agg.take_ready(1).unwrap().unwrap();
        assert_eq!(agg.add(1, 1, 2, grad(1.0)).unwrap(), AddOutcome::Stale);
    }

    #[test]
    fn sum_is_order_invariant_across_arrival_orders() {
        let contributions = [(1u16, 0.25), (2u16, -1.5), (3u16, 3.0)];
        let mut orders = vec![
            vec![0usize, 1, 2],
            vec![2, 1, 0],
            vec![1, 2, 0],
        ];
        let mut sums = Vec::new();
        for order in orders.drain(..) {
            let mut agg: UpdateAggregator<f64> = UpdateAggregator::new(&[1], 3);
            for idx in order {
                let (w, v) = contributions[idx];
                agg.add(1, 1, w, grad(v)).unwrap();
            }
            let (_, sum) = agg.take_ready(1).unwrap().unwrap();
            sums.push(sum);
        }
        assert_eq!(sums[0], sums[1]);
        assert_eq!(sums[0], sums[2]);
    }

    #[test]
    fn untracked_layer_is_protocol_error() {
        let mut agg: UpdateAggregator<f64> = UpdateAggregator::new(&[1], 1);
        assert!(agg.add(9, 1, 1, grad(1.0)).is_err());
    }
}
