use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Branch, LayerId, SublayerHook};
use crate::schedule::CacheSchedule;
use crate::tensor::Tensor;

/// Last computed output per `(layer, branch)`, plus hit/compute counters.
#[derive(Debug, Clone)]
pub struct CacheState {
    entries: Vec<Option<Tensor>>,
    hits: usize,
    computes: usize,
    /// Computations per layer, both branches summed.
    computes_per_layer: Vec<usize>,
    hits_per_layer: Vec<usize>,
}

fn slot(layer: LayerId, branch: Branch) -> usize {
    2 * layer.index() + branch as usize
}

impl CacheState {
    pub fn new(depth: usize) -> Self {
        Self {
            entries: vec![None; 4 * depth],
            hits: 0,
            computes: 0,
            computes_per_layer: vec![0; 2 * depth],
            hits_per_layer: vec![0; 2 * depth],
        }
    }

    pub fn get(&self, layer: LayerId, branch: Branch) -> Option<&Tensor> {
        self.entries.get(slot(layer, branch))?.as_ref()
    }

    pub fn store(&mut self, layer: LayerId, branch: Branch, output: &Tensor) {
        self.entries[slot(layer, branch)] = Some(output.clone());
        self.computes += 1;
        self.computes_per_layer[layer.index()] += 1;
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn computes(&self) -> usize {
        self.computes
    }

    pub fn computes_per_layer(&self) -> &[usize] {
        &self.computes_per_layer
    }

    pub fn hits_per_layer(&self) -> &[usize] {
        &self.hits_per_layer
    }
}

/// Hook that follows a schedule: reuse where it marks a step cached,
/// otherwise compute and write through.
pub struct ScheduledCache<'s> {
    schedule: Option<&'s CacheSchedule>,
    pub state: CacheState,
}

impl<'s> ScheduledCache<'s> {
    pub fn new(schedule: Option<&'s CacheSchedule>, depth: usize) -> Self {
        Self {
            schedule,
            state: CacheState::new(depth),
        }
    }
}

impl SublayerHook for ScheduledCache<'_> {
    fn reuse(&mut self, step: usize, layer: LayerId, branch: Branch) -> Result<Option<&Tensor>> {
        let cached = self.schedule.is_some_and(|s| s.is_cached(layer, step));
        if !cached {
            return Ok(None);
        }
        let state = &mut self.state;
        match state.entries[slot(layer, branch)].as_ref() {
            Some(t) => {
                state.hits += 1;
                state.hits_per_layer[layer.index()] += 1;
                Ok(Some(t))
            }
            None => Err(Error::CacheMiss {
                layer,
                branch,
                step,
            }),
        }
    }

    fn computed(&mut self, _: usize, layer: LayerId, branch: Branch, output: &Tensor) -> Result<()> {
        self.state.store(layer, branch, output);
        Ok(())
    }
}
