//! In-process synchronous SGD: workers compute gradients on identical
//! weights, share them (possibly defended), and apply the average.

use super::config::{derive_seed, Topology, Vantage};
use super::data::{Batch, BatchInput, Dataset};
use crate::defenses::{accumulate_local, Defense};
use crate::error::{Error, Result};
use crate::models::{sgd_step, GradSet, ModelSpec, ParamSet};

#[derive(Clone, Debug)]
pub struct Worker {
    pub params: ParamSet,
    /// Dataset indices owned by this worker, visited cyclically.
    pub shard: Vec<usize>,
    cursor: usize,
}

impl Worker {
    pub fn new(params: ParamSet, shard: Vec<usize>) -> Self {
        Self { params, shard, cursor: 0 }
    }

    fn next_indices(&mut self, n: usize) -> Vec<usize> {
        let out = (0..n).map(|i| self.shard[(self.cursor + i) % self.shard.len()]).collect();
        self.cursor = (self.cursor + n) % self.shard.len();
        out
    }
}

/// Who produced an observed gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Worker(usize),
    /// The server's post-average gradient.
    Average,
}

/// One gradient seen by the attacker, with the private batch behind it
/// kept for scoring only.
#[derive(Clone, Debug)]
pub struct Observation {
    pub source: Source,
    pub grads: GradSet,
    pub batch: Batch,
}

#[derive(Clone, Debug)]
pub struct Round {
    pub index: usize,
    /// Weights every worker held during the round.
    pub params: ParamSet,
    /// What each worker shared, in worker order.
    pub shared: Vec<GradSet>,
    pub average: GradSet,
    pub observed: Vec<Observation>,
    /// Elements saturated by a precision defense, summed over workers.
    pub overflow: usize,
}

#[derive(Clone, Debug)]
pub struct Federation {
    pub spec: ModelSpec,
    pub dataset: Dataset,
    pub workers: Vec<Worker>,
    pub batch: usize,
    pub topology: Topology,
    pub vantage: Vantage,
    pub defense: Defense,
    pub lr: f64,
    pub seed: u64,
    round: usize,
}

impl Federation {
    /// Samples are dealt to workers round-robin.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: ModelSpec,
        dataset: Dataset,
        params: ParamSet,
        workers: usize,
        batch: usize,
        topology: Topology,
        vantage: Vantage,
        defense: Defense,
        lr: f64,
        seed: u64,
    ) -> Result<Self> {
        if workers == 0 || dataset.len() < workers {
            return Err(Error::InvalidArgument(format!(
                "{} samples cannot feed {workers} workers",
                dataset.len()
            )));
        }
        if topology == Topology::Ring && workers < 2 {
            return Err(Error::InvalidArgument("a ring needs at least 2 workers".into()));
        }
        defense.validate()?;
        let workers = (0..workers)
            .map(|j| Worker::new(params.clone(), (j..dataset.len()).step_by(workers).collect()))
            .collect();
        Ok(Self {
            spec,
            dataset,
            workers,
            batch,
            topology,
            vantage,
            defense,
            lr,
            seed,
            round: 0,
        })
    }

    /// Rounds completed so far.
    pub fn rounds(&self) -> usize {
        self.round
    }

    pub fn params(&self) -> &ParamSet {
        &self.workers[0].params
    }

    /// One synchronous round: every worker shares a gradient on its next
    /// batch, the attacker observes per its vantage, then all workers apply
    /// the average.
    pub fn simulate_round(&mut self) -> Result<Round> {
        let params = self.workers[0].params.clone();
        for (j, w) in self.workers.iter().enumerate().skip(1) {
            if !w.params.bit_identical(&params) {
                return Err(Error::WorkerDivergence(j));
            }
        }
        let n_workers = self.workers.len();
        let mut shared = Vec::with_capacity(n_workers);
        let mut batches = Vec::with_capacity(n_workers);
        let mut overflow = 0;
        for j in 0..n_workers {
            let idx = self.workers[j].next_indices(self.batch);
            let batch = self.dataset.batch(&idx, &self.spec)?;
            let grads = match self.defense {
                Defense::Accumulate { steps, lr } => {
                    let BatchInput::Images(x) = &batch.input else {
                        return Err(Error::InvalidArgument("accumulation is implemented for image data".into()));
                    };
                    let y = batch.targets(&self.spec)?;
                    accumulate_local(&self.spec, &params, &[(x.clone(), y)], steps, lr)?.0
                }
                _ => {
                    let g = batch.gradients(&self.spec, &params)?;
                    let stream = derive_seed(self.seed, "defense", (self.round * n_workers + j) as u64);
                    let d = self.defense.apply(&g, stream)?;
                    overflow += d.overflow;
                    d.grads
                }
            };
            shared.push(grads);
            batches.push(batch);
        }
        let average = average(&shared)?;

        let per_worker = |ids: Vec<usize>| -> Vec<Observation> {
            ids.into_iter()
                .map(|j| Observation {
                    source: Source::Worker(j),
                    grads: shared[j].clone(),
                    batch: batches[j].clone(),
                })
                .collect()
        };
        let observed = match (self.topology, self.vantage) {
            (Topology::Centralized, Vantage::PerWorker) => per_worker((0..n_workers).collect()),
            (Topology::Centralized, Vantage::Average) => vec![Observation {
                source: Source::Average,
                grads: average.clone(),
                batch: Batch::concat(&batches)?,
            }],
            // The attacker sits at node 0 and sees both ring neighbors.
            (Topology::Ring, _) => {
                let mut ids = vec![1, n_workers - 1];
                ids.dedup();
                per_worker(ids)
            }
        };

        let next = sgd_step(&params, &average, self.lr)?;
        for w in &mut self.workers {
            w.params = next.clone();
        }
        let index = self.round;
        self.round += 1;
        Ok(Round {
            index,
            params,
            shared,
            average,
            observed,
            overflow,
        })
    }

    /// Run rounds until `rounds` have completed.
    pub fn train_until(&mut self, rounds: usize) -> Result<()> {
        while self.round < rounds {
            self.simulate_round()?;
        }
        Ok(())
    }
}

/// Elementwise mean of aligned gradient sets.
pub fn average(sets: &[GradSet]) -> Result<GradSet> {
    let first = sets.first().ok_or_else(|| Error::InvalidArgument("nothing to average".into()))?;
    let mut total = first.clone();
    for s in &sets[1..] {
        total = total.zip_with(s, |a, b| a + b)?;
    }
    Ok(if sets.len() == 1 { total } else { total.scaled(1.0 / sets.len() as f64) })
}
