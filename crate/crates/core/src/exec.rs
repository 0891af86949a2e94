//! Training schedules.
//!
//! * [`Schedule::Conventional`]: the whole model is resident, one microbatch
//!   per minibatch, every activation kept until the backward pass ends.
//! * [`Schedule::BaselineAg`]: the conventional pass repeated over `u`
//!   microbatches with a whole-model accumulated-gradient buffer.
//! * [`Schedule::L2l`]: the layer loop is the outer loop. Each layer is
//!   fetched from the param-server, run over all `u` microbatches, and
//!   dropped; only layer-boundary activations are stashed (on the device or
//!   in host memory). The backward phase re-fetches each layer, recomputes its
//!   intermediates from the stash, accumulates its gradient over the `u`
//!   microbatches and pushes it once.
//!
//! Every run goes through a [`MemoryLedger`] per worker and a shared
//! [`EpsStore`]. Workers are simulated one after the other.

use std::fmt;

use crate::data::{Minibatch, TeacherTask};
use crate::eps::{EpsStore, Optimizer, PrecisionPolicy, Snapshot};
use crate::error::{Error, Result};
use crate::layers::{accumulate, layer_backward, layer_forward, loss_head, LayerParams, ModelSpec};
use crate::memory::{AllocId, Category, Direction, HostId, MemoryLedger, MemoryReport};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StashPlacement {
    Device,
    Host,
}

impl StashPlacement {
    pub fn name(self) -> &'static str {
        match self {
            StashPlacement::Device => "device",
            StashPlacement::Host => "host",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Schedule {
    Conventional,
    BaselineAg,
    L2l(StashPlacement),
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::Conventional => "conventional",
            Schedule::BaselineAg => "baseline_ag",
            Schedule::L2l(_) => "l2l",
        }
    }

    pub fn stash(self) -> Option<StashPlacement> {
        match self {
            Schedule::L2l(p) => Some(p),
            _ => None,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Minibatch decomposition: `u` microbatches of `ub` rows per worker, `k`
/// workers. Device batch is `u·ub`, total batch `k·u·ub`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub ub: usize,
    pub u: usize,
    pub k: usize,
}

impl BatchPlan {
    pub fn new(ub: usize, u: usize, k: usize) -> Result<Self> {
        let plan = BatchPlan { ub, u, k };
        plan.validate()?;
        Ok(plan)
    }

    pub fn single(ub: usize, u: usize) -> Result<Self> {
        Self::new(ub, u, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ub == 0 || self.u == 0 || self.k == 0 {
            return Err(Error::Plan(format!(
                "ub, u and k must be positive (ub={}, u={}, k={})",
                self.ub, self.u, self.k
            )));
        }
        Ok(())
    }

    /// Rows one worker processes per minibatch.
    pub fn device_batch(&self) -> usize {
        self.u * self.ub
    }

    pub fn total_batch(&self) -> usize {
        self.k * self.u * self.ub
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub schedule: Schedule,
    pub plan: BatchPlan,
    pub final_master: Snapshot,
    /// Mean scaled loss per minibatch.
    pub loss_trace: Vec<f64>,
    /// One report per worker.
    pub memory: Vec<MemoryReport>,
    pub steps: usize,
    /// Reduced gradient of the last minibatch, per layer.
    pub last_gradients: Vec<LayerParams>,
}

impl RunReport {
    pub fn device_peak(&self) -> u64 {
        self.memory.iter().map(|m| m.device_peak).max().unwrap_or(0)
    }

    pub fn h2d_bytes(&self) -> u64 {
        self.memory.iter().map(|m| m.h2d_bytes).sum()
    }

    pub fn d2h_bytes(&self) -> u64 {
        self.memory.iter().map(|m| m.d2h_bytes).sum()
    }

    /// Host-to-device layer-weight bytes per minibatch for one worker.
    pub fn weight_bytes_per_step(&self) -> u64 {
        self.memory[0].h2d_for(Category::LayerWeights) / self.steps.max(1) as u64
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

struct StashEntry {
    value: Tensor,
    device: Option<AllocId>,
    host: Option<HostId>,
}

/// Layer-boundary activations, indexed by boundary `0..=N` and microbatch.
///
/// Each entry is stored once and taken once per minibatch. Host entries are
/// charged to host memory and cost one device-to-host store (or, for the
/// input boundary, the initial load) plus one host-to-device fetch.
pub struct ActivationStash {
    placement: StashPlacement,
    entries: Vec<Vec<Option<StashEntry>>>,
    stored: usize,
    consumed: usize,
}

impl ActivationStash {
    pub fn new(boundaries: usize, microbatches: usize, placement: StashPlacement) -> Self {
        ActivationStash {
            placement,
            entries: (0..boundaries)
                .map(|_| (0..microbatches).map(|_| None).collect())
                .collect(),
            stored: 0,
            consumed: 0,
        }
    }

    fn slot(&mut self, boundary: usize, mb: usize) -> Result<&mut Option<StashEntry>> {
        self.entries
            .get_mut(boundary)
            .and_then(|b| b.get_mut(mb))
            .ok_or_else(|| {
                Error::Consistency(format!("stash index ({boundary}, {mb}) out of range"))
            })
    }

    fn put(&mut self, boundary: usize, mb: usize, entry: StashEntry) -> Result<()> {
        let slot = self.slot(boundary, mb)?;
        if slot.is_some() {
            return Err(Error::Consistency(format!(
                "stash entry ({boundary}, {mb}) stored twice"
            )));
        }
        *slot = Some(entry);
        self.stored += 1;
        Ok(())
    }

    /// Stores a device-resident activation (device placement).
    pub fn store_device(
        &mut self,
        boundary: usize,
        mb: usize,
        value: Tensor,
        alloc: AllocId,
    ) -> Result<()> {
        self.put(
            boundary,
            mb,
            StashEntry {
                value,
                device: Some(alloc),
                host: None,
            },
        )
    }

    /// Parks an activation in host memory; `copy_out` logs the
    /// device-to-host store.
    pub fn store_host(
        &mut self,
        boundary: usize,
        mb: usize,
        value: Tensor,
        copy_out: bool,
        ledger: &mut MemoryLedger,
    ) -> Result<()> {
        let bytes = value.byte_size();
        if copy_out {
            ledger.record_transfer(Direction::DeviceToHost, bytes, Category::ActivationStash)?;
        }
        let host = ledger.host_alloc(bytes);
        self.put(
            boundary,
            mb,
            StashEntry {
                value,
                device: None,
                host: Some(host),
            },
        )
    }

    pub fn peek(&self, boundary: usize, mb: usize) -> Result<&Tensor> {
        self.entries
            .get(boundary)
            .and_then(|b| b.get(mb))
            .and_then(Option::as_ref)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Consistency(format!("stash miss at ({boundary}, {mb})")))
    }

    /// Consumes an entry and returns it on the device with its allocation.
    pub fn take(
        &mut self,
        boundary: usize,
        mb: usize,
        ledger: &mut MemoryLedger,
    ) -> Result<(Tensor, AllocId)> {
        let entry = self
            .slot(boundary, mb)?
            .take()
            .ok_or_else(|| Error::Consistency(format!("stash miss at ({boundary}, {mb})")))?;
        self.consumed += 1;
        let device = match (entry.device, entry.host) {
            (Some(a), _) => a,
            (None, Some(h)) => {
                let bytes = entry.value.byte_size();
                ledger.record_transfer(
                    Direction::HostToDevice,
                    bytes,
                    Category::ActivationStash,
                )?;
                ledger.host_release(h)?;
                ledger.alloc_bytes(Category::ActivationStash, bytes)?
            }
            (None, None) => unreachable!("stash entry without storage"),
        };
        Ok((entry.value, device))
    }

    pub fn placement(&self) -> StashPlacement {
        self.placement
    }

    pub fn stored(&self) -> usize {
        self.stored
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    /// Checks that every entry was stored once and consumed once.
    pub fn finish(&self) -> Result<()> {
        let expected = self.entries.len() * self.entries.first().map_or(0, Vec::len);
        if self.stored != expected || self.consumed != expected {
            return Err(Error::Consistency(format!(
                "stash stored {} and consumed {} of {expected} entries",
                self.stored, self.consumed
            )));
        }
        Ok(())
    }
}

/// One worker's view of a minibatch.
struct WorkerPass<'a> {
    model: &'a ModelSpec,
    plan: BatchPlan,
    worker: usize,
    batch: &'a Minibatch,
    policy: PrecisionPolicy,
}

impl WorkerPass<'_> {
    fn loss_scale(&self) -> f64 {
        1.0 / self.plan.u as f64
    }

    fn rows(&self, t: &Tensor, mb: usize) -> Result<Tensor> {
        let start = (self.worker * self.plan.u + mb) * self.plan.ub;
        Ok(self.policy.to_device(&t.slice_rows(start, self.plan.ub)?))
    }

    fn input(&self, mb: usize) -> Result<Tensor> {
        self.rows(&self.batch.inputs, mb)
    }

    /// Loads the target for microbatch `mb`, evaluates the loss head and
    /// returns the scaled loss and its cotangent.
    fn loss(&self, pred: &Tensor, mb: usize, ledger: &mut MemoryLedger) -> Result<(f64, Tensor)> {
        let target = self.rows(&self.batch.targets, mb)?;
        let bytes = target.byte_size();
        ledger.record_transfer(Direction::HostToDevice, bytes, Category::Workspace)?;
        let a = ledger.alloc_bytes(Category::Workspace, bytes)?;
        let out = loss_head(pred, &target, self.loss_scale())?;
        ledger.release(a)?;
        Ok(out)
    }
}

fn alloc_nonzero(
    ledger: &mut MemoryLedger,
    category: Category,
    bytes: u64,
) -> Result<Option<AllocId>> {
    if bytes == 0 {
        Ok(None)
    } else {
        ledger.alloc_bytes(category, bytes).map(Some)
    }
}

fn release_opt(ledger: &mut MemoryLedger, handle: Option<AllocId>) -> Result<()> {
    match handle {
        Some(h) => ledger.release(h),
        None => Ok(()),
    }
}

/// Whole-model pass over `u` microbatches. With `u == 1` this is the
/// conventional schedule.
fn baseline_pass(p: &WorkerPass, eps: &mut EpsStore, ledger: &mut MemoryLedger) -> Result<f64> {
    let n = p.model.n_layers();
    let u = p.plan.u;
    let dev = p.policy.device_precision();

    let mut layers = Vec::with_capacity(n);
    for l in 0..n {
        let dl = eps.fetch_layer(l, ledger)?;
        dl.activate(ledger)?;
        layers.push(dl);
    }
    let mut acc: Vec<Option<LayerParams>> = vec![None; n];
    let mut acc_allocs = Vec::new();
    if u > 1 {
        for spec in &p.model.layers {
            acc_allocs.push(ledger.alloc(Category::Gradients, spec.param_count(), dev)?);
        }
    }

    let mut loss_total = 0.0;
    for mb in 0..u {
        let mut held = Vec::new();
        let x = p.input(mb)?;
        ledger.record_transfer(
            Direction::HostToDevice,
            x.byte_size(),
            Category::ActivationStash,
        )?;
        held.push(ledger.alloc_bytes(Category::ActivationStash, x.byte_size())?);
        let mut boundaries = vec![x];
        let mut residuals = Vec::with_capacity(n);
        for (l, spec) in p.model.layers.iter().enumerate() {
            let (y, res) = layer_forward(spec, &layers[l].params, &boundaries[l])?;
            held.extend(alloc_nonzero(ledger, Category::Workspace, res.byte_size())?);
            held.push(ledger.alloc_bytes(Category::ActivationStash, y.byte_size())?);
            boundaries.push(y);
            residuals.push(res);
        }

        let (loss, mut dy) = p.loss(&boundaries[n], mb, ledger)?;
        loss_total += loss;
        let mut dy_alloc = ledger.alloc_bytes(Category::Gradients, dy.byte_size())?;
        let mut grads = Vec::with_capacity(n);
        for (l, spec) in p.model.layers.iter().enumerate().rev() {
            let (dx, dp) =
                layer_backward(spec, &layers[l].params, &boundaries[l], &residuals[l], &dy)?;
            let g_alloc = ledger.alloc_bytes(Category::Gradients, dp.byte_size())?;
            let dx_alloc = ledger.alloc_bytes(Category::Gradients, dx.byte_size())?;
            ledger.release(dy_alloc)?;
            dy = dx;
            dy_alloc = dx_alloc;
            grads.push((l, dp, g_alloc));
        }
        ledger.release(dy_alloc)?;

        for (l, dp, g_alloc) in grads.into_iter().rev() {
            if u == 1 {
                eps.push_gradients(l, p.worker, dp, g_alloc, ledger)?;
            } else {
                accumulate(&mut acc[l], dp)?;
                ledger.release(g_alloc)?;
            }
        }
        for h in held {
            ledger.release(h)?;
        }
    }

    for (l, alloc) in acc_allocs.into_iter().enumerate() {
        let g = acc[l].take().expect("u > 1 accumulated every layer");
        eps.push_gradients(l, p.worker, g, alloc, ledger)?;
    }
    for dl in layers {
        dl.release(ledger)?;
    }
    Ok(loss_total)
}

/// Layer-to-layer relay over `u` microbatches.
fn l2l_pass(
    p: &WorkerPass,
    placement: StashPlacement,
    eps: &mut EpsStore,
    ledger: &mut MemoryLedger,
) -> Result<f64> {
    let n = p.model.n_layers();
    let u = p.plan.u;
    let dev = p.policy.device_precision();
    let mut stash = ActivationStash::new(n + 1, u, placement);

    // Forward phase. Under host placement `current` holds the device copy of
    // the boundary feeding the executing layer.
    let mut current: Vec<(Tensor, AllocId)> = Vec::new();
    for mb in 0..u {
        let x = p.input(mb)?;
        let bytes = x.byte_size();
        match placement {
            StashPlacement::Host => {
                stash.store_host(0, mb, x.clone(), false, ledger)?;
                ledger.record_transfer(
                    Direction::HostToDevice,
                    bytes,
                    Category::ActivationStash,
                )?;
                let a = ledger.alloc_bytes(Category::ActivationStash, bytes)?;
                current.push((x, a));
            }
            StashPlacement::Device => {
                ledger.record_transfer(
                    Direction::HostToDevice,
                    bytes,
                    Category::ActivationStash,
                )?;
                let a = ledger.alloc_bytes(Category::ActivationStash, bytes)?;
                stash.store_device(0, mb, x, a)?;
            }
        }
    }

    let mut active = eps.fetch_layer(0, ledger)?;
    active.activate(ledger)?;
    for l in 0..n {
        let transit = if l + 1 < n {
            Some(eps.fetch_layer(l + 1, ledger)?)
        } else {
            None
        };
        let spec = &p.model.layers[l];
        let mut outputs = Vec::with_capacity(u);
        let inputs: Vec<&Tensor> = match placement {
            StashPlacement::Host => current.iter().map(|(x, _)| x).collect(),
            StashPlacement::Device => (0..u).map(|mb| stash.peek(l, mb)).collect::<Result<_>>()?,
        };
        for x in inputs {
            let (y, res) = layer_forward(spec, &active.params, x)?;
            let ws = alloc_nonzero(ledger, Category::Workspace, res.byte_size())?;
            let ya = ledger.alloc_bytes(Category::ActivationStash, y.byte_size())?;
            release_opt(ledger, ws)?;
            outputs.push((y, ya));
        }
        match placement {
            StashPlacement::Host => {
                for (mb, (y, _)) in outputs.iter().enumerate() {
                    stash.store_host(l + 1, mb, y.clone(), true, ledger)?;
                }
                for (_, a) in current.drain(..) {
                    ledger.release(a)?;
                }
                current = outputs;
            }
            StashPlacement::Device => {
                for (mb, (y, ya)) in outputs.into_iter().enumerate() {
                    stash.store_device(l + 1, mb, y, ya)?;
                }
            }
        }
        active.release(ledger)?;
        if let Some(next) = transit {
            next.activate(ledger)?;
            active = next;
        } else {
            break;
        }
    }
    for (_, a) in current.drain(..) {
        ledger.release(a)?;
    }

    // Loss head on the last boundary.
    let mut loss_total = 0.0;
    let mut cotangents: Vec<(Tensor, AllocId)> = Vec::with_capacity(u);
    for mb in 0..u {
        let (y, ya) = stash.take(n, mb, ledger)?;
        let (loss, dy) = p.loss(&y, mb, ledger)?;
        loss_total += loss;
        let da = ledger.alloc_bytes(Category::Gradients, dy.byte_size())?;
        ledger.release(ya)?;
        cotangents.push((dy, da));
    }

    // Backward phase: re-fetch, recompute, accumulate over microbatches,
    // push once per layer.
    let mut active = eps.fetch_layer(n - 1, ledger)?;
    active.activate(ledger)?;
    for l in (0..n).rev() {
        let transit = if l > 0 {
            Some(eps.fetch_layer(l - 1, ledger)?)
        } else {
            None
        };
        let spec = &p.model.layers[l];
        let acc_alloc = ledger.alloc(Category::Gradients, spec.param_count(), dev)?;
        let mut acc = None;
        for (mb, cot) in cotangents.iter_mut().enumerate() {
            let (x, xa) = stash.take(l, mb, ledger)?;
            let (y, res) = layer_forward(spec, &active.params, &x)?;
            let ws = alloc_nonzero(ledger, Category::Workspace, res.byte_size() + y.byte_size())?;
            let (dx, dp) = layer_backward(spec, &active.params, &x, &res, &cot.0)?;
            let dxa = ledger.alloc_bytes(Category::Gradients, dx.byte_size())?;
            ledger.release(cot.1)?;
            *cot = (dx, dxa);
            accumulate(&mut acc, dp)?;
            release_opt(ledger, ws)?;
            ledger.release(xa)?;
        }
        let grads = acc.expect("at least one microbatch");
        eps.push_gradients(l, p.worker, grads, acc_alloc, ledger)?;
        active.release(ledger)?;
        if let Some(next) = transit {
            next.activate(ledger)?;
            active = next;
        } else {
            break;
        }
    }
    for (_, a) in cotangents {
        ledger.release(a)?;
    }
    stash.finish()?;
    Ok(loss_total)
}

fn worker_pass(
    schedule: Schedule,
    p: &WorkerPass,
    eps: &mut EpsStore,
    ledger: &mut MemoryLedger,
) -> Result<f64> {
    match schedule {
        Schedule::Conventional | Schedule::BaselineAg => baseline_pass(p, eps, ledger),
        Schedule::L2l(placement) => l2l_pass(p, placement, eps, ledger),
    }
}

/// Runs `schedule` over every minibatch in `data` with `plan.k` simulated
/// workers, executed in `worker_order` (ascending when `None`).
pub fn run_data_parallel(
    schedule: Schedule,
    model: &ModelSpec,
    data: &[Minibatch],
    plan: BatchPlan,
    eps: &mut EpsStore,
    ledgers: &mut [MemoryLedger],
    worker_order: Option<&[usize]>,
) -> Result<RunReport> {
    plan.validate()?;
    model.validate()?;
    if schedule == Schedule::Conventional && plan.u != 1 {
        return Err(Error::Plan(format!(
            "conventional execution has a single microbatch, got u={}",
            plan.u
        )));
    }
    if eps.workers() != plan.k || ledgers.len() != plan.k {
        return Err(Error::Plan(format!(
            "plan has k={} workers but the param-server expects {} and {} ledgers were given",
            plan.k,
            eps.workers(),
            ledgers.len()
        )));
    }
    if eps.n_layers() != model.n_layers() {
        return Err(Error::Plan(
            "param-server and model disagree on depth".into(),
        ));
    }
    let order: Vec<usize> = match worker_order {
        Some(o) => {
            let mut sorted = o.to_vec();
            sorted.sort_unstable();
            if sorted != (0..plan.k).collect::<Vec<_>>() {
                return Err(Error::Plan(format!(
                    "{o:?} is not a permutation of the workers"
                )));
            }
            o.to_vec()
        }
        None => (0..plan.k).collect(),
    };

    let mut loss_trace = Vec::with_capacity(data.len());
    for batch in data {
        if batch.rows() != plan.total_batch() || batch.targets.rows() != plan.total_batch() {
            return Err(Error::Plan(format!(
                "minibatch has {} rows, plan needs k·u·ub = {}",
                batch.rows(),
                plan.total_batch()
            )));
        }
        let mut losses = vec![0.0; plan.k];
        for &worker in &order {
            let pass = WorkerPass {
                model,
                plan,
                worker,
                batch,
                policy: eps.policy(),
            };
            losses[worker] = worker_pass(schedule, &pass, eps, &mut ledgers[worker])?;
        }
        eps.step_all()?;
        loss_trace.push(losses.iter().sum::<f64>() / plan.k as f64);
    }

    let memory = ledgers
        .iter()
        .map(MemoryLedger::report)
        .collect::<Result<Vec<_>>>()?;
    Ok(RunReport {
        schedule,
        plan,
        final_master: eps.snapshot(),
        loss_trace,
        memory,
        steps: data.len(),
        last_gradients: eps.last_reduced().iter().flatten().cloned().collect(),
    })
}

fn single_worker(
    schedule: Schedule,
    model: &ModelSpec,
    data: &[Minibatch],
    plan: BatchPlan,
    eps: &mut EpsStore,
    ledger: &mut MemoryLedger,
) -> Result<RunReport> {
    if plan.k != 1 {
        return Err(Error::Plan(format!(
            "single-worker schedule given k={}",
            plan.k
        )));
    }
    run_data_parallel(
        schedule,
        model,
        data,
        plan,
        eps,
        std::slice::from_mut(ledger),
        None,
    )
}

pub fn run_conventional(
    model: &ModelSpec,
    data: &[Minibatch],
    plan: BatchPlan,
    eps: &mut EpsStore,
    ledger: &mut MemoryLedger,
) -> Result<RunReport> {
    single_worker(Schedule::Conventional, model, data, plan, eps, ledger)
}

pub fn run_baseline_ag(
    model: &ModelSpec,
    data: &[Minibatch],
    plan: BatchPlan,
    eps: &mut EpsStore,
    ledger: &mut MemoryLedger,
) -> Result<RunReport> {
    single_worker(Schedule::BaselineAg, model, data, plan, eps, ledger)
}

pub fn run_l2l(
    model: &ModelSpec,
    data: &[Minibatch],
    plan: BatchPlan,
    placement: StashPlacement,
    eps: &mut EpsStore,
    ledger: &mut MemoryLedger,
) -> Result<RunReport> {
    single_worker(Schedule::L2l(placement), model, data, plan, eps, ledger)
}

/// Parameter-count limit for finite-difference checks.
pub const GRADCHECK_MAX_PARAMS: usize = 5_000;
pub const GRADCHECK_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding do not dominate the maximum.
pub const GRADCHECK_REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Gradient produced by the schedule.
    pub analytic: Vec<LayerParams>,
}

/// Compares the minibatch gradient produced by `schedule` with central
/// finite differences of the scalar loss, all in FP64.
pub fn gradcheck(
    model: &ModelSpec,
    plan: BatchPlan,
    schedule: Schedule,
    data_seed: u64,
) -> Result<GradcheckReport> {
    model.validate()?;
    if model.param_count() > GRADCHECK_MAX_PARAMS {
        return Err(Error::Plan(format!(
            "gradcheck needs at most {GRADCHECK_MAX_PARAMS} parameters, model has {}",
            model.param_count()
        )));
    }
    if model.output_width() != model.hidden {
        return Err(Error::Plan(
            "teacher task needs output width = hidden".into(),
        ));
    }
    let batch = TeacherTask::new(model.hidden, data_seed).minibatch(0, plan.total_batch())?;
    let mut eps = EpsStore::new(
        model,
        PrecisionPolicy::Fp64,
        Optimizer::Sgd { lr: 0.0 },
        plan.k,
    )?;
    let params: Vec<LayerParams> = (0..model.n_layers())
        .map(|l| eps.master(l).clone())
        .collect();
    let mut ledgers = vec![MemoryLedger::new(); plan.k];
    let report = run_data_parallel(
        schedule,
        model,
        std::slice::from_ref(&batch),
        plan,
        &mut eps,
        &mut ledgers,
        None,
    )?;

    let objective = |params: &[LayerParams]| -> Result<f64> {
        let mut total = 0.0;
        for mb in 0..plan.k * plan.u {
            let mut x = batch.inputs.slice_rows(mb * plan.ub, plan.ub)?;
            for (spec, p) in model.layers.iter().zip(params) {
                x = layer_forward(spec, p, &x)?.0;
            }
            let t = batch.targets.slice_rows(mb * plan.ub, plan.ub)?;
            total += loss_head(&x, &t, 1.0 / plan.u as f64)?.0;
        }
        Ok(total / plan.k as f64)
    };

    let mut perturbed = params.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    let mut checked = 0;
    for l in 0..params.len() {
        for t in 0..params[l].tensors.len() {
            for i in 0..params[l].tensors[t].len() {
                let orig = params[l].tensors[t].data()[i];
                perturbed[l].tensors[t].set(i, orig + GRADCHECK_STEP);
                let plus = objective(&perturbed)?;
                perturbed[l].tensors[t].set(i, orig - GRADCHECK_STEP);
                let minus = objective(&perturbed)?;
                perturbed[l].tensors[t].set(i, orig);
                let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
                let analytic = report.last_gradients[l].tensors[t].data()[i];
                let abs = (analytic - numeric).abs();
                let rel = abs / analytic.abs().max(numeric.abs()).max(GRADCHECK_REL_FLOOR);
                max_abs = max_abs.max(abs);
                max_rel = max_rel.max(rel);
                checked += 1;
            }
        }
    }
    Ok(GradcheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        checked,
        analytic: report.last_gradients,
    })
}
