//! Eager param-server: the host-side owner of the model.
//!
//! The store keeps the master copy of every layer (FP32, or FP64 for oracle
//! runs), the optimizer state, and one reduction slot per layer. Layers are
//! streamed to the device with [`EpsStore::fetch_layer`], converted according
//! to the [`PrecisionPolicy`]. Gradients come back per layer and per worker
//! through [`EpsStore::push_gradients`] and are folded into the slot as soon
//! as the contribution order allows; the fold always runs in ascending worker
//! id so the reduced value does not depend on arrival order.

use std::io::{BufRead, Write};

use num_traits::One;

use crate::error::{Error, Result};
use crate::layers::{accumulate, init_params, LayerParams, LayerSpec, ModelSpec};
use crate::memory::{AllocId, Category, Direction, MemoryLedger};
use crate::tensor::{quantize_sim_fp16, with_scalar, Precision, Scalar, Tensor};

/// What happens to values on their way to the device under CMP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantizer {
    Binary16,
    /// Leaves values untouched; used to show the master copy is never fed
    /// back through quantization.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionPolicy {
    /// Oracle mode: master and device both FP64.
    Fp64,
    Fp32,
    /// Cross mixed precision: FP32 master and optimizer, FP16 device compute.
    Cmp(Quantizer),
}

impl PrecisionPolicy {
    pub const CMP: PrecisionPolicy = PrecisionPolicy::Cmp(Quantizer::Binary16);

    pub fn master_precision(self) -> Precision {
        match self {
            PrecisionPolicy::Fp64 => Precision::Fp64,
            _ => Precision::Fp32,
        }
    }

    pub fn device_precision(self) -> Precision {
        match self {
            PrecisionPolicy::Fp64 => Precision::Fp64,
            PrecisionPolicy::Fp32 | PrecisionPolicy::Cmp(Quantizer::Identity) => Precision::Fp32,
            PrecisionPolicy::Cmp(Quantizer::Binary16) => Precision::SimFp16,
        }
    }

    /// Converts a host tensor into its device representation.
    pub fn to_device(self, t: &Tensor) -> Tensor {
        match self {
            PrecisionPolicy::Cmp(Quantizer::Binary16) if t.precision() != Precision::SimFp16 => {
                quantize_sim_fp16(t).expect("non-fp16 input")
            }
            _ => t.to_precision(self.device_precision()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrecisionPolicy::Fp64 => "fp64",
            PrecisionPolicy::Fp32 => "fp32",
            PrecisionPolicy::Cmp(Quantizer::Binary16) => "cmp",
            PrecisionPolicy::Cmp(Quantizer::Identity) => "cmp-identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum OptState {
    None,
    Adam {
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        step: i32,
    },
}

#[derive(Debug, Clone, Default)]
struct ReduceSlot {
    pending: Vec<Option<LayerParams>>,
    contributed: Vec<bool>,
    next_worker: usize,
    received: usize,
    acc: Option<LayerParams>,
}

impl ReduceSlot {
    fn new(workers: usize) -> Self {
        ReduceSlot {
            pending: vec![None; workers],
            contributed: vec![false; workers],
            ..Default::default()
        }
    }
}

/// A layer's weights resident on the device.
///
/// Fetched layers start out in the transit buffer; [`DeviceLayer::activate`]
/// turns them into the executing layer.
#[derive(Debug)]
pub struct DeviceLayer {
    pub index: usize,
    pub params: LayerParams,
    handle: AllocId,
}

impl DeviceLayer {
    pub fn activate(&self, ledger: &mut MemoryLedger) -> Result<()> {
        ledger.recategorize(self.handle, Category::LayerWeights)
    }

    pub fn release(self, ledger: &mut MemoryLedger) -> Result<()> {
        ledger.release(self.handle)
    }
}

/// Deep copy of the master parameters at a given version.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub master: Vec<LayerParams>,
    pub version: u64,
}

impl Snapshot {
    pub fn bitwise_eq(&self, other: &Snapshot) -> bool {
        self.master.len() == other.master.len()
            && self
                .master
                .iter()
                .zip(&other.master)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Largest `|a − b| / max(|b|, tiny)` over all parameters.
    pub fn max_relative_diff(&self, other: &Snapshot) -> f64 {
        self.master
            .iter()
            .zip(&other.master)
            .flat_map(|(a, b)| a.flat().zip(b.flat()).collect::<Vec<_>>())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1e-30))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct EpsStore {
    master: Vec<LayerParams>,
    optimizer: Optimizer,
    opt_state: Vec<OptState>,
    slots: Vec<ReduceSlot>,
    policy: PrecisionPolicy,
    workers: usize,
    version: u64,
    stepped: Vec<bool>,
    last_reduced: Vec<Option<LayerParams>>,
}

impl EpsStore {
    /// Initializes the master copy from the model's seed.
    pub fn new(
        model: &ModelSpec,
        policy: PrecisionPolicy,
        optimizer: Optimizer,
        workers: usize,
    ) -> Result<Self> {
        model.validate()?;
        Self::from_params(
            init_params(model, policy.master_precision()),
            policy,
            optimizer,
            workers,
        )
    }

    pub fn from_params(
        master: Vec<LayerParams>,
        policy: PrecisionPolicy,
        optimizer: Optimizer,
        workers: usize,
    ) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Plan("worker count must be positive".into()));
        }
        let mp = policy.master_precision();
        let master: Vec<LayerParams> = master.iter().map(|p| p.to_precision(mp)).collect();
        let opt_state = master
            .iter()
            .map(|p| match optimizer {
                Optimizer::Sgd { .. } => OptState::None,
                Optimizer::Adam { .. } => {
                    let zeros = LayerParams::zeros(p.spec, mp).tensors;
                    OptState::Adam {
                        m: zeros.clone(),
                        v: zeros,
                        step: 0,
                    }
                }
            })
            .collect();
        let n = master.len();
        Ok(EpsStore {
            master,
            optimizer,
            opt_state,
            slots: (0..n).map(|_| ReduceSlot::new(workers)).collect(),
            policy,
            workers,
            version: 0,
            stepped: vec![false; n],
            last_reduced: vec![None; n],
        })
    }

    pub fn n_layers(&self) -> usize {
        self.master.len()
    }

    pub fn policy(&self) -> PrecisionPolicy {
        self.policy
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn master(&self, layer: usize) -> &LayerParams {
        &self.master[layer]
    }

    pub fn layer_spec(&self, layer: usize) -> LayerSpec {
        self.master[layer].spec
    }

    /// Mean gradient applied at the most recent step of each layer.
    pub fn last_reduced(&self) -> &[Option<LayerParams>] {
        &self.last_reduced
    }

    pub fn contributions(&self, layer: usize) -> usize {
        self.slots[layer].received
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.master.len() {
            return Err(Error::Protocol(format!(
                "layer {layer} out of range 0..{}",
                self.master.len()
            )));
        }
        Ok(())
    }

    /// Streams layer `layer` to the device: converts per policy, logs the
    /// host-to-device transfer and charges the transit buffer.
    pub fn fetch_layer(&self, layer: usize, ledger: &mut MemoryLedger) -> Result<DeviceLayer> {
        self.check_layer(layer)?;
        let master = &self.master[layer];
        let params = LayerParams {
            spec: master.spec,
            tensors: master
                .tensors
                .iter()
                .map(|t| self.policy.to_device(t))
                .collect(),
        };
        let bytes = params.byte_size();
        let handle = ledger.alloc_bytes(Category::TransitBuffer, bytes)?;
        ledger.record_transfer(Direction::HostToDevice, bytes, Category::LayerWeights)?;
        Ok(DeviceLayer {
            index: layer,
            params,
            handle,
        })
    }

    /// Receives one worker's gradient for `layer`. The device allocation
    /// `device_grads` is released once the transfer is logged.
    pub fn push_gradients(
        &mut self,
        layer: usize,
        worker: usize,
        grads: LayerParams,
        device_grads: AllocId,
        ledger: &mut MemoryLedger,
    ) -> Result<()> {
        self.check_layer(layer)?;
        if worker >= self.workers {
            return Err(Error::Protocol(format!(
                "worker {worker} out of range 0..{}",
                self.workers
            )));
        }
        if self.slots[layer].contributed[worker] {
            return Err(Error::Protocol(format!(
                "worker {worker} already contributed to layer {layer}"
            )));
        }
        self.master[layer].check_layout(&grads)?;
        ledger.record_transfer(
            Direction::DeviceToHost,
            grads.byte_size(),
            Category::Gradients,
        )?;
        ledger.release(device_grads)?;

        let widened = grads.to_precision(self.policy.master_precision());
        let slot = &mut self.slots[layer];
        slot.contributed[worker] = true;
        slot.received += 1;
        slot.pending[worker] = Some(widened);
        while slot.next_worker < self.workers {
            let Some(g) = slot.pending[slot.next_worker].take() else {
                break;
            };
            accumulate(&mut slot.acc, g)?;
            slot.next_worker += 1;
        }
        Ok(())
    }

    /// Mean-reduces the slot for `layer` and applies the optimizer to its
    /// master copy. Layers are independent: stepping them in any order gives
    /// the same result. The version advances once every layer has stepped.
    pub fn reduce_and_step(&mut self, layer: usize) -> Result<()> {
        self.check_layer(layer)?;
        let slot = &mut self.slots[layer];
        if slot.received != self.workers {
            return Err(Error::NotReady {
                layer,
                received: slot.received,
                expected: self.workers,
            });
        }
        if self.stepped[layer] {
            return Err(Error::Protocol(format!(
                "layer {layer} stepped twice in one update"
            )));
        }
        let sum = slot.acc.take().expect("full slot has an accumulator");
        *slot = ReduceSlot::new(self.workers);
        let grad = sum.div_scalar(self.workers as f64);
        apply_optimizer(
            self.optimizer,
            &mut self.master[layer],
            &mut self.opt_state[layer],
            &grad,
        )?;
        self.last_reduced[layer] = Some(grad);
        self.stepped[layer] = true;
        if self.stepped.iter().all(|s| *s) {
            self.stepped.iter_mut().for_each(|s| *s = false);
            self.version += 1;
        }
        Ok(())
    }

    /// Steps every layer in ascending order.
    pub fn step_all(&mut self) -> Result<()> {
        for l in 0..self.master.len() {
            self.reduce_and_step(l)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            master: self.master.clone(),
            version: self.version,
        }
    }

    /// Writes the master copy as `l2l-eps v1 N=.. H=.. I=..\n` followed by
    /// little-endian f32 values, layer-major.
    pub fn write_state<W: Write>(&self, hidden: usize, out: &mut W) -> Result<()> {
        let intermediate = match self.master.first().map(|p| p.spec) {
            Some(LayerSpec::EncoderBlock { intermediate, .. }) => intermediate,
            _ => 0,
        };
        writeln!(
            out,
            "l2l-eps v1 N={} H={hidden} I={intermediate}",
            self.master.len()
        )?;
        for layer in &self.master {
            for v in layer.flat() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

/// Reads a state file written by [`EpsStore::write_state`] back into FP32
/// layers shaped after `model`.
pub fn read_state<R: BufRead>(model: &ModelSpec, input: &mut R) -> Result<Vec<LayerParams>> {
    let mut header = String::new();
    input.read_line(&mut header)?;
    let intermediate = match model.layers.first() {
        Some(LayerSpec::EncoderBlock { intermediate, .. }) => *intermediate,
        _ => 0,
    };
    let expected = format!(
        "l2l-eps v1 N={} H={} I={intermediate}",
        model.n_layers(),
        model.hidden
    );
    if header.trim_end() != expected {
        return Err(Error::Consistency(format!(
            "state header `{}` does not match `{expected}`",
            header.trim_end()
        )));
    }
    let mut layers = Vec::with_capacity(model.n_layers());
    let mut buf = [0u8; 4];
    for spec in &model.layers {
        let mut tensors = Vec::new();
        for (_, shape, _) in spec.param_shapes() {
            let n = shape[0] * shape[1];
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                input.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
            tensors.push(Tensor::new(shape.to_vec(), Precision::Fp32, data)?);
        }
        layers.push(LayerParams {
            spec: *spec,
            tensors,
        });
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Consistency(format!(
            "{} trailing bytes in state file",
            rest.len()
        )));
    }
    Ok(layers)
}

fn apply_optimizer(
    optimizer: Optimizer,
    params: &mut LayerParams,
    state: &mut OptState,
    grad: &LayerParams,
) -> Result<()> {
    params.check_layout(grad)?;
    match (optimizer, state) {
        (Optimizer::Sgd { lr }, _) => {
            for (w, g) in params.tensors.iter_mut().zip(&grad.tensors) {
                *w = w.sub(&g.scale(lr))?;
            }
        }
        (
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            },
            OptState::Adam { m, v, step },
        ) => {
            *step += 1;
            let t = *step;
            for ((w, g), (m, v)) in params
                .tensors
                .iter_mut()
                .zip(&grad.tensors)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let prec = w.precision();
                let n = w.len();
                let (mut wd, mut md, mut vd) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                with_scalar!(prec, T => {
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let one = T::one();
                    let c1 = one - b1.powi(t);
                    let c2 = one - b2.powi(t);
                    let (lr, eps) = (T::of(lr), T::of(eps));
                    for i in 0..n {
                        let gi = T::of(g.data()[i]);
                        let mi = b1 * T::of(m.data()[i]) + (one - b1) * gi;
                        let vi = b2 * T::of(v.data()[i]) + (one - b2) * gi * gi;
                        let mhat = mi / c1;
                        let vhat = vi / c2;
                        let wi = T::of(w.data()[i]) - lr * mhat / (vhat.sqrt() + eps);
                        wd[i] = wi.to();
                        md[i] = mi.to();
                        vd[i] = vi.to();
                    }
                });
                *w = w.with_same_layout(wd);
                *m = m.with_same_layout(md);
                *v = v.with_same_layout(vd);
            }
        }
        (Optimizer::Adam { .. }, OptState::None) => {
            return Err(Error::Consistency("adam step without adam state".into()))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine_model(n: usize) -> ModelSpec {
        ModelSpec {
            layers: vec![
                LayerSpec::Affine {
                    input: 1,
                    output: 1
                };
                n
            ],
            hidden: 1,
            seed: 1,
            head: crate::layers::LossHead,
        }
    }

    fn filled(spec: LayerSpec, precision: Precision, value: f64) -> LayerParams {
        LayerParams {
            spec,
            tensors: spec
                .param_shapes()
                .into_iter()
                .map(|(_, s, _)| Tensor::filled(s.to_vec(), precision, value))
                .collect(),
        }
    }

    fn push(
        eps: &mut EpsStore,
        ledger: &mut MemoryLedger,
        layer: usize,
        worker: usize,
        g: LayerParams,
    ) -> Result<()> {
        let h = ledger.alloc_bytes(Category::Gradients, g.byte_size())?;
        eps.push_gradients(layer, worker, g, h, ledger)
    }

    #[test]
    fn fetch_fp32_is_identity() {
        let model = ModelSpec::encoder(2, 4, 8, 3);
        let eps =
            EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::Sgd { lr: 0.1 }, 1).unwrap();
        let mut ledger = MemoryLedger::new();
        let dl = eps.fetch_layer(1, &mut ledger).unwrap();
        assert!(dl.params.bitwise_eq(eps.master(1)));
        assert_eq!(ledger.current(Category::TransitBuffer), 4 * (2 * 32 + 12));
        dl.activate(&mut ledger).unwrap();
        assert_eq!(ledger.current(Category::LayerWeights), 4 * (2 * 32 + 12));
        dl.release(&mut ledger).unwrap();
        assert!(eps.fetch_layer(2, &mut ledger).is_err());
    }

    #[test]
    fn fetch_cmp_quantizes_and_halves_bytes() {
        let spec = LayerSpec::Affine {
            input: 1,
            output: 1,
        };
        let master = vec![filled(spec, Precision::Fp32, 0.1)];
        let eps =
            EpsStore::from_params(master, PrecisionPolicy::CMP, Optimizer::Sgd { lr: 0.1 }, 1)
                .unwrap();
        let mut ledger = MemoryLedger::new();
        let dl = eps.fetch_layer(0, &mut ledger).unwrap();
        assert_eq!(dl.params.tensors[0].data(), &[0.099_975_585_937_5]);
        assert_eq!(dl.params.precision(), Precision::SimFp16);
        assert_eq!(ledger.transfer_log()[0].bytes, 2 * 2);
        // master untouched
        assert_eq!(eps.master(0).tensors[0].data()[0], 0.1f32 as f64);
        dl.release(&mut ledger).unwrap();

        let model = ModelSpec::encoder(1, 8, 16, 1);
        let fp32 =
            EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::Sgd { lr: 0.1 }, 1).unwrap();
        let cmp =
            EpsStore::new(&model, PrecisionPolicy::CMP, Optimizer::Sgd { lr: 0.1 }, 1).unwrap();
        let mut l1 = MemoryLedger::new();
        let mut l2 = MemoryLedger::new();
        fp32.fetch_layer(0, &mut l1)
            .unwrap()
            .release(&mut l1)
            .unwrap();
        cmp.fetch_layer(0, &mut l2)
            .unwrap()
            .release(&mut l2)
            .unwrap();
        assert_eq!(l1.transfer_log()[0].bytes, 2 * l2.transfer_log()[0].bytes);
        assert_eq!(
            l2.transfer_log()[0].bytes,
            2 * model.layers[0].param_count() as u64
        );
    }

    #[test]
    fn opposite_pushes_cancel() {
        let spec = LayerSpec::Affine {
            input: 1,
            output: 1,
        };
        let mut eps = EpsStore::from_params(
            vec![filled(spec, Precision::Fp32, 1.0)],
            PrecisionPolicy::Fp32,
            Optimizer::Sgd { lr: 0.1 },
            2,
        )
        .unwrap();
        let mut ledger = MemoryLedger::new();
        push(
            &mut eps,
            &mut ledger,
            0,
            0,
            filled(spec, Precision::Fp32, 0.75),
        )
        .unwrap();
        push(
            &mut eps,
            &mut ledger,
            0,
            1,
            filled(spec, Precision::Fp32, -0.75),
        )
        .unwrap();
        eps.reduce_and_step(0).unwrap();
        let g = eps.last_reduced()[0].as_ref().unwrap();
        assert!(g.flat().all(|v| v == 0.0));
        assert!(eps.master(0).flat().all(|v| v == 1.0));
        assert_eq!(ledger.device_in_use(), 0);
    }

    #[test]
    fn single_push_is_identity_and_isolated() {
        let model = affine_model(4);
        let mut eps =
            EpsStore::new(&model, PrecisionPolicy::Fp64, Optimizer::Sgd { lr: 1.0 }, 1).unwrap();
        let before = eps.snapshot();
        let mut ledger = MemoryLedger::new();
        let spec = model.layers[3];
        push(
            &mut eps,
            &mut ledger,
            3,
            0,
            filled(spec, Precision::Fp64, 0.5),
        )
        .unwrap();
        for l in 0..3 {
            assert_eq!(eps.contributions(l), 0);
        }
        eps.reduce_and_step(3).unwrap();
        assert!(eps.last_reduced()[3].as_ref().unwrap().bitwise_eq(&filled(
            spec,
            Precision::Fp64,
            0.5
        )));
        for l in 0..3 {
            assert!(eps.master(l).bitwise_eq(&before.master[l]));
        }
    }

    #[test]
    fn protocol_errors() {
        let model = affine_model(2);
        let mut eps =
            EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::Sgd { lr: 1.0 }, 2).unwrap();
        let mut ledger = MemoryLedger::new();
        let g = filled(model.layers[0], Precision::Fp32, 1.0);
        push(&mut eps, &mut ledger, 0, 0, g.clone()).unwrap();
        assert!(matches!(
            push(&mut eps, &mut ledger, 0, 0, g.clone()),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            eps.reduce_and_step(0),
            Err(Error::NotReady {
                received: 1,
                expected: 2,
                ..
            })
        ));
        assert!(matches!(
            push(&mut eps, &mut ledger, 0, 5, g.clone()),
            Err(Error::Protocol(_))
        ));
        let wrong = filled(
            LayerSpec::Affine {
                input: 2,
                output: 1,
            },
            Precision::Fp32,
            1.0,
        );
        assert!(matches!(
            push(&mut eps, &mut ledger, 1, 0, wrong),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let spec = LayerSpec::Affine {
            input: 1,
            output: 1,
        };
        let mut eps = EpsStore::from_params(
            vec![filled(spec, Precision::Fp64, 1.0)],
            PrecisionPolicy::Fp64,
            Optimizer::Sgd { lr: 0.1 },
            1,
        )
        .unwrap();
        let mut ledger = MemoryLedger::new();
        push(
            &mut eps,
            &mut ledger,
            0,
            0,
            filled(spec, Precision::Fp64, 0.5),
        )
        .unwrap();
        eps.reduce_and_step(0).unwrap();
        for v in eps.master(0).flat() {
            assert!((v - 0.95).abs() < 1e-15);
        }
        assert_eq!(eps.version(), 1);
    }

    #[test]
    fn zero_gradient_leaves_weights() {
        for opt in [Optimizer::Sgd { lr: 0.3 }, Optimizer::adam(0.01)] {
            let model = ModelSpec::encoder(1, 4, 8, 9);
            let mut eps = EpsStore::new(&model, PrecisionPolicy::Fp32, opt, 1).unwrap();
            let before = eps.snapshot();
            let mut ledger = MemoryLedger::new();
            push(
                &mut eps,
                &mut ledger,
                0,
                0,
                LayerParams::zeros(model.layers[0], Precision::Fp32),
            )
            .unwrap();
            eps.reduce_and_step(0).unwrap();
            assert!(eps.snapshot().bitwise_eq(&before));
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let spec = LayerSpec::Affine {
            input: 1,
            output: 1,
        };
        let mut eps = EpsStore::from_params(
            vec![filled(spec, Precision::Fp64, 1.0)],
            PrecisionPolicy::Fp64,
            Optimizer::Adam {
                lr: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                eps: 0.0,
            },
            1,
        )
        .unwrap();
        let mut ledger = MemoryLedger::new();
        push(
            &mut eps,
            &mut ledger,
            0,
            0,
            filled(spec, Precision::Fp64, 3.0),
        )
        .unwrap();
        eps.reduce_and_step(0).unwrap();
        // bias-corrected first step is lr * sign(g)
        for v in eps.master(0).flat() {
            assert!((v - 0.99).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn step_order_does_not_matter() {
        let model = ModelSpec::encoder(3, 4, 8, 5);
        let run = |order: [usize; 3]| {
            let mut eps =
                EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::adam(0.01), 1).unwrap();
            let mut ledger = MemoryLedger::new();
            for l in 0..3 {
                let g = filled(model.layers[l], Precision::Fp32, 0.1 * (l as f64 + 1.0));
                push(&mut eps, &mut ledger, l, 0, g).unwrap();
            }
            for l in order {
                eps.reduce_and_step(l).unwrap();
            }
            eps.snapshot()
        };
        assert!(run([0, 1, 2]).bitwise_eq(&run([2, 1, 0])));
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let model = ModelSpec::encoder(1, 4, 8, 5);
        let grads: Vec<LayerParams> = (0..4)
            .map(|w| {
                let mut g = init_params(&ModelSpec::encoder(1, 4, 8, 100 + w), Precision::Fp32);
                g.remove(0)
            })
            .collect();
        let run = |order: &[usize]| {
            let mut eps =
                EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::Sgd { lr: 0.1 }, 4)
                    .unwrap();
            let mut ledger = MemoryLedger::new();
            for &w in order {
                push(&mut eps, &mut ledger, 0, w, grads[w].clone()).unwrap();
            }
            eps.reduce_and_step(0).unwrap();
            eps.snapshot()
        };
        let base = run(&[0, 1, 2, 3]);
        for order in [[3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]] {
            assert!(run(&order).bitwise_eq(&base));
        }
    }

    #[test]
    fn snapshot_is_a_copy() {
        let model = affine_model(2);
        let mut eps =
            EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::Sgd { lr: 1.0 }, 1).unwrap();
        let s1 = eps.snapshot();
        let s2 = eps.snapshot();
        assert!(s1.bitwise_eq(&s2));
        assert_eq!(s1.version, eps.version());
        let mut ledger = MemoryLedger::new();
        for l in 0..2 {
            push(
                &mut eps,
                &mut ledger,
                l,
                0,
                filled(model.layers[l], Precision::Fp32, 1.0),
            )
            .unwrap();
        }
        eps.step_all().unwrap();
        assert_eq!(eps.version(), 1);
        assert!(s1.bitwise_eq(&s2));
        assert!(!eps.snapshot().bitwise_eq(&s1));
    }

    #[test]
    fn version_counts_complete_updates() {
        let model = affine_model(2);
        let mut eps =
            EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::Sgd { lr: 1.0 }, 1).unwrap();
        let mut ledger = MemoryLedger::new();
        let g = filled(model.layers[0], Precision::Fp32, 1.0);
        push(&mut eps, &mut ledger, 0, 0, g.clone()).unwrap();
        eps.reduce_and_step(0).unwrap();
        assert_eq!(eps.version(), 0);
        push(&mut eps, &mut ledger, 0, 0, g.clone()).unwrap();
        assert!(matches!(eps.reduce_and_step(0), Err(Error::Protocol(_))));
        push(&mut eps, &mut ledger, 1, 0, g).unwrap();
        eps.reduce_and_step(1).unwrap();
        assert_eq!(eps.version(), 1);
    }

    #[test]
    fn state_file_round_trip() {
        let model = ModelSpec::encoder(2, 4, 8, 3);
        let eps =
            EpsStore::new(&model, PrecisionPolicy::Fp32, Optimizer::Sgd { lr: 1.0 }, 1).unwrap();
        let mut buf = Vec::new();
        eps.write_state(model.hidden, &mut buf).unwrap();
        assert!(buf.starts_with(b"l2l-eps v1 N=2 H=4 I=8\n"));
        assert_eq!(buf.len(), 23 + 4 * model.param_count());
        let layers = read_state(&model, &mut buf.as_slice()).unwrap();
        for (l, p) in layers.iter().enumerate() {
            assert!(p.bitwise_eq(eps.master(l)));
        }
        let other = ModelSpec::encoder(3, 4, 8, 3);
        assert!(read_state(&other, &mut buf.as_slice()).is_err());
    }
}
