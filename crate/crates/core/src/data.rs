//! Synthetic teacher task.
//!
//! Inputs are uniform in `[-1, 1]`; targets are the outputs of a fixed,
//! randomly initialized encoder block (the "teacher") plus small uniform
//! noise. Every minibatch is a pure function of `(seed, step)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{init_params, layer_forward, LayerParams, LayerSpec, ModelSpec};
use crate::tensor::{Precision, Tensor};

const TEACHER_SEED_SALT: u64 = 0x7eac_4e12_9b1d_33f5;
const NOISE: f64 = 0.01;

/// One minibatch for all workers, rows ordered worker-major then
/// microbatch-major. Values are FP64 and converted on their way to a device.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl Minibatch {
    pub fn rows(&self) -> usize {
        self.inputs.rows()
    }
}

#[derive(Debug, Clone)]
pub struct TeacherTask {
    hidden: usize,
    seed: u64,
    teacher_spec: LayerSpec,
    teacher: LayerParams,
}

impl TeacherTask {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let teacher_model = ModelSpec::encoder(1, hidden, 4 * hidden, seed ^ TEACHER_SEED_SALT);
        let teacher = init_params(&teacher_model, Precision::Fp64).remove(0);
        TeacherTask {
            hidden,
            seed,
            teacher_spec: teacher_model.layers[0],
            teacher,
        }
    }

    pub fn minibatch(&self, step: u64, rows: usize) -> Result<Minibatch> {
        if rows == 0 {
            return Err(Error::Plan("minibatch must have at least one row".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        let n = rows * self.hidden;
        let inputs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let inputs = Tensor::from_f64(vec![rows, self.hidden], Precision::Fp64, inputs)?;
        let (clean, _) = layer_forward(&self.teacher_spec, &self.teacher, &inputs)?;
        let noisy = clean
            .data()
            .iter()
            .map(|v| v + NOISE * rng.gen_range(-1.0..=1.0))
            .collect();
        let targets = Tensor::from_f64(vec![rows, self.hidden], Precision::Fp64, noisy)?;
        Ok(Minibatch { inputs, targets })
    }

    pub fn minibatches(&self, count: usize, rows: usize) -> Result<Vec<Minibatch>> {
        (0..count as u64).map(|s| self.minibatch(s, rows)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_step() {
        let task = TeacherTask::new(4, 3);
        let a = task.minibatch(5, 6).unwrap();
        let b = TeacherTask::new(4, 3).minibatch(5, 6).unwrap();
        assert!(a.inputs.bitwise_eq(&b.inputs) && a.targets.bitwise_eq(&b.targets));
        let c = task.minibatch(6, 6).unwrap();
        assert!(!a.inputs.bitwise_eq(&c.inputs));
        assert_eq!(a.rows(), 6);
        assert!(a.inputs.data().iter().all(|v| v.abs() <= 1.0));
    }
}
