//! Trainable layers built on the autodiff tape: convolution, batch norm and
//! the residual basic block.

use crate::grad::{ParamId, Params, Tape, ValueId};
use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// He-normal initialization for a conv weight (fan-in, ReLU gain).
fn he_weight<R: Rng>(rng: &mut R, out_c: usize, in_c: usize, k: usize) -> Array4<f64> {
    let fan_in = (in_c * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array4::from_shape_fn((out_c, in_c, k, k), |_| dist.sample(rng) as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let w = params.insert(
            format!("{name}.weight"),
            he_weight(rng, out_c, in_c, k).into_dyn(),
            true,
        );
        let b = params.insert(format!("{name}.bias"), Array1::<f64>::zeros(out_c).into_dyn(), true);
        Self { w, b, stride, padding }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: ValueId) -> ValueId {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(params: &mut Params, name: &str, channels: usize) -> Self {
        let gamma = params.insert(format!("{name}.gamma"), Array1::<f64>::ones(channels).into_dyn(), true);
        let beta = params.insert(format!("{name}.beta"), Array1::<f64>::zeros(channels).into_dyn(), true);
        let running_mean = params.insert(
            format!("{name}.running_mean"),
            Array1::<f64>::zeros(channels).into_dyn(),
            false,
        );
        let running_var = params.insert(
            format!("{name}.running_var"),
            Array1::<f64>::ones(channels).into_dyn(),
            false,
        );
        Self { gamma, beta, running_mean, running_var }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: ValueId, training: bool) -> ValueId {
        let gamma = tape.param(params, self.gamma);
        let beta = tape.param(params, self.beta);
        tape.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean,
            self.running_var,
            params,
            training,
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

/// conv-norm-relu-conv-norm with identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new<R: Rng>(
        params: &mut Params,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(params, &format!("{name}.conv1"), in_c, out_c, 3, stride, 1, rng);
        let bn1 = BatchNorm2d::new(params, &format!("{name}.bn1"), out_c);
        let conv2 = Conv2d::new(params, &format!("{name}.conv2"), out_c, out_c, 3, 1, 1, rng);
        let bn2 = BatchNorm2d::new(params, &format!("{name}.bn2"), out_c);
        let shortcut = if stride != 1 || in_c != out_c {
            let sc = Conv2d::new(params, &format!("{name}.shortcut"), in_c, out_c, 1, stride, 0, rng);
            let sbn = BatchNorm2d::new(params, &format!("{name}.shortcut_bn"), out_c);
            Some((sc, sbn))
        } else {
            None
        };
        Self { conv1, bn1, conv2, bn2, shortcut }
    }

    pub fn forward(&self, tape: &mut Tape, params: &Params, x: ValueId, training: bool) -> ValueId {
        let mut h = self.conv1.forward(tape, params, x);
        h = self.bn1.forward(tape, params, h, training);
        h = tape.relu(h);
        h = self.conv2.forward(tape, params, h);
        h = self.bn2.forward(tape, params, h, training);
        let short = match &self.shortcut {
            Some((sc, sbn)) => {
                let s = sc.forward(tape, params, x);
                sbn.forward(tape, params, s, training)
            }
            None => x,
        };
        let sum = tape.add(h, short);
        tape.relu(sum)
    }
}
