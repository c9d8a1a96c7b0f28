//! Finite-difference check of every primitive's backward rule in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::kernels::Conv2dSpec;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type T = Tensor<f64>;

/// Central-difference step used by the suite.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    /// Worst relative error over all seeds and coordinates; infinite when the
    /// check itself failed.
    pub max_relative_error: f64,
    pub error: Option<String>,
}

/// Reduces `y` against a fixed random weighting so no coordinate's gradient is
/// structurally cancelled (e.g. the row-sum of a softmax).
fn weighted(tape: &Tape<f64>, y: &Var<f64>, r: &T) -> Result<Var<f64>> {
    Ok(tape.sum(&tape.mul(y, &tape.constant(r.clone()))?))
}

struct Suite {
    seeds: u64,
    out: Vec<PrimitiveCheck>,
}

impl Suite {
    fn check(&mut self, name: &'static str, shape: &[usize], op: impl Fn(&Tape<f64>, &Var<f64>, &mut ChaCha8Rng) -> Result<Var<f64>>) {
        let entry = match self.worst(shape, &op) {
            Ok(worst) => PrimitiveCheck { name, max_relative_error: worst, error: None },
            Err(e) => PrimitiveCheck { name, max_relative_error: f64::INFINITY, error: Some(e.to_string()) },
        };
        self.out.push(entry);
    }

    fn worst(&self, shape: &[usize], op: &impl Fn(&Tape<f64>, &Var<f64>, &mut ChaCha8Rng) -> Result<Var<f64>>) -> Result<f64> {
        let mut worst = 0.0f64;
        for seed in 0..self.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = T::randn(shape, 1.0, &mut rng);
            // Each evaluation must see the same auxiliary draws.
            let aux_seed: u64 = rng.random();
            let probe = {
                let t = Tape::<f64>::no_grad();
                let mut r = ChaCha8Rng::seed_from_u64(aux_seed);
                op(&t, &t.constant(x.clone()), &mut r)?
            };
            let weights = T::randn(probe.shape(), 1.0, &mut rng);
            let err = grad_check(
                |tape, xv| {
                    let mut r = ChaCha8Rng::seed_from_u64(aux_seed);
                    let y = op(tape, xv, &mut r)?;
                    weighted(tape, &y, &weights)
                },
                &x,
                STEP,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

fn aux(rng: &mut ChaCha8Rng, shape: &[usize]) -> T {
    T::randn(shape, 1.0, rng)
}

fn away_from_zero(t: &T) -> T {
    t.map(|v| if v.abs() < 0.5 { v.signum() * 0.5 + v } else { v })
}

fn elementwise_binary(s: &mut Suite) {
    s.check("add", &[3, 4], |t, x, r| t.add(x, &t.constant(aux(r, &[3, 4]))));
    s.check("add (both)", &[3, 4], |t, x, _| t.add(x, x));
    s.check("sub", &[3, 4], |t, x, r| t.sub(&t.constant(aux(r, &[3, 4])), x));
    s.check("mul", &[3, 4], |t, x, r| t.mul(x, &t.constant(aux(r, &[3, 4]))));
    s.check("mul (self)", &[3, 4], |t, x, _| t.mul(x, x));
    s.check("div (num)", &[3, 4], |t, x, r| t.div(x, &t.constant(away_from_zero(&aux(r, &[3, 4])))));
    s.check("div (den)", &[3, 4], |t, x, r| {
        let d = t.add_scalar(&t.mul(x, x)?, 0.5);
        t.div(&t.constant(aux(r, &[3, 4])), &d)
    });
}

fn broadcast_and_scalar(s: &mut Suite) {
    s.check("add_bcast x", &[2, 3, 4], |t, x, r| t.add_bcast(x, &t.constant(aux(r, &[4]))));
    s.check("add_bcast y", &[3, 4], |t, y, r| t.add_bcast(&t.constant(aux(r, &[2, 3, 4])), y));
    s.check("mul_bcast x", &[2, 3, 4], |t, x, r| t.mul_bcast(x, &t.constant(aux(r, &[3, 4]))));
    s.check("mul_bcast y", &[4], |t, y, r| t.mul_bcast(&t.constant(aux(r, &[2, 3, 4])), y));
    s.check("add_scalar", &[5], |t, x, _| Ok(t.add_scalar(x, 1.5)));
    s.check("mul_scalar", &[5], |t, x, _| Ok(t.mul_scalar(x, -0.7)));
    s.check("expand", &[2, 1, 3], |t, x, _| t.expand(x, 1, 4));
}

fn matmul_variants(s: &mut Suite) {
    s.check("matmul lhs", &[3, 4], |t, a, r| t.matmul(a, &t.constant(aux(r, &[4, 5]))));
    s.check("matmul rhs", &[4, 5], |t, b, r| t.matmul(&t.constant(aux(r, &[3, 4])), b));
    s.check("matmul batched", &[2, 3, 4], |t, a, r| t.matmul(a, &t.constant(aux(r, &[2, 4, 2]))));
    s.check("matmul fold rhs", &[4, 2], |t, b, r| t.matmul(&t.constant(aux(r, &[2, 3, 4])), b));
    s.check("matmul bcast rhs", &[2, 4, 2], |t, b, r| t.matmul(&t.constant(aux(r, &[3, 2, 3, 4])), b));
}

fn layout_ops(s: &mut Suite) {
    s.check("reshape", &[2, 6], |t, x, _| t.reshape(x, &[3, 4]));
    s.check("permute", &[2, 3, 4], |t, x, _| t.permute(x, &[2, 0, 1]));
    s.check("transpose", &[3, 5], |t, x, _| t.transpose(x, 0, 1));
    s.check("concat", &[2, 3], |t, x, r| {
        let c = t.constant(aux(r, &[2, 2]));
        t.concat(&[&c, x, x], 1)
    });
    s.check("slice", &[4, 5], |t, x, _| t.slice(x, 1, 1, 3));
    s.check("split", &[6, 2], |t, x, _| {
        let parts = t.split(x, 0, &[1, 2, 3])?;
        t.concat(&[&parts[2], &parts[0]], 0)
    });
}

fn reductions_and_normalization(s: &mut Suite) {
    s.check("sum", &[3, 3], |t, x, _| Ok(t.sum(x)));
    s.check("mean", &[3, 3], |t, x, _| Ok(t.mean(x)));
    s.check("softmax", &[3, 6], |t, x, _| t.softmax(x));
    s.check("layer_norm", &[4, 8], |t, x, _| t.layer_norm(x, 1e-5));
}

fn activations(s: &mut Suite) {
    s.check("gelu", &[10], |t, x, _| Ok(t.gelu(x)));
    s.check("sigmoid", &[10], |t, x, _| Ok(t.sigmoid(x)));
    s.check("silu", &[10], |t, x, _| Ok(t.silu(x)));
    // abs and clamp at points away from their kinks
    s.check("abs", &[10], |t, x, _| {
        let shifted = t.constant(away_from_zero(x.value()));
        let y = t.add(x, &t.sub(&shifted, &t.constant(x.value().clone()))?)?;
        Ok(t.abs(&y))
    });
    s.check("clamp", &[12], |t, x, _| Ok(t.clamp(x, -0.5, 0.5)));
    s.check("masked_fill", &[3, 4], |t, x, r| {
        let mask: Vec<bool> = (0..12).map(|_| r.random_bool(0.4)).collect();
        t.masked_fill(x, &mask, -3.0)
    });
}

fn convolution(s: &mut Suite) {
    let specs = [Conv2dSpec { stride: 1, padding: 1 }, Conv2dSpec { stride: 2, padding: 1 }, Conv2dSpec { stride: 2, padding: 0 }];
    for spec in specs {
        s.check("conv2d input", &[2, 3, 6, 6], move |t, x, r| {
            let w = t.constant(aux(r, &[4, 3, 3, 3]));
            t.conv2d(x, &w, None, spec)
        });
        s.check("conv2d weight", &[4, 3, 3, 3], move |t, w, r| {
            let x = t.constant(aux(r, &[2, 3, 7, 7]));
            t.conv2d(&x, w, None, spec)
        });
        s.check("conv2d bias", &[4], move |t, b, r| {
            let x = t.constant(aux(r, &[2, 3, 5, 5]));
            let w = t.constant(aux(r, &[4, 3, 3, 3]));
            t.conv2d(&x, &w, Some(b), spec)
        });
    }
    s.check("conv2d patchify", &[1, 2, 4, 4], |t, x, r| {
        let w = t.constant(aux(r, &[3, 2, 2, 2]));
        t.conv2d(x, &w, None, Conv2dSpec { stride: 2, padding: 0 })
    });
}

fn resize(s: &mut Suite) {
    s.check("area_downsample", &[2, 4, 6], |t, x, _| t.area_downsample(x, 2));
    s.check("nearest_upsample", &[2, 3, 2], |t, x, _| t.nearest_upsample(x, 3));
}

fn fused_attention(s: &mut Suite) {
    for which in 0..3 {
        s.check("attention", &[2, 5, 4], move |t, x, r| {
            let others = [t.constant(aux(r, &[2, 5, 4])), t.constant(aux(r, &[2, 5, 4]))];
            match which {
                0 => t.attention(x, &others[0], &others[1]),
                1 => t.attention(&others[0], x, &others[1]),
                _ => t.attention(&others[0], &others[1], x),
            }
        });
    }
}

/// Runs every primitive over `seeds` random inputs.
pub fn primitive_gradients(seeds: u64) -> Vec<PrimitiveCheck> {
    let mut s = Suite { seeds, out: Vec::new() };
    elementwise_binary(&mut s);
    broadcast_and_scalar(&mut s);
    matmul_variants(&mut s);
    layout_ops(&mut s);
    reductions_and_normalization(&mut s);
    activations(&mut s);
    convolution(&mut s);
    resize(&mut s);
    fused_attention(&mut s);
    s.out
}
