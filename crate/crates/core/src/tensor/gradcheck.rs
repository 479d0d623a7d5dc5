//! Randomized gradient checking: seeded tiny conv nets whose backward pass
//! is compared against the central finite-difference oracle.
//!
//! Finite differences probe the loss at `θ ± h`. If such a probe crosses a
//! relu zero or reorders a max-pool window, the difference quotient straddles
//! two linear pieces and stops estimating the derivative, so network draws
//! whose preactivations or pool windows sit within [`KINK_MARGIN`] of a tie
//! are discarded and redrawn from the same seeded stream. The number of
//! discarded draws is reported for transparency.
//!
//! The 32-bit check differentiates the `f32` network but evaluates the
//! oracle on its exact `f64` image (every `f32` is representable), keeping
//! the oracle's own noise out of the comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{finite_difference_gradient, Elem, Tape, Tensor, Var};

/// Reroll any draw whose relu/pool decision sits closer than this to a tie.
/// Probes move preactivations by at most ~2·h·‖activations‖, well under this.
const KINK_MARGIN: f64 = 5e-3;

/// Sanity bound; acceptance rates in practice are a few draws per network.
const MAX_REROLLS: u32 = 10_000;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct NetReport {
    /// Seed whose stream produced the accepted network.
    pub seed: u64,
    /// Worst relative error over all checked gradient tensors; see
    /// [`relative_error`] for the convention.
    pub rel_err: f64,
    /// Differentiable scalars checked (all parameters plus the input).
    pub scalars: usize,
    /// Draws discarded for sitting too close to a relu or pool tie.
    pub rerolls: u32,
}

/// Checks a 32-bit network against the 64-bit finite-difference oracle with
/// the standard step `h = 1e-3`.
pub fn check_f32(seed: u64) -> Result<NetReport> {
    let (net, rerolls) = NetDef::generate(seed)?;
    let analytic = net.backward_grads::<f32>()?;
    let analytic: Vec<Tensor<f64>> = analytic.iter().map(Tensor::cast).collect();
    let fd = net.fd_grads(1e-3)?;
    Ok(net.report(seed, rerolls, &analytic, &fd))
}

/// Checks a 64-bit network against its own finite-difference oracle with
/// the standard step `h = 1e-3`.
pub fn check_f64(seed: u64) -> Result<NetReport> {
    let (net, rerolls) = NetDef::generate(seed)?;
    let analytic = net.backward_grads::<f64>()?;
    let fd = net.fd_grads(1e-3)?;
    Ok(net.report(seed, rerolls, &analytic, &fd))
}

/// Relative error between two gradient tensors: the largest element-wise
/// difference measured against the largest gradient magnitude in either
/// tensor. Normalizing per tensor rather than per element keeps near-zero
/// entries from inflating the ratio while still judging every element
/// against its tensor's own scale.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let denom = a.max_abs().max(b.max_abs()).max(1e-30);
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
        / denom
}

struct ConvSpec {
    filters: usize,
    padding: usize,
    pool: bool,
}

/// A sampled architecture plus its master `f64` data (drawn at `f32`
/// precision so both instantiations see bit-equal values).
struct NetDef {
    convs: Vec<ConvSpec>,
    label: usize,
    input: Tensor<f64>,
    params: Vec<Tensor<f64>>,
}

struct ForwardVars {
    loss: Var,
    /// Conv and hidden-dense outputs before relu, for margin checks.
    preacts: Vec<Var>,
    /// Inputs to each max-pool, for tie-margin checks.
    pools: Vec<Var>,
}

impl NetDef {
    /// Draws networks from the seed's stream until one clears the kink
    /// margins; returns it plus the number of discarded draws.
    fn generate(seed: u64) -> Result<(Self, u32)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for reroll in 0..MAX_REROLLS {
            let def = Self::draw(&mut rng);
            if def.margins_clear()? {
                return Ok((def, reroll));
            }
        }
        Err(Error::Config(format!(
            "gradcheck seed {seed}: no network cleared the kink margin in {MAX_REROLLS} draws"
        )))
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let channels = rng.random_range(1..=2usize);
        let spatial = rng.random_range(6..=8usize);
        let n_convs = rng.random_range(1..=2usize);
        let classes = rng.random_range(2..=3usize);
        let hidden = rng.random_range(4..=6usize);

        let mut convs = Vec::new();
        let (mut s, mut c) = (spatial, channels);
        for _ in 0..n_convs {
            // 3×3 kernels need s + 2·padding ≥ 3.
            let padding = if s < 3 { 1 } else { rng.random_range(0..=1usize) };
            let filters = rng.random_range(2..=3usize);
            s = s + 2 * padding - 2;
            let pool = s >= 4;
            if pool {
                s = (s - 2) / 2 + 1;
            }
            convs.push(ConvSpec {
                filters,
                padding,
                pool,
            });
            c = filters;
        }
        let flat = c * s * s;

        // Values are drawn in f32 so the f64 master copy is exact in both
        // precisions. Mild scales keep softmax curvature low, which is what
        // lets the h=1e-3 oracle resolve 64-bit gradients.
        let mut draw = |shape: Vec<usize>, lo: f32, hi: f32| {
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| rng.random_range(lo..hi) as f64)
                .collect();
            Tensor::new(shape, data).expect("gradcheck draw shape")
        };

        let input = draw(vec![1, channels, spatial, spatial], 0.0, 0.5);
        let mut params = Vec::new();
        let mut cin = channels;
        for conv in &convs {
            let a = 0.5 / ((cin * 9) as f32).sqrt();
            params.push(draw(vec![conv.filters, cin, 3, 3], -a, a));
            params.push(draw(vec![conv.filters], -0.1, 0.1));
            cin = conv.filters;
        }
        let a = 0.5 / (flat as f32).sqrt();
        params.push(draw(vec![flat, hidden], -a, a));
        params.push(draw(vec![hidden], -0.1, 0.1));
        let a = 0.5 / (hidden as f32).sqrt();
        params.push(draw(vec![hidden, classes], -a, a));
        params.push(draw(vec![classes], -0.1, 0.1));

        let label = rng.random_range(0..classes);
        Self {
            convs,
            label,
            input,
            params,
        }
    }

    fn forward<T: Elem>(&self, tape: &Tape<T>, input: Var, params: &[Var]) -> Result<ForwardVars> {
        let mut preacts = Vec::new();
        let mut pools = Vec::new();
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("parameter list matches architecture");

        let mut x = input;
        for conv in &self.convs {
            let (k, b) = (next(), next());
            x = tape.conv2d(x, k, b, 1, conv.padding)?;
            preacts.push(x);
            x = tape.relu(x);
            if conv.pool {
                pools.push(x);
                x = tape.max_pool2d(x, 2, 2)?;
            }
        }
        let flat = tape.value(x).len();
        x = tape.reshape(x, vec![1, flat])?;
        let (w, b) = (next(), next());
        x = tape.dense(x, w, b)?;
        preacts.push(x);
        x = tape.relu(x);
        let (w, b) = (next(), next());
        let logits = tape.dense(x, w, b)?;
        let loss = tape.softmax_cross_entropy(logits, &[self.label])?;
        Ok(ForwardVars {
            loss,
            preacts,
            pools,
        })
    }

    /// True when every relu preactivation and pool window sits safely away
    /// from its decision boundary.
    fn margins_clear(&self) -> Result<bool> {
        let tape = Tape::new();
        let input = tape.leaf(self.input.clone(), false);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect();
        let vars = self.forward::<f64>(&tape, input, &params)?;

        for &pre in &vars.preacts {
            if tape.value(pre).data().iter().any(|v| v.abs() < KINK_MARGIN) {
                return Ok(false);
            }
        }
        for &pool in &vars.pools {
            let v = tape.value(pool);
            let [n, c, h, w] = *v.shape() else { unreachable!("pool input is rank 4") };
            for plane in 0..n * c {
                let data = &v.data()[plane * h * w..(plane + 1) * h * w];
                for oh in 0..(h - 2) / 2 + 1 {
                    for ow in 0..(w - 2) / 2 + 1 {
                        let mut window = [
                            data[(oh * 2) * w + ow * 2],
                            data[(oh * 2) * w + ow * 2 + 1],
                            data[(oh * 2 + 1) * w + ow * 2],
                            data[(oh * 2 + 1) * w + ow * 2 + 1],
                        ];
                        window.sort_by(|a, b| b.total_cmp(a));
                        // An all-zero window is locally constant, not a kink.
                        if window[0] > 0.0 && window[0] - window[1] < KINK_MARGIN {
                            return Ok(false);
                        }
                    }
                }
            }
        }
        Ok(true)
    }

    /// Backward-pass gradients in precision `T`: input first, then every
    /// parameter in architecture order.
    fn backward_grads<T: Elem>(&self) -> Result<Vec<Tensor<T>>> {
        let tape = Tape::new();
        let input = tape.leaf(self.input.cast::<T>(), true);
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.cast::<T>(), true))
            .collect();
        let vars = self.forward(&tape, input, &params)?;
        tape.backward(vars.loss)?;
        let mut grads = vec![tape.grad(input).expect("input gradient")];
        for p in params {
            grads.push(tape.grad(p).expect("parameter gradient"));
        }
        Ok(grads)
    }

    /// Loss under substituted input/parameters, evaluated in f64 without
    /// gradient bookkeeping.
    fn loss_f64(&self, input: &Tensor<f64>, params: &[Tensor<f64>]) -> Result<f64> {
        let tape = Tape::new();
        let input = tape.leaf(input.clone(), false);
        let params: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let vars = self.forward::<f64>(&tape, input, &params)?;
        tape.value(vars.loss).item()
    }

    /// Central finite differences of the loss for the input and every
    /// parameter tensor.
    fn fd_grads(&self, h: f64) -> Result<Vec<Tensor<f64>>> {
        let mut grads = vec![finite_difference_gradient(
            |x| self.loss_f64(x, &self.params),
            &self.input,
            h,
        )?];
        for pi in 0..self.params.len() {
            grads.push(finite_difference_gradient(
                |p| {
                    let mut params = self.params.clone();
                    params[pi] = p.clone();
                    self.loss_f64(&self.input, &params)
                },
                &self.params[pi],
                h,
            )?);
        }
        Ok(grads)
    }

    fn report(
        &self,
        seed: u64,
        rerolls: u32,
        analytic: &[Tensor<f64>],
        fd: &[Tensor<f64>],
    ) -> NetReport {
        let rel_err = analytic
            .iter()
            .zip(fd)
            .map(|(a, b)| relative_error(a, b))
            .fold(0.0, f64::max);
        let scalars = analytic.iter().map(Tensor::len).sum();
        NetReport {
            seed,
            rel_err,
            scalars,
            rerolls,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_backward_matches_f64_oracle() {
        for seed in 0..3 {
            let report = check_f32(seed).unwrap();
            assert!(
                report.rel_err < 1e-3,
                "seed {seed}: rel err {}",
                report.rel_err
            );
            assert!(report.scalars > 0 && report.scalars <= 2000);
        }
    }

    #[test]
    fn f64_backward_matches_f64_oracle() {
        for seed in 0..3 {
            let report = check_f64(seed).unwrap();
            assert!(
                report.rel_err < 1e-6,
                "seed {seed}: rel err {}",
                report.rel_err
            );
        }
    }

    #[test]
    fn checks_are_deterministic() {
        let a = check_f64(9).unwrap();
        let b = check_f64(9).unwrap();
        assert_eq!(a.rel_err.to_bits(), b.rel_err.to_bits());
        assert_eq!(a.rerolls, b.rerolls);
    }
}
