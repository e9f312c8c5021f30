//! Scale-conditioned MLP heads over per-Gaussian latents.
//!
//! Both heads consume the 32-wide latent concatenated with one
//! standardized scale feature `t = (ln(1 + s) - mean) / std` and apply a
//! small fully-connected net with ReLU on every layer but the last. The
//! language head regresses compressed embedding targets; the instance
//! head produces features that are L2-normalized after the forward pass.
//! Backprop is written out by hand so gradients reach both the net
//! parameters and the latent inputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::MapperConfig;
use crate::error::{Error, Result};
use crate::io::{self, MAGIC_MAPPER};
use crate::scene::LATENT_DIM;

/// Width of the head input: latent plus the scale feature.
pub const MAPPER_INPUT_DIM: usize = LATENT_DIM + 1;

/// One fully-connected layer; weights are row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.in_dim);
        out.clear();
        for r in 0..self.out_dim {
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            out.push(self.bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// An MLP head plus the scale standardization constants baked in at
/// training time.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperNet {
    pub layers: Vec<DenseLayer>,
    pub scale_mean: f64,
    pub scale_std: f64,
}

/// Per-layer parameter gradients, same shapes as [`MapperNet::layers`].
#[derive(Debug, Clone)]
pub struct MapperGrads {
    /// `(d_weights, d_bias)` per layer.
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

/// Activations recorded by [`MapperNet::forward_trace`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Post-activation value entering each layer; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    /// Smallest pre-activation magnitude on the hidden layers; tests use
    /// it to stay clear of the ReLU kink when finite-differencing.
    pub fn min_hidden_margin(&self) -> f64 {
        self.pre[..self.pre.len() - 1]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

impl MapperNet {
    /// Builds a net with the given layer widths (`dims[0]` is the input
    /// width) using Kaiming-uniform weights, bound `sqrt(6 / fan_in)`,
    /// zero biases, drawn from a seeded stream.
    pub fn kaiming(dims: &[usize], seed: u64) -> Self {
        assert!(dims.len() >= 2, "need at least one layer");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (in_dim, out_dim) = (w[0], w[1]);
                let bound = (6.0 / in_dim as f64).sqrt();
                DenseLayer {
                    in_dim,
                    out_dim,
                    weights: (0..in_dim * out_dim)
                        .map(|_| rng.gen_range(-bound..bound))
                        .collect(),
                    bias: vec![0.0; out_dim],
                }
            })
            .collect();
        MapperNet { layers, scale_mean: 0.0, scale_std: 1.0 }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim
    }

    /// Standardized scale feature fed alongside the latent.
    pub fn scale_feature(&self, scale: f64) -> f64 {
        (scale.ln_1p() - self.scale_mean) / self.scale_std
    }

    /// Concatenates a latent with the scale feature.
    pub fn input_for(&self, latent: &[f64], scale: f64) -> Vec<f64> {
        assert_eq!(latent.len() + 1, self.input_dim(), "latent width mismatch");
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(latent);
        x.push(self.scale_feature(scale));
        x
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_trace(input).pre.pop().expect("at least one layer")
    }

    /// Forward pass at a given conditioning scale.
    pub fn eval(&self, latent: &[f64], scale: f64) -> Vec<f64> {
        self.forward(&self.input_for(latent, scale))
    }

    pub fn forward_trace(&self, input: &[f64]) -> ForwardTrace {
        assert_eq!(input.len(), self.input_dim(), "input width mismatch");
        let last = self.layers.len() - 1;
        let mut acts = vec![input.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.forward(acts.last().expect("seeded"), &mut z);
            pre.push(z.clone());
            if l < last {
                for v in &mut z {
                    *v = v.max(0.0);
                }
                acts.push(z);
            }
        }
        ForwardTrace { acts, pre }
    }

    /// Backprop from a gradient on the net output. Parameter gradients
    /// are accumulated into `grads`; the return value is the gradient on
    /// the input vector (latent entries first, scale feature last). The
    /// ReLU subgradient at exactly zero is taken as zero.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        grad_out: &[f64],
        grads: &mut MapperGrads,
    ) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.out_dim(), "output gradient width");
        assert_eq!(grads.layers.len(), self.layers.len(), "grad buffer layers");
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if l < last {
                for (v, p) in g.iter_mut().zip(&trace.pre[l]) {
                    if *p <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
            let input = &trace.acts[l];
            let (dw, db) = &mut grads.layers[l];
            for r in 0..layer.out_dim {
                db[r] += g[r];
                let row = &mut dw[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += g[r] * x;
                }
            }
            let mut gin = vec![0.0f64; layer.in_dim];
            for r in 0..layer.out_dim {
                let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (gi, w) in gin.iter_mut().zip(row) {
                    *gi += g[r] * w;
                }
            }
            g = gin;
        }
        g
    }

    /// Convenience wrapper allocating a fresh gradient buffer.
    pub fn backward(&self, trace: &ForwardTrace, grad_out: &[f64]) -> (MapperGrads, Vec<f64>) {
        let mut grads = MapperGrads::zeros_like(self);
        let gin = self.backward_into(trace, grad_out, &mut grads);
        (grads, gin)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened per layer as weights-then-bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "flat parameter length");
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let run = (|| {
            io::write_header(
                &mut w,
                MAGIC_MAPPER,
                self.layers.len() as u32,
                self.input_dim() as u32,
            )?;
            for l in &self.layers {
                w.write_all(&(l.out_dim as u32).to_le_bytes())?;
            }
            io::write_f32s(&mut w, [self.scale_mean as f32, self.scale_std as f32])?;
            for l in &self.layers {
                io::write_f32s(&mut w, l.weights.iter().map(|&v| v as f32))?;
                io::write_f32s(&mut w, l.bias.iter().map(|&v| v as f32))?;
            }
            w.flush()
        })();
        run.map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let (n_layers, input_dim) = io::read_header(&mut r, MAGIC_MAPPER)
            .map_err(|e| Error::io(path, e))?
            .map_err(|m| Error::format(path, m))?;
        if n_layers == 0 || input_dim == 0 {
            return Err(Error::format(path, format!("bad mapper dims {n_layers}/{input_dim}")));
        }
        let mut out_dims = Vec::with_capacity(n_layers as usize);
        for _ in 0..n_layers {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| Error::format(path, "layer size table truncated".to_string()))?;
            out_dims.push(u32::from_le_bytes(b) as usize);
        }
        let stats = io::read_f32s(&mut r, 2)
            .map_err(|_| Error::format(path, "scale statistics truncated".to_string()))?;
        let mut layers = Vec::with_capacity(out_dims.len());
        let mut in_dim = input_dim as usize;
        for (i, &out_dim) in out_dims.iter().enumerate() {
            if out_dim == 0 {
                return Err(Error::format(path, format!("layer {i} has zero width")));
            }
            let weights = io::read_f32s(&mut r, in_dim * out_dim)
                .map_err(|_| Error::format(path, format!("layer {i} weights truncated")))?;
            let bias = io::read_f32s(&mut r, out_dim)
                .map_err(|_| Error::format(path, format!("layer {i} bias truncated")))?;
            layers.push(DenseLayer {
                in_dim,
                out_dim,
                weights: weights.into_iter().map(f64::from).collect(),
                bias: bias.into_iter().map(f64::from).collect(),
            });
            in_dim = out_dim;
        }
        let mut tail = [0u8; 1];
        if r.read(&mut tail).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after mapper payload".to_string()));
        }
        Ok(MapperNet {
            layers,
            scale_mean: f64::from(stats[0]),
            scale_std: f64::from(stats[1]),
        })
    }
}

impl MapperGrads {
    pub fn zeros_like(net: &MapperNet) -> Self {
        MapperGrads {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    /// Flattened per layer as weights-then-bias, matching
    /// [`MapperNet::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Language head: latent + scale feature in, compressed-embedding width out.
pub fn language_mapper(cfg: &MapperConfig) -> MapperNet {
    MapperNet::kaiming(&[MAPPER_INPUT_DIM, cfg.hidden_dim, cfg.language_out], cfg.init_seed)
}

/// Instance head; its raw output is meant to be passed through
/// [`l2_normalize`]. Seeded one after the language head so the two start
/// decorrelated.
pub fn instance_mapper(cfg: &MapperConfig) -> MapperNet {
    MapperNet::kaiming(
        &[MAPPER_INPUT_DIM, cfg.hidden_dim, cfg.instance_out],
        cfg.init_seed.wrapping_add(1),
    )
}

/// Population mean and standard deviation of `ln(1 + s)` over the
/// training scales; a near-zero spread falls back to 1 so the feature
/// stays finite.
pub fn fit_scale_standardization(scales: &[f64]) -> (f64, f64) {
    if scales.is_empty() {
        return (0.0, 1.0);
    }
    let n = scales.len() as f64;
    let logs: Vec<f64> = scales.iter().map(|s| s.ln_1p()).collect();
    let mean = logs.iter().sum::<f64>() / n;
    let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std < 1e-9 { 1.0 } else { std })
}

/// L2 normalization; returns the unit vector and the (clamped) norm used.
/// Callers that want to skip degenerate vectors should threshold on the
/// returned norm before using the result.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / norm).collect(), norm)
}

/// Gradient of `y = v / |v|`: `(g - y (y . g)) / |v|`, using the clamped
/// norm from [`l2_normalize`].
pub fn l2_normalize_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(grad_y).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(grad_y)
        .map(|(yi, gi)| (gi - yi * dot) / norm)
        .collect()
}

/// Elementwise Huber loss summed over the vector, with the gradient on
/// `pred`: quadratic `e^2/2` inside `delta`, linear `delta (|e| - delta/2)`
/// outside.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> (f64, Vec<f64>) {
    assert_eq!(pred.len(), target.len(), "huber operand widths");
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let e = p - t;
        if e.abs() <= delta {
            loss += 0.5 * e * e;
            grad.push(e);
        } else {
            loss += delta * (e.abs() - 0.5 * delta);
            grad.push(delta * e.signum());
        }
    }
    (loss, grad)
}

/// Contrastive pair loss on pixel features: same-object pairs are pulled
/// together (`L = d`), different-object pairs pushed past the margin
/// (`L = max(0, margin - d)`), with `d` the Euclidean distance. Returns
/// the loss and gradients on both inputs; at `d = 0` the subgradient is
/// taken as zero.
pub fn contrastive_loss(
    a: &[f64],
    b: &[f64],
    same: bool,
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), b.len(), "contrastive operand widths");
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let d = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    let zeros = || vec![0.0; a.len()];
    if same {
        if d < 1e-12 {
            return (d, zeros(), zeros());
        }
        let ga: Vec<f64> = diff.iter().map(|v| v / d).collect();
        let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
        (d, ga, gb)
    } else {
        let slack = margin - d;
        if slack <= 0.0 || d < 1e-12 {
            return (slack.max(0.0), zeros(), zeros());
        }
        let ga: Vec<f64> = diff.iter().map(|v| -v / d).collect();
        let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
        (slack, ga, gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn test_net(seed: u64) -> MapperNet {
        let mut net = MapperNet::kaiming(&[5, 7, 3], seed);
        // Push biases off zero so no hidden unit sits on the ReLU kink.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
        for l in &mut net.layers {
            for b in &mut l.bias {
                *b = rng.gen_range(0.05..0.2);
            }
        }
        net
    }

    #[test]
    fn kaiming_init_is_seeded_and_bounded() {
        let a = MapperNet::kaiming(&[33, 64, 16], 7);
        let b = MapperNet::kaiming(&[33, 64, 16], 7);
        let c = MapperNet::kaiming(&[33, 64, 16], 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound0 = (6.0f64 / 33.0).sqrt();
        assert!(a.layers[0].weights.iter().all(|w| w.abs() < bound0));
        assert!(a.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = test_net(11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let trace = net.forward_trace(&input);
        assert!(trace.min_hidden_margin() > 1e-3, "fixture sits on a ReLU kink");
        let (grads, gin) = net.backward(&trace, &probe);

        let scalar = |n: &MapperNet, x: &[f64]| -> f64 {
            n.forward(x).iter().zip(&probe).map(|(o, c)| o * c).sum()
        };
        let h = 1e-6;
        // Input gradient.
        for i in 0..input.len() {
            let mut xp = input.clone();
            let mut xm = input.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (scalar(&net, &xp) - scalar(&net, &xm)) / (2.0 * h);
            assert!(
                (fd - gin[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input {i}: fd {fd} vs analytic {}",
                gin[i]
            );
        }
        // Every parameter gradient.
        let flat = net.flat_params();
        let flat_grads = grads.flatten();
        for i in 0..flat.len() {
            let mut np = net.clone();
            let mut nm = net.clone();
            let mut pp = flat.clone();
            let mut pm = flat.clone();
            pp[i] += h;
            pm[i] -= h;
            np.set_flat_params(&pp);
            nm.set_flat_params(&pm);
            let fd = (scalar(&np, &input) - scalar(&nm, &input)) / (2.0 * h);
            assert!(
                (fd - flat_grads[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {i}: fd {fd} vs analytic {}",
                flat_grads[i]
            );
        }
    }

    #[test]
    fn relu_blocks_gradient_through_dead_units() {
        let mut net = MapperNet::kaiming(&[2, 1, 1], 0);
        net.layers[0].weights = vec![1.0, 0.0];
        net.layers[0].bias = vec![-5.0]; // always negative pre-activation
        net.layers[1].weights = vec![3.0];
        net.layers[1].bias = vec![0.0];
        let trace = net.forward_trace(&[1.0, 1.0]);
        let (grads, gin) = net.backward(&trace, &[1.0]);
        assert_eq!(gin, vec![0.0, 0.0]);
        assert_eq!(grads.layers[0].0, vec![0.0, 0.0]);
        // The dead unit's post-activation is 0, so the last layer's
        // weight gradient (= its input) is zero too, but its bias learns.
        assert_eq!(grads.layers[1].0, vec![0.0]);
        assert_eq!(grads.layers[1].1, vec![1.0]);
    }

    #[test]
    fn normalized_head_gradient_matches_finite_differences() {
        let net = test_net(21);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |n: &MapperNet, x: &[f64]| -> f64 {
            let (y, _) = l2_normalize(&n.forward(x));
            y.iter().zip(&probe).map(|(o, c)| o * c).sum()
        };
        let trace = net.forward_trace(&input);
        assert!(trace.min_hidden_margin() > 1e-3);
        let (y, norm) = l2_normalize(trace.output());
        let grad_raw = l2_normalize_backward(&y, norm, &probe);
        let (_, gin) = net.backward(&trace, &grad_raw);
        let h = 1e-6;
        for i in 0..input.len() {
            let mut xp = input.clone();
            let mut xm = input.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            assert!(
                (fd - gin[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "input {i}: fd {fd} vs analytic {}",
                gin[i]
            );
        }
    }

    #[test]
    fn huber_closed_forms_and_kink_continuity() {
        let (l, g) = huber_loss(&[0.5], &[0.0], 1.0);
        assert!((l - 0.125).abs() < 1e-15);
        assert!((g[0] - 0.5).abs() < 1e-15);
        let (l, g) = huber_loss(&[2.0], &[0.0], 1.0);
        assert!((l - 1.5).abs() < 1e-15);
        assert!((g[0] - 1.0).abs() < 1e-15);
        // Quadratic and linear branches agree at |e| = delta.
        let (inner, _) = huber_loss(&[1.0 - 1e-9], &[0.0], 1.0);
        let (outer, _) = huber_loss(&[1.0 + 1e-9], &[0.0], 1.0);
        assert!((inner - outer).abs() < 1e-8);
        // Sum over elements.
        let (l, _) = huber_loss(&[0.5, 2.0], &[0.0, 0.0], 1.0);
        assert!((l - 1.625).abs() < 1e-15);
    }

    #[test]
    fn contrastive_closed_forms() {
        let a = vec![0.3, 0.0];
        let b = vec![0.0, 0.0];
        let (l, _, _) = contrastive_loss(&a, &b, true, 1.0);
        assert!((l - 0.3).abs() < 1e-15);
        let a = vec![0.4, 0.0];
        let (l, _, _) = contrastive_loss(&a, &b, false, 1.0);
        assert!((l - 0.6).abs() < 1e-15);
        let a = vec![1.2, 0.0];
        let (l, ga, gb) = contrastive_loss(&a, &b, false, 1.0);
        assert_eq!(l, 0.0);
        assert!(ga.iter().chain(&gb).all(|&v| v == 0.0));
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &same in &[true, false] {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect();
            let (_, ga, gb) = contrastive_loss(&a, &b, same, 1.0);
            let h = 1e-7;
            for i in 0..4 {
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[i] += h;
                am[i] -= h;
                let fd = (contrastive_loss(&ap, &b, same, 1.0).0
                    - contrastive_loss(&am, &b, same, 1.0).0)
                    / (2.0 * h);
                assert!((fd - ga[i]).abs() < 1e-6, "a[{i}] same={same}: {fd} vs {}", ga[i]);
                let mut bp = b.clone();
                let mut bm = b.clone();
                bp[i] += h;
                bm[i] -= h;
                let fd = (contrastive_loss(&a, &bp, same, 1.0).0
                    - contrastive_loss(&a, &bm, same, 1.0).0)
                    / (2.0 * h);
                assert!((fd - gb[i]).abs() < 1e-6, "b[{i}] same={same}: {fd} vs {}", gb[i]);
            }
        }
    }

    #[test]
    fn scale_standardization_is_population_stats_of_log1p() {
        let scales = [0.0, 1.0, 3.0];
        let (mean, std) = fit_scale_standardization(&scales);
        let logs: Vec<f64> = scales.iter().map(|s| s.ln_1p()).collect();
        let m = logs.iter().sum::<f64>() / 3.0;
        let v = logs.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / 3.0;
        assert!((mean - m).abs() < 1e-15);
        assert!((std - v.sqrt()).abs() < 1e-15);
        // Constant scales fall back to unit spread.
        let (_, std) = fit_scale_standardization(&[2.0, 2.0, 2.0]);
        assert_eq!(std, 1.0);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapper.bin");
        let mut net = MapperNet::kaiming(&[MAPPER_INPUT_DIM, 64, 16], 7);
        net.scale_mean = 0.37;
        net.scale_std = 0.81;
        net.save(&path).unwrap();
        let back = MapperNet::load(&path).unwrap();
        assert_eq!(back.layers.len(), 2);
        assert_eq!(back.input_dim(), MAPPER_INPUT_DIM);
        assert_eq!(back.out_dim(), 16);
        let latent = vec![0.1; LATENT_DIM];
        let (a, b) = (net.eval(&latent, 0.5), back.eval(&latent, 0.5));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mapper.bin");
        let net = MapperNet::kaiming(&[4, 3, 2], 1);
        net.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(MapperNet::load(&path), Err(Error::Format { .. })));
        // Trailing bytes are rejected too.
        let mut extended = bytes.clone();
        extended.push(0);
        std::fs::write(&path, &extended).unwrap();
        assert!(matches!(MapperNet::load(&path), Err(Error::Format { .. })));
    }
}
