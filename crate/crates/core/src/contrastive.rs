//! Similarities and contrastive objectives.
//!
//! The free functions work on plain `f64` slices and serve as readable
//! reference implementations. [`batch_loss`] builds the same objectives on a
//! [`Graph`] so they can be differentiated.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Tensor, Var};

/// Pretext objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Triplet loss against the batch-mean world representation.
    Contrawr,
    /// Triplet loss against the instance-aware world representation.
    ContrawrPlus,
    /// Softmax cross-entropy over cosine logits, batch negatives.
    Nce,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Contrawr, Variant::ContrawrPlus, Variant::Nce];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Contrawr => "contrawr",
            Variant::ContrawrPlus => "contrawr_plus",
            Variant::Nce => "nce",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "contrawr" => Ok(Variant::Contrawr),
            "contrawr_plus" | "contrawr+" | "contrawr-plus" => Ok(Variant::ContrawrPlus),
            "nce" | "infonce" => Ok(Variant::Nce),
            other => Err(Error::param(format!("unknown loss variant '{other}'"))),
        }
    }
}

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub variant: Variant,
    pub sigma: f64,
    pub delta: f64,
    pub temperature: f64,
    /// Whether an anchor's own positive takes part in its world average.
    pub include_self: bool,
    /// Let gradients flow through the world representation.
    pub world_grad: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: Variant::ContrawrPlus,
            sigma: 2.0,
            delta: 0.2,
            temperature: 2.0,
            include_self: true,
            world_grad: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::param(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.variant != Variant::Nce {
            let bound = margin_bound(self.sigma);
            if !(self.delta > 0.0 && self.delta < bound) {
                return Err(Error::param(format!(
                    "margin {} must lie in (0, {bound:.6}) for sigma {}",
                    self.delta, self.sigma
                )));
            }
        }
        Ok(())
    }
}

/// Largest possible gap between two Gaussian similarities on the unit ball:
/// `1 - exp(-2 / sigma^2)`.
pub fn margin_bound(sigma: f64) -> f64 {
    1.0 - (-2.0 / (sigma * sigma)).exp()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("sigma must be positive, got {sigma}")))
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `exp(-||a - b||^2 / (2 sigma^2))`.
pub fn gaussian_sim(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok((-sq_dist(a, b) / (2.0 * sigma * sigma)).exp())
}

/// Inner product of two unit vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    for v in [a, b] {
        let n = dot(v, v).sqrt();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::Contract(format!("cosine_sim needs unit vectors, got norm {n}")));
        }
    }
    Ok(dot(a, b))
}

fn rows(z: &[f64], m: usize) -> Result<std::slice::ChunksExact<'_, f64>> {
    if m == 0 || z.is_empty() || z.len() % m != 0 {
        return Err(Error::param(format!(
            "expected a non-empty batch of width-{m} rows, got {} values",
            z.len()
        )));
    }
    Ok(z.chunks_exact(m))
}

/// Batch mean of the rows of `z` (row-major, width `m`).
pub fn world_representation(z: &[f64], m: usize) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; m];
    let mut count = 0;
    for row in rows(z, m)? {
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        count += 1;
    }
    mean.iter_mut().for_each(|v| *v /= count as f64);
    Ok(mean)
}

/// `softmax_k(<z_k, z_i> / t)`, with max subtraction.
pub fn instance_weights(z: &[f64], m: usize, zi: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {t}")));
    }
    let logits: Vec<f64> = rows(z, m)?.map(|r| dot(r, zi) / t).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok(w)
}

/// `sum_k w_k z_k` with [`instance_weights`].
pub fn instance_world_representation(z: &[f64], m: usize, zi: &[f64], t: f64) -> Result<Vec<f64>> {
    let w = instance_weights(z, m, zi, t)?;
    let mut out = vec![0.0; m];
    for (wk, row) in w.iter().zip(z.chunks_exact(m)) {
        out.iter_mut().zip(row).for_each(|(o, r)| *o += wk * r);
    }
    Ok(out)
}

/// `[sim(z_i, z_w) + delta - sim(z_i, z_j)]_+`.
pub fn triplet_loss(zi: &[f64], zj: &[f64], zw: &[f64], delta: f64, sigma: f64) -> Result<f64> {
    let world = gaussian_sim(zi, zw, sigma)?;
    let pos = gaussian_sim(zi, zj, sigma)?;
    Ok((world + delta - pos).max(0.0))
}

/// `-log(e^{cos(i,j)} / (e^{cos(i,j)} + sum_k e^{cos(i,k)}))` over `K` rows
/// of `negatives`.
pub fn nce_loss(zi: &[f64], zj: &[f64], negatives: &[f64], m: usize) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::param("NCE needs at least one negative"));
    }
    let mut logits = vec![dot(zi, zj)];
    logits.extend(rows(negatives, m)?.map(|r| dot(zi, r)));
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

/// Reference batch loss on plain rows, mirroring [`batch_loss`].
pub fn batch_loss_reference(anchors: &[f64], positives: &[f64], m: usize, cfg: &LossConfig) -> Result<f64> {
    let n = rows(anchors, m)?.len();
    if n < 2 || positives.len() != anchors.len() {
        return Err(Error::param("batch needs at least two anchor/positive pairs of equal shape"));
    }
    let others = |i: usize| -> Vec<f64> {
        positives
            .chunks_exact(m)
            .enumerate()
            .filter(|&(k, _)| cfg.include_self || k != i)
            .flat_map(|(_, r)| r.iter().copied())
            .collect()
    };
    let mut total = 0.0;
    for i in 0..n {
        let zi = &anchors[i * m..][..m];
        let zj = &positives[i * m..][..m];
        total += match cfg.variant {
            Variant::Contrawr => {
                let zw = world_representation(&others(i), m)?;
                triplet_loss(zi, zj, &zw, cfg.delta, cfg.sigma)?
            }
            Variant::ContrawrPlus => {
                let zw = instance_world_representation(&others(i), m, zi, cfg.temperature)?;
                triplet_loss(zi, zj, &zw, cfg.delta, cfg.sigma)?
            }
            Variant::Nce => {
                let negs: Vec<f64> = positives
                    .chunks_exact(m)
                    .enumerate()
                    .filter(|&(k, _)| k != i)
                    .flat_map(|(_, r)| r.iter().copied())
                    .collect();
                nce_loss(zi, zj, &negs, m)?
            }
        };
    }
    Ok(total / n as f64)
}

fn gaussian_rows<T: Real>(g: &mut Graph<T>, a: Var, b: Var, sigma: f64) -> Result<Var> {
    let d = g.sq_dist_rows(a, b)?;
    let s = g.affine(d, T::lit(-1.0 / (2.0 * sigma * sigma)), T::zero());
    Ok(g.exp(s))
}

/// Mean per-anchor loss for `anchors` (online) and `positives` (target),
/// both `[M, m]` with unit rows.
pub fn batch_loss<T: Real>(g: &mut Graph<T>, anchors: Var, positives: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = g.value(anchors).shape().to_vec();
    if shape.len() != 2 || g.value(positives).shape() != shape.as_slice() {
        return Err(Error::shape(
            "batch_loss",
            format!(
                "anchors {:?} and positives {:?} must be equal [M, m] matrices",
                shape,
                g.value(positives).shape()
            ),
        ));
    }
    let big_m = shape[0];
    if big_m < 2 {
        return Err(Error::param("batch loss needs at least two pairs"));
    }
    let world_src = |g: &mut Graph<T>, v: Var| if cfg.world_grad { v } else { g.detach(v) };

    match cfg.variant {
        Variant::Nce => {
            let logits = g.matmul(anchors, positives, true)?;
            let targets: Vec<usize> = (0..big_m).collect();
            g.cross_entropy_rows(logits, &targets)
        }
        Variant::Contrawr | Variant::ContrawrPlus => {
            let pos_w = world_src(g, positives);
            let world = if cfg.variant == Variant::Contrawr {
                let mean = g.mean_rows(pos_w)?;
                let b = g.broadcast_rows(mean, big_m)?;
                if cfg.include_self {
                    b
                } else {
                    let k = big_m as f64 / (big_m - 1) as f64;
                    let scaled = g.affine(b, T::lit(k), T::zero());
                    let own = g.affine(pos_w, T::lit(1.0 / (big_m - 1) as f64), T::zero());
                    g.sub(scaled, own)?
                }
            } else {
                let anc_w = world_src(g, anchors);
                let dots = g.matmul(anc_w, pos_w, true)?;
                let mut logits = g.affine(dots, T::lit(1.0 / cfg.temperature), T::zero());
                if !cfg.include_self {
                    let mut mask = Tensor::zeros(&[big_m, big_m]);
                    for i in 0..big_m {
                        mask.data_mut()[i * big_m + i] = T::lit(-1e30);
                    }
                    let mask = g.constant(mask);
                    logits = g.add(logits, mask)?;
                }
                let w = g.softmax_rows(logits)?;
                g.matmul(w, pos_w, false)?
            };
            let sim_world = gaussian_rows(g, anchors, world, cfg.sigma)?;
            let sim_pos = gaussian_rows(g, anchors, positives, cfg.sigma)?;
            let gap = g.sub(sim_world, sim_pos)?;
            let shifted = g.affine(gap, T::one(), T::lit(cfg.delta));
            let hinge = g.relu(shifted);
            g.mean(hinge)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_graph_fn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut impl Rng, n: usize, m: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in v.chunks_mut(m) {
            let s = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter_mut().for_each(|x| *x /= s);
        }
        v
    }

    #[test]
    fn gaussian_examples() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let m1 = [-1.0, 0.0];
        assert_eq!(gaussian_sim(&e1, &e1, 0.3).unwrap(), 1.0);
        assert!((gaussian_sim(&e1, &m1, 2.0).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        assert!((gaussian_sim(&e1, &e2, 2.0).unwrap() - 0.778801).abs() < 1e-6);
        assert!(gaussian_sim(&e1, &e2, 0.0).is_err());
    }

    #[test]
    fn cosine_identity() {
        let a = [0.6, 0.8];
        let b = [-0.8, 0.6];
        assert!(cosine_sim(&a, &b).unwrap().abs() < 1e-15);
        assert!((1.0 - 0.5 * sq_dist(&a, &b)).abs() < 1e-15);
        assert!((cosine_sim(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_sim(&[2.0, 0.0], &a), Err(Error::Contract(_))));
    }

    #[test]
    fn world_examples() {
        assert_eq!(world_representation(&[1.0, 0.0, -1.0, 0.0], 2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(world_representation(&[0.6, 0.8, 0.6, 0.8], 2).unwrap(), vec![0.6, 0.8]);
        assert!(world_representation(&[], 2).is_err());
    }

    #[test]
    fn triplet_examples() {
        let z = [1.0, 0.0];
        assert!((triplet_loss(&z, &z, &z, 0.2, 2.0).unwrap() - 0.2).abs() < 1e-15);
        // sim_world 0.9, sim_pos 0.95 via chosen distances.
        let s = 2.0f64;
        let at = |sim: f64| {
            let d = (-2.0 * s * s * sim.ln()).sqrt();
            [1.0 - d, 0.0]
        };
        let l = triplet_loss(&z, &at(0.95), &at(0.9), 0.2, s).unwrap();
        assert!((l - 0.15).abs() < 1e-12);
        let l = triplet_loss(&z, &z, &at(0.6), 0.2, s).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn nce_examples() {
        let z = [1.0, 0.0];
        assert!((nce_loss(&z, &z, &z, 2).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(nce_loss(&z, &z, &[], 2).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("contrawr+".parse::<Variant>().unwrap(), Variant::ContrawrPlus);
        assert_eq!("NCE".parse::<Variant>().unwrap(), Variant::Nce);
        assert!("simclr".parse::<Variant>().is_err());
    }

    #[test]
    fn margin_validation() {
        let mut c = LossConfig::default();
        c.validate().unwrap();
        c.delta = 0.4;
        assert!(c.validate().is_err());
        c.variant = Variant::Nce;
        c.validate().unwrap();
    }

    #[test]
    fn graph_loss_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (n, m) = (6, 5);
        let a = unit_rows(&mut rng, n, m);
        let p = unit_rows(&mut rng, n, m);
        for variant in Variant::ALL {
            for include_self in [true, false] {
                let cfg = LossConfig {
                    variant,
                    include_self,
                    delta: 0.3,
                    ..LossConfig::default()
                };
                let mut g = Graph::<f64>::new();
                let av = g.variable(Tensor::new(&[n, m], a.clone()).unwrap());
                let pv = g.constant(Tensor::new(&[n, m], p.clone()).unwrap());
                let l = batch_loss(&mut g, av, pv, &cfg).unwrap();
                let want = batch_loss_reference(&a, &p, m, &cfg).unwrap();
                assert!((g.value(l).data()[0] - want).abs() < 1e-12, "{variant} {include_self}");
            }
        }
    }

    #[test]
    fn two_anchor_mean() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let p = [0.6, 0.8, 0.8, 0.6];
        let cfg = LossConfig {
            variant: Variant::Contrawr,
            ..LossConfig::default()
        };
        let zw = [0.7, 0.7];
        let l0 = triplet_loss(&a[..2], &p[..2], &zw, 0.2, 2.0).unwrap();
        let l1 = triplet_loss(&a[2..], &p[2..], &zw, 0.2, 2.0).unwrap();
        let got = batch_loss_reference(&a, &p, 2, &cfg).unwrap();
        assert!((got - (l0 + l1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn plus_approaches_plain_at_high_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (8, 4);
        let a = unit_rows(&mut rng, n, m);
        let p = unit_rows(&mut rng, n, m);
        let plain = LossConfig {
            variant: Variant::Contrawr,
            ..LossConfig::default()
        };
        let plus = LossConfig {
            variant: Variant::ContrawrPlus,
            temperature: 1e9,
            ..LossConfig::default()
        };
        let x = batch_loss_reference(&a, &p, m, &plain).unwrap();
        let y = batch_loss_reference(&a, &p, m, &plus).unwrap();
        assert!((x - y).abs() < 1e-5);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, m) = (5, 4);
        let a = unit_rows(&mut rng, n, m);
        let p = unit_rows(&mut rng, n, m);
        for variant in Variant::ALL {
            for world_grad in [false, true] {
                if variant == Variant::ContrawrPlus && !world_grad {
                    // Covered by the frozen-world test below.
                    continue;
                }
                let cfg = LossConfig {
                    variant,
                    world_grad,
                    // Large margin keeps every anchor strictly inside the hinge.
                    delta: 0.35,
                    ..LossConfig::default()
                };
                let err = check_graph_fn(&[n, m], &a, 1e-5, |g, x| {
                    let pv = g.constant(Tensor::new(&[n, m], p.clone())?);
                    batch_loss(g, x, pv, &cfg)
                })
                .unwrap();
                assert!(err < 1e-6, "{variant} world_grad={world_grad}: {err}");
            }
        }
    }

    #[test]
    fn stop_gradient_matches_frozen_world() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, m) = (5, 4);
        let a = unit_rows(&mut rng, n, m);
        let p = unit_rows(&mut rng, n, m);
        let cfg = LossConfig {
            delta: 0.35,
            ..LossConfig::default()
        };
        let mut g = Graph::<f64>::new();
        let av = g.variable(Tensor::new(&[n, m], a.clone()).unwrap());
        let pv = g.constant(Tensor::new(&[n, m], p.clone()).unwrap());
        let l = batch_loss(&mut g, av, pv, &cfg).unwrap();
        let analytic = g.backward(l).unwrap().get(av).unwrap().data().to_vec();
        let worlds: Vec<Vec<f64>> = a
            .chunks(m)
            .map(|zi| instance_world_representation(&p, m, zi, cfg.temperature).unwrap())
            .collect();
        let frozen = |x: &[f64]| {
            (0..n)
                .map(|i| triplet_loss(&x[i * m..][..m], &p[i * m..][..m], &worlds[i], cfg.delta, cfg.sigma).unwrap())
                .sum::<f64>()
                / n as f64
        };
        let err = crate::nn::finite_difference_check(frozen, &a, &analytic, 1e-5);
        assert!(err < 1e-6, "{err}");
    }
}
