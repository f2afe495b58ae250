//! Pairwise large-margin cosine loss and its analytic gradient through the
//! embedding head's L2 normalization.
//!
//! Per triplet `(a, p, n)` with cosines `cp = cos(a, p)` and `cn = cos(a, n)`:
//!
//! ```text
//! l = -log( e^{s(cp - m)} / (e^{s(cp - m)} + e^{s cn}) )
//!   = softplus(s (cn - cp + m))
//! ```
//!
//! and the batch loss is the mean over triplets.

use super::head::EmbeddingHead;
use crate::error::{Error, Result};

/// `ln(1 + e^z)` without overflow for large `|z|`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss of a single triplet given its two cosines.
pub fn triplet_loss(cos_pos: f64, cos_neg: f64, s: f64, m: f64) -> f64 {
    softplus(s * (cos_neg - cos_pos + m))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddedTriplet<'a> {
    pub anchor: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureTriplet<'a> {
    pub anchor: &'a [f32],
    pub positive: &'a [f32],
    pub negative: &'a [f32],
}

/// Mean loss over already-embedded triplets.
pub fn cosface_loss(batch: &[EmbeddedTriplet<'_>], s: f64, m: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = batch
        .iter()
        .map(|t| triplet_loss(cosine(t.anchor, t.positive), cosine(t.anchor, t.negative), s, m))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of the mean loss with respect to the head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    /// Row-major, same shape as the head's weight.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl HeadGradient {
    fn zeros(head: &EmbeddingHead) -> Self {
        Self {
            weight: vec![0.0; head.weight.len()],
            bias: vec![0.0; head.bias.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.weight
            .iter()
            .chain(&self.bias)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

struct Forward {
    unit: Vec<f64>,
    norm: f64,
}

fn forward(head: &EmbeddingHead, features: &[f32]) -> Result<Forward> {
    let raw = head.project(features)?;
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegenerateEmbedding);
    }
    Ok(Forward {
        unit: raw.iter().map(|v| v / norm).collect(),
        norm,
    })
}

/// Back-propagates `g = dL/dy` through `y = u / |u|`, `u = W f + b`, accumulating into `grad`.
fn accumulate(grad: &mut HeadGradient, fw: &Forward, g: &[f64], features: &[f32], scale: f64) {
    let along: f64 = fw.unit.iter().zip(g).map(|(y, gi)| y * gi).sum();
    let feature_dim = features.len();
    for (i, (y, gi)) in fw.unit.iter().zip(g).enumerate() {
        let du = scale * (gi - y * along) / fw.norm;
        if du == 0.0 {
            continue;
        }
        grad.bias[i] += du;
        let row = &mut grad.weight[i * feature_dim..(i + 1) * feature_dim];
        for (w, &f) in row.iter_mut().zip(features) {
            *w += du * f as f64;
        }
    }
}

/// Mean loss and its exact gradient with respect to `W` and `b`.
pub fn cosface_backward(
    head: &EmbeddingHead,
    batch: &[FeatureTriplet<'_>],
    s: f64,
    m: f64,
) -> Result<(f64, HeadGradient)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut grad = HeadGradient::zeros(head);
    let mut total = 0.0;
    for t in batch {
        let a = forward(head, t.anchor)?;
        let p = forward(head, t.positive)?;
        let n = forward(head, t.negative)?;
        let cos_pos: f64 = a.unit.iter().zip(&p.unit).map(|(x, y)| x * y).sum();
        let cos_neg: f64 = a.unit.iter().zip(&n.unit).map(|(x, y)| x * y).sum();
        let z = s * (cos_neg - cos_pos + m);
        total += softplus(z);

        // dl/dcn = s σ(z), dl/dcp = -s σ(z)
        let w = s * sigmoid(z);
        if w == 0.0 {
            continue;
        }
        let g_anchor: Vec<f64> = n.unit.iter().zip(&p.unit).map(|(yn, yp)| w * (yn - yp)).collect();
        let g_pos: Vec<f64> = a.unit.iter().map(|ya| -w * ya).collect();
        let g_neg: Vec<f64> = a.unit.iter().map(|ya| w * ya).collect();
        accumulate(&mut grad, &a, &g_anchor, t.anchor, inv_n);
        accumulate(&mut grad, &p, &g_pos, t.positive, inv_n);
        accumulate(&mut grad, &n, &g_neg, t.negative, inv_n);
    }
    Ok((total * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    fn triplet_with_cosines(cp: f64, cn: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (unit(0.0), unit(cp.acos()), unit(cn.acos()))
    }

    fn loss_of(cp: f64, cn: f64, s: f64, m: f64) -> f64 {
        let (a, p, n) = triplet_with_cosines(cp, cn);
        cosface_loss(
            &[EmbeddedTriplet {
                anchor: &a,
                positive: &p,
                negative: &n,
            }],
            s,
            m,
        )
        .unwrap()
    }

    #[test]
    fn scalar_examples() {
        assert!((loss_of(0.5, 0.5, 1.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        // ln(1 + e^-2), from an independent calculator.
        assert!((loss_of(1.0, -1.0, 1.0, 0.0) - 0.126_928_011_042_972_5).abs() < 1e-9);
        // ln(1 + e^-16)
        let tiny = loss_of(0.9, 0.3, 64.0, 0.35);
        assert!((tiny - 1.125_351_683_871_768e-7).abs() < 1e-12, "{tiny}");
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(matches!(cosface_loss(&[], 1.0, 0.0), Err(Error::EmptyBatch)));
        let head = EmbeddingHead::identity(2).unwrap();
        assert!(matches!(cosface_backward(&head, &[], 1.0, 0.0), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_below_ln2_iff_margin_satisfied() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let cp = rng.random_range(-1.0..1.0);
            let cn = rng.random_range(-1.0..1.0);
            let s = rng.random_range(0.5..64.0);
            let m = rng.random_range(0.0..0.99);
            let l = triplet_loss(cp, cn, s, m);
            assert!(l > 0.0 || s * (cn - cp + m) < -700.0);
            let satisfied = s * (cp - m) > s * cn;
            assert_eq!(l < std::f64::consts::LN_2, satisfied, "cp {cp} cn {cn} s {s} m {m}");
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<[Vec<f32>; 3]> {
        (0..n)
            .map(|_| std::array::from_fn(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect()
    }

    fn as_triplets(batch: &[[Vec<f32>; 3]]) -> Vec<FeatureTriplet<'_>> {
        batch
            .iter()
            .map(|[a, p, n]| FeatureTriplet {
                anchor: a,
                positive: p,
                negative: n,
            })
            .collect()
    }

    fn loss_at(head: &EmbeddingHead, batch: &[FeatureTriplet<'_>], s: f64, m: f64) -> f64 {
        cosface_backward(head, batch, s, m).unwrap().0
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (s, m, h) = (4.0, 0.35, 1e-5);
        let head = EmbeddingHead::init(4, 8, &mut rng).unwrap();
        let data = random_batch(&mut rng, 6, 8);
        let batch = as_triplets(&data);
        let (_, grad) = cosface_backward(&head, &batch, s, m).unwrap();
        for i in 0..head.weight.len() {
            let mut plus = head.clone();
            plus.weight[i] += h;
            let mut minus = head.clone();
            minus.weight[i] -= h;
            let fd = (loss_at(&plus, &batch, s, m) - loss_at(&minus, &batch, s, m)) / (2.0 * h);
            let err = (fd - grad.weight[i]).abs() / fd.abs().max(grad.weight[i].abs()).max(1e-6);
            assert!(err < 1e-4, "w[{i}] analytic {} fd {fd}", grad.weight[i]);
        }
        for i in 0..head.bias.len() {
            let mut plus = head.clone();
            plus.bias[i] += h;
            let mut minus = head.clone();
            minus.bias[i] -= h;
            let fd = (loss_at(&plus, &batch, s, m) - loss_at(&minus, &batch, s, m)) / (2.0 * h);
            let err = (fd - grad.bias[i]).abs() / fd.abs().max(grad.bias[i].abs()).max(1e-6);
            assert!(err < 1e-4, "b[{i}] analytic {} fd {fd}", grad.bias[i]);
        }
    }

    #[test]
    fn saturated_batch_has_vanishing_gradient() {
        // Anchor and positive coincide, negative opposite: cos_pos = 1, cos_neg = -1.
        let head = EmbeddingHead::identity(3).unwrap();
        let (a, p, n) = ([1.0f32, 0.2, 0.0], [1.0f32, 0.2, 0.0], [-1.0f32, -0.2, 0.0]);
        let batch = [FeatureTriplet {
            anchor: &a,
            positive: &p,
            negative: &n,
        }];
        let (loss, grad) = cosface_backward(&head, &batch, 64.0, 0.35).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.norm() < 1e-8, "{}", grad.norm());
    }

    #[test]
    fn negative_gradient_step_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let head = EmbeddingHead::init(4, 8, &mut rng).unwrap();
        let data = random_batch(&mut rng, 8, 8);
        let batch = as_triplets(&data);
        let (before, grad) = cosface_backward(&head, &batch, 1.0, 0.35).unwrap();
        let mut stepped = head.clone();
        for (w, g) in stepped.weight.iter_mut().zip(&grad.weight) {
            *w -= 1e-3 * g;
        }
        for (b, g) in stepped.bias.iter_mut().zip(&grad.bias) {
            *b -= 1e-3 * g;
        }
        assert!(loss_at(&stepped, &batch, 1.0, 0.35) < before);
    }

    #[test]
    fn loss_monotone_in_margin_and_cos_pos() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let cp = rng.random_range(-1.0..1.0);
            let cn = rng.random_range(-1.0..1.0);
            let s = rng.random_range(0.5..64.0);
            let m1 = rng.random_range(0.0..0.9);
            let m2 = m1 + rng.random_range(0.0..0.09);
            assert!(triplet_loss(cp, cn, s, m2) >= triplet_loss(cp, cn, s, m1));
            let cp2 = (cp + rng.random_range(0.0..0.5)).min(1.0);
            assert!(triplet_loss(cp2, cn, s, m1) <= triplet_loss(cp, cn, s, m1));
        }
    }
}
