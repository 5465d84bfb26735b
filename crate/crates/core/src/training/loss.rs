//! Softmax cross-entropy plus soft Dice on the foreground class, both over
//! non-ignored voxels only.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor5};

/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

fn check(logits_shape: [usize; 5], target: &[u8], ignore: &[u8], weights: [f64; 2]) -> Result<()> {
    let voxels = logits_shape[..4].iter().product::<usize>();
    if target.len() != voxels || ignore.len() != voxels {
        return Err(Error::Shape(format!(
            "logits cover {voxels} voxels, target {} and ignore {}",
            target.len(),
            ignore.len()
        )));
    }
    if logits_shape[4] < 2 {
        return Err(Error::Shape("loss needs at least two classes".into()));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Config(format!("loss weights {weights:?} must be >= 0 and not both zero")));
    }
    Ok(())
}

/// Softmax of one voxel's logits into `p` (f64).
fn softmax<T: Real>(z: &[T], p: &mut [f64]) {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
    let mut s = 0.0;
    for (pi, &zi) in p.iter_mut().zip(z) {
        *pi = (zi.as_f64() - m).exp();
        s += *pi;
    }
    for pi in p.iter_mut() {
        *pi /= s;
    }
}

/// Loss value only. `target` and `ignore` are flat over `(N, H, W, D)`.
pub fn combined_loss<T: Real>(logits: &Tensor5<T>, target: &[u8], ignore: &[u8], weights: [f64; 2]) -> Result<LossValue> {
    Ok(evaluate(logits, target, ignore, weights, false)?.0)
}

/// Loss value and its gradient with respect to the logits.
pub fn combined_loss_grad<T: Real>(
    logits: &Tensor5<T>,
    target: &[u8],
    ignore: &[u8],
    weights: [f64; 2],
) -> Result<(LossValue, Tensor5<T>)> {
    let (v, g) = evaluate(logits, target, ignore, weights, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn evaluate<T: Real>(
    logits: &Tensor5<T>,
    target: &[u8],
    ignore: &[u8],
    weights: [f64; 2],
    want_grad: bool,
) -> Result<(LossValue, Option<Tensor5<T>>)> {
    check(logits.shape(), target, ignore, weights)?;
    let c = logits.channels();
    let z = logits.data();
    let mut p = vec![0.0; c];
    let (mut m, mut ce, mut inter, mut sum_p, mut sum_t) = (0usize, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for v in 0..target.len() {
        if ignore[v] != 0 {
            continue;
        }
        softmax(&z[v * c..(v + 1) * c], &mut p);
        let t = (target[v] != 0) as usize;
        // log-softmax directly keeps saturated logits finite
        let zv = &z[v * c..(v + 1) * c];
        let mx = zv.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
        let lse = mx + zv.iter().map(|&q| (q.as_f64() - mx).exp()).sum::<f64>().ln();
        ce += lse - zv[t].as_f64();
        m += 1;
        inter += p[1] * t as f64;
        sum_p += p[1];
        sum_t += t as f64;
    }
    if m == 0 {
        return Err(Error::AllIgnored);
    }
    let ce = ce / m as f64;
    let denom = sum_p + sum_t + DICE_SMOOTH;
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / denom;
    let value = LossValue {
        total: weights[0] * ce + weights[1] * dice,
        ce,
        dice,
    };
    if !want_grad {
        return Ok((value, None));
    }
    let mut grad = Tensor5::<T>::zeros(logits.shape());
    let g = grad.data_mut();
    let numer = 2.0 * inter + DICE_SMOOTH;
    for v in 0..target.len() {
        if ignore[v] != 0 {
            continue;
        }
        softmax(&z[v * c..(v + 1) * c], &mut p);
        let t = (target[v] != 0) as usize;
        // d dice / d p1
        let dd_dp1 = -(2.0 * t as f64 * denom - numer) / (denom * denom);
        for k in 0..c {
            let onehot = (k == t) as usize as f64;
            let dce = (p[k] - onehot) / m as f64;
            let dp1_dzk = p[1] * ((k == 1) as usize as f64 - p[k]);
            g[v * c + k] = T::from_f64_lossy(weights[0] * dce + weights[1] * dd_dp1 * dp1_dzk);
        }
    }
    Ok((value, Some(grad)))
}
