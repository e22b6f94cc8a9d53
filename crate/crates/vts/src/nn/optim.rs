//! Adam optimizer and global-norm gradient clipping.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::tape::Arr;

#[derive(Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Arr]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// Applies one update. `params` and `grads` must match the order used at
    /// construction.
    pub fn step(&mut self, params: Vec<&mut Arr>, grads: &[Arr]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi
            });
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|pi, &mi, &vi| {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Arr], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p: Arr = arr1(&[5.0, -3.0]).into_dyn();
        let mut opt = Adam::new(0.1, &[&p]);
        for _ in 0..500 {
            let g = p.mapv(|x| 2.0 * x);
            opt.step(vec![&mut p], &[g]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "got {p:?}");
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut gs = vec![arr1(&[3.0, 0.0]).into_dyn(), arr1(&[0.0, 4.0]).into_dyn()];
        let pre = clip_global_norm(&mut gs, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let post: f64 = gs.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum();
        assert!((post.sqrt() - 1.0).abs() < 1e-12);

        let mut small = vec![arr1(&[0.1, 0.1]).into_dyn()];
        let orig = small[0].clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], orig);
    }
}
