use super::config::AdamConfig;
use crate::autograd::Mat;

/// Adam with coupled L2 weight decay: the decay term is added to the
/// gradient before the moment updates. Tensors without a gradient on a step
/// are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub lr: f64,
    pub weight_decay: f64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: Vec<i32>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, lr: f64, weight_decay: f64, tensors: usize) -> Self {
        Self {
            cfg,
            lr,
            weight_decay,
            m: vec![None; tensors],
            v: vec![None; tensors],
            t: vec![0; tensors],
        }
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: Vec<Option<Mat>>) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different tensor count");
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(mut g) = g else { continue };
            if self.weight_decay != 0.0 {
                g.scaled_add(self.weight_decay, p);
            }
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(p.dim()));
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(p.dim()));
            self.t[i] += 1;
            let t = self.t[i];
            m.zip_mut_with(&g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            v.zip_mut_with(&g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let lr = self.lr;
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
