use super::{Gradients, ParamStore, Tensor};

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect();
        let (b1, b2) = (self.beta1, self.beta2);
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let m = self.first[id.index()].as_ref().unwrap();
            let v = self.second[id.index()].as_ref().unwrap();
            let (lr, eps, wd) = (self.lr, self.eps, self.weight_decay);
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                if wd != 0.0 {
                    *p -= lr * wd * *p;
                }
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}
