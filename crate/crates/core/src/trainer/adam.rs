use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use crate::archive::ArrayArchive;
use crate::model::{Model, ModelGrads};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with decoupled weight decay:
/// `θ ← θ − η (m̂ / (√v̂ + ε) + wd · θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, model: &mut Model, grads: &ModelGrads) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let mut flat = BTreeMap::new();
        grads.visit(|name, g| {
            flat.insert(name.to_string(), g.to_vec());
        });
        let (lr, wd) = (self.learning_rate, self.weight_decay);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(|name, theta| {
            let g = &flat[name];
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; theta.len()]);
            for i in 0..theta.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + EPSILON) + wd * theta[i]);
            }
        });
    }

    pub fn write_archive(&self, archive: &mut ArrayArchive) {
        archive.set_meta("adam.step", self.step.to_string());
        archive.set_meta("adam.learning_rate", format!("{:e}", self.learning_rate));
        archive.set_meta("adam.weight_decay", format!("{:e}", self.weight_decay));
        for (name, m) in &self.m {
            archive.insert(format!("adam.m/{name}"), ArrayD::from_shape_vec(IxDyn(&[m.len()]), m.clone()).expect("1-d"));
        }
        for (name, v) in &self.v {
            archive.insert(format!("adam.v/{name}"), ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.clone()).expect("1-d"));
        }
    }

    pub fn read_archive(archive: &ArrayArchive) -> Result<Self> {
        let parse = |key: &str| -> Result<f64> {
            archive
                .meta(key)?
                .parse()
                .map_err(|_| Error::Archive(format!("bad `{key}`")))
        };
        let step = archive
            .meta("adam.step")?
            .parse()
            .map_err(|_| Error::Archive("bad `adam.step`".into()))?;
        let mut opt = Adam::new(parse("adam.learning_rate")?, parse("adam.weight_decay")?);
        opt.step = step;
        for (key, a) in &archive.arrays {
            if let Some(name) = key.strip_prefix("adam.m/") {
                opt.m.insert(name.to_string(), a.iter().copied().collect());
            } else if let Some(name) = key.strip_prefix("adam.v/") {
                opt.v.insert(name.to_string(), a.iter().copied().collect());
            }
        }
        Ok(opt)
    }
}
