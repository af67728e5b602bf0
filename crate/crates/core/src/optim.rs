//! Adam with per-parameter moments keyed by parameter name.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::autograd::Param;
use crate::checkpoint::Archive;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            slots: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of `param` from `grad`.
    pub fn step(&mut self, name: &str, param: &mut Param, grad: &Array2<f64>, lr: f64) {
        let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
            m: Array2::zeros(param.value.dim()),
            v: Array2::zeros(param.value.dim()),
            t: 0,
        });
        slot.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(slot.t as i32);
        let c2 = 1.0 - b2.powi(slot.t as i32);
        let eps = self.eps;
        Zip::from(&mut param.value)
            .and(&mut slot.m)
            .and(&mut slot.v)
            .and(grad)
            .for_each(|w, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }

    pub fn steps_taken(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.t)
    }

    /// Entries `<name>/m`, `<name>/v` and a `1×1` `<name>/t` per parameter.
    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (name, s) in &self.slots {
            a.insert(format!("{name}/m"), s.m.clone());
            a.insert(format!("{name}/v"), s.v.clone());
            a.insert(format!("{name}/t"), Array2::from_elem((1, 1), s.t as f64));
        }
        a
    }

    pub fn load_archive(&mut self, archive: &Archive) -> Result<()> {
        let mut slots = BTreeMap::new();
        for key in archive.keys() {
            let Some(name) = key.strip_suffix("/t") else { continue };
            let get = |suffix: &str| {
                archive
                    .get(&format!("{name}/{suffix}"))
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer entry `{name}/{suffix}` missing")))
            };
            let m = get("m")?;
            let v = get("v")?;
            if m.dim() != v.dim() {
                return Err(Error::Checkpoint(format!("optimizer moments for `{name}` disagree in shape")));
            }
            slots.insert(name.to_string(), Slot { m, v, t: archive[key][[0, 0]] as u64 });
        }
        if slots.len() * 3 != archive.len() {
            return Err(Error::Checkpoint("stray optimizer entries".into()));
        }
        self.slots = slots;
        Ok(())
    }
}
