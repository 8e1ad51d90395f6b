use ndarray::{ArrayBase, Data, DataMut, Dimension, Zip};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// `v <- mu v + (g + wd p)`, then `p <- p - lr v`.
    pub fn step<P, V, G, D>(
        &self,
        param: &mut ArrayBase<P, D>,
        velocity: &mut ArrayBase<V, D>,
        grad: &ArrayBase<G, D>,
    ) where
        P: DataMut<Elem = f64>,
        V: DataMut<Elem = f64>,
        G: Data<Elem = f64>,
        D: Dimension,
    {
        Zip::from(param).and(velocity).and(grad).for_each(|p, v, &g| {
            *v = self.momentum * *v + (g + self.weight_decay * *p);
            *p -= self.lr * *v;
        });
    }
}
