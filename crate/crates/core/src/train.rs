//! Shared optimizer plumbing: which tensors are trainable, how their graph
//! handles line up with storage, and one Adam update over all of them.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::model::{BoundModel, Model, ParamId, Trainable};
use crate::numerics::{clip_global_norm, Adam, AdamConfig, Gradients, Graph, Scalar, Tensor, Var};

/// Trainable tensors in a fixed order: base tensors by index, then LoRA
/// `(A, B)` pairs, then extra tensors owned by the caller.
pub(crate) struct Trainer<F> {
    trainable: Trainable,
    adam: Adam<F>,
    grad_clip: Option<f64>,
}

fn base_trainable<F: Scalar>(model: &Model<F>, t: Trainable, i: usize) -> bool {
    if model.params.is_head(ParamId(i)) {
        t.head
    } else {
        t.base
    }
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: &Model<F>, extras: &[Tensor<F>], trainable: Trainable, adam: AdamConfig, grad_clip: Option<f64>) -> Self {
        let mut sizes = Vec::new();
        for (i, t) in model.params.tensors().iter().enumerate() {
            if base_trainable(model, trainable, i) {
                sizes.push(t.len());
            }
        }
        if trainable.lora {
            if let Some(l) = &model.lora {
                for ad in &l.adapters {
                    sizes.push(ad.a.len());
                    sizes.push(ad.b.len());
                }
            }
        }
        sizes.extend(extras.iter().map(|t| t.len()));
        Trainer {
            trainable,
            adam: Adam::new(adam, &sizes),
            grad_clip,
        }
    }

    /// Gradients for every trainable slot; unused tensors get zeros.
    pub fn collect(
        &self,
        model: &Model<F>,
        bound: &BoundModel,
        extras: &[(Var, usize)],
        g: &Graph<'_, F>,
        grads: &mut Gradients<F>,
    ) -> Vec<Vec<F>> {
        let mut take = |v: Var| grads.take(v).unwrap_or_else(|| vec![F::zero(); g.value(v).len()]);
        let mut out = Vec::new();
        for (i, &v) in bound.params.iter().enumerate() {
            if base_trainable(model, self.trainable, i) {
                out.push(take(v));
            }
        }
        if self.trainable.lora {
            for &(a, b) in &bound.lora {
                out.push(take(a));
                out.push(take(b));
            }
        }
        for &(v, _) in extras {
            out.push(take(v));
        }
        out
    }

    /// One optimizer step; returns the pre-clip gradient norm.
    pub fn step(&mut self, model: &mut Model<F>, extras: &mut [Tensor<F>], mut grads: Vec<Vec<F>>, lr: f64) -> Result<f64> {
        let norm = {
            let mut refs: Vec<&mut [F]> = grads.iter_mut().map(|g| g.as_mut_slice()).collect();
            match self.grad_clip {
                Some(c) => clip_global_norm(&mut refs, c),
                None => clip_global_norm(&mut refs, f64::INFINITY),
            }
        };
        let head = model.params.head();
        let t = self.trainable;
        let mut slots: Vec<&mut [F]> = Vec::new();
        for (i, p) in model.params.tensors_mut().iter_mut().enumerate() {
            let train = if Some(ParamId(i)) == head { t.head } else { t.base };
            if train {
                slots.push(p.data_mut());
            }
        }
        if t.lora {
            if let Some(l) = model.lora.as_mut() {
                for ad in l.adapters.iter_mut() {
                    slots.push(ad.a.data_mut());
                    slots.push(ad.b.data_mut());
                }
            }
        }
        for e in extras.iter_mut() {
            slots.push(e.data_mut());
        }
        let grefs: Vec<&[F]> = grads.iter().map(|g| g.as_slice()).collect();
        self.adam.step(&mut slots, &grefs, lr);
        Ok(norm)
    }
}
