use super::params::{Gradients, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Moment accumulators for bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamState<T> {
    /// Zero accumulators shaped like `shapes`, with beta = (0.9, 0.999),
    /// epsilon = 1e-8.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let first: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
) -> Result<()> {
    if !(lr > T::zero()) {
        return Err(Error::Contract("learning rate must be positive".into()));
    }
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} accumulators",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape(format!(
                "adam: param {i} shape {:?}, grad {:?}, state {:?}",
                p.shape(),
                g.shape(),
                state.first[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam over a subset of a parameter store at a fixed learning rate.
#[derive(Clone, Debug)]
pub struct AdamGroup<T> {
    pub ids: Vec<ParamId>,
    pub lr: T,
    pub state: AdamState<T>,
}

impl<T: Scalar> AdamGroup<T> {
    pub fn new(store: &ParamStore<T>, ids: Vec<ParamId>, lr: T) -> Self {
        let state = AdamState::new(ids.iter().map(|&id| store.get(id).shape()));
        Self { ids, lr, state }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if self.ids.is_empty() {
            return Ok(());
        }
        let mut taken: Vec<Tensor<T>> = self
            .ids
            .iter()
            .map(|&id| std::mem::replace(store.get_mut(id), Tensor::scalar(T::zero())))
            .collect();
        let gs: Vec<&Tensor<T>> = self.ids.iter().map(|&id| grads.get(id)).collect();
        let result = {
            let mut refs: Vec<&mut Tensor<T>> = taken.iter_mut().collect();
            adam_step(&mut refs, &gs, &mut self.state, self.lr)
        };
        for (&id, t) in self.ids.iter().zip(taken) {
            *store.get_mut(id) = t;
        }
        result
    }
}
