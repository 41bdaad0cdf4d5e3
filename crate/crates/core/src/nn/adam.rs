//! Adam optimizer over any `ParamContainer`.

use crate::nn::params::ParamContainer;
use crate::scalar::{r, Real};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

impl<T: Real> AdamState<T> {
    pub fn new<C: ParamContainer<T>>(params: &C) -> Self {
        let shapes: Vec<usize> = params.arrays().iter().map(|a| a.data.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn step<C: ParamContainer<T>>(&mut self, params: &mut C, grads: &C, lr: f64) {
        self.t += 1;
        let b1 = r::<T>(BETA1);
        let b2 = r::<T>(BETA2);
        let one = T::one();
        let bc1 = r::<T>(1.0 - BETA1.powi(self.t as i32));
        let bc2 = r::<T>(1.0 - BETA2.powi(self.t as i32));
        let lr_t = r::<T>(lr);
        let eps = r::<T>(EPS);

        let g_arrays = grads.arrays();
        for ((p, g), (m, v)) in params
            .arrays_mut()
            .into_iter()
            .zip(g_arrays.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.data.len(), g.data.len());
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] = p.data[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
