//! Adam over the field's two parameter groups: hash features (f32, tiny
//! epsilon — their gradients are sparse and small) and MLP weights (f64).

use rayon::prelude::*;

use crate::field::{SdfField, SdfGrads};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps_features: f64,
    pub eps_mlp: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps_features: 1e-15,
            eps_mlp: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    m_features: Vec<f32>,
    v_features: Vec<f32>,
    m_mlp: Vec<f64>,
    v_mlp: Vec<f64>,
}

impl AdamState {
    pub fn new(field: &SdfField) -> Self {
        let mlp_len = field.w1.len() + field.b1.len() + field.w2.len() + 2;
        AdamState {
            t: 0,
            m_features: vec![0.0; field.features.len()],
            v_features: vec![0.0; field.features.len()],
            m_mlp: vec![0.0; mlp_len],
            v_mlp: vec![0.0; mlp_len],
        }
    }
}

pub fn adam_step(
    field: &mut SdfField,
    grads: &SdfGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);

    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let (lr32, eps32) = (lr as f32, cfg.eps_features as f32);
    let (c1f, c2f) = (c1 as f32, c2 as f32);
    field
        .features
        .par_chunks_mut(1 << 14)
        .zip(state.m_features.par_chunks_mut(1 << 14))
        .zip(state.v_features.par_chunks_mut(1 << 14))
        .zip(grads.features.par_chunks(1 << 14))
        .for_each(|(((p, m), v), g)| {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / c1f;
                let vh = v[i] / c2f;
                p[i] -= lr32 * mh / (vh.sqrt() + eps32);
            }
        });

    let mut k = 0usize;
    let mut update = |p: &mut f64, g: f64, m_mlp: &mut [f64], v_mlp: &mut [f64]| {
        let m = &mut m_mlp[k];
        let v = &mut v_mlp[k];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps_mlp);
        k += 1;
    };
    for i in 0..field.w1.len() {
        update(&mut field.w1[i], grads.w1[i], &mut state.m_mlp, &mut state.v_mlp);
    }
    for i in 0..field.b1.len() {
        update(&mut field.b1[i], grads.b1[i], &mut state.m_mlp, &mut state.v_mlp);
    }
    for i in 0..field.w2.len() {
        update(&mut field.w2[i], grads.w2[i], &mut state.m_mlp, &mut state.v_mlp);
    }
    update(&mut field.b2, grads.b2, &mut state.m_mlp, &mut state.v_mlp);
    update(
        &mut field.sharpness_raw,
        grads.sharpness_raw,
        &mut state.m_mlp,
        &mut state.v_mlp,
    );
}
