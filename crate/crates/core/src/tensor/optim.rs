use super::{Gradients, ParamGroup, ParamId, ParamStore, Result, Tensor, TensorError};

/// Scales `grads` in place so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 7e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: false,
        }
    }
}

/// Per-parameter Adam accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub v_max: Vec<f64>,
    pub steps: u64,
}

impl ParamMoments {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            v_max: vec![0.0; len],
            steps: 0,
        }
    }
}

/// Adam with bias correction and optional AMSGrad.
///
/// Parameters that received no gradient in a step keep their value and their
/// moments; each parameter counts its own steps for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    moments: Vec<ParamMoments>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            moments: store.ids().map(|id| ParamMoments::new(store.get(id).len())).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> &ParamMoments {
        &self.moments[id.index()]
    }

    /// Rebuilds an optimizer from saved state; used by checkpoint loading.
    pub fn from_parts(config: AdamConfig, moments: Vec<ParamMoments>, step: u64) -> Self {
        Self { config, moments, step }
    }

    pub fn moments_all(&self) -> &[ParamMoments] {
        &self.moments
    }

    /// Applies one update to every parameter that has a gradient and whose
    /// group passes `filter`.
    pub fn step_filtered(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        filter: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                lhs: vec![self.moments.len()],
                rhs: vec![store.len()],
            });
        }
        self.step += 1;
        let c = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            if !filter(store.group(id)) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let st = &mut self.moments[id.index()];
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let v = if c.amsgrad {
                    st.v_max[i] = st.v_max[i].max(st.v[i]);
                    st.v_max[i]
                } else {
                    st.v[i]
                };
                let denom = (v / bc2).sqrt() + c.eps;
                *x -= c.lr * (st.m[i] / bc1) / denom;
            }
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        self.step_filtered(store, grads, |_| true)
    }
}
