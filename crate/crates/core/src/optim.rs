//! Adam with per-slot step counters.

use alloc::vec::Vec;

use crate::dense::DenseMatrix;
use crate::math;

#[derive(Clone, Debug)]
struct Moments {
    m: DenseMatrix,
    v: DenseMatrix,
    t: u32,
}

/// Adam over a fixed set of parameter slots. Each slot keeps its own step
/// count, so parameters that receive no gradient in a step (for example the
/// tokens of a domain that was not visited) are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: Vec::new(),
        }
    }

    pub fn step(&mut self, slot: usize, param: &mut DenseMatrix, grad: &DenseMatrix) {
        debug_assert_eq!(param.shape(), grad.shape());
        if self.slots.len() <= slot {
            self.slots.resize(slot + 1, None);
        }
        let st = self.slots[slot].get_or_insert_with(|| Moments {
            m: DenseMatrix::zeros(grad.rows(), grad.cols()),
            v: DenseMatrix::zeros(grad.rows(), grad.cols()),
            t: 0,
        });
        st.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, st.t as f64);
        let c2 = 1.0 - libm::pow(b2, st.t as f64);
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(st.m.data_mut())
            .zip(st.v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (math::sqrt(v_hat) + self.eps);
        }
    }
}
