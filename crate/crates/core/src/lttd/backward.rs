//! Reverse-mode gradients of `<z, upstream>` through the block.

use super::forward::{forward_with_cache, ForwardCache};
use super::{shape_err, AttentionNorm, LttdConfig, LttdParams, ModalityTriple, Result};
use crate::tensor::{matmul, DenseTensor};

/// Gradients for every parameter tensor and for the three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LttdGrads {
    pub params: LttdParams,
    pub inputs: ModalityTriple,
}

pub fn backward(params: &LttdParams, inputs: &ModalityTriple, cfg: &LttdConfig, upstream: &[f64]) -> Result<LttdGrads> {
    let (_, _, cache) = forward_with_cache(params, inputs, cfg)?;
    backward_with_cache(params, inputs, cfg, &cache, upstream)
}

/// Gradients of the joint sum with respect to the weights and projections.
fn joint_backward(weights: &DenseTensor, p: &[DenseTensor; 3], gz: &[f64]) -> (Vec<f64>, [Vec<f64>; 3]) {
    let [n1, n2, n3] = [p[0].rows(), p[1].rows(), p[2].rows()];
    let dz = gz.len();
    let m = weights.data();
    let (p1, p2, p3) = (p[0].data(), p[1].data(), p[2].data());
    let mut dm = vec![0.0; n1 * n2 * n3];
    let mut dp1 = vec![0.0; n1 * dz];
    let mut dp2 = vec![0.0; n2 * dz];
    let mut dp3 = vec![0.0; n3 * dz];
    let mut u = vec![0.0; dz];
    let mut inner = vec![0.0; dz];
    for i in 0..n1 {
        for j in 0..n2 {
            // u = gz ⊙ P1[i] ⊙ P2[j]
            for c in 0..dz {
                u[c] = gz[c] * p1[i * dz + c] * p2[j * dz + c];
            }
            inner.fill(0.0);
            for k in 0..n3 {
                let off = (i * n2 + j) * n3 + k;
                let w = m[off];
                let p3k = &p3[k * dz..(k + 1) * dz];
                let mut acc = 0.0;
                for c in 0..dz {
                    acc += u[c] * p3k[c];
                    inner[c] += w * p3k[c];
                    dp3[k * dz + c] += w * u[c];
                }
                dm[off] = acc;
            }
            for c in 0..dz {
                let g = gz[c] * inner[c];
                dp1[i * dz + c] += g * p2[j * dz + c];
                dp2[j * dz + c] += g * p1[i * dz + c];
            }
        }
    }
    (dm, [dp1, dp2, dp3])
}

/// Gradients of one slice `[[G; Q1, Q2, Q3]]` given the logit gradient `d`.
/// Returns `(dG, [dQ1, dQ2, dQ3])`.
fn slice_backward(core: &DenseTensor, q: &[DenseTensor; 3], d: &[f64]) -> (Vec<f64>, [Vec<f64>; 3]) {
    let [s1, s2, s3] = [core.dims()[0], core.dims()[1], core.dims()[2]];
    let [n1, n2, n3] = [q[0].rows(), q[1].rows(), q[2].rows()];
    let g = core.data();
    let (q1, q2, q3) = (q[0].data(), q[1].data(), q[2].data());

    // Forward intermediates: a[α,β,k] = Σ_γ G Q3, b[α,j,k] = Σ_β a Q2.
    let mut a = vec![0.0; s1 * s2 * n3];
    for ab in 0..s1 * s2 {
        for k in 0..n3 {
            a[ab * n3 + k] = (0..s3).map(|c| g[ab * s3 + c] * q3[k * s3 + c]).sum();
        }
    }
    let mut b = vec![0.0; s1 * n2 * n3];
    for al in 0..s1 {
        for j in 0..n2 {
            for k in 0..n3 {
                b[(al * n2 + j) * n3 + k] = (0..s2).map(|be| a[(al * s2 + be) * n3 + k] * q2[j * s2 + be]).sum();
            }
        }
    }
    // Reverse intermediates: c1[α,j,k] = Σ_i Q1 d, c2[α,β,k] = Σ_j c1 Q2.
    let mut c1 = vec![0.0; s1 * n2 * n3];
    for i in 0..n1 {
        for al in 0..s1 {
            let w = q1[i * s1 + al];
            for jk in 0..n2 * n3 {
                c1[al * n2 * n3 + jk] += w * d[i * n2 * n3 + jk];
            }
        }
    }
    let mut c2 = vec![0.0; s1 * s2 * n3];
    for al in 0..s1 {
        for be in 0..s2 {
            for k in 0..n3 {
                c2[(al * s2 + be) * n3 + k] = (0..n2).map(|j| c1[(al * n2 + j) * n3 + k] * q2[j * s2 + be]).sum();
            }
        }
    }

    let mut dg = vec![0.0; s1 * s2 * s3];
    for ab in 0..s1 * s2 {
        for c in 0..s3 {
            dg[ab * s3 + c] = (0..n3).map(|k| c2[ab * n3 + k] * q3[k * s3 + c]).sum();
        }
    }
    let mut dq1 = vec![0.0; n1 * s1];
    for i in 0..n1 {
        for al in 0..s1 {
            let row = &d[i * n2 * n3..(i + 1) * n2 * n3];
            let bb = &b[al * n2 * n3..(al + 1) * n2 * n3];
            dq1[i * s1 + al] = row.iter().zip(bb).map(|(x, y)| x * y).sum();
        }
    }
    let mut dq2 = vec![0.0; n2 * s2];
    for j in 0..n2 {
        for be in 0..s2 {
            let mut acc = 0.0;
            for al in 0..s1 {
                for k in 0..n3 {
                    acc += c1[(al * n2 + j) * n3 + k] * a[(al * s2 + be) * n3 + k];
                }
            }
            dq2[j * s2 + be] = acc;
        }
    }
    let mut dq3 = vec![0.0; n3 * s3];
    for k in 0..n3 {
        for c in 0..s3 {
            let mut acc = 0.0;
            for ab in 0..s1 * s2 {
                acc += c2[ab * n3 + k] * g[ab * s3 + c];
            }
            dq3[k * s3 + c] = acc;
        }
    }
    (dg, [dq1, dq2, dq3])
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Result<DenseTensor> {
    Ok(DenseTensor::new(vec![rows, cols], data)?)
}

fn add_into(acc: &mut DenseTensor, delta: &DenseTensor) {
    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += d;
    }
}

pub fn backward_with_cache(
    params: &LttdParams,
    inputs: &ModalityTriple,
    cfg: &LttdConfig,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<LttdGrads> {
    if upstream.len() != cfg.d_z {
        return shape_err(format!("upstream gradient has length {}, expected {}", upstream.len(), cfg.d_z));
    }
    let ms = inputs.modalities();
    let mut grads = LttdGrads { params: LttdParams::zeros(cfg)?, inputs: ModalityTriple::zeros(cfg)? };

    let (dweights, dp) = joint_backward(&cache.weights, &cache.p, upstream);
    let dz = cfg.d_z;
    for l in 0..3 {
        let dp_l = mat(cfg.n[l], dz, dp[l].clone())?;
        grads.params.wz[l] = matmul(&ms[l].transpose()?, &dp_l)?;
        add_into(grads.inputs_mut(l), &matmul(&dp_l, &params.wz[l].transpose()?)?);
    }

    let dlogits = match cfg.normalize {
        AttentionNorm::Raw => dweights,
        AttentionNorm::Softmax => {
            let s = cache.weights.data();
            let dot: f64 = s.iter().zip(&dweights).map(|(a, b)| a * b).sum();
            s.iter().zip(&dweights).map(|(si, gi)| si * (gi - dot)).collect()
        }
    };

    let sd = cfg.slice_dims();
    for (r, q) in cache.q.iter().enumerate() {
        let (dg, dq) = slice_backward(&params.cores[r], q, &dlogits);
        grads.params.cores[r] = DenseTensor::new(sd.to_vec(), dg)?;
        for l in 0..3 {
            let dq_l = mat(cfg.n[l], sd[l], dq[l].clone())?;
            grads.params.w[l][r] = matmul(&ms[l].transpose()?, &dq_l)?;
            add_into(grads.inputs_mut(l), &matmul(&dq_l, &params.w[l][r].transpose()?)?);
        }
    }
    Ok(grads)
}

impl LttdGrads {
    fn inputs_mut(&mut self, l: usize) -> &mut DenseTensor {
        match l {
            0 => &mut self.inputs.m1,
            1 => &mut self.inputs.m2,
            _ => &mut self.inputs.m3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    fn sample_inputs(cfg: &LttdConfig) -> ModalityTriple {
        let mk = |l: usize| {
            DenseTensor::from_fn(vec![cfg.n[l], cfg.d[l]], |ix| {
                ((1 + 3 * l + 5 * ix[0] + 7 * ix[1]) % 13) as f64 / 6.0 - 1.0
            })
            .unwrap()
        };
        ModalityTriple::new(mk(0), mk(1), mk(2)).unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = LttdConfig::new([2, 2, 3], [4, 4, 2], 2, 3).with_norm(AttentionNorm::Softmax);
        let params = LttdParams::init(&cfg, 5).unwrap();
        let g = backward(&params, &sample_inputs(&cfg), &cfg, &[0.0; 3]).unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(g.inputs.m1.max_abs(), 0.0);
    }

    #[test]
    fn zero_inputs_give_zero_parameter_gradients_in_raw_mode() {
        let cfg = LttdConfig::new([2, 2, 3], [4, 4, 2], 2, 3);
        let params = LttdParams::init(&cfg, 5).unwrap();
        let g = backward(&params, &ModalityTriple::zeros(&cfg).unwrap(), &cfg, &[1.0, -2.0, 0.5]).unwrap();
        assert!(g.params.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_upstream_length_is_rejected() {
        let cfg = LttdConfig::new([1, 1, 1], [2, 2, 2], 1, 2);
        let params = LttdParams::init(&cfg, 5).unwrap();
        assert!(backward(&params, &sample_inputs(&cfg), &cfg, &[1.0]).is_err());
    }
}
