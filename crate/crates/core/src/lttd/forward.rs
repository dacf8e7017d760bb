use super::{
    shape_err, softmax_in_place, AttentionMap, AttentionNorm, JointRepresentation, LttdConfig, LttdParams,
    ModalityTriple, Result,
};
use crate::tensor::{matmul, DenseTensor};

/// Intermediates of a forward pass that the backward pass reuses.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `q[r][l] = M_l W_{l,r}`, each `n_l x (d_l / R)`.
    pub(crate) q: Vec<[DenseTensor; 3]>,
    /// Attention logits before normalization.
    pub(crate) logits: DenseTensor,
    /// Weights actually used in the joint sum.
    pub(crate) weights: DenseTensor,
    /// `p[l] = M_l W_{z_l}`, each `n_l x d_z`.
    pub(crate) p: [DenseTensor; 3],
}

impl ForwardCache {
    /// Attention logits before normalization.
    pub fn logits(&self) -> &DenseTensor {
        &self.logits
    }
}

fn check(params: &LttdParams, inputs: &ModalityTriple, cfg: &LttdConfig) -> Result<()> {
    cfg.validate()?;
    inputs.check(cfg)?;
    params.config_check(cfg)
}

pub(crate) fn project_slices(params: &LttdParams, inputs: &ModalityTriple) -> Result<Vec<[DenseTensor; 3]>> {
    let ms = inputs.modalities();
    (0..params.cores.len())
        .map(|r| {
            Ok([matmul(ms[0], &params.w[0][r])?, matmul(ms[1], &params.w[1][r])?, matmul(ms[2], &params.w[2][r])?])
        })
        .collect()
}

/// One slice's contribution `[[G; Q1, Q2, Q3]]`, accumulated into `out`
/// (`n1 x n2 x n3`, row-major). Contracts mode 3, then 2, then 1.
pub(crate) fn accumulate_slice(core: &DenseTensor, q: &[DenseTensor; 3], out: &mut [f64]) {
    let [s1, s2, s3] = [core.dims()[0], core.dims()[1], core.dims()[2]];
    let [n1, n2, n3] = [q[0].rows(), q[1].rows(), q[2].rows()];
    let g = core.data();
    let (q1, q2, q3) = (q[0].data(), q[1].data(), q[2].data());

    // a[α, β, k] = Σ_γ G[α, β, γ] Q3[k, γ]
    let mut a = vec![0.0; s1 * s2 * n3];
    for ab in 0..s1 * s2 {
        for k in 0..n3 {
            let mut acc = 0.0;
            for c in 0..s3 {
                acc += g[ab * s3 + c] * q3[k * s3 + c];
            }
            a[ab * n3 + k] = acc;
        }
    }
    // b[α, j, k] = Σ_β a[α, β, k] Q2[j, β]
    let mut b = vec![0.0; s1 * n2 * n3];
    for al in 0..s1 {
        for j in 0..n2 {
            for be in 0..s2 {
                let w = q2[j * s2 + be];
                let src = &a[(al * s2 + be) * n3..(al * s2 + be + 1) * n3];
                let dst = &mut b[(al * n2 + j) * n3..(al * n2 + j + 1) * n3];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    // out[i, j, k] += Σ_α Q1[i, α] b[α, j, k]
    for i in 0..n1 {
        for al in 0..s1 {
            let w = q1[i * s1 + al];
            let src = &b[al * n2 * n3..(al + 1) * n2 * n3];
            let dst = &mut out[i * n2 * n3..(i + 1) * n2 * n3];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
}

fn logits_from_slices(params: &LttdParams, q: &[[DenseTensor; 3]], n: [usize; 3]) -> Result<DenseTensor> {
    let mut out = vec![0.0; n[0] * n[1] * n[2]];
    for (core, qr) in params.cores.iter().zip(q) {
        accumulate_slice(core, qr, &mut out);
    }
    Ok(DenseTensor::new(n.to_vec(), out)?)
}

fn normalized(logits: &DenseTensor, norm: AttentionNorm) -> DenseTensor {
    let mut w = logits.clone();
    if norm == AttentionNorm::Softmax {
        softmax_in_place(w.data_mut());
    }
    w
}

/// `Σ_r [[G_r; M1 W_{1,r}, M2 W_{2,r}, M3 W_{3,r}]]`, optionally softmax
/// normalized over all triplets. The attention tensor itself is never formed.
pub fn attention_map(params: &LttdParams, inputs: &ModalityTriple, cfg: &LttdConfig) -> Result<AttentionMap> {
    check(params, inputs, cfg)?;
    let q = project_slices(params, inputs)?;
    let logits = logits_from_slices(params, &q, cfg.n)?;
    Ok(AttentionMap(normalized(&logits, cfg.normalize)))
}

pub(crate) fn projections(params: &LttdParams, inputs: &ModalityTriple) -> Result<[DenseTensor; 3]> {
    let ms = inputs.modalities();
    Ok([matmul(ms[0], &params.wz[0])?, matmul(ms[1], &params.wz[1])?, matmul(ms[2], &params.wz[2])?])
}

/// `z = Σ_{ijk} M_ijk (P1[i] ⊙ P2[j] ⊙ P3[k])` with `P_l = M_l W_{z_l}`.
pub(crate) fn joint_from_projections(weights: &DenseTensor, p: &[DenseTensor; 3]) -> Result<DenseTensor> {
    let [n1, n2, n3] = [p[0].rows(), p[1].rows(), p[2].rows()];
    if weights.dims() != [n1, n2, n3] {
        return shape_err(format!("attention {} vs projections [{n1}x{n2}x{n3}]", weights.shape()));
    }
    let dz = p[0].cols();
    if p.iter().any(|x| x.cols() != dz) {
        return shape_err("projection widths differ");
    }
    let m = weights.data();
    let (p1, p2, p3) = (p[0].data(), p[1].data(), p[2].data());
    let mut z = vec![0.0; dz];
    let mut inner = vec![0.0; dz];
    let mut mid = vec![0.0; dz];
    for i in 0..n1 {
        mid.fill(0.0);
        for j in 0..n2 {
            inner.fill(0.0);
            for k in 0..n3 {
                let w = m[(i * n2 + j) * n3 + k];
                for (acc, &v) in inner.iter_mut().zip(&p3[k * dz..(k + 1) * dz]) {
                    *acc += w * v;
                }
            }
            for c in 0..dz {
                mid[c] += inner[c] * p2[j * dz + c];
            }
        }
        for c in 0..dz {
            z[c] += mid[c] * p1[i * dz + c];
        }
    }
    Ok(DenseTensor::vector(z)?)
}

/// Attention-weighted sum of per-triplet Hadamard products of the joint
/// projections.
pub fn joint_representation(
    params: &LttdParams,
    attention: &AttentionMap,
    inputs: &ModalityTriple,
) -> Result<JointRepresentation> {
    for (l, m) in inputs.modalities().into_iter().enumerate() {
        if m.cols() != params.wz[l].rows() {
            return shape_err(format!("modality {} width {} vs projection {}", l + 1, m.cols(), params.wz[l].shape()));
        }
    }
    let p = projections(params, inputs)?;
    Ok(JointRepresentation(joint_from_projections(attention.tensor(), &p)?))
}

pub fn forward_with_cache(
    params: &LttdParams,
    inputs: &ModalityTriple,
    cfg: &LttdConfig,
) -> Result<(AttentionMap, JointRepresentation, ForwardCache)> {
    check(params, inputs, cfg)?;
    let q = project_slices(params, inputs)?;
    let logits = logits_from_slices(params, &q, cfg.n)?;
    let weights = normalized(&logits, cfg.normalize);
    let p = projections(params, inputs)?;
    let z = joint_from_projections(&weights, &p)?;
    let cache = ForwardCache { q, logits, weights: weights.clone(), p };
    Ok((AttentionMap(weights), JointRepresentation(z), cache))
}

/// Attention map followed by the joint representation.
pub fn forward(
    params: &LttdParams,
    inputs: &ModalityTriple,
    cfg: &LttdConfig,
) -> Result<(AttentionMap, JointRepresentation)> {
    let (map, z, _) = forward_with_cache(params, inputs, cfg)?;
    Ok((map, z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    fn cfg() -> LttdConfig {
        LttdConfig::new([2, 3, 2], [4, 2, 4], 2, 3)
    }

    fn inputs(cfg: &LttdConfig, seed: u64) -> ModalityTriple {
        let mk = |l: usize| {
            DenseTensor::from_fn(vec![cfg.n[l], cfg.d[l]], |ix| {
                ((seed as usize + 3 * l + 5 * ix[0] + 7 * ix[1]) % 11) as f64 / 5.0 - 1.0
            })
            .unwrap()
        };
        ModalityTriple::new(mk(0), mk(1), mk(2)).unwrap()
    }

    #[test]
    fn zero_inputs_give_zero_map_and_joint_in_raw_mode() {
        let cfg = cfg();
        let params = LttdParams::init(&cfg, 3).unwrap();
        let zero = ModalityTriple::zeros(&cfg).unwrap();
        let (map, z) = forward(&params, &zero, &cfg).unwrap();
        assert_eq!(map.tensor().max_abs(), 0.0);
        assert_eq!(z.0.max_abs(), 0.0);
    }

    #[test]
    fn zero_inputs_give_uniform_softmax_map() {
        let cfg = cfg().with_norm(AttentionNorm::Softmax);
        let params = LttdParams::init(&cfg, 3).unwrap();
        let map = attention_map(&params, &ModalityTriple::zeros(&cfg).unwrap(), &cfg).unwrap();
        let expected = 1.0 / 12.0;
        assert!(map.tensor().data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn zero_projections_give_zero_joint() {
        let cfg = cfg();
        let mut params = LttdParams::init(&cfg, 3).unwrap();
        for wz in &mut params.wz {
            wz.data_mut().fill(0.0);
        }
        let (map, z) = forward(&params, &inputs(&cfg, 1), &cfg).unwrap();
        assert!(map.tensor().max_abs() > 0.0);
        assert_eq!(z.0.max_abs(), 0.0);
    }

    #[test]
    fn single_triplet_joint_is_a_hadamard_product() {
        let cfg = LttdConfig::new([1, 1, 1], [2, 2, 2], 1, 2);
        let mut params = LttdParams::zeros(&cfg).unwrap();
        for wz in &mut params.wz {
            *wz = DenseTensor::identity(2).unwrap();
        }
        let inputs = ModalityTriple::new(
            DenseTensor::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            DenseTensor::from_rows(&[vec![3.0, 4.0]]).unwrap(),
            DenseTensor::from_rows(&[vec![5.0, 6.0]]).unwrap(),
        )
        .unwrap();
        let map = AttentionMap(DenseTensor::full(vec![1, 1, 1], 1.0).unwrap());
        let z = joint_representation(&params, &map, &inputs).unwrap();
        assert_eq!(z.values(), &[15.0, 48.0]);
        let zero = AttentionMap(DenseTensor::zeros(vec![1, 1, 1]).unwrap());
        assert_eq!(joint_representation(&params, &zero, &inputs).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let cfg = cfg();
        let params = LttdParams::init(&cfg, 3).unwrap();
        let other = LttdConfig::new([2, 3, 2], [4, 2, 2], 2, 3);
        assert!(attention_map(&params, &ModalityTriple::zeros(&other).unwrap(), &cfg).is_err());
        assert!(attention_map(&params, &inputs(&cfg, 2), &other).is_err());
        assert_eq!(params.num_params(), LttdParams::zeros(&cfg).unwrap().num_params());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = cfg().with_norm(AttentionNorm::Softmax);
        let params = LttdParams::init(&cfg, 9).unwrap();
        let x = inputs(&cfg, 4);
        let a = forward(&params, &x, &cfg).unwrap();
        let b = forward(&params, &x, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
