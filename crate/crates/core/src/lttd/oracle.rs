//! Literal, materialize-everything evaluations of the block. They are far
//! too expensive for training and exist to cross-check the factorized path
//! at small dimensions.

use super::{shape_err, AttentionMap, JointRepresentation, LttdError, LttdParams, ModalityTriple, Result};
use crate::tensor::{contract_leading, matmul, vectorize, DenseTensor};

/// Largest `d_z` for which the `d_z^4` joint core may be materialized.
pub const MAX_ORACLE_DZ: usize = 16;

/// `z = <T, vec(M1) ∘ vec(M2) ∘ vec(M3)>` with the full interaction tensor
/// `T` of shape `(n1 d1) x (n2 d2) x (n3 d3) x d_z`.
pub fn full_joint_oracle(t_full: &DenseTensor, inputs: &ModalityTriple) -> Result<JointRepresentation> {
    if t_full.ndim() != 4 {
        return shape_err(format!("full tensor must have 4 modes, got {}", t_full.shape()));
    }
    let v1 = vectorize(&inputs.m1)?;
    let v2 = vectorize(&inputs.m2)?;
    let v3 = vectorize(&inputs.m3)?;
    Ok(JointRepresentation(contract_leading(t_full, &[&v1, &v2, &v3])?))
}

/// Joint vector of a single channel triplet against `T_sc` (`d1 x d2 x d3 x d_z`).
pub fn triplet_joint(
    t_sc: &DenseTensor,
    m1i: &DenseTensor,
    m2j: &DenseTensor,
    m3k: &DenseTensor,
) -> Result<JointRepresentation> {
    if t_sc.ndim() != 4 {
        return shape_err(format!("triplet tensor must have 4 modes, got {}", t_sc.shape()));
    }
    Ok(JointRepresentation(contract_leading(t_sc, &[m1i, m2j, m3k])?))
}

fn row_vec(m: &DenseTensor, i: usize) -> Result<DenseTensor> {
    Ok(DenseTensor::vector(m.row(i).to_vec())?)
}

fn check_attention(attention: &AttentionMap, inputs: &ModalityTriple) -> Result<()> {
    let n = [inputs.m1.rows(), inputs.m2.rows(), inputs.m3.rows()];
    if attention.tensor().dims() != n {
        return shape_err(format!("attention {} vs channel counts {n:?}", attention.tensor().shape()));
    }
    Ok(())
}

/// Attention-weighted sum of [`triplet_joint`] over every triplet.
pub fn unitary_joint_oracle(
    t_sc: &DenseTensor,
    attention: &AttentionMap,
    inputs: &ModalityTriple,
) -> Result<JointRepresentation> {
    check_attention(attention, inputs)?;
    let d_z = *t_sc.dims().last().unwrap_or(&0);
    let mut z = vec![0.0; d_z];
    for i in 0..inputs.m1.rows() {
        let a = row_vec(&inputs.m1, i)?;
        for j in 0..inputs.m2.rows() {
            let b = row_vec(&inputs.m2, j)?;
            for k in 0..inputs.m3.rows() {
                let c = row_vec(&inputs.m3, k)?;
                let w = attention.tensor().get(&[i, j, k]);
                let zp = triplet_joint(t_sc, &a, &b, &c)?;
                for (acc, v) in z.iter_mut().zip(zp.values()) {
                    *acc += w * v;
                }
            }
        }
    }
    Ok(JointRepresentation(DenseTensor::vector(z)?))
}

/// Materializes `T_M = Σ_r [[G_r; W_{1,r}, W_{2,r}, W_{3,r}]]`, `d1 x d2 x d3`.
pub fn reconstruct_attention_tensor(params: &LttdParams) -> Result<DenseTensor> {
    let d = [params.wz[0].rows(), params.wz[1].rows(), params.wz[2].rows()];
    let mut out = DenseTensor::zeros(d.to_vec())?;
    for (r, core) in params.cores.iter().enumerate() {
        let [w1, w2, w3] = [&params.w[0][r], &params.w[1][r], &params.w[2][r]];
        let s = core.dims();
        for a in 0..d[0] {
            for b in 0..d[1] {
                for c in 0..d[2] {
                    let mut acc = 0.0;
                    for al in 0..s[0] {
                        for be in 0..s[1] {
                            for ga in 0..s[2] {
                                acc += core.get(&[al, be, ga]) * w1.get(&[a, al]) * w2.get(&[b, be]) * w3.get(&[c, ga]);
                            }
                        }
                    }
                    let prev = out.get(&[a, b, c]);
                    out.set(&[a, b, c], prev + acc);
                }
            }
        }
    }
    Ok(out)
}

/// Raw attention from a materialized `T_M`: each triplet weight is
/// `<T_M, m1_i ∘ m2_j ∘ m3_k>`.
pub fn attention_from_tensor(t_m: &DenseTensor, inputs: &ModalityTriple) -> Result<AttentionMap> {
    if t_m.ndim() != 3 {
        return shape_err(format!("attention tensor must have 3 modes, got {}", t_m.shape()));
    }
    let n = [inputs.m1.rows(), inputs.m2.rows(), inputs.m3.rows()];
    let mut out = DenseTensor::zeros(n.to_vec())?;
    for i in 0..n[0] {
        let a = row_vec(&inputs.m1, i)?;
        for j in 0..n[1] {
            let b = row_vec(&inputs.m2, j)?;
            for k in 0..n[2] {
                let c = row_vec(&inputs.m3, k)?;
                let s = contract_leading(t_m, &[&a, &b, &c])?;
                out.set(&[i, j, k], s.data()[0]);
            }
        }
    }
    Ok(AttentionMap(out))
}

/// The `d_z x d_z x d_z x d_z` tensor with ones on its superdiagonal.
pub fn superdiagonal(d_z: usize) -> Result<DenseTensor> {
    if d_z > MAX_ORACLE_DZ {
        return Err(LttdError::Config(format!("d_z = {d_z} exceeds oracle limit {MAX_ORACLE_DZ}")));
    }
    Ok(DenseTensor::from_fn(vec![d_z; 4], |ix| if ix.iter().all(|&x| x == ix[0]) { 1.0 } else { 0.0 })?)
}

/// Literal triplet sum against an explicit joint core `G_sc`
/// (`d_z x d_z x d_z x d_z`, last mode is the output).
pub fn joint_from_attention_oracle(
    params: &LttdParams,
    g_sc: &DenseTensor,
    attention: &AttentionMap,
    inputs: &ModalityTriple,
) -> Result<JointRepresentation> {
    let d_z = params.wz[0].cols();
    if d_z > MAX_ORACLE_DZ {
        return Err(LttdError::Config(format!("d_z = {d_z} exceeds oracle limit {MAX_ORACLE_DZ}")));
    }
    if g_sc.dims() != [d_z; 4] {
        return shape_err(format!("joint core {} must be [{d_z}; 4]", g_sc.shape()));
    }
    check_attention(attention, inputs)?;
    let p1 = matmul(&inputs.m1, &params.wz[0])?;
    let p2 = matmul(&inputs.m2, &params.wz[1])?;
    let p3 = matmul(&inputs.m3, &params.wz[2])?;
    let mut z = vec![0.0; d_z];
    for i in 0..p1.rows() {
        let a = row_vec(&p1, i)?;
        for j in 0..p2.rows() {
            let b = row_vec(&p2, j)?;
            for k in 0..p3.rows() {
                let c = row_vec(&p3, k)?;
                let w = attention.tensor().get(&[i, j, k]);
                let zp = contract_leading(g_sc, &[&a, &b, &c])?;
                for (acc, v) in z.iter_mut().zip(zp.data()) {
                    *acc += w * v;
                }
            }
        }
    }
    Ok(JointRepresentation(DenseTensor::vector(z)?))
}
