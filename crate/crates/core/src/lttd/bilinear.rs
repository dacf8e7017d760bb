//! Two-modality special case of the block. Evaluating the joint vector as a
//! per-pair Hadamard sum and as a per-coordinate quadratic form through the
//! attention map gives the same result, which is what ties the block to
//! bilinear attention.

use super::{init_uniform, shape_err, JointRepresentation, LttdError, Result};
use crate::params::ParamSet;
use crate::tensor::{matmul, DenseTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearParams {
    /// `w[l][r]` is `d_l x (d_l / R)`.
    pub w: [Vec<DenseTensor>; 2],
    /// Each core is `(d1/R) x (d2/R)`.
    pub cores: Vec<DenseTensor>,
    /// `wz[l]` is `d_l x d_z`.
    pub wz: [DenseTensor; 2],
}

impl BilinearParams {
    pub fn zeros(d: [usize; 2], r_slices: usize, d_z: usize) -> Result<Self> {
        if r_slices == 0 || d.iter().any(|&x| x == 0 || x % r_slices != 0) || d_z == 0 {
            return Err(LttdError::Config(format!("r_slices = {r_slices} must divide dims {d:?}; d_z = {d_z}")));
        }
        let s = d.map(|x| x / r_slices);
        let factor = |l: usize| -> Result<Vec<DenseTensor>> {
            (0..r_slices).map(|_| Ok(DenseTensor::zeros(vec![d[l], s[l]])?)).collect()
        };
        Ok(Self {
            w: [factor(0)?, factor(1)?],
            cores: (0..r_slices).map(|_| DenseTensor::zeros(s.to_vec())).collect::<std::result::Result<_, _>>()?,
            wz: [DenseTensor::zeros(vec![d[0], d_z])?, DenseTensor::zeros(vec![d[1], d_z])?],
        })
    }

    pub fn init(d: [usize; 2], r_slices: usize, d_z: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(d, r_slices, d_z)?;
        p.visit_mut(&mut |name, t| init_uniform(t, seed, name));
        Ok(p)
    }

    fn check(&self, m1: &DenseTensor, m2: &DenseTensor) -> Result<()> {
        if !m1.is_matrix() || !m2.is_matrix() {
            return shape_err("bilinear inputs must be matrices");
        }
        if m1.cols() != self.wz[0].rows() || m2.cols() != self.wz[1].rows() {
            return shape_err(format!(
                "inputs {} and {} do not match projections {} and {}",
                m1.shape(),
                m2.shape(),
                self.wz[0].shape(),
                self.wz[1].shape()
            ));
        }
        Ok(())
    }
}

impl ParamSet for BilinearParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a DenseTensor)) {
        for (l, ws) in self.w.iter().enumerate() {
            for (r, t) in ws.iter().enumerate() {
                f(&format!("bw{}.{r}", l + 1), t);
            }
        }
        for (r, t) in self.cores.iter().enumerate() {
            f(&format!("bcore.{r}"), t);
        }
        for (l, t) in self.wz.iter().enumerate() {
            f(&format!("bwz{}", l + 1), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut DenseTensor)) {
        for (l, ws) in self.w.iter_mut().enumerate() {
            for (r, t) in ws.iter_mut().enumerate() {
                f(&format!("bw{}.{r}", l + 1), t);
            }
        }
        for (r, t) in self.cores.iter_mut().enumerate() {
            f(&format!("bcore.{r}"), t);
        }
        for (l, t) in self.wz.iter_mut().enumerate() {
            f(&format!("bwz{}", l + 1), t);
        }
    }
}

/// `Σ_r [[G_r; M1 W_{1,r}, M2 W_{2,r}]]`, an `n1 x n2` map.
pub fn bilinear_attention_map(params: &BilinearParams, m1: &DenseTensor, m2: &DenseTensor) -> Result<DenseTensor> {
    params.check(m1, m2)?;
    let (n1, n2) = (m1.rows(), m2.rows());
    let mut out = DenseTensor::zeros(vec![n1, n2])?;
    for (r, core) in params.cores.iter().enumerate() {
        let q1 = matmul(m1, &params.w[0][r])?;
        let q2 = matmul(m2, &params.w[1][r])?;
        // Q1 G Q2^T
        let slice = matmul(&matmul(&q1, core)?, &q2.transpose()?)?;
        out = out.add(&slice)?;
    }
    Ok(out)
}

fn check_map(map: &DenseTensor, m1: &DenseTensor, m2: &DenseTensor) -> Result<()> {
    if map.dims() != [m1.rows(), m2.rows()] {
        return shape_err(format!("map {} vs channels [{}x{}]", map.shape(), m1.rows(), m2.rows()));
    }
    Ok(())
}

/// `z = Σ_i Σ_j M_ij (P1[i] ⊙ P2[j])`, summed pair by pair.
pub fn bilinear_joint_sum(
    params: &BilinearParams,
    map: &DenseTensor,
    m1: &DenseTensor,
    m2: &DenseTensor,
) -> Result<JointRepresentation> {
    params.check(m1, m2)?;
    check_map(map, m1, m2)?;
    let p1 = matmul(m1, &params.wz[0])?;
    let p2 = matmul(m2, &params.wz[1])?;
    let dz = p1.cols();
    let mut z = vec![0.0; dz];
    for i in 0..m1.rows() {
        for j in 0..m2.rows() {
            let w = map.get(&[i, j]);
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += w * p1.row(i)[c] * p2.row(j)[c];
            }
        }
    }
    Ok(JointRepresentation(DenseTensor::vector(z)?))
}

/// `z_k = P1[:, k]^T M P2[:, k]`: one quadratic form per output coordinate.
pub fn bilinear_joint_matrix(
    params: &BilinearParams,
    map: &DenseTensor,
    m1: &DenseTensor,
    m2: &DenseTensor,
) -> Result<JointRepresentation> {
    params.check(m1, m2)?;
    check_map(map, m1, m2)?;
    let p1 = matmul(m1, &params.wz[0])?;
    let p2 = matmul(m2, &params.wz[1])?;
    let mp2 = matmul(map, &p2)?;
    let dz = p1.cols();
    let z = (0..dz).map(|k| (0..p1.rows()).map(|i| p1.row(i)[k] * mp2.row(i)[k]).sum()).collect();
    Ok(JointRepresentation(DenseTensor::vector(z)?))
}
