//! The learnable basis `B = (B_subj | B_obj)` and the coordinate split it induces.

use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BASIS_NAME: &str = "basis.B";

/// A `d × d` basis whose first `d − d_obj` columns span the subject subspace.
#[derive(Clone, Debug)]
pub struct Basis {
    pub id: ParamId,
    pub dim: usize,
    pub obj_dim: usize,
}

impl Basis {
    /// Random orthonormal initialization; the basis is exempt from weight decay.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        obj_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if obj_dim == 0 || obj_dim >= dim {
            return Err(Error::Config(alloc::format!(
                "object dimension {obj_dim} must lie in [1, {dim})"
            )));
        }
        let b = linalg::random_orthonormal(dim, dim, rng)?;
        let id = store.add(BASIS_NAME, b, false);
        Ok(Basis { id, dim, obj_dim })
    }

    pub fn subj_dim(&self) -> usize {
        self.dim - self.obj_dim
    }

    /// `(Z_subj, Z_obj) = (F·B_subj, F·B_obj)` on the tape.
    pub fn split(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<(Var, Var)> {
        let b = g.param(store, self.id);
        split_var(g, f, b, self.obj_dim)
    }

    /// `‖BBᵀ − I‖²_F` on the tape.
    pub fn orthonormal_loss(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let b = g.param(store, self.id);
        orthonormal_loss(g, b)
    }
}

pub fn split_var(g: &mut Graph, f: Var, b: Var, obj_dim: usize) -> Result<(Var, Var)> {
    let d = g.shape(b)[1];
    if obj_dim == 0 || obj_dim >= d {
        return Err(Error::dim("split", g.shape(b), &[obj_dim]));
    }
    let bs = g.slice(b, 1, 0, d - obj_dim)?;
    let bo = g.slice(b, 1, d - obj_dim, obj_dim)?;
    Ok((g.matmul(f, bs)?, g.matmul(f, bo)?))
}

/// `(F·B_subj, F·B_obj)` for plain matrices.
pub fn split(f: &Tensor, b: &Tensor, obj_dim: usize) -> Result<(Tensor, Tensor)> {
    let (d, d2) = b.dims2()?;
    if d != d2 || obj_dim == 0 || obj_dim >= d {
        return Err(Error::dim("split", b.shape(), &[obj_dim]));
    }
    if f.dims2()?.1 != d {
        return Err(Error::dim("split", f.shape(), b.shape()));
    }
    Ok((
        f.matmul(&b.columns(0, d - obj_dim)?)?,
        f.matmul(&b.columns(d - obj_dim, obj_dim)?)?,
    ))
}

pub fn orthonormal_loss(g: &mut Graph, b: Var) -> Result<Var> {
    let n = g.shape(b)[0];
    let bt = g.transpose(b)?;
    let bbt = g.matmul(b, bt)?;
    let eye = g.constant(Tensor::eye(n));
    let diff = g.sub(bbt, eye)?;
    Ok(g.frobenius_norm_sq(diff))
}

/// `‖BBᵀ − I‖²_F` for a plain matrix.
pub fn orthonormal_loss_value(b: &Tensor) -> Result<f64> {
    let e = linalg::orthonormality_error(b)?;
    Ok(e * e)
}

/// Coordinates `w` of `v` in the basis given by the columns of `B`, i.e. the
/// solution of `B·w = v`.
pub fn change_of_basis_coords(v: &[f64], b: &Tensor) -> Result<Vec<f64>> {
    let lu = linalg::well_conditioned_lu(b)?;
    if v.len() != lu.dim() {
        return Err(Error::dim("change_of_basis_coords", &[v.len()], b.shape()));
    }
    Ok(lu.solve(v))
}

/// Nearest orthonormal matrix in Frobenius norm (orthogonal polar factor).
pub fn project_to_orthonormal(b: &Tensor) -> Result<Tensor> {
    linalg::polar_orthogonal(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_basis_splits_columns() {
        let f = Tensor::matrix(2, 3, (0..6).map(f64::from).collect()).unwrap();
        let (zs, zo) = split(&f, &Tensor::eye(3), 2).unwrap();
        assert_eq!(zs.data(), &[0.0, 3.0]);
        assert_eq!(zo.data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn rotation_by_hand() {
        let b = Tensor::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        let f = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let (zs, zo) = split(&f, &b, 1).unwrap();
        assert_eq!((zs.item(), zo.item()), (0.0, -1.0));
    }

    #[test]
    fn loss_examples() {
        assert_eq!(orthonormal_loss_value(&Tensor::eye(4)).unwrap(), 0.0);
        let mut two = Tensor::eye(2);
        two.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let mut g = Graph::new();
        let b = g.constant(two);
        let l = orthonormal_loss(&mut g, b).unwrap();
        assert_eq!(g.value(l).item(), 18.0);
    }

    #[test]
    fn coords_identity_and_orthonormal() {
        let v = [0.3, -1.0, 2.0];
        assert_eq!(
            change_of_basis_coords(&v, &Tensor::eye(3)).unwrap(),
            v.to_vec()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = linalg::random_orthonormal(3, 3, &mut rng).unwrap();
        let w = change_of_basis_coords(&v, &q).unwrap();
        let btv = q
            .transpose()
            .unwrap()
            .matmul(&Tensor::matrix(3, 1, v.to_vec()).unwrap())
            .unwrap();
        for (a, b) in w.iter().zip(btv.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn singular_basis_is_numerical_error() {
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            change_of_basis_coords(&[1.0, 0.0], &b),
            Err(Error::Numerical(_))
        ));
        assert!(matches!(
            project_to_orthonormal(&b),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn basis_rejects_degenerate_partition() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Basis::new(&mut store, 4, 4, &mut rng).is_err());
        assert!(Basis::new(&mut store, 4, 0, &mut rng).is_err());
        let b = Basis::new(&mut store, 4, 3, &mut rng).unwrap();
        assert!(orthonormal_loss_value(store.value(b.id)).unwrap() < 1e-24);
    }
}
