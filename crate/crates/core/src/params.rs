//! Embedding tables, sparse gradient slices and plain SGD.
//!
//! Tables are initialized from a ChaCha8 stream (`rand_chacha::ChaCha8Rng`
//! seeded with `seed_from_u64`), which is counter based and reproduces
//! bit-for-bit across platforms.

use std::fs;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::{axpy, Dtype, Matrix, Real};
use crate::error::{contract, Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSME";
const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableRole {
    Input,
    Target,
}

/// Dense class-embedding table, `n_classes × n_embed`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedTable<T> {
    matrix: Matrix<T>,
    role: TableRole,
}

/// Initialization scale used when the caller has no preference.
pub fn default_scale(n_embed: usize) -> f64 {
    0.5 / n_embed as f64
}

/// Table with entries i.i.d. uniform on `[-scale, scale]`.
pub fn init_table<T: Real>(
    role: TableRole,
    n_classes: usize,
    n_embed: usize,
    seed: u64,
    scale: f64,
) -> Result<EmbedTable<T>> {
    if n_classes == 0 || n_embed == 0 {
        return Err(contract(format!(
            "embedding table needs at least one class and one dimension, got {n_classes}x{n_embed}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(contract(format!(
            "init scale must be positive, got {scale}"
        )));
    }
    let mut matrix = Matrix::try_zeros(n_classes, n_embed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in matrix.as_mut_slice() {
        *x = T::from_f64(rng.random_range(-scale..=scale));
    }
    Ok(EmbedTable { matrix, role })
}

impl<T: Real> EmbedTable<T> {
    pub fn from_matrix(role: TableRole, matrix: Matrix<T>) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(contract("embedding table cannot be empty"));
        }
        Ok(Self { matrix, role })
    }

    pub fn role(&self) -> TableRole {
        self.role
    }

    pub fn n_classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_embed(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix<T> {
        &mut self.matrix
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.matrix
    }

    /// `table -= lr * densify(g)`, touching only rows named in `g`.
    ///
    /// Duplicate indices are summed first and applied once.
    pub fn apply_sgd(&mut self, g: &SparseGrad<T>, lr: T) -> Result<()> {
        if g.dense_shape != self.matrix.shape() {
            return Err(Error::Shape {
                op: "apply_sgd",
                lhs: self.matrix.shape(),
                rhs: g.dense_shape,
            });
        }
        if !lr.is_finite() {
            return Err(contract(format!("learning rate must be finite, got {lr}")));
        }
        if let Some(&id) = g.indices.iter().find(|&&id| id >= self.n_classes()) {
            return Err(Error::Index {
                id,
                n: self.n_classes(),
            });
        }

        let mut order: Vec<usize> = (0..g.indices.len()).collect();
        order.sort_by_key(|&k| g.indices[k]);

        let mut acc = vec![T::zero(); self.n_embed()];
        let mut pos = 0;
        while pos < order.len() {
            let id = g.indices[order[pos]];
            acc.iter_mut().for_each(|x| *x = T::zero());
            while pos < order.len() && g.indices[order[pos]] == id {
                axpy(&mut acc, T::one(), g.rows.row(order[pos]));
                pos += 1;
            }
            axpy(self.matrix.row_mut(id), -lr, &acc);
        }
        Ok(())
    }

    /// Writes the `SSME` v1 checkpoint: magic, u32 version, u64 rows,
    /// u64 cols, u8 dtype code, then row-major little-endian values.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(
            CHECKPOINT_HEADER_LEN + self.matrix.as_slice().len() * T::DTYPE.size_of(),
        );
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n_classes() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n_embed() as u64).to_le_bytes());
        buf.push(T::DTYPE.code());
        for &x in self.matrix.as_slice() {
            x.put_le(&mut buf);
        }
        let io = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&buf).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, role: TableRole) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes, role)
    }

    fn decode(bytes: &[u8], role: TableRole) -> Result<Self> {
        if bytes.len() < CHECKPOINT_HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let dtype = Dtype::from_code(bytes[24])
            .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[24])))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {dtype} values, expected {}",
                T::DTYPE
            )));
        }
        let (rows, cols) = (
            usize::try_from(rows).map_err(|_| Error::Format("row count overflows".into()))?,
            usize::try_from(cols).map_err(|_| Error::Format("column count overflows".into()))?,
        );
        let payload = &bytes[CHECKPOINT_HEADER_LEN..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(dtype.size_of()));
        if expected != Some(payload.len()) {
            return Err(Error::Format(format!(
                "payload of {} bytes does not match {rows}x{cols} {dtype}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(dtype.size_of())
            .map(T::get_le)
            .collect();
        Self::from_matrix(role, Matrix::from_vec(rows, cols, data)?)
    }
}

impl<T> Deref for EmbedTable<T> {
    type Target = Matrix<T>;

    fn deref(&self) -> &Matrix<T> {
        &self.matrix
    }
}

/// Gradient as `(indices, rows)` slices of a dense `dense_shape` matrix.
/// Repeated indices are legal and accumulate additively.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseGrad<T> {
    indices: Vec<usize>,
    rows: Matrix<T>,
    dense_shape: (usize, usize),
}

impl<T: Real> SparseGrad<T> {
    pub fn new(indices: Vec<usize>, rows: Matrix<T>, dense_shape: (usize, usize)) -> Result<Self> {
        if rows.rows() != indices.len() {
            return Err(contract(format!(
                "{} gradient rows for {} indices",
                rows.rows(),
                indices.len()
            )));
        }
        if rows.cols() != dense_shape.1 && !indices.is_empty() {
            return Err(Error::Shape {
                op: "SparseGrad::new",
                lhs: rows.shape(),
                rhs: dense_shape,
            });
        }
        if let Some(&id) = indices.iter().find(|&&id| id >= dense_shape.0) {
            return Err(Error::Index {
                id,
                n: dense_shape.0,
            });
        }
        Ok(Self {
            indices,
            rows,
            dense_shape,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn rows(&self) -> &Matrix<T> {
        &self.rows
    }

    pub fn dense_shape(&self) -> (usize, usize) {
        self.dense_shape
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn rows_mut(&mut self) -> &mut Matrix<T> {
        &mut self.rows
    }

    pub fn densify(&self) -> Matrix<T> {
        let (n, d) = self.dense_shape;
        let mut out = Matrix::zeros(n, d);
        for (k, &id) in self.indices.iter().enumerate() {
            axpy(out.row_mut(id), T::one(), self.rows.row(k));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grad(indices: Vec<usize>, rows: &[&[f64]], shape: (usize, usize)) -> SparseGrad<f64> {
        let rows = if rows.is_empty() {
            Matrix::zeros(0, shape.1)
        } else {
            Matrix::from_rows(rows).unwrap()
        };
        SparseGrad::new(indices, rows, shape).unwrap()
    }

    fn table(rows: &[&[f64]]) -> EmbedTable<f64> {
        EmbedTable::from_matrix(TableRole::Target, Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_table::<f64>(TableRole::Input, 2, 3, 7, 0.5).unwrap();
        let b = init_table::<f64>(TableRole::Input, 2, 3, 7, 0.5).unwrap();
        assert_eq!(a, b);
        let c = init_table::<f64>(TableRole::Input, 2, 3, 8, 0.5).unwrap();
        assert_ne!(a.matrix(), c.matrix());
        for seed in 0..20 {
            let t = init_table::<f64>(TableRole::Input, 1, 1, seed, 0.5).unwrap();
            assert!((-0.5..=0.5).contains(&t.get(0, 0)));
        }
    }

    #[test]
    fn init_rejects_degenerate_requests() {
        assert!(init_table::<f64>(TableRole::Input, 0, 3, 1, 0.5).is_err());
        assert!(init_table::<f64>(TableRole::Input, 3, 0, 1, 0.5).is_err());
        assert!(init_table::<f64>(TableRole::Input, 3, 3, 1, 0.0).is_err());
    }

    #[test]
    fn densify_accumulates_duplicates() {
        let g = grad(vec![2, 0, 2], &[&[1.0], &[5.0], &[3.0]], (3, 1));
        assert_eq!(g.densify().as_slice(), &[5.0, 0.0, 4.0]);
        let g = grad(vec![], &[], (2, 2));
        assert_eq!(g.densify(), Matrix::zeros(2, 2));
        let g = grad(vec![0, 0], &[&[1.0, 1.0], &[-1.0, -1.0]], (1, 2));
        assert_eq!(g.densify().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn sparse_grad_validates() {
        let rows = Matrix::from_rows(&[[1.0f64]]).unwrap();
        assert!(matches!(
            SparseGrad::new(vec![3], rows.clone(), (3, 1)),
            Err(Error::Index { id: 3, n: 3 })
        ));
        assert!(SparseGrad::new(vec![0, 1], rows, (3, 1)).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut t = table(&[&[1.0]]);
        let g = grad(vec![0], &[&[2.0]], (1, 1));
        t.apply_sgd(&g, 0.0).unwrap();
        assert_eq!(t.get(0, 0), 1.0);
        t.apply_sgd(&g, 0.5).unwrap();
        assert_eq!(t.get(0, 0), 0.0);

        let mut t = table(&[&[5.0]]);
        t.apply_sgd(&grad(vec![0, 0], &[&[1.0], &[1.0]], (1, 1)), 1.0)
            .unwrap();
        assert_eq!(t.get(0, 0), 3.0);
    }

    #[test]
    fn sgd_rejects_mismatched_gradients() {
        let mut t = table(&[&[1.0], &[2.0]]);
        let g = grad(vec![0], &[&[2.0]], (1, 1));
        assert!(t.apply_sgd(&g, 0.1).is_err());
        let g = grad(vec![0], &[&[2.0]], (2, 1));
        assert!(t.apply_sgd(&g, f64::NAN).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.ssme");
        let t = init_table::<f32>(TableRole::Target, 5, 3, 11, 0.1).unwrap();
        t.save(&path).unwrap();

        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"SSME");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 5);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes[24], Dtype::F32.code());
        assert_eq!(bytes.len(), 25 + 5 * 3 * 4);
        assert_eq!(
            f32::from_le_bytes(bytes[25..29].try_into().unwrap()),
            t.get(0, 0)
        );

        let back = EmbedTable::<f32>::load(&path, TableRole::Target).unwrap();
        assert_eq!(back, t);
        assert!(matches!(
            EmbedTable::<f64>::load(&path, TableRole::Target),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            EmbedTable::<f32>::decode(&bytes[..bytes.len() - 1], TableRole::Target),
            Err(Error::Format(_))
        ));
    }

    fn sparse_case() -> impl Strategy<Value = (Matrix<f64>, SparseGrad<f64>, f64)> {
        (1usize..6, 1usize..4, 0usize..12).prop_flat_map(|(n, d, k)| {
            (
                prop::collection::vec(-2.0f64..2.0, n * d),
                prop::collection::vec(0..n, k),
                prop::collection::vec(-2.0f64..2.0, k * d),
                -1.0f64..1.0,
            )
                .prop_map(move |(t, idx, rows, lr)| {
                    let rows = Matrix::from_vec(idx.len(), d, rows).unwrap();
                    (
                        Matrix::from_vec(n, d, t).unwrap(),
                        SparseGrad::new(idx, rows, (n, d)).unwrap(),
                        lr,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn sgd_equals_dense_update((t, g, lr) in sparse_case()) {
            let mut table = EmbedTable::from_matrix(TableRole::Input, t.clone()).unwrap();
            table.apply_sgd(&g, lr).unwrap();
            let dense = g.densify();
            for r in 0..t.rows() {
                let touched = g.indices().contains(&r);
                for c in 0..t.cols() {
                    let expected = t.get(r, c) - lr * dense.get(r, c);
                    prop_assert!((table.get(r, c) - expected).abs() <= 1e-12);
                    if !touched {
                        prop_assert_eq!(table.get(r, c).to_bits(), t.get(r, c).to_bits());
                    }
                }
            }
        }

        #[test]
        fn densify_ignores_slice_order((_t, g, _lr) in sparse_case(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..g.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let indices = perm.iter().map(|&k| g.indices()[k]).collect();
            let rows: Vec<&[f64]> = perm.iter().map(|&k| g.rows().row(k)).collect();
            let rows = if rows.is_empty() {
                Matrix::zeros(0, g.dense_shape().1)
            } else {
                Matrix::from_rows(&rows).unwrap()
            };
            let shuffled = SparseGrad::new(indices, rows, g.dense_shape()).unwrap();
            prop_assert!(shuffled.densify().max_abs_diff(&g.densify()).unwrap() <= 1e-12);
        }
    }
}
