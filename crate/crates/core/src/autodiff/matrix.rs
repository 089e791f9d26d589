//! Matrix products, row/column rearrangement, and broadcasts over rows.
//!
//! Token sequences are stored as `(rows, channels)` matrices. Window
//! partitioning, cyclic shifts, and patch regrouping are all expressed as row
//! gathers with precomputed index tables, which keeps their adjoints simple
//! scatter-adds.

use super::{Scalar, Tape, Var};
use ndarray::{Array2, ArrayD, Axis, Ix2};
use std::sync::Arc;

fn as2<T: Scalar>(x: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    x.view()
        .into_dimensionality::<Ix2>()
        .expect("operation requires a 2-d array")
}

impl<T: Scalar> Tape<T> {
    /// Matrix product of `(m, k)` and `(k, n)` nodes.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let va = as2(&inner.values[a.0]);
            let vb = as2(&inner.values[b.0]);
            assert_eq!(va.ncols(), vb.nrows(), "matmul inner dimension mismatch");
            va.dot(&vb).into_dyn()
        };
        let (ai, bi) = (a.0, b.0);
        self.push(
            value,
            Box::new(move |values, g, sink| {
                let g2 = as2(g);
                let va = as2(&values[ai]);
                let vb = as2(&values[bi]);
                sink(ai, g2.dot(&vb.t()).into_dyn());
                sink(bi, va.t().dot(&g2).into_dyn());
            }),
        )
    }

    /// Adds a length-`n` vector to every row of an `(m, n)` node.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let va = as2(&inner.values[a.0]);
            let vr = &inner.values[row.0];
            assert_eq!(vr.ndim(), 1, "add_row expects a 1-d row vector");
            assert_eq!(va.ncols(), vr.len(), "add_row width mismatch");
            let r = vr.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            (&va + &r).into_dyn()
        };
        let (ai, ri) = (a.0, row.0);
        self.push(
            value,
            Box::new(move |_, g, sink| {
                let g2 = as2(g);
                sink(ai, g.clone());
                sink(ri, g2.sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Multiplies every row of an `(m, n)` node by a length-`n` vector.
    pub fn mul_row(&self, a: Var, row: Var) -> Var {
        let value = {
            let inner = self.inner.borrow();
            let va = as2(&inner.values[a.0]);
            let vr = &inner.values[row.0];
            assert_eq!(vr.ndim(), 1, "mul_row expects a 1-d row vector");
            assert_eq!(va.ncols(), vr.len(), "mul_row width mismatch");
            let r = vr.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            (&va * &r).into_dyn()
        };
        let (ai, ri) = (a.0, row.0);
        self.push(
            value,
            Box::new(move |values, g, sink| {
                let g2 = as2(g);
                let va = as2(&values[ai]);
                let vr = values[ri]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap();
                sink(ai, (&g2 * &vr).into_dyn());
                sink(ri, (&g2 * &va).sum_axis(Axis(0)).into_dyn());
            }),
        )
    }

    /// Selects rows by index: `out[i] = a[idx[i]]`.
    ///
    /// Indices may repeat; the adjoint scatter-adds into the source rows.
    pub fn gather_rows(&self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let (value, src_rows) = {
            let inner = self.inner.borrow();
            let va = as2(&inner.values[a.0]);
            let mut out = Array2::<T>::zeros((idx.len(), va.ncols()));
            for (o, &i) in idx.iter().enumerate() {
                out.row_mut(o).assign(&va.row(i));
            }
            (out.into_dyn(), va.nrows())
        };
        let ai = a.0;
        let idx_b = Arc::clone(&idx);
        self.push(
            value,
            Box::new(move |_, g, sink| {
                let g2 = as2(g);
                let mut da = Array2::<T>::zeros((src_rows, g2.ncols()));
                for (o, &i) in idx_b.iter().enumerate() {
                    let mut dst = da.row_mut(i);
                    dst += &g2.row(o);
                }
                sink(ai, da.into_dyn());
            }),
        )
    }

    /// Stacks 2-d nodes vertically (all must share a column count).
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (value, row_counts) = {
            let inner = self.inner.borrow();
            let views: Vec<_> = parts.iter().map(|p| as2(&inner.values[p.0])).collect();
            let rows: Vec<usize> = views.iter().map(|v| v.nrows()).collect();
            let cat = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
            (cat.into_dyn(), rows)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            Box::new(move |_, g, sink| {
                let g2 = as2(g);
                let mut start = 0;
                for (part, &rows) in ids.iter().zip(&row_counts) {
                    let slice = g2.slice(ndarray::s![start..start + rows, ..]);
                    sink(*part, slice.to_owned().into_dyn());
                    start += rows;
                }
            }),
        )
    }

    /// Stacks 2-d nodes horizontally (all must share a row count).
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (value, col_counts) = {
            let inner = self.inner.borrow();
            let views: Vec<_> = parts.iter().map(|p| as2(&inner.values[p.0])).collect();
            let cols: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
            let cat = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
            (cat.into_dyn(), cols)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            value,
            Box::new(move |_, g, sink| {
                let g2 = as2(g);
                let mut start = 0;
                for (part, &cols) in ids.iter().zip(&col_counts) {
                    let slice = g2.slice(ndarray::s![.., start..start + cols]);
                    sink(*part, slice.to_owned().into_dyn());
                    start += cols;
                }
            }),
        )
    }

    /// Extracts columns `start..end` of a 2-d node.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let (value, total_cols) = {
            let inner = self.inner.borrow();
            let va = as2(&inner.values[a.0]);
            assert!(start < end && end <= va.ncols(), "slice_cols out of range");
            (
                va.slice(ndarray::s![.., start..end]).to_owned().into_dyn(),
                va.ncols(),
            )
        };
        let ai = a.0;
        self.push(
            value,
            Box::new(move |_, g, sink| {
                let g2 = as2(g);
                let mut da = Array2::<T>::zeros((g2.nrows(), total_cols));
                da.slice_mut(ndarray::s![.., start..end]).assign(&g2);
                sink(ai, da.into_dyn());
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{check_gradients, rand_array};
    use super::*;

    #[test]
    fn matmul_matches_manual_product() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.leaf(ndarray::arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = tape.matmul(a, b);
        let v = tape.value_owned(c);
        let expect = ndarray::arr2(&[[19.0, 22.0], [43.0, 50.0]]).into_dyn();
        assert_eq!(v, expect);
    }

    #[test]
    fn matmul_gradients_match_central_differences() {
        let a = rand_array(&[3, 4], 1, -1.0, 1.0);
        let b = rand_array(&[4, 2], 2, -1.0, 1.0);
        let err = check_gradients(&[a, b], 1e-6, |t, v| {
            let c = t.matmul(v[0], v[1]);
            let c = t.square(c);
            t.mean(c)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn row_broadcast_gradients_match_central_differences() {
        let a = rand_array(&[4, 3], 3, -1.0, 1.0);
        let r = rand_array(&[3], 4, 0.5, 1.5);
        let err = check_gradients(&[a, r], 1e-6, |t, v| {
            let x = t.add_row(v[0], v[1]);
            let y = t.mul_row(x, v[1]);
            let y = t.square(y);
            t.sum(y)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ndarray::arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).into_dyn());
        let idx = Arc::new(vec![2usize, 0, 2]);
        let g = tape.gather_rows(a, idx);
        let v = tape.value_owned(g);
        let expect = ndarray::arr2(&[[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]]).into_dyn();
        assert_eq!(v, expect);

        // Row 2 is used twice, so its gradient accumulates twice.
        let s = tape.sum(g);
        let grads = tape.backward(s);
        let da = grads.get(a).unwrap();
        let expect = ndarray::arr2(&[[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]).into_dyn();
        assert_eq!(da, &expect);
    }

    #[test]
    fn gather_rows_gradient_matches_central_differences() {
        let a = rand_array(&[5, 3], 5, -1.0, 1.0);
        let idx = Arc::new(vec![4usize, 1, 1, 0, 3, 2, 4]);
        let err = check_gradients(&[a], 1e-6, move |t, v| {
            let g = t.gather_rows(v[0], Arc::clone(&idx));
            let g = t.square(g);
            t.sum(g)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn concat_and_slice_roundtrip_gradients() {
        let a = rand_array(&[2, 3], 6, -1.0, 1.0);
        let b = rand_array(&[2, 2], 7, -1.0, 1.0);
        let c = rand_array(&[3, 5], 8, -1.0, 1.0);
        let err = check_gradients(&[a, b, c], 1e-6, |t, v| {
            let wide = t.concat_cols(&[v[0], v[1]]); // (2, 5)
            let tall = t.concat_rows(&[wide, v[2]]); // (5, 5)
            let mid = t.slice_cols(tall, 1, 4); // (5, 3)
            let sq = t.square(mid);
            t.sum(sq)
        });
        assert!(err < 1e-7, "max relative error {err}");
    }

    #[test]
    fn slice_cols_values() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(ndarray::arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn());
        let s = tape.slice_cols(a, 1, 3);
        let expect = ndarray::arr2(&[[2.0, 3.0], [5.0, 6.0]]).into_dyn();
        assert_eq!(tape.value_owned(s), expect);
    }
}
