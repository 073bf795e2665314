//! Forward kernels on plain arrays. The tape and the eager backend both
//! call into these; the tape adds the matching reverse rules.

use rand::Rng;

use crate::array::{Array, Scalar};
use crate::error::{invalid, Result, TensorError};

fn matrix_dims<T: Scalar>(op: &'static str, a: &Array<T>) -> Result<(usize, usize)> {
    match *a.shape() {
        [m, n] => Ok((m, n)),
        _ => Err(invalid(op, format!("expected a matrix, got shape {:?}", a.shape()))),
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Array<T>, b: &Array<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// General product with optional transposition of either operand.
pub fn gemm<T: Scalar>(a: &Array<T>, trans_a: bool, b: &Array<T>, trans_b: bool) -> Result<Array<T>> {
    let (ar, ac) = matrix_dims("matmul", a)?;
    let (br, bc) = matrix_dims("matmul", b)?;
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = Array::zeros(&[m, n]);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    // SAFETY: extents and strides were derived from the operand shapes and
    // `out` is a fresh buffer of m*n elements.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

pub fn matmul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    gemm(a, false, b, false)
}

pub fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Array<T>,
    b: &Array<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Array<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape(), data)
}

pub fn add<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn add_assign<T: Scalar>(a: &mut Array<T>, b: &Array<T>) -> Result<()> {
    same_shape("add_assign", a, b)?;
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

/// Adds a bias vector to every row of a matrix (the one broadcast the
/// affine layers need).
pub fn add_bias<T: Scalar>(a: &Array<T>, bias: &Array<T>) -> Result<Array<T>> {
    let (_, last) = a.outer_and_last();
    if bias.len() != last || bias.rank() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "add_bias",
            lhs: a.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let mut out = a.clone();
    if last > 0 {
        for row in out.data_mut().chunks_mut(last) {
            for (x, &b) in row.iter_mut().zip(bias.data()) {
                *x += b;
            }
        }
    }
    Ok(out)
}

/// Column sums, the reverse of [`add_bias`].
pub fn sum_rows<T: Scalar>(a: &Array<T>) -> Array<T> {
    let (_, last) = a.outer_and_last();
    let mut out = Array::zeros(&[last]);
    if last > 0 {
        for row in a.data().chunks(last) {
            for (o, &x) in out.data_mut().iter_mut().zip(row) {
                *o += x;
            }
        }
    }
    out
}

pub fn sigmoid<T: Scalar>(a: &Array<T>) -> Array<T> {
    a.map(|x| {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    })
}

pub fn tanh<T: Scalar>(a: &Array<T>) -> Array<T> {
    a.map(T::tanh)
}

pub fn relu<T: Scalar>(a: &Array<T>) -> Array<T> {
    a.map(|x| if x > T::zero() { x } else { T::zero() })
}

fn row_logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

/// Log-sum-exp over the last axis; the result drops that axis.
pub fn logsumexp<T: Scalar>(a: &Array<T>) -> Result<Array<T>> {
    let (outer, last) = a.outer_and_last();
    if a.rank() == 0 || last == 0 {
        return Err(invalid("logsumexp", "empty last axis"));
    }
    let data = a.data().chunks(last).map(row_logsumexp).collect();
    let shape = &a.shape()[..a.rank() - 1];
    debug_assert_eq!(outer, shape.iter().product::<usize>());
    Array::new(shape, data)
}

pub fn log_softmax<T: Scalar>(a: &Array<T>) -> Result<Array<T>> {
    let (_, last) = a.outer_and_last();
    if a.rank() == 0 || last == 0 {
        return Err(invalid("log_softmax", "empty last axis"));
    }
    let mut out = a.clone();
    for row in out.data_mut().chunks_mut(last) {
        let lse = row_logsumexp(row);
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    Ok(out)
}

pub fn softmax<T: Scalar>(a: &Array<T>) -> Result<Array<T>> {
    Ok(log_softmax(a)?.map(T::exp))
}

/// Inverted-dropout mask: kept units are scaled by `1/(1-rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rate: f64, rng: &mut R) -> Result<Array<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid("dropout", format!("rate {rate} outside [0, 1)")));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Array::new(shape, data)
}

/// Concatenates matrices (or higher-rank arrays) along the last axis.
pub fn concat_last<T: Scalar>(parts: &[&Array<T>]) -> Result<Array<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    let (outer, _) = first.outer_and_last();
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() == 0 || &p.shape()[..p.rank() - 1] != lead {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(p.outer_and_last().1);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(outer * total);
    for r in 0..outer {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Array::new(&shape, data)
}

/// Columns `start..end` of the last axis.
pub fn slice_last<T: Scalar>(a: &Array<T>, start: usize, end: usize) -> Result<Array<T>> {
    let (outer, last) = a.outer_and_last();
    if a.rank() == 0 || start > end || end > last {
        return Err(invalid(
            "slice",
            format!("range {start}..{end} invalid for shape {:?}", a.shape()),
        ));
    }
    let mut data = Vec::with_capacity(outer * (end - start));
    for row in a.data().chunks(last.max(1)).take(outer) {
        data.extend_from_slice(&row[start..end]);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = end - start;
    Array::new(&shape, data)
}

/// Zero-pads (or validates) the leading axis to `len` rows.
pub fn pad_rows<T: Scalar>(a: &Array<T>, len: usize) -> Result<Array<T>> {
    let (rows, width) = a.rows_and_width();
    if a.rank() == 0 || len < rows {
        return Err(invalid(
            "pad_rows",
            format!("cannot pad {rows} rows to {len}"),
        ));
    }
    let mut data = a.data().to_vec();
    data.resize(len * width, T::zero());
    let mut shape = a.shape().to_vec();
    shape[0] = len;
    Array::new(&shape, data)
}

/// Geometry of an indexed read or write: `A[rows[i]]` or
/// `A[rows[i], cols[i]]`, each selecting a contiguous block.
pub(crate) struct IndexPlan {
    pub offsets: Vec<usize>,
    pub block: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn index_plan(
    op: &'static str,
    shape: &[usize],
    rows: &[usize],
    cols: Option<&[usize]>,
) -> Result<IndexPlan> {
    let check = |index: usize, extent: usize| {
        if index >= extent {
            Err(TensorError::OutOfBounds { op, index, extent })
        } else {
            Ok(())
        }
    };
    match cols {
        None => {
            let (&d0, rest) = shape
                .split_first()
                .ok_or_else(|| invalid(op, "cannot index a scalar"))?;
            let block: usize = rest.iter().product();
            let mut offsets = Vec::with_capacity(rows.len());
            for &r in rows {
                check(r, d0)?;
                offsets.push(r * block);
            }
            let mut out_shape = vec![rows.len()];
            out_shape.extend_from_slice(rest);
            Ok(IndexPlan {
                offsets,
                block,
                out_shape,
            })
        }
        Some(cols) => {
            if shape.len() < 2 {
                return Err(invalid(op, "row/column indexing needs rank >= 2"));
            }
            if cols.len() != rows.len() {
                return Err(invalid(
                    op,
                    format!("{} rows but {} columns", rows.len(), cols.len()),
                ));
            }
            let (d0, d1) = (shape[0], shape[1]);
            let rest = &shape[2..];
            let block: usize = rest.iter().product();
            let mut offsets = Vec::with_capacity(rows.len());
            for (&r, &c) in rows.iter().zip(cols) {
                check(r, d0)?;
                check(c, d1)?;
                offsets.push((r * d1 + c) * block);
            }
            let mut out_shape = vec![rows.len()];
            out_shape.extend_from_slice(rest);
            Ok(IndexPlan {
                offsets,
                block,
                out_shape,
            })
        }
    }
}

/// `out[i] = A[rows[i]]` or `A[rows[i], cols[i]]`.
pub fn select<T: Scalar>(a: &Array<T>, rows: &[usize], cols: Option<&[usize]>) -> Result<Array<T>> {
    let plan = index_plan("indexed_select", a.shape(), rows, cols)?;
    let mut data = Vec::with_capacity(plan.offsets.len() * plan.block);
    for &off in &plan.offsets {
        data.extend_from_slice(&a.data()[off..off + plan.block]);
    }
    Array::new(&plan.out_shape, data)
}

/// Replaces the selected slots of `a` with the rows of `v`, in place.
pub fn assign_in_place<T: Scalar>(
    a: &mut Array<T>,
    rows: &[usize],
    cols: Option<&[usize]>,
    v: &Array<T>,
) -> Result<()> {
    let plan = assign_plan(a.shape(), rows, cols, v)?;
    let data = a.data_mut();
    for (i, &off) in plan.offsets.iter().enumerate() {
        data[off..off + plan.block].copy_from_slice(&v.data()[i * plan.block..(i + 1) * plan.block]);
    }
    Ok(())
}

pub(crate) fn assign_plan<T: Scalar>(
    shape: &[usize],
    rows: &[usize],
    cols: Option<&[usize]>,
    v: &Array<T>,
) -> Result<IndexPlan> {
    let plan = index_plan("indexed_assign", shape, rows, cols)?;
    if v.shape() != plan.out_shape.as_slice() {
        return Err(TensorError::ShapeMismatch {
            op: "indexed_assign",
            lhs: plan.out_shape,
            rhs: v.shape().to_vec(),
        });
    }
    if rows.len() > 1 {
        let mut seen: Vec<usize> = plan.offsets.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            let i = plan.offsets.iter().position(|&o| o == w[0]).unwrap();
            return Err(TensorError::DuplicateIndex {
                row: rows[i],
                col: cols.map(|c| c[i]),
            });
        }
    }
    Ok(plan)
}

/// Adds the rows of `g` into the selected slots of `acc`.
pub(crate) fn scatter_add<T: Scalar>(acc: &mut Array<T>, plan: &IndexPlan, g: &Array<T>) {
    let data = acc.data_mut();
    for (i, &off) in plan.offsets.iter().enumerate() {
        for (x, &y) in data[off..off + plan.block]
            .iter_mut()
            .zip(&g.data()[i * plan.block..(i + 1) * plan.block])
        {
            *x += y;
        }
    }
}

pub fn sum<T: Scalar>(a: &Array<T>) -> Array<T> {
    Array::scalar(a.data().iter().copied().sum())
}

pub fn scale<T: Scalar>(a: &Array<T>, c: f64) -> Array<T> {
    let c = T::of(c);
    a.map(|x| x * c)
}
