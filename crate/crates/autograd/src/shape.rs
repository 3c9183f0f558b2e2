//! Shape arithmetic and the broadcast rule.
//!
//! Broadcasting aligns shapes at their trailing axes. Walking from the last
//! axis backwards, two extents are compatible when they are equal or when one
//! of them is 1; a missing leading axis behaves like an extent of 1. A rank-0
//! tensor therefore broadcasts against anything.

use crate::error::{Result, TensorError};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides of a contiguous tensor.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in out.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    out
}

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_end(a, rank - 1 - i);
        let db = dim_from_end(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Whether `from` can be broadcast up to `to` without changing `to`.
pub fn broadcasts_to(from: &[usize], to: &[usize]) -> bool {
    if from.len() > to.len() {
        return false;
    }
    from.iter()
        .rev()
        .zip(to.iter().rev())
        .all(|(&f, &t)| f == t || f == 1)
}

fn dim_from_end(shape: &[usize], from_end: usize) -> usize {
    if from_end < shape.len() {
        shape[shape.len() - 1 - from_end]
    } else {
        1
    }
}

/// Strides of `shape` viewed inside the broadcast shape `out`: broadcast
/// axes (extent 1 or missing) get stride 0.
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Merges adjacent axes that every operand traverses contiguously (or
/// broadcasts over entirely), dropping unit axes, so inner runs are long.
fn coalesce<const K: usize>(out: &[usize], operand_strides: [&[usize]; K]) -> (Vec<usize>, [Vec<usize>; K]) {
    let mut shape: Vec<usize> = Vec::with_capacity(out.len());
    let mut st: [Vec<usize>; K] = std::array::from_fn(|_| Vec::with_capacity(out.len()));
    for (axis, &extent) in out.iter().enumerate() {
        if extent == 1 {
            continue;
        }
        let mergeable = !shape.is_empty()
            && (0..K).all(|k| st[k].last().copied() == Some(operand_strides[k][axis] * extent));
        if mergeable {
            *shape.last_mut().expect("non-empty") *= extent;
            for k in 0..K {
                *st[k].last_mut().expect("non-empty") = operand_strides[k][axis];
            }
        } else {
            shape.push(extent);
            for k in 0..K {
                st[k].push(operand_strides[k][axis]);
            }
        }
    }
    (shape, st)
}

/// Visits `out` in row-major order as maximal runs along the (coalesced)
/// innermost axis. `f` receives each operand's starting offset, the run
/// length, and each operand's stride within the run.
pub fn for_each_run<const K: usize>(
    out: &[usize],
    operand_strides: [&[usize]; K],
    mut f: impl FnMut([usize; K], usize, [usize; K]),
) {
    if numel(out) == 0 {
        return;
    }
    let (shape, st) = coalesce(out, operand_strides);
    let rank = shape.len();
    if rank == 0 {
        f([0; K], 1, [0; K]);
        return;
    }
    let inner = shape[rank - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| st[k][rank - 1]);
    let runs: usize = shape[..rank - 1].iter().product();
    let mut index = vec![0usize; rank];
    let mut offsets = [0usize; K];
    for _ in 0..runs {
        f(offsets, inner, inner_strides);
        // odometer over the outer axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            for k in 0..K {
                offsets[k] += st[k][axis];
            }
            if index[axis] < shape[axis] {
                break;
            }
            for k in 0..K {
                offsets[k] -= st[k][axis] * shape[axis];
            }
            index[axis] = 0;
        }
    }
}

/// Visits every position of `out` in row-major order, passing the flat
/// offsets into each of the operand layouts described by `operand_strides`.
pub fn for_each_offset<const K: usize>(
    out: &[usize],
    operand_strides: [&[usize]; K],
    mut f: impl FnMut([usize; K]),
) {
    for_each_run(out, operand_strides, |start, len, step| {
        let mut o = start;
        for _ in 0..len {
            f(o);
            for k in 0..K {
                o[k] += step[k];
            }
        }
    });
}
