//! Shape arithmetic shared by the tensor ops: trailing-dimension
//! broadcasting, stride computation, and gradient reduction back to an
//! operand's shape.

use super::TensorError;

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Broadcast two shapes under the trailing-dimension rule: align the shapes
/// at their last axes; each pair of extents must be equal or one of them 1.
pub fn broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(TensorError::ShapeMismatch { left: a.to_vec(), right: b.to_vec() });
        }
    }
    Ok(out)
}

/// Per-axis strides for reading an operand of shape `from` as if it had the
/// broadcast shape `to`: broadcast axes get stride 0.
pub fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let own = strides(from);
    let pad = to.len() - from.len();
    let mut out = vec![0; to.len()];
    for i in 0..to.len() {
        if i >= pad && from[i - pad] != 1 {
            out[i] = own[i - pad];
        }
    }
    out
}

/// Sum `msg` (laid out as `from` shape) down to `to` shape, undoing a
/// broadcast. `to` must broadcast to `from`.
pub fn reduce_to(msg: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return msg.to_vec();
    }
    let mut out = vec![0.0; numel(to)];
    let bs = broadcast_strides(to, from);
    // Walk the full index space with carry counters; no division in the loop.
    let mut idx = vec![0usize; from.len()];
    let mut off = 0usize;
    for &v in msg {
        out[off] += v;
        for ax in (0..from.len()).rev() {
            idx[ax] += 1;
            off += bs[ax];
            if idx[ax] < from[ax] {
                break;
            }
            off -= bs[ax] * from[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Element-by-element walker over a broadcast index space that yields the
/// linear offsets of the two operands.
pub struct BroadcastIter {
    sa: Vec<usize>,
    sb: Vec<usize>,
    dims: Vec<usize>,
    idx: Vec<usize>,
    oa: usize,
    ob: usize,
    left: usize,
}

impl BroadcastIter {
    pub fn new(a: &[usize], b: &[usize], out: &[usize]) -> Self {
        BroadcastIter {
            sa: broadcast_strides(a, out),
            sb: broadcast_strides(b, out),
            dims: out.to_vec(),
            idx: vec![0; out.len()],
            oa: 0,
            ob: 0,
            left: numel(out),
        }
    }
}

impl Iterator for BroadcastIter {
    type Item = (usize, usize);
    #[inline]
    fn next(&mut self) -> Option<(usize, usize)> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        let item = (self.oa, self.ob);
        for ax in (0..self.dims.len()).rev() {
            self.idx[ax] += 1;
            self.oa += self.sa[ax];
            self.ob += self.sb[ax];
            if self.idx[ax] < self.dims[ax] {
                break;
            }
            self.oa -= self.sa[ax] * self.dims[ax];
            self.ob -= self.sb[ax] * self.dims[ax];
            self.idx[ax] = 0;
        }
        Some(item)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast(&[4, 1, 5], &[2, 5]).unwrap(), vec![4, 2, 5]);
        assert_eq!(broadcast(&[1], &[7]).unwrap(), vec![7]);
        assert!(broadcast(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn reduce_undoes_broadcast() {
        // msg over [2,3], operand was [3]
        let msg = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        assert_eq!(reduce_to(&msg, &[2, 3], &[3]), vec![11.0, 22.0, 33.0]);
        // operand was [2,1]
        assert_eq!(reduce_to(&msg, &[2, 3], &[2, 1]), vec![6.0, 60.0]);
        // scalar operand
        assert_eq!(reduce_to(&msg, &[2, 3], &[1]), vec![66.0]);
    }

    #[test]
    fn broadcast_iter_offsets() {
        // a: [2,1] against b: [1,3]
        let pairs: Vec<_> = BroadcastIter::new(&[2, 1], &[1, 3], &[2, 3]).collect();
        assert_eq!(pairs, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    }
}
