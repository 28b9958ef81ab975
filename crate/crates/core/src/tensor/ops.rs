use super::gemm::gemm_acc;
use super::{Element, Tensor};
use crate::error::{Error, Result};

fn require_rank2<E: Element>(t: &Tensor<E>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(format!(
            "{what} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Matrix product `a[n×k] · b[k×m]`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, k) = require_rank2(a, "matmul")?;
    let (k2, m) = require_rank2(b, "matmul")?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul of {:?} by {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![E::zero(); n * m];
    gemm_acc(n, k, m, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// `broadcast(seed) + Σ xᵢ·wᵢ`, accumulated in place in block order.
///
/// `seed` is `1×d` or `rows×d` (or absent, meaning zero). Each block product is
/// added straight into the running accumulator, so when the blocks are the
/// column/row partition of a single product the result is bit-identical to
/// that product computed in one pass.
pub fn block_matmul_acc<E: Element>(
    rows: usize,
    d: usize,
    seed: Option<&Tensor<E>>,
    blocks: &[(&Tensor<E>, &Tensor<E>)],
) -> Result<Tensor<E>> {
    let mut out = match seed {
        None => vec![E::zero(); rows * d],
        Some(s) => {
            let (sr, sc) = require_rank2(s, "block_matmul_acc seed")?;
            if sc != d || (sr != 1 && sr != rows) {
                return Err(Error::dim(format!(
                    "seed {:?} cannot broadcast to [{rows}, {d}]",
                    s.shape()
                )));
            }
            if sr == rows {
                s.data().to_vec()
            } else {
                let mut v = Vec::with_capacity(rows * d);
                for _ in 0..rows {
                    v.extend_from_slice(s.data());
                }
                v
            }
        }
    };
    for (x, w) in blocks {
        let (xr, k) = require_rank2(x, "block_matmul_acc")?;
        let (wk, wd) = require_rank2(w, "block_matmul_acc")?;
        if xr != rows || wk != k || wd != d {
            return Err(Error::dim(format!(
                "block {:?} · {:?} does not produce [{rows}, {d}]",
                x.shape(),
                w.shape()
            )));
        }
        gemm_acc(rows, k, d, x.data(), w.data(), &mut out);
    }
    Ok(Tensor::from_parts(vec![rows, d], out))
}

/// Repeats a single-row tensor `b` times along the leading dimension.
pub fn tile_rows<E: Element>(x: &Tensor<E>, b: usize) -> Result<Tensor<E>> {
    if x.rows() != 1 {
        return Err(Error::dim(format!(
            "tile_rows expects exactly one row, got shape {:?}",
            x.shape()
        )));
    }
    if b == 0 {
        return Err(Error::invalid("tile count must be at least 1"));
    }
    if b == 1 {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(b * x.numel());
    for _ in 0..b {
        data.extend_from_slice(x.data());
    }
    let mut shape = x.shape().to_vec();
    shape[0] = b;
    Ok(Tensor::from_parts(shape, data))
}

/// Concatenates rank-2 tensors along columns, in list order.
pub fn concat_cols<E: Element>(parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_cols needs at least one part"))?;
    let (rows, _) = require_rank2(first, "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = require_rank2(p, "concat_cols")?;
        if r != rows {
            return Err(Error::dim(format!(
                "concat_cols row mismatch: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        widths.push(c);
    }
    if parts.len() == 1 {
        return Ok((*first).clone());
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![rows, total], data))
}

/// Copies the column window `[start, start + width)`.
pub fn slice_cols<E: Element>(x: &Tensor<E>, start: usize, width: usize) -> Result<Tensor<E>> {
    let (rows, cols) = require_rank2(x, "slice_cols")?;
    if width == 0 || start + width > cols {
        return Err(Error::Bounds(format!(
            "column window [{start}, {}) outside a tensor with {cols} columns",
            start + width
        )));
    }
    if start == 0 && width == cols {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(rows * width);
    for i in 0..rows {
        data.extend_from_slice(&x.row(i)[start..start + width]);
    }
    Ok(Tensor::from_parts(vec![rows, width], data))
}

/// Elementwise sum where either operand may have a single row that is
/// broadcast over the other's rows.
pub fn add_broadcast<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape()[1..] != b.shape()[1..] || (a.rows() != b.rows() && a.rows() != 1 && b.rows() != 1)
    {
        return Err(Error::dim(format!(
            "cannot add {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let rows = a.rows().max(b.rows());
    let w = a.row_len();
    let mut data = Vec::with_capacity(rows * w);
    for i in 0..rows {
        let ra = a.row(if a.rows() == 1 { 0 } else { i });
        let rb = b.row(if b.rows() == 1 { 0 } else { i });
        data.extend(ra.iter().zip(rb).map(|(&x, &y)| x + y));
    }
    let mut shape = a.shape().to_vec();
    shape[0] = rows;
    Ok(Tensor::from_parts(shape, data))
}

/// Softmax over the last dimension, with max-subtraction.
pub fn softmax_rows<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let w = x.cols();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(w) {
        let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
        let start = data.len();
        let mut sum = E::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            data.push(e);
        }
        for e in &mut data[start..] {
            *e = *e / sum;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| v.max(E::zero())).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out[i * m + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_small_cases() {
        let id = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = t(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&id, &v).unwrap(), v);
        let r = matmul(&t(&[&[1.0, 2.0]]), &v).unwrap();
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&t(&[&[1.0, 2.0]]), &t(&[&[1.0]])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[1, 1]"), "{msg}");
    }

    #[test]
    fn tile_rows_cases() {
        let x = t(&[&[1.0, 2.0]]);
        assert_eq!(tile_rows(&x, 1).unwrap(), x);
        assert_eq!(
            tile_rows(&x, 3).unwrap(),
            t(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])
        );
        assert!(matches!(tile_rows(&x, 0), Err(Error::InvalidArgument(_))));
        assert!(tile_rows(&t(&[&[1.0], &[2.0]]), 2).is_err());
    }

    #[test]
    fn tile_rows_column_sums_are_b_times_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 1, 6);
        let b = 9;
        let tiled = tile_rows(&x, b).unwrap();
        for j in 0..6 {
            let s: f64 = (0..b).map(|i| tiled.get(&[i, j])).sum();
            let want: f64 = (0..b).map(|_| x.get(&[0, j])).sum();
            assert_eq!(s, want);
        }
    }

    #[test]
    fn concat_and_slice_cases() {
        let a = t(&[&[1.0]]);
        let b = t(&[&[2.0]]);
        assert_eq!(concat_cols(&[&a, &b]).unwrap(), t(&[&[1.0, 2.0]]));
        assert_eq!(concat_cols(&[&a]).unwrap(), a);
        assert!(concat_cols::<f64>(&[]).is_err());
        assert!(matches!(
            concat_cols(&[&a, &t(&[&[1.0], &[2.0]])]),
            Err(Error::Dimension(_))
        ));

        let x = t(&[&[1.0, 2.0, 3.0]]);
        assert_eq!(slice_cols(&x, 0, 3).unwrap(), x);
        assert_eq!(slice_cols(&x, 1, 1).unwrap(), t(&[&[2.0]]));
        assert!(matches!(slice_cols(&x, 2, 2), Err(Error::Bounds(_))));
    }

    #[test]
    fn add_broadcast_cases() {
        let a = t(&[&[1.0, 1.0]]);
        let y = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(add_broadcast(&a, &y).unwrap(), t(&[&[2.0, 3.0], &[4.0, 5.0]]));
        assert_eq!(add_broadcast(&y, &a).unwrap(), t(&[&[2.0, 3.0], &[4.0, 5.0]]));
        let z = t(&[&[0.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(add_broadcast(&y, &z).unwrap(), y);
        assert!(add_broadcast(&a, &t(&[&[1.0, 2.0, 3.0]])).is_err());
        let three = t(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert!(add_broadcast(&y, &three).is_err());
    }

    #[test]
    fn add_broadcast_equals_explicit_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random(&mut rng, 1, 8);
        let y = random(&mut rng, 13, 8);
        let explicit = add_broadcast(&tile_rows(&u, 13).unwrap(), &y).unwrap();
        assert_eq!(add_broadcast(&u, &y).unwrap(), explicit);
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_rows(&t(&[&[0.0, 0.0]])).data(), &[0.5, 0.5]);
        assert_eq!(softmax_rows(&t(&[&[1000.0, 1000.0]])).data(), &[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, 4, 11);
        let s = softmax_rows(&x);
        for i in 0..4 {
            let denom: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            let mut total = 0.0;
            for j in 0..11 {
                let want = x.get(&[i, j]).exp() / denom;
                assert!((s.get(&[i, j]) - want).abs() <= 1e-12);
                total += s.get(&[i, j]);
            }
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn block_matmul_acc_reproduces_single_product_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (rows, du, di, dc, d) = (9, 5, 7, 3, 6);
        let xu = random(&mut rng, 1, du);
        let xi = random(&mut rng, rows, di);
        let xc = random(&mut rng, rows, dc);
        let w = random(&mut rng, du + di + dc, d);
        let x = concat_cols(&[&tile_rows(&xu, rows).unwrap(), &xi, &xc]).unwrap();
        let full = matmul(&x, &w).unwrap();

        let wu = Tensor::new(vec![du, d], w.data()[..du * d].to_vec()).unwrap();
        let wi = Tensor::new(vec![di, d], w.data()[du * d..(du + di) * d].to_vec()).unwrap();
        let wc = Tensor::new(vec![dc, d], w.data()[(du + di) * d..].to_vec()).unwrap();
        let user = matmul(&xu, &wu).unwrap();
        let got = block_matmul_acc(rows, d, Some(&user), &[(&xi, &wi), (&xc, &wc)]).unwrap();
        assert_eq!(got, full);
    }

    fn matrix(r: usize, c: usize) -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-1.0f64..1.0, r * c)
            .prop_map(move |v| Tensor::new(vec![r, c], v).unwrap())
    }

    proptest! {
        #[test]
        fn block_sum_rule_holds_for_random_partitions(
            (a, b, cuts) in (1usize..6, 1usize..24, 1usize..6).prop_flat_map(|(n, k, m)| {
                (matrix(n, k), matrix(k, m), prop::collection::vec(1usize..k.max(2), 0..4))
            })
        ) {
            let k = a.shape()[1];
            let mut bounds: Vec<usize> = cuts.into_iter().filter(|&c| c < k).collect();
            bounds.push(0);
            bounds.push(k);
            bounds.sort_unstable();
            bounds.dedup();
            let full = matmul(&a, &b).unwrap();
            let mut acc: Option<Tensor> = None;
            for win in bounds.windows(2) {
                let (s, w) = (win[0], win[1] - win[0]);
                let ai = slice_cols(&a, s, w).unwrap();
                let bi = Tensor::new(vec![w, b.shape()[1]], b.data()[s * b.shape()[1]..(s + w) * b.shape()[1]].to_vec()).unwrap();
                let p = matmul(&ai, &bi).unwrap();
                acc = Some(match acc { None => p, Some(x) => add_broadcast(&x, &p).unwrap() });
            }
            let acc = acc.unwrap();
            prop_assert!(acc.relative_deviation(&full).unwrap() <= 1e-12);
        }

        #[test]
        fn tile_commutes_with_matmul((x, w, b) in (1usize..8, 1usize..8, 1usize..10)
            .prop_flat_map(|(k, m, b)| (matrix(1, k), matrix(k, m), Just(b)))) {
            let lhs = matmul(&tile_rows(&x, b).unwrap(), &w).unwrap();
            let rhs = tile_rows(&matmul(&x, &w).unwrap(), b).unwrap();
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn concat_slice_round_trip(parts in prop::collection::vec((1usize..5).prop_flat_map(|c| matrix(3, c)), 1..5)) {
            let refs: Vec<&Tensor> = parts.iter().collect();
            let cat = concat_cols(&refs).unwrap();
            let mut off = 0;
            for p in &parts {
                let w = p.shape()[1];
                prop_assert_eq!(&slice_cols(&cat, off, w).unwrap(), p);
                off += w;
            }
        }

        #[test]
        fn kernels_are_pure((a, b) in (1usize..6, 1usize..6, 1usize..6)
            .prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m)))) {
            prop_assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
            prop_assert_eq!(softmax_rows(&a), softmax_rows(&a));
        }
    }

    #[test]
    fn f32_block_sum_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Tensor<f32> = random(&mut rng, 6, 40).cast();
        let b: Tensor<f32> = random(&mut rng, 40, 5).cast();
        let full = matmul(&a, &b).unwrap();
        let a1 = slice_cols(&a, 0, 17).unwrap();
        let a2 = slice_cols(&a, 17, 23).unwrap();
        let b1 = Tensor::new(vec![17, 5], b.data()[..85].to_vec()).unwrap();
        let b2 = Tensor::new(vec![23, 5], b.data()[85..].to_vec()).unwrap();
        let sum = add_broadcast(&matmul(&a1, &b1).unwrap(), &matmul(&a2, &b2).unwrap()).unwrap();
        assert!(sum.relative_deviation(&full).unwrap() <= 1e-5);
    }
}
