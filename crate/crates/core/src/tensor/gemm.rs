//! Blocked `C += A·B` for row-major operands.
//!
//! Every output element accumulates its `k` products one at a time, in
//! increasing `k`, starting from the value already in `C`. That is exactly the
//! order of the textbook triple loop, so results are bit-identical to it and
//! to themselves across runs; the blocking only changes memory traffic.

use super::Element;

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;
const MC: usize = 64;
const NC: usize = 512;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_acc<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    let panel_cap = NC.min(n).div_ceil(NR);
    let mut packed = vec![E::zero(); KC.min(k) * NR * panel_cap];

    for jc in (0..n).step_by(NC) {
        let nc = NC.min(n - jc);
        let panels = nc.div_ceil(NR);
        for pc in (0..k).step_by(KC) {
            let kc = KC.min(k - pc);
            pack_b(b, n, pc, kc, jc, nc, &mut packed);
            for ic in (0..m).step_by(MC) {
                let mc = MC.min(m - ic);
                for p in 0..panels {
                    let j0 = jc + p * NR;
                    let nr = NR.min(n - j0);
                    let bp = &packed[p * kc * NR..(p + 1) * kc * NR];
                    let mut i = ic;
                    while i + MR <= ic + mc {
                        micro::<E, MR>(a, k, i, pc, kc, bp, c, n, j0, nr);
                        i += MR;
                    }
                    while i < ic + mc {
                        micro::<E, 1>(a, k, i, pc, kc, bp, c, n, j0, nr);
                        i += 1;
                    }
                }
            }
        }
    }
}

/// Copies `b[pc..pc+kc, jc..jc+nc]` into `NR`-wide column panels, each laid out
/// `kc × NR` contiguously; columns past `nc` are zero.
fn pack_b<E: Element>(
    b: &[E],
    ldb: usize,
    pc: usize,
    kc: usize,
    jc: usize,
    nc: usize,
    packed: &mut [E],
) {
    let panels = nc.div_ceil(NR);
    for p in 0..panels {
        let j0 = jc + p * NR;
        let nr = NR.min(jc + nc - j0);
        let dst = &mut packed[p * kc * NR..(p + 1) * kc * NR];
        for kk in 0..kc {
            let src = &b[(pc + kk) * ldb + j0..][..nr];
            let row = &mut dst[kk * NR..(kk + 1) * NR];
            row[..nr].copy_from_slice(src);
            row[nr..].fill(E::zero());
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn micro<E: Element, const R: usize>(
    a: &[E],
    lda: usize,
    i: usize,
    pc: usize,
    kc: usize,
    bp: &[E],
    c: &mut [E],
    ldc: usize,
    j0: usize,
    nr: usize,
) {
    let mut acc = [[E::zero(); NR]; R];
    for (r, acc_row) in acc.iter_mut().enumerate() {
        acc_row[..nr].copy_from_slice(&c[(i + r) * ldc + j0..][..nr]);
    }
    let a_rows: [&[E]; R] = std::array::from_fn(|r| &a[(i + r) * lda + pc..][..kc]);
    for (kk, bv) in bp.chunks_exact(NR).enumerate().take(kc) {
        let bv: &[E; NR] = bv.try_into().unwrap();
        for r in 0..R {
            let av = a_rows[r][kk];
            let acc_row = &mut acc[r];
            for j in 0..NR {
                acc_row[j] = acc_row[j] + av * bv[j];
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        c[(i + r) * ldc + j0..][..nr].copy_from_slice(&acc_row[..nr]);
    }
}
