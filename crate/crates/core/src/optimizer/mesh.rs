//! Emulated `q × q` process mesh for the SR solve.
//!
//! Worker `(g, m)` (rank `g·q + m`) belongs to sample group `g` and starts with
//! column block `m` of its group's rows. Inside a group the rows are cut into
//! `q` sub-blocks; the transpose exchange hands sub-block `r` of every column
//! block to member `r`, so each worker ends with a full-width row strip. The
//! strips give partial Gram blocks that are reduced onto the block owner:
//! worker `(a, b)` owns `S[a, b]` for `a ≥ b`. The blocked Cholesky factor,
//! both triangular sweeps and the residual check all run by message passing
//! between block owners; `δ` is gathered on rank 0 and broadcast.

use std::collections::VecDeque;
use std::ops::Range;
use std::sync::mpsc::{channel, Receiver, Sender};

use nalgebra::{DMatrix, DVector};

use super::{
    backward_solve, center_rows, diagonal_sum, forward_solve, gram, mesh_side, potrf, relative_residual, shift_for,
    weighted_means, SrConfig, SrError, RESIDUAL_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Mean,
    Piece,
    Gram,
    Force,
    DiagSum,
    DiagTotal,
    Status,
    Lkk,
    Lik,
    Y,
    FwdPart,
    X,
    BwdPart,
    Gather,
    Delta,
    ResPart,
    ResNorm,
    ResTotal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Tag {
    phase: Phase,
    attempt: usize,
    a: usize,
    b: usize,
}

fn tag(phase: Phase, attempt: usize, a: usize, b: usize) -> Tag {
    Tag { phase, attempt, a, b }
}

struct Msg {
    from: usize,
    tag: Tag,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Msg {
    fn matrix(self) -> DMatrix<f64> {
        DMatrix::from_vec(self.rows, self.cols, self.data)
    }

    fn vector(self) -> DVector<f64> {
        DVector::from_vec(self.data)
    }
}

struct Endpoint {
    rank: usize,
    peers: Vec<Sender<Msg>>,
    inbox: Receiver<Msg>,
    stash: VecDeque<Msg>,
}

impl Endpoint {
    fn send_matrix(&self, to: usize, tag: Tag, m: &DMatrix<f64>) {
        let msg = Msg {
            from: self.rank,
            tag,
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        };
        self.peers[to].send(msg).expect("mesh peer alive");
    }

    fn send_vector(&self, to: usize, tag: Tag, v: &[f64]) {
        let msg = Msg {
            from: self.rank,
            tag,
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        };
        self.peers[to].send(msg).expect("mesh peer alive");
    }

    fn recv(&mut self, from: usize, tag: Tag) -> Msg {
        if let Some(pos) = self.stash.iter().position(|m| m.from == from && m.tag == tag) {
            return self.stash.remove(pos).expect("position is valid");
        }
        loop {
            let msg = self.inbox.recv().expect("mesh peer alive");
            if msg.from == from && msg.tag == tag {
                return msg;
            }
            self.stash.push_back(msg);
        }
    }
}

/// Outcome of a distributed solve.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshResult {
    pub delta: DVector<f64>,
    pub residual: f64,
    pub shift: f64,
    pub retries: usize,
    /// Copy of `δ` held by each worker after the broadcast.
    pub worker_deltas: Vec<DVector<f64>>,
}

/// 1-based labels of the blocks swapped inside each group by the transpose
/// exchange. Group `g` numbers its `q²` blocks row-major (sub-row, column)
/// starting at `g·q² + 1`.
pub fn block_exchange_pairs(p: usize) -> Result<Vec<Vec<(usize, usize)>>, SrError> {
    let q = mesh_side(p)?;
    Ok((0..q)
        .map(|g| {
            let base = g * q * q + 1;
            let mut pairs = Vec::new();
            for r in 0..q {
                for c in r + 1..q {
                    pairs.push((base + r * q + c, base + c * q + r));
                }
            }
            pairs
        })
        .collect())
}

fn even_ranges(total: usize, parts: usize) -> Vec<Range<usize>> {
    let base = total / parts;
    let extra = total % parts;
    let mut start = 0;
    (0..parts)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

struct Shared<'a> {
    q: usize,
    r: usize,
    chunk: usize,
    cols: Vec<Range<usize>>,
    e: &'a [f64],
    o: &'a [f64],
    w: &'a [f64],
    cfg: &'a SrConfig,
}

/// Solves the SR system on a `√P × √P` worker mesh.
///
/// `e`, `o` (row-major `n × r`) and `w` describe the samples; rows are padded
/// with zero weight until they split evenly over `P` sub-blocks.
pub fn distributed_sr(e: &[f64], o: &[f64], r: usize, w: &[f64], cfg: &SrConfig) -> Result<MeshResult, SrError> {
    cfg.validate()?;
    let p = cfg.mesh_p;
    let q = mesh_side(p)?;
    let n = e.len();
    if n < 2 {
        return Err(SrError::TooFewSamples(n));
    }
    if o.len() != n * r || w.len() != n {
        return Err(SrError::ShapeMismatch(format!(
            "{n} samples, {} derivative entries, {} weights",
            o.len(),
            w.len()
        )));
    }
    if r < q {
        return Err(SrError::ShapeMismatch(format!(
            "{r} parameters cannot fill {q} column blocks"
        )));
    }
    if !e.iter().chain(o).all(|x| x.is_finite()) {
        return Err(SrError::NonFinite("sample statistics"));
    }
    let chunk = n.div_ceil(p);
    let n_pad = chunk * p;
    let (mut e_pad, mut o_pad, mut w_pad) = (e.to_vec(), o.to_vec(), w.to_vec());
    e_pad.resize(n_pad, 0.0);
    o_pad.resize(n_pad * r, 0.0);
    w_pad.resize(n_pad, 0.0);
    let shared = Shared {
        q,
        r,
        chunk,
        cols: even_ranges(r, q),
        e: &e_pad,
        o: &o_pad,
        w: &w_pad,
        cfg,
    };

    let (senders, receivers): (Vec<_>, Vec<_>) = (0..p).map(|_| channel::<Msg>()).unzip();
    let results: Vec<Result<(DVector<f64>, f64, f64, usize), SrError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = receivers
            .into_iter()
            .enumerate()
            .map(|(rank, inbox)| {
                let ep = Endpoint {
                    rank,
                    peers: senders.clone(),
                    inbox,
                    stash: VecDeque::new(),
                };
                let shared = &shared;
                scope.spawn(move || worker(ep, shared))
            })
            .collect();
        drop(senders);
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(SrError::Mesh("worker panicked".into())))
            })
            .collect()
    });

    let mut worker_deltas = Vec::with_capacity(p);
    let mut head = None;
    for res in results {
        let (delta, residual, shift, retries) = res?;
        if head.is_none() {
            head = Some((delta.clone(), residual, shift, retries));
        }
        worker_deltas.push(delta);
    }
    let (delta, residual, shift, retries) = head.expect("at least one worker");
    Ok(MeshResult {
        delta,
        residual,
        shift,
        retries,
        worker_deltas,
    })
}

fn worker(mut ep: Endpoint, sh: &Shared<'_>) -> Result<(DVector<f64>, f64, f64, usize), SrError> {
    let q = sh.q;
    let rank = ep.rank;
    let (g, m) = (rank / q, rank % q);
    let owner = |a: usize, b: usize| a * q + b;
    let group_rows = g * q * sh.chunk..(g + 1) * q * sh.chunk;
    let my_cols = sh.cols[m].clone();

    // Column means: partial sums over the group's rows, all-reduced along the
    // mesh column in group order. The energy partial rides in the last slot.
    let rows_w = &sh.w[group_rows.clone()];
    let rows_e = &sh.e[group_rows.clone()];
    let mut local = vec![0.0; my_cols.len() + 1];
    {
        let o_block: Vec<f64> = group_rows
            .clone()
            .flat_map(|i| sh.o[i * sh.r + my_cols.start..i * sh.r + my_cols.end].iter().copied())
            .collect();
        let (e_part, o_part) = weighted_means(rows_e, &o_block, my_cols.len(), rows_w);
        local[..my_cols.len()].copy_from_slice(&o_part);
        local[my_cols.len()] = e_part;
    }
    for g2 in 0..q {
        if g2 != g {
            ep.send_vector(owner(g2, m), tag(Phase::Mean, 0, 0, 0), &local);
        }
    }
    let mut total: Option<Vec<f64>> = None;
    for g2 in 0..q {
        let part = if g2 == g {
            local.clone()
        } else {
            ep.recv(owner(g2, m), tag(Phase::Mean, 0, 0, 0)).data
        };
        match total.as_mut() {
            None => total = Some(part),
            Some(t) => t.iter_mut().zip(&part).for_each(|(x, y)| *x += y),
        }
    }
    let total = total.expect("q >= 1");
    let e_mean = total[my_cols.len()];
    let mut o_mean_full = vec![0.0; sh.r];
    o_mean_full[my_cols.clone()].copy_from_slice(&total[..my_cols.len()]);

    // Centered column block of the group, then the transpose exchange.
    let block = center_rows(sh.o, sh.r, sh.w, &o_mean_full, group_rows.clone(), my_cols.clone());
    let piece = |r: usize| block.rows(r * sh.chunk, sh.chunk).clone_owned();
    for r in 0..q {
        if r != m {
            ep.send_matrix(owner(g, r), tag(Phase::Piece, 0, r, m), &piece(r));
        }
    }
    let mut strip = DMatrix::zeros(sh.chunk, sh.r);
    for c in 0..q {
        let part = if c == m {
            piece(m)
        } else {
            ep.recv(owner(g, c), tag(Phase::Piece, 0, m, c)).matrix()
        };
        strip.columns_mut(sh.cols[c].start, sh.cols[c].len()).copy_from(&part);
    }
    let strip_rows = group_rows.start + m * sh.chunk..group_rows.start + (m + 1) * sh.chunk;
    let e_strip = DVector::from_iterator(sh.chunk, strip_rows.map(|i| sh.w[i].sqrt() * (sh.e[i] - e_mean)));

    // Partial Gram and force blocks, reduced onto the owners in rank order.
    let col_block = |c: usize| strip.columns(sh.cols[c].start, sh.cols[c].len()).clone_owned();
    for a in 0..q {
        let xa = col_block(a);
        for b in 0..=a {
            let part = if a == b {
                gram(&xa, &xa)
            } else {
                gram(&xa, &col_block(b))
            };
            ep.send_matrix(owner(a, b), tag(Phase::Gram, 0, a, b), &part);
        }
        let fa = xa.tr_mul(&e_strip);
        ep.send_vector(owner(a, a), tag(Phase::Force, 0, a, a), fa.as_slice());
    }
    let my_block = (m <= g).then_some((g, m));
    let mut s_block: Option<DMatrix<f64>> = None;
    let mut f_block: Option<DVector<f64>> = None;
    if let Some((a, b)) = my_block {
        for src in 0..q * q {
            let part = ep.recv(src, tag(Phase::Gram, 0, a, b)).matrix();
            match s_block.as_mut() {
                None => s_block = Some(part),
                Some(s) => *s += part,
            }
        }
        if a == b {
            for src in 0..q * q {
                let part = ep.recv(src, tag(Phase::Force, 0, a, a)).vector();
                match f_block.as_mut() {
                    None => f_block = Some(part),
                    Some(f) => *f += part,
                }
            }
        }
    }

    // Diagonal mean for the shift.
    let is_diag = my_block.is_some_and(|(a, b)| a == b);
    if is_diag {
        let d = diagonal_sum(s_block.as_ref().expect("owner"));
        ep.send_vector(0, tag(Phase::DiagSum, 0, g, g), &[d]);
    }
    if rank == 0 {
        let mut t = None::<f64>;
        for k in 0..q {
            let d = ep.recv(owner(k, k), tag(Phase::DiagSum, 0, k, k)).data[0];
            t = Some(t.map_or(d, |x| x + d));
        }
        let t = t.expect("q >= 1");
        for dst in 1..q * q {
            ep.send_vector(dst, tag(Phase::DiagTotal, 0, 0, 0), &[t]);
        }
        ep.stash.push_back(Msg {
            from: 0,
            tag: tag(Phase::DiagTotal, 0, 0, 0),
            rows: 1,
            cols: 1,
            data: vec![t],
        });
    }
    let diag_mean = ep.recv(0, tag(Phase::DiagTotal, 0, 0, 0)).data[0] / sh.r as f64;

    for attempt in 0..=sh.cfg.max_retries {
        let shift = shift_for(sh.cfg.lambda, diag_mean, attempt);
        if let Some(out) = factor_and_solve(
            &mut ep,
            sh,
            my_block,
            s_block.as_ref(),
            f_block.as_ref(),
            shift,
            attempt,
        )? {
            return Ok((out.0, out.1, shift, attempt));
        }
    }
    Err(SrError::FactorizationFailed {
        retries: sh.cfg.max_retries,
    })
}

/// One factorization attempt at a fixed shift. `None` means every worker
/// agreed to retry with a larger shift.
#[allow(clippy::too_many_arguments)]
fn factor_and_solve(
    ep: &mut Endpoint,
    sh: &Shared<'_>,
    my_block: Option<(usize, usize)>,
    s_block: Option<&DMatrix<f64>>,
    f_block: Option<&DVector<f64>>,
    shift: f64,
    att: usize,
) -> Result<Option<(DVector<f64>, f64)>, SrError> {
    let q = sh.q;
    let p = q * q;
    let owner = |a: usize, b: usize| a * q + b;
    let reg = s_block.map(|s| {
        let mut reg = s.clone();
        if my_block.is_some_and(|(a, b)| a == b) {
            for i in 0..reg.nrows() {
                reg[(i, i)] += shift;
            }
        }
        reg
    });
    let mut work = reg.clone();

    // Right-looking blocked Cholesky over the lower blocks.
    for k in 0..q {
        let mut ok = false;
        if my_block == Some((k, k)) {
            ok = potrf(work.as_mut().expect("owner"));
            let flag = [if ok { 1.0 } else { 0.0 }];
            for dst in (0..p).filter(|&d| d != ep.rank) {
                ep.send_vector(dst, tag(Phase::Status, att, k, k), &flag);
            }
        } else {
            ok |= ep.recv(owner(k, k), tag(Phase::Status, att, k, k)).data[0] == 1.0;
        }
        if !ok {
            return Ok(None);
        }
        let Some((a, b)) = my_block else { continue };
        if (a, b) == (k, k) {
            for i in k + 1..q {
                ep.send_matrix(owner(i, k), tag(Phase::Lkk, att, k, k), work.as_ref().expect("owner"));
            }
        } else if b == k {
            let lkk = ep.recv(owner(k, k), tag(Phase::Lkk, att, k, k)).matrix();
            let s_ik = work.as_ref().expect("owner");
            let l_ik = lkk
                .solve_lower_triangular(&s_ik.transpose())
                .expect("positive diagonal")
                .transpose();
            for j in k + 1..=a {
                ep.send_matrix(owner(a, j), tag(Phase::Lik, att, a, k), &l_ik);
            }
            for j in a + 1..q {
                ep.send_matrix(owner(j, a), tag(Phase::Lik, att, a, k), &l_ik);
            }
            work = Some(l_ik);
        } else if b > k {
            let l_ak = ep.recv(owner(a, k), tag(Phase::Lik, att, a, k)).matrix();
            let update = if a == b {
                &l_ak * l_ak.transpose()
            } else {
                let l_bk = ep.recv(owner(b, k), tag(Phase::Lik, att, b, k)).matrix();
                &l_ak * l_bk.transpose()
            };
            *work.as_mut().expect("owner") -= update;
        }
    }

    // Forward sweep L y = F.
    let mut y_own = None;
    if let Some((a, b)) = my_block {
        let l = work.as_ref().expect("owner");
        if a == b {
            let mut rhs = f_block.expect("diagonal owner").clone();
            for j in 0..a {
                rhs -= ep.recv(owner(a, j), tag(Phase::FwdPart, att, a, j)).vector();
            }
            let y = forward_solve(l, &rhs);
            for i in a + 1..q {
                ep.send_vector(owner(i, a), tag(Phase::Y, att, a, a), y.as_slice());
            }
            y_own = Some(y);
        } else {
            let y_b = ep.recv(owner(b, b), tag(Phase::Y, att, b, b)).vector();
            ep.send_vector(owner(a, a), tag(Phase::FwdPart, att, a, b), (l * y_b).as_slice());
        }
    }

    // Backward sweep Lᵀ x = y.
    if let Some((a, b)) = my_block {
        let l = work.as_ref().expect("owner");
        if a == b {
            let mut rhs = y_own.take().expect("diagonal owner");
            for i in a + 1..q {
                rhs -= ep.recv(owner(i, a), tag(Phase::BwdPart, att, i, a)).vector();
            }
            let x = backward_solve(l, &rhs);
            for j in 0..a {
                ep.send_vector(owner(a, j), tag(Phase::X, att, a, a), x.as_slice());
            }
            ep.send_vector(0, tag(Phase::Gather, att, a, a), x.as_slice());
        } else {
            let x_a = ep.recv(owner(a, a), tag(Phase::X, att, a, a)).vector();
            ep.send_vector(owner(b, b), tag(Phase::BwdPart, att, a, b), l.tr_mul(&x_a).as_slice());
        }
    }

    // Gather on rank 0, broadcast to everyone.
    if ep.rank == 0 {
        let mut delta = DVector::zeros(sh.r);
        for k in 0..q {
            let x = ep.recv(owner(k, k), tag(Phase::Gather, att, k, k)).vector();
            delta.rows_mut(sh.cols[k].start, sh.cols[k].len()).copy_from(&x);
        }
        for dst in 0..p {
            ep.send_vector(dst, tag(Phase::Delta, att, 0, 0), delta.as_slice());
        }
    }
    let delta = ep.recv(0, tag(Phase::Delta, att, 0, 0)).vector();
    if !delta.iter().all(|x| x.is_finite()) {
        return Err(SrError::NonFinite("update vector"));
    }

    // Residual of the regularized system, assembled on the diagonal owners.
    let sub = |k: usize| delta.rows(sh.cols[k].start, sh.cols[k].len()).clone_owned();
    if let (Some((a, b)), Some(reg)) = (my_block, reg.as_ref()) {
        if a == b {
            let mut acc = reg * sub(a);
            for j in 0..a {
                acc += ep.recv(owner(a, j), tag(Phase::ResPart, att, a, j)).vector();
            }
            for i in a + 1..q {
                acc += ep.recv(owner(i, a), tag(Phase::ResPart, att, i, a)).vector();
            }
            let f = f_block.expect("diagonal owner");
            let res = acc - f;
            ep.send_vector(
                0,
                tag(Phase::ResNorm, att, a, a),
                &[res.norm_squared(), f.norm_squared()],
            );
        } else {
            ep.send_vector(owner(a, a), tag(Phase::ResPart, att, a, b), (reg * sub(b)).as_slice());
            ep.send_vector(
                owner(b, b),
                tag(Phase::ResPart, att, a, b),
                reg.tr_mul(&sub(a)).as_slice(),
            );
        }
    }
    if ep.rank == 0 {
        let (mut r2, mut f2) = (None::<f64>, None::<f64>);
        for k in 0..q {
            let v = ep.recv(owner(k, k), tag(Phase::ResNorm, att, k, k)).data;
            r2 = Some(r2.map_or(v[0], |x| x + v[0]));
            f2 = Some(f2.map_or(v[1], |x| x + v[1]));
        }
        let residual = relative_residual(r2.expect("q >= 1"), f2.expect("q >= 1"));
        for dst in 0..p {
            ep.send_vector(dst, tag(Phase::ResTotal, att, 0, 0), &[residual]);
        }
    }
    let residual = ep.recv(0, tag(Phase::ResTotal, att, 0, 0)).data[0];
    Ok((residual < RESIDUAL_TOL).then_some((delta, residual)))
}

#[cfg(test)]
mod tests {
    use super::super::{build_weighted_stats, solve_delta};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, r: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = (0..n).map(|_| rng.random_range(-3.0..1.0)).collect();
        let o = (0..n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        (e, o, vec![1.0 / n as f64; n])
    }

    fn serial(e: &[f64], o: &[f64], r: usize, w: &[f64], cfg: &SrConfig) -> DVector<f64> {
        solve_delta(&build_weighted_stats(e, o, r, w).unwrap(), cfg)
            .unwrap()
            .delta
    }

    #[test]
    fn single_worker_is_bitwise_serial() {
        let (e, o, w) = batch(50, 13, 1);
        let cfg = SrConfig::default();
        let d = distributed_sr(&e, &o, 13, &w, &cfg).unwrap();
        assert_eq!(d.delta, serial(&e, &o, 13, &w, &cfg));
    }

    #[test]
    fn four_and_sixteen_workers_match_serial() {
        for (p, n, r) in [(4, 203, 17), (16, 130, 23), (9, 64, 10)] {
            let (e, o, w) = batch(n, r, p as u64);
            let cfg = SrConfig {
                mesh_p: p,
                ..SrConfig::default()
            };
            let d = distributed_sr(&e, &o, r, &w, &cfg).unwrap();
            let s = serial(&e, &o, r, &w, &cfg);
            assert!((&d.delta - &s).norm() / s.norm() < 1e-10, "P = {p}");
            assert_eq!(d.worker_deltas.len(), p);
            assert!(d.worker_deltas.iter().all(|x| *x == d.delta));
            assert!(d.residual < RESIDUAL_TOL);
        }
    }

    #[test]
    fn exchange_labels_follow_the_transpose() {
        assert_eq!(block_exchange_pairs(4).unwrap(), vec![vec![(2, 3)], vec![(6, 7)]]);
        assert_eq!(block_exchange_pairs(1).unwrap(), vec![Vec::<(usize, usize)>::new()]);
        assert_eq!(block_exchange_pairs(9).unwrap()[0], vec![(2, 4), (3, 7), (6, 8)]);
        assert_eq!(block_exchange_pairs(6), Err(SrError::NotPerfectSquare(6)));
    }

    #[test]
    fn failure_restarts_everywhere() {
        // Identical rows give S = 0; with no shift every attempt fails on every worker.
        let (e, _, w) = batch(40, 8, 4);
        let o: Vec<f64> = (0..40 * 8).map(|k| (k % 8) as f64).collect();
        let cfg = SrConfig {
            mesh_p: 4,
            lambda: 0.0,
            ..SrConfig::default()
        };
        assert_eq!(
            distributed_sr(&e, &o, 8, &w, &cfg),
            Err(SrError::FactorizationFailed { retries: 3 })
        );
    }
}
