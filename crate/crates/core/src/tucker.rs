//! Bilinear fusion of a semantic and a temporal representation, dense and
//! Tucker-factorized.
//!
//! Both forms act row-wise on `R: [N, d_s]`, `S: [N, d_t]` and return
//! `Y: [N, K]` with `Y[n, k] = Σ_ij T[i, j, k]·R[n, i]·S[n, j]`.
//! The Tucker form parameterizes `T = G ×₀ U_s ×₁ U_t ×₂ U_k` (zero-based
//! modes) and never materializes `T`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

/// Learnable-scalar count of a dense `d_s × d_t × k` interaction tensor.
pub fn dense_param_count(d_s: usize, d_t: usize, k: usize) -> usize {
    d_s * d_t * k
}

/// Learnable-scalar count of a Tucker factorization with ranks
/// `(n_s, n_t, n_k)`.
pub fn tucker_param_count(d_s: usize, d_t: usize, k: usize, (n_s, n_t, n_k): (usize, usize, usize)) -> usize {
    n_s * n_t * n_k + d_s * n_s + d_t * n_t + k * n_k
}

fn check_rows(tape: &Tape, r: Var, s: Var, d_s: usize, d_t: usize, op: &'static str) -> Result<usize> {
    let (sr, ss) = (tape.shape(r), tape.shape(s));
    if sr.len() != 2 || ss.len() != 2 || sr[0] != ss[0] || sr[1] != d_s || ss[1] != d_t {
        return Err(Error::shape(op, sr, ss));
    }
    Ok(sr[0])
}

/// Contracts `core: [a, b, c]` with rows `x: [N, a]` and `y: [N, b]`,
/// giving `[N, c]`.
fn bilinear_rows(tape: &mut Tape, x: Var, y: Var, core: Var) -> Result<Var> {
    let (a, b, c) = {
        let s = tape.shape(core);
        (s[0], s[1], s[2])
    };
    let n = tape.shape(x)[0];
    let flat = tape.reshape(core, &[a, b * c])?;
    let xc = tape.matmul(x, flat)?;
    let xc = tape.reshape(xc, &[n, b, c])?;
    let yr = tape.reshape(y, &[n, 1, b])?;
    let out = tape.matmul(yr, xc)?;
    tape.reshape(out, &[n, c])
}

/// Brute-force bilinear form with the full tensor `t: [d_s, d_t, K]`.
pub fn dense_bilinear(tape: &mut Tape, r: Var, s: Var, t: Var) -> Result<Var> {
    let ts = tape.shape(t).to_vec();
    if ts.len() != 3 {
        return Err(Error::shape("dense_bilinear", &ts, &[0, 0, 0]));
    }
    check_rows(tape, r, s, ts[0], ts[1], "dense_bilinear")?;
    bilinear_rows(tape, r, s, t)
}

/// Handles to a factorization recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TuckerVars {
    pub g: Var,
    pub u_s: Var,
    pub u_t: Var,
    pub u_k: Var,
}

fn factor_dims(tape: &Tape, f: &TuckerVars) -> Result<(usize, usize, usize, [usize; 3])> {
    let g = tape.shape(f.g).to_vec();
    let (us, ut, uk) = (tape.shape(f.u_s), tape.shape(f.u_t), tape.shape(f.u_k));
    if g.len() != 3
        || us.len() != 2
        || ut.len() != 2
        || uk.len() != 2
        || us[1] != g[0]
        || ut[1] != g[1]
        || uk[1] != g[2]
    {
        return Err(Error::shape("tucker", &g, us));
    }
    Ok((us[0], ut[0], uk[0], [g[0], g[1], g[2]]))
}

/// Materializes `T = G ×₀ U_s ×₁ U_t ×₂ U_k`.
pub fn tucker_compose(tape: &mut Tape, f: &TuckerVars) -> Result<Var> {
    factor_dims(tape, f)?;
    let t = tape.mode_product(f.g, f.u_s, 0)?;
    let t = tape.mode_product(t, f.u_t, 1)?;
    tape.mode_product(t, f.u_k, 2)
}

/// `Y = G ×₀ (R·U_s) ×₁ (S·U_t) ×₂ U_k`, row-wise.
pub fn tucker_fuse(tape: &mut Tape, r: Var, s: Var, f: &TuckerVars) -> Result<Var> {
    let (d_s, d_t, _, _) = factor_dims(tape, f)?;
    check_rows(tape, r, s, d_s, d_t, "tucker_fuse")?;
    let r_low = tape.matmul(r, f.u_s)?;
    let s_low = tape.matmul(s, f.u_t)?;
    let core = bilinear_rows(tape, r_low, s_low, f.g)?;
    let ukt = tape.transpose(f.u_k)?;
    tape.matmul(core, ukt)
}

/// Stored Tucker factors for one modality.
#[derive(Debug, Clone, Copy)]
pub struct TuckerFactors {
    pub g: ParamId,
    pub u_s: ParamId,
    pub u_t: ParamId,
    pub u_k: ParamId,
    pub d_s: usize,
    pub d_t: usize,
    pub k: usize,
    pub rank: usize,
}

impl TuckerFactors {
    /// Symmetric rank. Entries are uniform and scaled so that unit-variance
    /// inputs give outputs with variance `var(R)·var(S)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_s: usize,
        d_t: usize,
        k: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > d_s || rank > d_t || rank > k {
            return Err(Error::Config(format!(
                "rank {rank} must lie in 1..=min({d_s}, {d_t}, {k})"
            )));
        }
        let u = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        Ok(Self {
            g: store.add(&format!("{name}.core"), Tensor::uniform(&[rank, rank, rank], u(rank * rank), rng)),
            u_s: store.add(&format!("{name}.u_s"), Tensor::uniform(&[d_s, rank], u(d_s), rng)),
            u_t: store.add(&format!("{name}.u_t"), Tensor::uniform(&[d_t, rank], u(d_t), rng)),
            u_k: store.add(&format!("{name}.u_k"), Tensor::uniform(&[k, rank], u(rank), rng)),
            d_s,
            d_t,
            k,
            rank,
        })
    }

    pub fn param_count(&self) -> usize {
        tucker_param_count(self.d_s, self.d_t, self.k, (self.rank, self.rank, self.rank))
    }

    pub fn vars(&self, s: &mut Session) -> TuckerVars {
        TuckerVars {
            g: s.p(self.g),
            u_s: s.p(self.u_s),
            u_t: s.p(self.u_t),
            u_k: s.p(self.u_k),
        }
    }

    /// Fuses `[B, L, d_s]` with `[B, L, d_t]` position by position.
    pub fn forward(&self, s: &mut Session, r: Var, t: Var) -> Result<Var> {
        let shape = s.tape.shape(r).to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("TuckerFactors::forward", &shape, s.tape.shape(t)));
        }
        let n = shape[0] * shape[1];
        let r2 = s.tape.reshape(r, &[n, self.d_s])?;
        let t2 = s.tape.reshape(t, &[n, self.d_t])?;
        let f = self.vars(s);
        let y = tucker_fuse(&mut s.tape, r2, t2, &f)?;
        s.tape.reshape(y, &[shape[0], shape[1], self.k])
    }
}
