//! Multiprecision evaluation of the preparation error.
//!
//! The shaped ensemble `ρ = Σ_k P_k |α_k⟩⟨α_k|` is invariant under the
//! quarter-turn `diag(iⁿ)` and under complex conjugation, so in the number
//! basis its matrix is real and only couples `m ≡ n (mod 4)`. The thermal
//! reference is diagonal. `ρ − σ` therefore splits into four real symmetric
//! residue blocks, each diagonalised with cyclic Jacobi rotations in MPFR.
//!
//! Truncation to `P = span{|0⟩…|N⟩}` is certified as follows, with `Q = 1 − P`:
//!
//! ```text
//! ½‖PΔP‖₁ ≤ D(ρ, σ) ≤ ½‖PΔP‖₁ + ‖QρP‖₁ + ½(Tr QρQ + Tr QσQ)
//! ‖QρP‖₁ ≤ √(N+1)·‖Q₁ρP‖_F + Σ_k P_k·√(tail_k(F))
//! ```
//!
//! where `Q₁` projects on `N < n ≤ F` (entries computed explicitly) and
//! `tail_k(F)` is the Poisson tail of `|α_k|²` beyond `F`.

use rug::{Assign, Float};
use statrs::function::gamma::ln_gamma;

use crate::constellation::{grid_levels, grid_side};
use crate::{Error, Result};

/// Result of one evaluation at fixed `(K, ν, V_A, N)`.
#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    /// `½‖PΔP‖₁`, a lower bound on the untruncated trace distance.
    pub eps: Float,
    /// Additive certified truncation bound (only when requested).
    pub bound: Option<f64>,
}

struct Orbit {
    /// Orbit weight (probability mass of all symmetric images) times `e^{−|α|²}`.
    coeff: Float,
    /// Representative amplitude `α = a(p + iq)`.
    re: Float,
    im: Float,
    /// `|α|²` and orbit probability, in f64, for the far-tail bound.
    norm_sqr: f64,
    prob: f64,
}

fn orbits(cardinality: usize, nu: f64, nbar: &Float, prec: u32) -> Result<Vec<Orbit>> {
    let side = grid_side(cardinality)
        .ok_or_else(|| Error::invalid(format!("cardinality {cardinality} is not a square QAM")))?;
    let nu = Float::with_val(prec, nu);

    // Separable weights u_p = exp(−ν(p² − 1)); P(p, q) = u_p u_q / (Σ u)².
    let levels: Vec<i64> = grid_levels(side).filter(|&p| p > 0).collect();
    let u: Vec<Float> = levels
        .iter()
        .map(|&p| Float::with_val(prec, -(&nu * Float::with_val(prec, p * p - 1))).exp())
        .collect();
    let half_sum = u.iter().fold(Float::with_val(prec, 0), |acc, x| acc + x);
    // Both signs of p contribute equally.
    let total = Float::with_val(prec, &half_sum * &half_sum) * 4u32;
    let moment = levels
        .iter()
        .zip(&u)
        .fold(Float::with_val(prec, 0), |acc, (&p, w)| acc + Float::with_val(prec, w * (p * p)))
        / &half_sum;
    // α = a (p + iq) with a² = n̄ / (2 E[p²]).
    let a = Float::with_val(prec, nbar / (moment * 2u32)).sqrt();

    let mut out = Vec::with_capacity(levels.len() * (levels.len() + 1) / 2);
    for (i, &p) in levels.iter().enumerate() {
        for (j, &q) in levels.iter().enumerate().take(i + 1) {
            // Quarter turns give 4 images; p ≠ q adds the reflected orbit,
            // which contributes identically to every m ≡ n (mod 4) entry.
            let multiplicity = if i == j { 4u32 } else { 8u32 };
            let prob = Float::with_val(prec, &u[i] * &u[j]) * multiplicity / &total;
            let re = Float::with_val(prec, &a * p);
            let im = Float::with_val(prec, &a * q);
            let norm_sqr = Float::with_val(prec, &re * &re) + Float::with_val(prec, &im * &im);
            let coeff = Float::with_val(prec, &prob * Float::with_val(prec, -&norm_sqr).exp());
            out.push(Orbit { coeff, re, im, norm_sqr: norm_sqr.to_f64(), prob: prob.to_f64() });
        }
    }
    Ok(out)
}

/// `P(X > f)` for `X ~ Poisson(lambda)`, by direct summation.
pub(crate) fn poisson_tail(lambda: f64, f: usize) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let ln_lambda = lambda.ln();
    let mut n = f + 1;
    let mut total = 0.0;
    loop {
        let term = (-lambda + n as f64 * ln_lambda - ln_gamma(n as f64 + 1.0)).exp();
        total += term;
        if n as f64 > lambda && term <= total * 1e-17 {
            break;
        }
        n += 1;
        if n > f + 100_000 {
            break;
        }
    }
    total.min(1.0)
}

/// Evaluate `½‖P(ρ − σ)P‖₁` and optionally the certified truncation bound.
pub(crate) fn evaluate(
    cardinality: usize,
    nu: f64,
    target_va: f64,
    n_max: usize,
    prec: u32,
    certify: bool,
) -> Result<Evaluation> {
    let nbar = Float::with_val(prec, target_va) / 2u32;
    let orbits = orbits(cardinality, nu, &nbar, prec)?;
    // Cross entries are filled up to F = 2N + 1 when certifying.
    let far = if certify { 2 * n_max + 1 } else { n_max };
    let dim = n_max + 1;

    // 1/√(n!) for n ≤ far.
    let mut inv_sqrt_fact = Vec::with_capacity(far + 1);
    inv_sqrt_fact.push(Float::with_val(prec, 1));
    for n in 1..=far {
        let prev: &Float = &inv_sqrt_fact[n - 1];
        let next = Float::with_val(prec, prev / Float::with_val(prec, n).sqrt());
        inv_sqrt_fact.push(next);
    }

    // blocks[r] holds indices r, r + 4, … ≤ N; upper triangle filled.
    let mut blocks: Vec<Vec<Vec<Float>>> = (0..4)
        .map(|r| {
            let len = (n_max + 4 - r) / 4;
            let len = if r > n_max { 0 } else { len };
            vec![vec![Float::new(prec); len]; len]
        })
        .collect();
    let mut cross_sq = Float::with_val(prec, 0);
    // cross[m][j] accumulates ρ_{m, n} for N < n ≤ F with n ≡ m (mod 4).
    let mut cross: Vec<Vec<Float>> = if certify {
        (0..dim)
            .map(|m| {
                let count = (n_max + 1..=far).filter(|n| (n - m) % 4 == 0).count();
                vec![Float::new(prec); count]
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut far_tail = 0.0;
    let mut u = vec![Float::new(prec); far + 1];
    let mut v = vec![Float::new(prec); far + 1];
    let mut t = Float::new(prec);
    for orbit in &orbits {
        // u_n + i v_n = √coeff · αⁿ / √(n!)
        let root = Float::with_val(prec, orbit.coeff.sqrt_ref());
        let mut pr = Float::with_val(prec, 1);
        let mut pi = Float::with_val(prec, 0);
        for n in 0..=far {
            if n > 0 {
                t.assign(&pr * &orbit.re);
                t -= &pi * &orbit.im;
                pi *= &orbit.re;
                pi += &pr * &orbit.im;
                pr.assign(&t);
            }
            u[n].assign(&pr * &inv_sqrt_fact[n]);
            u[n] *= &root;
            v[n].assign(&pi * &inv_sqrt_fact[n]);
            v[n] *= &root;
        }
        for (r, block) in blocks.iter_mut().enumerate() {
            let len = block.len();
            for i in 0..len {
                let m = r + 4 * i;
                for j in i..len {
                    let n = r + 4 * j;
                    let entry = &mut block[i][j];
                    *entry += &u[m] * &u[n];
                    *entry += &v[m] * &v[n];
                }
            }
        }
        if certify {
            for (m, row) in cross.iter_mut().enumerate() {
                let first = n_max + 1 + (4 - (n_max + 1 - m) % 4) % 4;
                for (j, entry) in row.iter_mut().enumerate() {
                    let n = first + 4 * j;
                    *entry += &u[m] * &u[n];
                    *entry += &v[m] * &v[n];
                }
            }
            far_tail += orbit.prob * poisson_tail(orbit.norm_sqr, far).sqrt();
        }
    }

    // Photon-number mass of ρ inside P, for the tail Tr QρQ.
    let mut inside = Float::with_val(prec, 0);
    for block in &blocks {
        for (i, row) in block.iter().enumerate() {
            inside += &row[i];
        }
    }
    let rho_tail = (Float::with_val(prec, 1) - inside).to_f64().max(0.0);

    // Subtract the thermal diagonal n̄ⁿ/(n̄+1)^{n+1}.
    let ratio = Float::with_val(prec, &nbar / Float::with_val(prec, &nbar + 1u32));
    let mut thermal = Float::with_val(prec, 1u32) / Float::with_val(prec, &nbar + 1u32);
    for n in 0..dim {
        let (r, i) = (n % 4, n / 4);
        blocks[r][i][i] -= &thermal;
        thermal *= &ratio;
    }
    // `thermal` now holds σ_{N+1,N+1}; the geometric tail is (n̄/(n̄+1))^{N+1}.
    let sigma_tail = Float::with_val(prec, &thermal * Float::with_val(prec, &nbar + 1u32)).to_f64();

    let mut abs_sum = Float::with_val(prec, 0);
    for mut block in blocks {
        symmetrize(&mut block);
        for lambda in jacobi_eigenvalues(block, prec) {
            abs_sum += lambda.abs();
        }
    }
    let eps = abs_sum / 2u32;

    let bound = if certify {
        for row in &cross {
            for entry in row {
                cross_sq += Float::with_val(prec, entry * entry);
            }
        }
        let frob = cross_sq.sqrt().to_f64();
        let rank = (dim as f64).min((far - n_max) as f64);
        Some(0.5 * (rho_tail + sigma_tail) + rank.sqrt() * frob + far_tail)
    } else {
        None
    };

    Ok(Evaluation { eps, bound })
}

fn symmetrize(a: &mut [Vec<Float>]) {
    let n = a.len();
    for i in 0..n {
        for j in 0..i {
            let upper = a[j][i].clone();
            a[i][j] = upper;
        }
    }
}

/// Eigenvalues of a real symmetric matrix by cyclic Jacobi rotations.
pub(crate) fn jacobi_eigenvalues(mut a: Vec<Vec<Float>>, prec: u32) -> Vec<Float> {
    let n = a.len();
    if n == 0 {
        return Vec::new();
    }
    let scale = a
        .iter()
        .flat_map(|row| row.iter())
        .fold(Float::with_val(prec, 0), |acc, x| acc.max(&Float::with_val(prec, x.abs_ref())));
    if scale == 0 {
        return vec![Float::with_val(prec, 0); n];
    }
    // Rotations stop once the off-diagonal mass is at rounding level.
    let threshold = Float::with_val(prec, &scale * Float::with_val(prec, Float::i_exp(1, -(prec as i32) + 4)));
    let negligible = Float::with_val(prec, &threshold / (n * n) as u32);

    let mut theta = Float::new(prec);
    let mut t = Float::new(prec);
    let mut c = Float::new(prec);
    let mut s = Float::new(prec);
    let mut tmp = Float::new(prec);
    let mut x = Float::new(prec);
    let mut y = Float::new(prec);
    for _sweep in 0..100 {
        let mut off = Float::with_val(prec, 0);
        for i in 0..n {
            for j in (i + 1)..n {
                off += Float::with_val(prec, a[i][j].abs_ref());
            }
        }
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].is_zero() {
                    continue;
                }
                tmp.assign(a[p][q].abs_ref());
                if tmp <= negligible {
                    a[p][q].assign(0);
                    a[q][p].assign(0);
                    continue;
                }
                // θ = (a_qq − a_pp) / (2 a_pq); t = sgn θ / (|θ| + √(θ² + 1))
                theta.assign(&a[q][q] - &a[p][p]);
                tmp.assign(&a[p][q] * 2u32);
                theta /= &tmp;
                tmp.assign(theta.square_ref());
                tmp += 1u32;
                tmp.sqrt_mut();
                let negative = theta.is_sign_negative();
                theta.abs_mut();
                tmp += &theta;
                t.assign(tmp.recip_ref());
                if negative {
                    t = -t;
                }
                // c = 1/√(t² + 1), s = t c
                c.assign(t.square_ref());
                c += 1u32;
                c.sqrt_mut();
                c.recip_mut();
                s.assign(&t * &c);

                // a_pp −= t a_pq ; a_qq += t a_pq ; a_pq = 0
                tmp.assign(&t * &a[p][q]);
                a[p][p] -= &tmp;
                a[q][q] += &tmp;
                a[p][q].assign(0);
                a[q][p].assign(0);
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    // a_kp' = c a_kp − s a_kq ; a_kq' = s a_kp + c a_kq
                    x.assign(&c * &a[k][p]);
                    x -= &s * &a[k][q];
                    y.assign(&s * &a[k][p]);
                    y += &c * &a[k][q];
                    a[k][p].assign(&x);
                    a[p][k].assign(&x);
                    a[k][q].assign(&y);
                    a[q][k].assign(&y);
                }
            }
        }
    }
    (0..n).map(|i| a[i][i].clone()).collect()
}
