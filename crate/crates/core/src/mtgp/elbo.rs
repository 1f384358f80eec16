//! Minibatch ELBO and its exact gradient.
//!
//! For latent `q` with prior covariance `K = k_q(Z, Z) + jitter I` and
//! `A = K^-1 k_q(Z, x)`, the marginal of `h_q(x)` under `q(u_q)` is
//! `N(A^T m_q, k_q(x, x) - k_xz A + A^T S_q A)`. Task marginals mix these with
//! `a[tau, q]` and `a[tau, q]^2`. The Gaussian expected log-likelihood is then
//! closed-form, scaled by `N / |batch|`, and the per-latent KL terms are
//! subtracted.
//!
//! The gradient is a hand-written reverse pass through the same computation,
//! ending in the MLP backward pass.

use nalgebra::{DMatrix, DVector};

use super::kernel::{jittered_cholesky, kernel_matrix};
use super::{push_lower, DkmgpModel};
use crate::dataset::{ResidualSample, FEATURE_DIM};
use crate::deep_kernel::flatten_layers;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboValue {
    pub total: f64,
    /// Scaled expected log-likelihood.
    pub expected_loglik: f64,
    /// Sum of the per-latent KL divergences.
    pub kl: f64,
}

pub fn elbo(model: &DkmgpModel, batch: &[ResidualSample], n_total: usize) -> Result<ElboValue> {
    Ok(evaluate(model, batch, n_total, Terms::Both, false)?.0)
}

/// ELBO value plus its gradient in [`DkmgpModel::flatten`] coordinates.
pub fn elbo_gradients(
    model: &DkmgpModel,
    batch: &[ResidualSample],
    n_total: usize,
) -> Result<(ElboValue, Vec<f64>)> {
    let (v, g) = evaluate(model, batch, n_total, Terms::Both, true)?;
    Ok((v, g.expect("gradient requested")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Terms {
    Both,
    #[cfg_attr(not(test), allow(dead_code))]
    LikelihoodOnly,
}

struct LatentCache {
    kzz: DMatrix<f64>,
    kinv: DMatrix<f64>,
    kxz: DMatrix<f64>,
    alpha: DVector<f64>,
    a: DMatrix<f64>,
    s: DMatrix<f64>,
    w: DMatrix<f64>,
    mean: DVector<f64>,
    var: DVector<f64>,
}

pub(crate) fn evaluate(
    model: &DkmgpModel,
    batch: &[ResidualSample],
    n_total: usize,
    terms: Terms,
    want_grad: bool,
) -> Result<(ElboValue, Option<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty ELBO batch".into()));
    }
    let b = batch.len();
    let t_count = model.num_tasks();
    let q_count = model.num_latents();
    let m = model.num_inducing();
    let f = model.feature_dim();
    let scale = n_total as f64 / b as f64;

    let mut inputs = DMatrix::zeros(FEATURE_DIM, b);
    let mut targets = DMatrix::zeros(b, t_count);
    for (i, s) in batch.iter().enumerate() {
        inputs.column_mut(i).copy_from_slice(&s.input);
        for t in 0..t_count {
            targets[(i, t)] = s.target[t];
        }
    }
    let cache = model.mlp.forward_batch(&inputs)?;
    let phi = cache.output().transpose(); // b × f
    let z = &model.variational.inducing;

    let mut latents = Vec::with_capacity(q_count);
    let mut kl_total = 0.0;
    for q in 0..q_count {
        let hyper = &model.kernels[q];
        let kzz = kernel_matrix(hyper, z, z);
        let chol = jittered_cholesky(&kzz, model.jitter)?;
        let kinv = chol.inverse();
        let kxz = kernel_matrix(hyper, &phi, z);
        let mq = &model.variational.means[q];
        let lq = &model.variational.chols[q];
        let alpha = &kinv * mq;
        let a = &kinv * kxz.transpose();
        let mean = &kxz * &alpha;
        let s = lq * lq.transpose();
        let sa = &s * &a;
        let sig2 = hyper.variance();
        let var = DVector::from_fn(b, |i, _| {
            sig2 - kxz.row(i).transpose().dot(&a.column(i)) + a.column(i).dot(&sa.column(i))
        });

        if terms == Terms::Both {
            let lk = chol.l();
            let logdet_k: f64 = 2.0 * (0..m).map(|i| lk[(i, i)].ln()).sum::<f64>();
            let logdet_s: f64 = 2.0 * (0..m).map(|i| lq[(i, i)].ln()).sum::<f64>();
            let trace = kinv.component_mul(&s).sum();
            kl_total += 0.5 * (trace + mq.dot(&alpha) - m as f64 + logdet_k - logdet_s);
        }
        let w = if want_grad {
            &kinv * &sa
        } else {
            DMatrix::zeros(0, 0)
        };
        latents.push(LatentCache {
            kzz,
            kinv,
            kxz,
            alpha,
            a,
            s,
            w,
            mean,
            var,
        });
    }

    // Task marginals and expected log-likelihood.
    let mix = &model.lmc.mixing;
    let mut loglik = 0.0;
    let mut g_mu_task = DMatrix::zeros(b, t_count);
    let mut g_var_task = DMatrix::zeros(b, t_count);
    let mut g_noise = vec![0.0; t_count];
    for t in 0..t_count {
        let noise = model.noise.variance(t);
        for i in 0..b {
            let mut mu = 0.0;
            let mut v = 0.0;
            for (q, lat) in latents.iter().enumerate() {
                let a_tq = mix[(t, q)];
                mu += a_tq * lat.mean[i];
                v += a_tq * a_tq * lat.var[i];
            }
            let resid = targets[(i, t)] - mu;
            let quad = resid * resid + v;
            loglik += -0.5 * (LN_2PI + noise.ln()) - quad / (2.0 * noise);
            g_mu_task[(i, t)] = scale * resid / noise;
            g_var_task[(i, t)] = -scale / (2.0 * noise);
            g_noise[t] += scale * (-0.5 + quad / (2.0 * noise));
        }
    }
    loglik *= scale;
    let value = ElboValue {
        total: loglik - kl_total,
        expected_loglik: loglik,
        kl: kl_total,
    };
    if !want_grad {
        return Ok((value, None));
    }

    let mut g_mixing = DMatrix::zeros(t_count, q_count);
    let mut g_phi = DMatrix::<f64>::zeros(b, f);
    let mut g_z = DMatrix::<f64>::zeros(m, f);
    let mut g_kernels = Vec::with_capacity(q_count);
    let mut g_means = Vec::with_capacity(q_count);
    let mut g_chols = Vec::with_capacity(q_count);

    for (q, lat) in latents.iter().enumerate() {
        let hyper = &model.kernels[q];
        let sig2 = hyper.variance();
        let inv_sq = hyper.inv_sq_lengthscales();

        let mut g_mu = DVector::zeros(b);
        let mut g_var = DVector::zeros(b);
        for t in 0..t_count {
            let a_tq = mix[(t, q)];
            let mut gm = 0.0;
            let mut gv = 0.0;
            for i in 0..b {
                g_mu[i] += a_tq * g_mu_task[(i, t)];
                g_var[i] += a_tq * a_tq * g_var_task[(i, t)];
                gm += g_mu_task[(i, t)] * lat.mean[i];
                gv += g_var_task[(i, t)] * lat.var[i];
            }
            g_mixing[(t, q)] = gm + 2.0 * a_tq * gv;
        }

        // Gradients with respect to k(x, Z), K and S.
        let mut g_kxz = &g_mu * lat.alpha.transpose();
        let mut a_gv = lat.a.clone(); // A diag(g_var)
        let mut w_gv = lat.w.clone(); // W diag(g_var)
        for i in 0..b {
            a_gv.column_mut(i).scale_mut(g_var[i]);
            w_gv.column_mut(i).scale_mut(g_var[i]);
        }
        g_kxz += (&w_gv - &a_gv).transpose() * 2.0;

        let a_gmu = &lat.a * &g_mu;
        let a_gv_at = &a_gv * lat.a.transpose();
        let mut g_k_raw =
            -(&a_gmu * lat.alpha.transpose()) + &a_gv_at - (&w_gv * lat.a.transpose()) * 2.0;
        let mut g_s = a_gv_at;
        let mut g_mean = a_gmu;
        if terms == Terms::Both {
            let kinv_s_kinv = &lat.kinv * &lat.s * &lat.kinv;
            g_k_raw -= (-kinv_s_kinv - &lat.alpha * lat.alpha.transpose() + &lat.kinv) * 0.5;
            g_s -= &lat.kinv * 0.5;
            g_mean -= &lat.alpha;
        }
        let g_k = (&g_k_raw + g_k_raw.transpose()) * 0.5;

        let lq = &model.variational.chols[q];
        let mut g_l = (&g_s + g_s.transpose()) * lq;
        if terms == Terms::Both {
            for j in 0..m {
                g_l[(j, j)] += 1.0 / lq[(j, j)];
            }
        }
        for j in 0..m {
            g_l[(j, j)] *= lq[(j, j)];
        }
        g_chols.push(g_l);
        g_means.push(g_mean);

        // Chain through the kernel evaluations.
        let mut g_logls = vec![0.0; f];
        let mut g_logvar = g_var.sum() * sig2;
        for i in 0..m {
            for j in 0..m {
                let gk = g_k[(i, j)] * lat.kzz[(i, j)];
                if gk == 0.0 {
                    continue;
                }
                g_logvar += gk;
                for d in 0..f {
                    let diff = z[(i, d)] - z[(j, d)];
                    g_logls[d] += gk * diff * diff * inv_sq[d];
                    g_z[(i, d)] -= 2.0 * gk * diff * inv_sq[d];
                }
            }
        }
        for i in 0..b {
            for j in 0..m {
                let gk = g_kxz[(i, j)] * lat.kxz[(i, j)];
                if gk == 0.0 {
                    continue;
                }
                g_logvar += gk;
                for d in 0..f {
                    let diff = phi[(i, d)] - z[(j, d)];
                    g_logls[d] += gk * diff * diff * inv_sq[d];
                    g_phi[(i, d)] -= gk * diff * inv_sq[d];
                    g_z[(j, d)] += gk * diff * inv_sq[d];
                }
            }
        }
        g_kernels.push((g_logls, g_logvar));
    }

    let (g_mlp, _) = model.mlp.backward_batch(&cache, &g_phi.transpose())?;

    let mut grad = Vec::with_capacity(model.layout().len);
    flatten_layers(&g_mlp, &mut grad);
    for (ls, v) in &g_kernels {
        grad.extend_from_slice(ls);
        grad.push(*v);
    }
    grad.extend_from_slice(g_mixing.as_slice());
    grad.extend_from_slice(g_z.as_slice());
    for g in &g_means {
        grad.extend_from_slice(g.as_slice());
    }
    for g in &g_chols {
        push_lower(g, false, &mut grad);
    }
    grad.extend_from_slice(&g_noise);
    Ok((value, Some(grad)))
}
