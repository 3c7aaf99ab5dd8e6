//! Variational style bottleneck: prior and posterior networks over pooled
//! encoder states, reparameterized draws, Gaussian KL, additive fusion and
//! latent-conditioned attention prefixes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::seq2seq::{AttentionPrefix, EncoderStates, ModelConfig, PrefixSet, Site};

/// Floor added to every softplus scale.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Diagonal Gaussian on the tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: Var,
    pub sigma: Var,
}

/// One or two reparameterized draws from a [`Gaussian`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
    pub z_hat: Option<Var>,
    /// Standard-normal noise of each draw, in draw order.
    pub eps: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct GaussNet {
    w1: ParamId,
    b1: ParamId,
    w_mu: ParamId,
    b_mu: ParamId,
    w_sigma: ParamId,
    b_sigma: ParamId,
}

/// Parameter handles of the prior, posterior, fusion and prefix networks.
#[derive(Clone, Debug)]
pub struct LatentNets {
    latent_dim: usize,
    d_model: usize,
    prior: GaussNet,
    posterior: GaussNet,
    fuse_proj: ParamId,
    prefix_mlp: BTreeMap<(Site, usize), (ParamId, ParamId)>,
    prefix_shape: [usize; 3],
}

fn gauss_net<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    hidden: usize,
    out: usize,
    rng: &mut R,
) -> GaussNet {
    let s1 = 1.0 / libm::sqrt(d_in as f64);
    let s2 = 1.0 / libm::sqrt(hidden as f64);
    GaussNet {
        w1: store.add_normal(&format!("{name}.1.w"), &[d_in, hidden], s1, rng),
        b1: store.add_zeros(&format!("{name}.1.b"), &[hidden]),
        w_mu: store.add_normal(&format!("{name}.mu.w"), &[hidden, out], s2, rng),
        b_mu: store.add_zeros(&format!("{name}.mu.b"), &[out]),
        w_sigma: store.add_normal(&format!("{name}.sigma.w"), &[hidden, out], s2, rng),
        b_sigma: store.add_zeros(&format!("{name}.sigma.b"), &[out]),
    }
}

impl LatentNets {
    /// Registers the latent parameters. The second layer of every prefix
    /// network starts at zero so initial prefixes equal the base prefixes.
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (d, l, h) = (config.d_model, config.latent_dim, config.latent_hidden);
        let prior = gauss_net(store, "prior", d, h, l, rng);
        let posterior = gauss_net(store, "posterior", 2 * d, h, l, rng);
        // Zero start: a raw unit-scale draw added to layer-normed states
        // would drown the context before the decoder learns to read it.
        let fuse_proj = store.add_zeros("fuse.w", &[l, d]);
        let prefix_shape = [config.n_heads, config.prefix_len, config.d_head()];
        let flat = 2 * prefix_shape.iter().product::<usize>();
        let mut prefix_mlp = BTreeMap::new();
        for site in config.active_sites() {
            for layer in 0..config.layers_at(site) {
                let n = format!("prefix_mlp.{}.{layer}", site.tag());
                let w1 = store.add_normal(
                    &format!("{n}.1.w"),
                    &[l, config.prefix_hidden],
                    1.0 / libm::sqrt(l as f64),
                    rng,
                );
                let w2 = store.add_zeros(&format!("{n}.2.w"), &[config.prefix_hidden, flat]);
                prefix_mlp.insert((site, layer), (w1, w2));
            }
        }
        Self {
            latent_dim: l,
            d_model: d,
            prior,
            posterior,
            fuse_proj,
            prefix_mlp,
            prefix_shape,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Ids of the prefix network at a site and layer: `(W_1, W_2)`.
    pub fn prefix_mlp_ids(&self, site: Site, layer: usize) -> Option<(ParamId, ParamId)> {
        self.prefix_mlp.get(&(site, layer)).copied()
    }

    fn gaussian(&self, tape: &mut Tape, store: &ParamStore, net: &GaussNet, x: Var) -> Result<Gaussian> {
        let p = |t: &mut Tape, id| t.param(store, id);
        let (w1, b1) = (p(tape, net.w1), p(tape, net.b1));
        let (wm, bm) = (p(tape, net.w_mu), p(tape, net.b_mu));
        let (ws, bs) = (p(tape, net.w_sigma), p(tape, net.b_sigma));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.tanh(h)?;
        let mu = tape.linear(h, wm, Some(bm))?;
        let raw = tape.linear(h, ws, Some(bs))?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR)?;
        Ok(Gaussian { mu, sigma })
    }

    /// `p_θ(z | h)` from the pooled context.
    pub fn prior(&self, tape: &mut Tape, store: &ParamStore, h_pooled: Var) -> Result<Gaussian> {
        self.check_dim(tape, h_pooled, self.d_model, "prior input")?;
        self.gaussian(tape, store, &self.prior, h_pooled)
    }

    /// `q_φ(z | h, R)` from the pooled context and pooled response encoding.
    pub fn posterior(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_pooled: Var,
        r_pooled: Var,
    ) -> Result<Gaussian> {
        self.check_dim(tape, h_pooled, self.d_model, "posterior context")?;
        self.check_dim(tape, r_pooled, self.d_model, "posterior response")?;
        let x = tape.concat(&[h_pooled, r_pooled])?;
        self.gaussian(tape, store, &self.posterior, x)
    }

    fn check_dim(&self, tape: &Tape, v: Var, d: usize, what: &str) -> Result<()> {
        if tape.shape(v) != [d] {
            return Err(Error::Contract(format!(
                "{what} has shape {:?}, expected [{d}]",
                tape.shape(v)
            )));
        }
        Ok(())
    }

    /// `z ⊕ h`: the projected latent added to every non-pad encoder state.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, z: Var, h: &EncoderStates) -> Result<Var> {
        self.check_dim(tape, z, self.latent_dim, "latent")?;
        let w = tape.param(store, self.fuse_proj);
        let zp = tape.linear(z, w, None)?;
        tape.add_row_masked(h.states, zp, &h.mask)
    }

    /// Adds `MLP_site(z)` to every base prefix.
    pub fn style_prefix_from_z(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: Var,
        base: &PrefixSet,
    ) -> Result<PrefixSet> {
        self.check_dim(tape, z, self.latent_dim, "latent")?;
        let [h, p, dh] = self.prefix_shape;
        let flat = h * p * dh;
        let mut out = PrefixSet::empty();
        for (site, layer, bp) in base.iter() {
            let (w1, w2) = self.prefix_mlp_ids(site, layer).ok_or_else(|| {
                Error::Contract(format!("no prefix network for {} layer {layer}", site.tag()))
            })?;
            let (w1, w2) = (tape.param(store, w1), tape.param(store, w2));
            let m = tape.linear(z, w1, None)?;
            let m = tape.tanh(m)?;
            let m = tape.linear(m, w2, None)?;
            let m = tape.reshape(m, &[2, flat])?;
            let dk = tape.slice_rows(m, 0, 1)?;
            let dk = tape.reshape(dk, &[h, p, dh])?;
            let dv = tape.slice_rows(m, 1, 2)?;
            let dv = tape.reshape(dv, &[h, p, dh])?;
            let key = tape.add(bp.key, dk)?;
            let value = tape.add(bp.value, dv)?;
            out.insert(site, layer, AttentionPrefix { key, value });
        }
        Ok(out)
    }
}

/// Masked mean of encoder states over non-pad positions.
pub fn pool(tape: &mut Tape, states: &EncoderStates) -> Result<Var> {
    tape.masked_mean_rows(states.states, &states.mask)
}

/// Draws `z = μ + σ ⊙ ε` (and `ẑ` when `n_draws == 2`) with fresh noise.
pub fn reparameterize<R: Rng + ?Sized>(
    tape: &mut Tape,
    g: Gaussian,
    n_draws: usize,
    rng: &mut R,
) -> Result<LatentSample> {
    if !(1..=2).contains(&n_draws) {
        return Err(Error::InvalidParameter(format!("n_draws {n_draws}")));
    }
    let d = tape.value(g.mu).len();
    let eps: Vec<Vec<f64>> = (0..n_draws)
        .map(|_| (0..d).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    reparameterize_with(tape, g, eps)
}

/// Reparameterization with caller-supplied noise (one vector per draw).
pub fn reparameterize_with(tape: &mut Tape, g: Gaussian, eps: Vec<Vec<f64>>) -> Result<LatentSample> {
    let d = tape.value(g.mu).len();
    if eps.is_empty() || eps.len() > 2 || eps.iter().any(|e| e.len() != d) {
        return Err(Error::Contract("noise must be one or two vectors of latent width".into()));
    }
    if tape.value(g.sigma).data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Contract("sigma must be positive".into()));
    }
    let mut draws = Vec::with_capacity(eps.len());
    for e in &eps {
        let ev = tape.constant(Tensor::vector(e.clone()))?;
        let noise = tape.mul(g.sigma, ev)?;
        draws.push(tape.add(g.mu, noise)?);
    }
    Ok(LatentSample {
        mu: g.mu,
        sigma: g.sigma,
        z: draws[0],
        z_hat: draws.get(1).copied(),
        eps,
    })
}

/// `KL(q ‖ p)` between diagonal Gaussians, summed over dimensions.
pub fn kl_divergence(tape: &mut Tape, q: Gaussian, p: Gaussian) -> Result<Var> {
    let log_sp = tape.log(p.sigma)?;
    let log_sq = tape.log(q.sigma)?;
    let log_ratio = tape.sub(log_sp, log_sq)?;
    let var_q = tape.square(q.sigma)?;
    let diff = tape.sub(q.mu, p.mu)?;
    let diff2 = tape.square(diff)?;
    let num = tape.add(var_q, diff2)?;
    let var_p = tape.square(p.sigma)?;
    let den = tape.scale(var_p, 2.0)?;
    let frac = tape.div(num, den)?;
    let terms = tape.add(log_ratio, frac)?;
    let terms = tape.add_scalar(terms, -0.5)?;
    tape.sum(terms)
}

/// Closed-form `KL(q ‖ p)` on plain slices.
pub fn kl_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mu_q.len() {
        let (sq, sp) = (sigma_q[i], sigma_p[i]);
        let d = mu_q[i] - mu_p[i];
        kl += libm::log(sp / sq) + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5;
    }
    kl
}
