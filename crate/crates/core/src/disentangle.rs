//! Stage II: view-specific codes `s^i` distilled against the frozen consistent code.
//!
//! Each view gets its own encoder `E_s^i`, a decoder fed `z^i = [c, s^i]`, and a
//! CLUB network `q(s^i | c)`. Training alternates a likelihood step on the CLUB
//! networks with a step on the encoders/decoders that minimises the CLUB upper
//! bound plus the reconstruction anchor.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::consistency::{
    batch_tensors, consistent_means, diverged, encode_consistent, recon_error, ConsistentModel,
};
use crate::data::{
    epoch_seed, read_f32_array, read_labels, write_f32_array, write_labels, MultiViewDataset,
    Split,
};
use crate::error::{Error, Result};
use crate::nets::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nets::conv::{build_decoder, build_encoder, Decoder, Encoder, EncoderSpec};
use crate::nets::gaussian::{kl_diag_gaussian, reparameterize, GaussianPosterior};
use crate::nets::layers::{ParamBuilder, ParamSet, Pass};
use crate::nets::mlp::ClubNet;
use crate::rng::{seeded, stream};
use crate::train::{self, Mean, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecificSpec {
    /// Geometry of each view; the `latent_dim` of these entries is ignored.
    pub views: Vec<EncoderSpec>,
    pub d_c: usize,
    pub d_s: usize,
    #[serde(default = "default_club_hidden")]
    pub club_hidden: Vec<usize>,
}

fn default_club_hidden() -> Vec<usize> {
    vec![256, 256]
}

impl SpecificSpec {
    pub fn new(views: Vec<EncoderSpec>, d_c: usize, d_s: usize) -> Self {
        Self {
            views,
            d_c,
            d_s,
            club_hidden: default_club_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() || self.d_c == 0 || self.d_s == 0 {
            return Err(Error::invalid("need >= 1 view and latent dims >= 1"));
        }
        if self.club_hidden.is_empty() || self.club_hidden.contains(&0) {
            return Err(Error::invalid("CLUB hidden widths must be non-empty and >= 1"));
        }
        self.views.iter().try_for_each(EncoderSpec::validate)
    }
}

/// Per-view specific encoders, `[c, s]` decoders and CLUB networks.
#[derive(Debug, Clone)]
pub struct SpecificModel {
    spec: SpecificSpec,
    dtype: DType,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
    qnets: Vec<ClubNet>,
    params: ParamSet,
}

impl SpecificModel {
    pub fn new(spec: &SpecificSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let mut pb = ParamBuilder::new(seed, dtype);
        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut qnets = Vec::new();
        for (i, view) in spec.views.iter().enumerate() {
            pb.scope(&format!("specific{i}"), |pb| {
                encoders.push(pb.scope("encoder", |pb| {
                    build_encoder(&view.with_latent(spec.d_s), pb)
                })?);
                decoders.push(pb.scope("decoder", |pb| {
                    build_decoder(&view.with_latent(spec.d_c + spec.d_s), pb)
                })?);
                Ok(())
            })?;
            qnets.push(pb.scope(&format!("club{i}"), |pb| {
                ClubNet::new(pb, spec.d_c, spec.d_s, &spec.club_hidden)
            })?);
        }
        Ok(Self {
            spec: spec.clone(),
            dtype,
            encoders,
            decoders,
            qnets,
            params: pb.finish(),
        })
    }

    pub fn spec(&self) -> &SpecificSpec {
        &self.spec
    }

    pub fn n_views(&self) -> usize {
        self.spec.views.len()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Encoder and decoder variables (the stage-II main step).
    pub fn main_vars(&self) -> Vec<Var> {
        self.params.vars_with_prefix("specific")
    }

    pub fn qnet_vars(&self) -> Vec<Var> {
        self.params.vars_with_prefix("club")
    }

    pub fn main_params(&self) -> ParamSet {
        self.params.subset("specific")
    }

    pub fn qnet_params(&self) -> ParamSet {
        self.params.subset("club")
    }

    pub fn qnet(&self, view: usize) -> &ClubNet {
        &self.qnets[view]
    }

    pub fn encoder(&self, view: usize) -> &Encoder {
        &self.encoders[view]
    }

    pub fn decoder(&self, view: usize) -> &Decoder {
        &self.decoders[view]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "kind": "specific", "spec": self.spec });
        save_checkpoint(path, &self.params, meta)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.meta["kind"] != "specific" {
            return Err(Error::format(path, "not a specific-model checkpoint"));
        }
        let spec: SpecificSpec = serde_json::from_value(ckpt.meta["spec"].clone())?;
        let model = Self::new(&spec, 0, dtype)?;
        ckpt.restore(&model.params)?;
        Ok(model)
    }
}

/// CLUB estimate `(1/N)Σ_k log q(s_k|c_k) − (1/N²)Σ_k Σ_l log q(s_l|c_k)`.
///
/// The N² marginal term is evaluated in closed form: for a diagonal Gaussian
/// `q(·|c_k)`, `(1/N)Σ_l (s_l − μ_k)² = (μ_k − s̄)² + (1/N)Σ_l (s_l − s̄)²`.
pub fn club_loss(s: &Tensor, c: &Tensor, qnet: &ClubNet) -> Result<Tensor> {
    let (n, ds) = s.dims2()?;
    let (nc, _) = c.dims2()?;
    if n == 0 {
        return Err(Error::invalid("CLUB needs at least one joint sample"));
    }
    if nc != n || ds != qnet.target_dim() {
        return Err(Error::shape(format!(
            "CLUB got s {:?} and c {:?}",
            s.dims(),
            c.dims()
        )));
    }
    let q = qnet.forward(c)?;
    let inv_var = q.logvar.neg()?.exp()?;
    let positive = (s - &q.mean)?.sqr()?;
    let s_bar = s.mean_keepdim(0)?;
    let spread = s.broadcast_sub(&s_bar)?.sqr()?.mean_keepdim(0)?;
    let negative = q.mean.broadcast_sub(&s_bar)?.sqr()?.broadcast_add(&spread)?;
    // log-variance and 2π terms are shared by both averages and cancel
    let gap = ((negative - positive)? * inv_var)?;
    Ok((gap.sum(D::Minus1)?.mean_all()? * 0.5)?)
}

/// Reference implementation of [`club_loss`] that materialises all N² pairs.
pub fn club_loss_pairwise(s: &Tensor, c: &Tensor, qnet: &ClubNet) -> Result<Tensor> {
    let (n, ds) = s.dims2()?;
    if n == 0 {
        return Err(Error::invalid("CLUB needs at least one joint sample"));
    }
    let q = qnet.forward(c)?;
    let positive = q.log_density(s)?.mean_all()?;
    let mean = q.mean.unsqueeze(1)?.broadcast_as((n, n, ds))?;
    let logvar = q.logvar.unsqueeze(1)?.broadcast_as((n, n, ds))?;
    let samples = s.unsqueeze(0)?.broadcast_as((n, n, ds))?;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let sq = (samples - mean)?.sqr()?;
    let per = ((sq * logvar.neg()?.exp()?)? + &logvar)?.affine(-0.5, -0.5 * ln_2pi)?;
    let negative = per.sum(D::Minus1)?.mean_all()?;
    Ok((positive - negative)?)
}

/// Negative mean log-likelihood of joint pairs under `q(s|c)`; the CLUB network's
/// own training objective.
pub fn qnet_nll(s: &Tensor, c: &Tensor, qnet: &ClubNet) -> Result<Tensor> {
    Ok(qnet.forward(c)?.log_density(s)?.mean_all()?.neg()?)
}

/// One view's reconstruction anchor: `recon(x, D_s(z))` and `KL(g(s|x) ‖ N(0, I))`.
#[derive(Debug, Clone)]
pub struct ReconTerms {
    pub recon: Tensor,
    pub kl: Tensor,
}

impl ReconTerms {
    pub fn total(&self, beta: f64) -> Result<Tensor> {
        Ok((&self.recon + (&self.kl * beta)?)?)
    }
}

/// Reconstruction term for view `view` from `z = [c, s]`.
pub fn recon_loss(
    model: &SpecificModel,
    view: usize,
    x: &Tensor,
    c: &Tensor,
    s: &Tensor,
    post: &GaussianPosterior,
    pass: &mut Pass<'_>,
) -> Result<ReconTerms> {
    let (n, dc) = c.dims2()?;
    let (ns, ds) = s.dims2()?;
    if n != ns || dc != model.spec.d_c || ds != model.spec.d_s {
        return Err(Error::shape(format!(
            "z = [c {:?}, s {:?}] does not match d_c={}, d_s={}",
            c.dims(),
            s.dims(),
            model.spec.d_c,
            model.spec.d_s
        )));
    }
    let z = Tensor::cat(&[c, s], D::Minus1)?;
    let pred = model.decoders[view].forward(&z, pass)?;
    Ok(ReconTerms {
        recon: recon_error(x, &pred)?,
        kl: kl_diag_gaussian(post)?,
    })
}

/// Loss weights of stage II.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Weights {
    #[serde(default = "one")]
    pub lambda_d: f64,
    #[serde(default = "one")]
    pub lambda_r: f64,
    /// KL weight β_s on the specific posteriors.
    #[serde(default = "one")]
    pub beta: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_r: 1.0,
            beta: 1.0,
        }
    }
}

/// `L_s = (1/v) Σ_i (λ_d·L_d^i + λ_r·L_r^i)` with its per-view parts.
/// A zero weight keeps its term out of the graph; its value is still reported.
#[derive(Debug, Clone)]
pub struct Stage2Loss {
    pub total: Tensor,
    pub club: Vec<Tensor>,
    pub recon: Vec<Tensor>,
    pub kl: Vec<Tensor>,
    pub club_in_graph: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Parts {
    pub total: f64,
    pub club: Vec<f64>,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
}

impl Stage2Loss {
    pub fn values(&self) -> Result<Stage2Parts> {
        let vals = |ts: &[Tensor]| ts.iter().map(train::scalar).collect::<Result<Vec<_>>>();
        Ok(Stage2Parts {
            total: train::scalar(&self.total)?,
            club: vals(&self.club)?,
            recon: vals(&self.recon)?,
            kl: vals(&self.kl)?,
        })
    }
}

/// Stage-II forward state for one batch: `c`, posteriors and samples of every `s^i`.
#[derive(Debug, Clone)]
pub struct SpecificForward {
    pub c: Tensor,
    pub posts: Vec<GaussianPosterior>,
    pub samples: Vec<Tensor>,
}

/// `c` comes from the frozen encoder in eval mode and is detached: the posterior
/// mean by default, a reparameterised sample when `c_noise` is given.
pub fn specific_forward(
    model: &SpecificModel,
    consistent: &ConsistentModel,
    views: &[Tensor],
    noise: &[Tensor],
    c_noise: Option<&Tensor>,
    pass: &mut Pass<'_>,
) -> Result<SpecificForward> {
    if views.len() != model.n_views() || noise.len() != model.n_views() {
        return Err(Error::invalid(format!(
            "model has {} views, got {} views and {} noise tensors",
            model.n_views(),
            views.len(),
            noise.len()
        )));
    }
    if consistent.latent_dim() != model.spec.d_c {
        return Err(Error::shape("consistent latent dim differs from d_c"));
    }
    let post_c = encode_consistent(consistent, views, &mut Pass::eval())?;
    let c = match c_noise {
        Some(eps) => reparameterize(&post_c, eps)?,
        None => post_c.mean,
    }
    .detach();
    let mut posts = Vec::with_capacity(views.len());
    let mut samples = Vec::with_capacity(views.len());
    for ((x, enc), eps) in views.iter().zip(&model.encoders).zip(noise) {
        let post = enc.forward(x, pass)?;
        samples.push(reparameterize(&post, eps)?);
        posts.push(post);
    }
    Ok(SpecificForward { c, posts, samples })
}

/// Stage-II objective on a computed forward state.
pub fn stage2_loss(
    model: &SpecificModel,
    views: &[Tensor],
    fwd: &SpecificForward,
    weights: &Stage2Weights,
    pass: &mut Pass<'_>,
) -> Result<Stage2Loss> {
    let v = model.n_views();
    if views.len() != v || fwd.samples.len() != v {
        return Err(Error::invalid("view count mismatch in stage-II loss"));
    }
    let club_in_graph = weights.lambda_d != 0.0;
    let mut club = Vec::with_capacity(v);
    let mut recon = Vec::with_capacity(v);
    let mut kl = Vec::with_capacity(v);
    let mut total: Option<Tensor> = None;
    let mut add = |t: Tensor| -> Result<()> {
        total = Some(match total.take() {
            Some(acc) => (acc + t)?,
            None => t,
        });
        Ok(())
    };
    for i in 0..v {
        let s = &fwd.samples[i];
        let l_d = if club_in_graph {
            club_loss(s, &fwd.c, &model.qnets[i])?
        } else {
            club_loss(&s.detach(), &fwd.c, &model.qnets[i])?.detach()
        };
        let terms = recon_loss(model, i, &views[i], &fwd.c, s, &fwd.posts[i], pass)?;
        let l_r = terms.total(weights.beta)?;
        if club_in_graph {
            add((&l_d * weights.lambda_d)?)?;
        }
        if weights.lambda_r != 0.0 {
            add((&l_r * weights.lambda_r)?)?;
        }
        club.push(l_d);
        recon.push(terms.recon);
        kl.push(terms.kl);
    }
    let total = match total {
        Some(t) => (t / v as f64)?,
        None => fwd.c.zeros_like()?.sum_all()?,
    };
    Ok(Stage2Loss {
        total,
        club,
        recon,
        kl,
        club_in_graph,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub weights: Stage2Weights,
    /// Feed a reparameterised sample of `c` into `z` instead of its mean.
    #[serde(default)]
    pub sample_c: bool,
    #[serde(default = "all")]
    pub split: Split,
    #[serde(default = "yes")]
    pub dropout: bool,
    #[serde(default)]
    pub seed: u64,
}

fn all() -> Split {
    Split::All
}

fn yes() -> bool {
    true
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            weights: Stage2Weights::default(),
            sample_c: false,
            split: Split::All,
            dropout: true,
            seed: 0,
        }
    }
}

/// One row of the stage-II loss curve (sample-weighted epoch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub club: Vec<f64>,
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub qnet_nll: f64,
}

/// One alternation step: fit every CLUB network on the current joint samples, then
/// update the specific encoders/decoders on the stage-II loss. Returns the loss
/// parts (measured after the CLUB update) and the CLUB networks' mean NLL.
#[allow(clippy::too_many_arguments)]
pub fn stage2_step(
    model: &SpecificModel,
    consistent: &ConsistentModel,
    views: &[Tensor],
    noise: &[Tensor],
    c_noise: Option<&Tensor>,
    weights: &Stage2Weights,
    pass: &mut Pass<'_>,
    opt_q: &mut train::Adam,
    opt_main: &mut train::Adam,
) -> Result<(Stage2Parts, f64)> {
    let fwd = specific_forward(model, consistent, views, noise, c_noise, pass)?;
    let mut nll: Option<Tensor> = None;
    for (i, s) in fwd.samples.iter().enumerate() {
        let l = qnet_nll(&s.detach(), &fwd.c, &model.qnets[i])?;
        nll = Some(match nll {
            Some(acc) => (acc + l)?,
            None => l,
        });
    }
    let nll = (nll.expect("at least one view") / model.n_views() as f64)?;
    let nll_value = train::scalar(&nll)?;
    if !nll_value.is_finite() {
        return Err(Error::NonFinite(format!("CLUB likelihood is {nll_value}")));
    }
    train::step(opt_q, &nll)?;
    let loss = stage2_loss(model, views, &fwd, weights, pass)?;
    let parts = loss.values()?;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("stage-II loss is {}", parts.total)));
    }
    train::step(opt_main, &loss.total)?;
    Ok((parts, nll_value))
}

/// Trains the specific model against a frozen consistent model.
pub fn train_stage2(
    model: &mut SpecificModel,
    consistent: &ConsistentModel,
    dataset: &MultiViewDataset,
    cfg: &Stage2Config,
    dump_dir: Option<&Path>,
) -> Result<Vec<Stage2Epoch>> {
    cfg.schedule.validate()?;
    if !consistent.is_frozen() {
        return Err(Error::invalid("stage II needs a frozen stage-I model"));
    }
    if dataset.n_views() != model.n_views() || consistent.n_views() != model.n_views() {
        return Err(Error::invalid("dataset and model view counts differ"));
    }
    let dtype = model.dtype;
    let mut opt_main = train::adam(model.main_vars(), cfg.schedule.lr)?;
    let mut opt_q = train::adam(model.qnet_vars(), cfg.schedule.lr)?;
    let mut noise_rng = seeded(cfg.seed, stream::NOISE);
    let mut drop_rng = seeded(cfg.seed, stream::DROPOUT);
    let split = cfg.split.to_string();
    let v = model.n_views();
    let mut curve = Vec::with_capacity(cfg.schedule.epochs);
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        train::set_lr(&mut opt_main, lr);
        train::set_lr(&mut opt_q, lr);
        let mut total = Mean::default();
        let mut nll = Mean::default();
        let mut club = vec![Mean::default(); v];
        let mut recon = vec![Mean::default(); v];
        let mut kl = vec![Mean::default(); v];
        let batches = dataset.iter_batches(
            &split,
            cfg.schedule.batch_size,
            true,
            epoch_seed(cfg.seed ^ 0x5eed_0002, epoch),
        )?;
        for (b, batch) in batches.enumerate() {
            let n = batch.len();
            let x = batch_tensors(&batch, dtype)?;
            let noise = (0..v)
                .map(|_| train::gaussian_noise(&mut noise_rng, (n, model.spec.d_s), dtype))
                .collect::<Result<Vec<_>>>()?;
            let c_noise = if cfg.sample_c {
                Some(train::gaussian_noise(&mut noise_rng, (n, model.spec.d_c), dtype)?)
            } else {
                None
            };
            let mut pass = if cfg.dropout {
                Pass::train(&mut drop_rng)
            } else {
                Pass::train_no_dropout()
            };
            let step = stage2_step(
                model,
                consistent,
                &x,
                &noise,
                c_noise.as_ref(),
                &cfg.weights,
                &mut pass,
                &mut opt_q,
                &mut opt_main,
            );
            let (parts, q) = match step {
                Ok(out) => out,
                Err(Error::NonFinite(what)) => {
                    let dump = dump_dir.map(|d| (d, "stage2-diverged.ckpt"));
                    return Err(diverged(epoch, b, what, dump, &model.params));
                }
                Err(e) => return Err(e),
            };
            total.add(parts.total, n);
            nll.add(q, n);
            for i in 0..v {
                club[i].add(parts.club[i], n);
                recon[i].add(parts.recon[i], n);
                kl[i].add(parts.kl[i], n);
            }
        }
        let row = Stage2Epoch {
            epoch,
            lr,
            total: total.get(),
            club: club.iter().map(Mean::get).collect(),
            recon: recon.iter().map(Mean::get).collect(),
            kl: kl.iter().map(Mean::get).collect(),
            qnet_nll: nll.get(),
        };
        log::info!(
            "stage2 epoch {epoch}: loss {:.4} club {:?} lr {lr:.2e}",
            row.total,
            row.club
        );
        curve.push(row);
    }
    Ok(curve)
}

/// One sample's codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub sample_id: usize,
    pub c: Vec<f32>,
    pub s: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentHeader {
    pub dataset: String,
    pub n_samples: usize,
    pub n_classes: usize,
    pub n_views: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub consistent_hash: String,
    pub specific_hash: String,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Extracted codes for a whole dataset, row-major per representation type.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub header: LatentHeader,
    /// `(n, d_c)`.
    pub c: Vec<f32>,
    /// One `(n, d_s)` array per view.
    pub s: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
}

impl Latents {
    pub fn len(&self) -> usize {
        self.header.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.header.n_samples == 0
    }

    pub fn bundle(&self, i: usize) -> LatentBundle {
        let (dc, ds) = (self.header.d_c, self.header.d_s);
        LatentBundle {
            sample_id: i,
            c: self.c[i * dc..(i + 1) * dc].to_vec(),
            s: self.s.iter().map(|s| s[i * ds..(i + 1) * ds].to_vec()).collect(),
        }
    }

    pub fn bundles(&self) -> impl Iterator<Item = LatentBundle> + '_ {
        (0..self.len()).map(|i| self.bundle(i))
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let ok = self.c.len() == h.n_samples * h.d_c
            && self.s.len() == h.n_views
            && self.s.iter().all(|s| s.len() == h.n_samples * h.d_s)
            && self.labels.len() == h.n_samples;
        if !ok {
            return Err(Error::shape("latent arrays do not match their header"));
        }
        if self.c.iter().chain(self.s.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent codes contain non-finite values".into()));
        }
        Ok(())
    }

    /// Writes `header` (TOML), `c.bin`, `s1.bin`.. and `labels.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let h = &self.header;
        fs::write(dir.join("header"), toml::to_string(h)?)?;
        write_f32_array(&dir.join("c.bin"), &[h.n_samples, h.d_c], &self.c)?;
        for (i, s) in self.s.iter().enumerate() {
            write_f32_array(&dir.join(format!("s{}.bin", i + 1)), &[h.n_samples, h.d_s], s)?;
        }
        write_labels(&dir.join("labels.bin"), &self.labels)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("header");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::format(&path, format!("cannot read latent header: {e}")))?;
        let header: LatentHeader = toml::from_str(&text)?;
        let read = |name: String, width: usize| -> Result<Vec<f32>> {
            let path = dir.join(&name);
            let (dims, data) = read_f32_array(&path)?;
            if dims != [header.n_samples, width] {
                return Err(Error::format(path, format!("expected {}x{width}, got {dims:?}", header.n_samples)));
            }
            Ok(data)
        };
        let c = read("c.bin".into(), header.d_c)?;
        let s = (1..=header.n_views)
            .map(|i| read(format!("s{i}.bin"), header.d_s))
            .collect::<Result<Vec<_>>>()?;
        let labels = read_labels(&dir.join("labels.bin"))?;
        let out = Self {
            header,
            c,
            s,
            labels,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Posterior means of every code for every sample, in dataset order.
pub fn extract_latents(
    consistent: &ConsistentModel,
    specific: &SpecificModel,
    dataset: &MultiViewDataset,
    batch_size: usize,
) -> Result<Latents> {
    if specific.spec.d_c != consistent.latent_dim() {
        return Err(Error::shape("consistent latent dim differs from d_c"));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let c = consistent_means(consistent, dataset, &all, batch_size)?;
    let v = specific.n_views();
    let mut s = vec![Vec::with_capacity(dataset.len() * specific.spec.d_s); v];
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk)?;
        let x = batch_tensors(&batch, specific.dtype)?;
        for i in 0..v {
            let post = specific.encoders[i].forward(&x[i], &mut Pass::eval())?;
            s[i].extend(train::to_rows(&post.mean)?);
        }
    }
    let latents = Latents {
        header: LatentHeader {
            dataset: dataset.manifest.name.clone(),
            n_samples: dataset.len(),
            n_classes: dataset.manifest.n_classes,
            n_views: v,
            d_c: consistent.latent_dim(),
            d_s: specific.spec.d_s,
            consistent_hash: consistent.params().fingerprint()?,
            specific_hash: specific.params.fingerprint()?,
            train_indices: dataset.manifest.train_indices.clone(),
            test_indices: dataset.manifest.test_indices.clone(),
        },
        c,
        s,
        labels: dataset.labels.clone(),
    };
    latents.validate()?;
    Ok(latents)
}
