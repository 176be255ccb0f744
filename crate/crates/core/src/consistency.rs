//! Stage I: learn the view-consistent code `c` by masked cross-view prediction.
//!
//! Every view is masked independently, the masked views go through the
//! consistent encoder, and per-view decoders reconstruct the full original views
//! from a single reparameterised `c`. After training the encoder is frozen.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::{epoch_seed, DatasetManifest, MultiViewBatch, MultiViewDataset, Split};
use crate::error::{Error, Result};
use crate::masking::{apply_mask, draw_batch_masks, MaskSpec};
use crate::nets::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nets::conv::{build_decoder, ConvTrunk, Decoder, EncoderSpec, GaussianHead};
use crate::nets::gaussian::{kl_diag_gaussian, reparameterize, GaussianPosterior};
use crate::nets::layers::{ParamBuilder, ParamSet, Pass};
use crate::rng::{seeded, stream};
use crate::train::{self, Mean, Schedule};

/// How per-view features become one posterior over `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Concatenate per-view features, one affine head.
    #[default]
    Concat,
    /// One head per view, combined with the N(0, I) prior as a product of experts.
    Poe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistentSpec {
    /// Geometry of each view; the `latent_dim` of these entries is ignored.
    pub views: Vec<EncoderSpec>,
    pub latent_dim: usize,
    #[serde(default)]
    pub fusion: Fusion,
}

impl ConsistentSpec {
    pub fn for_manifest(
        manifest: &DatasetManifest,
        base_channels: usize,
        dropout: f64,
        latent_dim: usize,
        fusion: Fusion,
    ) -> Result<Self> {
        let views = manifest
            .views
            .iter()
            .map(|v| {
                if v.height != v.width {
                    return Err(Error::invalid("views must be square"));
                }
                Ok(EncoderSpec {
                    base_channels,
                    dropout,
                    ..EncoderSpec::new(v.height, v.channels, latent_dim)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            views,
            latent_dim,
            fusion,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::invalid("at least one view is required"));
        }
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dim must be >= 1"));
        }
        for v in &self.views {
            v.validate()?;
        }
        Ok(())
    }

    /// One weight-shared trunk when every view has the same geometry.
    pub fn shared_trunk(&self) -> bool {
        let first = self.views[0].with_latent(self.latent_dim);
        self.views
            .iter()
            .all(|v| v.with_latent(self.latent_dim) == first)
    }

    pub fn decoder_spec(&self, view: usize) -> EncoderSpec {
        self.views[view].with_latent(self.latent_dim)
    }
}

#[derive(Debug, Clone)]
enum FusionHead {
    Concat(GaussianHead),
    Poe(Vec<GaussianHead>),
}

/// Consistent encoder `E_c` plus the per-view MCP decoders.
#[derive(Debug, Clone)]
pub struct ConsistentModel {
    spec: ConsistentSpec,
    dtype: DType,
    trunks: Vec<ConvTrunk>,
    head: FusionHead,
    decoders: Vec<Decoder>,
    params: ParamSet,
    frozen: bool,
}

impl ConsistentModel {
    pub fn new(spec: &ConsistentSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let mut pb = ParamBuilder::new(seed, dtype);
        let v = spec.views.len();
        let (trunks, head) = pb.scope("encoder", |pb| {
            let trunks = if spec.shared_trunk() {
                vec![pb.scope("trunk", |pb| ConvTrunk::new(&spec.views[0], pb))?]
            } else {
                (0..v)
                    .map(|i| pb.scope(&format!("trunk{i}"), |pb| ConvTrunk::new(&spec.views[i], pb)))
                    .collect::<Result<Vec<_>>>()?
            };
            let head = match spec.fusion {
                Fusion::Concat => {
                    let width = spec.views.iter().map(EncoderSpec::feature_dim).sum();
                    FusionHead::Concat(GaussianHead::new(pb, "head", width, spec.latent_dim)?)
                }
                Fusion::Poe => FusionHead::Poe(
                    (0..v)
                        .map(|i| {
                            GaussianHead::new(
                                pb,
                                &format!("head{i}"),
                                spec.views[i].feature_dim(),
                                spec.latent_dim,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?,
                ),
            };
            Ok((trunks, head))
        })?;
        let decoders = (0..v)
            .map(|i| pb.scope(&format!("decoder{i}"), |pb| build_decoder(&spec.decoder_spec(i), pb)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            dtype,
            trunks,
            head,
            decoders,
            params: pb.finish(),
            frozen: false,
        })
    }

    pub fn spec(&self) -> &ConsistentSpec {
        &self.spec
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn n_views(&self) -> usize {
        self.spec.views.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn encoder_params(&self) -> ParamSet {
        self.params.subset("encoder.")
    }

    pub fn decoder_params(&self) -> ParamSet {
        self.params.subset("decoder")
    }

    /// Hash of every encoder parameter and batch-norm statistic.
    pub fn encoder_fingerprint(&self) -> Result<String> {
        self.encoder_params().fingerprint()
    }

    pub fn decoders(&self) -> &[Decoder] {
        &self.decoders
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Variables an optimiser may touch: everything before freezing, decoders only after.
    pub fn trainable_vars(&self) -> Vec<Var> {
        if self.frozen {
            self.params.vars_with_prefix("decoder")
        } else {
            self.params.vars()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "consistent",
            "spec": self.spec,
            "frozen": self.frozen,
        });
        save_checkpoint(path, &self.params, meta)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.meta["kind"] != "consistent" {
            return Err(Error::format(path, "not a consistent-model checkpoint"));
        }
        let spec: ConsistentSpec = serde_json::from_value(ckpt.meta["spec"].clone())?;
        let mut model = Self::new(&spec, 0, dtype)?;
        ckpt.restore(&model.params)?;
        model.frozen = ckpt.meta["frozen"].as_bool().unwrap_or(false);
        Ok(model)
    }

    fn features(&self, views: &[Tensor], pass: &mut Pass<'_>) -> Result<Vec<Tensor>> {
        if self.trunks.len() == 1 {
            // one trunk over all views at once, so batch statistics cover every view
            let n = views[0].dims()[0];
            let stacked = Tensor::cat(views, 0)?;
            let feats = self.trunks[0].forward(&stacked, pass)?;
            (0..views.len())
                .map(|i| Ok(feats.narrow(0, i * n, n)?))
                .collect()
        } else {
            views
                .iter()
                .zip(&self.trunks)
                .map(|(x, trunk)| trunk.forward(x, pass))
                .collect()
        }
    }
}

fn check_views(model: &ConsistentModel, views: &[Tensor]) -> Result<usize> {
    if views.len() != model.n_views() {
        return Err(Error::invalid(format!(
            "model has {} views, got {}",
            model.n_views(),
            views.len()
        )));
    }
    let n = views[0].dims().first().copied().unwrap_or(0);
    if views.iter().any(|v| v.rank() != 4 || v.dims()[0] != n) {
        return Err(Error::shape("views must be (batch, C, H, W) with one batch length"));
    }
    Ok(n)
}

/// Posterior over `c` from all views (masked or not). Decoders are not used.
pub fn encode_consistent(
    model: &ConsistentModel,
    views: &[Tensor],
    pass: &mut Pass<'_>,
) -> Result<GaussianPosterior> {
    check_views(model, views)?;
    let feats = model.features(views, pass)?;
    match &model.head {
        FusionHead::Concat(head) => head.forward(&Tensor::cat(&feats, D::Minus1)?),
        FusionHead::Poe(heads) => {
            let experts = feats
                .iter()
                .zip(heads)
                .map(|(f, h)| h.forward(f))
                .collect::<Result<Vec<_>>>()?;
            product_of_experts(&experts)
        }
    }
}

/// Precision-weighted product of Gaussian experts and the N(0, I) prior.
pub fn product_of_experts(experts: &[GaussianPosterior]) -> Result<GaussianPosterior> {
    let first = experts
        .first()
        .ok_or_else(|| Error::invalid("product of zero experts"))?;
    let mut precision = first.mean.ones_like()?;
    let mut weighted = first.mean.zeros_like()?;
    for e in experts {
        let p = e.logvar.neg()?.exp()?;
        weighted = (weighted + (&e.mean * &p)?)?;
        precision = (precision + p)?;
    }
    let mean = (weighted / &precision)?;
    GaussianPosterior::new(mean, precision.log()?.neg()?)
}

/// Per-sample sum of squared errors, averaged over the batch.
pub fn recon_error(target: &Tensor, pred: &Tensor) -> Result<Tensor> {
    if target.dims() != pred.dims() {
        return Err(Error::shape(format!(
            "reconstruction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    Ok((pred - target)?.sqr()?.flatten_from(1)?.sum(1)?.mean_all()?)
}

/// Stage-I loss with its breakdown. `total = Σ_i recon[i] + β·kl`.
#[derive(Debug, Clone)]
pub struct McpLoss {
    pub total: Tensor,
    pub recon: Vec<Tensor>,
    pub kl: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McpParts {
    pub total: f64,
    pub recon: Vec<f64>,
    pub kl: f64,
}

impl McpLoss {
    pub fn values(&self) -> Result<McpParts> {
        Ok(McpParts {
            total: train::scalar(&self.total)?,
            recon: self
                .recon
                .iter()
                .map(train::scalar)
                .collect::<Result<Vec<_>>>()?,
            kl: train::scalar(&self.kl)?,
        })
    }
}

/// Encodes the masked views and reconstructs the full originals from one sampled `c`.
pub fn mcp_loss(
    model: &ConsistentModel,
    masked: &[Tensor],
    original: &[Tensor],
    noise: &Tensor,
    beta: f64,
    pass: &mut Pass<'_>,
) -> Result<McpLoss> {
    let n = check_views(model, masked)?;
    if check_views(model, original)? != n {
        return Err(Error::shape("masked and original batches differ in length"));
    }
    for (m, o) in masked.iter().zip(original) {
        if m.dims() != o.dims() {
            return Err(Error::shape(format!(
                "masked view {:?} vs original {:?}",
                m.dims(),
                o.dims()
            )));
        }
    }
    let post = encode_consistent(model, masked, pass)?;
    mcp_loss_from_posterior(model, &post, original, noise, beta, pass)
}

/// The loss given an already computed posterior over `c`.
pub fn mcp_loss_from_posterior(
    model: &ConsistentModel,
    post: &GaussianPosterior,
    original: &[Tensor],
    noise: &Tensor,
    beta: f64,
    pass: &mut Pass<'_>,
) -> Result<McpLoss> {
    let c = reparameterize(post, noise)?;
    let recon = model
        .decoders
        .iter()
        .zip(original)
        .map(|(dec, x)| recon_error(x, &dec.forward(&c, pass)?))
        .collect::<Result<Vec<_>>>()?;
    let kl = kl_diag_gaussian(post)?;
    let mut total = (&kl * beta)?;
    for r in &recon {
        total = (total + r)?;
    }
    Ok(McpLoss { total, recon, kl })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub mask: MaskSpec,
    /// KL weight β_c.
    #[serde(default = "one")]
    pub beta: f64,
    /// Split the stage trains on.
    #[serde(default = "all")]
    pub split: Split,
    /// Dropout active during training.
    #[serde(default = "yes")]
    pub dropout: bool,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

fn all() -> Split {
    Split::All
}

fn yes() -> bool {
    true
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            mask: MaskSpec::default(),
            beta: 1.0,
            split: Split::All,
            dropout: true,
            seed: 0,
        }
    }
}

/// One row of the stage-I loss curve (sample-weighted epoch means).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub recon: Vec<f64>,
    pub kl: f64,
}

pub(crate) fn batch_tensors(batch: &MultiViewBatch, dtype: DType) -> Result<Vec<Tensor>> {
    batch
        .views
        .iter()
        .map(|v| v.to_tensor(&Device::Cpu, dtype))
        .collect()
}

pub(crate) fn diverged(
    epoch: usize,
    batch: usize,
    what: String,
    dump: Option<(&Path, &str)>,
    params: &ParamSet,
) -> Error {
    let checkpoint = dump.and_then(|(dir, name)| {
        let path: PathBuf = dir.join(name);
        let meta = serde_json::json!({ "kind": "diagnostic", "epoch": epoch, "batch": batch });
        save_checkpoint(&path, params, meta).ok().map(|_| path)
    });
    Error::Diverged {
        epoch,
        batch,
        what,
        checkpoint,
    }
}

/// Trains `model` with fresh masks per batch, then freezes the consistent encoder.
/// A non-finite loss aborts training; a diagnostic checkpoint is written to
/// `dump_dir` when one is given.
pub fn train_stage1(
    model: &mut ConsistentModel,
    dataset: &MultiViewDataset,
    cfg: &Stage1Config,
    dump_dir: Option<&Path>,
) -> Result<Vec<Stage1Epoch>> {
    cfg.schedule.validate()?;
    cfg.mask.validate()?;
    if dataset.n_views() != model.n_views() {
        return Err(Error::invalid("dataset and model view counts differ"));
    }
    let mut opt = train::adam(model.trainable_vars(), cfg.schedule.lr)?;
    let mut mask_rng = seeded(cfg.seed, stream::MASK);
    let mut noise_rng = seeded(cfg.seed, stream::NOISE);
    let mut drop_rng = seeded(cfg.seed, stream::DROPOUT);
    let split = cfg.split.to_string();
    let mut curve = Vec::with_capacity(cfg.schedule.epochs);
    for epoch in 0..cfg.schedule.epochs {
        let lr = cfg.schedule.lr_at(epoch);
        train::set_lr(&mut opt, lr);
        let mut total = Mean::default();
        let mut kl = Mean::default();
        let mut recon = vec![Mean::default(); model.n_views()];
        let batches = dataset.iter_batches(
            &split,
            cfg.schedule.batch_size,
            true,
            epoch_seed(cfg.seed, epoch),
        )?;
        for (b, batch) in batches.enumerate() {
            let masks = draw_batch_masks(&cfg.mask, &batch, &mut mask_rng)?;
            let masked = apply_mask(&batch, &masks, &cfg.mask)?;
            let x = batch_tensors(&batch, model.dtype)?;
            let xm = batch_tensors(&masked, model.dtype)?;
            let noise = train::gaussian_noise(
                &mut noise_rng,
                (batch.len(), model.latent_dim()),
                model.dtype,
            )?;
            let mut pass = if cfg.dropout {
                Pass::train(&mut drop_rng)
            } else {
                Pass::train_no_dropout()
            };
            let loss = match mcp_loss(model, &xm, &x, &noise, cfg.beta, &mut pass) {
                Ok(l) => l,
                Err(Error::NonFinite(what)) => {
                    return Err(diverged(epoch, b, what, dump_dir.map(|d| (d, "stage1-diverged.ckpt")), &model.params));
                }
                Err(e) => return Err(e),
            };
            let parts = loss.values()?;
            if !parts.total.is_finite() {
                let what = format!("stage-I loss is {}", parts.total);
                return Err(diverged(epoch, b, what, dump_dir.map(|d| (d, "stage1-diverged.ckpt")), &model.params));
            }
            train::step(&mut opt, &loss.total)?;
            let n = batch.len();
            total.add(parts.total, n);
            kl.add(parts.kl, n);
            for (m, r) in recon.iter_mut().zip(&parts.recon) {
                m.add(*r, n);
            }
        }
        let row = Stage1Epoch {
            epoch,
            lr,
            total: total.get(),
            recon: recon.iter().map(Mean::get).collect(),
            kl: kl.get(),
        };
        log::info!(
            "stage1 epoch {epoch}: loss {:.4} kl {:.4} lr {lr:.2e}",
            row.total,
            row.kl
        );
        curve.push(row);
    }
    model.freeze();
    Ok(curve)
}

/// Posterior means `μ^c` for `indices`, row-major `(len, d_c)`, computed in eval mode.
pub fn consistent_means(
    model: &ConsistentModel,
    dataset: &MultiViewDataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(indices.len() * model.latent_dim());
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.batch(chunk)?;
        let x = batch_tensors(&batch, model.dtype)?;
        let post = encode_consistent(model, &x, &mut Pass::eval())?;
        out.extend(train::to_rows(&post.mean)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(views: usize, fusion: Fusion) -> ConsistentSpec {
        let view = EncoderSpec {
            base_channels: 4,
            ..EncoderSpec::new(32, 1, 3)
        };
        ConsistentSpec {
            views: vec![view; views],
            latent_dim: 3,
            fusion,
        }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = seeded(seed, 0);
        let v: Vec<f32> = (0..n * 32 * 32).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, (n, 1, 32, 32), &Device::Cpu).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    #[test]
    fn posterior_shapes_and_purity() {
        let model = ConsistentModel::new(&spec(2, Fusion::Concat), 0, DType::F32).unwrap();
        let one = [images(1, 1), images(1, 2)];
        let post = encode_consistent(&model, &one, &mut Pass::eval()).unwrap();
        assert_eq!(post.mean.dims(), &[1, 3]);

        let a = images(3, 3);
        let b = images(3, 4);
        let dup_a = Tensor::cat(&[&a, &a.narrow(0, 0, 1).unwrap()], 0).unwrap();
        let dup_b = Tensor::cat(&[&b, &b.narrow(0, 0, 1).unwrap()], 0).unwrap();
        let post = encode_consistent(&model, &[dup_a, dup_b], &mut Pass::eval()).unwrap();
        let m = rows(&post.mean);
        assert_eq!(m[0], m[3]);

        let perm = Tensor::new(&[2u32, 0, 1], &Device::Cpu).unwrap();
        let base = rows(&encode_consistent(&model, &[a.clone(), b.clone()], &mut Pass::eval()).unwrap().mean);
        let pa = a.index_select(&perm, 0).unwrap();
        let pb = b.index_select(&perm, 0).unwrap();
        let permuted = rows(&encode_consistent(&model, &[pa, pb], &mut Pass::eval()).unwrap().mean);
        assert_eq!(permuted, vec![base[2].clone(), base[0].clone(), base[1].clone()]);

        assert!(encode_consistent(&model, &[a], &mut Pass::eval()).is_err());
    }

    #[test]
    fn encoding_never_runs_decoders() {
        let model = ConsistentModel::new(&spec(2, Fusion::Poe), 0, DType::F32).unwrap();
        encode_consistent(&model, &[images(2, 0), images(2, 1)], &mut Pass::eval()).unwrap();
        assert!(model.decoders().iter().all(|d| d.calls() == 0));
    }

    #[test]
    fn loss_is_sum_of_parts() {
        let model = ConsistentModel::new(&spec(2, Fusion::Concat), 5, DType::F64).unwrap();
        let x: Vec<Tensor> = (0..2).map(|i| images(4, i).to_dtype(DType::F64).unwrap()).collect();
        let noise = train::gaussian_noise(&mut seeded(0, 0), (4, 3), DType::F64).unwrap();
        let beta = 0.7;
        let loss = mcp_loss(&model, &x, &x, &noise, beta, &mut Pass::eval()).unwrap();
        let p = loss.values().unwrap();
        assert!(p.kl >= 0.0);
        assert!((p.total - (p.recon.iter().sum::<f64>() + beta * p.kl)).abs() < 1e-9);
        let again = mcp_loss(&model, &x, &x, &noise, beta, &mut Pass::eval()).unwrap();
        assert_eq!(again.values().unwrap(), p);
    }

    #[test]
    fn prior_posterior_leaves_reconstruction_only() {
        let model = ConsistentModel::new(&spec(1, Fusion::Concat), 5, DType::F64).unwrap();
        let x = vec![images(2, 0).to_dtype(DType::F64).unwrap()];
        let zeros = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        let post = GaussianPosterior::new(zeros.clone(), zeros.clone()).unwrap();
        let loss =
            mcp_loss_from_posterior(&model, &post, &x, &zeros, 1.0, &mut Pass::eval()).unwrap();
        let p = loss.values().unwrap();
        assert_eq!(p.kl, 0.0);
        assert_eq!(p.total, p.recon[0]);
    }

    #[test]
    fn recon_error_zero_for_exact_output() {
        let x = images(2, 0);
        assert_eq!(train::scalar(&recon_error(&x, &x).unwrap()).unwrap(), 0.0);
        let y = (&x + 0.5).unwrap();
        // 1024 pixels × 0.25 each
        assert!((train::scalar(&recon_error(&x, &y).unwrap()).unwrap() - 256.0).abs() < 1e-3);
        assert!(recon_error(&x, &images(3, 0)).is_err());
    }

    #[test]
    fn poe_with_prior_expert() {
        let d = &Device::Cpu;
        let e = GaussianPosterior::new(
            Tensor::new(&[[2.0f64]], d).unwrap(),
            Tensor::new(&[[0.0f64]], d).unwrap(),
        )
        .unwrap();
        let p = product_of_experts(&[e]).unwrap();
        assert_eq!(p.mean.to_vec2::<f64>().unwrap()[0][0], 1.0);
        assert!((p.logvar.to_vec2::<f64>().unwrap()[0][0] + 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shared_trunk_only_for_matching_views() {
        let mut s = spec(2, Fusion::Concat);
        assert!(s.shared_trunk());
        s.views[1].channels = 3;
        assert!(!s.shared_trunk());
        let model = ConsistentModel::new(&s, 0, DType::F32).unwrap();
        assert!(model.params().get("encoder.trunk1.block0.conv1.weight").is_some());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage1.ckpt");
        let mut model = ConsistentModel::new(&spec(2, Fusion::Concat), 3, DType::F32).unwrap();
        model.freeze();
        model.save(&path).unwrap();
        let back = ConsistentModel::load(&path, DType::F32).unwrap();
        assert!(back.is_frozen());
        assert_eq!(back.spec(), model.spec());
        assert_eq!(
            back.params().fingerprint().unwrap(),
            model.params().fingerprint().unwrap()
        );
    }
}
