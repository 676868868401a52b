//! The set-encoder / hypernetwork-decoder / hyponet model: a per-sample MLP
//! pooled by averaging produces a latent embedding, ten decoder blocks turn
//! the embedding into the weight and bias groups of a small neural field
//! (the hyponet), and the hyponet evaluates the material's BRDF at arbitrary
//! (H, D) coordinates in mapped space.
//!
//! Pooling averages per-sample embeddings over the *distinct* samples in a
//! canonical order (sorted by the 9-vector input, exact duplicates merged,
//! pairwise summation), which makes the embedding bitwise invariant to
//! sample order and to arbitrary duplication of samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::merl::{BrdfGrid, GridRes, MaterialRecord, MerlError};
use crate::nn::{
    adam_step, init_params, mlp_backward, mlp_forward, Activation, AdamConfig, AdamState, Batch,
    MlpParams, MlpSpec, NnError,
};
use crate::param::{
    angles_to_halfdiff, extract_samples, index_to_angles, sample_uniform, ParamError, SampleSet,
};
use crate::preproc::{log_relative_unmap, PreprocError, ReferenceTable};
use crate::threading::{parallel_map, parallel_map_ranges};

pub const DEFAULT_HYPONET_LAYERS: [usize; 6] = [6, 60, 60, 60, 60, 3];
pub const DEFAULT_Z_DIM: usize = 40;
pub const COMPRESSION_Z_DIM: usize = 7;

const CHECKPOINT_MAGIC: &[u8; 4] = b"BHN1";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HypernetError {
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("checkpoint length mismatch")]
    LengthMismatch,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error(transparent)]
    Merl(#[from] MerlError),
}

/// Latent code of one material.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentEmbedding(pub Vec<f64>);

impl LatentEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Flattened hyponet parameter vector (weight matrices in layer order, then
/// bias vectors) plus the architecture it instantiates.
#[derive(Debug, Clone, PartialEq)]
pub struct HyponetWeights {
    pub spec: MlpSpec,
    pub values: Vec<f64>,
}

/// Architectural knobs of a [`HyperModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelShape {
    pub z_dim: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub hyponet_layers: Vec<usize>,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            z_dim: DEFAULT_Z_DIM,
            encoder_hidden: 128,
            decoder_hidden: 256,
            hyponet_layers: DEFAULT_HYPONET_LAYERS.to_vec(),
        }
    }
}

/// Encoder, decoder blocks, hyponet architecture and the reference table
/// needed to map samples at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperModel {
    z_dim: usize,
    encoder_spec: MlpSpec,
    encoder: MlpParams,
    block_specs: Vec<MlpSpec>,
    blocks: Vec<MlpParams>,
    hyponet_spec: MlpSpec,
    /// Start offset of each block's output group in the flattened hyponet
    /// parameter vector.
    group_offsets: Vec<usize>,
    reference: ReferenceTable,
}

/// Hyponet parameter groups in decoder-block order: the weight matrix of
/// each linear layer, then the bias vector of each linear layer.
fn hyponet_groups(hyponet_spec: &MlpSpec) -> Vec<usize> {
    let sizes = &hyponet_spec.layer_sizes;
    let n = hyponet_spec.n_linear();
    let mut groups = Vec::with_capacity(2 * n);
    for l in 0..n {
        groups.push(sizes[l] * sizes[l + 1]);
    }
    for l in 0..n {
        groups.push(sizes[l + 1]);
    }
    groups
}

impl HyperModel {
    pub fn new(
        shape: &ModelShape,
        reference: ReferenceTable,
        seed: u64,
    ) -> Result<Self, HypernetError> {
        let encoder_spec = MlpSpec::new(
            vec![9, shape.encoder_hidden, shape.encoder_hidden, shape.z_dim],
            Activation::Relu,
            Activation::Identity,
        )?;
        let hyponet_spec = MlpSpec::new(
            shape.hyponet_layers.clone(),
            Activation::Relu,
            Activation::Relu,
        )?;
        if hyponet_spec.input_dim() != 6 || hyponet_spec.output_dim() != 3 {
            return Err(HypernetError::DimensionMismatch(
                "hyponet must map 6 coordinates to 3 values".into(),
            ));
        }
        let groups = hyponet_groups(&hyponet_spec);
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let encoder = init_params(&encoder_spec, seeds.gen());
        let mut block_specs = Vec::with_capacity(groups.len());
        let mut blocks = Vec::with_capacity(groups.len());
        let mut group_offsets = Vec::with_capacity(groups.len());
        let mut off = 0;
        for (k, &g) in groups.iter().enumerate() {
            let spec = MlpSpec::new(
                vec![shape.z_dim, shape.decoder_hidden, shape.decoder_hidden, g],
                Activation::Relu,
                Activation::Identity,
            )?;
            let mut params = init_params(&spec, seeds.gen());
            // At init the generated field must look like a conventionally
            // initialized MLP, or its output activations die and the
            // gradient vanishes. The z-independent part (the final bias of
            // the block) carries a standard uniform fan-in draw for the
            // weight groups; the z-dependent part starts heavily damped.
            let last = params.layers.last_mut().unwrap();
            for w in &mut last.weight {
                *w *= 0.1;
            }
            // The generated output bias starts positive so the field's
            // output activation begins in its linear region; mapped
            // reflectance targets sit around ln 2, never at zero.
            if k + 1 == groups.len() {
                for b in &mut last.bias {
                    *b = 0.5;
                }
            }
            block_specs.push(spec);
            blocks.push(params);
            group_offsets.push(off);
            off += g;
        }
        debug_assert_eq!(off, hyponet_spec.param_len());
        Ok(Self {
            z_dim: shape.z_dim,
            encoder_spec,
            encoder,
            block_specs,
            blocks,
            hyponet_spec,
            group_offsets,
            reference,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn hyponet_spec(&self) -> &MlpSpec {
        &self.hyponet_spec
    }

    /// Length of the flattened hyponet parameter vector.
    pub fn hyponet_weight_len(&self) -> usize {
        self.hyponet_spec.param_len()
    }

    pub fn reference(&self) -> &ReferenceTable {
        &self.reference
    }

    /// All trainable parameters (encoder, then each decoder block) as one
    /// flat vector; the layout backs the optimizer and the checkpoint.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut flat = self.encoder.flatten();
        for b in &self.blocks {
            flat.extend(b.flatten());
        }
        flat
    }

    pub fn set_param_vector(&mut self, flat: &[f64]) -> Result<(), HypernetError> {
        let enc_len = self.encoder_spec.param_len();
        let total: usize =
            enc_len + self.block_specs.iter().map(|s| s.param_len()).sum::<usize>();
        if flat.len() != total {
            return Err(HypernetError::DimensionMismatch(format!(
                "parameter vector length {} != {total}",
                flat.len()
            )));
        }
        self.encoder = MlpParams::from_flat(&self.encoder_spec, &flat[..enc_len])?;
        let mut off = enc_len;
        for (spec, block) in self.block_specs.iter().zip(self.blocks.iter_mut()) {
            let len = spec.param_len();
            *block = MlpParams::from_flat(spec, &flat[off..off + len])?;
            off += len;
        }
        Ok(())
    }
}

/// Canonical form of a sample set for pooling: distinct encoder inputs in
/// sorted order. Multiplicities are deliberately dropped so that duplicated
/// samples cannot change the embedding.
struct CanonicalSet {
    inputs: Batch,
}

fn canonicalize(set: &SampleSet) -> Result<CanonicalSet, HypernetError> {
    if set.is_empty() {
        return Err(HypernetError::EmptySampleSet);
    }
    let mut rows: Vec<[f64; 9]> = set.samples.iter().map(|s| s.encoder_input()).collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut data = Vec::new();
    let mut n_distinct = 0usize;
    let mut prev: Option<[f64; 9]> = None;
    for row in rows {
        let same = prev
            .map(|p| p.iter().zip(row.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
            .unwrap_or(false);
        if !same {
            data.extend_from_slice(&row);
            n_distinct += 1;
            prev = Some(row);
        }
    }
    Ok(CanonicalSet {
        inputs: Batch::new(n_distinct, 9, data)?,
    })
}

/// Pairwise (recursive halving) sum of rows.
fn pairwise_sum(rows: &Batch, lo: usize, hi: usize) -> Vec<f64> {
    if hi - lo == 1 {
        return rows.row(lo).to_vec();
    }
    let mid = lo + (hi - lo) / 2;
    let mut left = pairwise_sum(rows, lo, mid);
    let right = pairwise_sum(rows, mid, hi);
    for (a, b) in left.iter_mut().zip(right) {
        *a += b;
    }
    left
}

struct EncodeCache {
    cache: crate::nn::ForwardCache,
    outputs: Batch,
}

fn encode_internal(
    model: &HyperModel,
    set: &SampleSet,
) -> Result<(LatentEmbedding, EncodeCache), HypernetError> {
    let canonical = canonicalize(set)?;
    let (outputs, cache) = mlp_forward(&model.encoder_spec, &model.encoder, &canonical.inputs)?;
    let mut z = pairwise_sum(&outputs, 0, outputs.rows);
    let n = outputs.rows as f64;
    for v in &mut z {
        *v /= n;
    }
    Ok((LatentEmbedding(z), EncodeCache { cache, outputs }))
}

/// Mean-pooled embedding of a sample set; invariant to sample order.
pub fn encode(model: &HyperModel, set: &SampleSet) -> Result<LatentEmbedding, HypernetError> {
    encode_internal(model, set).map(|(z, _)| z)
}

fn decode_internal(
    model: &HyperModel,
    z: &LatentEmbedding,
) -> Result<(Vec<f64>, Vec<crate::nn::ForwardCache>), HypernetError> {
    if z.dim() != model.z_dim {
        return Err(HypernetError::DimensionMismatch(format!(
            "embedding has dim {}, model expects {}",
            z.dim(),
            model.z_dim
        )));
    }
    let input = Batch::new(1, model.z_dim, z.0.clone())?;
    let mut values = Vec::with_capacity(model.hyponet_weight_len());
    let mut caches = Vec::with_capacity(model.blocks.len());
    for (spec, block) in model.block_specs.iter().zip(&model.blocks) {
        let (out, cache) = mlp_forward(spec, block, &input)?;
        values.extend_from_slice(&out.data);
        caches.push(cache);
    }
    Ok((values, caches))
}

/// Emits the hyponet parameter vector for an embedding: one decoder block
/// per weight matrix, then one per bias vector.
pub fn decode(model: &HyperModel, z: &LatentEmbedding) -> Result<HyponetWeights, HypernetError> {
    let (values, _) = decode_internal(model, z)?;
    Ok(HyponetWeights {
        spec: model.hyponet_spec.clone(),
        values,
    })
}

/// Evaluates a generated hyponet at a batch of 6-vector (H, D) coordinates.
/// Outputs are nonnegative mapped reflectance triples.
pub fn hyponet_eval(
    weights: &HyponetWeights,
    coords: &[[f64; 6]],
) -> Result<Vec<[f64; 3]>, HypernetError> {
    let params = MlpParams::from_flat(&weights.spec, &weights.values)?;
    let mut data = Vec::with_capacity(coords.len() * 6);
    for c in coords {
        data.extend_from_slice(c);
    }
    let batch = Batch::new(coords.len(), 6, data)?;
    let (out, _) = mlp_forward(&weights.spec, &params, &batch)?;
    Ok((0..coords.len())
        .map(|r| {
            let row = out.row(r);
            [row[0], row[1], row[2]]
        })
        .collect())
}

/// Components of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub weight_reg: f64,
    pub latent_reg: f64,
}

fn material_forward(
    model: &HyperModel,
    set: &SampleSet,
    lambda1: f64,
    lambda2: f64,
) -> Result<MaterialForward, HypernetError> {
    let (z, enc_cache) = encode_internal(model, set)?;
    let (w_flat, block_caches) = decode_internal(model, &z)?;
    let hyponet = MlpParams::from_flat(&model.hyponet_spec, &w_flat)?;

    let n = set.len();
    let mut coord_data = Vec::with_capacity(n * 6);
    for s in &set.samples {
        coord_data.extend_from_slice(&s.coords());
    }
    let coords = Batch::new(n, 6, coord_data)?;
    let (pred, hyp_cache) = mlp_forward(&model.hyponet_spec, &hyponet, &coords)?;

    let mut rec = 0.0;
    let mut residuals = Vec::with_capacity(n);
    for (r, s) in set.samples.iter().enumerate() {
        let p = pred.row(r);
        let res = [
            (p[0] - s.rho_mapped[0]) * s.cos_theta,
            (p[1] - s.rho_mapped[1]) * s.cos_theta,
            (p[2] - s.rho_mapped[2]) * s.cos_theta,
        ];
        let norm = (res[0] * res[0] + res[1] * res[1] + res[2] * res[2]).sqrt();
        rec += norm;
        residuals.push((res, norm));
    }
    rec /= n as f64;

    let w_len = w_flat.len() as f64;
    let weight_reg = w_flat.iter().map(|v| v * v).sum::<f64>() / w_len;
    let latent_reg = z.0.iter().map(|v| v * v).sum::<f64>() / z.dim() as f64;
    let parts = LossParts {
        total: rec + lambda1 * weight_reg + lambda2 * latent_reg,
        rec,
        weight_reg,
        latent_reg,
    };
    Ok(MaterialForward {
        parts,
        z,
        enc_cache,
        w_flat,
        block_caches,
        hyponet,
        hyp_cache,
        residuals,
    })
}

struct MaterialForward {
    parts: LossParts,
    z: LatentEmbedding,
    enc_cache: EncodeCache,
    w_flat: Vec<f64>,
    block_caches: Vec<crate::nn::ForwardCache>,
    hyponet: MlpParams,
    hyp_cache: crate::nn::ForwardCache,
    residuals: Vec<([f64; 3], f64)>,
}

fn material_backward(
    model: &HyperModel,
    set: &SampleSet,
    fwd: &MaterialForward,
    lambda1: f64,
    lambda2: f64,
) -> Result<Vec<f64>, HypernetError> {
    let n = set.len();
    // d rec / d pred: cos * unit residual / N (zero where the norm is zero).
    let mut grad_pred = Batch::zeros(n, 3);
    for (r, s) in set.samples.iter().enumerate() {
        let (res, norm) = fwd.residuals[r];
        if norm > 0.0 {
            let scale = s.cos_theta / (norm * n as f64);
            let row = &mut grad_pred.data[r * 3..r * 3 + 3];
            for c in 0..3 {
                row[c] = scale * res[c];
            }
        }
    }
    let (hyp_grads, _) = mlp_backward(&model.hyponet_spec, &fwd.hyponet, &fwd.hyp_cache, &grad_pred)?;
    let mut gw = hyp_grads.flatten();
    let w_len = fwd.w_flat.len() as f64;
    for (g, w) in gw.iter_mut().zip(&fwd.w_flat) {
        *g += 2.0 * lambda1 * w / w_len;
    }

    // Through the decoder blocks into the embedding.
    let mut gz = vec![0.0; model.z_dim];
    let mut block_grads = Vec::with_capacity(model.blocks.len());
    for (k, (spec, block)) in model.block_specs.iter().zip(&model.blocks).enumerate() {
        let group = spec.output_dim();
        let off = model.group_offsets[k];
        let grad_out = Batch::new(1, group, gw[off..off + group].to_vec())?;
        let (bg, gin) = mlp_backward(spec, block, &fwd.block_caches[k], &grad_out)?;
        for (a, b) in gz.iter_mut().zip(&gin.data) {
            *a += b;
        }
        block_grads.push(bg);
    }
    for (g, z) in gz.iter_mut().zip(&fwd.z.0) {
        *g += 2.0 * lambda2 * z / model.z_dim as f64;
    }

    // Through the mean pool into the encoder.
    let n_distinct = fwd.enc_cache.outputs.rows;
    let scale = 1.0 / n_distinct as f64;
    let mut enc_grad_out = Batch::zeros(n_distinct, model.z_dim);
    for i in 0..n_distinct {
        let row = &mut enc_grad_out.data[i * model.z_dim..(i + 1) * model.z_dim];
        for (r, g) in row.iter_mut().zip(&gz) {
            *r = scale * g;
        }
    }
    let (enc_grads, _) =
        mlp_backward(&model.encoder_spec, &model.encoder, &fwd.enc_cache.cache, &enc_grad_out)?;

    let mut flat = enc_grads.flatten();
    for bg in block_grads {
        flat.extend(bg.flatten());
    }
    Ok(flat)
}

/// Evaluates the training objective over a batch of per-material sample
/// sets (each set is both encoder input and reconstruction target).
pub fn loss(
    model: &HyperModel,
    batch: &[SampleSet],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossParts, HypernetError> {
    if batch.is_empty() {
        return Err(HypernetError::EmptySampleSet);
    }
    let mut acc = LossParts::default();
    for set in batch {
        let fwd = material_forward(model, set, lambda1, lambda2)?;
        acc.total += fwd.parts.total;
        acc.rec += fwd.parts.rec;
        acc.weight_reg += fwd.parts.weight_reg;
        acc.latent_reg += fwd.parts.latent_reg;
    }
    let m = batch.len() as f64;
    acc.total /= m;
    acc.rec /= m;
    acc.weight_reg /= m;
    acc.latent_reg /= m;
    Ok(acc)
}

/// Objective plus analytic gradients with respect to every encoder and
/// decoder parameter, in [`HyperModel::param_vector`] layout. Per-material
/// work fans out over `threads`; the reduction order is fixed, so results
/// are identical for any thread count.
pub fn loss_with_grads(
    model: &HyperModel,
    batch: &[SampleSet],
    lambda1: f64,
    lambda2: f64,
    threads: usize,
) -> Result<(LossParts, Vec<f64>), HypernetError> {
    if batch.is_empty() {
        return Err(HypernetError::EmptySampleSet);
    }
    let per_material: Vec<Result<(LossParts, Vec<f64>), HypernetError>> =
        parallel_map(batch, threads, |set| {
            let fwd = material_forward(model, set, lambda1, lambda2)?;
            let grads = material_backward(model, set, &fwd, lambda1, lambda2)?;
            Ok((fwd.parts, grads))
        });
    let m = batch.len() as f64;
    let mut acc = LossParts::default();
    let mut grads: Option<Vec<f64>> = None;
    for item in per_material {
        let (parts, g) = item?;
        acc.total += parts.total / m;
        acc.rec += parts.rec / m;
        acc.weight_reg += parts.weight_reg / m;
        acc.latent_reg += parts.latent_reg / m;
        match &mut grads {
            None => {
                let mut g = g;
                for v in &mut g {
                    *v /= m;
                }
                grads = Some(g);
            }
            Some(total) => {
                for (a, b) in total.iter_mut().zip(&g) {
                    *a += b / m;
                }
            }
        }
    }
    Ok((acc, grads.unwrap()))
}

/// Training hyperparameters. An epoch visits every material once in a
/// seeded random order, drawing a fresh uniform texel subset per step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub shape: ModelShape,
    pub lambda1: f64,
    pub lambda2: f64,
    pub epochs: usize,
    pub materials_per_step: usize,
    pub samples_per_material: usize,
    pub learning_rate: f64,
    /// Per-step multiplicative learning-rate decay. The norm-based
    /// objective has constant-magnitude gradients near an optimum, so Adam
    /// needs a shrinking step to converge rather than hover.
    pub lr_decay: f64,
    /// Steps of linear learning-rate warmup. Early Adam steps on the norm
    /// objective are effectively sign steps of full magnitude and can park
    /// the generated field's output activation in its dead region; ramping
    /// in avoids that.
    pub warmup_steps: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            shape: ModelShape::default(),
            lambda1: 1e-2,
            lambda2: 1e-3,
            epochs: 80,
            materials_per_step: 8,
            samples_per_material: 512,
            learning_rate: 1e-4,
            lr_decay: 1.0,
            warmup_steps: 0,
            seed: 0,
            threads: 1,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rec: f64,
}

/// Seeded, deterministic training loop: Adam over encoder and decoder
/// jointly. The reference table must come from the training materials.
pub fn train(
    dataset: &[MaterialRecord],
    reference: &ReferenceTable,
    config: &TrainConfig,
) -> Result<(HyperModel, Vec<EpochLog>), HypernetError> {
    if dataset.is_empty() {
        return Err(HypernetError::EmptySampleSet);
    }
    let res = dataset[0].grid.res();
    if reference.res() != res {
        return Err(HypernetError::DimensionMismatch(
            "reference table resolution does not match dataset".into(),
        ));
    }
    let mut model = HyperModel::new(&config.shape, reference.clone(), config.seed)?;
    let mut params = model.param_vector();
    let mut opt_state = AdamState::new(params.len());
    let mut step = 0usize;
    let mut decayed = config.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E3779B97F4A7C15));
    let n_samples = config.samples_per_material.min(res.texel_count());
    let materials_per_step = config.materials_per_step.max(1).min(dataset.len());

    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        // Seeded shuffle of the material order for this epoch.
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_rec = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(materials_per_step) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &mi in chunk {
                let draw_seed: u64 = rng.gen();
                let indices = sample_uniform(&res, n_samples, draw_seed)?;
                let extraction = extract_samples(&dataset[mi].grid, reference, &indices)?;
                batch.push(extraction.set);
            }
            model.set_param_vector(&params)?;
            let (parts, grads) =
                loss_with_grads(&model, &batch, config.lambda1, config.lambda2, config.threads)?;
            let lr = if step < config.warmup_steps {
                config.learning_rate * (step + 1) as f64 / config.warmup_steps as f64
            } else {
                decayed
            };
            let opt_cfg = AdamConfig {
                learning_rate: lr,
                ..AdamConfig::default()
            };
            let (next, next_state) = adam_step(&params, &grads, &opt_state, &opt_cfg)?;
            if step >= config.warmup_steps {
                decayed *= config.lr_decay;
            }
            step += 1;
            params = next;
            opt_state = next_state;
            epoch_loss += parts.total;
            epoch_rec += parts.rec;
            steps += 1;
        }
        log.push(EpochLog {
            epoch,
            mean_loss: epoch_loss / steps as f64,
            mean_rec: epoch_rec / steps as f64,
        });
    }
    model.set_param_vector(&params)?;
    Ok((model, log))
}

/// Predicts the full grid from a sparse sample set: encode, decode, then
/// evaluate the hyponet at every texel center and unmap against the model's
/// reference table. Every output value is nonnegative.
pub fn reconstruct(
    model: &HyperModel,
    sparse: &SampleSet,
    threads: usize,
) -> Result<BrdfGrid, HypernetError> {
    let z = encode(model, sparse)?;
    reconstruct_from_embedding(model, &z, threads)
}

/// Decoder half of [`reconstruct`], reusable for interpolated embeddings.
pub fn reconstruct_from_embedding(
    model: &HyperModel,
    z: &LatentEmbedding,
    threads: usize,
) -> Result<BrdfGrid, HypernetError> {
    let weights = decode(model, z)?;
    let res = model.reference.res();
    let t = res.texel_count();
    let chunks = parallel_map_ranges(t, threads, |start, len| -> Result<Vec<f64>, HypernetError> {
        let coords: Vec<[f64; 6]> = (start..start + len)
            .map(|ti| {
                let g = crate::param::GridIndex::from_linear(ti, &res);
                let (h, d) = angles_to_halfdiff(&index_to_angles(&g, &res));
                [h.x, h.y, h.z, d.x, d.y, d.z]
            })
            .collect();
        let mapped = hyponet_eval(&weights, &coords)?;
        let mut linear = vec![0.0; 3 * len];
        for (i, m) in mapped.iter().enumerate() {
            let ti = start + i;
            for c in 0..3 {
                linear[c * len + i] = log_relative_unmap(m[c], model.reference.at(ti, c));
            }
        }
        Ok(linear)
    });
    let mut values = vec![0.0; 3 * t];
    let mut start = 0usize;
    for chunk in chunks {
        let chunk = chunk?;
        let len = chunk.len() / 3;
        for c in 0..3 {
            values[c * t + start..c * t + start + len]
                .copy_from_slice(&chunk[c * len..(c + 1) * len]);
        }
        start += len;
    }
    Ok(BrdfGrid::from_linear(res, values)?)
}

/// Compresses a dense material into its latent code by encoding a uniform
/// texel draw.
pub fn compress(
    model: &HyperModel,
    material: &MaterialRecord,
    n_samples: usize,
    seed: u64,
) -> Result<LatentEmbedding, HypernetError> {
    let res = material.grid.res();
    if res != model.reference.res() {
        return Err(HypernetError::DimensionMismatch(
            "material resolution does not match model reference".into(),
        ));
    }
    let indices = sample_uniform(&res, n_samples, seed)?;
    let extraction = extract_samples(&material.grid, &model.reference, &indices)?;
    encode(model, &extraction.set)
}

/// Linear interpolation between two embeddings.
pub fn interpolate(
    a: &LatentEmbedding,
    b: &LatentEmbedding,
    alpha: f64,
) -> Result<LatentEmbedding, HypernetError> {
    if a.dim() != b.dim() {
        return Err(HypernetError::DimensionMismatch(format!(
            "embedding dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(LatentEmbedding(
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| (1.0 - alpha) * x + alpha * y)
            .collect(),
    ))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn sizes(&mut self, sizes: &[usize]) {
        self.u32(sizes.len() as u32);
        for &s in sizes {
            self.u32(s as u32);
        }
    }
    fn floats(&mut self, vals: &[f64]) {
        for v in vals {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HypernetError> {
        if self.pos + n > self.bytes.len() {
            return Err(HypernetError::LengthMismatch);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, HypernetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, HypernetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn sizes(&mut self) -> Result<Vec<usize>, HypernetError> {
        let n = self.u32()? as usize;
        if n > 1024 {
            return Err(HypernetError::LengthMismatch);
        }
        (0..n).map(|_| Ok(self.u32()? as usize)).collect()
    }
    fn floats(&mut self, n: usize) -> Result<Vec<f64>, HypernetError> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serializes the full model: architecture, parameters and reference table,
/// with a trailing length-check footer.
pub fn save_checkpoint(model: &HyperModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u32(model.z_dim as u32);
    w.sizes(&model.hyponet_spec.layer_sizes);
    w.sizes(&model.encoder_spec.layer_sizes);
    w.u32(model.block_specs.len() as u32);
    for spec in &model.block_specs {
        w.sizes(&spec.layer_sizes);
    }
    w.floats(&model.encoder.flatten());
    for b in &model.blocks {
        w.floats(&b.flatten());
    }
    let r = model.reference.res();
    for dim in [r.theta_h, r.theta_d, r.phi_d] {
        w.u32(dim as u32);
    }
    w.floats(model.reference.values());
    let body_len = w.0.len() as u64;
    w.u64(body_len);
    w.0
}

/// Inverse of [`save_checkpoint`]; bitwise on all parameters and the
/// reference table.
pub fn load_checkpoint(bytes: &[u8]) -> Result<HyperModel, HypernetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(HypernetError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(HypernetError::VersionMismatch(version));
    }
    let z_dim = r.u32()? as usize;
    let hyponet_spec = MlpSpec::new(r.sizes()?, Activation::Relu, Activation::Relu)?;
    let encoder_spec = MlpSpec::new(r.sizes()?, Activation::Relu, Activation::Identity)?;
    let n_blocks = r.u32()? as usize;
    let groups = hyponet_groups(&hyponet_spec);
    if n_blocks != groups.len() || encoder_spec.input_dim() != 9 || encoder_spec.output_dim() != z_dim
    {
        return Err(HypernetError::LengthMismatch);
    }
    let mut block_specs = Vec::with_capacity(n_blocks);
    for &g in &groups {
        let spec = MlpSpec::new(r.sizes()?, Activation::Relu, Activation::Identity)?;
        if spec.input_dim() != z_dim || spec.output_dim() != g {
            return Err(HypernetError::LengthMismatch);
        }
        block_specs.push(spec);
    }
    let encoder = MlpParams::from_flat(&encoder_spec, &r.floats(encoder_spec.param_len())?)?;
    let mut blocks = Vec::with_capacity(n_blocks);
    for spec in &block_specs {
        blocks.push(MlpParams::from_flat(spec, &r.floats(spec.param_len())?)?);
    }
    let res = GridRes {
        theta_h: r.u32()? as usize,
        theta_d: r.u32()? as usize,
        phi_d: r.u32()? as usize,
    };
    let reference = ReferenceTable::new(res, r.floats(3 * res.texel_count())?)?;
    let body_len = r.pos as u64;
    let footer = r.u64()?;
    if footer != body_len || r.pos != bytes.len() {
        return Err(HypernetError::LengthMismatch);
    }
    let mut group_offsets = Vec::with_capacity(groups.len());
    let mut off = 0;
    for &g in &groups {
        group_offsets.push(off);
        off += g;
    }
    Ok(HyperModel {
        z_dim,
        encoder_spec,
        encoder,
        block_specs,
        blocks,
        hyponet_spec,
        group_offsets,
        reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merl::REDUCED_RES;
    use crate::param::{Direction, Sample};
    use crate::preproc::compute_reference_median;
    use crate::synth::toy_dataset;

    fn tiny_shape() -> ModelShape {
        ModelShape {
            z_dim: 4,
            encoder_hidden: 16,
            decoder_hidden: 16,
            hyponet_layers: vec![6, 8, 8, 8, 8, 3],
        }
    }

    fn tiny_model(seed: u64) -> HyperModel {
        HyperModel::new(&tiny_shape(), ReferenceTable::zeros(REDUCED_RES), seed).unwrap()
    }

    fn random_set(n: usize, seed: u64) -> SampleSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let h = Direction::normalized(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.1..1.0),
                )
                .unwrap();
                let d = Direction::normalized(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(0.1..1.0),
                )
                .unwrap();
                Sample {
                    h,
                    d,
                    rho_mapped: [
                        rng.gen_range(0.0..2.0),
                        rng.gen_range(0.0..2.0),
                        rng.gen_range(0.0..2.0),
                    ],
                    cos_theta: rng.gen_range(0.05..1.0),
                }
            })
            .collect();
        SampleSet { samples }
    }

    #[test]
    fn default_hyponet_weight_length() {
        let model = HyperModel::new(
            &ModelShape::default(),
            ReferenceTable::zeros(REDUCED_RES),
            0,
        )
        .unwrap();
        // 6*60 + 3*60*60 + 60*3 weights plus 4*60 + 3 biases.
        assert_eq!(model.hyponet_weight_len(), 11_583);
        let z = LatentEmbedding(vec![0.1; model.z_dim()]);
        assert_eq!(decode(&model, &z).unwrap().values.len(), 11_583);
    }

    #[test]
    fn encode_single_sample_is_its_own_embedding() {
        let model = tiny_model(1);
        let set = random_set(1, 2);
        let z = encode(&model, &set).unwrap();
        let input = Batch::new(1, 9, set.samples[0].encoder_input().to_vec()).unwrap();
        let (out, _) = mlp_forward(&model.encoder_spec, &model.encoder, &input).unwrap();
        assert_eq!(z.0, out.data);
    }

    #[test]
    fn encode_is_bitwise_permutation_invariant() {
        let model = tiny_model(3);
        let set = random_set(33, 4);
        let z = encode(&model, &set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let mut shuffled = set.clone();
            for i in (1..shuffled.samples.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.samples.swap(i, j);
            }
            let z2 = encode(&model, &shuffled).unwrap();
            assert_eq!(z.0, z2.0);
        }
    }

    #[test]
    fn encode_is_bitwise_duplication_invariant() {
        let model = tiny_model(5);
        let set = random_set(17, 6);
        let mut doubled = set.clone();
        doubled.samples.extend(set.samples.iter().cloned());
        assert_eq!(encode(&model, &set).unwrap().0, encode(&model, &doubled).unwrap().0);
    }

    #[test]
    fn encode_rejects_empty_sets() {
        let model = tiny_model(1);
        assert!(matches!(
            encode(&model, &SampleSet::default()),
            Err(HypernetError::EmptySampleSet)
        ));
    }

    #[test]
    fn decode_is_deterministic_and_zero_for_zero_model() {
        let mut model = tiny_model(7);
        let z = LatentEmbedding(vec![0.3; 4]);
        let a = decode(&model, &z).unwrap();
        let b = decode(&model, &z).unwrap();
        assert_eq!(a, b);

        let zeros = vec![0.0; model.param_vector().len()];
        model.set_param_vector(&zeros).unwrap();
        let w = decode(&model, &LatentEmbedding(vec![0.0; 4])).unwrap();
        assert!(w.values.iter().all(|&v| v == 0.0));

        assert!(matches!(
            decode(&model, &LatentEmbedding(vec![0.0; 5])),
            Err(HypernetError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn hyponet_outputs_are_nonnegative() {
        let model = tiny_model(11);
        let z = encode(&model, &random_set(8, 12)).unwrap();
        let w = decode(&model, &z).unwrap();
        let coords: Vec<[f64; 6]> = (0..64)
            .map(|i| {
                let t = i as f64 / 64.0;
                [t.sin(), t.cos(), 0.5, -t.sin(), 0.3, 0.9]
            })
            .collect();
        let out = hyponet_eval(&w, &coords).unwrap();
        assert!(out.iter().all(|o| o.iter().all(|&v| v >= 0.0)));

        let zero = HyponetWeights {
            spec: w.spec.clone(),
            values: vec![0.0; w.values.len()],
        };
        let out = hyponet_eval(&zero, &coords).unwrap();
        assert!(out.iter().all(|o| o.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hyponet_is_locally_lipschitz() {
        let model = tiny_model(13);
        let w = decode(&model, &LatentEmbedding(vec![0.4, -0.2, 0.1, 0.7])).unwrap();
        let base = [0.1, 0.2, 0.9, 0.3, -0.1, 0.8];
        let out0 = hyponet_eval(&w, &[base]).unwrap()[0];
        for k in 3..8 {
            let delta = 10f64.powi(-k);
            let mut c = base;
            c[0] += delta;
            let out1 = hyponet_eval(&w, &[c]).unwrap()[0];
            let diff = (0..3).map(|i| (out1[i] - out0[i]).abs()).fold(0.0, f64::max);
            // O(delta) response: bounded ratio.
            assert!(diff <= 100.0 * delta, "delta {delta} diff {diff}");
        }
    }

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let mut model = tiny_model(17);
        let zeros = vec![0.0; model.param_vector().len()];
        model.set_param_vector(&zeros).unwrap();
        // Zero model predicts zero; zero targets make the residual vanish.
        let mut set = random_set(5, 18);
        for s in &mut set.samples {
            s.rho_mapped = [0.0; 3];
        }
        let parts = loss(&model, &[set.clone()], 0.0, 0.0).unwrap();
        assert_eq!(parts.total, 0.0);
        // With zero weights and zero embedding, regularizers are also zero.
        let parts = loss(&model, &[set], 2.0, 3.0).unwrap();
        assert_eq!(parts.total, 0.0);
    }

    #[test]
    fn single_sample_loss_matches_hand_formula() {
        let mut model = tiny_model(19);
        let zeros = vec![0.0; model.param_vector().len()];
        model.set_param_vector(&zeros).unwrap();
        // Mirror pair at 60 degrees gives cos_theta = 0.5; the zero model
        // predicts 0 so the residual is the target itself.
        let theta = 60f64.to_radians();
        let d = Direction::new(theta.sin(), 0.0, theta.cos()).unwrap();
        let target = [0.3, 0.7, 0.1];
        let set = SampleSet {
            samples: vec![Sample {
                h: Direction::Z,
                d,
                rho_mapped: target,
                cos_theta: 0.5,
            }],
        };
        let parts = loss(&model, &[set], 0.0, 0.0).unwrap();
        let expected = 0.5 * (0.3f64 * 0.3 + 0.7 * 0.7 + 0.1 * 0.1).sqrt();
        assert!((parts.rec - expected).abs() < 1e-15);
    }

    #[test]
    fn loss_decomposes_exactly() {
        let model = tiny_model(23);
        let batch = vec![random_set(12, 24), random_set(9, 25)];
        let bare = loss(&model, &batch, 0.0, 0.0).unwrap();
        let (l1, l2) = (0.17, 0.03);
        let full = loss(&model, &batch, l1, l2).unwrap();
        assert_eq!(bare.total, bare.rec);
        let expected = bare.rec + l1 * full.weight_reg + l2 * full.latent_reg;
        assert!((full.total - expected).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let model = tiny_model(29);
        let batch = vec![random_set(16, 30)];
        let (l1, l2) = (1e-2, 1e-3);
        let (_, grads) = loss_with_grads(&model, &batch, l1, l2, 1).unwrap();
        let base = model.param_vector();
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut max_rel: f64 = 0.0;
        for _ in 0..400 {
            let i = rng.gen_range(0..base.len());
            let mut probe = model.clone();
            let mut p = base.clone();
            p[i] += h;
            probe.set_param_vector(&p).unwrap();
            let f_plus = loss(&probe, &batch, l1, l2).unwrap().total;
            p[i] = base[i] - h;
            probe.set_param_vector(&p).unwrap();
            let f_minus = loss(&probe, &batch, l1, l2).unwrap().total;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let rel = (grads[i] - numeric).abs() / grads[i].abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-5, "max rel error {max_rel}");
    }

    #[test]
    fn grads_are_identical_across_thread_counts() {
        let model = tiny_model(37);
        let batch = vec![
            random_set(10, 38),
            random_set(12, 39),
            random_set(7, 40),
            random_set(9, 41),
        ];
        let (p1, g1) = loss_with_grads(&model, &batch, 1e-2, 1e-3, 1).unwrap();
        let (p4, g4) = loss_with_grads(&model, &batch, 1e-2, 1e-3, 4).unwrap();
        assert_eq!(p1, p4);
        assert_eq!(g1, g4);
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = toy_dataset(REDUCED_RES);
        let reference = compute_reference_median(&dataset).unwrap();
        let config = TrainConfig {
            shape: tiny_shape(),
            epochs: 3,
            materials_per_step: 3,
            samples_per_material: 64,
            learning_rate: 1e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let (m1, log1) = train(&dataset, &reference, &config).unwrap();
        let (m2, log2) = train(&dataset, &reference, &config).unwrap();
        assert_eq!(save_checkpoint(&m1), save_checkpoint(&m2));
        assert_eq!(log1, log2);
    }

    #[test]
    fn stronger_weight_decay_shrinks_weights() {
        let dataset = toy_dataset(REDUCED_RES);
        let reference = compute_reference_median(&dataset).unwrap();
        let base = TrainConfig {
            shape: tiny_shape(),
            lambda2: 0.0,
            epochs: 300,
            materials_per_step: 3,
            samples_per_material: 64,
            learning_rate: 1e-3,
            warmup_steps: 50,
            seed: 6,
            ..TrainConfig::default()
        };
        let mean_w_sq = |lambda1: f64| {
            let config = TrainConfig { lambda1, ..base.clone() };
            let (model, _) = train(&dataset, &reference, &config).unwrap();
            let full = sample_uniform(&REDUCED_RES, 256, 1).unwrap();
            let set = extract_samples(&dataset[0].grid, &reference, &full)
                .unwrap()
                .set;
            let w = decode(&model, &encode(&model, &set).unwrap()).unwrap();
            w.values.iter().map(|v| v * v).sum::<f64>() / w.values.len() as f64
        };
        let low = mean_w_sq(0.0);
        let high = mean_w_sq(1.0);
        assert!(high < low, "mean w^2: lambda1=0 -> {low}, 1 -> {high}");
    }

    #[test]
    fn reconstruction_ignores_sample_order_and_stays_finite() {
        let model = tiny_model(43);
        let set = random_set(40, 44);
        let grid = reconstruct(&model, &set, 2).unwrap();
        let mut reversed = set.clone();
        reversed.samples.reverse();
        let grid2 = reconstruct(&model, &reversed, 1).unwrap();
        assert_eq!(grid, grid2);
        for t in 0..grid.texel_count() {
            for c in 0..3 {
                let v = grid.linear_at(t, c);
                assert!(v.is_finite() && v >= 0.0);
            }
        }
    }

    #[test]
    fn compress_with_full_draw_is_seed_independent() {
        let dataset = toy_dataset(REDUCED_RES);
        let reference = compute_reference_median(&dataset).unwrap();
        let shape = tiny_shape();
        let model = HyperModel::new(&shape, reference, 3).unwrap();
        let total = REDUCED_RES.texel_count();
        let a = compress(&model, &dataset[1], total, 1).unwrap();
        let b = compress(&model, &dataset[1], total, 2).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.dim(), 4);
    }

    #[test]
    fn interpolation_endpoints_are_exact() {
        let a = LatentEmbedding(vec![0.5, -1.0, 2.0]);
        let b = LatentEmbedding(vec![0.0, 2.0, 2.0]);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let mid = interpolate(&LatentEmbedding(vec![0.0; 3]), &LatentEmbedding(vec![2.0; 3]), 0.5)
            .unwrap();
        assert_eq!(mid.0, vec![1.0; 3]);
        assert!(matches!(
            interpolate(&a, &LatentEmbedding(vec![0.0; 2]), 0.5),
            Err(HypernetError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let model = tiny_model(47);
        let bytes = save_checkpoint(&model);
        let back = load_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(save_checkpoint(&back), bytes);

        assert!(matches!(
            load_checkpoint(&bytes[..bytes.len() - 3]),
            Err(HypernetError::LengthMismatch)
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_checkpoint(&bad), Err(HypernetError::BadMagic)));
        let mut wrong_version = bytes;
        wrong_version[4] = 9;
        assert!(matches!(
            load_checkpoint(&wrong_version),
            Err(HypernetError::VersionMismatch(9))
        ));
    }
}
