//! Encoder, mask-token decoder with shifted local attention, projection and
//! reconstruction heads, and the pooled classification branch.

mod attention;
mod layers;
mod posenc;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use attention::{local_window_mask, shifted_local_attention, window_ids, Attention, Block};
pub use layers::{
    normal_tensor, trunc_normal, trunc_normal_tensor, BatchNorm, LayerNorm, Linear, Session, BN_MOMENTUM, INIT_STD,
    NORM_EPS,
};
pub use posenc::sincos_2d;

use crate::error::{Error, Result};
use crate::patching::{zero_masked, MaskPlan, PatchSequence, PATCH_DIM};
use crate::tensor::{ParamStore, Tensor, Var};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub attention_window: usize,
    pub attention_shift: usize,
    /// Width of the projection head output; must equal the teacher feature width.
    pub head_out_dim: usize,
    pub num_classes: usize,
    pub mlp_hidden: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_layers: 4,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_layers: 1,
            decoder_heads: 4,
            attention_window: 32,
            attention_shift: 16,
            head_out_dim: 32,
            num_classes: 4,
            mlp_hidden: 64,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.encoder_heads == 0 || self.embed_dim % self.encoder_heads != 0 {
            return bad(format!("embed_dim {} not divisible by encoder_heads {}", self.embed_dim, self.encoder_heads));
        }
        if self.decoder_dim == 0 || self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!("decoder_dim {} not divisible by decoder_heads {}", self.decoder_dim, self.decoder_heads));
        }
        if self.embed_dim % 4 != 0 || self.decoder_dim % 4 != 0 {
            return bad("embed_dim and decoder_dim must be multiples of 4 for 2-D position tables".into());
        }
        if self.decoder_layers == 0 {
            return bad("decoder_layers must be at least 1".into());
        }
        if self.attention_window == 0 {
            return bad("attention_window must be at least 1".into());
        }
        if self.head_out_dim == 0 || self.num_classes == 0 || self.mlp_hidden == 0 || self.mlp_ratio == 0 {
            return bad("head_out_dim, num_classes, mlp_hidden and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        for (k, v) in self.fields() {
            m.insert(format!("model.{k}"), v.to_string());
        }
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        let get = |k: &str| -> Result<usize> {
            let key = format!("model.{k}");
            kv.get(&key)
                .ok_or_else(|| Error::Format(format!("missing header key {key}")))?
                .parse()
                .map_err(|_| Error::Format(format!("header key {key} is not an integer")))
        };
        c.embed_dim = get("embed_dim")?;
        c.encoder_layers = get("encoder_layers")?;
        c.encoder_heads = get("encoder_heads")?;
        c.decoder_dim = get("decoder_dim")?;
        c.decoder_layers = get("decoder_layers")?;
        c.decoder_heads = get("decoder_heads")?;
        c.attention_window = get("attention_window")?;
        c.attention_shift = get("attention_shift")?;
        c.head_out_dim = get("head_out_dim")?;
        c.num_classes = get("num_classes")?;
        c.mlp_hidden = get("mlp_hidden")?;
        c.mlp_ratio = get("mlp_ratio")?;
        Ok(c)
    }

    fn fields(&self) -> [(&'static str, usize); 12] {
        [
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_heads", self.encoder_heads),
            ("decoder_dim", self.decoder_dim),
            ("decoder_layers", self.decoder_layers),
            ("decoder_heads", self.decoder_heads),
            ("attention_window", self.attention_window),
            ("attention_shift", self.attention_shift),
            ("head_out_dim", self.head_out_dim),
            ("num_classes", self.num_classes),
            ("mlp_hidden", self.mlp_hidden),
            ("mlp_ratio", self.mlp_ratio),
        ]
    }

    /// Encoder-relevant differences between two configs, as `key: a vs b` lines.
    pub fn encoder_mismatches(&self, other: &ModelConfig) -> Vec<String> {
        let keys = ["embed_dim", "encoder_layers", "encoder_heads", "mlp_ratio"];
        self.fields()
            .iter()
            .zip(other.fields().iter())
            .filter(|(a, b)| keys.contains(&a.0) && a.1 != b.1)
            .map(|(a, b)| format!("{}: {} vs {}", a.0, a.1, b.1))
            .collect()
    }
}

/// Patch embedding, fixed positions and global-attention blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub dim: usize,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let patch_embed = Linear::new(store, "encoder.patch_embed", PATCH_DIM, c.embed_dim, INIT_STD, rng);
        let blocks = (0..c.encoder_layers)
            .map(|i| Block::new(store, &format!("encoder.blocks.{i}"), c.embed_dim, c.encoder_heads, c.mlp_ratio, INIT_STD, rng))
            .collect();
        Self { patch_embed, blocks, dim: c.embed_dim }
    }

    /// Maps visible patches (`|v| × 256`) at `coords` to latents `|v| × embed_dim`.
    pub fn encode<'t>(&self, s: &Session<'t>, x_v: Var<'t>, coords: &[(usize, usize)]) -> Result<Var<'t>> {
        let rows = x_v.shape()[0];
        if rows == 0 {
            return Err(Error::Contract("encoder needs at least one visible patch (gamma < 1)".into()));
        }
        if rows != coords.len() {
            return Err(Error::Contract(format!("{rows} patches but {} coordinates", coords.len())));
        }
        let pos = s.constant(sincos_2d(self.dim, coords));
        let mut x = self.patch_embed.forward(s, x_v)?.add(&pos)?;
        for b in &self.blocks {
            x = b.forward(s, x, None)?;
        }
        Ok(x)
    }
}

/// Shared mask token, latent projection and shifted-local-attention blocks.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: crate::tensor::ParamId,
    pub blocks: Vec<Block>,
    pub dim: usize,
    pub window: usize,
    pub shift: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, c: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let embed = Linear::new(store, "decoder.embed", c.embed_dim, c.decoder_dim, INIT_STD, rng);
        let mask_token = store.insert("decoder.mask_token", normal_tensor(&[1, c.decoder_dim], INIT_STD, rng), true);
        let blocks = (0..c.decoder_layers)
            .map(|i| Block::new(store, &format!("decoder.blocks.{i}"), c.decoder_dim, c.decoder_heads, c.mlp_ratio, INIT_STD, rng))
            .collect();
        Self { embed, mask_token, blocks, dim: c.decoder_dim, window: c.attention_window, shift: c.attention_shift }
    }

    /// Window offset used by block `index`: even blocks are shifted, odd blocks are not.
    pub fn block_shift(&self, index: usize) -> usize {
        if index % 2 == 0 {
            self.shift
        } else {
            0
        }
    }

    /// Full-length decoder input before any block: projected visible latents
    /// at `v`, the mask token at `m`, plus decoder positions.
    pub fn embed_tokens<'t>(
        &self,
        s: &Session<'t>,
        z_v: Var<'t>,
        plan: &MaskPlan,
        coords: &[(usize, usize)],
    ) -> Result<Var<'t>> {
        let rows = z_v.shape()[0];
        if rows != plan.visible.len() || coords.len() != plan.n {
            return Err(Error::Contract(format!(
                "decoder got {rows} visible latents and {} coordinates for a plan with {}/{}",
                coords.len(),
                plan.visible.len(),
                plan.n
            )));
        }
        let visible = self.embed.forward(s, z_v)?;
        let mut source = vec![rows; plan.n];
        for (r, &i) in plan.visible.iter().enumerate() {
            source[i] = r;
        }
        let table = if plan.masked.is_empty() {
            visible
        } else {
            Var::concat(&[visible, s.p(self.mask_token)], 0)?
        };
        let full = table.gather_rows(&source)?;
        full.add(&s.constant(sincos_2d(self.dim, coords)))
    }

    /// Latents for all `N` positions, `N × decoder_dim`.
    pub fn decode<'t>(
        &self,
        s: &Session<'t>,
        z_v: Var<'t>,
        plan: &MaskPlan,
        coords: &[(usize, usize)],
    ) -> Result<Var<'t>> {
        let mut x = self.embed_tokens(s, z_v, plan, coords)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let mask = local_window_mask(plan.n, self.window, self.block_shift(i))?;
            x = b.forward(s, x, mask.as_ref())?;
        }
        Ok(x)
    }
}

/// Fully-connected layer followed by layer normalization.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub fc: Linear,
    pub norm: LayerNorm,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc: Linear::new(store, &format!("{name}.fc"), input, output, INIT_STD, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), output),
        }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, z: Var<'t>) -> Result<Var<'t>> {
        self.norm.forward(s, self.fc.forward(s, z)?)
    }
}

/// Linear → batch norm → ReLU → linear over pooled features.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, INIT_STD, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, classes, INIT_STD, rng),
        }
    }

    /// Logits for a `batch × input` matrix of pooled features.
    pub fn forward<'t>(&self, s: &Session<'t>, pooled: Var<'t>) -> Result<Var<'t>> {
        let h = self.bn.forward(s, self.fc1.forward(s, pooled)?)?.relu();
        self.fc2.forward(s, h)
    }

    /// Mean-pools each latent set and classifies the batch, `batch × classes`.
    pub fn classify<'t>(&self, s: &Session<'t>, latents: &[Var<'t>]) -> Result<Var<'t>> {
        if latents.is_empty() {
            return Err(Error::Contract("classification needs at least one sample".into()));
        }
        let pooled: Vec<Var<'t>> = latents.iter().map(|z| z.mean_rows()).collect::<Result<_>>()?;
        let batch = if pooled.len() == 1 { pooled[0] } else { Var::concat(&pooled, 0)? };
        self.forward(s, batch)
    }
}

/// Everything trained during pretraining.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: ProjectionHead,
    pub recon_head: Linear,
    pub cls_head: ClassifierHead,
}

/// Which heads a pretraining forward evaluates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HeadSelection {
    pub target: bool,
    pub recon: bool,
}

/// Per-sample outputs of [`PretrainModel::forward_sample`].
pub struct SampleOutputs<'t> {
    pub z_v: Var<'t>,
    /// Projection head output at all `N` positions.
    pub y: Option<Var<'t>>,
    /// Patch reconstruction at all `N` positions.
    pub recon: Option<Var<'t>>,
}

impl PretrainModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng);
        let decoder = Decoder::new(&mut store, &config, &mut rng);
        let head = ProjectionHead::new(&mut store, "head", config.decoder_dim, config.head_out_dim, &mut rng);
        let recon_head = Linear::new(&mut store, "recon_head", config.decoder_dim, PATCH_DIM, INIT_STD, &mut rng);
        let cls_head =
            ClassifierHead::new(&mut store, "cls_head", config.embed_dim, config.mlp_hidden, config.num_classes, &mut rng);
        Ok(Self { config, store, encoder, decoder, head, recon_head, cls_head })
    }

    /// Encodes the visible part of `seq` under `plan` and decodes the heads in `heads`.
    pub fn forward_sample<'t>(
        &self,
        s: &Session<'t>,
        seq: &PatchSequence,
        plan: &MaskPlan,
        heads: HeadSelection,
    ) -> Result<SampleOutputs<'t>> {
        if plan.n != seq.grid.len() {
            return Err(Error::Contract(format!("plan for {} patches applied to {}", plan.n, seq.grid.len())));
        }
        let x_v = s.constant(seq.features.gather_rows(&plan.visible)?);
        let coords_v: Vec<(usize, usize)> = plan.visible.iter().map(|&i| seq.coords[i]).collect();
        let z_v = self.encoder.encode(s, x_v, &coords_v)?;
        let (mut y, mut recon) = (None, None);
        if heads.target || heads.recon {
            let z = self.decoder.decode(s, z_v, plan, &seq.coords)?;
            if heads.target {
                y = Some(self.head.forward(s, z)?);
            }
            if heads.recon {
                recon = Some(self.recon_head.forward(s, z)?);
            }
        }
        Ok(SampleOutputs { z_v, y, recon })
    }
}

/// Encoder plus a fresh task head; the decoder and pretraining heads are dropped.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub task_head: ClassifierHead,
}

impl FinetuneModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng);
        let task_head =
            ClassifierHead::new(&mut store, "task_head", config.embed_dim, config.mlp_hidden, config.num_classes, &mut rng);
        Ok(Self { config, store, encoder, task_head })
    }

    /// Copies every `encoder.*` entry of `source` into this model.
    pub fn load_encoder(&mut self, source_config: &ModelConfig, source: &ParamStore) -> Result<()> {
        let mismatches = self.config.encoder_mismatches(source_config);
        if !mismatches.is_empty() {
            return Err(Error::Config(format!("incompatible checkpoint: {}", mismatches.join(", "))));
        }
        let names: Vec<String> =
            self.store.iter().filter(|(_, p)| p.name.starts_with("encoder.")).map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let id = source.id(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
            self.store.set(&name, source.value(id).clone())?;
        }
        Ok(())
    }

    /// Logits `batch × classes` for full sequences, each optionally with a
    /// structured plan whose patches are zeroed before embedding.
    pub fn forward<'t>(
        &self,
        s: &Session<'t>,
        seqs: &[&PatchSequence],
        plans: Option<&[MaskPlan]>,
    ) -> Result<Var<'t>> {
        let mut latents = Vec::with_capacity(seqs.len());
        for (i, seq) in seqs.iter().enumerate() {
            let input = match plans.and_then(|p| p.get(i)) {
                Some(plan) => zero_masked(seq, plan)?,
                None => (*seq).clone(),
            };
            let x = s.constant(input.features);
            latents.push(self.encoder.encode(s, x, &input.coords)?);
        }
        self.task_head.classify(s, &latents)
    }
}

/// Single-sequence convenience around [`FinetuneModel::forward`].
pub fn forward_finetune<'t>(
    model: &FinetuneModel,
    s: &Session<'t>,
    seq: &PatchSequence,
    plan: Option<&MaskPlan>,
) -> Result<Var<'t>> {
    let plans = plan.map(|p| vec![p.clone()]);
    model.forward(s, &[seq], plans.as_deref())
}

/// Shape check helper for callers holding raw tensors.
pub fn expect_rows(t: &Tensor, rows: usize, what: &str) -> Result<()> {
    if t.rows() != rows {
        return Err(Error::Contract(format!("{what}: expected {rows} rows, found {}", t.rows())));
    }
    Ok(())
}

/// Worst finite-difference disagreement over every trainable parameter.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compares backprop gradients of `f` with central differences, one
/// coordinate of one trainable parameter at a time.
pub fn check_model_gradients<F>(store: &ParamStore, train: bool, epsilon: f64, f: F) -> Result<GradientReport>
where
    F: for<'t> Fn(&Session<'t>) -> Result<Var<'t>>,
{
    check_model_gradients_sampled(store, train, epsilon, None, f)
}

/// Like [`check_model_gradients`], but visits at most `per_param`
/// coordinates of each parameter, evenly strided, when given.
pub fn check_model_gradients_sampled<F>(
    store: &ParamStore,
    train: bool,
    epsilon: f64,
    per_param: Option<usize>,
    f: F,
) -> Result<GradientReport>
where
    F: for<'t> Fn(&Session<'t>) -> Result<Var<'t>>,
{
    if epsilon <= 0.0 {
        return Err(Error::Param(format!("epsilon must be positive, got {epsilon}")));
    }
    if per_param == Some(0) {
        return Err(Error::Param("per_param must be positive".into()));
    }
    let tape = crate::tensor::Tape::new();
    let s = Session::new(&tape, store, train);
    let loss = f(&s)?;
    let mut grads = loss.backward()?;
    let analytic = s.params.grads(&mut grads);

    let eval = |st: &ParamStore| -> Result<f64> {
        let t = crate::tensor::Tape::inference();
        Ok(f(&Session::new(&t, st, train))?.item())
    };
    let mut work = store.clone();
    let mut report = GradientReport { max_rel_error: 0.0, worst_param: String::new(), checked: 0 };
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let n = store.value(id).numel();
        let stride = per_param.map_or(1, |k| n.div_ceil(k).max(1));
        for i in (0..n).step_by(stride) {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = orig + epsilon;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - epsilon;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[i]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = name.clone();
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
