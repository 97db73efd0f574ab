//! Frozen visual/text encoder pair: configuration, parameter inventory,
//! patch embedding, tokenization, and the prompted forward passes.
//!
//! Two interchangeable backbones exist behind one parameter inventory:
//! a pretrained bundle loaded from disk (resolved by backbone id) and a
//! small deterministic stub whose weights are a pure function of the seed.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, TensorId};
use crate::params::{Binder, Init, ParamGroup, ParamSpec};
use crate::prompts::{inject, LayerPrompts, PromptConfig, SequenceLayout};

/// End-of-text token id. Word ids start above it.
pub const EOT_TOKEN: usize = 0;

/// Architecture dimensions shared by the stub and pretrained backbones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub visual_dim: usize,
    pub visual_layers: usize,
    pub visual_heads: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub context: usize,
    /// Width of the shared projection space used by the similarity path.
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    pub fn clip_vit_l14() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 14,
            visual_dim: 1024,
            visual_layers: 24,
            visual_heads: 16,
            text_dim: 768,
            text_layers: 12,
            text_heads: 12,
            vocab_size: 49408,
            context: 77,
            embed_dim: 768,
            mlp_ratio: 4,
        }
    }

    pub fn clip_vit_b16() -> Self {
        EncoderConfig {
            image_size: 224,
            patch_size: 16,
            visual_dim: 768,
            visual_layers: 12,
            visual_heads: 12,
            text_dim: 512,
            text_layers: 12,
            text_heads: 8,
            vocab_size: 49408,
            context: 77,
            embed_dim: 512,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.visual_dim % self.visual_heads != 0 || self.text_dim % self.text_heads != 0 {
            return Err(Error::Config("token width not divisible by head count".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least two ids".into()));
        }
        Ok(())
    }

    /// Patches per grid side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// Stub backbone description from the run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StubSpec {
    pub seed: u64,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
}

impl Default for StubSpec {
    fn default() -> Self {
        StubSpec {
            seed: 7,
            visual_dim: 32,
            text_dim: 32,
            layers: 2,
            heads: 4,
            image_size: 32,
            patch_size: 8,
        }
    }
}

impl StubSpec {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            visual_dim: self.visual_dim,
            visual_layers: self.layers,
            visual_heads: self.heads,
            text_dim: self.text_dim,
            text_layers: self.layers,
            text_heads: self.heads,
            vocab_size: 128,
            context: 32,
            embed_dim: self.text_dim,
            mlp_ratio: 4,
        }
    }
}

/// Where backbone weights come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSource {
    Stub(StubSpec),
    Bundle { id: String, path: std::path::PathBuf },
}

impl BackboneSource {
    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        match self {
            BackboneSource::Stub(s) => Ok(s.encoder_config()),
            BackboneSource::Bundle { id, .. } => config_for_backbone_id(id),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            BackboneSource::Stub(s) => s.seed,
            BackboneSource::Bundle { .. } => 0,
        }
    }
}

/// Resolve a backbone id string to its architecture.
pub fn config_for_backbone_id(id: &str) -> Result<EncoderConfig> {
    match id {
        "clip-vit-l-14" => Ok(EncoderConfig::clip_vit_l14()),
        "clip-vit-b-16" => Ok(EncoderConfig::clip_vit_b16()),
        other => Err(Error::Config(format!(
            "unknown backbone id {other:?} (expected clip-vit-l-14 or clip-vit-b-16)"
        ))),
    }
}

fn block_specs(prefix: &str, dim: usize, mlp_ratio: usize, group: ParamGroup) -> Vec<ParamSpec> {
    let hidden = dim * mlp_ratio;
    vec![
        ParamSpec::new(format!("{prefix}.ln1.g"), 1, dim, group, false, Init::Ones),
        ParamSpec::new(format!("{prefix}.ln1.b"), 1, dim, group, false, Init::Zeros),
        ParamSpec::new(format!("{prefix}.attn.qkv.w"), dim, 3 * dim, group, false, Init::Xavier),
        ParamSpec::new(format!("{prefix}.attn.qkv.b"), 1, 3 * dim, group, false, Init::Zeros),
        ParamSpec::new(format!("{prefix}.attn.proj.w"), dim, dim, group, false, Init::Xavier),
        ParamSpec::new(format!("{prefix}.attn.proj.b"), 1, dim, group, false, Init::Zeros),
        ParamSpec::new(format!("{prefix}.ln2.g"), 1, dim, group, false, Init::Ones),
        ParamSpec::new(format!("{prefix}.ln2.b"), 1, dim, group, false, Init::Zeros),
        ParamSpec::new(format!("{prefix}.mlp.fc1.w"), dim, hidden, group, false, Init::Xavier),
        ParamSpec::new(format!("{prefix}.mlp.fc1.b"), 1, hidden, group, false, Init::Zeros),
        ParamSpec::new(format!("{prefix}.mlp.fc2.w"), hidden, dim, group, false, Init::Xavier),
        ParamSpec::new(format!("{prefix}.mlp.fc2.b"), 1, dim, group, false, Init::Zeros),
    ]
}

/// Frozen parameter inventory of the visual tower.
pub fn visual_param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.visual_dim;
    let g = ParamGroup::Backbone;
    let mut specs = vec![
        ParamSpec::new("visual.patch_embed.w", cfg.patch_dim(), d, g, false, Init::Xavier),
        ParamSpec::new("visual.cls", 1, d, g, false, Init::Embedding),
        ParamSpec::new("visual.pos", cfg.grid_count() + 1, d, g, false, Init::Embedding),
        ParamSpec::new("visual.ln_pre.g", 1, d, g, false, Init::Ones),
        ParamSpec::new("visual.ln_pre.b", 1, d, g, false, Init::Zeros),
    ];
    for i in 0..cfg.visual_layers {
        specs.extend(block_specs(&format!("visual.layer{i}"), d, cfg.mlp_ratio, g));
    }
    specs.push(ParamSpec::new("visual.ln_post.g", 1, d, g, false, Init::Ones));
    specs.push(ParamSpec::new("visual.ln_post.b", 1, d, g, false, Init::Zeros));
    specs.push(ParamSpec::new("visual.proj", d, cfg.embed_dim, g, false, Init::Xavier));
    specs
}

/// Frozen parameter inventory of the text tower.
pub fn text_param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let t = cfg.text_dim;
    let g = ParamGroup::Backbone;
    let mut specs = vec![
        ParamSpec::new("text.token_embed", cfg.vocab_size, t, g, false, Init::Embedding),
        ParamSpec::new("text.pos", cfg.context, t, g, false, Init::Embedding),
    ];
    for i in 0..cfg.text_layers {
        specs.extend(block_specs(&format!("text.layer{i}"), t, cfg.mlp_ratio, g));
    }
    specs.push(ParamSpec::new("text.ln_final.g", 1, t, g, false, Init::Ones));
    specs.push(ParamSpec::new("text.ln_final.b", 1, t, g, false, Init::Zeros));
    specs.push(ParamSpec::new("text.proj", t, cfg.embed_dim, g, false, Init::Xavier));
    specs.push(ParamSpec::new(
        "text.logit_scale",
        1,
        1,
        g,
        false,
        Init::Const((1.0f64 / 0.07).ln()),
    ));
    specs
}

/// Trainable prompt inventory for the given encoder dims and region count.
pub fn prompt_param_specs(cfg: &EncoderConfig, prompt: &PromptConfig, k: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let g = ParamGroup::Prompts;
    let visual_depth = prompt.injected_layers(cfg.visual_layers);
    let text_depth = prompt.injected_layers(cfg.text_layers);
    for i in 0..visual_depth {
        if prompt.visual_global > 0 {
            specs.push(ParamSpec::new(
                format!("prompt.visual.global.l{i}"),
                prompt.visual_global,
                cfg.visual_dim,
                g,
                true,
                prompt_init(prompt),
            ));
        }
        for region in 0..k {
            if prompt.per_region > 0 {
                specs.push(ParamSpec::new(
                    format!("prompt.visual.region{region}.l{i}"),
                    prompt.per_region,
                    cfg.visual_dim,
                    g,
                    true,
                    prompt_init(prompt),
                ));
            }
        }
    }
    for i in 0..text_depth {
        if prompt.textual > 0 {
            specs.push(ParamSpec::new(
                format!("prompt.text.l{i}"),
                prompt.textual,
                cfg.text_dim,
                g,
                true,
                prompt_init(prompt),
            ));
        }
    }
    if k > 0 {
        specs.push(ParamSpec::new(
            "prompt.region_cls",
            k,
            cfg.visual_dim,
            g,
            true,
            Init::CopyVisualCls,
        ));
    }
    specs
}

fn prompt_init(prompt: &PromptConfig) -> Init {
    match prompt.init {
        crate::prompts::PromptInit::Random => Init::PromptUniform,
        crate::prompts::PromptInit::Zero => Init::Zeros,
    }
}

/// Sentence tokenizer. The stub hashes lowercase words into the id space;
/// bundles carry an explicit word->id map with an unknown-word fallback.
#[derive(Debug, Clone)]
pub enum Tokenizer {
    Hash { vocab_size: usize },
    Vocab { map: HashMap<String, usize>, unk: usize },
}

impl Tokenizer {
    pub fn tokenize(&self, sentence: &str, context: usize) -> Result<Vec<usize>> {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.is_empty() {
            return Err(Error::Contract("cannot tokenize an empty sentence".into()));
        }
        let mut ids = Vec::with_capacity(words.len() + 1);
        for w in words {
            let lw = w.to_lowercase();
            let id = match self {
                Tokenizer::Hash { vocab_size } => {
                    1 + (fnv1a_str(&lw) as usize) % (vocab_size - 1)
                }
                Tokenizer::Vocab { map, unk } => *map.get(&lw).unwrap_or(unk),
            };
            ids.push(id);
        }
        ids.push(EOT_TOKEN);
        if ids.len() > context {
            return Err(Error::Contract(format!(
                "sentence of {} tokens exceeds context {}",
                ids.len(),
                context
            )));
        }
        Ok(ids)
    }
}

fn fnv1a_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

use crate::data::ImageTensor;

/// Cut the image into patches, embed them, and add the (frozen) position
/// embedding rows: `F0 = X E + PE`.
pub fn patchify(
    image: &ImageTensor,
    cfg: &EncoderConfig,
    embed: &Array2<f64>,
    pos: &Array2<f64>,
) -> Result<Array2<f64>> {
    if image.height != cfg.image_size || image.width != cfg.image_size {
        return Err(Error::Shape {
            expected: format!("{0}x{0} image", cfg.image_size),
            actual: format!("{}x{}", image.height, image.width),
        });
    }
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    let mut x = Array2::zeros((cfg.grid_count(), cfg.patch_dim()));
    for pr in 0..side {
        for pc in 0..side {
            let patch = pr * side + pc;
            for py in 0..p {
                for px in 0..p {
                    for c in 0..3 {
                        x[(patch, (py * p + px) * 3 + c)] =
                            image.get(pr * p + py, pc * p + px, c);
                    }
                }
            }
        }
    }
    let mut tokens = x.dot(embed);
    // pos row 0 belongs to the CLS token; patches use rows 1..
    for i in 0..cfg.grid_count() {
        let mut row = tokens.row_mut(i);
        row += &pos.row(i + 1);
    }
    Ok(tokens)
}

/// Ids of one transformer block's tensors bound on a tape.
struct BlockRefs {
    ln1_g: TensorId,
    ln1_b: TensorId,
    qkv_w: TensorId,
    qkv_b: TensorId,
    proj_w: TensorId,
    proj_b: TensorId,
    ln2_g: TensorId,
    ln2_b: TensorId,
    fc1_w: TensorId,
    fc1_b: TensorId,
    fc2_w: TensorId,
    fc2_b: TensorId,
}

fn bind_block(binder: &mut Binder, tape: &mut Tape, prefix: &str) -> BlockRefs {
    BlockRefs {
        ln1_g: binder.bind(tape, &format!("{prefix}.ln1.g")),
        ln1_b: binder.bind(tape, &format!("{prefix}.ln1.b")),
        qkv_w: binder.bind(tape, &format!("{prefix}.attn.qkv.w")),
        qkv_b: binder.bind(tape, &format!("{prefix}.attn.qkv.b")),
        proj_w: binder.bind(tape, &format!("{prefix}.attn.proj.w")),
        proj_b: binder.bind(tape, &format!("{prefix}.attn.proj.b")),
        ln2_g: binder.bind(tape, &format!("{prefix}.ln2.g")),
        ln2_b: binder.bind(tape, &format!("{prefix}.ln2.b")),
        fc1_w: binder.bind(tape, &format!("{prefix}.mlp.fc1.w")),
        fc1_b: binder.bind(tape, &format!("{prefix}.mlp.fc1.b")),
        fc2_w: binder.bind(tape, &format!("{prefix}.mlp.fc2.w")),
        fc2_b: binder.bind(tape, &format!("{prefix}.mlp.fc2.b")),
    }
}

/// Pre-norm transformer block. When `record` is given, every head's
/// post-softmax attention matrix id is appended to it.
pub fn transformer_block(
    tape: &mut Tape,
    x: TensorId,
    binder: &mut Binder,
    prefix: &str,
    heads: usize,
    mask: Option<Rc<Array2<bool>>>,
    record: &mut Option<&mut Vec<TensorId>>,
) -> TensorId {
    let refs = bind_block(binder, tape, prefix);
    let dim = tape.value(x).ncols();
    let head_dim = dim / heads;

    let normed = tape.layer_norm(x, refs.ln1_g, refs.ln1_b);
    let qkv = tape.linear(normed, refs.qkv_w, refs.qkv_b);
    let q = tape.slice_cols(qkv, 0, dim);
    let k = tape.slice_cols(qkv, dim, dim);
    let v = tape.slice_cols(qkv, 2 * dim, dim);

    let mut ctx_heads = Vec::with_capacity(heads);
    let scale = 1.0 / (head_dim as f64).sqrt();
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim);
        let kh = tape.slice_cols(k, h * head_dim, head_dim);
        let vh = tape.slice_cols(v, h * head_dim, head_dim);
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, mask.clone());
        if let Some(rec) = record.as_deref_mut() {
            rec.push(probs);
        }
        ctx_heads.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(&ctx_heads);
    let attn_out = tape.linear(ctx, refs.proj_w, refs.proj_b);
    let x = tape.add(x, attn_out);

    let normed = tape.layer_norm(x, refs.ln2_g, refs.ln2_b);
    let h1 = tape.linear(normed, refs.fc1_w, refs.fc1_b);
    let h1 = tape.gelu(h1);
    let h2 = tape.linear(h1, refs.fc2_w, refs.fc2_b);
    tape.add(x, h2)
}

/// Output handles of the prompted visual forward pass.
pub struct VisualForward {
    /// 1 x visual_dim global CLS token (post final norm).
    pub global_cls: TensorId,
    /// k x visual_dim region CLS tokens, present when regions are active.
    pub region_cls: Option<TensorId>,
    /// grid_count x visual_dim patch features.
    pub patch_tokens: TensorId,
    /// Per layer, per head attention matrices (recorded on request).
    pub attention: Vec<Vec<TensorId>>,
}

/// Run the prompted, masked visual encoder per the deep/shallow injection
/// rule: layer `i < depth` receives fresh prompt parameters (previous
/// prompt outputs are discarded); beyond the injection depth prompt slots
/// propagate like ordinary tokens.
#[allow(clippy::too_many_arguments)]
pub fn encode_visual(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &EncoderConfig,
    prompt_cfg: &PromptConfig,
    seq: &SequenceLayout,
    mask: Option<Rc<Array2<bool>>>,
    patch_tokens: Array2<f64>,
    record_attention: bool,
) -> Result<VisualForward> {
    if patch_tokens.dim() != (seq.grid_count(), cfg.visual_dim) {
        return Err(Error::Contract(format!(
            "patch tokens {:?} do not match layout {}x{}",
            patch_tokens.dim(),
            seq.grid_count(),
            cfg.visual_dim
        )));
    }
    if let Some(m) = &mask {
        if m.nrows() != seq.len {
            return Err(Error::Contract(format!(
                "mask spans {} tokens, sequence has {}",
                m.nrows(),
                seq.len
            )));
        }
    }

    let layer_prompts = |binder: &mut Binder, tape: &mut Tape, i: usize| -> LayerPrompts {
        let global = (prompt_cfg.visual_global > 0)
            .then(|| binder.bind(tape, &format!("prompt.visual.global.l{i}")));
        let local = (0..seq.k)
            .map(|r| {
                (prompt_cfg.per_region > 0)
                    .then(|| binder.bind(tape, &format!("prompt.visual.region{r}.l{i}")))
            })
            .collect();
        LayerPrompts { global, local }
    };

    // Initial sequence: [CLS_G, P_G_0, (CLS_Lj, P_Lj_0).., patches].
    let cls = binder.bind(tape, "visual.cls");
    let pos = binder.bind(tape, "visual.pos");
    let pos0 = tape.slice_rows(pos, 0, 1);
    let cls0 = tape.add(cls, pos0);
    let mut parts = vec![cls0];
    let p0 = layer_prompts(binder, tape, 0);
    if let Some(g) = p0.global {
        parts.push(g);
    }
    let region_cls = (seq.k > 0).then(|| binder.bind(tape, "prompt.region_cls"));
    for region in 0..seq.k {
        let r_cls = tape.slice_rows(region_cls.unwrap(), region, 1);
        parts.push(r_cls);
        if let Some(l) = p0.local[region] {
            parts.push(l);
        }
    }
    let patches = tape.constant(patch_tokens);
    parts.push(patches);
    let mut x = tape.concat_rows(&parts);
    debug_assert_eq!(tape.value(x).nrows(), seq.len);

    let ln_pre_g = binder.bind(tape, "visual.ln_pre.g");
    let ln_pre_b = binder.bind(tape, "visual.ln_pre.b");
    x = tape.layer_norm(x, ln_pre_g, ln_pre_b);

    let injected = prompt_cfg.injected_layers(cfg.visual_layers);
    let mut attention = Vec::new();
    for i in 0..cfg.visual_layers {
        if i > 0 && i < injected {
            let pi = layer_prompts(binder, tape, i);
            x = inject(tape, seq, x, &pi)?;
        }
        let mut layer_rec = Vec::new();
        let mut rec = record_attention.then_some(&mut layer_rec);
        x = transformer_block(
            tape,
            x,
            binder,
            &format!("visual.layer{i}"),
            cfg.visual_heads,
            mask.clone(),
            &mut rec,
        );
        if record_attention {
            attention.push(layer_rec);
        }
    }

    let ln_post_g = binder.bind(tape, "visual.ln_post.g");
    let ln_post_b = binder.bind(tape, "visual.ln_post.b");
    let out = tape.layer_norm(x, ln_post_g, ln_post_b);

    let global_cls = tape.slice_rows(out, seq.global_cls, 1);
    let region_cls_out = if seq.k > 0 {
        let rows: Vec<TensorId> = (0..seq.k)
            .map(|r| tape.slice_rows(out, seq.region_cls[r], 1))
            .collect();
        Some(tape.concat_rows(&rows))
    } else {
        None
    };
    let patch_out = tape.slice_rows(out, seq.patches.start, seq.grid_count());
    Ok(VisualForward {
        global_cls,
        region_cls: region_cls_out,
        patch_tokens: patch_out,
        attention,
    })
}

/// Output handles of the text forward pass for one sentence.
pub struct TextForward {
    /// 1 x text_dim end-of-sequence feature (post final norm).
    pub feature: TensorId,
    /// 1 x embed_dim feature in the shared projection space.
    pub embedded: TensorId,
}

/// Encode one tokenized sentence with appended textual prompts. Attention
/// is bidirectional; the sentence feature is read at the end-of-text token.
pub fn encode_text(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &EncoderConfig,
    prompt_cfg: &PromptConfig,
    token_ids: &[usize],
) -> Result<TextForward> {
    if token_ids.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if token_ids.len() > cfg.context {
        return Err(Error::Contract(format!(
            "{} tokens exceed context {}",
            token_ids.len(),
            cfg.context
        )));
    }
    let token_embed = binder.store().value("text.token_embed")?;
    let pos = binder.store().value("text.pos")?;
    let len = token_ids.len();
    let mut rows = Array2::zeros((len, cfg.text_dim));
    for (i, &id) in token_ids.iter().enumerate() {
        if id >= cfg.vocab_size {
            return Err(Error::Contract(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        for j in 0..cfg.text_dim {
            rows[(i, j)] = token_embed[(id, j)] + pos[(i, j)];
        }
    }
    let tokens = tape.constant(rows);

    let injected = prompt_cfg.injected_layers(cfg.text_layers);
    let with_prompts = |tape: &mut Tape, binder: &mut Binder, x: TensorId, i: usize| {
        if prompt_cfg.textual == 0 {
            return x;
        }
        let p = binder.bind(tape, &format!("prompt.text.l{i}"));
        let sentence = tape.slice_rows(x, 0, len);
        tape.concat_rows(&[sentence, p])
    };

    let mut x = with_prompts(tape, binder, tokens, 0);
    for i in 0..cfg.text_layers {
        if i > 0 && i < injected {
            x = with_prompts(tape, binder, x, i);
        }
        let mut none = None;
        x = transformer_block(
            tape,
            x,
            binder,
            &format!("text.layer{i}"),
            cfg.text_heads,
            None,
            &mut none,
        );
    }

    let ln_g = binder.bind(tape, "text.ln_final.g");
    let ln_b = binder.bind(tape, "text.ln_final.b");
    let out = tape.layer_norm(x, ln_g, ln_b);
    // EOT is the last sentence token, ahead of any appended prompts.
    let feature = tape.slice_rows(out, len - 1, 1);
    let proj = binder.bind(tape, "text.proj");
    let embedded = tape.matmul(feature, proj);
    Ok(TextForward { feature, embedded })
}

/// Serialized bundle metadata.
#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    backbone_id: String,
    config: EncoderConfig,
    tensors: Vec<BundleTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BundleTensor {
    name: String,
    rows: usize,
    cols: usize,
}

/// Load backbone weights from a bundle directory (`meta.json` +
/// `weights.bin`, f64 little-endian in listing order, plus an optional
/// `vocab.json` word map). Shapes are validated tensor by tensor against
/// the expected inventory.
pub fn load_bundle(
    path: &Path,
    expected: &EncoderConfig,
    specs: &[ParamSpec],
) -> Result<HashMap<String, Array2<f64>>> {
    let meta_path = path.join("meta.json");
    let meta: BundleMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::Ingestion {
            path: meta_path.clone(),
            message: e.to_string(),
        })?,
    )?;
    if meta.config != *expected {
        return Err(Error::Load(format!(
            "bundle config mismatch for {:?}: bundle declares {:?}, expected {:?}",
            meta.backbone_id, meta.config, expected
        )));
    }
    let by_name: HashMap<&str, &BundleTensor> =
        meta.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let backbone: Vec<&ParamSpec> = specs
        .iter()
        .filter(|s| matches!(s.group, ParamGroup::Backbone | ParamGroup::MmFormer))
        .collect();
    for spec in &backbone {
        match by_name.get(spec.name.as_str()) {
            None => {
                return Err(Error::Load(format!(
                    "bundle is missing parameter {:?}",
                    spec.name
                )))
            }
            Some(t) if t.rows != spec.rows || t.cols != spec.cols => {
                return Err(Error::Load(format!(
                    "parameter {:?}: bundle shape {}x{}, expected {}x{}",
                    spec.name, t.rows, t.cols, spec.rows, spec.cols
                )))
            }
            _ => {}
        }
    }

    let weights_path = path.join("weights.bin");
    let bytes = std::fs::read(&weights_path).map_err(|e| Error::Ingestion {
        path: weights_path.clone(),
        message: e.to_string(),
    })?;
    let expected_len: usize = meta.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if bytes.len() != expected_len {
        return Err(Error::Load(format!(
            "weights.bin holds {} bytes, metadata describes {}",
            bytes.len(),
            expected_len
        )));
    }
    let mut out = HashMap::new();
    let mut at = 0;
    for t in &meta.tensors {
        let count = t.rows * t.cols;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[at + i * 8..at + i * 8 + 8]);
            data.push(f64::from_le_bytes(b));
        }
        at += count * 8;
        out.insert(
            t.name.clone(),
            Array2::from_shape_vec((t.rows, t.cols), data).expect("shape checked"),
        );
    }
    Ok(out)
}

/// Write a bundle directory in the format [`load_bundle`] reads.
pub fn save_bundle(
    path: &Path,
    backbone_id: &str,
    config: &EncoderConfig,
    tensors: &[(String, Array2<f64>)],
) -> Result<()> {
    std::fs::create_dir_all(path)?;
    let meta = BundleMeta {
        backbone_id: backbone_id.to_string(),
        config: *config,
        tensors: tensors
            .iter()
            .map(|(name, v)| BundleTensor {
                name: name.clone(),
                rows: v.nrows(),
                cols: v.ncols(),
            })
            .collect(),
    };
    std::fs::write(path.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut bytes = Vec::new();
    for (_, v) in tensors {
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path.join("weights.bin"), bytes)?;
    Ok(())
}

/// Load the optional bundle vocabulary; falls back to the hash tokenizer.
pub fn bundle_tokenizer(path: &Path, cfg: &EncoderConfig) -> Result<Tokenizer> {
    let vocab_path = path.join("vocab.json");
    if !vocab_path.exists() {
        return Ok(Tokenizer::Hash {
            vocab_size: cfg.vocab_size,
        });
    }
    let map: HashMap<String, usize> =
        serde_json::from_str(&std::fs::read_to_string(vocab_path)?)?;
    let unk = map.get("<unk>").copied().unwrap_or(1);
    Ok(Tokenizer::Vocab { map, unk })
}
