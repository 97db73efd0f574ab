//! The assembled network: frozen encoder pair + prompt bank + fusion head,
//! with the batched forward pass used by training, evaluation, prediction,
//! and attention export.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ImageTensor;
use crate::encoders::{
    self, bundle_tokenizer, encode_text, encode_visual, load_bundle, patchify, BackboneSource,
    EncoderConfig, Tokenizer, VisualForward,
};
use crate::error::{Error, Result};
use crate::fusion::{
    self, classify, fuse, global_local_similarity, project_text, FusionMode, RegionAggregation,
};
use crate::graph::{Tape, TensorId};
use crate::params::{AuditReport, Binder, ParamSpec, ParamStore};
use crate::prompts::{build_attention_mask, PromptConfig, SequenceLayout};
use crate::regions::{build_region_layout, RegionLayout};
use crate::vocab::AttributeSet;

/// Everything that fixes the network architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSource,
    pub prompt: PromptConfig,
    /// Region count K; 0 disables all region machinery.
    pub regions_k: usize,
    pub global_attends_local: bool,
    pub fusion: FusionMode,
    pub aggregation: RegionAggregation,
    pub temperature: f64,
}

impl ModelConfig {
    pub fn stub_default() -> Self {
        ModelConfig {
            backbone: BackboneSource::Stub(encoders::StubSpec::default()),
            prompt: PromptConfig {
                visual_global: 4,
                per_region: 2,
                textual: 2,
                depth: 2,
                ..PromptConfig::default()
            },
            regions_k: 4,
            global_attends_local: true,
            fusion: FusionMode::MmFormer,
            aggregation: RegionAggregation::Max,
            temperature: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prompt.validate()?;
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Full parameter inventory for a model configuration; pure shape
/// arithmetic, usable without materializing any weights.
pub fn parameter_inventory(
    cfg: &ModelConfig,
    encoder: &EncoderConfig,
    n_attributes: usize,
) -> Vec<ParamSpec> {
    let mut specs = encoders::visual_param_specs(encoder);
    specs.extend(encoders::text_param_specs(encoder));
    specs.extend(fusion::mm_former_specs(
        encoder.visual_dim,
        encoder.mlp_ratio,
        cfg.fusion,
    ));
    specs.extend(encoders::prompt_param_specs(
        encoder,
        &cfg.prompt,
        cfg.regions_k,
    ));
    specs.extend(fusion::head_specs(
        n_attributes,
        encoder.text_dim,
        encoder.visual_dim,
    ));
    specs
}

/// Shape-only audit of a configuration (no weights needed).
pub fn audit_configuration(
    cfg: &ModelConfig,
    n_attributes: usize,
) -> Result<AuditReport> {
    let encoder = cfg.backbone.encoder_config()?;
    encoder.validate()?;
    let specs = parameter_inventory(cfg, &encoder, n_attributes);
    crate::params::audit_specs(&specs)
}

pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: EncoderConfig,
    pub attributes: AttributeSet,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    token_ids: Vec<Vec<usize>>,
    pub region_layout: Option<RegionLayout>,
    pub seq: SequenceLayout,
    pub mask: Option<Rc<Array2<bool>>>,
}

/// What a forward pass should additionally produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Compute the global-local similarity path.
    pub with_gl: bool,
    /// Record attention matrices of the visual encoder and the fusion
    /// transformer.
    pub record_attention: bool,
}

/// Handles into the tape for one forward batch.
pub struct BatchForward {
    /// M x N probabilities.
    pub probs: TensorId,
    /// M x N pre-sigmoid logits.
    pub logits: TensorId,
    /// M x N global-local probabilities when requested.
    pub p_gl: Option<TensorId>,
    /// Per-sample fused attribute features (N x visual_dim).
    pub fused: Vec<TensorId>,
    /// Per-sample visual forward handles.
    pub visual: Vec<VisualForward>,
    /// Per-sample fusion attention recordings (per head), when requested.
    pub fusion_attention: Vec<Vec<TensorId>>,
    /// N x text_dim attribute features.
    pub text_features: TensorId,
    /// N x embed_dim attribute features in the shared similarity space.
    pub text_embedded: TensorId,
}

impl Model {
    /// Assemble the model: materialize parameters (stub) or load the
    /// bundle, build the region/sequence layouts and the attention mask,
    /// and tokenize the attribute sentences.
    pub fn build(cfg: ModelConfig, attributes: AttributeSet) -> Result<Model> {
        cfg.validate()?;
        attributes.validate()?;
        let encoder = cfg.backbone.encoder_config()?;
        encoder.validate()?;
        let specs = parameter_inventory(&cfg, &encoder, attributes.len());
        crate::params::audit_specs(&specs)?;
        let mut store = ParamStore::from_specs(specs.clone(), cfg.backbone.seed());

        let tokenizer = match &cfg.backbone {
            BackboneSource::Stub(_) => Tokenizer::Hash {
                vocab_size: encoder.vocab_size,
            },
            BackboneSource::Bundle { path, .. } => {
                let weights = load_bundle(path, &encoder, &specs)?;
                for (name, value) in weights {
                    store.set_value(&name, value)?;
                }
                bundle_tokenizer(path, &encoder)?
            }
        };

        let region_layout = if cfg.regions_k > 0 {
            Some(build_region_layout(encoder.grid_side(), cfg.regions_k)?)
        } else {
            None
        };
        let seq = SequenceLayout::new(
            cfg.prompt.visual_global,
            cfg.prompt.per_region,
            cfg.regions_k,
            encoder.grid_count(),
        );
        let mask = match &region_layout {
            Some(layout) => Some(build_attention_mask(
                layout,
                &seq,
                encoder.grid_side(),
                cfg.global_attends_local,
            )?),
            None => None,
        };

        let token_ids = attributes
            .expansions
            .iter()
            .map(|s| tokenizer.tokenize(s, encoder.context))
            .collect::<Result<Vec<_>>>()?;

        Ok(Model {
            cfg,
            encoder,
            attributes,
            store,
            tokenizer,
            token_ids,
            region_layout,
            seq,
            mask,
        })
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn audit(&self) -> Result<AuditReport> {
        self.store.audit()
    }

    /// Patch-embed one preprocessed image (outside the tape; the patch
    /// pipeline is frozen).
    pub fn patch_tokens(&self, image: &ImageTensor) -> Result<Array2<f64>> {
        patchify(
            image,
            &self.encoder,
            self.store.value("visual.patch_embed.w")?,
            self.store.value("visual.pos")?,
        )
    }

    /// Batched forward pass. Text runs once per batch; each image runs
    /// through the prompted visual encoder and the fusion head.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        images: &[ImageTensor],
        opts: ForwardOptions,
    ) -> Result<BatchForward> {
        if images.is_empty() {
            return Err(Error::Contract("empty forward batch".into()));
        }
        if opts.with_gl && self.cfg.regions_k == 0 {
            return Err(Error::Contract(
                "the global-local path requires regions.k >= 1".into(),
            ));
        }

        let n = self.n_attributes();
        let mut feats = Vec::with_capacity(n);
        let mut embeds = Vec::with_capacity(n);
        for ids in &self.token_ids {
            let t = encode_text(tape, binder, &self.encoder, &self.cfg.prompt, ids)?;
            feats.push(t.feature);
            embeds.push(t.embedded);
        }
        let text_features = tape.concat_rows(&feats);
        let text_embedded = tape.concat_rows(&embeds);
        let text_proj = project_text(tape, binder, text_features)?;

        let mut prob_rows = Vec::with_capacity(images.len());
        let mut logit_rows = Vec::with_capacity(images.len());
        let mut gl_rows = Vec::with_capacity(images.len());
        let mut fused_all = Vec::with_capacity(images.len());
        let mut visual_all = Vec::with_capacity(images.len());
        let mut fusion_attention = Vec::with_capacity(images.len());
        for image in images {
            let patch_tokens = self.patch_tokens(image)?;
            let visual = encode_visual(
                tape,
                binder,
                &self.encoder,
                &self.cfg.prompt,
                &self.seq,
                self.mask.clone(),
                patch_tokens,
                opts.record_attention,
            )?;
            let mut fuse_rec = Vec::new();
            let mut rec = opts.record_attention.then_some(&mut fuse_rec);
            let z = fuse(
                tape,
                binder,
                text_proj,
                visual.patch_tokens,
                self.encoder.visual_heads,
                self.cfg.fusion,
                &mut rec,
            )?;
            let scores = classify(tape, binder, z)?;
            prob_rows.push(tape.transpose(scores.probs));
            logit_rows.push(tape.transpose(scores.logits));
            if opts.with_gl {
                let region_cls = visual.region_cls.expect("regions active");
                let sim = global_local_similarity(
                    tape,
                    binder,
                    visual.global_cls,
                    region_cls,
                    text_embedded,
                    self.cfg.temperature,
                    self.cfg.aggregation,
                )?;
                gl_rows.push(sim.p_gl);
            }
            fused_all.push(z);
            visual_all.push(visual);
            fusion_attention.push(fuse_rec);
        }

        Ok(BatchForward {
            probs: tape.concat_rows(&prob_rows),
            logits: tape.concat_rows(&logit_rows),
            p_gl: if opts.with_gl {
                Some(tape.concat_rows(&gl_rows))
            } else {
                None
            },
            fused: fused_all,
            visual: visual_all,
            fusion_attention,
            text_features,
            text_embedded,
        })
    }

    /// Probability matrix for a list of images (no gradients kept).
    pub fn predict_probs(&self, images: &[ImageTensor]) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.store);
        let out = self.forward_batch(&mut tape, &mut binder, images, ForwardOptions::default())?;
        Ok(tape.value(out.probs).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, schema_entries, SyntheticConfig};
    use crate::vocab::build_attribute_set;

    fn tiny_attributes(n: usize) -> AttributeSet {
        let entries = schema_entries(n);
        let labels = vec![vec![1; n], vec![0; n]];
        build_attribute_set(&entries, &labels).unwrap()
    }

    fn stub_model() -> Model {
        Model::build(ModelConfig::stub_default(), tiny_attributes(3)).unwrap()
    }

    #[test]
    fn builds_and_audits() {
        let model = stub_model();
        let report = model.audit().unwrap();
        assert!(report.trainable_count > 0);
        // prompts: (4 global + 4*2 local)*32*2 layers + text 2*32*2 + region cls 4*32
        // head: phi 32*32+32 + classifier 3*32+3
        let prompts = (4 + 8) * 32 * 2 + 2 * 32 * 2 + 4 * 32;
        let head = 32 * 32 + 32 + 3 * 32 + 3;
        assert_eq!(report.trainable_count, prompts + head);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = stub_model();
        let cfg = SyntheticConfig {
            samples: 3,
            attributes: 3,
            ..Default::default()
        };
        let (images, _) = generate_synthetic(&cfg).unwrap();
        let p1 = model.predict_probs(&images).unwrap();
        let p2 = model.predict_probs(&images).unwrap();
        assert_eq!(p1.dim(), (3, 3));
        assert_eq!(p1, p2);
        assert!(p1.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn gl_path_produces_probabilities() {
        let model = stub_model();
        let cfg = SyntheticConfig {
            samples: 2,
            attributes: 3,
            ..Default::default()
        };
        let (images, _) = generate_synthetic(&cfg).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&model.store);
        let out = model
            .forward_batch(
                &mut tape,
                &mut binder,
                &images,
                ForwardOptions {
                    with_gl: true,
                    record_attention: false,
                },
            )
            .unwrap();
        let p = tape.value(out.p_gl.unwrap());
        assert_eq!(p.dim(), (2, 3));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn stub_output_reacts_to_input_perturbation() {
        let model = stub_model();
        let cfg = SyntheticConfig {
            samples: 1,
            attributes: 3,
            ..Default::default()
        };
        let (mut images, _) = generate_synthetic(&cfg).unwrap();
        let base = model.predict_probs(&images).unwrap();
        let old = images[0].get(20, 16, 1);
        images[0].set(20, 16, 1, 1.0 - old);
        let tweaked = model.predict_probs(&images).unwrap();
        assert!(base
            .iter()
            .zip(tweaked.iter())
            .any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn audit_from_shapes_matches_materialized_store() {
        let cfg = ModelConfig::stub_default();
        let shape_report = audit_configuration(&cfg, 3).unwrap();
        let model = stub_model();
        let store_report = model.audit().unwrap();
        assert_eq!(shape_report.trainable_count, store_report.trainable_count);
        assert_eq!(shape_report.total_count, store_report.total_count);
    }
}
