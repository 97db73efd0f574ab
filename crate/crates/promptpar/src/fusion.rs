//! Multi-modal fusion and the classification path: text-to-visual
//! projection, the single-layer fusion transformer, the per-attribute
//! scoring head, and the global-local similarity matrices.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, TensorId};
use crate::params::{Binder, Init, ParamGroup, ParamSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One frozen transformer layer over [projected text; visual tokens].
    MmFormer,
    /// Ablation: a frozen fully connected layer over [projected text token;
    /// mean visual token].
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionAggregation {
    /// An attribute matches its best body region.
    Max,
    Mean,
}

/// Frozen fusion-transformer inventory at the visual token width.
pub fn mm_former_specs(visual_dim: usize, mlp_ratio: usize, mode: FusionMode) -> Vec<ParamSpec> {
    let g = ParamGroup::MmFormer;
    match mode {
        FusionMode::MmFormer => {
            let hidden = visual_dim * mlp_ratio;
            let mut specs = vec![
                ParamSpec::new("mm.layer0.ln1.g", 1, visual_dim, g, false, Init::Ones),
                ParamSpec::new("mm.layer0.ln1.b", 1, visual_dim, g, false, Init::Zeros),
                ParamSpec::new("mm.layer0.attn.qkv.w", visual_dim, 3 * visual_dim, g, false, Init::Xavier),
                ParamSpec::new("mm.layer0.attn.qkv.b", 1, 3 * visual_dim, g, false, Init::Zeros),
                ParamSpec::new("mm.layer0.attn.proj.w", visual_dim, visual_dim, g, false, Init::Xavier),
                ParamSpec::new("mm.layer0.attn.proj.b", 1, visual_dim, g, false, Init::Zeros),
                ParamSpec::new("mm.layer0.ln2.g", 1, visual_dim, g, false, Init::Ones),
                ParamSpec::new("mm.layer0.ln2.b", 1, visual_dim, g, false, Init::Zeros),
                ParamSpec::new("mm.layer0.mlp.fc1.w", visual_dim, hidden, g, false, Init::Xavier),
                ParamSpec::new("mm.layer0.mlp.fc1.b", 1, hidden, g, false, Init::Zeros),
                ParamSpec::new("mm.layer0.mlp.fc2.w", hidden, visual_dim, g, false, Init::Xavier),
                ParamSpec::new("mm.layer0.mlp.fc2.b", 1, visual_dim, g, false, Init::Zeros),
            ];
            specs.push(ParamSpec::new("mm.ln_out.g", 1, visual_dim, g, false, Init::Ones));
            specs.push(ParamSpec::new("mm.ln_out.b", 1, visual_dim, g, false, Init::Zeros));
            specs
        }
        FusionMode::Mlp => vec![
            ParamSpec::new("mm.mlp_fusion.w", 2 * visual_dim, visual_dim, g, false, Init::Xavier),
            ParamSpec::new("mm.mlp_fusion.b", 1, visual_dim, g, false, Init::Zeros),
        ],
    }
}

/// Trainable head inventory: the text projection phi and the per-attribute
/// affine classifier.
pub fn head_specs(n_attributes: usize, text_dim: usize, visual_dim: usize) -> Vec<ParamSpec> {
    let g = ParamGroup::Head;
    vec![
        ParamSpec::new("head.phi.w", text_dim, visual_dim, g, true, Init::Xavier),
        ParamSpec::new("head.phi.b", 1, visual_dim, g, true, Init::Zeros),
        ParamSpec::new("head.classifier.w", n_attributes, visual_dim, g, true, Init::Xavier),
        ParamSpec::new("head.classifier.b", n_attributes, 1, g, true, Init::Zeros),
    ]
}

/// phi: affine map of text features into the visual token width.
pub fn project_text(tape: &mut Tape, binder: &mut Binder, text: TensorId) -> Result<TensorId> {
    let w = binder.bind(tape, "head.phi.w");
    let b = binder.bind(tape, "head.phi.b");
    let in_width = tape.value(text).ncols();
    let expected = tape.value(w).nrows();
    if in_width != expected {
        return Err(Error::Contract(format!(
            "phi expects width {expected}, got {in_width}"
        )));
    }
    Ok(tape.linear(text, w, b))
}

/// Fuse projected text tokens (N x d) with visual tokens and select the N
/// text positions as Z. Text rows come first in the concatenation; the
/// recorded attention matrices cover the full fused sequence.
pub fn fuse(
    tape: &mut Tape,
    binder: &mut Binder,
    text_proj: TensorId,
    visual: TensorId,
    heads: usize,
    mode: FusionMode,
    record: &mut Option<&mut Vec<TensorId>>,
) -> Result<TensorId> {
    let (n, dt) = tape.value(text_proj).dim();
    let (v_rows, dv) = tape.value(visual).dim();
    if dt != dv {
        return Err(Error::Contract(format!(
            "fusion width mismatch: text {dt}, visual {dv}"
        )));
    }
    match mode {
        FusionMode::MmFormer => {
            let x = tape.concat_rows(&[text_proj, visual]);
            let fused = crate::encoders::transformer_block(
                tape, x, binder, "mm.layer0", heads, None, record,
            );
            let g = binder.bind(tape, "mm.ln_out.g");
            let b = binder.bind(tape, "mm.ln_out.b");
            let out = tape.layer_norm(fused, g, b);
            Ok(tape.slice_rows(out, 0, n))
        }
        FusionMode::Mlp => {
            let ones = tape.constant(Array2::from_elem((n, 1), 1.0));
            let mean_row = tape.constant(Array2::from_elem((1, v_rows), 1.0 / v_rows as f64));
            let mean_vis = tape.matmul(mean_row, visual);
            let mean_rep = tape.matmul(ones, mean_vis);
            let joint = tape.concat_cols(&[text_proj, mean_rep]);
            let w = binder.bind(tape, "mm.mlp_fusion.w");
            let b = binder.bind(tape, "mm.mlp_fusion.b");
            Ok(tape.linear(joint, w, b))
        }
    }
}

/// Per-attribute scores from the fused text tokens:
/// `R = sigmoid(w Z + b)` with one weight row per attribute.
pub struct Scores {
    /// N x 1 pre-sigmoid values.
    pub logits: TensorId,
    /// N x 1 probabilities.
    pub probs: TensorId,
}

pub fn classify(tape: &mut Tape, binder: &mut Binder, z: TensorId) -> Result<Scores> {
    let w = binder.bind(tape, "head.classifier.w");
    let b = binder.bind(tape, "head.classifier.b");
    let (n, d) = tape.value(w).dim();
    if tape.value(z).dim() != (n, d) {
        return Err(Error::Contract(format!(
            "classifier expects {n}x{d} fused features, got {:?}",
            tape.value(z).dim()
        )));
    }
    let dot = tape.row_dot(z, w);
    let logits = tape.add(dot, b);
    let probs = tape.sigmoid(logits);
    Ok(Scores { logits, probs })
}

/// Similarity handles of the global-local path for one sample.
pub struct Similarity {
    /// 1 x N cosine of the projected global CLS against each attribute.
    pub s_global: TensorId,
    /// 1 x N aggregated region similarity.
    pub s_region: TensorId,
    /// 1 x N probabilities from the averaged, temperature-scaled matrix.
    pub p_gl: TensorId,
}

/// Cosine similarities between the (projected) global/region CLS tokens and
/// the attribute text embeddings, averaged and squashed:
/// `p = sigmoid(((s_global + s_region) / 2) / temperature)`.
pub fn global_local_similarity(
    tape: &mut Tape,
    binder: &mut Binder,
    global_cls: TensorId,
    region_cls: TensorId,
    text_embedded: TensorId,
    temperature: f64,
    aggregation: RegionAggregation,
) -> Result<Similarity> {
    if temperature <= 0.0 {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let proj = binder.bind(tape, "visual.proj");
    let g_e = tape.matmul(global_cls, proj);
    let r_e = tape.matmul(region_cls, proj);
    let s_global = tape.cosine_rows(g_e, text_embedded);
    let region_matrix = tape.cosine_rows(r_e, text_embedded);
    let s_region = match aggregation {
        RegionAggregation::Max => tape.col_max(region_matrix),
        RegionAggregation::Mean => {
            let k = tape.value(region_matrix).nrows();
            let mean_row = tape.constant(Array2::from_elem((1, k), 1.0 / k as f64));
            tape.matmul(mean_row, region_matrix)
        }
    };
    let sum = tape.add(s_global, s_region);
    let avg = tape.scale(sum, 0.5);
    let scaled = tape.scale(avg, 1.0 / temperature);
    let p_gl = tape.sigmoid(scaled);
    Ok(Similarity {
        s_global,
        s_region,
        p_gl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;
    use crate::params::ParamStore;
    use ndarray::array;

    fn head_store(n: usize, text_dim: usize, visual_dim: usize) -> ParamStore {
        ParamStore::from_specs(head_specs(n, text_dim, visual_dim), 5)
    }

    #[test]
    fn identity_phi_returns_input() {
        let mut store = head_store(2, 3, 3);
        store
            .set_value("head.phi.w", Array2::eye(3))
            .unwrap();
        store.set_value("head.phi.b", Array2::zeros((1, 3))).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x = tape.constant(array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]);
        let y = project_text(&mut tape, &mut binder, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_input_yields_bias() {
        let mut store = head_store(1, 2, 3);
        store
            .set_value("head.phi.b", array![[0.1, 0.2, 0.3]])
            .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x = tape.constant(Array2::zeros((1, 2)));
        let y = project_text(&mut tape, &mut binder, x).unwrap();
        assert_eq!(tape.value(y), &array![[0.1, 0.2, 0.3]]);
    }

    #[test]
    fn phi_rejects_width_mismatch() {
        let store = head_store(1, 4, 3);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let x = tape.constant(Array2::zeros((1, 3)));
        assert!(project_text(&mut tape, &mut binder, x).is_err());
    }

    #[test]
    fn zero_head_scores_half_and_saturates_with_bias() {
        let mut store = head_store(2, 3, 3);
        store
            .set_value("head.classifier.w", Array2::zeros((2, 3)))
            .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let z = tape.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let scores = classify(&mut tape, &mut binder, z).unwrap();
        assert!(tape.value(scores.probs).iter().all(|&p| (p - 0.5).abs() < 1e-12));

        let mut store = head_store(1, 3, 3);
        store
            .set_value("head.classifier.w", Array2::zeros((1, 3)))
            .unwrap();
        store
            .set_value("head.classifier.b", array![[10.0]])
            .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let z = tape.constant(Array2::zeros((1, 3)));
        let scores = classify(&mut tape, &mut binder, z).unwrap();
        assert!((tape.value(scores.probs)[(0, 0)] - sigmoid(10.0)).abs() < 1e-12);
        assert!(tape.value(scores.probs)[(0, 0)] > 0.9999);
    }

    #[test]
    fn score_symmetry_around_half() {
        // Identical weight rows and opposite features give opposite logits,
        // so the sigmoid scores mirror around 0.5.
        let mut store = head_store(2, 3, 3);
        store
            .set_value("head.classifier.w", array![[0.3, -0.7, 1.1], [0.3, -0.7, 1.1]])
            .unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let z = tape.constant(array![[1.0, -0.5, 2.0], [-1.0, 0.5, -2.0]]);
        let scores = classify(&mut tape, &mut binder, z).unwrap();
        let p = tape.value(scores.probs);
        let l = tape.value(scores.logits);
        assert!((l[(0, 0)] + l[(1, 0)]).abs() < 1e-12);
        assert!((p[(0, 0)] + p[(1, 0)] - 1.0).abs() < 1e-12);
    }

    fn fusion_store(n: usize, dim: usize, mode: FusionMode) -> ParamStore {
        let mut specs = mm_former_specs(dim, 4, mode);
        specs.extend(head_specs(n, dim, dim));
        ParamStore::from_specs(specs, 9)
    }

    #[test]
    fn fuse_selects_n_text_rows() {
        for visual_rows in [4usize, 9, 16] {
            let store = fusion_store(3, 8, FusionMode::MmFormer);
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store);
            let text = tape.constant(Array2::from_elem((3, 8), 0.3));
            let visual = tape.constant(Array2::from_elem((visual_rows, 8), 0.1));
            let z = fuse(
                &mut tape,
                &mut binder,
                text,
                visual,
                2,
                FusionMode::MmFormer,
                &mut None,
            )
            .unwrap();
            assert_eq!(tape.value(z).nrows(), 3);
        }
    }

    #[test]
    fn permuting_attribute_order_permutes_z_rows() {
        let store = fusion_store(3, 8, FusionMode::MmFormer);
        let rng_vals = |s: u64, r: usize, c: usize| {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
            Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
        };
        let text = rng_vals(1, 3, 8);
        let visual = rng_vals(2, 5, 8);
        let run = |text: &Array2<f64>| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store);
            let t = tape.constant(text.clone());
            let v = tape.constant(visual.clone());
            let z = fuse(
                &mut tape,
                &mut binder,
                t,
                v,
                2,
                FusionMode::MmFormer,
                &mut None,
            )
            .unwrap();
            tape.value(z).clone()
        };
        let z = run(&text);
        let mut permuted = Array2::zeros((3, 8));
        let order = [2usize, 0, 1];
        for (i, &src) in order.iter().enumerate() {
            permuted.row_mut(i).assign(&text.row(src));
        }
        let z_perm = run(&permuted);
        for (i, &src) in order.iter().enumerate() {
            for j in 0..8 {
                assert!(
                    (z_perm[(i, j)] - z[(src, j)]).abs() < 1e-9,
                    "row {i} should match original row {src}"
                );
            }
        }
    }

    #[test]
    fn visual_information_flows_into_z() {
        let store = fusion_store(2, 8, FusionMode::MmFormer);
        let run = |visual: Array2<f64>| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store);
            let t = tape.constant(Array2::from_elem((2, 8), 0.4));
            let v = tape.constant(visual);
            let z = fuse(
                &mut tape,
                &mut binder,
                t,
                v,
                2,
                FusionMode::MmFormer,
                &mut None,
            )
            .unwrap();
            tape.value(z).clone()
        };
        let z_zero = run(Array2::zeros((5, 8)));
        let z_nonzero = run(Array2::from_shape_fn((5, 8), |(i, j)| {
            ((i * 8 + j) as f64 * 0.37).sin()
        }));
        assert!(z_zero
            .iter()
            .zip(z_nonzero.iter())
            .any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn mlp_fusion_mode_runs() {
        let store = fusion_store(2, 8, FusionMode::Mlp);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let t = tape.constant(Array2::from_elem((2, 8), 0.4));
        let v = tape.constant(Array2::from_elem((5, 8), 0.2));
        let z = fuse(&mut tape, &mut binder, t, v, 2, FusionMode::Mlp, &mut None).unwrap();
        assert_eq!(tape.value(z).dim(), (2, 8));
    }

    fn similarity_store(dim: usize) -> ParamStore {
        let specs = vec![ParamSpec::new(
            "visual.proj",
            dim,
            dim,
            ParamGroup::Backbone,
            false,
            Init::Xavier,
        )];
        let mut store = ParamStore::from_specs(specs, 3);
        store.set_value("visual.proj", Array2::eye(dim)).unwrap();
        store
    }

    #[test]
    fn parallel_features_hit_sigma_one_over_tau() {
        let store = similarity_store(3);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let g = tape.constant(array![[2.0, 0.0, 0.0]]);
        let r = tape.constant(array![[4.0, 0.0, 0.0]]);
        let t = tape.constant(array![[1.0, 0.0, 0.0]]);
        let sim = global_local_similarity(
            &mut tape,
            &mut binder,
            g,
            r,
            t,
            0.07,
            RegionAggregation::Max,
        )
        .unwrap();
        let expected = sigmoid(1.0 / 0.07);
        assert!((tape.value(sim.p_gl)[(0, 0)] - expected).abs() < 1e-9);
    }

    #[test]
    fn orthogonal_features_score_half() {
        let store = similarity_store(3);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let g = tape.constant(array![[1.0, 0.0, 0.0]]);
        let r = tape.constant(array![[0.0, 0.0, 1.0]]);
        let t = tape.constant(array![[0.0, 1.0, 0.0]]);
        let sim = global_local_similarity(
            &mut tape,
            &mut binder,
            g,
            r,
            t,
            0.07,
            RegionAggregation::Max,
        )
        .unwrap();
        assert!((tape.value(sim.p_gl)[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_region_max_is_identity_and_scale_invariant() {
        let store = similarity_store(3);
        let eval = |scale: f64| {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&store);
            let g = tape.constant(array![[0.3, -0.2, 0.9]]);
            let r = tape.constant(array![[scale * 0.5, scale * 0.1, scale * -0.4]]);
            let t = tape.constant(array![[0.8, 0.1, -0.1], [-0.3, 0.9, 0.2]]);
            let sim = global_local_similarity(
                &mut tape,
                &mut binder,
                g,
                r,
                t,
                0.07,
                RegionAggregation::Max,
            )
            .unwrap();
            (
                tape.value(sim.s_region).clone(),
                tape.value(sim.p_gl).clone(),
            )
        };
        let (r1, p1) = eval(1.0);
        let (r2, p2) = eval(7.5);
        for j in 0..2 {
            assert!((r1[(0, j)] - r2[(0, j)]).abs() < 1e-6);
            assert!((p1[(0, j)] - p2[(0, j)]).abs() < 1e-6);
        }
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let store = similarity_store(2);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let g = tape.constant(Array2::ones((1, 2)));
        let r = tape.constant(Array2::ones((1, 2)));
        let t = tape.constant(Array2::ones((1, 2)));
        assert!(global_local_similarity(
            &mut tape,
            &mut binder,
            g,
            r,
            t,
            0.0,
            RegionAggregation::Max
        )
        .is_err());
    }
}
