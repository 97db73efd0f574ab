//! Learnable prompt configuration, the token-sequence layout of the
//! prompted visual encoder, attention-mask construction, and per-layer
//! prompt injection.
//!
//! The visual sequence follows the fixed layout
//! `[CLS_G, P_G, CLS_L1, P_L1, ..., CLS_LK, P_LK, patches]`. Local prompts
//! and region CLS tokens are confined by the attention mask to their own
//! region; patch tokens and the global slots stay unrestricted.

use std::ops::Range;
use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, TensorId};
use crate::regions::RegionLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Shallow,
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInit {
    Random,
    Zero,
}

/// Prompt-bank shape configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Global visual prompts per injected layer.
    pub visual_global: usize,
    /// Local visual prompts per region per injected layer.
    pub per_region: usize,
    /// Textual prompts per injected layer.
    pub textual: usize,
    /// Number of injected layers (capped at each encoder's layer count).
    pub depth: usize,
    pub mode: PromptMode,
    pub init: PromptInit,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            visual_global: 50,
            per_region: 12,
            textual: 3,
            depth: 24,
            mode: PromptMode::Deep,
            init: PromptInit::Random,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == PromptMode::Shallow && self.depth != 1 {
            return Err(Error::Contract(format!(
                "shallow prompt mode requires depth 1, got {}",
                self.depth
            )));
        }
        if self.depth == 0 {
            return Err(Error::Contract("prompt depth must be >= 1".into()));
        }
        Ok(())
    }

    /// Layers that receive fresh prompt parameters in an encoder with
    /// `layers` total layers.
    pub fn injected_layers(&self, layers: usize) -> usize {
        match self.mode {
            PromptMode::Shallow => 1.min(layers),
            PromptMode::Deep => self.depth.min(layers),
        }
    }
}

/// Index layout of the prompted visual token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub k: usize,
    pub global_cls: usize,
    pub global_prompts: Range<usize>,
    pub region_cls: Vec<usize>,
    pub region_prompts: Vec<Range<usize>>,
    pub patches: Range<usize>,
    pub len: usize,
}

impl SequenceLayout {
    /// Layout for `k` regions (0 disables all region machinery) with the
    /// given prompt counts and patch count.
    pub fn new(visual_global: usize, per_region: usize, k: usize, grid_count: usize) -> Self {
        let global_cls = 0;
        let global_prompts = 1..1 + visual_global;
        let mut at = global_prompts.end;
        let mut region_cls = Vec::with_capacity(k);
        let mut region_prompts = Vec::with_capacity(k);
        for _ in 0..k {
            region_cls.push(at);
            at += 1;
            region_prompts.push(at..at + per_region);
            at += per_region;
        }
        let patches = at..at + grid_count;
        SequenceLayout {
            k,
            global_cls,
            global_prompts,
            region_cls,
            region_prompts,
            patches,
            len: at + grid_count,
        }
    }

    pub fn grid_count(&self) -> usize {
        self.patches.len()
    }

    /// Key indices a region-j local token is allowed to attend to.
    pub fn region_allowed(&self, region: usize, layout: &RegionLayout, grid_cols: usize) -> Vec<usize> {
        let mut allowed = vec![self.region_cls[region]];
        allowed.extend(self.region_prompts[region].clone());
        let patch_range = layout.patch_range(region, grid_cols);
        allowed.extend(patch_range.map(|p| self.patches.start + p));
        allowed
    }
}

/// Build the token-level attention permission matrix.
///
/// `k == 1` degenerates to a fully permissive mask: the single region covers
/// the whole grid, so local and global machinery coincide. With
/// `global_attends_local` false, global CLS/prompt queries additionally lose
/// access to every region's local machinery.
pub fn build_attention_mask(
    layout: &RegionLayout,
    seq: &SequenceLayout,
    grid_cols: usize,
    global_attends_local: bool,
) -> Result<Rc<Array2<bool>>> {
    if seq.k != layout.k() {
        return Err(Error::Contract(format!(
            "sequence layout has {} regions, region layout has {}",
            seq.k,
            layout.k()
        )));
    }
    if seq.grid_count() != layout.grid_rows * grid_cols {
        return Err(Error::Contract(format!(
            "sequence layout holds {} patches, region layout covers {}",
            seq.grid_count(),
            layout.grid_rows * grid_cols
        )));
    }
    let mut allow = Array2::from_elem((seq.len, seq.len), true);
    if seq.k > 1 {
        for region in 0..seq.k {
            let allowed = seq.region_allowed(region, layout, grid_cols);
            let mut queries = vec![seq.region_cls[region]];
            queries.extend(seq.region_prompts[region].clone());
            for q in queries {
                for key in 0..seq.len {
                    allow[(q, key)] = false;
                }
                for &key in &allowed {
                    allow[(q, key)] = true;
                }
            }
        }
        if !global_attends_local {
            let mut globals = vec![seq.global_cls];
            globals.extend(seq.global_prompts.clone());
            for q in globals {
                for region in 0..seq.k {
                    allow[(q, seq.region_cls[region])] = false;
                    for key in seq.region_prompts[region].clone() {
                        allow[(q, key)] = false;
                    }
                }
            }
        }
    }
    for q in 0..seq.len {
        if (0..seq.len).all(|key| !allow[(q, key)]) {
            return Err(Error::Contract(format!("attention row {q} fully masked")));
        }
    }
    Ok(Rc::new(allow))
}

/// Fresh prompt tensors for one injected layer, already bound to the tape.
#[derive(Debug, Clone)]
pub struct LayerPrompts {
    /// `visual_global x dim`; absent when no global prompts are configured.
    pub global: Option<TensorId>,
    /// One `per_region x dim` tensor per region; absent entries mean the
    /// region has no local prompts.
    pub local: Vec<Option<TensorId>>,
}

/// Splice layer prompts into the sequence, overwriting the incoming prompt
/// slots. CLS and patch rows propagate from the previous layer untouched.
/// With no prompts configured the sequence is returned unchanged.
pub fn inject(
    tape: &mut Tape,
    seq: &SequenceLayout,
    sequence: TensorId,
    prompts: &LayerPrompts,
) -> Result<TensorId> {
    let no_slots =
        seq.global_prompts.is_empty() && seq.region_prompts.iter().all(|r| r.is_empty());
    if no_slots {
        return Ok(sequence);
    }
    if prompts.local.len() != seq.k {
        return Err(Error::Contract(format!(
            "{} local prompt tensors for {} regions",
            prompts.local.len(),
            seq.k
        )));
    }
    let dim = tape.value(sequence).ncols();
    let check = |tape: &Tape, id: TensorId, rows: usize| -> Result<()> {
        let shape = tape.value(id).dim();
        if shape != (rows, dim) {
            return Err(Error::Contract(format!(
                "prompt tensor shape {shape:?} does not fit slot {rows}x{dim}"
            )));
        }
        Ok(())
    };

    let mut parts: Vec<TensorId> = Vec::new();
    let global_cls = tape.slice_rows(sequence, seq.global_cls, 1);
    parts.push(global_cls);
    if !seq.global_prompts.is_empty() {
        let g = prompts
            .global
            .ok_or_else(|| Error::Contract("missing global prompt tensor".into()))?;
        check(tape, g, seq.global_prompts.len())?;
        parts.push(g);
    }
    for region in 0..seq.k {
        let cls = tape.slice_rows(sequence, seq.region_cls[region], 1);
        parts.push(cls);
        if !seq.region_prompts[region].is_empty() {
            let local = prompts.local[region].ok_or_else(|| {
                Error::Contract(format!("missing local prompt tensor for region {region}"))
            })?;
            check(tape, local, seq.region_prompts[region].len())?;
            parts.push(local);
        }
    }
    if seq.grid_count() > 0 {
        let patches = tape.slice_rows(sequence, seq.patches.start, seq.grid_count());
        parts.push(patches);
    }
    Ok(tape.concat_rows(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::regions::build_region_layout;

    fn seq_4x4() -> (RegionLayout, SequenceLayout) {
        let layout = build_region_layout(4, 4).unwrap();
        let seq = SequenceLayout::new(4, 2, 4, 16);
        (layout, seq)
    }

    #[test]
    fn layout_arithmetic() {
        let (_, seq) = seq_4x4();
        // 1 + 4 + 4*(1+2) + 16
        assert_eq!(seq.len, 33);
        assert_eq!(seq.global_prompts, 1..5);
        assert_eq!(seq.region_cls, vec![5, 8, 11, 14]);
        assert_eq!(seq.patches, 17..33);
    }

    #[test]
    fn mask_row_sums_match_analytic_counts() {
        let (layout, seq) = seq_4x4();
        let mask = build_attention_mask(&layout, &seq, 4, true).unwrap();
        // Brute-force count per local-prompt row: m + 1 + |region patches|.
        for region in 0..4 {
            for q in seq.region_prompts[region].clone() {
                let allowed = (0..seq.len).filter(|&k| mask[(q, k)]).count();
                assert_eq!(allowed, 2 + 1 + 4, "region {region} query {q}");
            }
            let q = seq.region_cls[region];
            let allowed = (0..seq.len).filter(|&k| mask[(q, k)]).count();
            assert_eq!(allowed, 2 + 1 + 4);
        }
        // Patch and global rows are unrestricted.
        for q in seq.patches.clone() {
            assert_eq!((0..seq.len).filter(|&k| mask[(q, k)]).count(), seq.len);
        }
        assert_eq!(
            (0..seq.len).filter(|&k| mask[(0, k)]).count(),
            seq.len
        );
    }

    #[test]
    fn local_rows_see_only_their_region() {
        let (layout, seq) = seq_4x4();
        let mask = build_attention_mask(&layout, &seq, 4, true).unwrap();
        let q = seq.region_prompts[0].start;
        let allowed = seq.region_allowed(0, &layout, 4);
        for key in 0..seq.len {
            assert_eq!(mask[(q, key)], allowed.contains(&key));
        }
        // Region-1 prompt cannot reach region-2 patches.
        let region2_patch = seq.patches.start + layout.patch_range(1, 4).start;
        assert!(!mask[(q, region2_patch)]);
    }

    #[test]
    fn single_region_mask_is_fully_permissive() {
        let layout = build_region_layout(4, 1).unwrap();
        let seq = SequenceLayout::new(4, 2, 1, 16);
        let mask = build_attention_mask(&layout, &seq, 4, true).unwrap();
        assert!(mask.iter().all(|&b| b));
    }

    #[test]
    fn global_local_switch_restricts_global_rows() {
        let (layout, seq) = seq_4x4();
        let mask = build_attention_mask(&layout, &seq, 4, false).unwrap();
        let q = seq.global_cls;
        assert!(!mask[(q, seq.region_cls[0])]);
        assert!(!mask[(q, seq.region_prompts[2].start)]);
        assert!(mask[(q, seq.patches.start)]);
        assert!(mask[(q, seq.global_prompts.start)]);
    }

    #[test]
    fn k_mismatch_is_a_contract_error() {
        let layout = build_region_layout(4, 2).unwrap();
        let seq = SequenceLayout::new(4, 2, 4, 16);
        assert!(build_attention_mask(&layout, &seq, 4, true).is_err());
    }

    #[test]
    fn inject_overwrites_prompt_slots() {
        use ndarray::Array2;
        let seq = SequenceLayout::new(2, 1, 2, 4);
        let dim = 3;
        let mut tape = Tape::new();
        let base = tape.constant(Array2::from_elem((seq.len, dim), 7.0));
        let global = tape.param(Array2::from_elem((2, dim), 1.0));
        let l1 = tape.param(Array2::from_elem((1, dim), 2.0));
        let l2 = tape.param(Array2::from_elem((1, dim), 3.0));
        let out = inject(
            &mut tape,
            &seq,
            base,
            &LayerPrompts {
                global: Some(global),
                local: vec![Some(l1), Some(l2)],
            },
        )
        .unwrap();
        let v = tape.value(out);
        assert_eq!(v.nrows(), seq.len);
        assert_eq!(v[(seq.global_cls, 0)], 7.0);
        assert_eq!(v[(seq.global_prompts.start, 0)], 1.0);
        assert_eq!(v[(seq.region_prompts[0].start, 0)], 2.0);
        assert_eq!(v[(seq.region_prompts[1].start, 0)], 3.0);
        assert_eq!(v[(seq.patches.start, 0)], 7.0);
    }

    #[test]
    fn inject_rejects_width_mismatch() {
        use ndarray::Array2;
        let seq = SequenceLayout::new(1, 0, 0, 4);
        let mut tape = Tape::new();
        let base = tape.constant(Array2::zeros((seq.len, 3)));
        let global = tape.param(Array2::zeros((1, 5)));
        let res = inject(
            &mut tape,
            &seq,
            base,
            &LayerPrompts {
                global: Some(global),
                local: vec![],
            },
        );
        assert!(res.is_err());
    }
}
