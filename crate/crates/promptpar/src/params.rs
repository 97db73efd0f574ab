//! Named parameter registry with freezing groups.
//!
//! Every tensor of the assembled network is declared as a [`ParamSpec`]
//! before any value exists, so parameter audits run on shapes alone. The
//! [`ParamStore`] materializes values deterministically from a seed (stub
//! backbones) or from a weight bundle, and a [`Binder`] bridges store
//! entries onto a [`Tape`]: trainable entries become gradient-carrying
//! leaves, frozen entries become constants.

use std::collections::HashMap;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Grads, Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    MmFormer,
    Prompts,
    Head,
}

impl ParamGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::MmFormer => "mm_former",
            ParamGroup::Prompts => "prompts",
            ParamGroup::Head => "head",
        }
    }
}

/// How a tensor is filled when no bundle provides it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform(-b, b) with b = sqrt(6 / (rows + cols)).
    Xavier,
    /// Uniform(-0.1, 0.1), used for embeddings and positional tables.
    Embedding,
    /// Uniform(-0.5/sqrt(cols), +0.5/sqrt(cols)) per the prompt-init rule.
    PromptUniform,
    /// Rows copied from the backbone CLS embedding (region CLS tokens).
    CopyVisualCls,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    pub trainable: bool,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        trainable: bool,
        init: Init,
    ) -> Self {
        ParamSpec {
            name: name.into(),
            rows,
            cols,
            group,
            trainable,
            init,
        }
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

/// Aggregated audit of a parameter inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub trainable_count: usize,
    pub total_count: usize,
    pub ratio: f64,
    pub by_group: Vec<GroupCounts>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCounts {
    pub group: String,
    pub trainable: usize,
    pub total: usize,
}

/// Shape-only trainable-parameter audit.
///
/// Fails when any backbone or fusion-transformer tensor is flagged
/// trainable, or a prompt/head tensor is frozen: the trainable groups must
/// be exactly {prompts, head}.
pub fn audit_specs(specs: &[ParamSpec]) -> Result<AuditReport> {
    let mut groups: Vec<(ParamGroup, GroupCounts)> = [
        ParamGroup::Backbone,
        ParamGroup::MmFormer,
        ParamGroup::Prompts,
        ParamGroup::Head,
    ]
    .iter()
    .map(|g| {
        (
            *g,
            GroupCounts {
                group: g.label().to_string(),
                trainable: 0,
                total: 0,
            },
        )
    })
    .collect();

    for spec in specs {
        let expected_trainable =
            matches!(spec.group, ParamGroup::Prompts | ParamGroup::Head);
        if spec.trainable && !expected_trainable {
            return Err(Error::Audit(format!(
                "parameter {:?} in frozen group {} is flagged trainable",
                spec.name,
                spec.group.label()
            )));
        }
        if !spec.trainable && expected_trainable {
            return Err(Error::Audit(format!(
                "parameter {:?} in group {} must be trainable",
                spec.name,
                spec.group.label()
            )));
        }
        let slot = groups.iter_mut().find(|(g, _)| *g == spec.group).unwrap();
        slot.1.total += spec.count();
        if spec.trainable {
            slot.1.trainable += spec.count();
        }
    }

    let total_count: usize = groups.iter().map(|(_, c)| c.total).sum();
    let trainable_count: usize = groups.iter().map(|(_, c)| c.trainable).sum();
    if total_count == 0 {
        return Err(Error::Audit("empty parameter inventory".into()));
    }
    Ok(AuditReport {
        trainable_count,
        total_count,
        ratio: trainable_count as f64 / total_count as f64,
        by_group: groups.into_iter().map(|(_, c)| c).collect(),
    })
}

/// Stable per-tensor stream id so materialization does not depend on
/// enumeration order.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn materialize(spec: &ParamSpec, seed: u64, visual_cls: Option<&Array2<f64>>) -> Array2<f64> {
    let shape = (spec.rows, spec.cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.name));
    match spec.init {
        Init::Zeros => Array2::zeros(shape),
        Init::Ones => Array2::ones(shape),
        Init::Const(v) => Array2::from_elem(shape, v),
        Init::Xavier => {
            let b = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            Array2::from_shape_fn(shape, |_| rng.random_range(-b..b))
        }
        Init::Embedding => Array2::from_shape_fn(shape, |_| rng.random_range(-0.1..0.1)),
        Init::PromptUniform => {
            let b = 0.5 / (spec.cols as f64).sqrt();
            Array2::from_shape_fn(shape, |_| rng.random_range(-b..b))
        }
        Init::CopyVisualCls => {
            let cls = visual_cls.expect("visual CLS materialized before region CLS");
            let mut out = Array2::zeros(shape);
            for mut row in out.rows_mut() {
                row.assign(&cls.row(0));
            }
            out
        }
    }
}

struct Entry {
    spec: ParamSpec,
    value: Array2<f64>,
}

/// Materialized parameters, indexed by name.
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    /// Deterministically materialize all tensors from the seed.
    pub fn from_specs(specs: Vec<ParamSpec>, seed: u64) -> Self {
        let cls = specs
            .iter()
            .find(|s| s.name == "visual.cls")
            .map(|s| materialize(s, seed, None));
        let entries: Vec<Entry> = specs
            .into_iter()
            .map(|spec| {
                let value = materialize(&spec, seed, cls.as_ref());
                Entry { spec, value }
            })
            .collect();
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.spec.name.clone(), i))
            .collect();
        ParamStore { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = &ParamSpec> {
        self.entries.iter().map(|e| &e.spec)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.spec.name.as_str())
    }

    pub fn spec(&self, name: &str) -> Result<&ParamSpec> {
        self.lookup(name).map(|i| &self.entries[i].spec)
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>> {
        self.lookup(name).map(|i| &self.entries[i].value)
    }

    pub fn set_value(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let i = self.lookup(name)?;
        let spec = &self.entries[i].spec;
        if value.dim() != (spec.rows, spec.cols) {
            return Err(Error::Load(format!(
                "parameter {:?}: expected shape {}x{}, got {:?}",
                name, spec.rows, spec.cols, value.dim()
            )));
        }
        self.entries[i].value = value;
        Ok(())
    }

    fn lookup(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Load(format!("unknown parameter {name:?}")))
    }

    pub fn audit(&self) -> Result<AuditReport> {
        let specs: Vec<ParamSpec> = self.entries.iter().map(|e| e.spec.clone()).collect();
        audit_specs(&specs)
    }

    /// In-place update used by the optimizer; only trainable entries may
    /// change.
    pub fn update<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Array2<f64>),
    {
        let i = self.lookup(name)?;
        if !self.entries[i].spec.trainable {
            return Err(Error::Contract(format!(
                "attempt to update frozen parameter {name:?}"
            )));
        }
        f(&mut self.entries[i].value);
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.spec.trainable)
            .map(|e| e.spec.name.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| !e.spec.trainable)
            .map(|e| e.spec.name.clone())
            .collect()
    }
}

/// Per-tape bridge from store entries to tape leaves. Each parameter is
/// bound at most once per tape, so gradient extraction is unambiguous.
pub struct Binder<'s> {
    store: &'s ParamStore,
    bound: HashMap<usize, TensorId>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Binder {
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> TensorId {
        let i = self
            .store
            .lookup(name)
            .unwrap_or_else(|_| panic!("unknown parameter {name:?}"));
        if let Some(id) = self.bound.get(&i) {
            return *id;
        }
        let entry = &self.store.entries[i];
        let id = if entry.spec.trainable {
            tape.param(entry.value.clone())
        } else {
            tape.constant(entry.value.clone())
        };
        self.bound.insert(i, id);
        id
    }

    /// Gradients of every bound trainable parameter, keyed by name. The
    /// ordered map keeps optimizer iteration deterministic.
    pub fn gradients(&self, grads: &Grads) -> std::collections::BTreeMap<String, Array2<f64>> {
        let mut out = std::collections::BTreeMap::new();
        for (i, id) in &self.bound {
            let entry = &self.store.entries[*i];
            if entry.spec.trainable {
                if let Some(g) = grads.get(*id) {
                    out.insert(entry.spec.name.clone(), g.clone());
                }
            }
        }
        out
    }

    /// Tape ids of bound frozen parameters (for freezing-contract checks).
    pub fn frozen_bound(&self) -> Vec<(String, TensorId)> {
        self.bound
            .iter()
            .filter(|(i, _)| !self.store.entries[**i].spec.trainable)
            .map(|(i, id)| (self.store.entries[*i].spec.name.clone(), *id))
            .collect()
    }
}
