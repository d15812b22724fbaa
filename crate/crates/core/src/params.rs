//! Named parameter storage with per-group freeze flags.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Parameter groups used by the freeze policy. Every parameter belongs to
/// exactly one.
pub mod group {
    pub const PATCH_EMBED: &str = "patch_embed";
    pub const TIME_EMBED: &str = "time_embed";
    pub const SPATIAL_ATTN: &str = "spatial_attn";
    pub const SPATIOTEMPORAL_ATTN: &str = "spatiotemporal_attn";
    pub const TEXT_XATTN: &str = "text_xattn";
    pub const MC_INJECTOR: &str = "mc_injector";
    pub const FFN: &str = "ffn";
    pub const FINAL: &str = "final";
    pub const QFORMER: &str = "qformer";
    pub const DAM: &str = "dam";

    pub const ALL: [&str; 10] = [
        PATCH_EMBED,
        TIME_EMBED,
        SPATIAL_ATTN,
        SPATIOTEMPORAL_ATTN,
        TEXT_XATTN,
        MC_INJECTOR,
        FFN,
        FINAL,
        QFORMER,
        DAM,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: &'static str,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: &'static str, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in_group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, p)| p.group == group).map(|(id, _)| id)
    }

    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    /// Replace every value from `other`, requiring identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::shape("parameter count mismatch"));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::Shape(alloc::format!(
                    "parameter {} does not match {}",
                    mine.name,
                    theirs.name
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }

    /// Set a named value, checking shape.
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown parameter {name}")))?;
        if self.params[id.0].value.shape() != value.shape() {
            return Err(Error::Shape(alloc::format!("parameter {name} shape mismatch")));
        }
        self.params[id.0].value = value;
        Ok(())
    }
}

/// Map from group name to frozen flag.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezePolicy {
    pub frozen: BTreeMap<String, bool>,
}

impl Default for FreezePolicy {
    /// Spatiotemporal self-attention frozen, everything else trainable.
    fn default() -> Self {
        let frozen = group::ALL
            .iter()
            .map(|g| (g.to_string(), *g == group::SPATIOTEMPORAL_ATTN))
            .collect();
        FreezePolicy { frozen }
    }
}

impl FreezePolicy {
    pub fn none() -> Self {
        FreezePolicy {
            frozen: group::ALL.iter().map(|g| (g.to_string(), false)).collect(),
        }
    }

    pub fn all() -> Self {
        FreezePolicy {
            frozen: group::ALL.iter().map(|g| (g.to_string(), true)).collect(),
        }
    }

    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.get(group).copied().unwrap_or(false)
    }

    pub fn set(&mut self, group: &str, frozen: bool) -> Result<()> {
        if !group::ALL.contains(&group) {
            return Err(Error::Invalid(alloc::format!("unknown parameter group {group}")));
        }
        self.frozen.insert(group.to_string(), frozen);
        Ok(())
    }
}
