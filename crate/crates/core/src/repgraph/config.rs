use std::fmt;
use std::str::FromStr;

use crate::config::KvDoc;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;

/// Layer instantiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// `θ, φ, g: C → C'` on the input, sparse attention, output head.
    #[default]
    Simple,
    /// `C → C'` reduction (BN, ReLU), sparse attention on the reduced
    /// features, `C' → C` expansion with BN.
    Bottleneck,
}

/// Parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Random head; the bottleneck keeps its final ReLU.
    #[default]
    Fresh,
    /// Zero head (and zero BN scale/shift), no final ReLU: the layer starts
    /// as the exact identity, so it can be dropped into a trained network.
    PretrainedInsert,
}

/// Which tensor the offset projection reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OffsetSource {
    /// The layer input `x` (`C` channels).
    #[default]
    Input,
    /// The query features (`θ x` for the simple layer, the reduced features
    /// for the bottleneck), `C'` channels.
    Query,
}

macro_rules! text_enum {
    ($ty:ident, $what:literal, $($var:ident => $s:literal),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$var),)+
                    other => Err(Error::Validation(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$var => $s,)+ })
            }
        }
    };
}

text_enum!(Variant, "variant", Simple => "simple", Bottleneck => "bottleneck");
text_enum!(InitMode, "init mode", Fresh => "fresh", PretrainedInsert => "pretrained_insert");
text_enum!(OffsetSource, "offset source", Input => "input", Query => "query");

/// Everything needed to build a layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerConfig {
    pub variant: Variant,
    /// Sampled nodes per query.
    pub s: usize,
    pub c: usize,
    pub cp: usize,
    pub fusion: FusionMode,
    pub init_mode: InitMode,
    pub offset_source: OffsetSource,
    /// Grid size: `gs × gs` positions share one sampled set.
    pub gs: usize,
    /// Channel groups with separate attention.
    pub groups: usize,
    pub seed: u64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            variant: Variant::Simple,
            s: 9,
            c: 64,
            cp: 32,
            fusion: FusionMode::Sum,
            init_mode: InitMode::Fresh,
            offset_source: OffsetSource::Input,
            gs: 1,
            groups: 1,
            seed: 0,
        }
    }
}

impl LayerConfig {
    pub const KEYS: [&'static str; 10] = [
        "variant",
        "s",
        "c",
        "cp",
        "fusion",
        "init_mode",
        "offset_source",
        "gs",
        "groups",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.c == 0 || self.cp == 0 {
            return Err(Error::contract(format!(
                "S, C and C' must be positive (S={}, C={}, C'={})",
                self.s, self.c, self.cp
            )));
        }
        if self.gs == 0 {
            return Err(Error::contract("grid size must be at least 1"));
        }
        check_groups(self.cp, self.groups)?;
        if self.init_mode == InitMode::PretrainedInsert && self.fusion == FusionMode::Concat {
            return Err(Error::contract(
                "pretrained_insert needs sum fusion: a concat head cannot start as the identity",
            ));
        }
        Ok(())
    }

    /// Reads the layer keys of `doc`, starting from the defaults.
    pub fn from_doc(doc: &KvDoc) -> Result<Self> {
        let d = LayerConfig::default();
        let cfg = LayerConfig {
            variant: doc.parse_value("variant")?.unwrap_or(d.variant),
            s: doc.parse_value("s")?.unwrap_or(d.s),
            c: doc.parse_value("c")?.unwrap_or(d.c),
            cp: doc.parse_value("cp")?.unwrap_or(d.cp),
            fusion: doc.parse_value("fusion")?.unwrap_or(d.fusion),
            init_mode: doc.parse_value("init_mode")?.unwrap_or(d.init_mode),
            offset_source: doc.parse_value("offset_source")?.unwrap_or(d.offset_source),
            gs: doc.parse_value("gs")?.unwrap_or(d.gs),
            groups: doc.parse_value("groups")?.unwrap_or(d.groups),
            seed: doc.parse_value("seed")?.unwrap_or(d.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_doc(&self) -> KvDoc {
        let mut d = KvDoc::default();
        d.push("variant", self.variant);
        d.push("s", self.s);
        d.push("c", self.c);
        d.push("cp", self.cp);
        d.push("fusion", self.fusion);
        d.push("init_mode", self.init_mode);
        d.push("offset_source", self.offset_source);
        d.push("gs", self.gs);
        d.push("groups", self.groups);
        d.push("seed", self.seed);
        d
    }
}

pub(crate) fn check_groups(cp: usize, groups: usize) -> Result<()> {
    if groups == 0 || !cp.is_multiple_of(groups) {
        return Err(Error::contract(format!(
            "C'={cp} is not divisible into G={groups} channel groups"
        )));
    }
    Ok(())
}

impl FromStr for LayerConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let doc = KvDoc::parse(s)?;
        doc.check_keys(&Self::KEYS)?;
        Self::from_doc(&doc)
    }
}

impl fmt::Display for LayerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_doc().render())
    }
}
