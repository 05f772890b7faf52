//! Parameterization as data.
//!
//! A [`SharingPlan`] names a set of weight groups and binds every sublayer
//! slot of an architecture to one of them. Presets cover full
//! parameterization, the Universal Transformer (one group per stack), the
//! encoder-favored cycle-shared EdgeFormer layout, and the two half-shared
//! 6+6 variants; anything else can be written in the plan's text form.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{DecoderStyle, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stack {
    Encoder,
    Decoder,
}

/// Sublayer role inside a layer. Declaration order is the canonical slot
/// order within a layer (self, cross, ffn).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotRole {
    /// encoder self-attention
    Attn,
    /// decoder self-attention
    SelfAttn,
    Cross,
    /// encoder FFN or vanilla decoder FFN
    Ffn,
    /// first light FFN of an interleaved decoder layer
    FfnA,
    /// second light FFN of an interleaved decoder layer
    FfnB,
}

impl SlotRole {
    fn name(self) -> &'static str {
        match self {
            SlotRole::Attn => "attn",
            SlotRole::SelfAttn => "self",
            SlotRole::Cross => "cross",
            SlotRole::Ffn => "ffn",
            SlotRole::FfnA => "ffn_a",
            SlotRole::FfnB => "ffn_b",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, SlotRole::Attn | SlotRole::SelfAttn | SlotRole::Cross)
    }
}

/// One executed sublayer: `enc[3].attn`, `dec[1].cross`, `dec[2].ffn_a`, ...
/// Layers are numbered from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub stack: Stack,
    pub layer: usize,
    pub role: SlotRole,
}

impl Slot {
    pub fn enc(layer: usize, role: SlotRole) -> Self {
        Self {
            stack: Stack::Encoder,
            layer,
            role,
        }
    }

    pub fn dec(layer: usize, role: SlotRole) -> Self {
        Self {
            stack: Stack::Decoder,
            layer,
            role,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        write!(f, "{s}[{}].{}", self.layer, self.role.name())
    }
}

impl FromStr for Slot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("malformed slot id `{s}`");
        let (stack, rest) = if let Some(r) = s.strip_prefix("enc[") {
            (Stack::Encoder, r)
        } else if let Some(r) = s.strip_prefix("dec[") {
            (Stack::Decoder, r)
        } else {
            return Err(bad());
        };
        let (layer, role) = rest.split_once("].").ok_or_else(bad)?;
        let layer: usize = layer.parse().map_err(|_| bad())?;
        if layer == 0 {
            return Err(bad());
        }
        let role = match (stack, role) {
            (Stack::Encoder, "attn") => SlotRole::Attn,
            (Stack::Encoder, "ffn") => SlotRole::Ffn,
            (Stack::Decoder, "self") => SlotRole::SelfAttn,
            (Stack::Decoder, "cross") => SlotRole::Cross,
            (Stack::Decoder, "ffn") => SlotRole::Ffn,
            (Stack::Decoder, "ffn_a") => SlotRole::FfnA,
            (Stack::Decoder, "ffn_b") => SlotRole::FfnB,
            _ => return Err(bad()),
        };
        Ok(Slot { stack, layer, role })
    }
}

/// Every slot of an architecture, in canonical order: encoder before
/// decoder, ascending layer, then role.
pub fn slots(config: &ModelConfig) -> Vec<Slot> {
    let mut out = Vec::new();
    for i in 1..=config.encoder_layers {
        out.push(Slot::enc(i, SlotRole::Attn));
        out.push(Slot::enc(i, SlotRole::Ffn));
    }
    for j in 1..=config.decoder_layers {
        out.push(Slot::dec(j, SlotRole::SelfAttn));
        out.push(Slot::dec(j, SlotRole::Cross));
        match config.decoder_style {
            DecoderStyle::Vanilla => out.push(Slot::dec(j, SlotRole::Ffn)),
            DecoderStyle::Interleaved => {
                out.push(Slot::dec(j, SlotRole::FfnA));
                out.push(Slot::dec(j, SlotRole::FfnB));
            }
        }
    }
    out
}

/// The weights a slot needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartKind {
    /// W^Q, W^K, W^V, W^O with biases and a pre-norm.
    Attention,
    /// W^f1, W^f2 with biases and a pre-norm.
    Ffn { dim: usize },
    /// A narrow FFN shared by the two FFN sites of an interleaved layer.
    LightFfn { dim: usize },
}

impl PartKind {
    fn label(self) -> &'static str {
        match self {
            PartKind::Attention => "attention-quadruple",
            PartKind::Ffn { .. } => "ffn-pair",
            PartKind::LightFfn { .. } => "light-ffn-pair",
        }
    }

    fn dim(self) -> Option<usize> {
        match self {
            PartKind::Attention => None,
            PartKind::Ffn { dim } | PartKind::LightFfn { dim } => Some(dim),
        }
    }

    /// Weight-matrix element count.
    pub fn weight_count(self, d: usize) -> usize {
        match self {
            PartKind::Attention => 4 * d * d,
            PartKind::Ffn { dim } | PartKind::LightFfn { dim } => 2 * d * dim,
        }
    }
}

pub fn required_part(slot: Slot, config: &ModelConfig) -> PartKind {
    match (slot.stack, slot.role) {
        (_, r) if r.is_attention() => PartKind::Attention,
        (Stack::Encoder, _) => PartKind::Ffn {
            dim: config.enc_ffn_dim,
        },
        (Stack::Decoder, SlotRole::Ffn) => PartKind::Ffn {
            dim: config.dec_ffn_dim,
        },
        (Stack::Decoder, _) => PartKind::LightFfn {
            dim: config.dec_ffn_dim,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    AttentionQuad,
    FfnPair {
        dim: usize,
    },
    LightFfnPair {
        dim: usize,
    },
    /// Untied per-layer biases (layer adaptation); never bound to a slot.
    BiasSet,
    /// A whole encoder layer: parts `attn`, `ffn`.
    EncoderLayer {
        ffn_dim: usize,
    },
    /// A whole decoder layer: parts `self`, `cross`, `ffn`.
    DecoderLayer {
        ffn_dim: usize,
        light: bool,
    },
}

impl GroupKind {
    /// Named parts; single-part kinds use the empty name.
    pub fn parts(self) -> Vec<(&'static str, PartKind)> {
        match self {
            GroupKind::AttentionQuad => vec![("", PartKind::Attention)],
            GroupKind::FfnPair { dim } => vec![("", PartKind::Ffn { dim })],
            GroupKind::LightFfnPair { dim } => vec![("", PartKind::LightFfn { dim })],
            GroupKind::BiasSet => vec![],
            GroupKind::EncoderLayer { ffn_dim } => vec![
                ("attn", PartKind::Attention),
                ("ffn", PartKind::Ffn { dim: ffn_dim }),
            ],
            GroupKind::DecoderLayer { ffn_dim, light } => vec![
                ("self", PartKind::Attention),
                ("cross", PartKind::Attention),
                (
                    "ffn",
                    if light {
                        PartKind::LightFfn { dim: ffn_dim }
                    } else {
                        PartKind::Ffn { dim: ffn_dim }
                    },
                ),
            ],
        }
    }

    fn text(self) -> String {
        match self {
            GroupKind::AttentionQuad => "attention".into(),
            GroupKind::FfnPair { dim } => format!("ffn {dim}"),
            GroupKind::LightFfnPair { dim } => format!("light-ffn {dim}"),
            GroupKind::BiasSet => "bias-set".into(),
            GroupKind::EncoderLayer { ffn_dim } => format!("encoder-layer {ffn_dim}"),
            GroupKind::DecoderLayer {
                ffn_dim,
                light: false,
            } => format!("decoder-layer {ffn_dim}"),
            GroupKind::DecoderLayer {
                ffn_dim,
                light: true,
            } => format!("decoder-layer-light {ffn_dim}"),
        }
    }

    fn parse(words: &[&str]) -> Result<Self, String> {
        let dim = |w: Option<&&str>| -> Result<usize, String> {
            w.ok_or("missing ffn dimension")?
                .parse()
                .map_err(|_| "bad ffn dimension".to_string())
        };
        let kind = match words.first().copied() {
            Some("attention") => GroupKind::AttentionQuad,
            Some("ffn") => GroupKind::FfnPair {
                dim: dim(words.get(1))?,
            },
            Some("light-ffn") => GroupKind::LightFfnPair {
                dim: dim(words.get(1))?,
            },
            Some("bias-set") => GroupKind::BiasSet,
            Some("encoder-layer") => GroupKind::EncoderLayer {
                ffn_dim: dim(words.get(1))?,
            },
            Some("decoder-layer") => GroupKind::DecoderLayer {
                ffn_dim: dim(words.get(1))?,
                light: false,
            },
            Some("decoder-layer-light") => GroupKind::DecoderLayer {
                ffn_dim: dim(words.get(1))?,
                light: true,
            },
            other => return Err(format!("unknown group kind {other:?}")),
        };
        let expected = if matches!(kind, GroupKind::AttentionQuad | GroupKind::BiasSet) {
            1
        } else {
            2
        };
        if words.len() != expected {
            return Err("trailing tokens after group kind".into());
        }
        Ok(kind)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub kind: GroupKind,
}

/// A binding target: a group, plus the part name for multi-part groups.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupRef {
    pub group: String,
    pub part: String,
}

impl GroupRef {
    pub fn whole(group: impl Into<String>) -> Self {
        Self {
            group: group.into(),
            part: String::new(),
        }
    }

    pub fn part(group: impl Into<String>, part: &str) -> Self {
        Self {
            group: group.into(),
            part: part.into(),
        }
    }
}

impl fmt::Display for GroupRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.part.is_empty() {
            f.write_str(&self.group)
        } else {
            write!(f, "{}.{}", self.group, self.part)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PlanViolation {
    Unbound(Slot),
    /// Bound slot that the architecture does not have.
    UnknownSlot(Slot),
    UnknownGroup {
        slot: Slot,
        target: GroupRef,
    },
    UnknownPart {
        slot: Slot,
        target: GroupRef,
    },
    KindMismatch {
        slot: Slot,
        expected: PartKind,
        found: PartKind,
    },
    ShapeMismatch {
        slot: Slot,
        expected: usize,
        found: usize,
    },
    DuplicateGroup(String),
    UnusedGroup(String),
}

impl fmt::Display for PlanViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanViolation::Unbound(s) => write!(f, "slot {s} is unbound"),
            PlanViolation::UnknownSlot(s) => {
                write!(f, "slot {s} does not exist in this architecture")
            }
            PlanViolation::UnknownGroup { slot, target } => {
                write!(f, "slot {slot} bound to unknown group `{target}`")
            }
            PlanViolation::UnknownPart { slot, target } => {
                write!(f, "slot {slot} bound to unknown part `{target}`")
            }
            PlanViolation::KindMismatch {
                slot,
                expected,
                found,
            } => write!(
                f,
                "kind mismatch at {slot}: needs {}, bound to {}",
                expected.label(),
                found.label()
            ),
            PlanViolation::ShapeMismatch {
                slot,
                expected,
                found,
            } => write!(
                f,
                "shape mismatch at {slot}: needs ffn dim {expected}, group has {found}"
            ),
            PlanViolation::DuplicateGroup(g) => write!(f, "group `{g}` declared twice"),
            PlanViolation::UnusedGroup(g) => write!(f, "group `{g}` is never bound"),
        }
    }
}

/// Named weight groups plus the slot → group binding map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharingPlan {
    pub groups: Vec<ParamGroup>,
    pub bindings: BTreeMap<Slot, GroupRef>,
}

/// How a plan is requested in a run configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", try_from = "RawPlanSpec")]
pub enum PlanSpec {
    Full,
    Universal,
    Edgeformer {
        /// Number of encoder FFN groups, bound cyclically (default 2).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ffn_groups: Option<usize>,
        /// Explicit 0-based FFN group index per encoder layer.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ffn_assignment: Option<Vec<usize>>,
    },
    /// One shared encoder layer group, fully parameterized decoder.
    SharedEncoder,
    /// Fully parameterized encoder, one shared decoder layer group.
    SharedDecoder,
    Custom {
        spec: String,
    },
}

// Flat mirror of `PlanSpec` so unknown keys are rejected for every preset,
// including the ones without options.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlanSpec {
    preset: String,
    #[serde(default)]
    ffn_groups: Option<usize>,
    #[serde(default)]
    ffn_assignment: Option<Vec<usize>>,
    #[serde(default)]
    spec: Option<String>,
}

impl TryFrom<RawPlanSpec> for PlanSpec {
    type Error = String;

    fn try_from(r: RawPlanSpec) -> Result<Self, String> {
        let no_options = |p: PlanSpec| {
            if r.ffn_groups.is_some() || r.ffn_assignment.is_some() || r.spec.is_some() {
                Err(format!("preset `{}` takes no options", r.preset))
            } else {
                Ok(p)
            }
        };
        match r.preset.as_str() {
            "full" => no_options(PlanSpec::Full),
            "universal" => no_options(PlanSpec::Universal),
            "shared-encoder" => no_options(PlanSpec::SharedEncoder),
            "shared-decoder" => no_options(PlanSpec::SharedDecoder),
            "edgeformer" if r.spec.is_none() => Ok(PlanSpec::Edgeformer {
                ffn_groups: r.ffn_groups,
                ffn_assignment: r.ffn_assignment,
            }),
            "custom" if r.ffn_groups.is_none() && r.ffn_assignment.is_none() => {
                Ok(PlanSpec::Custom {
                    spec: r.spec.ok_or("custom preset needs `spec`")?,
                })
            }
            "edgeformer" | "custom" => Err(format!("unexpected option for preset `{}`", r.preset)),
            other => Err(format!("unknown preset `{other}`")),
        }
    }
}

impl Default for PlanSpec {
    fn default() -> Self {
        Self::edgeformer()
    }
}

impl PlanSpec {
    pub fn edgeformer() -> Self {
        PlanSpec::Edgeformer {
            ffn_groups: None,
            ffn_assignment: None,
        }
    }
}

impl SharingPlan {
    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Resolves a slot to its group and the part it reads.
    pub fn resolve(&self, slot: Slot) -> Option<(&ParamGroup, PartKind)> {
        let target = self.bindings.get(&slot)?;
        let group = self.group(&target.group)?;
        let part = group
            .kind
            .parts()
            .into_iter()
            .find(|(n, _)| *n == target.part)?
            .1;
        Some((group, part))
    }

    /// All structural violations against `config`; empty means valid.
    pub fn violations(&self, config: &ModelConfig) -> Vec<PlanViolation> {
        let mut out = Vec::new();
        let mut seen = HashMap::new();
        for g in &self.groups {
            if seen.insert(g.name.as_str(), ()).is_some() {
                out.push(PlanViolation::DuplicateGroup(g.name.clone()));
            }
        }
        let wanted = slots(config);
        for &slot in &wanted {
            let Some(target) = self.bindings.get(&slot) else {
                out.push(PlanViolation::Unbound(slot));
                continue;
            };
            let Some(group) = self.group(&target.group) else {
                out.push(PlanViolation::UnknownGroup {
                    slot,
                    target: target.clone(),
                });
                continue;
            };
            let Some((_, found)) = group
                .kind
                .parts()
                .into_iter()
                .find(|(n, _)| *n == target.part)
            else {
                out.push(PlanViolation::UnknownPart {
                    slot,
                    target: target.clone(),
                });
                continue;
            };
            let expected = required_part(slot, config);
            if std::mem::discriminant(&expected) != std::mem::discriminant(&found) {
                out.push(PlanViolation::KindMismatch {
                    slot,
                    expected,
                    found,
                });
            } else if expected.dim() != found.dim() {
                out.push(PlanViolation::ShapeMismatch {
                    slot,
                    expected: expected.dim().unwrap_or(0),
                    found: found.dim().unwrap_or(0),
                });
            }
        }
        for slot in self.bindings.keys() {
            if !wanted.contains(slot) {
                out.push(PlanViolation::UnknownSlot(*slot));
            }
        }
        for g in &self.groups {
            if g.kind != GroupKind::BiasSet && !self.bindings.values().any(|r| r.group == g.name) {
                out.push(PlanViolation::UnusedGroup(g.name.clone()));
            }
        }
        out
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let v = self.violations(config);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Plan(v))
        }
    }

    /// Executions per forward pass of each group's parameters, in group order.
    /// For multi-part groups this is the largest per-part binding count.
    pub fn load_report(&self) -> Vec<(String, usize)> {
        let mut per_part: HashMap<&GroupRef, usize> = HashMap::new();
        for r in self.bindings.values() {
            *per_part.entry(r).or_default() += 1;
        }
        self.groups
            .iter()
            .map(|g| {
                let uses = per_part
                    .iter()
                    .filter(|(r, _)| r.group == g.name)
                    .map(|(_, &n)| n)
                    .max()
                    .unwrap_or(0);
                (g.name.clone(), uses)
            })
            .collect()
    }

    pub fn uses_per_forward(&self, group: &str) -> usize {
        self.load_report()
            .into_iter()
            .find(|(n, _)| n == group)
            .map_or(0, |(_, u)| u)
    }

    /// Line-oriented text form: `group <name> <kind> [dim]` declarations
    /// followed by `bind <slot> <group>[.<part>]` lines in canonical slot
    /// order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            s.push_str(&format!("group {} {}\n", g.name, g.kind.text()));
        }
        for (slot, r) in &self.bindings {
            s.push_str(&format!("bind {slot} {r}\n"));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut groups = Vec::new();
        let mut bindings = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::PlanSyntax { line: i + 1, msg };
            let words: Vec<&str> = line.split_whitespace().collect();
            match words[0] {
                "group" => {
                    let name = words
                        .get(1)
                        .ok_or_else(|| err("missing group name".into()))?;
                    if !valid_name(name) {
                        return Err(err(format!("invalid group name `{name}`")));
                    }
                    let kind = GroupKind::parse(&words[2..]).map_err(err)?;
                    groups.push(ParamGroup {
                        name: name.to_string(),
                        kind,
                    });
                }
                "bind" => {
                    if words.len() != 3 {
                        return Err(err("expected `bind <slot> <group>`".into()));
                    }
                    let slot: Slot = words[1].parse().map_err(err)?;
                    let target = match words[2].split_once('.') {
                        Some((g, p)) => GroupRef::part(g, p),
                        None => GroupRef::whole(words[2]),
                    };
                    if bindings.insert(slot, target).is_some() {
                        return Err(err(format!("slot {slot} bound more than once")));
                    }
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        Ok(Self { groups, bindings })
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Builds and validates a plan.
pub fn build_plan(spec: &PlanSpec, config: &ModelConfig) -> Result<SharingPlan> {
    config.validate()?;
    let plan = match spec {
        PlanSpec::Full => full(config, true, true),
        PlanSpec::Universal => full(config, false, false),
        PlanSpec::SharedEncoder => full(config, false, true),
        PlanSpec::SharedDecoder => full(config, true, false),
        PlanSpec::Edgeformer {
            ffn_groups,
            ffn_assignment,
        } => edgeformer(config, *ffn_groups, ffn_assignment.as_deref())?,
        PlanSpec::Custom { spec } => SharingPlan::from_text(spec)?,
    };
    plan.validate(config)?;
    Ok(plan)
}

struct Builder {
    plan: SharingPlan,
}

impl Builder {
    fn new() -> Self {
        Self {
            plan: SharingPlan {
                groups: Vec::new(),
                bindings: BTreeMap::new(),
            },
        }
    }

    fn bind(&mut self, slot: Slot, group: &str, kind: GroupKind, part: &str) {
        if self.plan.group(group).is_none() {
            self.plan.groups.push(ParamGroup {
                name: group.to_string(),
                kind,
            });
        }
        self.plan.bindings.insert(slot, GroupRef::part(group, part));
    }
}

/// `enc_full` / `dec_full` choose per-layer groups; otherwise one group
/// covers the whole stack.
fn full(config: &ModelConfig, enc_full: bool, dec_full: bool) -> SharingPlan {
    let mut b = Builder::new();
    let (d_enc, d_dec) = (config.enc_ffn_dim, config.dec_ffn_dim);
    let light = config.decoder_style == DecoderStyle::Interleaved;
    for slot in slots(config) {
        let i = slot.layer;
        match (slot.stack, enc_full, dec_full) {
            (Stack::Encoder, true, _) => match slot.role {
                SlotRole::Attn => {
                    b.bind(slot, &format!("enc{i}-attn"), GroupKind::AttentionQuad, "")
                }
                _ => b.bind(
                    slot,
                    &format!("enc{i}-ffn"),
                    GroupKind::FfnPair { dim: d_enc },
                    "",
                ),
            },
            (Stack::Encoder, false, _) => {
                let part = if slot.role == SlotRole::Attn {
                    "attn"
                } else {
                    "ffn"
                };
                b.bind(
                    slot,
                    "encoder",
                    GroupKind::EncoderLayer { ffn_dim: d_enc },
                    part,
                )
            }
            (Stack::Decoder, _, true) => match slot.role {
                SlotRole::SelfAttn => {
                    b.bind(slot, &format!("dec{i}-self"), GroupKind::AttentionQuad, "")
                }
                SlotRole::Cross => {
                    b.bind(slot, &format!("dec{i}-cross"), GroupKind::AttentionQuad, "")
                }
                SlotRole::Ffn => b.bind(
                    slot,
                    &format!("dec{i}-ffn"),
                    GroupKind::FfnPair { dim: d_dec },
                    "",
                ),
                _ => b.bind(
                    slot,
                    &format!("dec{i}-light"),
                    GroupKind::LightFfnPair { dim: d_dec },
                    "",
                ),
            },
            (Stack::Decoder, _, false) => {
                let part = match slot.role {
                    SlotRole::SelfAttn => "self",
                    SlotRole::Cross => "cross",
                    _ => "ffn",
                };
                b.bind(
                    slot,
                    "decoder",
                    GroupKind::DecoderLayer {
                        ffn_dim: d_dec,
                        light,
                    },
                    part,
                )
            }
        }
    }
    b.plan
}

/// Encoder attention cycle length for an `m`-layer encoder: 4 for the
/// 12-layer model; in general the divisor of `m` closest to `m/3` (ties go
/// up), at least 2 so a decoder layer's self- and cross-attention never
/// collapse onto one group.
pub fn attention_cycle(m: usize) -> usize {
    if m < 2 {
        return 1;
    }
    let target = m as f64 / 3.0;
    let mut best = m;
    for c in (1..=m).filter(|c| m % c == 0) {
        let (dc, db) = ((c as f64 - target).abs(), (best as f64 - target).abs());
        if dc < db || (dc == db && c > best) {
            best = c;
        }
    }
    best.max(2)
}

fn edgeformer(
    config: &ModelConfig,
    ffn_groups: Option<usize>,
    assignment: Option<&[usize]>,
) -> Result<SharingPlan> {
    let (m, n) = (config.encoder_layers, config.decoder_layers);
    if config.decoder_style != DecoderStyle::Interleaved {
        return Err(Error::Config(
            "edgeformer plan requires an interleaved decoder".into(),
        ));
    }
    if 2 * n > m {
        return Err(Error::Config(format!(
            "edgeformer plan ties decoder layer j to encoder layers 2j-1 and 2j; needs 2N <= M (N={n}, M={m})"
        )));
    }
    let assign: Vec<usize> = match (assignment, ffn_groups) {
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "give either ffn_groups or ffn_assignment, not both".into(),
            ))
        }
        (Some(a), None) => {
            if a.len() != m {
                return Err(Error::Config(format!(
                    "ffn_assignment has {} entries for {m} encoder layers",
                    a.len()
                )));
            }
            a.to_vec()
        }
        (None, k) => {
            let k = k.unwrap_or(2).min(m);
            if k == 0 {
                return Err(Error::Config("ffn_groups must be positive".into()));
            }
            (0..m).map(|i| i % k).collect()
        }
    };
    let cycle = attention_cycle(m);
    let mut b = Builder::new();
    let attn_group = |i: usize| format!("attn{}", (i - 1) % cycle + 1);
    for i in 1..=m {
        b.bind(
            Slot::enc(i, SlotRole::Attn),
            &attn_group(i),
            GroupKind::AttentionQuad,
            "",
        );
        b.bind(
            Slot::enc(i, SlotRole::Ffn),
            &format!("encffn{}", assign[i - 1] + 1),
            GroupKind::FfnPair {
                dim: config.enc_ffn_dim,
            },
            "",
        );
    }
    let light = GroupKind::LightFfnPair {
        dim: config.dec_ffn_dim,
    };
    for j in 1..=n {
        b.bind(
            Slot::dec(j, SlotRole::SelfAttn),
            &attn_group(2 * j - 1),
            GroupKind::AttentionQuad,
            "",
        );
        b.bind(
            Slot::dec(j, SlotRole::Cross),
            &attn_group(2 * j),
            GroupKind::AttentionQuad,
            "",
        );
        b.bind(Slot::dec(j, SlotRole::FfnA), "decffn", light, "");
        b.bind(Slot::dec(j, SlotRole::FfnB), "decffn", light, "");
    }
    Ok(b.plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loads(plan: &SharingPlan) -> Vec<usize> {
        plan.load_report().into_iter().map(|(_, u)| u).collect()
    }

    #[test]
    fn universal_has_two_groups() {
        let mut c = ModelConfig::vanilla(12, 2, 512);
        c.decoder_style = DecoderStyle::Vanilla;
        let plan = build_plan(&PlanSpec::Universal, &c).unwrap();
        assert_eq!(plan.groups.len(), 2);
        assert_eq!(plan.uses_per_forward("encoder"), 12);
        assert_eq!(plan.uses_per_forward("decoder"), 2);
    }

    #[test]
    fn edgeformer_groups_and_loads() {
        let plan = build_plan(&PlanSpec::edgeformer(), &ModelConfig::edgeformer(512)).unwrap();
        assert_eq!(plan.groups.len(), 7);
        let report: BTreeMap<_, _> = plan.load_report().into_iter().collect();
        for a in ["attn1", "attn2", "attn3", "attn4"] {
            assert_eq!(report[a], 4, "{a}");
        }
        assert_eq!(report["encffn1"], 6);
        assert_eq!(report["encffn2"], 6);
        assert_eq!(report["decffn"], 4);
    }

    #[test]
    fn edgeformer_decoder_ties() {
        let plan = build_plan(&PlanSpec::edgeformer(), &ModelConfig::edgeformer(512)).unwrap();
        let g = |s: Slot| plan.bindings[&s].group.clone();
        assert_eq!(
            g(Slot::dec(1, SlotRole::SelfAttn)),
            g(Slot::enc(1, SlotRole::Attn))
        );
        assert_eq!(
            g(Slot::dec(1, SlotRole::Cross)),
            g(Slot::enc(2, SlotRole::Attn))
        );
        assert_eq!(
            g(Slot::dec(2, SlotRole::SelfAttn)),
            g(Slot::enc(3, SlotRole::Attn))
        );
        assert_eq!(
            g(Slot::dec(2, SlotRole::Cross)),
            g(Slot::enc(4, SlotRole::Attn))
        );
        for i in 1..9 {
            assert_eq!(
                g(Slot::enc(i, SlotRole::Attn)),
                g(Slot::enc(i + 4, SlotRole::Attn))
            );
        }
        for i in 1..11 {
            assert_eq!(
                g(Slot::enc(i, SlotRole::Ffn)),
                g(Slot::enc(i + 2, SlotRole::Ffn))
            );
        }
    }

    #[test]
    fn full_vanilla_uses_everything_once() {
        let plan = build_plan(&PlanSpec::Full, &ModelConfig::vanilla(6, 6, 512)).unwrap();
        assert_eq!(plan.groups.len(), 6 * 2 + 6 * 3);
        assert!(loads(&plan).iter().all(|&u| u == 1));
    }

    #[test]
    fn imbalanced_ffn_load() {
        let mut a = vec![1; 12];
        a[0] = 0;
        let spec = PlanSpec::Edgeformer {
            ffn_groups: None,
            ffn_assignment: Some(a),
        };
        let plan = build_plan(&spec, &ModelConfig::edgeformer(512)).unwrap();
        assert_eq!(plan.uses_per_forward("encffn1"), 1);
        assert_eq!(plan.uses_per_forward("encffn2"), 11);
    }

    #[test]
    fn edgeformer_rejects_vanilla_and_deep_decoder() {
        assert!(build_plan(&PlanSpec::edgeformer(), &ModelConfig::vanilla(12, 2, 512)).is_err());
        let mut c = ModelConfig::edgeformer(512);
        c.decoder_layers = 7;
        assert!(build_plan(&PlanSpec::edgeformer(), &c).is_err());
    }

    #[test]
    fn mini_edgeformer_cycle() {
        assert_eq!(attention_cycle(12), 4);
        assert_eq!(attention_cycle(4), 2);
        assert_eq!(attention_cycle(6), 2);
        let plan = build_plan(&PlanSpec::edgeformer(), &ModelConfig::mini()).unwrap();
        let report: BTreeMap<_, _> = plan.load_report().into_iter().collect();
        assert_eq!(report["attn1"], 4);
        assert_eq!(report["attn2"], 4);
        assert_eq!(report["decffn"], 4);
    }

    #[test]
    fn unbound_slot_is_named() {
        let c = ModelConfig::edgeformer(512);
        let mut plan = build_plan(&PlanSpec::edgeformer(), &c).unwrap();
        plan.bindings.remove(&Slot::dec(1, SlotRole::Cross));
        let v = plan.violations(&c);
        assert_eq!(
            v,
            vec![PlanViolation::Unbound(Slot::dec(1, SlotRole::Cross))]
        );
        assert!(v[0].to_string().contains("dec[1].cross"));
    }

    #[test]
    fn kind_mismatch_detected() {
        let c = ModelConfig::edgeformer(512);
        let mut plan = build_plan(&PlanSpec::edgeformer(), &c).unwrap();
        plan.bindings
            .insert(Slot::enc(1, SlotRole::Attn), GroupRef::whole("encffn1"));
        let v = plan.violations(&c);
        assert!(
            v.iter()
                .any(|x| matches!(x, PlanViolation::KindMismatch { .. })),
            "{v:?}"
        );
    }

    #[test]
    fn shape_mismatch_detected() {
        let c = ModelConfig::edgeformer(512);
        let mut plan = build_plan(&PlanSpec::edgeformer(), &c).unwrap();
        plan.groups[1].kind = GroupKind::FfnPair { dim: 1024 };
        let v = plan.violations(&c);
        assert!(
            v.iter()
                .any(|x| matches!(x, PlanViolation::ShapeMismatch { .. })),
            "{v:?}"
        );
    }

    #[test]
    fn valid_plan_has_no_violations() {
        let c = ModelConfig::edgeformer(512);
        let plan = build_plan(&PlanSpec::edgeformer(), &c).unwrap();
        assert!(plan.violations(&c).is_empty());
    }

    #[test]
    fn custom_plan_with_gap_is_rejected() {
        let c = ModelConfig::mini();
        let text = build_plan(&PlanSpec::edgeformer(), &c).unwrap().to_text();
        let text: String = text
            .lines()
            .filter(|l| !l.starts_with("bind dec[1].cross"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = build_plan(&PlanSpec::Custom { spec: text }, &c).unwrap_err();
        assert!(err.to_string().contains("dec[1].cross"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = SharingPlan::from_text("group a attention\nbind enc[0].attn a\n").unwrap_err();
        assert!(matches!(err, Error::PlanSyntax { line: 2, .. }), "{err}");
        assert!(SharingPlan::from_text("group a wobble").is_err());
    }

    #[test]
    fn plan_spec_json_rejects_unknown_keys() {
        let ok: PlanSpec =
            serde_json::from_str(r#"{"preset":"edgeformer","ffn_groups":3}"#).unwrap();
        assert_eq!(
            ok,
            PlanSpec::Edgeformer {
                ffn_groups: Some(3),
                ffn_assignment: None
            }
        );
        assert!(serde_json::from_str::<PlanSpec>(r#"{"preset":"full","x":1}"#).is_err());
    }

    fn arb_config() -> impl Strategy<Value = ModelConfig> {
        (1usize..7, 1usize..4, prop::bool::ANY).prop_map(|(m, n, inter)| {
            let mut c = ModelConfig::mini();
            c.encoder_layers = m.max(2 * n);
            c.decoder_layers = n;
            if !inter {
                c.decoder_style = DecoderStyle::Vanilla;
                c.dec_ffn_dim = 64;
            }
            c
        })
    }

    fn arb_spec() -> impl Strategy<Value = PlanSpec> {
        prop_oneof![
            Just(PlanSpec::Full),
            Just(PlanSpec::Universal),
            Just(PlanSpec::SharedEncoder),
            Just(PlanSpec::SharedDecoder),
            (1usize..4).prop_map(|k| PlanSpec::Edgeformer {
                ffn_groups: Some(k),
                ffn_assignment: None
            }),
        ]
    }

    proptest! {
        #[test]
        fn text_round_trip(config in arb_config(), spec in arb_spec()) {
            if let Ok(plan) = build_plan(&spec, &config) {
                let back = SharingPlan::from_text(&plan.to_text()).unwrap();
                prop_assert_eq!(&back, &plan);
                prop_assert!(back.violations(&config).is_empty());
            }
        }

        #[test]
        fn loads_sum_to_slot_count(config in arb_config(), spec in arb_spec()) {
            if let Ok(plan) = build_plan(&spec, &config) {
                // every slot is bound exactly once
                prop_assert_eq!(plan.bindings.len(), slots(&config).len());
            }
        }
    }
}
