//! Declarative description of a DD-Net and its text format.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockSpec};
use crate::error::{Error, Result, SpecError};
use crate::kv::{Document, Section};

/// Feature-learning block placed after each transposed convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleBlock {
    /// Upsampling and skip concatenation only.
    None,
    /// Batch norm, ELU and a 3x3 convolution back to the stage width.
    Conv,
    Dense,
}

impl UpsampleBlock {
    pub fn as_str(self) -> &'static str {
        match self {
            UpsampleBlock::None => "none",
            UpsampleBlock::Conv => "conv",
            UpsampleBlock::Dense => "dense",
        }
    }
}

impl FromStr for UpsampleBlock {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(UpsampleBlock::None),
            "conv" => Ok(UpsampleBlock::Conv),
            "dense" => Ok(UpsampleBlock::Dense),
            _ => Err(format!("unknown decoder block {s:?} (expected none, conv or dense)")),
        }
    }
}

/// Which skip families are wired. Forward skips are always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkipSet {
    pub backward: bool,
    pub stacked_residual: bool,
}

impl SkipSet {
    pub const F: SkipSet = SkipSet {
        backward: false,
        stacked_residual: false,
    };
    pub const FB: SkipSet = SkipSet {
        backward: true,
        stacked_residual: false,
    };
    pub const FR: SkipSet = SkipSet {
        backward: false,
        stacked_residual: true,
    };
    pub const FBR: SkipSet = SkipSet {
        backward: true,
        stacked_residual: true,
    };
    pub const ALL: [SkipSet; 4] = [SkipSet::F, SkipSet::FB, SkipSet::FR, SkipSet::FBR];

    pub fn code(self) -> &'static str {
        match (self.backward, self.stacked_residual) {
            (false, false) => "f",
            (true, false) => "fb",
            (false, true) => "fr",
            (true, true) => "fbr",
        }
    }
}

impl FromStr for SkipSet {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "f" => Ok(SkipSet::F),
            "fb" => Ok(SkipSet::FB),
            "fr" => Ok(SkipSet::FR),
            "fbr" => Ok(SkipSet::FBR),
            _ => Err(format!("unknown skip set {s:?} (expected f, fb, fr or fbr)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderStage {
    pub block: BlockSpec,
    /// Max-pool factor applied after the block.
    pub downsample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// `(channels, height, width)` of the reference input. The built graph
    /// accepts any spatial size divisible by the total downsampling factor.
    pub input: (usize, usize, usize),
    pub num_classes: usize,
    pub stem_width: usize,
    pub encoder: Vec<EncoderStage>,
    /// Number of stacked decoder units `D`.
    pub decoder_units: usize,
    pub upsample_block: UpsampleBlock,
    /// Transposed-convolution output width per decoder stage, coarsest first.
    pub decoder_widths: Vec<usize>,
    pub upsample_factors: Vec<usize>,
    /// Width of the reduced forward-skip features per decoder stage.
    /// Defaults to half of `decoder_widths`.
    pub skip_widths: Option<Vec<usize>>,
    pub dense_layers: usize,
    pub dense_growth: usize,
    /// Dense blocks of the inner encoders (units 2 and later).
    pub inner_layers: usize,
    pub inner_growth: usize,
    /// Transition widths of the inner encoder stages, finest first.
    /// Defaults to the macro encoder stage widths.
    pub inner_widths: Option<Vec<usize>>,
    pub skips: SkipSet,
    /// Insert a learned 1x1 projection at sum junctions whose widths differ.
    /// When off, such a mismatch is an error.
    pub projection: bool,
    pub supervision: bool,
    /// Dropout rate inside every block; set from the training configuration.
    pub dropout: f64,
}

pub const TINY: &str = include_str!("../presets/tiny.dd");
pub const PAPERLIKE: &str = include_str!("../presets/paperlike.dd");

impl ArchSpec {
    pub fn tiny() -> Self {
        ArchSpec::parse(TINY).expect("bundled preset parses")
    }

    pub fn paperlike() -> Self {
        ArchSpec::parse(PAPERLIKE).expect("bundled preset parses")
    }

    /// Bundled preset by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "paperlike" => Some(Self::paperlike()),
            _ => None,
        }
    }

    pub fn with_depth(mut self, units: usize) -> Self {
        self.decoder_units = units;
        self
    }

    pub fn with_skips(mut self, skips: SkipSet) -> Self {
        self.skips = skips;
        self
    }

    pub fn with_upsample_block(mut self, block: UpsampleBlock) -> Self {
        self.upsample_block = block;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn with_input(mut self, channels: usize, height: usize, width: usize) -> Self {
        self.input = (channels, height, width);
        self
    }

    pub fn total_downsample(&self) -> usize {
        self.encoder.iter().map(|s| s.downsample).product()
    }

    pub fn skip_widths(&self) -> Vec<usize> {
        self.skip_widths
            .clone()
            .unwrap_or_else(|| self.decoder_widths.iter().map(|w| (w / 2).max(1)).collect())
    }

    pub fn encoder_widths(&self) -> Result<Vec<usize>> {
        let mut ch = self.stem_width;
        self.encoder
            .iter()
            .map(|s| {
                ch = s.block.output_channels(ch)?;
                Ok(ch)
            })
            .collect()
    }

    pub fn inner_widths(&self) -> Result<Vec<usize>> {
        match &self.inner_widths {
            Some(w) => Ok(w.clone()),
            None => self.encoder_widths(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Arch(m));
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return fail("input dimensions must be positive".into());
        }
        if self.num_classes == 0 || self.stem_width == 0 {
            return fail("num_classes and stem_width must be positive".into());
        }
        if self.encoder.len() != 3 {
            return fail(format!("expected exactly 3 encoder stages, found {}", self.encoder.len()));
        }
        if self.decoder_widths.len() != 3 || self.upsample_factors.len() != 3 {
            return fail("decoder needs exactly 3 widths and 3 upsample factors".into());
        }
        if self.skip_widths().len() != 3 || self.inner_widths()?.len() != 3 {
            return fail("skip_widths and inner_widths need exactly 3 entries".into());
        }
        let (skips, inner) = (self.skip_widths(), self.inner_widths()?);
        if self.decoder_widths.iter().chain(&skips).chain(&inner).any(|&w| w == 0) {
            return fail("widths must be positive".into());
        }
        if self.encoder.iter().any(|s| s.downsample == 0) || self.upsample_factors.contains(&0) {
            return fail("resampling factors must be positive".into());
        }
        let down = self.total_downsample();
        let up: usize = self.upsample_factors.iter().product();
        if down != up {
            return fail(format!(
                "resolution closure: encoder downsamples by {down} but each decoder upsamples by {up}"
            ));
        }
        if h % down != 0 || w % down != 0 {
            return fail(format!("input {h}x{w} is not divisible by the total downsampling factor {down}"));
        }
        if self.decoder_units == 0 {
            return fail("decoder needs at least one unit".into());
        }
        if self.upsample_block == UpsampleBlock::Dense && (self.dense_layers == 0 || self.dense_growth == 0) {
            return fail("dense decoder block needs positive dense_layers and dense_growth".into());
        }
        if self.decoder_units > 1 && (self.inner_layers == 0 || self.inner_growth == 0) {
            return fail("inner encoders need positive inner_layers and inner_growth".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)".into());
        }
        for s in &self.encoder {
            s.block.validate()?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc = Document::parse(text)?;
        Self::from_document(&doc)
    }

    /// Reads the architecture sections of `doc`; a `[train]` section is
    /// left for the training configuration.
    pub fn from_document(doc: &Document) -> Result<Self> {
        let mut stages: Vec<(usize, &Section)> = Vec::new();
        for sec in &doc.sections {
            match sec.name.as_str() {
                "" | "decoder" | "skips" | "heads" | "train" => {}
                name => {
                    let n = name
                        .strip_prefix("encoder.")
                        .and_then(|n| n.parse::<usize>().ok())
                        .ok_or_else(|| SpecError::new(sec.line, 2, format!("unknown section [{name}]")))?;
                    stages.push((n, sec));
                }
            }
        }
        stages.sort_by_key(|(n, _)| *n);
        for (i, (n, sec)) in stages.iter().enumerate() {
            if *n != i + 1 {
                return Err(SpecError::new(sec.line, 2, format!("encoder sections must be numbered 1, 2, 3; found {n}")).into());
            }
        }

        let top = doc.top();
        top.expect_keys(&["input", "num_classes", "stem_width"])?;
        let input = match top.get("input") {
            Some(e) => {
                let v: Vec<usize> = e.parse_list()?;
                if v.len() != 3 {
                    return Err(e.invalid("`input` takes channels, height, width").into());
                }
                (v[0], v[1], v[2])
            }
            None => (3, 64, 64),
        };
        let num_classes = opt(top, "num_classes", |e| e.positive())?.unwrap_or(3);
        let stem_width = opt(top, "stem_width", |e| e.positive())?.unwrap_or(16);

        let mut encoder = Vec::new();
        for (_, sec) in &stages {
            encoder.push(parse_stage(sec)?);
        }
        if encoder.len() != 3 {
            let line = stages.last().map_or(1, |(_, s)| s.line);
            return Err(SpecError::new(line, 1, format!("expected exactly 3 encoder stages, found {}", encoder.len())).into());
        }

        let empty = Section {
            name: String::new(),
            line: 0,
            entries: Vec::new(),
        };
        let dec = doc.section("decoder").unwrap_or(&empty);
        dec.expect_keys(&[
            "units",
            "upsample_block",
            "widths",
            "upsample_factors",
            "skip_widths",
            "dense_layers",
            "dense_growth",
            "inner_layers",
            "inner_growth",
            "inner_widths",
        ])?;
        let upsample_block = match dec.get("upsample_block") {
            Some(e) => e.value.parse().map_err(|m: String| e.invalid(m))?,
            None => UpsampleBlock::Dense,
        };
        let list3 = |key: &str, default: Option<Vec<usize>>| -> Result<Option<Vec<usize>>> {
            match dec.get(key) {
                Some(e) => {
                    let v: Vec<usize> = e.parse_list()?;
                    if v.len() != 3 {
                        return Err(e.invalid(format!("`{key}` needs exactly 3 entries")).into());
                    }
                    if v.contains(&0) {
                        return Err(e.invalid(format!("`{key}` entries must be positive")).into());
                    }
                    Ok(Some(v))
                }
                None => Ok(default),
            }
        };

        let skips_sec = doc.section("skips").unwrap_or(&empty);
        skips_sec.expect_keys(&["forward", "backward", "stacked_residual", "projection"])?;
        if let Some(e) = skips_sec.get("forward") {
            if !e.parse_bool()? {
                return Err(e.invalid("forward skips are always present").into());
            }
        }
        let flag = |sec: &Section, key: &str, default: bool| -> Result<bool> {
            Ok(sec.get(key).map(|e| e.parse_bool()).transpose()?.unwrap_or(default))
        };
        let heads = doc.section("heads").unwrap_or(&empty);
        heads.expect_keys(&["supervision"])?;

        let spec = ArchSpec {
            input,
            num_classes,
            stem_width,
            encoder,
            decoder_units: opt(dec, "units", |e| e.positive())?.unwrap_or(1),
            upsample_block,
            decoder_widths: list3("widths", None)?.unwrap_or_else(|| vec![48, 32, 16]),
            upsample_factors: list3("upsample_factors", None)?.unwrap_or_else(|| vec![2, 2, 2]),
            skip_widths: list3("skip_widths", None)?,
            dense_layers: opt(dec, "dense_layers", |e| e.positive())?.unwrap_or(2),
            dense_growth: opt(dec, "dense_growth", |e| e.positive())?.unwrap_or(8),
            inner_layers: opt(dec, "inner_layers", |e| e.positive())?.unwrap_or(2),
            inner_growth: opt(dec, "inner_growth", |e| e.positive())?.unwrap_or(8),
            inner_widths: list3("inner_widths", None)?,
            skips: SkipSet {
                backward: flag(skips_sec, "backward", true)?,
                stacked_residual: flag(skips_sec, "stacked_residual", true)?,
            },
            projection: flag(skips_sec, "projection", true)?,
            supervision: flag(heads, "supervision", true)?,
            dropout: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Text form accepted by [`ArchSpec::parse`].
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        let mut out = String::new();
        let (c, h, w) = self.input;
        let _ = writeln!(out, "input = {c}, {h}, {w}");
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        let _ = writeln!(out, "stem_width = {}", self.stem_width);
        for (i, s) in self.encoder.iter().enumerate() {
            let b = &s.block;
            let _ = writeln!(out, "\n[encoder.{}]", i + 1);
            let _ = writeln!(out, "block = {}", b.kind.as_str());
            let _ = writeln!(out, "layers = {}", b.layers);
            if b.growth > 0 {
                let _ = writeln!(out, "growth = {}", b.growth);
            }
            if b.residual_width > 0 {
                let _ = writeln!(out, "residual_width = {}", b.residual_width);
            }
            if let Some(bw) = b.bottleneck_width {
                let _ = writeln!(out, "bottleneck_width = {bw}");
            }
            if b.kind == BlockKind::InvertedResidual {
                let _ = writeln!(out, "expansion = {}", b.expansion);
            }
            if let Some(o) = b.out_channels {
                let _ = writeln!(out, "out_channels = {o}");
            }
            let _ = writeln!(out, "downsample = {}", s.downsample);
        }
        let _ = writeln!(out, "\n[decoder]");
        let _ = writeln!(out, "units = {}", self.decoder_units);
        let _ = writeln!(out, "upsample_block = {}", self.upsample_block.as_str());
        let _ = writeln!(out, "widths = {}", join(&self.decoder_widths));
        let _ = writeln!(out, "upsample_factors = {}", join(&self.upsample_factors));
        if let Some(s) = &self.skip_widths {
            let _ = writeln!(out, "skip_widths = {}", join(s));
        }
        let _ = writeln!(out, "dense_layers = {}", self.dense_layers);
        let _ = writeln!(out, "dense_growth = {}", self.dense_growth);
        let _ = writeln!(out, "inner_layers = {}", self.inner_layers);
        let _ = writeln!(out, "inner_growth = {}", self.inner_growth);
        if let Some(s) = &self.inner_widths {
            let _ = writeln!(out, "inner_widths = {}", join(s));
        }
        let _ = writeln!(out, "\n[skips]");
        let _ = writeln!(out, "forward = true");
        let _ = writeln!(out, "backward = {}", self.skips.backward);
        let _ = writeln!(out, "stacked_residual = {}", self.skips.stacked_residual);
        let _ = writeln!(out, "projection = {}", self.projection);
        let _ = writeln!(out, "\n[heads]");
        let _ = writeln!(out, "supervision = {}", self.supervision);
        out
    }
}

fn opt<V>(
    sec: &Section,
    key: &str,
    f: impl FnOnce(&crate::kv::Entry) -> std::result::Result<V, SpecError>,
) -> std::result::Result<Option<V>, SpecError> {
    sec.get(key).map(f).transpose()
}

fn parse_stage(sec: &Section) -> Result<EncoderStage> {
    sec.expect_keys(&[
        "block",
        "layers",
        "growth",
        "residual_width",
        "bottleneck_width",
        "expansion",
        "out_channels",
        "downsample",
    ])?;
    let kind_entry = sec
        .get("block")
        .ok_or_else(|| SpecError::new(sec.line, 1, format!("[{}] needs a `block` key", sec.name)))?;
    let kind = BlockKind::parse(&kind_entry.value).ok_or_else(|| {
        kind_entry.invalid(format!(
            "unknown block {:?} (expected residual, dense, dpdb or inverted_residual)",
            kind_entry.value
        ))
    })?;
    let layers = opt(sec, "layers", |e| e.positive())?.unwrap_or(2);
    let growth = opt(sec, "growth", |e| e.positive())?.unwrap_or(8);
    let residual_width = opt(sec, "residual_width", |e| e.positive())?.unwrap_or(16);
    let out_channels = opt(sec, "out_channels", |e| e.positive())?;
    let mut block = match kind {
        BlockKind::Residual => BlockSpec::residual(residual_width, layers),
        BlockKind::Dense => BlockSpec::dense(growth, layers),
        BlockKind::Dpdb => BlockSpec::dpdb(residual_width, growth, layers, out_channels),
        BlockKind::InvertedResidual => {
            let expansion = opt(sec, "expansion", |e| e.positive())?.unwrap_or(4);
            let out = out_channels
                .ok_or_else(|| SpecError::new(sec.line, 1, format!("[{}] inverted_residual needs `out_channels`", sec.name)))?;
            BlockSpec::inverted_residual(expansion, out)
        }
    };
    block.bottleneck_width = opt(sec, "bottleneck_width", |e| e.positive())?;
    let downsample = opt(sec, "downsample", |e| e.positive())?.unwrap_or(2);
    Ok(EncoderStage { block, downsample })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_round_trip() {
        for spec in [ArchSpec::tiny(), ArchSpec::paperlike()] {
            let again = ArchSpec::parse(&spec.to_text()).unwrap();
            assert_eq!(again, spec);
        }
        let tiny = ArchSpec::tiny();
        assert_eq!(tiny.total_downsample(), 8);
        assert_eq!(tiny.skip_widths(), vec![24, 16, 8]);
    }

    #[test]
    fn closure_violation_is_reported() {
        let text = TINY.replace("upsample_factors = 2, 2, 2", "upsample_factors = 2, 2, 4");
        let err = ArchSpec::parse(&text).unwrap_err();
        assert!(err.to_string().contains("resolution closure"), "{err}");
    }

    #[test]
    fn errors_carry_positions() {
        let err = ArchSpec::parse("num_classes = three\n").unwrap_err();
        match err {
            Error::Spec(e) => assert_eq!((e.line, e.column), (1, 15)),
            other => panic!("unexpected {other}"),
        }
        let err = ArchSpec::parse(&format!("{TINY}\n[skips2]\n")).unwrap_err();
        assert!(matches!(err, Error::Spec(_)), "{err}");
        let text = TINY.replace("[heads]", "[heads]\nsupervise = true");
        match ArchSpec::parse(&text).unwrap_err() {
            Error::Spec(e) => assert!(e.message.contains("unknown key"), "{e}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn needs_three_stages() {
        let cut = TINY.find("[encoder.3]").unwrap();
        let rest = TINY[cut..].find("[decoder]").unwrap() + cut;
        let text = format!("{}{}", &TINY[..cut], &TINY[rest..]);
        assert!(ArchSpec::parse(&text).is_err());
    }

    #[test]
    fn skip_codes() {
        for s in SkipSet::ALL {
            assert_eq!(s.code().parse::<SkipSet>().unwrap(), s);
        }
        assert!("b".parse::<SkipSet>().is_err());
    }
}
