//! Full network assembly and the training objective.
//!
//! Backbone stages feed per-stage condensed projection heads, the
//! cross-resolution interaction block, channel attention over the stacked
//! class maps, the multi-scale fusion block at full resolution, and a linear
//! classifier. The loss is a master cross-entropy (with optional online hard
//! example mining) plus lambda-weighted auxiliary cross-entropies on the
//! per-stage heads.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, STAGE_COUNT};
use crate::blocks::{BcibBlock, CcpbBlock, McfbBlock};
use crate::error::{Error, Result};
use crate::layers::{ChannelAttention, ConvLayer, ConvSpec, Fwd, ParamStore};
use crate::tensor::{Tape, Tensor, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_ccpb: bool,
    pub use_bcib: bool,
    pub use_mcfb: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_ccpb: true,
            use_bcib: true,
            use_mcfb: true,
        }
    }
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags {
        use_ccpb: true,
        use_bcib: true,
        use_mcfb: true,
    };
    pub const BASELINE: AblationFlags = AblationFlags {
        use_ccpb: false,
        use_bcib: false,
        use_mcfb: false,
    };

    /// The blocks nest: bcib sits on ccpb outputs, mcfb on bcib fusion.
    pub fn validate(&self) -> Result<()> {
        if self.use_bcib && !self.use_ccpb {
            return Err(Error::Config("bcib requires ccpb".into()));
        }
        if self.use_mcfb && !self.use_bcib {
            return Err(Error::Config("mcfb requires bcib".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NetworkConfig {
    /// Number of classes L; every head projects onto this many channels.
    pub classes: usize,
    pub widths: [usize; STAGE_COUNT],
    /// Branch cardinality D of the condensed projection blocks.
    pub cardinality: usize,
    /// Long-range factorized kernel size K.
    pub long_k: usize,
    /// Training resolution; fixes the global attention kernel M.
    pub crop: usize,
    pub attention_reduction: usize,
    pub flags: AblationFlags,
}

impl NetworkConfig {
    pub fn new(classes: usize, crop: usize) -> Self {
        NetworkConfig {
            classes,
            widths: [16, 32, 64, 128],
            cardinality: 3,
            long_k: 5,
            crop,
            attention_reduction: ChannelAttention::DEFAULT_REDUCTION,
            flags: AblationFlags::default(),
        }
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn with_widths(mut self, widths: [usize; STAGE_COUNT]) -> Self {
        self.widths = widths;
        self
    }

    pub fn stacked_channels(&self) -> usize {
        STAGE_COUNT * self.classes
    }
}

enum StageHead {
    Condensed(CcpbBlock),
    Plain(ConvLayer),
}

impl StageHead {
    fn forward(&self, fwd: &mut Fwd, x: ValueId) -> Result<ValueId> {
        match self {
            StageHead::Condensed(block) => block.forward(fwd, x),
            StageHead::Plain(layer) => layer.forward(fwd, x),
        }
    }
}

pub struct ModelOutput {
    /// Class logits at input resolution.
    pub logits: ValueId,
    /// Per-stage head logits upsampled to input resolution, shallow to deep.
    pub aux: [ValueId; STAGE_COUNT],
}

pub struct BiCaNet {
    backbone: Backbone,
    heads: Vec<StageHead>,
    bcib: Option<BcibBlock>,
    attention: ChannelAttention,
    mcfb: Option<McfbBlock>,
    classifier: ConvLayer,
    config: NetworkConfig,
}

impl BiCaNet {
    pub fn new(store: &mut ParamStore, config: &NetworkConfig) -> Result<Self> {
        config.flags.validate()?;
        if config.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !config.crop.is_multiple_of(32) || config.crop == 0 {
            return Err(Error::Config(format!(
                "crop {} must be a positive multiple of 32",
                config.crop
            )));
        }
        let backbone = Backbone::new(store, "backbone", config.widths)?;
        let mut heads = Vec::with_capacity(STAGE_COUNT);
        for (i, &width) in config.widths.iter().enumerate() {
            let name = format!("head{}", i + 2);
            let head = if config.flags.use_ccpb {
                StageHead::Condensed(CcpbBlock::new(
                    store,
                    &name,
                    width,
                    None,
                    config.classes,
                    config.cardinality,
                )?)
            } else {
                StageHead::Plain(ConvLayer::new(
                    store,
                    &name,
                    ConvSpec::linear(width, config.classes, 1),
                )?)
            };
            heads.push(head);
        }
        let bcib = if config.flags.use_bcib {
            Some(BcibBlock::new(store, "bcib", config.classes, true)?)
        } else {
            None
        };
        let stacked = config.stacked_channels();
        let attention =
            ChannelAttention::new(store, "attention", stacked, config.attention_reduction)?;
        let mcfb = if config.flags.use_mcfb {
            Some(McfbBlock::new(
                store,
                "mcfb",
                stacked,
                config.long_k,
                config.crop,
                true,
            )?)
        } else {
            None
        };
        let classifier = ConvLayer::new(
            store,
            "classifier",
            ConvSpec::linear(stacked, config.classes, 1),
        )?;
        Ok(BiCaNet {
            backbone,
            heads,
            bcib,
            attention,
            mcfb,
            classifier,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn forward(&self, fwd: &mut Fwd, x: ValueId) -> Result<ModelOutput> {
        let stages = self.backbone.forward(fwd, x)?;

        let mut paths = [stages.s2; STAGE_COUNT];
        for (i, (&stage, head)) in stages.as_array().iter().zip(&self.heads).enumerate() {
            paths[i] = head.forward(fwd, stage)?;
        }

        // Auxiliary supervision taps the head outputs, upsampled to label
        // resolution so no label downsampling aliasing enters the loss.
        let mut aux = [paths[0]; STAGE_COUNT];
        for (i, &p) in paths.iter().enumerate() {
            aux[i] = fwd.tape.bilinear_upsample(p, 4 << i)?;
        }

        let fused = match &self.bcib {
            Some(bcib) => bcib.forward(fwd, paths)?,
            None => paths,
        };

        // Stack everything at the shallowest (1/4) resolution.
        let mut quarter = [fused[0]; STAGE_COUNT];
        for (i, &p) in fused.iter().enumerate() {
            quarter[i] = if i == 0 {
                p
            } else {
                fwd.tape.bilinear_upsample(p, 1 << i)?
            };
        }
        let stacked = fwd.tape.concat_channels(&quarter)?;
        let weighted = self.attention.forward(fwd, stacked)?;
        let full = fwd.tape.bilinear_upsample(weighted, 4)?;

        let fused_full = match &self.mcfb {
            Some(mcfb) => mcfb.forward(fwd, full)?,
            None => full,
        };
        let logits = self.classifier.forward(fwd, fused_full)?;
        Ok(ModelOutput { logits, aux })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OhemConfig {
    pub enabled: bool,
    /// Pixels whose target-class probability is below this are kept.
    pub threshold: f32,
    /// At least this fraction of non-ignored pixels is kept, hardest first.
    pub min_keep_fraction: f32,
}

impl Default for OhemConfig {
    fn default() -> Self {
        OhemConfig {
            enabled: true,
            threshold: 0.7,
            min_keep_fraction: 0.25,
        }
    }
}

/// The scalar pieces of the composite objective.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub total: f64,
    pub master: f64,
    pub auxiliaries: Vec<f64>,
    pub lambda: f64,
}

impl LossReport {
    /// |total - (master + lambda * sum(aux))|.
    pub fn composition_residual(&self) -> f64 {
        let aux_sum: f64 = self.auxiliaries.iter().sum();
        (self.total - (self.master + self.lambda * aux_sum)).abs()
    }
}

/// Hard-example selection over (pixel index, target probability) pairs of
/// non-ignored pixels: keep everything below the probability threshold, but
/// never fewer than ceil(min_keep_fraction * n), topped up hardest-first.
pub fn ohem_select(
    target_probs: &[(usize, f64)],
    threshold: f64,
    min_keep_fraction: f64,
) -> Vec<usize> {
    let below: Vec<usize> = target_probs
        .iter()
        .filter(|(_, p)| *p < threshold)
        .map(|(i, _)| *i)
        .collect();
    let need = (min_keep_fraction * target_probs.len() as f64).ceil() as usize;
    if below.len() >= need {
        return below;
    }
    let mut ranked: Vec<&(usize, f64)> = target_probs.iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut kept: Vec<usize> = ranked.iter().take(need).map(|(i, _)| *i).collect();
    kept.sort_unstable();
    kept
}

/// Per-pixel softmax probability of the target class, for non-ignored pixels.
fn target_probabilities(logits: &Tensor, labels: &[u8]) -> Vec<(usize, f64)> {
    let s = logits.shape();
    let mut out = Vec::new();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let p = (n * s.h + y) * s.w + x;
                let t = labels[p];
                if t == IGNORE_LABEL {
                    continue;
                }
                let mut m = f64::NEG_INFINITY;
                for c in 0..s.c {
                    m = m.max(logits.at(n, c, y, x) as f64);
                }
                let mut z = 0.0f64;
                for c in 0..s.c {
                    z += (logits.at(n, c, y, x) as f64 - m).exp();
                }
                let prob = (logits.at(n, t as usize, y, x) as f64 - m).exp() / z;
                out.push((p, prob));
            }
        }
    }
    out
}

pub const IGNORE_LABEL: u8 = 255;

/// Assemble the composite objective on the tape and report its pieces.
///
/// The master term averages cross-entropy over the OHEM-selected pixels of
/// `logits`; each auxiliary term is a plain mean over all non-ignored pixels.
pub fn compute_loss(
    tape: &mut Tape,
    logits: ValueId,
    aux: &[ValueId],
    labels: &[u8],
    lambda: f64,
    ohem: &OhemConfig,
) -> Result<(ValueId, LossReport)> {
    let s = tape.shape(logits);
    let classes = s.c;
    let pixels = s.n * s.h * s.w;
    if labels.len() != pixels {
        return Err(Error::shape(
            "label map",
            pixels.to_string(),
            labels.len().to_string(),
        ));
    }
    for (p, &t) in labels.iter().enumerate() {
        if t != IGNORE_LABEL && (t as usize) >= classes {
            return Err(Error::Data(format!(
                "label {t} at pixel {p} out of range for {classes} classes"
            )));
        }
    }
    let non_ignored: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != IGNORE_LABEL)
        .map(|(p, _)| p)
        .collect();
    if non_ignored.is_empty() {
        return Err(Error::Data("every pixel carries the ignore label".into()));
    }

    let selected: Vec<usize> = if ohem.enabled {
        let probs = target_probabilities(tape.value(logits), labels);
        ohem_select(&probs, ohem.threshold as f64, ohem.min_keep_fraction as f64)
    } else {
        non_ignored.clone()
    };
    let mut master_weights = vec![0.0f32; pixels];
    let w = 1.0 / selected.len() as f32;
    for &p in &selected {
        master_weights[p] = w;
    }
    let master = tape.masked_cross_entropy(logits, labels.to_vec(), master_weights)?;

    let mut uniform = vec![0.0f32; pixels];
    let w = 1.0 / non_ignored.len() as f32;
    for &p in &non_ignored {
        uniform[p] = w;
    }
    let mut aux_ids = Vec::with_capacity(aux.len());
    for &head in aux {
        let hs = tape.shape(head);
        if (hs.n, hs.h, hs.w) != (s.n, s.h, s.w) {
            return Err(Error::shape(
                "auxiliary logits resolution",
                format!("{}x{}x{}", s.n, s.h, s.w),
                format!("{}x{}x{}", hs.n, hs.h, hs.w),
            ));
        }
        aux_ids.push(tape.masked_cross_entropy(head, labels.to_vec(), uniform.clone())?);
    }

    let mut total = master;
    if !aux_ids.is_empty() {
        let mut aux_sum = aux_ids[0];
        for &a in &aux_ids[1..] {
            aux_sum = tape.add(aux_sum, a)?;
        }
        let scaled = tape.scale(aux_sum, lambda);
        total = tape.add(master, scaled)?;
    }

    let report = LossReport {
        total: tape.value(total).scalar()? as f64,
        master: tape.value(master).scalar()? as f64,
        auxiliaries: aux_ids
            .iter()
            .map(|&a| tape.value(a).scalar().map(|v| v as f64))
            .collect::<Result<_>>()?,
        lambda,
    };
    Ok((total, report))
}
