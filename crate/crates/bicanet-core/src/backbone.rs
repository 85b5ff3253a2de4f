//! Toy residual feature extractor.
//!
//! A stride-2 stem followed by four residual stages of two basic blocks each
//! (first block of every stage strided), emitting features at 1/4, 1/8, 1/16
//! and 1/32 of the input resolution.

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvLayer, ConvSpec, Fwd, ParamStore};
use crate::tensor::{Shape, ValueId};

pub const STAGE_COUNT: usize = 4;
/// Inputs must divide by the total stride of the deepest stage.
pub const INPUT_DIVISOR: usize = 32;

/// The four backbone outputs, shallow to deep.
#[derive(Debug, Clone, Copy)]
pub struct StageFeatures {
    pub s2: ValueId,
    pub s3: ValueId,
    pub s4: ValueId,
    pub s5: ValueId,
}

impl StageFeatures {
    pub fn as_array(&self) -> [ValueId; STAGE_COUNT] {
        [self.s2, self.s3, self.s4, self.s5]
    }
}

/// Two 3x3 convs with batch norm, plus a 1x1 strided projection shortcut
/// whenever the block changes resolution or width.
struct BasicBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    shortcut: Option<ConvLayer>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = ConvLayer::new(
            store,
            &format!("{name}.conv1"),
            ConvSpec::bn_relu(c_in, c_out, 3).with_stride(stride),
        )?;
        let conv2 = ConvLayer::new(
            store,
            &format!("{name}.conv2"),
            ConvSpec::bn_relu(c_out, c_out, 3).with_activation(Activation::None),
        )?;
        let shortcut = if stride != 1 || c_in != c_out {
            Some(ConvLayer::new(
                store,
                &format!("{name}.shortcut"),
                ConvSpec::bn_relu(c_in, c_out, 1)
                    .with_stride(stride)
                    .with_kernel((1, 1), (0, 0))
                    .with_activation(Activation::None),
            )?)
        } else {
            None
        };
        Ok(BasicBlock {
            conv1,
            conv2,
            shortcut,
        })
    }

    fn forward(&self, fwd: &mut Fwd, x: ValueId) -> Result<ValueId> {
        let branch = self.conv1.forward(fwd, x)?;
        let branch = self.conv2.forward(fwd, branch)?;
        let skip = match &self.shortcut {
            Some(layer) => layer.forward(fwd, x)?,
            None => x,
        };
        let sum = fwd.tape.add(branch, skip)?;
        Ok(fwd.tape.relu(sum))
    }

    /// Scale parameter of the block's last batch norm; zeroing it turns the
    /// block into its shortcut map.
    #[cfg(test)]
    fn last_bn_scale(&self) -> crate::layers::ParamId {
        self.conv2.bn_scale_id().expect("conv2 always carries a norm")
    }
}

pub struct Backbone {
    stem: ConvLayer,
    stages: Vec<[BasicBlock; 2]>,
    widths: [usize; STAGE_COUNT],
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, widths: [usize; STAGE_COUNT]) -> Result<Self> {
        for pair in widths.windows(2) {
            if pair[1] < pair[0] {
                return Err(Error::Config(format!(
                    "backbone widths must be non-decreasing, got {widths:?}"
                )));
            }
        }
        let stem = ConvLayer::new(
            store,
            &format!("{name}.stem"),
            ConvSpec::bn_relu(3, widths[0], 3).with_stride(2),
        )?;
        let mut stages = Vec::with_capacity(STAGE_COUNT);
        let mut c_in = widths[0];
        for (i, &c_out) in widths.iter().enumerate() {
            let stage = i + 2;
            let b0 = BasicBlock::new(store, &format!("{name}.stage{stage}.block0"), c_in, c_out, 2)?;
            let b1 = BasicBlock::new(store, &format!("{name}.stage{stage}.block1"), c_out, c_out, 1)?;
            stages.push([b0, b1]);
            c_in = c_out;
        }
        Ok(Backbone {
            stem,
            stages,
            widths,
        })
    }

    pub fn widths(&self) -> [usize; STAGE_COUNT] {
        self.widths
    }

    pub fn forward(&self, fwd: &mut Fwd, x: ValueId) -> Result<StageFeatures> {
        let xs = fwd.tape.shape(x);
        if xs.c != 3 {
            return Err(Error::shape("backbone input channels", "3", xs.c.to_string()));
        }
        if !xs.h.is_multiple_of(INPUT_DIVISOR)
            || !xs.w.is_multiple_of(INPUT_DIVISOR)
            || xs.h < INPUT_DIVISOR
            || xs.w < INPUT_DIVISOR
        {
            return Err(Error::InvalidArgument(format!(
                "backbone input {}x{} must be a positive multiple of {INPUT_DIVISOR} in both \
                 dimensions",
                xs.h, xs.w
            )));
        }
        let mut cur = self.stem.forward(fwd, x)?;
        let mut outs = Vec::with_capacity(STAGE_COUNT);
        for stage in &self.stages {
            for block in stage {
                cur = block.forward(fwd, cur)?;
            }
            outs.push(cur);
        }
        Ok(StageFeatures {
            s2: outs[0],
            s3: outs[1],
            s4: outs[2],
            s5: outs[3],
        })
    }

    /// Expected stage shapes for a given input shape.
    pub fn stage_shapes(&self, input: Shape) -> [Shape; STAGE_COUNT] {
        let mut shapes = [input; STAGE_COUNT];
        for (i, s) in shapes.iter_mut().enumerate() {
            let div = 4 << i;
            *s = Shape::new(input.n, self.widths[i], input.h / div, input.w / div);
        }
        shapes
    }

    #[cfg(test)]
    fn first_block_scales(&self) -> Vec<crate::layers::ParamId> {
        self.stages.iter().map(|s| s[0].last_bn_scale()).collect()
    }
}
