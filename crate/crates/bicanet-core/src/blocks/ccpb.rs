//! Contextual condensed projection block.
//!
//! Split-transform-merge with a residual connection: a 1x1 reduction to a
//! condensed width, D parallel branches of increasing receptive field whose
//! concatenation restores the condensed width, a residual add, and a linear
//! 1x1 projection onto the class channels.

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, ConvSpec, Fwd, ParamStore};
use crate::tensor::ValueId;

/// Default condensed width: half the input width, rounded up to the next
/// multiple of the branch cardinality.
pub fn default_condensed_width(c_in: usize, cardinality: usize) -> usize {
    let half = (c_in / 2).max(cardinality);
    half.div_ceil(cardinality) * cardinality
}

pub struct CcpbBlock {
    reduce: ConvLayer,
    /// Branch i holds a 1x1 bottleneck followed by i extra 3x3 convs.
    branches: Vec<Vec<ConvLayer>>,
    project: ConvLayer,
    c_in: usize,
    condensed: usize,
    classes: usize,
}

impl CcpbBlock {
    /// `condensed` defaults to [`default_condensed_width`]; an explicit value
    /// must divide evenly into `cardinality` branches.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        condensed: Option<usize>,
        classes: usize,
        cardinality: usize,
    ) -> Result<Self> {
        if cardinality == 0 {
            return Err(Error::Config("ccpb cardinality must be >= 1".into()));
        }
        let condensed = condensed.unwrap_or_else(|| default_condensed_width(c_in, cardinality));
        if !condensed.is_multiple_of(cardinality) {
            return Err(Error::Config(format!(
                "ccpb condensed width {condensed} is not divisible by cardinality {cardinality}"
            )));
        }
        if condensed >= c_in {
            return Err(Error::Config(format!(
                "ccpb condensed width {condensed} must be smaller than the input width {c_in}"
            )));
        }
        let branch_c = condensed / cardinality;
        let reduce = ConvLayer::new(
            store,
            &format!("{name}.reduce"),
            ConvSpec::bn_relu(c_in, condensed, 1),
        )?;
        let mut branches = Vec::with_capacity(cardinality);
        for b in 0..cardinality {
            let mut chain = vec![ConvLayer::new(
                store,
                &format!("{name}.branch{b}.embed"),
                ConvSpec::bn_relu(condensed, branch_c, 1),
            )?];
            for k in 0..b {
                chain.push(ConvLayer::new(
                    store,
                    &format!("{name}.branch{b}.conv{k}"),
                    ConvSpec::bn_relu(branch_c, branch_c, 3),
                )?);
            }
            branches.push(chain);
        }
        let project = ConvLayer::new(
            store,
            &format!("{name}.project"),
            ConvSpec::linear(condensed, classes, 1),
        )?;
        Ok(CcpbBlock {
            reduce,
            branches,
            project,
            c_in,
            condensed,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn condensed_width(&self) -> usize {
        self.condensed
    }

    /// The reduction, branch transform, and residual merge; returns the
    /// reduced features and the condensed output before projection.
    pub fn condense(&self, fwd: &mut Fwd, f: ValueId) -> Result<(ValueId, ValueId)> {
        let fs = fwd.tape.shape(f);
        if fs.c != self.c_in {
            return Err(Error::shape(
                "ccpb input channels",
                self.c_in.to_string(),
                fs.c.to_string(),
            ));
        }
        let reduced = self.reduce.forward(fwd, f)?;
        let transformed: Vec<ValueId> = self
            .branches
            .iter()
            .map(|chain| {
                let mut cur = reduced;
                for layer in chain {
                    cur = layer.forward(fwd, cur)?;
                }
                Ok(cur)
            })
            .collect::<Result<_>>()?;
        let merged = fwd.tape.concat_channels(&transformed)?;
        let condensed = fwd.tape.add(reduced, merged)?;
        Ok((reduced, condensed))
    }

    /// Full block: condense then project onto class channels.
    pub fn forward(&self, fwd: &mut Fwd, f: ValueId) -> Result<ValueId> {
        let (_, condensed) = self.condense(fwd, f)?;
        self.project.forward(fwd, condensed)
    }

    /// Names of every branch conv weight, for tests that zero the residual.
    pub fn branch_weight_ids(&self) -> Vec<crate::layers::ParamId> {
        self.branches
            .iter()
            .flatten()
            .map(|l| l.weight_id())
            .collect()
    }
}
