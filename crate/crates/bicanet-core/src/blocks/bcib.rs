//! Bi-directional context interaction block.
//!
//! Four parallel paths on a dyadic resolution ladder. Each path's output is
//! its own input plus bilinear upsamplings of every deeper path and strided
//! convolution chains of every shallower path, so fine detail and class-level
//! semantics flow both ways.

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvLayer, ConvSpec, Fwd, ParamStore};
use crate::tensor::ValueId;

pub const PATH_COUNT: usize = 4;

pub struct BcibBlock {
    /// `down[d]` holds the chains that feed path `d`; `down[d][s]` is the
    /// chain from source path `s` (s < d), a run of `d - s` stride-2 convs.
    down: Vec<Vec<Vec<ConvLayer>>>,
    classes: usize,
}

impl BcibBlock {
    /// `norm` switches batch norm in the resize convolutions; the chains are
    /// bias-free so the norm-free configuration stays homogeneous.
    ///
    /// The last conv of every chain is linear (no relu): the chain output is
    /// added into the signed class-logit space of its target path, and a
    /// rectified tail could only ever add positive mass there.
    pub fn new(store: &mut ParamStore, name: &str, classes: usize, norm: bool) -> Result<Self> {
        let mut down = Vec::with_capacity(PATH_COUNT);
        for dst in 0..PATH_COUNT {
            let mut per_source = Vec::with_capacity(dst);
            for src in 0..dst {
                let len = dst - src;
                let chain = (0..len)
                    .map(|step| {
                        let mut spec = ConvSpec::bn_relu(classes, classes, 3).with_stride(2);
                        spec.norm = norm;
                        if step + 1 == len {
                            spec.activation = Activation::None;
                        }
                        ConvLayer::new(
                            store,
                            &format!("{name}.down.s{}t{}.step{step}", src + 1, dst + 1),
                            spec,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_source.push(chain);
            }
            down.push(per_source);
        }
        Ok(BcibBlock { down, classes })
    }

    /// Fan-in per path: identity plus every deeper path upsampled and every
    /// shallower path run through its strided chain.
    #[allow(clippy::needless_range_loop)] // indices mirror the fan-in arithmetic
    pub fn forward(
        &self,
        fwd: &mut Fwd,
        paths: [ValueId; PATH_COUNT],
    ) -> Result<[ValueId; PATH_COUNT]> {
        let shapes: Vec<_> = paths.iter().map(|&p| fwd.tape.shape(p)).collect();
        for (i, s) in shapes.iter().enumerate() {
            if s.c != self.classes {
                return Err(Error::shape(
                    format!("bcib path {} channels", i + 1),
                    self.classes.to_string(),
                    s.c.to_string(),
                ));
            }
        }
        for i in 0..PATH_COUNT - 1 {
            let (a, b) = (shapes[i], shapes[i + 1]);
            if a.h != 2 * b.h || a.w != 2 * b.w {
                return Err(Error::InvalidArgument(format!(
                    "bcib resolution ladder must halve between paths {} ({}x{}) and {} ({}x{})",
                    i + 1,
                    a.h,
                    a.w,
                    i + 2,
                    b.h,
                    b.w
                )));
            }
        }

        let mut outs = [paths[0]; PATH_COUNT];
        for dst in 0..PATH_COUNT {
            let mut acc = paths[dst];
            for src in dst + 1..PATH_COUNT {
                let up = fwd.tape.bilinear_upsample(paths[src], 1 << (src - dst))?;
                acc = fwd.tape.add(acc, up)?;
            }
            for src in 0..dst {
                let mut cur = paths[src];
                for layer in &self.down[dst][src] {
                    cur = layer.forward(fwd, cur)?;
                }
                acc = fwd.tape.add(acc, cur)?;
            }
            outs[dst] = acc;
        }
        Ok(outs)
    }

    pub fn resize_weight_ids(&self) -> Vec<crate::layers::ParamId> {
        self.down
            .iter()
            .flatten()
            .flatten()
            .map(|l| l.weight_id())
            .collect()
    }
}
