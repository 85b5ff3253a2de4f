//! Multi-scale contextual fusion block.
//!
//! Three branches over the stacked class features: a local 3x3 conv, a
//! factorized long-range pair (Kx1 then 1xK), and a global branch that
//! squeezes the input to one channel by channel-wise max, runs a factorized
//! 1xM / Mx1 pair with M = max(h, w), and gates the local+long sum through a
//! sigmoid attention map with an identity shortcut.

use crate::error::{Error, Result};
use crate::layers::{ConvLayer, ConvSpec, Fwd, ParamStore};
use crate::tensor::ValueId;

pub struct McfbBlock {
    local: ConvLayer,
    long_v: ConvLayer,
    long_h: ConvLayer,
    global_h: ConvLayer,
    global_v: ConvLayer,
    channels: usize,
    global_kernel: usize,
}

impl McfbBlock {
    /// `channels` is the stacked width (4L). `global_kernel` is M, fixed at
    /// construction from the training resolution; forward calls must present
    /// inputs whose max(h, w) equals it. `long_k` is K of the factorized
    /// long-range pair.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        long_k: usize,
        global_kernel: usize,
        norm: bool,
    ) -> Result<Self> {
        if long_k == 0 || global_kernel == 0 {
            return Err(Error::Config("mcfb kernel sizes must be >= 1".into()));
        }
        let mut local_spec = ConvSpec::bn_relu(channels, channels, 3);
        local_spec.norm = norm;
        let local = ConvLayer::new(store, &format!("{name}.local"), local_spec)?;

        let mut long_v_spec = ConvSpec::bn_relu(channels, channels, 1)
            .with_kernel((long_k, 1), (long_k / 2, 0));
        long_v_spec.norm = norm;
        let long_v = ConvLayer::new(store, &format!("{name}.long_v"), long_v_spec)?;
        let mut long_h_spec = ConvSpec::bn_relu(channels, channels, 1)
            .with_kernel((1, long_k), (0, long_k / 2));
        long_h_spec.norm = norm;
        let long_h = ConvLayer::new(store, &format!("{name}.long_h"), long_h_spec)?;

        // The attention convs stay raw linear; the sigmoid at the end is the
        // only nonlinearity of the global branch.
        let m = global_kernel;
        let global_h = ConvLayer::new(
            store,
            &format!("{name}.global_h"),
            ConvSpec::linear(1, 1, 1).with_kernel((1, m), (0, m / 2)),
        )?;
        let global_v = ConvLayer::new(
            store,
            &format!("{name}.global_v"),
            ConvSpec::linear(1, 1, 1).with_kernel((m, 1), (m / 2, 0)),
        )?;
        Ok(McfbBlock {
            local,
            long_v,
            long_h,
            global_h,
            global_v,
            channels,
            global_kernel,
        })
    }

    pub fn global_kernel(&self) -> usize {
        self.global_kernel
    }

    /// The factorized long-range pair on its own (Kx1 then 1xK).
    pub fn long_range(&self, fwd: &mut Fwd, f: ValueId) -> Result<ValueId> {
        let v = self.long_v.forward(fwd, f)?;
        self.long_h.forward(fwd, v)
    }

    /// Local + long-range sum and the one-channel attention map.
    pub fn forward_parts(&self, fwd: &mut Fwd, f: ValueId) -> Result<(ValueId, ValueId)> {
        let fs = fwd.tape.shape(f);
        if fs.c != self.channels {
            return Err(Error::shape(
                "mcfb input channels",
                self.channels.to_string(),
                fs.c.to_string(),
            ));
        }
        let needed = fs.h.max(fs.w);
        if needed != self.global_kernel {
            return Err(Error::InvalidArgument(format!(
                "mcfb global kernel was built for max(h, w) = {} but the input is {}x{}; \
                 rebuild the block for this resolution",
                self.global_kernel, fs.h, fs.w
            )));
        }

        let local = self.local.forward(fwd, f)?;
        let long = self.long_range(fwd, f)?;
        let sl = fwd.tape.add(local, long)?;

        let squeezed = fwd.tape.channel_max_squeeze(f)?;
        // An even M with symmetric floor(M/2) padding grows the convolved
        // axis by one; crop back to the input resolution.
        let mut att = self.global_h.forward(fwd, squeezed)?;
        let s = fwd.tape.shape(att);
        if (s.h, s.w) != (fs.h, fs.w) {
            att = fwd.tape.crop_spatial(att, fs.h, fs.w)?;
        }
        let mut att = self.global_v.forward(fwd, att)?;
        let s = fwd.tape.shape(att);
        if (s.h, s.w) != (fs.h, fs.w) {
            att = fwd.tape.crop_spatial(att, fs.h, fs.w)?;
        }
        let gate = fwd.tape.sigmoid(att);
        Ok((sl, gate))
    }

    /// Combine per the gating identity: out = sl + gate (x) sl.
    pub fn combine(fwd: &mut Fwd, sl: ValueId, gate: ValueId) -> Result<ValueId> {
        let weighted = fwd.tape.mul(sl, gate)?;
        fwd.tape.add(sl, weighted)
    }

    pub fn forward(&self, fwd: &mut Fwd, f: ValueId) -> Result<ValueId> {
        let (sl, gate) = self.forward_parts(fwd, f)?;
        Self::combine(fwd, sl, gate)
    }

    #[cfg(test)]
    fn long_pair_weight_ids(&self) -> [crate::layers::ParamId; 2] {
        [self.long_v.weight_id(), self.long_h.weight_id()]
    }
}
