//! Shared fixtures for the criterion benches.

use bicanet_core::layers::{Fwd, Mode, ParamStore};
use bicanet_core::network::{BiCaNet, NetworkConfig};
use bicanet_core::rng::Rng64;
use bicanet_core::tensor::{Shape, Tensor};

pub fn rand_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut rng = Rng64::new(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.uniform_in(-1.0, 1.0) as f32)
}

pub struct ModelFixture {
    pub model: BiCaNet,
    pub store: ParamStore,
    pub input: Tensor,
}

pub fn small_model(crop: usize) -> ModelFixture {
    let cfg = NetworkConfig::new(4, crop).with_widths([8, 16, 32, 64]);
    let mut store = ParamStore::new();
    let model = BiCaNet::new(&mut store, &cfg).expect("model construction");
    store.initialize(1).expect("init");
    let input = rand_tensor(Shape::new(1, 3, crop, crop), 2);
    ModelFixture {
        model,
        store,
        input,
    }
}

impl ModelFixture {
    pub fn forward_logits(&mut self) -> Tensor {
        let mut tape = bicanet_core::tensor::Tape::new();
        let mut fwd = Fwd::new(&mut tape, &mut self.store, Mode::Eval);
        let x = fwd.tape.leaf(self.input.clone(), false);
        let out = self.model.forward(&mut fwd, x).expect("forward");
        tape.value(out.logits).clone()
    }
}
