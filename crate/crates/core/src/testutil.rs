use crate::corpus::SynthSpec;
use crate::network::{Model, ModelConfig};
use crate::pipeline::Prepared;

pub fn tiny_data() -> Prepared {
    Prepared::synthetic(&SynthSpec {
        train: 24,
        dev: 6,
        test: 6,
        ..SynthSpec::default()
    })
    .unwrap()
}

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        hidden: 8,
        latent: 3,
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        injection_interval: 1,
        vocab_size,
        max_len: 64,
        ffn_mult: 2,
        seed: 5,
    }
}

pub fn tiny_model(data: &Prepared) -> Model {
    Model::new(tiny_config(data.vocab.len())).unwrap()
}
