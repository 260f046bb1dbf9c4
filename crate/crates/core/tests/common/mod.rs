#![allow(dead_code)]

pub mod golden;
pub mod oracle;

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqllava::data::{render, Conversation, ImageSource, Turn, TurnKind};
use sqllava::synthetic::shape_image;
use sqllava::trainer::Sample;
use sqllava::vocab::{TokenId, IMAGE};
use sqllava::{ModelConfig, SqLlava};

/// Small enough for debug-build tests, with every structural feature kept.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.vision.image_size = 8;
    c.vision.patch_size = 4;
    c.vision.d_vision = 8;
    c.vision.n_heads = 2;
    c.vision.n_layers = 2;
    c.vision.num_prototypes = 3;
    c.lm.d_model = 16;
    c.lm.n_heads = 2;
    c.lm.n_layers = 2;
    c.lm.max_seq_len = 320;
    c.lora.llm.rank = 4;
    c.lora.llm.alpha = 8.0;
    c.lora.vision.rank = 2;
    c.lora.vision.alpha = 4.0;
    c
}

pub fn tiny_model(seed: u64) -> SqLlava {
    SqLlava::new(tiny_config(), seed).unwrap()
}

pub fn sample(model: &SqLlava, seed: u64) -> Sample {
    let conv = Conversation {
        id: format!("s{seed}"),
        image: ImageSource::Path("unused.png".into()),
        turns: vec![
            Turn {
                question: "What is it?".into(),
                answer: "A shape.".into(),
            },
            Turn {
                question: "Where?".into(),
                answer: "Center.".into(),
            },
        ],
    };
    let seq = render(
        &conv,
        &[TurnKind::Usr, TurnKind::Vusr],
        &model.vocab,
        model.config.vision.num_tokens(),
        model.config.lm.max_seq_len,
    )
    .unwrap();
    Sample {
        seq,
        pixels: shape_image(
            model.config.vision.image_size,
            seed as usize % 4,
            seed as usize / 4 % 4,
        ),
    }
}

/// Short random multimodal input: `[image × L_v]` then random text.
pub fn random_input(model: &SqLlava, rng: &mut ChaCha8Rng) -> (Vec<TokenId>, Tensor) {
    let l_v = model.config.vision.num_tokens();
    let mut ids = vec![IMAGE; l_v];
    ids.extend((0..rng.random_range(1..12)).map(|_| rng.random_range(0..256u32)));
    let s = model.config.vision.image_size;
    let px: Vec<f64> = (0..s * s * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    (ids, Tensor::new(vec![s, s, 3], px).unwrap())
}

pub fn logits(model: &SqLlava, ids: &[TokenId], px: &Tensor) -> Tensor {
    let mut fw = model.forward_ctx();
    let l = model
        .logits(
            &mut fw,
            ids,
            (0, model.config.vision.num_tokens()),
            Some(px),
        )
        .unwrap();
    fw.graph.value(l).clone()
}

/// Gives every `B` random values so adapters change the output.
pub fn perturb_adapters(model: &mut SqLlava, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = model.adapters.iter().map(|a| a.b_name()).collect();
    for n in names {
        let t = model.params.get_mut(&n).unwrap();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
}
