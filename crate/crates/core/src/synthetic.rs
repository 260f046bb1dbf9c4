//! Toy images of colored shapes and conversations about them.

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Conversation, ImageSource, InlineImage, Turn};

pub const COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.1, 0.2, 0.9]),
    ("yellow", [0.95, 0.9, 0.1]),
];

pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "cross"];

const BACKGROUND: [f64; 3] = [0.05, 0.05, 0.05];

pub const COLOR_QUESTION: &str = "What color is the shape?";
pub const SHAPE_QUESTION: &str = "What shape is it?";

fn covers(shape: usize, x: f64, y: f64) -> bool {
    // Coordinates in [-1, 1], origin at the image center.
    match shape {
        0 => x.abs() <= 0.6 && y.abs() <= 0.6,
        1 => x * x + y * y <= 0.45,
        2 => (-0.6..=0.6).contains(&y) && x.abs() <= (0.6 - y) * 0.5,
        _ => x.abs() <= 0.2 || y.abs() <= 0.2,
    }
}

/// `[size, size, 3]` image of one shape in one color on a dark background.
pub fn shape_image(size: usize, color: usize, shape: usize) -> Tensor {
    let rgb = COLORS[color % COLORS.len()].1;
    let mut data = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let x = (col as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let y = 1.0 - (row as f64 + 0.5) / size as f64 * 2.0;
            let px = if covers(shape % SHAPES.len(), x, y) {
                rgb
            } else {
                BACKGROUND
            };
            data.extend_from_slice(&px);
        }
    }
    Tensor::new(vec![size, size, 3], data).expect("consistent shape")
}

fn inline(t: &Tensor) -> ImageSource {
    ImageSource::Inline(InlineImage {
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    })
}

fn article(shape: &str) -> &'static str {
    if shape.starts_with(['a', 'e', 'i', 'o', 'u']) {
        "An"
    } else {
        "A"
    }
}

fn color_answer(color: usize) -> String {
    let name = COLORS[color].0;
    let mut c = name.chars();
    let first = c.next().expect("non-empty").to_ascii_uppercase();
    format!("{first}{}.", c.as_str())
}

fn shape_answer(shape: usize) -> String {
    format!("{} {}.", article(SHAPES[shape]), SHAPES[shape])
}

pub fn caption(color: usize, shape: usize) -> String {
    format!(
        "A {} {} on a dark background.",
        COLORS[color].0, SHAPES[shape]
    )
}

/// Eight two-turn conversations over four images. Each image opens once
/// with the color question and once with the shape question, so every
/// (image, question) pair is asked as a first turn. The second turn always
/// asks for the shape, which gives self-questioning a single target.
pub fn overfit_corpus(image_size: usize) -> Vec<Conversation> {
    let mut out = Vec::new();
    for i in 0..4 {
        let (color, shape) = (i, i);
        let img = inline(&shape_image(image_size, color, shape));
        let color_turn = Turn {
            question: COLOR_QUESTION.into(),
            answer: color_answer(color),
        };
        let shape_turn = Turn {
            question: SHAPE_QUESTION.into(),
            answer: shape_answer(shape),
        };
        out.push(Conversation {
            id: format!("shape-{i}-a"),
            image: img.clone(),
            turns: vec![color_turn, shape_turn.clone()],
        });
        out.push(Conversation {
            id: format!("shape-{i}-b"),
            image: img,
            turns: vec![shape_turn.clone(), shape_turn],
        });
    }
    out
}

/// One caption record per (color, shape) combination in `pairs`.
pub fn caption_corpus(image_size: usize, pairs: &[(usize, usize)]) -> Vec<Conversation> {
    pairs
        .iter()
        .map(|&(c, s)| Conversation {
            id: format!("caption-{}-{}", COLORS[c].0, SHAPES[s]),
            image: inline(&shape_image(image_size, c, s)),
            turns: vec![Turn {
                question: "Describe the image.".into(),
                answer: caption(c, s),
            }],
        })
        .collect()
}

/// Random conversations with `1..=max_turns` turns drawn from a small question bank.
pub fn random_corpus(
    seed: u64,
    count: usize,
    max_turns: usize,
    image_size: usize,
) -> Vec<Conversation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let color = rng.random_range(0..COLORS.len());
            let shape = rng.random_range(0..SHAPES.len());
            let p = rng.random_range(1..=max_turns.max(1));
            let turns = (0..p)
                .map(|_| match rng.random_range(0..3) {
                    0 => Turn {
                        question: COLOR_QUESTION.into(),
                        answer: color_answer(color),
                    },
                    1 => Turn {
                        question: SHAPE_QUESTION.into(),
                        answer: shape_answer(shape),
                    },
                    _ => Turn {
                        question: "Describe the image.".into(),
                        answer: caption(color, shape),
                    },
                })
                .collect();
            Conversation {
                id: format!("rand-{seed}-{i}"),
                image: inline(&shape_image(image_size, color, shape)),
                turns,
            }
        })
        .collect()
}
