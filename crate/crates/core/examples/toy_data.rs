//! Writes the synthetic shapes corpus as PNG files plus JSON.
//!
//! `cargo run --release -p sqllava --example toy_data -- data`

use std::path::{Path, PathBuf};

use sqllava::data::conversation::dataset_to_json;
use sqllava::data::{Conversation, ImageSource};
use sqllava::synthetic::{caption_corpus, overfit_corpus, COLORS, SHAPES};

fn to_disk(root: &Path, mut convs: Vec<Conversation>) -> String {
    for c in &mut convs {
        let ImageSource::Inline(img) = &c.image else {
            continue;
        };
        let pixels =
            autodiff::Tensor::new(img.shape.clone(), img.data.clone()).expect("inline image");
        let rel = PathBuf::from(format!("images/{}.png", c.id));
        sqllava::image::save_png(&root.join(&rel), &pixels).expect("write png");
        c.image = ImageSource::Path(rel);
    }
    dataset_to_json(&convs)
}

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(root.join("images")).expect("create output directory");
    let size = sqllava::ModelConfig::default().vision.image_size;
    let pairs: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
        .collect();
    std::fs::write(
        root.join("conversations.json"),
        to_disk(&root, overfit_corpus(size)),
    )
    .expect("write conversations");
    std::fs::write(
        root.join("captions.json"),
        to_disk(&root, caption_corpus(size, &pairs)),
    )
    .expect("write captions");
    println!("{}", root.display());
}
