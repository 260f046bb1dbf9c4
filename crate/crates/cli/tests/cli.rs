//! End-to-end runs of the `sqllava` binary on a tiny workspace.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sqllava::data::conversation::dataset_to_json;
use sqllava::data::{Conversation, ImageSource};
use sqllava::runconfig::RunConfig;
use sqllava::synthetic::{caption_corpus, overfit_corpus, shape_image};

const BIN: &str = env!("CARGO_BIN_EXE_sqllava");

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// Images on disk as PNG, conversations and captions as JSON, and a
    /// config small enough for a debug build.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut cfg = RunConfig::default();
        let m = &mut cfg.model;
        m.vision.image_size = 8;
        m.vision.patch_size = 4;
        m.vision.d_vision = 8;
        m.vision.n_heads = 2;
        m.vision.n_layers = 1;
        m.vision.num_prototypes = 2;
        m.lm.d_model = 16;
        m.lm.n_heads = 2;
        m.lm.n_layers = 1;
        m.lm.max_seq_len = 320;
        m.lora.llm.rank = 2;
        m.lora.llm.alpha = 4.0;
        m.lora.vision.rank = 2;
        m.lora.vision.alpha = 4.0;
        let size = m.vision.image_size;

        std::fs::create_dir(root.join("images")).unwrap();
        let to_disk = |mut convs: Vec<Conversation>| {
            for c in &mut convs {
                let ImageSource::Inline(img) = &c.image else {
                    unreachable!()
                };
                let pixels = autodiff::Tensor::new(img.shape.clone(), img.data.clone()).unwrap();
                let rel = PathBuf::from(format!("images/{}.png", c.id));
                sqllava::image::save_png(&root.join(&rel), &pixels).unwrap();
                c.image = ImageSource::Path(rel);
            }
            dataset_to_json(&convs)
        };
        std::fs::write(
            root.join("conversations.json"),
            to_disk(overfit_corpus(size)),
        )
        .unwrap();
        std::fs::write(
            root.join("captions.json"),
            to_disk(caption_corpus(size, &[(0, 0), (1, 1), (2, 3)])),
        )
        .unwrap();
        sqllava::image::save_png(&root.join("query.png"), &shape_image(size, 2, 2)).unwrap();

        cfg.data.conversations = Some("conversations.json".into());
        cfg.data.captions = Some("captions.json".into());
        cfg.train.warmup.steps = 3;
        cfg.train.warmup.min_len = 20;
        cfg.train.warmup.max_len = 60;
        for plan in [&mut cfg.train.pretrain, &mut cfg.train.finetune] {
            plan.batch_size = 2;
            plan.epochs = 1;
        }
        cfg.io.save_every = Some(2);
        std::fs::write(root.join("run.toml"), cfg.to_toml()).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone())
        .unwrap()
        .trim()
        .to_string()
}

fn file(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn prepare_is_byte_reproducible() {
    let ws = Workspace::new();
    let a = stdout(&ws.run(&[
        "data", "prepare", "--config", "run.toml", "--out", "a.sqrd", "--dump", "a.txt",
    ]));
    let b = stdout(&ws.run(&["data", "prepare", "--config", "run.toml", "--out", "b.sqrd"]));
    assert_eq!(file(ws.path(&a)), file(ws.path(&b)));
    assert!(!file(ws.path("a.txt")).is_empty());

    let other = stdout(&ws.run(&[
        "--seed", "5", "data", "prepare", "--config", "run.toml", "--out", "c.sqrd",
    ]));
    assert!(ws.path(&other).exists());
}

#[test]
fn stats_are_json() {
    let ws = Workspace::new();
    let out = stdout(&ws.run(&["data", "stats", "--config", "run.toml"]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v.is_object());
}

#[test]
fn gradcheck_passes() {
    let ws = Workspace::new();
    let o = ws.run(&["gradcheck"]);
    let text = stdout(&o);
    assert!(text.lines().count() > 5);
    assert!(text.lines().all(|l| l.starts_with("ok")), "{text}");
}

#[test]
fn train_then_sample() {
    let ws = Workspace::new();
    let pre = stdout(&ws.run(&["pretrain", "--config", "run.toml"]));
    assert!(pre.ends_with("pretrain.ckpt"));
    let fin = stdout(&ws.run(&["finetune", "--config", "run.toml", "--init", &pre]));
    assert!(fin.ends_with("finetune.ckpt"));
    assert!(ws.path("checkpoints/finetune-step000002.ckpt").exists());
    let metrics = String::from_utf8(file(ws.path("metrics.jsonl"))).unwrap();
    // two caption steps and four instruction steps
    assert_eq!(metrics.lines().count(), 2 + 4);

    // resuming from the intermediate checkpoint lands on the same bytes
    let final_bytes = file(ws.path(&fin));
    let again = stdout(&ws.run(&[
        "finetune",
        "--config",
        "run.toml",
        "--resume",
        "checkpoints/finetune-step000002.ckpt",
    ]));
    assert_eq!(file(ws.path(&again)), final_bytes);

    let q = ws.run(&[
        "selfq",
        "--ckpt",
        &fin,
        "--image",
        "query.png",
        "--max-new-tokens",
        "8",
    ]);
    assert!(q.status.success(), "{}", String::from_utf8_lossy(&q.stderr));
    assert!(q.stdout.len() <= 8 * 4 + 1);
    let a = ws.run(&[
        "generate",
        "--ckpt",
        &fin,
        "--image",
        "query.png",
        "--question",
        "What shape is it?",
        "--max-new-tokens",
        "4",
    ]);
    assert!(a.status.success());
    let c = ws.run(&[
        "generate",
        "--ckpt",
        &fin,
        "--image",
        "query.png",
        "--max-new-tokens",
        "4",
    ]);
    assert!(c.status.success());

    let wrong = ws.run(&["pretrain", "--config", "run.toml", "--resume", &fin]);
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn failures_map_to_exit_codes() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.toml"), "[model]\nnot_a_key = 1\n").unwrap();
    assert_eq!(
        ws.run(&["data", "stats", "--config", "bad.toml"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(ws.run(&["data", "stats"]).status.code(), Some(1));

    std::fs::write(ws.path("conversations.json"), "[{\"id\": 3}]").unwrap();
    assert_eq!(
        ws.run(&["data", "stats", "--config", "run.toml"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        ws.run(&["data", "stats", "--config", "missing.toml"])
            .status
            .code(),
        Some(2)
    );
    let o = ws.run(&["selfq", "--ckpt", "nope.ckpt", "--image", "query.png"]);
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(ws.path("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        ws.run(&["selfq", "--ckpt", "junk.ckpt", "--image", "query.png"])
            .status
            .code(),
        Some(2)
    );
}
