//! Hand-walked renderings under `tests/golden`.

use std::path::PathBuf;

use serde_json::Value;
use sqllava::data::{parse_dataset, render, SqPolicy, TurnKind};
use sqllava::vocab::Vocab;

fn read(name: &str) -> String {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[derive(Debug, Default)]
pub struct GoldenReport {
    pub cases: usize,
    pub deltas: Vec<f64>,
    pub mismatches: Vec<String>,
    /// Cases whose first turn was drawn as a self-questioning turn.
    pub vusr_first: Vec<String>,
}

impl GoldenReport {
    pub fn ok(&self) -> bool {
        self.cases >= 6
            && self.mismatches.is_empty()
            && self.vusr_first.is_empty()
            && [0.0, 0.5, 1.0].iter().all(|d| self.deltas.contains(d))
    }
}

pub fn check() -> GoldenReport {
    let cases: Vec<Value> = serde_json::from_str(&read("cases.json")).unwrap();
    let vocab = Vocab::byte_level();
    let mut r = GoldenReport::default();
    for case in &cases {
        let name = case["name"].as_str().unwrap();
        let raw = Value::Array(vec![case["conversation"].clone()]);
        let conv = parse_dataset(&raw.to_string()).unwrap().remove(0);
        let policy = SqPolicy {
            delta: case["delta"].as_f64().unwrap(),
            seed: case["seed"].as_u64().unwrap(),
        };
        r.cases += 1;
        r.deltas.push(policy.delta);
        let kinds = policy.assign(&conv);
        let seq = render(
            &conv,
            &kinds,
            &vocab,
            case["image_tokens"].as_u64().unwrap() as usize,
            1024,
        )
        .unwrap();

        let ids: String = seq.token_ids.iter().map(|i| format!("{i}\n")).collect();
        let mask: String = seq
            .loss_mask
            .iter()
            .map(|m| format!("{}\n", u8::from(*m)))
            .collect();
        let tags: String = kinds
            .iter()
            .map(|k| match k {
                TurnKind::Usr => "usr\n",
                TurnKind::Vusr => "vusr\n",
            })
            .collect();
        for (ext, got) in [("ids", ids), ("mask", mask), ("kinds", tags)] {
            if got != read(&format!("{name}.{ext}")) {
                r.mismatches.push(format!("{name}.{ext}"));
            }
        }
        if kinds[0] != TurnKind::Usr {
            r.vusr_first.push(name.to_string());
        }
    }
    r
}

/// Fraction of self-questioning draws over 1000 ids × turns 2..=11.
pub fn vusr_fraction(seed: u64, delta: f64) -> (usize, f64) {
    let policy = SqPolicy { delta, seed };
    let mut vusr = 0;
    let mut total = 0;
    for i in 0..1000 {
        let id = format!("mc-{i}");
        for j in 2..=11 {
            total += 1;
            vusr += usize::from(policy.kind(&id, j) == TurnKind::Vusr);
        }
    }
    (total, vusr as f64 / total as f64)
}
