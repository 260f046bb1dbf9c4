//! Scalar re-implementation of prototype clustering and redistribution.

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqllava::lora::AdapterSet;
use sqllava::nn::Forward;
use sqllava::params::ParamStore;
use sqllava::vision::{
    ImageTokens, PrototypeBank, CENTERS, PROTO_K, PROTO_K_NORM, PROTO_Q, PROTO_V, PROTO_V_NORM,
    PROTO_Z,
};

pub const K: usize = 2;
pub const L: usize = 3;
pub const D: usize = 4;

pub type Mat = Vec<Vec<f64>>;

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap()
}

pub fn to_vec(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

pub struct Weights {
    pub centers: Mat,
    pub lin: [(Mat, Vec<f64>); 4],
    pub norms: [(Vec<f64>, Vec<f64>); 2],
}

impl Weights {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lin = || (random(&mut rng, D, D), random(&mut rng, 1, D).remove(0));
        let lin = [lin(), lin(), lin(), lin()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut norm = || {
            let g: Vec<f64> = (0..D).map(|_| rng.random_range(0.5..1.5)).collect();
            let b: Vec<f64> = (0..D).map(|_| rng.random_range(-0.3..0.3)).collect();
            (g, b)
        };
        let norms = [norm(), norm()];
        let centers = random(&mut ChaCha8Rng::seed_from_u64(seed + 200), K, D);
        Self {
            centers,
            lin,
            norms,
        }
    }

    pub fn store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(CENTERS, to_tensor(&self.centers));
        for (name, (w, b)) in [PROTO_Q, PROTO_K, PROTO_V, PROTO_Z].iter().zip(&self.lin) {
            s.insert(format!("{name}.weight"), to_tensor(w));
            s.insert(format!("{name}.bias"), to_vec(b));
        }
        for (name, (g, b)) in [PROTO_K_NORM, PROTO_V_NORM].iter().zip(&self.norms) {
            s.insert(format!("{name}.gain"), to_vec(g));
            s.insert(format!("{name}.bias"), to_vec(b));
        }
        s
    }
}

// Scalar reference -------------------------------------------------------

pub fn affine(w: &Mat, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.len())
        .map(|o| b[o] + (0..x.len()).map(|i| w[o][i] * x[i]).sum::<f64>())
        .collect()
}

pub fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-8).sqrt();
    (0..x.len())
        .map(|i| (x[i] - mean) / s * g[i] + b[i])
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns (assignment map [K][L], refined centers [K][D]).
pub fn reference_em(w: &Weights, z: &Mat, iters: usize) -> (Mat, Mat) {
    let (wq, bq) = &w.lin[0];
    let (wk, bk) = &w.lin[1];
    let (wv, bv) = &w.lin[2];
    let keys: Mat = z
        .iter()
        .map(|zi| norm(&affine(wk, bk, zi), &w.norms[0].0, &w.norms[0].1))
        .collect();
    let vals: Mat = z
        .iter()
        .map(|zi| norm(&affine(wv, bv, zi), &w.norms[1].0, &w.norms[1].1))
        .collect();
    let mut c = w.centers.clone();
    let mut m = vec![vec![0.0; z.len()]; K];
    for _ in 0..iters {
        for j in 0..K {
            let q = affine(wq, bq, &c[j]);
            let logits: Vec<f64> = keys.iter().map(|k| dot(&q, k)).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let s: f64 = e.iter().sum();
            for i in 0..z.len() {
                m[j][i] = e[i] / s;
            }
        }
        c = (0..K)
            .map(|j| {
                (0..D)
                    .map(|d| (0..z.len()).map(|i| m[j][i] * vals[i][d]).sum())
                    .collect()
            })
            .collect();
    }
    (m, c)
}

pub fn reference_enhance(w: &Weights, z: &Mat, c: &Mat) -> Mat {
    let (wz, bz) = &w.lin[3];
    z.iter()
        .map(|zi| {
            let mut mixed = vec![0.0; D];
            for cj in c {
                let cos = dot(zi, cj) / (dot(zi, zi) * dot(cj, cj)).sqrt().max(1e-8);
                for d in 0..D {
                    mixed[d] += cos * cj[d] / K as f64;
                }
            }
            let delta = affine(wz, bz, &mixed);
            zi.iter().zip(delta).map(|(a, b)| a + b).collect()
        })
        .collect()
}

// Engine under test ------------------------------------------------------

pub fn engine(store: &ParamStore, z: &Mat, iters: usize) -> (Tensor, Tensor, Tensor) {
    let adapters = AdapterSet::default();
    let mut fw = Forward::new(store, &adapters);
    let bank = PrototypeBank {
        num_prototypes: K,
        em_iters: iters,
        dim: D,
    };
    let zv = fw.graph.constant(to_tensor(z));
    let tokens = ImageTokens {
        z: zv,
        enhanced: false,
    };
    let (m, c) = bank.em_cluster(&mut fw, &tokens).unwrap();
    let out = bank.enhance(&mut fw, &tokens, c).unwrap();
    (
        fw.graph.value(m).clone(),
        fw.graph.value(c).clone(),
        fw.graph.value(out.z).clone(),
    )
}

pub fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    t.data()
        .iter()
        .zip(m.concat())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Worst deviations from the reference over several random instances.
#[derive(Debug, Default)]
pub struct OracleReport {
    pub instances: usize,
    pub max_abs_err: f64,
    pub max_row_sum_err: f64,
    pub zero_projection_identity: bool,
}

pub fn compare(seeds: std::ops::Range<u64>) -> OracleReport {
    let mut r = OracleReport::default();
    for seed in seeds {
        let w = Weights::new(seed);
        let store = w.store();
        let z = random(&mut ChaCha8Rng::seed_from_u64(seed + 300), L, D);
        for iters in [1, 2] {
            let (m, c, out) = engine(&store, &z, iters);
            let (rm, rc) = reference_em(&w, &z, iters);
            let rout = reference_enhance(&w, &z, &rc);
            r.instances += 1;
            r.max_abs_err = [
                r.max_abs_err,
                max_diff(&m, &rm),
                max_diff(&c, &rc),
                max_diff(&out, &rout),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            for row in m.data().chunks(L) {
                r.max_row_sum_err = r.max_row_sum_err.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let w = Weights::new(7);
    let mut store = w.store();
    store.insert(format!("{PROTO_Z}.weight"), Tensor::zeros(&[D, D]));
    store.insert(format!("{PROTO_Z}.bias"), Tensor::zeros(&[D]));
    let z = random(&mut ChaCha8Rng::seed_from_u64(8), L, D);
    let (_, _, out) = engine(&store, &z, 2);
    r.zero_projection_identity = out.data() == &z.concat()[..];
    r
}
