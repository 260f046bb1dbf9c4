//! Prototype extractor against a scalar re-implementation.

mod common;

use autodiff::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sqllava::lora::AdapterSet;
use sqllava::nn::Forward;
use sqllava::params::ParamStore;
use sqllava::vision::{ImageTokens, PrototypeBank, PROTO_Z};

use common::oracle::*;

#[test]
fn em_and_enhance_match_scalar_reference() {
    let r = compare(0..5);
    assert_eq!(r.instances, 10);
    assert!(r.max_abs_err < 1e-10, "{r:?}");
    assert!(r.max_row_sum_err < 1e-12, "{r:?}");
    assert!(r.zero_projection_identity);
}

#[test]
fn token_order_permutes_assignments_only() {
    let w = Weights::new(3);
    let store = w.store();
    let z = random(&mut ChaCha8Rng::seed_from_u64(4), L, D);
    let perm = [2, 0, 1];
    let zp: Mat = perm.iter().map(|&i| z[i].clone()).collect();
    let (m, c, out) = engine(&store, &z, 2);
    let (mp, cp, outp) = engine(&store, &zp, 2);
    assert!(c.max_abs_diff(&cp).unwrap() < 1e-12);
    for j in 0..K {
        for (p, &i) in perm.iter().enumerate() {
            assert!((mp.data()[j * L + p] - m.data()[j * L + i]).abs() < 1e-12);
            for d in 0..D {
                assert!((outp.data()[p * D + d] - out.data()[i * D + d]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn enhance_by_hand() {
    // One center (2, 0) and identity z-projection: the token (1, 0) is
    // parallel to it and gains (2, 0); the orthogonal token (0, 1) is unchanged.
    let mut store = ParamStore::new();
    store.insert(
        format!("{PROTO_Z}.weight"),
        Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
    );
    store.insert(format!("{PROTO_Z}.bias"), Tensor::zeros(&[2]));
    let adapters = AdapterSet::default();
    let mut fw = Forward::new(&store, &adapters);
    let bank = PrototypeBank {
        num_prototypes: 1,
        em_iters: 1,
        dim: 2,
    };
    let z = fw
        .graph
        .constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let c = fw
        .graph
        .constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
    let out = bank
        .enhance(&mut fw, &ImageTokens { z, enhanced: false }, c)
        .unwrap();
    assert!(out.enhanced);
    assert_eq!(fw.graph.value(out.z).data(), &[3.0, 0.0, 0.0, 1.0]);
}

#[test]
fn stage_order_is_enforced() {
    let w = Weights::new(1);
    let store = w.store();
    let adapters = AdapterSet::default();
    let mut fw = Forward::new(&store, &adapters);
    let bank = PrototypeBank {
        num_prototypes: K,
        em_iters: 1,
        dim: D,
    };
    let z = fw.graph.constant(Tensor::zeros(&[L, D]));
    let done = ImageTokens { z, enhanced: true };
    assert!(bank.em_cluster(&mut fw, &done).is_err());
    let c = fw.graph.constant(Tensor::zeros(&[K, D]));
    assert!(bank.enhance(&mut fw, &done, c).is_err());
}
