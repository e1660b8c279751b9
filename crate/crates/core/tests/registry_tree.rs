use std::collections::{HashMap, HashSet};

use ndarray::{Array1, Array2};
use prefpaint_core::diffusion::{Architecture, DenoiserWeights, Dense, ModelWeights};
use prefpaint_core::preference::{AdapterWeights, LoraLayer};
use prefpaint_core::registry::{digest, Checkpoint, ModelNode, ModelRegistry, NodeKind};
use prefpaint_core::Error;
use proptest::prelude::*;

const DOMAINS: [&str; 3] = ["polyps", "landscape", "human"];

fn micro() -> Architecture {
    Architecture {
        pixels: 4,
        time_dim: 2,
        prompts: 2,
        hidden: 3,
    }
}

/// Weights from a closed formula, independent of any RNG implementation.
fn formula_weights() -> ModelWeights {
    let arch = micro();
    let layers = arch
        .layer_shapes()
        .iter()
        .enumerate()
        .map(|(k, &(out, inp))| Dense {
            weight: Array2::from_shape_fn((out, inp), |(r, c)| (r as f32 - c as f32) * 0.125 + k as f32 * 0.5),
            bias: Array1::from_shape_fn(out, |r| -(r as f32) * 0.25),
        })
        .collect();
    DenoiserWeights::from_layers(arch, layers).unwrap()
}

fn small_adapter(fill: f32) -> AdapterWeights<f32> {
    let layers = micro()
        .layer_shapes()
        .iter()
        .map(|&(out, inp)| LoraLayer {
            a: Array2::from_elem((1, inp), 0.5),
            b: Array2::from_elem((out, 1), fill),
        })
        .collect();
    AdapterWeights::from_layers(1, 2.0, layers).unwrap()
}

fn check_well_formed(nodes: &[ModelNode]) {
    let mut seen = HashMap::new();
    let mut roots = HashSet::new();
    for n in nodes {
        match n.parent_id {
            None => {
                assert_eq!(n.kind, NodeKind::Base);
                assert!(roots.insert(n.domain_tag.clone()), "second root for {}", n.domain_tag);
            }
            Some(p) => {
                assert_eq!(n.kind, NodeKind::Adapter);
                let parent: &ModelNode = seen.get(&p).expect("parent created earlier");
                assert_eq!(parent.domain_tag, n.domain_tag);
            }
        }
        assert!(seen.insert(n.node_id, n.clone()).is_none());
    }
}

#[derive(Debug, Clone)]
enum Op {
    Root(usize),
    Child(usize),
    Orphan,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        1 => (0..DOMAINS.len()).prop_map(Op::Root),
        8 => any::<usize>().prop_map(Op::Child),
        1 => Just(Op::Orphan),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 4, ..ProptestConfig::default() })]

    #[test]
    fn thousand_creates_keep_the_tree_well_formed(ops in prop::collection::vec(op(), 1000)) {
        let dir = tempfile::tempdir().unwrap();
        let base = formula_weights();
        let adapters: Vec<_> = (0..4).map(|k| small_adapter(k as f32 * 0.01)).collect();
        let before = {
            let reg = ModelRegistry::open(dir.path()).unwrap();
            let mut roots = HashSet::new();
            for (i, op) in ops.iter().enumerate() {
                match *op {
                    Op::Root(d) => {
                        let r = reg.create_root(&base, format!("op {i}"), DOMAINS[d]);
                        if roots.insert(d) {
                            prop_assert!(r.is_ok());
                        } else {
                            prop_assert!(matches!(r, Err(Error::Conflict(_))));
                        }
                    }
                    Op::Child(pick) => {
                        let nodes = reg.nodes();
                        if nodes.is_empty() {
                            continue;
                        }
                        let parent = &nodes[pick % nodes.len()];
                        let child = reg.create_child(parent.node_id, &adapters[pick % 4], "child").unwrap();
                        prop_assert_eq!(child.parent_id, Some(parent.node_id));
                    }
                    Op::Orphan => {
                        let missing = reg.nodes().len() as u64 + 1000;
                        prop_assert!(matches!(reg.create_child(missing, &adapters[0], "x"), Err(Error::NotFound(_))));
                    }
                }
            }
            reg.nodes()
        };
        check_well_formed(&before);
        let reopened = ModelRegistry::open(dir.path()).unwrap();
        prop_assert_eq!(reopened.nodes(), before.clone());
        if let Some(deepest) = before.iter().max_by_key(|n| reopened.lineage(n.node_id).unwrap().len()) {
            reopened.resolve_weights(deepest.node_id).unwrap();
        }
    }

    #[test]
    fn base_checkpoint_round_trips(seed in any::<u64>()) {
        use rand::SeedableRng;
        let w: ModelWeights = DenoiserWeights::init(micro(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let bytes = Checkpoint::Base(w.clone()).to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::Base(w));
    }

    #[test]
    fn adapter_checkpoint_round_trips(values in prop::collection::vec(-4.0f32..4.0, 3)) {
        let mut a = small_adapter(0.0);
        for (layer, v) in a.layers_mut().iter_mut().zip(&values) {
            layer.b.fill(*v);
            layer.a[[0, 0]] = -*v;
        }
        let bytes = Checkpoint::Adapter(a.clone()).to_bytes().unwrap();
        prop_assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::Adapter(a));
    }
}

#[test]
fn golden_checkpoint_is_stable_across_builds() {
    let golden = include_bytes!("data/formula_base.pfpt");
    let bytes = Checkpoint::Base(formula_weights()).to_bytes().unwrap();
    assert_eq!(bytes.as_slice(), golden.as_slice());
    assert_eq!(digest(golden), GOLDEN_DIGEST);
    assert_eq!(Checkpoint::from_bytes(golden).unwrap(), Checkpoint::Base(formula_weights()));
}

const GOLDEN_DIGEST: &str = "e97154163f66bc98e095a7a31a8e5ae74362e1e0a66345f3151add2af52fa908";

#[test]
fn flipped_payload_byte_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let reg = ModelRegistry::open(dir.path()).unwrap();
    let root = reg.create_root(&formula_weights(), "r", "polyps").unwrap();
    let path = reg.blobs().path(&root.payload_ref).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    let cold = ModelRegistry::open(dir.path()).unwrap();
    match cold.resolve_weights(root.node_id) {
        Err(Error::Corruption { hash, .. }) => assert_eq!(hash, root.payload_ref),
        other => panic!("expected corruption, got {other:?}"),
    }
}
