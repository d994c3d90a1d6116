//! Parameter enumeration and initialization.
//!
//! `param_specs` is the single source of truth for which tensors exist
//! under a given configuration; initialization, checkpoint validation, and
//! gradient checks all walk the same ordered list. Weights draw from a
//! centered uniform scaled by fan-in, each from an RNG derived from the
//! seed and the parameter's own name, so adding a parameter never shifts
//! the draws of existing ones.

use crate::model::{config::EafnetConfig, ModelError};
use crate::radiometry::BRANCH_CHANNELS;
use crate::scalar::Scalar;
use crate::seed::derive_rng;
use crate::tensor::{Array, ParamStore};

pub const NONREF_BRANCHES: [&str; 2] = ["low", "high"];
pub const ALL_BRANCHES: [&str; 3] = ["low", "mid", "high"];
const BANDS: [&str; 4] = ["ll", "lh", "hl", "hh"];

/// Ordered (name, shape) list of every trainable tensor.
pub fn param_specs(cfg: &EafnetConfig) -> Vec<(String, Vec<usize>)> {
    let c = cfg.base_channels;
    let d = cfg.token_dim();
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| specs.push((name, shape));

    for branch in ALL_BRANCHES {
        for s in 1..=cfg.scales {
            let in_c = if s == 1 { BRANCH_CHANNELS } else { c };
            push(format!("extract/{branch}/s{s}/conv.w"), vec![c, in_c, 3, 3]);
            push(format!("extract/{branch}/s{s}/conv.b"), vec![c]);
        }
    }

    if cfg.use_efsm {
        let e_dim = cfg.modulation_ratio * c;
        for stack in ["fsb", "efsb"] {
            push(format!("efsm/{stack}/fc1.w"), vec![c, c]);
            push(format!("efsm/{stack}/fc1.b"), vec![c]);
            push(format!("efsm/{stack}/fc2.w"), vec![c, c]);
            push(format!("efsm/{stack}/fc2.b"), vec![c]);
        }
        push("efsm/efsb/fc_e.w".into(), vec![e_dim, 1]);
        push("efsm/efsb/fc_e.b".into(), vec![e_dim]);
        push("efsm/efsb/fc_u.w".into(), vec![c, c + e_dim]);
        push("efsm/efsb/fc_u.b".into(), vec![c]);
    }

    for branch in NONREF_BRANCHES {
        for s in 1..=cfg.scales {
            for w in ["wq", "wk", "wv"] {
                push(format!("aca/{branch}/s{s}/{w}"), vec![d, d]);
            }
        }
    }

    if cfg.scales >= 2 {
        for branch in NONREF_BRANCHES {
            push(format!("guide/{branch}/conv.w"), vec![c, c + c / 4, 3, 3]);
            push(format!("guide/{branch}/conv.b"), vec![c]);
        }
    }

    let merge_in = c * cfg.scales + if cfg.scales >= 2 { c } else { 0 };
    for branch in NONREF_BRANCHES {
        push(format!("fuse/{branch}/merge.w"), vec![c, merge_in, 3, 3]);
        push(format!("fuse/{branch}/merge.b"), vec![c]);
        push(format!("fuse/{branch}/att1.w"), vec![c, 2 * c, 3, 3]);
        push(format!("fuse/{branch}/att1.b"), vec![c]);
        push(format!("fuse/{branch}/att2.w"), vec![c, c, 3, 3]);
        push(format!("fuse/{branch}/att2.b"), vec![c]);
    }

    push("restore/enc1.w".into(), vec![c, 4 * c, 3, 3]);
    push("restore/enc1.b".into(), vec![c]);
    push("restore/enc2.w".into(), vec![c, c, 3, 3]);
    push("restore/enc2.b".into(), vec![c]);
    push("restore/enc4.w".into(), vec![c, c, 3, 3]);
    push("restore/enc4.b".into(), vec![c]);

    let bands: &[&str] = if cfg.use_dwt { &BANDS } else { &BANDS[..1] };
    for (level, blocks) in [(1, 2), (2, 1)] {
        for band in bands {
            for blk in 0..blocks {
                for conv in ["c0", "c1"] {
                    push(
                        format!("restore/lbf{level}/{band}/b{blk}/{conv}.w"),
                        vec![c, c, 3, 3],
                    );
                    push(format!("restore/lbf{level}/{band}/b{blk}/{conv}.b"), vec![c]);
                }
            }
        }
    }
    let low4 = if cfg.use_dwt { 4 * c } else { c };
    push("restore/low4/conv.w".into(), vec![low4, low4, 1, 1]);
    push("restore/low4/conv.b".into(), vec![low4]);

    push("restore/out.w".into(), vec![3, c, 3, 3]);
    push("restore/out.b".into(), vec![3]);
    specs
}

/// Fan-in of one tensor: what one output coordinate sums over.
fn fan_in(shape: &[usize]) -> usize {
    match shape.len() {
        4 => shape[1] * shape[2] * shape[3],
        2 => shape[1],
        _ => shape[0],
    }
}

pub fn init_params<T: Scalar>(
    cfg: &EafnetConfig,
    seed: u64,
) -> Result<ParamStore<T>, ModelError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in param_specs(cfg) {
        let value = if name.ends_with(".b") {
            Array::zeros(&shape)
        } else {
            let bound = 1.0 / (fan_in(&shape) as f64).sqrt();
            let mut rng = derive_rng(seed, &format!("init/{name}"));
            Array::uniform(&shape, -bound, bound, &mut rng)
        };
        store.register(&name, value)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_names_are_unique_and_ordered_deterministically() {
        let cfg = EafnetConfig::default();
        let specs = param_specs(&cfg);
        let mut names: Vec<&String> = specs.iter().map(|(n, _)| n).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
        assert_eq!(specs, param_specs(&cfg));
    }

    #[test]
    fn ablation_flags_change_the_parameter_set() {
        let full = param_specs(&EafnetConfig::default());
        let no_efsm = param_specs(&EafnetConfig { use_efsm: false, ..Default::default() });
        assert!(full.len() > no_efsm.len());
        assert!(no_efsm.iter().all(|(n, _)| !n.starts_with("efsm/")));
        let no_dwt = param_specs(&EafnetConfig { use_dwt: false, ..Default::default() });
        assert!(no_dwt.iter().all(|(n, _)| !n.contains("/lh/")));
        let single = param_specs(&EafnetConfig { scales: 1, ..Default::default() });
        assert!(single.iter().all(|(n, _)| !n.starts_with("guide/")));
    }

    #[test]
    fn init_is_seeded_and_biases_are_zero() {
        let cfg = EafnetConfig::tiny();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        let c = init_params::<f32>(&cfg, 8).unwrap();
        for (name, pa) in a.iter() {
            let pb = b.value(name).unwrap();
            assert_eq!(pa.value.data(), pb.data());
            if name.ends_with(".b") {
                assert!(pa.value.data().iter().all(|v| *v == 0.0));
            } else {
                assert_ne!(pa.value.data(), c.value(name).unwrap().data());
            }
        }
        assert_eq!(a.len(), param_specs(&cfg).len());
    }

    #[test]
    fn weight_scale_tracks_fan_in() {
        let cfg = EafnetConfig::default();
        let store = init_params::<f64>(&cfg, 0).unwrap();
        let w = &store.value("restore/enc1.w").unwrap();
        let bound = 1.0 / ((4 * cfg.base_channels * 9) as f64).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > bound * 0.5));
    }
}
