//! The fusion network forward pass, expressed as a differentiable graph.
//!
//! Topology per forward:
//! 1. Three parallel conv stems extract per-branch features at every scale.
//! 2. Exposure-guided channel gates modulate them: the reference branch
//!    from its own pooled statistics, the low/high branches from pooled
//!    statistics joined with an embedded exposure offset.
//! 3. Patch-token cross-attention queries the reference branch against
//!    each non-reference branch at every scale; the coarse-scale attention
//!    output additionally guides the fine scale via pixel shuffle.
//! 4. A spatial gate blends the attended features, and the raw reference
//!    features are carried alongside unchanged.
//! 5. A three-level restoration pyramid refines wavelet subbands with
//!    residual blocks and decodes a sigmoid-bounded image in the
//!    compressed display domain; inference expands it back to linear
//!    radiance. Predicting the compressed image keeps the head's
//!    gradients even across the intensity range, where a linear-domain
//!    head would starve dark regions (the compressor's slope there is
//!    two orders of magnitude above its highlight slope).

use std::collections::BTreeMap;

use crate::model::config::{AttentionKind, EafnetConfig};
use crate::model::init::{init_params, param_specs, ALL_BRANCHES};
use crate::model::loss::attach_loss;
use crate::model::ModelError;
use crate::radiometry::{
    build_input_stack, mu_expand, HdrImage, ImageBuf, NetworkInputStack, BRANCH_CHANNELS,
};
use crate::capture::FusionGroup;
use crate::scalar::Scalar;
use crate::seed::derive_rng;
use crate::tensor::gradcheck::GradCheckCase;
use crate::tensor::{Array, Graph, ParamStore, TensorError, TensorId};

pub struct Eafnet {
    cfg: EafnetConfig,
}

/// Observable intermediates of one forward pass, for invariant checks and
/// diagnostics: every attention matrix (post-softmax), the fused feature
/// map per branch, and the untouched reference features they must carry.
pub struct ForwardTrace {
    pub attention: Vec<(String, TensorId)>,
    pub fused: Vec<(String, TensorId)>,
    pub mid_features: TensorId,
}

pub struct Forward {
    pub output: TensorId,
    pub trace: ForwardTrace,
}

/// Bottom/right zero padding up to (hp, wp).
fn pad_chw<T: Scalar>(a: &Array<T>, hp: usize, wp: usize) -> Array<T> {
    let (c, h, w) = a.dims3();
    if h == hp && w == wp {
        return a.clone();
    }
    let mut out = Array::zeros(&[c, hp, wp]);
    for ci in 0..c {
        for y in 0..h {
            let src = (ci * h + y) * w;
            let dst = (ci * hp + y) * wp;
            out.data_mut()[dst..dst + w].copy_from_slice(&a.data()[src..src + w]);
        }
    }
    out
}

impl Eafnet {
    pub fn new(cfg: EafnetConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Eafnet { cfg })
    }

    pub fn config(&self) -> &EafnetConfig {
        &self.cfg
    }

    /// Registers every stored parameter on the graph. Trainable binding
    /// tracks gradients; inference binding skips them.
    pub fn bind_params<T: Scalar>(
        &self,
        g: &Graph<T>,
        store: &ParamStore<T>,
        trainable: bool,
    ) -> Result<BTreeMap<String, TensorId>, ModelError> {
        self.validate_store(store)?;
        let mut map = BTreeMap::new();
        for (name, param) in store.iter() {
            let id = if trainable {
                g.param(param.value.clone())?
            } else {
                g.input(param.value.clone())?
            };
            map.insert(name.clone(), id);
        }
        Ok(map)
    }

    /// Checks a parameter store against this configuration, reporting the
    /// first offending tensor by name.
    pub fn validate_store<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(), ModelError> {
        let specs = param_specs(&self.cfg);
        for (name, shape) in &specs {
            match store.value(name) {
                None => return Err(ModelError::MissingParam(name.clone())),
                Some(v) if v.shape() != shape.as_slice() => {
                    return Err(ModelError::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        got: v.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        if store.len() != specs.len() {
            let known: std::collections::BTreeSet<&str> =
                specs.iter().map(|(n, _)| n.as_str()).collect();
            let extra = store
                .names()
                .find(|n| !known.contains(n.as_str()))
                .expect("length mismatch implies an unknown name");
            return Err(ModelError::UnexpectedParam(extra.clone()));
        }
        Ok(())
    }

    /// Builds the forward pass on `g` and returns the output radiance map
    /// (3 channels, input-sized, sigmoid-bounded) plus the trace.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &Graph<T>,
        params: &BTreeMap<String, TensorId>,
        stack: &NetworkInputStack<T>,
    ) -> Result<Forward, ModelError> {
        let cfg = &self.cfg;
        let c = cfg.base_channels;
        let n = cfg.scales;
        let patch = cfg.patch_size;
        let d = cfg.token_dim();

        let (sc, h0, w0) = stack.branches[0].dims3();
        if sc != BRANCH_CHANNELS {
            return Err(ModelError::Config(format!(
                "input stack must have {BRANCH_CHANNELS} channels per branch, got {sc}"
            )));
        }
        for b in &stack.branches {
            if b.dims3() != (sc, h0, w0) {
                return Err(ModelError::Config("branch shapes differ in input stack".into()));
            }
        }
        let hp = cfg.padded_extent(h0);
        let wp = cfg.padded_extent(w0);

        let p = |name: &str| -> Result<TensorId, ModelError> {
            params.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.into()))
        };
        let conv = |x, w: &str, b: &str, stride| -> Result<TensorId, ModelError> {
            Ok(g.conv2d(x, p(w)?, Some(p(b)?), stride, 1)?)
        };

        // Branch stems: scale 1 reads the input stack, deeper scales halve.
        let mut raw: Vec<Vec<TensorId>> = Vec::with_capacity(3);
        for (i, branch) in ALL_BRANCHES.iter().enumerate() {
            let mut cur = g.input(pad_chw(&stack.branches[i], hp, wp))?;
            let mut feats = Vec::with_capacity(n);
            for s in 1..=n {
                let stride = if s == 1 { 1 } else { 2 };
                cur = conv(
                    cur,
                    &format!("extract/{branch}/s{s}/conv.w"),
                    &format!("extract/{branch}/s{s}/conv.b"),
                    stride,
                )?;
                feats.push(cur);
            }
            raw.push(feats);
        }
        let raw_mid = raw[1].clone();

        // Exposure-guided channel gates.
        let fc = |w: &str, x, b: &str| -> Result<TensorId, ModelError> {
            Ok(g.fully_connected(p(w)?, x, Some(p(b)?))?)
        };
        let gate_ref = |x| -> Result<TensorId, ModelError> {
            let pooled = g.global_avg_pool(x)?;
            let hidden = g.relu(fc("efsm/fsb/fc1.w", pooled, "efsm/fsb/fc1.b")?)?;
            let v = g.sigmoid(fc("efsm/fsb/fc2.w", hidden, "efsm/fsb/fc2.b")?)?;
            Ok(g.scale_channels(x, v)?)
        };
        let gate_nonref = |x, e_id| -> Result<TensorId, ModelError> {
            let pooled = g.global_avg_pool(x)?;
            let hidden = g.relu(fc("efsm/efsb/fc1.w", pooled, "efsm/efsb/fc1.b")?)?;
            let v = g.sigmoid(fc("efsm/efsb/fc2.w", hidden, "efsm/efsb/fc2.b")?)?;
            let v_t = fc("efsm/efsb/fc_e.w", e_id, "efsm/efsb/fc_e.b")?;
            let joined = g.concat0(&[v, v_t])?;
            let u = g.sigmoid(fc("efsm/efsb/fc_u.w", joined, "efsm/efsb/fc_u.b")?)?;
            Ok(g.scale_channels(x, u)?)
        };

        let mut modulated = raw.clone();
        if cfg.use_efsm {
            let e_ids = [
                g.input(Array::from_vec(vec![1], vec![T::cast(stack.e_low)]))?,
                g.input(Array::from_vec(vec![1], vec![T::cast(stack.e_high)]))?,
            ];
            for s in 0..n {
                modulated[1][s] = gate_ref(raw_mid[s])?;
            }
            for (bi, e_id) in [(0usize, e_ids[0]), (2usize, e_ids[1])] {
                for s in 0..n {
                    modulated[bi][s] = gate_nonref(raw[bi][s], e_id)?;
                }
            }
        }

        // Cross-attention per non-reference branch and scale.
        let mut trace = ForwardTrace {
            attention: Vec::new(),
            fused: Vec::new(),
            mid_features: raw_mid[0],
        };
        let inv_sqrt_d = T::cast(1.0 / (d as f64).sqrt());
        let mut attended: BTreeMap<(usize, usize), TensorId> = BTreeMap::new();
        for (bi, branch) in [(0usize, "low"), (2usize, "high")] {
            for s in 1..=n {
                let hs = hp >> (s - 1);
                let ws = wp >> (s - 1);
                let q_tokens = g.unfold(modulated[1][s - 1], patch, patch)?;
                let k_tokens = g.unfold(modulated[bi][s - 1], patch, patch)?;
                let q = g.matmul(q_tokens, p(&format!("aca/{branch}/s{s}/wq"))?)?;
                let k = g.matmul(k_tokens, p(&format!("aca/{branch}/s{s}/wk"))?)?;
                let v = g.matmul(k_tokens, p(&format!("aca/{branch}/s{s}/wv"))?)?;
                let query_side = match cfg.attention {
                    AttentionKind::Asymmetric => g.add(q, k)?,
                    AttentionKind::Plain => q,
                };
                let logits = g.scale(g.matmul(query_side, g.transpose(k)?)?, inv_sqrt_d)?;
                let a = g.softmax_rows(logits)?;
                trace.attention.push((format!("{branch}/s{s}"), a));
                let folded = g.fold(g.matmul(a, v)?, c, hs, ws, patch, patch)?;
                attended.insert((bi, s), folded);
            }
        }

        // Coarse attention guides the fine scale through pixel shuffle.
        let mut guidance: BTreeMap<usize, TensorId> = BTreeMap::new();
        if n >= 2 {
            for (bi, branch) in [(0usize, "low"), (2usize, "high")] {
                let up = g.pixel_shuffle_up(attended[&(bi, 2)], 2)?;
                let cat = g.concat0(&[raw[bi][0], up])?;
                guidance.insert(
                    bi,
                    conv(cat, &format!("guide/{branch}/conv.w"), &format!("guide/{branch}/conv.b"), 1)?,
                );
            }
        }

        // Merge scales, gate spatially, carry the raw reference features.
        let mut fused: BTreeMap<usize, TensorId> = BTreeMap::new();
        for (bi, branch) in [(0usize, "low"), (2usize, "high")] {
            let mut parts = vec![attended[&(bi, 1)]];
            for s in 2..=n {
                let mut up = attended[&(bi, s)];
                for _ in 1..s {
                    up = g.bilinear_upsample(up, 2)?;
                }
                parts.push(up);
            }
            if let Some(&guid) = guidance.get(&bi) {
                parts.push(guid);
            }
            let merged = g.concat0(&parts)?;
            let f_tilde =
                conv(merged, &format!("fuse/{branch}/merge.w"), &format!("fuse/{branch}/merge.b"), 1)?;
            let joint = g.concat0(&[modulated[1][0], f_tilde])?;
            let a1 = g.relu(conv(
                joint,
                &format!("fuse/{branch}/att1.w"),
                &format!("fuse/{branch}/att1.b"),
                1,
            )?)?;
            let gate = g.sigmoid(conv(
                a1,
                &format!("fuse/{branch}/att2.w"),
                &format!("fuse/{branch}/att2.b"),
                1,
            )?)?;
            let out = g.concat0(&[g.mul(gate, f_tilde)?, raw_mid[0]])?;
            trace.fused.push((branch.to_string(), out));
            fused.insert(bi, out);
        }

        // Restoration pyramid over wavelet subbands.
        let x = g.concat0(&[fused[&0], fused[&2]])?;
        let f1 = conv(x, "restore/enc1.w", "restore/enc1.b", 1)?;
        let f2 = conv(f1, "restore/enc2.w", "restore/enc2.b", 2)?;
        let f4 = conv(f2, "restore/enc4.w", "restore/enc4.b", 2)?;

        let res_block = |x, prefix: &str| -> Result<TensorId, ModelError> {
            let h = g.relu(conv(x, &format!("{prefix}/c0.w"), &format!("{prefix}/c0.b"), 1)?)?;
            Ok(g.add(x, conv(h, &format!("{prefix}/c1.w"), &format!("{prefix}/c1.b"), 1)?)?)
        };
        let band_chain = |x, level: usize, band: &str, blocks: usize| -> Result<TensorId, ModelError> {
            let mut cur = x;
            for blk in 0..blocks {
                cur = res_block(cur, &format!("restore/lbf{level}/{band}/b{blk}"))?;
            }
            Ok(cur)
        };
        let lbf = |x, level: usize, blocks: usize| -> Result<TensorId, ModelError> {
            if cfg.use_dwt {
                let bands = g.haar_dwt(x)?;
                let names = ["ll", "lh", "hl", "hh"];
                let mut outs = [bands[0]; 4];
                for (i, (band, name)) in bands.into_iter().zip(names).enumerate() {
                    outs[i] = band_chain(band, level, name, blocks)?;
                }
                Ok(g.haar_iwt(outs)?)
            } else {
                band_chain(x, level, "ll", blocks)
            }
        };
        let r1 = lbf(f1, 1, 2)?;
        let r2 = lbf(f2, 2, 1)?;
        let r4 = if cfg.use_dwt {
            let bands = g.haar_dwt(f4)?;
            let cat = g.concat0(&bands)?;
            let mixed = conv(cat, "restore/low4/conv.w", "restore/low4/conv.b", 1)?;
            let split = [
                g.slice_channels(mixed, 0, c)?,
                g.slice_channels(mixed, c, c)?,
                g.slice_channels(mixed, 2 * c, c)?,
                g.slice_channels(mixed, 3 * c, c)?,
            ];
            g.haar_iwt(split)?
        } else {
            conv(f4, "restore/low4/conv.w", "restore/low4/conv.b", 1)?
        };
        let d2 = g.add(g.bilinear_upsample(r4, 2)?, r2)?;
        let d1 = g.add(g.bilinear_upsample(d2, 2)?, r1)?;
        let full = g.sigmoid(conv(d1, "restore/out.w", "restore/out.b", 1)?)?;
        let output = if (hp, wp) == (h0, w0) { full } else { g.crop2d(full, h0, w0)? };
        Ok(Forward { output, trace })
    }

    /// Reconstructs normalized radiance for one exposure triplet. The
    /// head emits the compressed-domain image; expanding it back to
    /// linear radiance happens here.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        group: &FusionGroup<T>,
        white_point: f64,
    ) -> Result<HdrImage<T>, ModelError> {
        let stack = build_input_stack(
            group,
            self.cfg.alignment(),
            white_point,
            self.cfg.exposure_scale,
        )?;
        let g = Graph::new();
        let params = self.bind_params(&g, store, false)?;
        let fwd = self.forward_graph(&g, &params, &stack)?;
        let mu = self.cfg.mu;
        let arr = g.value(fwd.output);
        let buf = ImageBuf::from_array(&arr)?.map(|v| T::cast(mu_expand(v.as_f64(), mu)));
        Ok(HdrImage::new(buf)?)
    }
}

/// End-to-end gradient-check case: every parameter of a small network,
/// differentiated through the full forward pass and loss on a synthetic
/// input stack.
pub fn end_to_end_case(
    cfg: &EafnetConfig,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<GradCheckCase<f64>, ModelError> {
    let net = Eafnet::new(cfg.clone())?;
    let store = init_params::<f64>(cfg, seed)?;
    let specs = param_specs(cfg);
    let inputs: Vec<Array<f64>> =
        specs.iter().map(|(n, _)| store.value(n).expect("spec-listed").clone()).collect();

    let mut rng = derive_rng(seed, "e2e/stack");
    let mut draw = |shape: &[usize]| Array::<f64>::uniform(shape, 0.05, 0.95, &mut rng);
    let branches = [
        draw(&[BRANCH_CHANNELS, height, width]),
        draw(&[BRANCH_CHANNELS, height, width]),
        draw(&[BRANCH_CHANNELS, height, width]),
    ];
    let target = draw(&[3, height, width]);
    let cfg = cfg.clone();

    Ok(GradCheckCase {
        name: "end_to_end_loss".into(),
        inputs,
        eps: 1e-5,
        tol: 1e-4,
        build: Box::new(move |g, ids| {
            let to_tensor = |e: ModelError| TensorError::Invalid {
                op: "end_to_end",
                why: e.to_string(),
            };
            let params: BTreeMap<String, TensorId> = specs
                .iter()
                .zip(ids)
                .map(|((name, _), id)| (name.clone(), *id))
                .collect();
            let stack = NetworkInputStack {
                branches: branches.clone(),
                e_low: -0.2,
                e_high: 0.2,
            };
            let fwd = net.forward_graph(g, &params, &stack).map_err(to_tensor)?;
            let target_id = g.input(target.clone())?;
            let loss = attach_loss(g, fwd.output, target_id, &cfg).map_err(to_tensor)?;
            Ok(loss.total)
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::dataset::{simulate_dataset, CaptureParams, DatasetKind};
    use crate::scene::Scene;

    fn tiny_net() -> Eafnet {
        Eafnet::new(EafnetConfig::tiny()).unwrap()
    }

    fn synthetic_stack(h: usize, w: usize, seed: u64) -> NetworkInputStack<f32> {
        let mut rng = derive_rng(seed, "stack");
        let mut draw = || Array::<f32>::uniform(&[BRANCH_CHANNELS, h, w], 0.0, 1.0, &mut rng);
        NetworkInputStack { branches: [draw(), draw(), draw()], e_low: -0.2, e_high: 0.2 }
    }

    fn run_forward(net: &Eafnet, stack: &NetworkInputStack<f32>, seed: u64) -> (Graph<f32>, Forward) {
        let store = init_params::<f32>(net.config(), seed).unwrap();
        let g = Graph::new();
        let params = net.bind_params(&g, &store, false).unwrap();
        let fwd = net.forward_graph(&g, &params, stack).unwrap();
        (g, fwd)
    }

    #[test]
    fn forward_produces_bounded_rgb_at_input_size() {
        let net = tiny_net();
        let stack = synthetic_stack(16, 16, 1);
        let (g, fwd) = run_forward(&net, &stack, 1);
        let out = g.value(fwd.output);
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert!(out.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn odd_inputs_are_padded_then_cropped_back() {
        let net = tiny_net();
        let stack = synthetic_stack(20, 13, 2);
        let (g, fwd) = run_forward(&net, &stack, 2);
        assert_eq!(g.value(fwd.output).shape(), &[3, 20, 13]);
    }

    #[test]
    fn attention_covers_both_branches_and_all_scales_with_unit_rows() {
        let net = tiny_net();
        let stack = synthetic_stack(16, 16, 3);
        let (g, fwd) = run_forward(&net, &stack, 3);
        let labels: Vec<&str> = fwd.trace.attention.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, vec!["low/s1", "low/s2", "high/s1", "high/s2"]);
        for (label, id) in &fwd.trace.attention {
            let a = g.value(*id);
            let (rows, cols) = a.dims2();
            for r in 0..rows {
                let sum: f32 = a.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "{label} row {r} sums to {sum}");
            }
        }
    }

    #[test]
    fn fused_features_carry_raw_reference_features_bitwise() {
        let net = tiny_net();
        let c = net.config().base_channels;
        let stack = synthetic_stack(16, 16, 4);
        let (g, fwd) = run_forward(&net, &stack, 4);
        let mid = g.value(fwd.trace.mid_features);
        for (branch, fused) in &fwd.trace.fused {
            let tail = g.value(g.slice_channels(*fused, c, c).unwrap());
            assert_eq!(tail.data(), mid.data(), "branch {branch} must carry f_m unchanged");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let net = tiny_net();
        let stack = synthetic_stack(16, 16, 5);
        let (g1, f1) = run_forward(&net, &stack, 5);
        let (g2, f2) = run_forward(&net, &stack, 5);
        assert_eq!(g1.value(f1.output).data(), g2.value(f2.output).data());
    }

    #[test]
    fn ablation_variants_and_single_scale_forward() {
        for cfg in [
            EafnetConfig { use_efsm: false, ..EafnetConfig::tiny() },
            EafnetConfig { use_dwt: false, ..EafnetConfig::tiny() },
            EafnetConfig { attention: AttentionKind::Plain, ..EafnetConfig::tiny() },
            EafnetConfig { scales: 1, ..EafnetConfig::tiny() },
        ] {
            let net = Eafnet::new(cfg).unwrap();
            let stack = synthetic_stack(16, 16, 6);
            let (g, fwd) = run_forward(&net, &stack, 6);
            assert_eq!(g.value(fwd.output).shape(), &[3, 16, 16]);
        }
    }

    #[test]
    fn store_validation_names_the_offender() {
        let net = tiny_net();
        let mut store = init_params::<f32>(net.config(), 0).unwrap();
        net.validate_store(&store).unwrap();

        store.register("rogue/extra.w", Array::zeros(&[1])).unwrap();
        match net.validate_store(&store) {
            Err(ModelError::UnexpectedParam(name)) => assert_eq!(name, "rogue/extra.w"),
            other => panic!("expected unexpected-param error, got {other:?}"),
        }

        let wrong_cfg = EafnetConfig { base_channels: 8, ..EafnetConfig::tiny() };
        let wrong = init_params::<f32>(&wrong_cfg, 0).unwrap();
        match net.validate_store(&wrong) {
            Err(ModelError::ShapeMismatch { name, .. }) => {
                assert_eq!(name, "extract/low/s1/conv.w")
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn infer_reconstructs_group_sized_radiance() {
        let scene = Scene::default_dynamic(0);
        let params = CaptureParams { duration_s: 1.0, ..CaptureParams::default() };
        let ds = simulate_dataset::<f32>(&scene, DatasetKind::Dcs, &params, 0).unwrap();
        let group = &ds.fusion_groups().unwrap()[0];
        let net = tiny_net();
        let store = init_params::<f32>(net.config(), 9).unwrap();
        let out = net.infer(&store, group, ds.white_point).unwrap();
        assert_eq!(out.height(), scene.height);
        assert_eq!(out.width(), scene.width);
    }
}
