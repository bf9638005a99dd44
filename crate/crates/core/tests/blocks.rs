use gcrpnet::gat::Connectivity;
use gcrpnet::loss::LossWeights;
use gcrpnet::model::{Model, ModelConfig};
use gcrpnet::nn::{ChannelAttention, Ccs, Ctx, Init, Mcaem, Msff, ParamStore, Rgca, SpatialAttention, VssBlock, VssConfig};
use gcrpnet::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn build<B>(seed: u64, f: impl FnOnce(&mut Init<'_, f64>) -> Result<B>) -> (B, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = f(&mut Init::new(&mut store, &mut rng)).unwrap();
    (b, store)
}

fn zero_matching(store: &mut ParamStore<f64>, pattern: &str) -> usize {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains(pattern)).collect();
    for &id in &ids {
        let z = Tensor::zeros(store.get(id).shape());
        *store.get_mut(id) = z;
    }
    ids.len()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn channel_attention_with_zero_weights_is_one_half() {
    let (ca, mut store) = build(1, |i| ChannelAttention::new(i, "ca", 8));
    zero_matching(&mut store, "ca.");
    let mut cx = Ctx::new(&store, false);
    let x = cx.input(randn(&[2, 8, 5, 5], 2));
    let w = ca.weights(&mut cx, x).unwrap();
    assert_eq!(cx.g.shape(w), &[2, 8, 1, 1]);
    assert!(cx.g.value(w).data().iter().all(|&v| v == 0.5));
}

#[test]
fn spatial_attention_of_constant_map_is_uniform_inside() {
    let (sa, store) = build(3, |i| SpatialAttention::new(i, "sa"));
    let mut cx = Ctx::new(&store, false);
    let x = cx.input(Tensor::full(&[1, 4, 9, 9], 0.7));
    let m = sa.map(&mut cx, x).unwrap();
    let v = cx.g.value(m);
    // away from the zero padding every window sees the same values
    let c = v.at(&[0, 0, 4, 4]);
    assert!(v.data().iter().all(|&p| p > 0.0 && p < 1.0));
    assert_eq!(v.at(&[0, 0, 3, 3]), c);
    assert_eq!(v.at(&[0, 0, 5, 5]), c);
}

#[test]
fn ccs_with_neutral_attention_matches_bypass() {
    // Huge positive biases saturate both attention sigmoids at 1.
    let (ccs, mut store) = build(4, |i| Ccs::new(i, "ccs", 4));
    zero_matching(&mut store, "ccs.ca.");
    zero_matching(&mut store, "ccs.sa.");
    for name in ["ccs.ca.fc2.bias", "ccs.sa.conv.bias"] {
        let id = store.id(name).unwrap();
        let t = Tensor::full(store.get(id).shape(), 60.0);
        *store.get_mut(id) = t;
    }
    let mut cx = Ctx::new(&store, false);
    let x = cx.input(randn(&[1, 4, 6, 6], 5));
    let a = ccs.forward(&mut cx, x).unwrap();
    let b = ccs.forward_without_attention(&mut cx, x).unwrap();
    assert!(cx.g.value(a).max_abs_diff(cx.g.value(b)) < 1e-12);
}

#[test]
fn mcaem_with_zero_fusion_is_identity() {
    let (m, mut store) = build(6, |i| Mcaem::new(i, "mcaem", 4));
    assert_eq!(zero_matching(&mut store, "mcaem.fuse."), 2);
    let mut cx = Ctx::new(&store, false);
    let xt = randn(&[1, 4, 7, 7], 7);
    let x = cx.input(xt.clone());
    let y = m.forward(&mut cx, x).unwrap();
    assert_eq!(cx.g.value(y), &xt);
}

#[test]
fn msff_shape_and_isolation() {
    let widths = [2, 4, 6, 8];
    let (m, mut store) = build(8, |i| Msff::new(i, "msff", 2, &widths));
    let feats: Vec<Tensor<f64>> = (0..4).map(|i| randn(&[1, widths[i], 16 >> i, 16 >> i], 9 + i as u64)).collect();
    let run = |store: &ParamStore<f64>, feats: &[Tensor<f64>]| {
        let mut cx = Ctx::new(store, false);
        let vars: Vec<_> = feats.iter().map(|t| cx.input(t.clone())).collect();
        let y = m.forward(&mut cx, &vars).unwrap();
        cx.g.value(y).clone()
    };
    let y = run(&store, &feats);
    assert_eq!(y.shape(), &[1, 6, 4, 4]);
    // with the fusion weights of every other stage zeroed, only stage 0 matters
    let id = store.id("msff.fuse.weight").unwrap();
    let w = store.get_mut(id);
    for o in 0..6 {
        for c in 2..20 {
            w.data_mut()[o * 20 + c] = 0.0;
        }
    }
    let base = run(&store, &feats);
    let mut changed = feats.clone();
    changed[3] = randn(&[1, 8, 2, 2], 99);
    changed[1] = randn(&[1, 4, 8, 8], 98);
    assert_eq!(run(&store, &changed), base);
}

#[test]
fn rgca_node_grid_and_residual() {
    let (r, mut store) = build(10, |i| Rgca::new(i, "rgca", 4, 2, Connectivity::Eight));
    assert_eq!(r.node_grid(12, 8).unwrap(), (6, 4));
    assert!(r.node_grid(12, 7).is_err());
    let skip = randn(&[1, 4, 12, 8], 11);
    let fc = randn(&[1, 4, 12, 8], 12);
    let mut cx = Ctx::new(&store, false);
    let (f, s) = (cx.input(fc.clone()), cx.input(skip.clone()));
    let y = r.forward(&mut cx, f, s).unwrap();
    assert_ne!(cx.g.value(y), &skip);
    zero_matching(&mut store, "rgca.up.");
    let mut cx = Ctx::new(&store, false);
    let (f, s) = (cx.input(fc), cx.input(skip.clone()));
    let y = r.forward(&mut cx, f, s).unwrap();
    assert_eq!(cx.g.value(y), &skip);
}

#[test]
fn vss_with_zero_output_projection_is_identity() {
    for (grid, mcaem) in [(1, false), (2, false), (4, true)] {
        let cfg = VssConfig { expand: 2, d_state: 3, ..Default::default() };
        let (b, mut store) = build(13, |i| VssBlock::new(i, "vss", 4, &cfg, grid, mcaem));
        zero_matching(&mut store, "vss.out_proj.");
        if mcaem {
            zero_matching(&mut store, "mcaem.fuse.");
        }
        let xt = randn(&[2, 4, 8, 8], 14);
        let mut cx = Ctx::new(&store, false);
        let x = cx.input(xt.clone());
        let y = b.forward(&mut cx, x).unwrap();
        assert_eq!(cx.g.value(y), &xt);
    }
}

#[test]
fn vss_rejects_indivisible_grid() {
    let cfg = VssConfig::default();
    let (b, store) = build(15, |i| VssBlock::new(i, "vss", 4, &cfg, 4, false));
    let mut cx = Ctx::new(&store, false);
    let x = cx.input(randn(&[1, 4, 6, 6], 16));
    assert!(matches!(b.forward(&mut cx, x), Err(gcrpnet::Error::Divisibility { grid: 4, .. })));
}

#[test]
fn zero_heads_emit_constant_sigmoid_bias() {
    let cfg = ModelConfig::tiny();
    let (model, mut store) = Model::build::<f64>(&cfg).unwrap();
    for s in 1..=4 {
        let w = store.id(&format!("decoder.stage{s}.head.weight")).unwrap();
        let z = Tensor::zeros(store.get(w).shape());
        *store.get_mut(w) = z;
        let b = store.id(&format!("decoder.stage{s}.head.bias")).unwrap();
        *store.get_mut(b) = Tensor::full(&[1], 0.3 * s as f64 - 0.5);
    }
    let mut cx = Ctx::new(&store, false);
    let x = cx.input(randn(&[2, 3, 32, 32], 17));
    let out = model.forward(&mut cx, x).unwrap();
    for (s, &m) in out.maps.iter().enumerate() {
        let expect = 1.0 / (1.0 + (-(0.3 * (s + 1) as f64 - 0.5)).exp());
        let v = cx.g.value(m);
        assert_eq!(v.shape(), &[2, 1, 32, 32]);
        assert!(v.data().iter().all(|&p| (p - expect).abs() < 1e-15));
    }
}

fn ablations() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::tiny();
    vec![
        ("full", base.clone()),
        ("no_dshgam", ModelConfig { use_dshgam: false, ..base.clone() }),
        ("no_mcaem", ModelConfig { use_mcaem: false, ..base.clone() }),
        ("no_less2d", ModelConfig { use_less2d: false, ..base }),
    ]
}

#[test]
fn ablation_wiring() {
    for (name, cfg) in ablations() {
        let (model, store) = Model::build::<f32>(&cfg).unwrap();
        let has = |p: &str| store.entries().iter().any(|e| e.name.contains(p));
        assert_eq!(has("dshgam."), cfg.use_dshgam, "{name}");
        assert_eq!(has(".mcaem."), cfg.use_mcaem, "{name}");
        let grids: Vec<usize> = model.decoder.iter().map(|s| s[0].grid).collect();
        if cfg.use_less2d {
            assert_eq!(grids, vec![8, 4, 2, 1], "{name}");
        } else {
            assert_eq!(grids, vec![1; 4], "{name}");
        }
        assert!(model.encoder.iter().flatten().all(|b| b.grid == 1 && b.mcaem.is_none()));
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for (name, cfg) in ablations() {
        let (model, store) = Model::build::<f64>(&cfg).unwrap();
        let mut cx = Ctx::new(&store, true);
        let x = cx.input(randn(&[2, 3, 32, 32], 18));
        let mask = randn(&[2, 1, 32, 32], 19).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let g = cx.input(mask);
        let out = model.forward(&mut cx, x).unwrap();
        let loss = cx.g.total_loss(&out.maps, g, &LossWeights::default()).unwrap();
        cx.g.backward(loss).unwrap();
        let grads = cx.grads();
        let dead: Vec<&str> = store
            .ids()
            .zip(&grads)
            .filter(|(_, g)| g.as_ref().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)))
            .map(|(id, _)| store.name(id))
            .collect();
        assert!(dead.is_empty(), "{name}: parameters without gradient: {dead:?}");
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let (model, store) = Model::build::<f32>(&cfg).unwrap();
    let x = randn(&[1, 3, 32, 32], 20).cast::<f32>();
    let a = model.predict(&store, &x).unwrap();
    let b = model.predict(&store, &x).unwrap();
    assert_eq!(a, b);
    let (_, again) = Model::build::<f32>(&cfg).unwrap();
    assert_eq!(again, store);
}
