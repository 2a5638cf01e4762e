use elnet::blurpool::BlurPoolSpec;
use elnet::model::{closed_form_param_count, param_audit, Checkpoint, ElNet, ForwardOptions, ModelConfig};
use elnet::nn::Mode;
use elnet::tensor::gradcheck::GradCheck;
use elnet::{Graph, NormVariant, PoolVariant, Tensor, Var};

fn small(k: usize) -> ModelConfig {
    ModelConfig {
        k,
        input: [128, 128],
        blur: BlurPoolSpec::uniform(3),
        ..ModelConfig::default()
    }
}

fn volume(s: usize, size: usize, seed: u64) -> Tensor<f32> {
    Tensor::seeded_uniform([s, 1, size, size], 0.0, 1.0, seed).unwrap()
}

#[test]
fn parameter_counts() {
    for (k, expected) in [(1, 13_470), (2, 53_178), (3, 119_126), (4, 211_314)] {
        assert_eq!(ElNet::new(ModelConfig::with_k(k)).unwrap().param_count(), expected);
    }
    for k in 1..=8 {
        let enumerated = ElNet::new(ModelConfig::with_k(k)).unwrap().param_count();
        assert_eq!(enumerated, 13120 * k * k + 348 * k + 2);
        assert_eq!(closed_form_param_count(k), enumerated);
    }
}

#[test]
fn per_row_subtotals() {
    for k in 1..=4 {
        let rows = param_audit(k).unwrap();
        let got: Vec<usize> = rows.iter().map(|r| r.enumerated).collect();
        let want = vec![
            196 * k,
            8 * k,
            800 * k * k + 16 * k,
            800 * k * k,
            1152 * k * k + 32 * k,
            1152 * k * k,
            2304 * k * k + 32 * k,
            2304 * k * k,
            2304 * k * k + 32 * k,
            2304 * k * k,
            32 * k + 2,
        ];
        assert_eq!(got, want);
        assert!(rows.iter().all(|r| r.ok()));
    }
}

#[test]
fn parameter_count_is_independent_of_variants() {
    for norm in [NormVariant::Layer, NormVariant::Contrast, NormVariant::Batch] {
        for pool in [PoolVariant::Blurpool, PoolVariant::Maxpool] {
            let cfg = ModelConfig { norm, pool, ..ModelConfig::with_k(2) };
            assert_eq!(ElNet::new(cfg).unwrap().param_count(), 53_178);
        }
    }
}

#[test]
fn shape_trace_at_full_resolution() {
    let net = ElNet::new(ModelConfig::with_k(1)).unwrap();
    let mut g = Graph::new();
    let opts = ForwardOptions { trace: true, ..ForwardOptions::eval() };
    let out = net.forward(&mut g, volume(2, 256, 1), &opts).unwrap();
    let trace: Vec<(&str, Vec<usize>)> = out.trace.iter().map(|(n, d)| (n.as_str(), d.clone())).collect();
    let want: Vec<(&str, Vec<usize>)> = vec![
        ("stem.conv", vec![2, 4, 128, 128]),
        ("stem.pool", vec![2, 4, 62, 62]),
        ("stage1.blocks", vec![2, 4, 62, 62]),
        ("stage1.expand", vec![2, 8, 62, 62]),
        ("stage1.pool", vec![2, 8, 29, 29]),
        ("stage2.blocks", vec![2, 8, 29, 29]),
        ("stage2.expand", vec![2, 16, 29, 29]),
        ("stage2.pool", vec![2, 16, 13, 13]),
        ("stage3.blocks", vec![2, 16, 13, 13]),
        ("stage3.expand", vec![2, 16, 13, 13]),
        ("stage3.pool", vec![2, 16, 5, 5]),
        ("stage4.blocks", vec![2, 16, 5, 5]),
        ("stage4.expand", vec![2, 16, 5, 5]),
        ("stage4.pool", vec![2, 16, 1, 1]),
        ("global_pool", vec![2, 16]),
        ("slice_pool", vec![16]),
        ("logits", vec![2]),
    ];
    assert_eq!(trace, want);
    let p = g.value(out.probs).data();
    assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
}

#[test]
fn reduced_input_trace() {
    assert_eq!(
        small(1).spatial_sizes().unwrap(),
        vec![[64, 64], [31, 31], [15, 15], [7, 7], [3, 3], [1, 1]]
    );
    let cfg = ModelConfig { pool: PoolVariant::Maxpool, ..ModelConfig::with_k(1) };
    assert_eq!(cfg.spatial_sizes().unwrap().last(), Some(&[4, 4]));
}

#[test]
fn collapsing_inputs_are_rejected() {
    let cfg = ModelConfig { input: [64, 64], ..ModelConfig::with_k(1) };
    assert!(ElNet::new(cfg).is_err());
    assert!(ElNet::new(ModelConfig::with_k(0)).is_err());
    assert!(ElNet::new(ModelConfig { depth: 0, ..ModelConfig::with_k(1) }).is_err());
    assert!(ElNet::new(ModelConfig { dropout: 1.0, ..ModelConfig::with_k(1) }).is_err());

    let net = ElNet::new(small(1)).unwrap();
    assert!(net.predict(&volume(1, 256, 0)).is_err());
    assert!(net.predict(&Tensor::zeros([1, 2, 128, 128]).unwrap()).is_err());
}

#[test]
fn single_slice_and_duplicated_slices() {
    for norm in [NormVariant::Layer, NormVariant::Contrast] {
        let net = ElNet::new(ModelConfig { norm, ..small(1) }).unwrap();
        let x = volume(3, 128, 4);
        let base = net.predict(&x).unwrap();
        let doubled = [x.data(), x.data()].concat();
        let doubled = Tensor::from_vec([6, 1, 128, 128], doubled).unwrap();
        assert_eq!(net.predict(&doubled).unwrap(), base);

        let one = Tensor::from_vec([1, 1, 128, 128], x.data()[..128 * 128].to_vec()).unwrap();
        let p = net.predict(&one).unwrap();
        assert!(p.iter().all(|v| *v > 0.0) && (p[0] + p[1] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn slice_permutation_invariance() {
    let net = ElNet::new(small(1)).unwrap();
    let x = volume(4, 128, 5);
    let plane = 128 * 128;
    let base = net.predict(&x).unwrap();
    for order in [[3, 2, 1, 0], [1, 3, 0, 2]] {
        let data: Vec<f32> = order.iter().flat_map(|&s| x.data()[s * plane..(s + 1) * plane].to_vec()).collect();
        assert_eq!(net.predict(&Tensor::from_vec([4, 1, 128, 128], data).unwrap()).unwrap(), base);
    }
}

#[test]
fn duplicating_a_slice_never_lowers_features() {
    let net = ElNet::new(small(1)).unwrap();
    let features = |v: &Tensor<f32>| {
        let mut g = Graph::new();
        let out = net.forward(&mut g, v.clone(), &ForwardOptions::eval()).unwrap();
        g.value(out.features).data().to_vec()
    };
    let x = volume(3, 128, 6);
    let base = features(&x);
    let plane = 128 * 128;
    for s in 0..3 {
        let data = [x.data(), &x.data()[s * plane..(s + 1) * plane]].concat();
        let more = features(&Tensor::from_vec([4, 1, 128, 128], data).unwrap());
        assert!(more.iter().zip(&base).all(|(a, b)| a >= b));
    }
}

#[test]
fn initialization_is_seeded() {
    let a = ElNet::new(small(1)).unwrap();
    let b = ElNet::new(small(1)).unwrap();
    let c = ElNet::new(ModelConfig { seed: 1, ..small(1) }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params(), c.params());
    let w = a.param("stem.conv.weight").unwrap();
    let bound = (6.0f32 / 49.0).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(a.param("stem.norm.gamma").unwrap().data().iter().all(|v| *v == 1.0));
    assert!(a.param("fc.bias").unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.elnt");
    let mut net = ElNet::new(ModelConfig { seed: 3, ..small(2) }).unwrap();
    // make every tensor distinctive
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        for (j, v) in p.data_mut().iter_mut().enumerate() {
            *v += (i * 7 + j) as f32 * 1e-3;
        }
    }
    let mut ck = Checkpoint::new(net.clone());
    ck.metadata.insert("note".into(), "a=b c".into());
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    for (a, b) in loaded.model.params().iter().zip(net.params()) {
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    for seed in 0..10 {
        let x = volume(2, 128, 100 + seed);
        assert_eq!(loaded.model.predict(&x).unwrap(), net.predict(&x).unwrap());
    }
}

#[test]
fn checkpoint_size_for_k4() {
    let bytes = Checkpoint::new(ElNet::new(ModelConfig::with_k(4)).unwrap()).to_bytes().unwrap();
    let kb = bytes.len() as f64 / 1000.0;
    assert!((840.0..=880.0).contains(&kb), "{kb} kB");
    // parameters dominate; running statistics and names are small
    assert!(bytes.len() > 211_314 * 4);
}

#[test]
fn batch_variant_round_trips_running_stats() {
    let cfg = ModelConfig { norm: NormVariant::Batch, ..small(1) };
    let mut net = ElNet::new(cfg).unwrap();
    let mut g = Graph::new();
    let out = net.forward(&mut g, volume(3, 128, 8), &ForwardOptions::train(1)).unwrap();
    assert_eq!(out.batch_stats.len(), out.norm_sites.len());
    let stats = out.batch_stats.clone();
    net.update_running(&stats);
    assert!(net.running_stats()[0].mean.iter().any(|m| *m != 0.0));
    let back = Checkpoint::from_bytes(&Checkpoint::new(net.clone()).to_bytes().unwrap()).unwrap();
    assert_eq!(back.model, net);
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let good = Checkpoint::new(ElNet::new(small(1)).unwrap()).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&good).is_ok());

    let mut bad = good.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("magic"));

    let mut bad = good.clone();
    bad[4] = 2;
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));

    for cut in [3, 5, 20, good.len() / 2, good.len() - 1] {
        assert!(Checkpoint::from_bytes(&good[..cut]).is_err(), "cut at {cut}");
    }
    // dropping the final tensor entirely leaves a well-formed but incomplete file
    let last_entry = 4 + 4 + 4 + 1 * 4 + 4 * 4; // "...running_var" name len + rank + dim + values at C=4
    let name_len = "stage4.block0.norm.running_var".len();
    let cut = good.len() - (last_entry - 4 + name_len);
    let err = Checkpoint::from_bytes(&good[..cut]).unwrap_err().to_string();
    assert!(err.contains("missing") || err.contains("truncated"), "{err}");
}

#[test]
fn reduced_network_gradient_check() {
    for norm in [NormVariant::Layer, NormVariant::Contrast, NormVariant::Batch] {
        let cfg = ModelConfig {
            k: 1,
            norm,
            input: [64, 64],
            depth: 2,
            seed: 2,
            ..ModelConfig::default()
        };
        let net = ElNet::new(cfg).unwrap();
        let mut inputs = vec![Tensor::<f64>::seeded_uniform([2, 1, 64, 64], 0.0, 1.0, 9).unwrap()];
        inputs.extend(net.params().iter().map(|p| p.cast::<f64>()));
        // nonzero β and bias so every path carries gradient
        for t in inputs.iter_mut().skip(1) {
            if t.dims().len() == 1 {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += 0.1 * (i as f64 + 1.0);
                }
            }
        }
        let opts = ForwardOptions { mode: Mode::Train, dropout_seed: 4, ..ForwardOptions::eval() };
        let check = GradCheck { max_coords: Some(12), ..GradCheck::default() };
        let report = check
            .run(
                |g, vars: &[Var]| Ok(net.forward_with(g, vars[0], &vars[1..], &opts)?.probs),
                &inputs,
                1e-3,
            )
            .unwrap();
        assert!(report.pass, "{norm:?} {report:?}");
        assert!(report.checked >= 100, "{report:?}");
    }
}
