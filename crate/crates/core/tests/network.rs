use remake_core::grid::Grid;
use remake_core::nn::gradcheck::{check_gradients, random_inputs};
use remake_core::nn::{FeatureSet, ModelConfig, NetInputs, RemakeNet, Variant};
use remake_core::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        embed_dims: vec![8, 16],
        depths: vec![1, 1],
        num_heads: vec![2, 2],
        window: 2,
        decoder_blocks: 1,
        decoder_hidden: 16,
        head_channels: 4,
        ..ModelConfig::default()
    }
}

/// Parameter count written out layer by layer from the config.
fn expected_param_count(c: &ModelConfig) -> usize {
    let p2 = c.patch_size * c.patch_size;
    let lin = |i: usize, o: usize| i * o + o;
    let table = (2 * c.window - 1).pow(2);
    let encoder = |in_ch: usize| {
        let mut n = lin(p2 * in_ch, c.embed_dims[0]) + 2 * c.embed_dims[0];
        for s in 0..c.stages {
            let d = c.embed_dims[s];
            let h = c.mlp_ratio * d;
            let block = 2 * d + lin(d, 3 * d) + table * c.num_heads[s] + lin(d, d) + 2 * d + lin(d, h) + lin(h, d);
            n += c.depths[s] * block;
            if s + 1 < c.stages {
                n += 2 * 4 * d + 4 * d * c.embed_dims[s + 1];
            }
        }
        n
    };
    let last = c.last_dim();
    let hid = c.decoder_hidden;
    let depth = lin(p2, c.embed_dims[0]) + lin(c.embed_dims[0], last);
    let mut decoder = lin(3 * last, hid) + c.decoder_blocks * (2 * hid + 2 * lin(hid, hid));
    for s in 0..c.stages - 1 {
        decoder += lin(2 * c.embed_dims[s], hid);
    }
    decoder += lin(hid, p2 * c.head_channels) + lin(c.head_channels, 1);
    encoder(4) + encoder(1) + depth + decoder
}

#[test]
fn parameter_count_matches_layer_arithmetic() {
    for c in [ModelConfig::default(), tiny()] {
        let params = RemakeNet::new(&c).unwrap().init_params(0);
        assert_eq!(params.count(), expected_param_count(&c));
    }
}

#[test]
fn init_is_deterministic_and_named() {
    let net = RemakeNet::new(&ModelConfig::default()).unwrap();
    let a = net.init_params(3);
    assert_eq!(a, net.init_params(3));
    assert_ne!(a, net.init_params(4));
    assert!(a.get("mask_encoder.stage0.block0.attn.qkv.weight").is_some());
    assert!(a.get("rel_encoder.stage1.block1.mlp.fc2.bias").is_some());
    assert!(a.get("decoder.head.weight").is_some());
    let mut names: Vec<&str> = a.tensors.iter().map(|t| t.name.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), a.tensors.len());
}

#[test]
fn invalid_configs_are_rejected() {
    let too_wide = ModelConfig {
        window: 16,
        ..ModelConfig::default()
    };
    let err = RemakeNet::new(&too_wide).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("window"));
    let bad_heads = ModelConfig {
        num_heads: vec![3, 4],
        ..ModelConfig::default()
    };
    assert!(RemakeNet::new(&bad_heads).is_err());
    let bad_size = ModelConfig {
        height: 30,
        ..ModelConfig::default()
    };
    assert!(RemakeNet::new(&bad_size).is_err());
}

#[test]
fn stage_shapes_follow_schedule() {
    let c = ModelConfig::default();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(1);
    let (rgb, mask, rel, depth) = random_inputs(&c, 2);
    let fm = net.encode_mask_branch(&rgb, &mask, &params).unwrap();
    assert_eq!(
        fm.iter().map(|f| f.shape()).collect::<Vec<_>>(),
        vec![(16, 16, 32), (8, 8, 64)]
    );
    let fr = net.encode_relative_branch(&rel, &params).unwrap();
    assert_eq!(
        fr.iter().map(|f| f.shape()).collect::<Vec<_>>(),
        vec![(16, 16, 32), (8, 8, 64)]
    );
    let fd = net.encode_depth_branch(&depth, &params).unwrap();
    assert_eq!(fd.shape(), (8, 8, 64));
    let out = net
        .forward(
            &NetInputs {
                rgb: &rgb,
                mask: &mask,
                rel: &rel,
                depth: &depth,
            },
            &params,
        )
        .unwrap();
    assert_eq!(out.shape(), (32, 32));
    assert!(out.data.iter().all(|v| v.is_finite()));
}

#[test]
fn branches_compose_to_forward_exactly() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(5);
    let (rgb, mask, rel, depth) = random_inputs(&c, 6);
    let inputs = NetInputs {
        rgb: &rgb,
        mask: &mask,
        rel: &rel,
        depth: &depth,
    };
    let features = FeatureSet {
        f_mask: net.encode_mask_branch(&rgb, &mask, &params).unwrap(),
        f_rel: net.encode_relative_branch(&rel, &params).unwrap(),
        f_depth: net.encode_depth_branch(&depth, &params).unwrap(),
    };
    let (traced, out) = net.forward_features(&inputs, &params).unwrap();
    assert_eq!(traced, features);
    assert_eq!(net.fuse_and_decode(&features, &params).unwrap(), out);
    assert_eq!(net.forward(&inputs, &params).unwrap(), out);
    assert_eq!(net.forward_variant(&inputs, &params, Variant::Full).unwrap(), out);
}

#[test]
fn mask_channel_reaches_encoder_and_rel_branch_is_pure() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(7);
    let (rgb, _, rel, _) = random_inputs(&c, 8);
    let zeros = Grid::filled(16, 16, 0u8);
    let ones = Grid::filled(16, 16, 1u8);
    assert_ne!(
        net.encode_mask_branch(&rgb, &zeros, &params).unwrap(),
        net.encode_mask_branch(&rgb, &ones, &params).unwrap()
    );
    assert_eq!(
        net.encode_relative_branch(&rel, &params).unwrap(),
        net.encode_relative_branch(&rel.clone(), &params).unwrap()
    );
    let half = net.encode_relative_branch(&Grid::filled(16, 16, 0.5), &params).unwrap();
    assert!(half.iter().all(|f| f.data.iter().all(|v| v.is_finite())));
}

#[test]
fn depth_branch_extremes_are_finite() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(9);
    for value in [0.0, c.z_max] {
        let f = net.encode_depth_branch(&Grid::filled(16, 16, value), &params).unwrap();
        assert!(f.data.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn input_contracts() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(1);
    let (rgb, mask, rel, depth) = random_inputs(&c, 1);
    assert!(net
        .encode_mask_branch(&rgb, &Grid::filled(16, 16, 2u8), &params)
        .is_err());
    assert!(net.encode_relative_branch(&Grid::filled(16, 16, 1.5), &params).is_err());
    assert!(net.encode_depth_branch(&Grid::filled(16, 16, -0.1), &params).is_err());
    let small = Grid::filled(8, 8, 0.5);
    let inputs = NetInputs {
        rgb: &rgb,
        mask: &mask,
        rel: &small,
        depth: &depth,
    };
    assert!(matches!(
        net.forward(&inputs, &params),
        Err(Error::ShapeMismatch { .. })
    ));
    let _ = rel;
}

#[test]
fn zero_head_gives_zero_output_and_fusion_is_live() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let mut params = net.init_params(11);
    let (rgb, mask, rel, depth) = random_inputs(&c, 12);
    let inputs = NetInputs {
        rgb: &rgb,
        mask: &mask,
        rel: &rel,
        depth: &depth,
    };
    let (features, base) = net.forward_features(&inputs, &params).unwrap();

    // Each coarsest-stage input of the fusion changes the output.
    for pick in 0..3 {
        let mut f = features.clone();
        let grid = match pick {
            0 => f.f_mask.last_mut().unwrap(),
            1 => f.f_rel.last_mut().unwrap(),
            _ => &mut f.f_depth,
        };
        grid.data[0] += 1e-3;
        let out = net.fuse_and_decode(&f, &params).unwrap();
        let change: f64 = out.data.iter().zip(&base.data).map(|(a, b)| (a - b).abs()).sum();
        assert!(change > 0.0, "fusion input {pick} is dead");
    }

    for v in &mut params.get_mut("decoder.head.weight").unwrap().data {
        *v = 0.0;
    }
    let out = net.forward(&inputs, &params).unwrap();
    assert!(out.data.iter().all(|&v| v == 0.0));
}

#[test]
fn variant_neutrality() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(13);
    let (rgb, mask, rel, depth) = random_inputs(&c, 14);
    let (_, mask2, rel2, _) = random_inputs(&c, 15);
    let run = |m: &Grid<u8>, r: &Grid<f64>, v: Variant| {
        net.forward_variant(
            &NetInputs {
                rgb: &rgb,
                mask: m,
                rel: r,
                depth: &depth,
            },
            &params,
            v,
        )
        .unwrap()
    };
    let full = run(&mask, &rel, Variant::Full);
    assert_ne!(full, run(&mask2, &rel, Variant::Full));
    assert_eq!(run(&mask, &rel, Variant::NoMask), run(&mask2, &rel, Variant::NoMask));
    assert_eq!(run(&mask, &rel, Variant::NoRel), run(&mask, &rel2, Variant::NoRel));
    assert_eq!(run(&mask, &rel, Variant::Blank), run(&mask2, &rel2, Variant::Blank));
    let empty = Grid::filled(16, 16, 0u8);
    assert_eq!(
        run(&empty, &rel, Variant::NoTransDepth),
        run(&empty, &rel, Variant::Full)
    );
    assert_ne!(run(&mask, &rel, Variant::NoTransDepth), full);
    assert_eq!("no-trans-depth".parse::<Variant>().unwrap(), Variant::NoTransDepth);
    assert!("none".parse::<Variant>().is_err());
}

#[test]
fn degenerate_inputs_stay_finite() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(17);
    let (rgb, _, _, _) = random_inputs(&c, 18);
    let zeros = Grid::filled(16, 16, 0.0);
    let ones = Grid::filled(16, 16, 1u8);
    let half = Grid::filled(16, 16, 0.5);
    let inputs = NetInputs {
        rgb: &rgb,
        mask: &ones,
        rel: &half,
        depth: &zeros,
    };
    let (pred, loss, grads) = net
        .forward_backward(&inputs, &params, |p| Ok((p.data.iter().sum(), vec![1.0; p.len()])))
        .unwrap();
    assert!(pred.data.iter().all(|v| v.is_finite()));
    assert!(loss.is_finite());
    assert!(grads.all_finite());
}

#[test]
fn forward_and_gradients_are_reproducible() {
    let c = tiny();
    let net = RemakeNet::new(&c).unwrap();
    let params = net.init_params(19);
    let (rgb, mask, rel, depth) = random_inputs(&c, 20);
    let inputs = NetInputs {
        rgb: &rgb,
        mask: &mask,
        rel: &rel,
        depth: &depth,
    };
    let loss = |p: &remake_core::DepthMap| {
        Ok((
            p.data.iter().map(|v| v * v).sum(),
            p.data.iter().map(|v| 2.0 * v).collect(),
        ))
    };
    let a = net.forward_backward(&inputs, &params, loss).unwrap();
    let b = net.forward_backward(&inputs, &params, loss).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.2, b.2);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..3 {
        let report = check_gradients(&tiny(), seed, 4, 1e-5).unwrap();
        for g in &report {
            assert!(g.rel_error < 1e-4, "seed {seed} {}: {:.3e}", g.name, g.rel_error);
        }
    }
}
