use avru::net::{count_params, grad_check, ModelConfig, Network, TokenGrid, AUX_HIDDEN};

fn toy() -> ModelConfig {
    ModelConfig {
        stem_channels: vec![4],
        blocks: 1,
        segments: 2,
        expansion: 2,
        n_a: 2,
        rule_dim: 3,
        input_h: 32,
        input_w: 32,
    }
}

fn closed_form_count(c: &ModelConfig) -> usize {
    let mut total = 0;
    let mut c_in = 1;
    for &c_out in &c.stem_channels {
        total += c_out * c_in * 9 + c_out + 2 * c_out;
        c_in = c_out;
    }
    let d = c_in;
    let f = 1 << c.stem_channels.len();
    let (h, w) = (c.input_h / f * c.segments, c.input_w / f * c.segments);
    let kd = c.expansion * d;
    let block = 2 * d + (25 * d * d + d) + (h * h + h) + (w * w + w) + (d * d + d) + (3 * d * d + d) + 2 * d + (kd * d + kd) + (d * kd + d);
    total += c.blocks * block;
    total + 2 * d + (c.n_a * d + c.n_a) + (AUX_HIDDEN * d + AUX_HIDDEN) + (c.rule_dim * AUX_HIDDEN + c.rule_dim)
}

#[test]
fn parameter_count_matches_closed_form() {
    for c in [
        ModelConfig::standard(544, 416, 8, 50),
        ModelConfig::standard(448, 416, 4, 11),
        ModelConfig::compact(384, 416, 2, 7),
        toy(),
    ] {
        assert_eq!(count_params(&c).unwrap(), closed_form_count(&c), "{c:?}");
    }
    assert_eq!(count_params(&ModelConfig::standard(544, 416, 8, 50)).unwrap(), 3_696_106);
}

#[test]
fn stem_halves_four_times() {
    for (h, w, rows, cols) in [(448, 416, 28, 26), (384, 416, 24, 26), (544, 416, 34, 26)] {
        let net = Network::<f32>::new(ModelConfig::compact(h, w, 2, 11), 1).unwrap();
        let grid = net.stem_forward(&vec![0.5; h * w]).unwrap();
        assert_eq!((grid.rows, grid.cols, grid.d), (rows, cols, 32));
        assert_eq!(grid.data.len(), 32 * rows * cols);
    }
    let net = Network::<f32>::new(ModelConfig::compact(448, 416, 2, 11), 1).unwrap();
    assert!(net.stem_forward(&vec![0.5; 100]).is_err());
}

fn random_grid(net: &Network<f64>, seed: u64) -> TokenGrid<f64> {
    let (rows, cols) = net.config.grid();
    let d = net.config.d();
    let data = (0..d * rows * cols).map(|i| ((i as f64 + 0.5) * (1.7 + seed as f64)).sin() * 2.0).collect();
    TokenGrid { d, rows, cols, data }
}

#[test]
fn zeroed_mixers_make_blocks_exact_identities() {
    let mut net = Network::<f64>::new(ModelConfig::compact(64, 64, 2, 3), 9).unwrap();
    let z = random_grid(&net, 1);
    for name in ["local", "height", "width", "channel", "fuse"] {
        for part in ["weight", "bias"] {
            net.tensor_mut(&format!("block.0.{name}.{part}")).unwrap().fill(0.0);
        }
    }
    assert_eq!(net.token_mixer_forward(0, &z).data, z.data);
    assert_ne!(net.channel_mixer_forward(0, &z).data, z.data);
    net.tensor_mut("block.0.mlp2.weight").unwrap().fill(0.0);
    net.tensor_mut("block.0.mlp2.bias").unwrap().fill(0.0);
    assert_eq!(net.channel_mixer_forward(0, &z).data, z.data);
    assert_eq!(net.block_forward(0, &z).data, z.data);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let c = toy();
    assert!(count_params(&c).unwrap() <= 10_000);
    let report = grad_check(&c, 1e-6, 80, 0.7, 5).unwrap();
    assert!(report.checked >= 50, "{report:?}");
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn batched_eval_equals_single_samples() {
    let net = Network::<f32>::new(ModelConfig::compact(64, 48, 3, 5), 2).unwrap();
    let pix = 64 * 48;
    let input: Vec<f32> = (0..3 * pix).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
    let all = net.forward_eval(&input, 3).unwrap();
    for i in 0..3 {
        let one = net.forward_eval(&input[i * pix..(i + 1) * pix], 1).unwrap();
        for (a, b) in one.answer_row(0).iter().zip(all.answer_row(i)) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(one.predicted(0), all.predicted(i));
    }
}

#[test]
fn new_heads_keep_shared_rows() {
    let net = Network::<f32>::new(ModelConfig::compact(64, 64, 2, 5), 4).unwrap();
    let grown = net.with_heads(4, 5, true, 8).unwrap();
    let (old, new) = (net.tensor("head.answer.weight").unwrap(), grown.tensor("head.answer.weight").unwrap());
    assert_eq!(new.len(), 2 * old.len());
    assert_eq!(&new[..old.len()], old);
    assert_eq!(net.tensor("block.0.fuse.weight"), grown.tensor("block.0.fuse.weight"));
    assert_eq!(net.tensor("head.answer.bias").unwrap(), &grown.tensor("head.answer.bias").unwrap()[..2]);
}
