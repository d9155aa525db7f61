use proptest::prelude::*;

use super::*;
use crate::data::{generate_dataset, DatasetSpec, PIXELS};
use crate::ot::sample_directions;
use crate::rng::Rng;

fn book(rows: &[&[f32]]) -> Codebook {
    let d = rows[0].len();
    Codebook::new(Tensor::new(&[rows.len(), d], rows.concat()).unwrap()).unwrap()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

fn tiny_data(n: usize) -> Vec<PairedSample> {
    generate_dataset(&DatasetSpec {
        n_samples: n,
        seed: 5,
        ..DatasetSpec::default()
    })
    .unwrap()
}

#[test]
fn patchify_roundtrip_and_layout() {
    let img: Vec<f32> = (0..256).map(|i| i as f32).collect();
    let p = patchify(&img, 16, 4).unwrap();
    assert_eq!(&p[..4], &[0.0, 1.0, 2.0, 3.0]);
    assert_eq!(&p[4..8], &[16.0, 17.0, 18.0, 19.0]);
    // second patch starts at column 4
    assert_eq!(p[16], 4.0);
    assert_eq!(unpatchify(&p, 16, 4), img);
    assert!(patchify(&img, 16, 5).is_err());
    assert!(patchify(&img[..100], 16, 4).is_err());
}

#[test]
fn config_rejects_indivisible_side() {
    let cfg = VaeConfig {
        side: 15,
        ..VaeConfig::default()
    };
    assert!(IqVae::new(cfg, 0).is_err());
}

#[test]
fn encode_shapes_and_determinism() {
    let model = IqVae::new(VaeConfig::default(), 1).unwrap();
    let s = &tiny_data(1)[0];
    let (zx, zc) = model.encode(&s.image, &s.condition_unit()).unwrap();
    assert_eq!(zx.shape(), &[16, 16]);
    assert_eq!(zc.shape(), &[16, 16]);
    let (zx2, zc2) = model.encode(&s.image, &s.condition_unit()).unwrap();
    assert_eq!(zx, zx2);
    assert_eq!(zc, zc2);
    assert!(model.encode(&s.image[..10], &s.condition_unit()).is_err());
}

#[test]
fn zero_final_layer_gives_zero_features() {
    let mut model = IqVae::new(VaeConfig::default(), 1).unwrap();
    zero_encoder_outputs(&mut model);
    let zeros = vec![0.0; PIXELS];
    let (zx, zc) = model.encode(&zeros, &zeros).unwrap();
    assert!(zx.data().iter().chain(zc.data()).all(|v| *v == 0.0));
}

#[test]
fn quantize_examples() {
    let cb = book(&[&[0.0], &[1.0]]);
    let z = Tensor::new(&[3, 1], vec![0.4, 0.5, 0.9]).unwrap();
    let q = quantize(&z, &cb, 0.25).unwrap();
    assert_eq!(q.indices, vec![0, 0, 1]);
    assert_eq!(q.quantized.data(), &[0.0, 0.0, 1.0]);

    let exact = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
    let q = quantize(&exact, &cb, 0.25).unwrap();
    assert_eq!(q.indices, vec![1, 0]);
    assert_eq!(q.commit_loss, 0.0);

    let bad = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
    assert!(quantize(&bad, &cb, 0.25).is_err());
}

#[test]
fn commit_loss_value() {
    let cb = book(&[&[0.0], &[1.0]]);
    let z = Tensor::new(&[1, 1], vec![0.4]).unwrap();
    let q = quantize(&z, &cb, 0.25).unwrap();
    assert!((q.commit_loss - 1.25 * 0.16).abs() < 1e-6);
}

#[test]
fn codebook_validation() {
    assert!(Codebook::new(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap()).is_err());
    assert!(Codebook::new(Tensor::new(&[4], vec![0.0; 4]).unwrap()).is_err());
    let zero_row = book(&[&[0.0, 0.0], &[1.0, 0.0]]);
    assert!(zero_row.normalized().is_err());
    let n = book(&[&[3.0, 4.0], &[0.0, 2.0]]).normalized().unwrap();
    assert!((n[0][0] - 0.6).abs() < 1e-6 && (n[1][1] - 1.0).abs() < 1e-6);
}

#[test]
fn dequantize_gathers_rows() {
    let mut rng = Rng::new(3);
    let rows: Vec<Vec<f32>> = (0..8).map(|_| (0..4).map(|_| rng.normal() as f32).collect()).collect();
    let refs: Vec<&[f32]> = rows.iter().map(Vec::as_slice).collect();
    let cb = book(&refs);
    let idx: Vec<usize> = (0..20).map(|_| rng.below(8) as usize).collect();
    let grid = dequantize(&idx, &cb).unwrap();
    for (i, &k) in idx.iter().enumerate() {
        assert_eq!(grid.row(i), rows[k].as_slice());
    }
    let zeros = dequantize(&[0, 0, 0], &cb).unwrap();
    assert!((0..3).all(|i| zeros.row(i) == rows[0].as_slice()));
    assert!(matches!(
        dequantize(&[8], &cb),
        Err(Error::TokenOutOfRange { token: 8, vocab: 8 })
    ));
    let back = quantize(&grid, &cb, 0.25).unwrap();
    assert_eq!(back.indices, idx);
}

#[test]
fn decode_shape_range_and_alignment() {
    let model = IqVae::new(VaeConfig::default(), 2).unwrap();
    let mut rng = Rng::new(4);
    let big = Tensor::from_fn(&[16, 16], |_| 50.0 * rng.normal() as f32);
    let out = model.decode(&big, &big).unwrap();
    assert_eq!(out.len(), 256);
    assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    let short = Tensor::zeros(&[8, 16]);
    assert!(model.decode(&big, &short).is_err());
    assert!(model.decode(&short, &short).is_err());
}

fn forward_values(model: &IqVae, s: &PairedSample, w: &LossWeights) -> [f64; 4] {
    let proj = sample_directions(16, 64, 9).unwrap();
    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let f = model.forward(&mut g, &p, s, w, &proj).unwrap();
    [f.total, f.l_reg, f.l_recon, f.l_quan].map(|v| g.scalar(v) as f64)
}

#[test]
fn loss_bookkeeping() {
    let model = IqVae::new(VaeConfig::default(), 3).unwrap();
    let s = &tiny_data(1)[0];
    let zero = LossWeights {
        reg: 0.0,
        recon: 0.0,
        quan: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(forward_values(&model, s, &zero)[0], 0.0);
    let w = LossWeights {
        reg: 0.7,
        recon: 1.3,
        quan: 0.4,
        ..LossWeights::default()
    };
    let [total, reg, recon, quan] = forward_values(&model, s, &w);
    assert!(reg > 0.0 && recon > 0.0 && quan > 0.0);
    assert!((total - (0.7 * reg + 1.3 * recon + 0.4 * quan)).abs() < 1e-6 * total.max(1.0));
}

#[test]
fn weights_validation() {
    let bad = LossWeights {
        perc: 0.1,
        ..LossWeights::default()
    };
    assert!(bad.validate().is_err());
    let neg = LossWeights {
        reg: -1.0,
        ..LossWeights::default()
    };
    assert!(neg.validate().is_err());
    assert!(LossWeights::default().validate().is_ok());
}

#[test]
fn regularizer_zero_on_identical_and_translated() {
    let mut rng = Rng::new(8);
    let proj = sample_directions(16, 64, 1).unwrap();
    let z = Tensor::from_fn(&[16, 16], |_| rng.normal() as f32);
    let shifted = Tensor::new(&[16, 16], z.data().iter().enumerate().map(|(i, v)| v + (i % 16) as f32 * 0.5).collect()).unwrap();
    let mut g = Graph::new();
    let a = g.leaf(&z);
    let b = g.leaf(&z);
    let c = g.leaf(&shifted);
    let same = g.sliced_gw(a, b, &proj).unwrap();
    let moved = g.sliced_gw(a, c, &proj).unwrap();
    assert!(g.scalar(same).abs() < 1e-9);
    assert!(g.scalar(moved).abs() < 1e-6);
}

#[test]
fn regularizer_gradient_matches_finite_differences() {
    let mut rng = Rng::new(21);
    let proj = sample_directions(3, 16, 2).unwrap();
    let zc = Tensor::<f64>::from_fn(&[6, 3], |_| rng.normal());
    let zx = Tensor::<f64>::from_fn(&[6, 3], |_| rng.normal());
    let err = crate::tensor::grad_check_with(
        |g, v| g.sliced_gw(v[0], v[1], &proj),
        &[zc, zx],
        crate::tensor::GradCheckOptions {
            step: 1e-6,
            kink_tolerance: Some(1e-3),
        },
    )
    .unwrap();
    assert!(err < 1e-3, "rel err {err}");
}

/// The gradient reaching `Z` through quantization equals the gradient the
/// decoder produces when fed the quantized values directly.
#[test]
fn straight_through_contract() {
    let model = IqVae::new(VaeConfig::default(), 6).unwrap();
    let s = &tiny_data(1)[0];
    let cond = s.condition_unit();
    let (zx, zc) = model.encode(&s.image, &cond).unwrap();
    let target = patchify(&s.image, 16, 4).unwrap();

    let mut g = Graph::new();
    let p = model.params().bind_frozen(&mut g);
    let z = g.param(&zx);
    let zcv = g.leaf(&zc);
    let (st, _, idx) = model.quantize_vars(&mut g, &p, z, model.cb_x).unwrap();
    let out = model.decode_image_vars(&mut g, &p, st, zcv).unwrap();
    let t = g.constant(&[16, 16], target.clone()).unwrap();
    let loss = g.mse(out, t).unwrap();
    g.backward(loss).unwrap();
    let through_quant = g.grad(z).unwrap().to_vec();

    let q = dequantize(&idx, &model.image_codebook()).unwrap();
    let mut h = Graph::new();
    let p = model.params().bind_frozen(&mut h);
    let y = h.param(&q);
    let zcv = h.leaf(&zc);
    let out = model.decode_image_vars(&mut h, &p, y, zcv).unwrap();
    let t = h.constant(&[16, 16], target).unwrap();
    let loss = h.mse(out, t).unwrap();
    h.backward(loss).unwrap();
    assert_eq!(through_quant, h.grad(y).unwrap());
}

#[test]
fn codebook_gets_gradient_only_from_commit_term() {
    let model = IqVae::new(VaeConfig::default(), 6).unwrap();
    let s = &tiny_data(1)[0];
    let proj = sample_directions(16, 8, 0).unwrap();
    let no_quan = LossWeights {
        quan: 0.0,
        ..LossWeights::default()
    };
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let f = model.forward(&mut g, &p, s, &no_quan, &proj).unwrap();
    g.backward(f.total).unwrap();
    let grads = g.grads_of(p.vars());
    let cb_grad = &grads[p.vars().iter().position(|v| *v == p[model.cb_x]).unwrap()];
    assert!(cb_grad.iter().all(|v| *v == 0.0));
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let data = tiny_data(24);
    let cfg = VaeTrainConfig {
        epochs: 2,
        batch_size: 8,
        projections: 8,
        ..VaeTrainConfig::default()
    };
    let mut seen = 0;
    let (_, h1) = train_iqvae(&data, &VaeConfig::default(), &cfg, 4, |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 2);
    let (_, h2) = train_iqvae(&data, &VaeConfig::default(), &cfg, 4, |_| Ok(())).unwrap();
    assert_eq!(h1, h2);
    assert!(h1.iter().all(|m| m.l_total.is_finite() && m.codebook_usage > 0.0));
}

#[test]
fn training_rejects_bad_config() {
    let data = tiny_data(2);
    let cfg = VaeTrainConfig {
        epochs: 0,
        ..VaeTrainConfig::default()
    };
    assert!(train_iqvae(&data, &VaeConfig::default(), &cfg, 0, |_| Ok(())).is_err());
    assert!(train_iqvae(&[], &VaeConfig::default(), &VaeTrainConfig::default(), 0, |_| Ok(())).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nearest_neighbour_is_optimal(seed in any::<u64>(), k in 2usize..12, d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let cb = Codebook::new(Tensor::from_fn(&[k, d], |_| rng.normal() as f32)).unwrap();
        let z = Tensor::from_fn(&[10, d], |_| rng.normal() as f32);
        let q = quantize(&z, &cb, 0.25).unwrap();
        for (i, &idx) in q.indices.iter().enumerate() {
            let best = sq_dist(z.row(i), cb.row(idx));
            for j in 0..k {
                prop_assert!(best <= sq_dist(z.row(i), cb.row(j)));
            }
            prop_assert_eq!(q.quantized.row(i), cb.row(idx));
        }
    }
}

#[test]
fn records_roundtrip_through_checkpoint() {
    let model = IqVae::new(VaeConfig::default(), 12).unwrap();
    let bytes = crate::checkpoint::encode_checkpoint(&model.to_records()).unwrap();
    let records = crate::checkpoint::decode_checkpoint(&bytes).unwrap();
    let back = IqVae::from_records(VaeConfig::default(), &records).unwrap();
    assert_eq!(back.params(), model.params());
    let small = VaeConfig {
        codebook_size: 8,
        ..VaeConfig::default()
    };
    assert!(IqVae::from_records(small, &records).is_err());
}
