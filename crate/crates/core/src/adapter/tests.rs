use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn cfg(mode: TiedLoraMode, d: usize, layers: usize, r: usize) -> TiedLoraConfig {
    TiedLoraConfig::new(mode, r, ModelDims::new(d, layers).unwrap(), 7).unwrap()
}

/// Replaces every stored tensor with fresh Normal draws.
fn randomized(config: &TiedLoraConfig, seed: u64) -> AdapterParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = init_adapter(config).unwrap();
    let named = fresh
        .slots()
        .into_iter()
        .map(|s| (s.name, Tensor::randn(s.tensor.shape(), 0.7, &mut rng)))
        .collect();
    AdapterParams::from_named(config, named).unwrap()
}

fn dense_matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.at(i, j) * x[j]).sum())
        .collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn count_spot_values_7b_geometry() {
    let lora = count_trainable(&cfg(TiedLoraMode::Lora, 4096, 32, 8));
    assert_eq!(lora, 4_194_304);
    let tab = count_trainable(&cfg(TiedLoraMode::Tab, 4096, 32, 8));
    assert_eq!(tab, 131_072);
    assert_eq!(1.0 - tab as f64 / lora as f64, 0.968_75);
    let tuv = count_trainable(&cfg(TiedLoraMode::Tuv, 4096, 32, 8));
    assert_eq!(tuv, 393_472);
    let reduction = 100.0 * (1.0 - tuv as f64 / lora as f64);
    assert!((reduction - 90.6).abs() < 0.05, "{reduction}");
}

#[test]
fn count_spot_values_2b_geometry() {
    let c = cfg(TiedLoraMode::Tabuv, 2048, 24, 8);
    assert_eq!(count_trainable(&c), 213_184);
    assert_eq!(count_trainable(&cfg(TiedLoraMode::Lora, 2048, 24, 8)), 1_572_864);
    assert!((100.0 * fraction_of_lora(&c) - 13.6).abs() < 0.05);
}

#[test]
fn count_smallest_geometry() {
    assert_eq!(count_trainable(&cfg(TiedLoraMode::Tb, 1, 1, 1)), 3);
    assert_eq!(count_trainable(&cfg(TiedLoraMode::Lora, 1, 1, 1)), 4);
}

#[test]
fn config_validation() {
    let dims = ModelDims::new(4, 2).unwrap();
    assert!(TiedLoraConfig::new(TiedLoraMode::Tab, 0, dims, 0).is_err());
    assert!(ModelDims::new(0, 2).is_err());
    let mut c = TiedLoraConfig::new(TiedLoraMode::Tab, 2, dims, 0).unwrap();
    assert_eq!(c.prefactor(), 1.0);
    c.alpha = -1.0;
    assert!(c.validate().is_err());
    c.alpha = 2.0;
    c.zero_start_override = true;
    assert!(c.validate().is_err());
    c.mode = TiedLoraMode::Tbu;
    assert!(c.validate().is_ok());
}

proptest! {
    #[test]
    fn count_matches_stored_trainables(d in 1usize..=40, layers in 1usize..=12, r in 1usize..=16) {
        for mode in TiedLoraMode::ALL {
            let c = cfg(mode, d, layers, r);
            let p = init_adapter(&c).unwrap();
            let stored: u64 = p.trainable_slots().iter().map(|s| s.tensor.numel() as u64).sum();
            prop_assert_eq!(stored, count_trainable(&c));
        }
    }
}

#[test]
fn count_identity_200_random_triples() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..200 {
        let (d, l, r) = (rng.random_range(1..=64), rng.random_range(1..=16), rng.random_range(1..=32));
        for mode in TiedLoraMode::ALL {
            let c = cfg(mode, d, l, r);
            let p = init_adapter(&c).unwrap();
            assert_eq!(p.trainable_count(), count_trainable(&c), "{mode} d={d} L={l} r={r}");
        }
    }
}

#[test]
fn init_tab_has_zero_b_and_zero_delta() {
    let c = cfg(TiedLoraMode::Tab, 6, 3, 2);
    let p = init_adapter(&c).unwrap();
    assert!(p.b(0).data().iter().all(|&x| x == 0.0));
    assert!(p.a(0).data().iter().any(|&x| x != 0.0));
    for l in 0..3 {
        assert!(adapter_delta(&p, &c, l).unwrap().data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn init_tabuv_has_zero_v_unit_u() {
    let c = cfg(TiedLoraMode::Tabuv, 6, 3, 2);
    let p = init_adapter(&c).unwrap();
    for l in 0..3 {
        assert!(p.v(l).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(p.u(l).unwrap().data().iter().all(|&x| x == 1.0));
        assert!(adapter_delta(&p, &c, l).unwrap().data().iter().all(|&x| x == 0.0));
    }
    assert!(p.b(0).data().iter().any(|&x| x != 0.0));
}

#[test]
fn init_random_b_modes_and_override() {
    for mode in [TiedLoraMode::Tbu, TiedLoraMode::Tb, TiedLoraMode::Ta] {
        let c = cfg(mode, 6, 2, 2);
        let p = init_adapter(&c).unwrap();
        assert!(p.b(0).data().iter().any(|&x| x != 0.0), "{mode}");
        assert!(p.u(0).is_none() || p.u(0).unwrap().data().iter().all(|&x| x == 1.0));
    }
    let mut c = cfg(TiedLoraMode::Tb, 6, 2, 2);
    c.zero_start_override = true;
    let p = init_adapter(&c).unwrap();
    assert!(p.b(0).data().iter().all(|&x| x == 0.0));
}

#[test]
fn init_is_deterministic() {
    for mode in TiedLoraMode::ALL {
        let c = cfg(mode, 5, 3, 2);
        assert_eq!(init_adapter(&c).unwrap(), init_adapter(&c).unwrap());
    }
    let c = cfg(TiedLoraMode::Lora, 5, 3, 2);
    let mut other = c.clone();
    other.init_seed += 1;
    assert_ne!(init_adapter(&c).unwrap(), init_adapter(&other).unwrap());
}

#[test]
fn init_std_is_configurable() {
    let mut c = cfg(TiedLoraMode::Ta, 64, 1, 32);
    c.init_std = 0.5;
    let p = init_adapter(&c).unwrap();
    let n = p.a(0).numel() as f64;
    let var = p.a(0).data().iter().map(|x| x * x).sum::<f64>() / n;
    assert!((var.sqrt() - 0.5).abs() < 0.05);
}

#[test]
fn tied_storage_is_single_instance() {
    for mode in TiedLoraMode::ALL {
        let p = init_adapter(&cfg(mode, 4, 5, 2)).unwrap();
        let expected = if mode.tied() { 1 } else { 5 };
        assert_eq!(p.instances(), expected);
        if mode.tied() {
            assert!(std::ptr::eq(p.a(0), p.a(4)));
        }
    }
}

#[test]
fn delta_zero_v_is_zero_matrix() {
    let c = cfg(TiedLoraMode::Tuv, 3, 2, 2);
    let p = randomized(&c, 3);
    let named = p
        .slots()
        .into_iter()
        .map(|s| {
            let t = if s.name.starts_with('v') {
                Tensor::zeros(s.tensor.shape())
            } else {
                s.tensor.clone()
            };
            (s.name, t)
        })
        .collect();
    let p = AdapterParams::from_named(&c, named).unwrap();
    let delta = adapter_delta(&p, &c, 1).unwrap();
    assert_eq!(delta.shape(), &[9, 3]);
    assert!(delta.data().iter().all(|&x| x == 0.0));
}

fn worked_example() -> (TiedLoraConfig, AdapterParams) {
    let c = cfg(TiedLoraMode::Tabuv, 1, 1, 1);
    let named = vec![
        ("A".to_string(), Tensor::matrix(1, 1, vec![2.0]).unwrap()),
        ("B".to_string(), Tensor::matrix(3, 1, vec![1.0, -1.0, 0.5]).unwrap()),
        ("u.0".to_string(), Tensor::vector(vec![1.0]).unwrap()),
        ("v.0".to_string(), Tensor::vector(vec![1.0, 2.0, 0.0]).unwrap()),
    ];
    let p = AdapterParams::from_named(&c, named).unwrap();
    (c, p)
}

#[test]
fn delta_worked_example() {
    let (c, p) = worked_example();
    let delta = adapter_delta(&p, &c, 0).unwrap();
    assert_eq!(delta.shape(), &[3, 1]);
    assert_eq!(delta.data(), &[2.0, -4.0, 0.0]);
    assert!(adapter_delta(&p, &c, 1).is_err());
}

#[test]
fn merge_worked_example() {
    let (c, p) = worked_example();
    let w = Tensor::matrix(3, 1, vec![0.5, 0.25, -1.0]).unwrap();
    let merged = merge(&p, &c, std::slice::from_ref(&w)).unwrap();
    assert_eq!(merged[0].data(), &[2.5, -3.75, -1.0]);
    assert_eq!(w.data(), &[0.5, 0.25, -1.0]);
    assert!(merge(&p, &c, &[w.clone(), w]).is_err());
}

#[test]
fn delta_unit_scalings_is_plain_ba() {
    let c = cfg(TiedLoraMode::Lora, 4, 2, 3);
    let p = randomized(&c, 9);
    for l in 0..2 {
        let delta = adapter_delta(&p, &c, l).unwrap();
        let mut g = Graph::new();
        let b = g.constant(p.b(l).clone());
        let a = g.constant(p.a(l).clone());
        let ba = g.matmul(b, a).unwrap();
        assert_eq!(&delta, g.value(ba));
    }
}

#[test]
fn delta_prefactor_scales() {
    let mut c = cfg(TiedLoraMode::Tab, 4, 1, 2);
    let p = randomized(&c, 1);
    let base = adapter_delta(&p, &c, 0).unwrap();
    c.alpha = 6.0;
    let scaled = adapter_delta(&p, &c, 0).unwrap();
    for (x, y) in base.data().iter().zip(scaled.data()) {
        assert!((3.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
    }
}

#[test]
fn forward_fresh_tabuv_is_base() {
    let c = cfg(TiedLoraMode::Tabuv, 4, 2, 2);
    let p = init_adapter(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Tensor::randn(&[12, 4], 1.0, &mut rng);
    let x = Tensor::randn(&[4], 1.0, &mut rng);
    let z = adapter_forward(&p, &c, 1, &w, &x).unwrap();
    let mut g = Graph::new();
    let (wv, xv) = (g.constant(w.clone()), g.constant(x.clone().reshape(vec![1, 4]).unwrap()));
    let wx = base_projection(&mut g, wv, None, xv).unwrap();
    assert_eq!(z.data(), g.value(wx).data());
    assert!(rel(z.data(), &dense_matvec(&w, x.data())) <= 1e-14);
}

#[test]
fn forward_matches_materialized_delta() {
    for mode in TiedLoraMode::ALL {
        let mut c = cfg(mode, 5, 3, 2);
        c.alpha = 3.0;
        let p = randomized(&c, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Tensor::randn(&[15, 5], 1.0, &mut rng);
        for l in 0..3 {
            let x = Tensor::randn(&[5], 1.0, &mut rng);
            let z = adapter_forward(&p, &c, l, &w, &x).unwrap();
            let merged = w.add(&adapter_delta(&p, &c, l).unwrap()).unwrap();
            let want = dense_matvec(&merged, x.data());
            assert!(rel(z.data(), &want) <= 1e-10, "{mode}");
        }
    }
}

#[test]
fn forward_rejects_bad_shapes() {
    let c = cfg(TiedLoraMode::Tab, 4, 1, 2);
    let p = init_adapter(&c).unwrap();
    let w = Tensor::zeros(&[12, 4]);
    assert!(adapter_forward(&p, &c, 0, &w, &Tensor::zeros(&[3])).is_err());
    assert!(adapter_forward(&p, &c, 0, &Tensor::zeros(&[4, 4]), &Tensor::zeros(&[4])).is_err());
    assert!(adapter_forward(&p, &c, 1, &w, &Tensor::zeros(&[4])).is_err());
    let other = cfg(TiedLoraMode::Tab, 4, 1, 3);
    assert!(adapter_forward(&p, &other, 0, &w, &Tensor::zeros(&[4])).is_err());
}

/// Plain two-matrix form `W x + (alpha/r) B A x`.
#[test]
fn lora_reduction_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for i in 0..100 {
        let (d, l, r) = (rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=4));
        let c = cfg(TiedLoraMode::Lora, d, l, r);
        let p = randomized(&c, i);
        let w = Tensor::randn(&[3 * d, d], 1.0, &mut rng);
        let x = Tensor::randn(&[d], 1.0, &mut rng);
        let layer = rng.random_range(0..l);
        let z = adapter_forward(&p, &c, layer, &w, &x).unwrap();
        let ax = dense_matvec(p.a(layer), x.data());
        let bax = dense_matvec(p.b(layer), &ax);
        let want: Vec<f64> = dense_matvec(&w, x.data()).iter().zip(&bax).map(|(a, b)| a + b).collect();
        assert!(rel(z.data(), &want) <= 1e-12);
    }
}

/// `W x + diag(v) B diag(u) A x` with frozen random tied A, B.
#[test]
fn vera_reduction_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for i in 0..100 {
        let (d, l, r) = (rng.random_range(1..=8), rng.random_range(1..=4), rng.random_range(1..=4));
        let c = cfg(TiedLoraMode::Tuv, d, l, r);
        let p = randomized(&c, 1000 + i);
        assert!(!p.mask().a && !p.mask().b && p.is_tied());
        let w = Tensor::randn(&[3 * d, d], 1.0, &mut rng);
        let x = Tensor::randn(&[d], 1.0, &mut rng);
        let layer = rng.random_range(0..l);
        let z = adapter_forward(&p, &c, layer, &w, &x).unwrap();
        let mut lam_u = Tensor::zeros(&[r, r]);
        for k in 0..r {
            lam_u.data_mut()[k * r + k] = p.u(layer).unwrap().data()[k];
        }
        let mut lam_v = Tensor::zeros(&[3 * d, 3 * d]);
        for k in 0..3 * d {
            lam_v.data_mut()[k * 3 * d + k] = p.v(layer).unwrap().data()[k];
        }
        let h = dense_matvec(p.a(0), x.data());
        let h = dense_matvec(&lam_u, &h);
        let h = dense_matvec(p.b(0), &h);
        let h = dense_matvec(&lam_v, &h);
        let want: Vec<f64> = dense_matvec(&w, x.data()).iter().zip(&h).map(|(a, b)| a + b).collect();
        assert!(rel(z.data(), &want) <= 1e-12);
    }
}

#[test]
fn merge_equivalence_all_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for mode in TiedLoraMode::ALL {
        for seed in 0..10 {
            let c = cfg(mode, 8, 3, 2);
            let p = randomized(&c, seed);
            let base: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[24, 8], 1.0, &mut rng)).collect();
            let merged = merge(&p, &c, &base).unwrap();
            for _ in 0..32 {
                let x = Tensor::randn(&[8], 1.0, &mut rng);
                let l = rng.random_range(0..3);
                let via_adapter = adapter_forward(&p, &c, l, &base[l], &x).unwrap();
                let via_merged = dense_matvec(&merged[l], x.data());
                assert!(rel(&via_merged, via_adapter.data()) <= 1e-9, "{mode}");
            }
        }
    }
}

#[test]
fn merge_zero_delta_is_bit_identical() {
    let c = cfg(TiedLoraMode::Tab, 4, 2, 2);
    let p = init_adapter(&c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base: Vec<Tensor> = (0..2).map(|_| Tensor::randn(&[12, 4], 1.0, &mut rng)).collect();
    let merged = merge(&p, &c, &base).unwrap();
    for (m, b) in merged.iter().zip(&base) {
        assert_eq!(m.to_le_bytes(), b.to_le_bytes());
    }
}

#[test]
fn tied_accumulate_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let one = std::slice::from_ref(&g);
    match (tied_grad_accumulate(one, true).unwrap(), tied_grad_accumulate(one, false).unwrap()) {
        (ComponentGrad::Shared(s), ComponentGrad::PerLayer(p)) => assert_eq!(vec![s], p),
        other => panic!("unexpected {other:?}"),
    }
    let three = [g.clone(), g.clone(), g.clone()];
    let ComponentGrad::Shared(s) = tied_grad_accumulate(&three, true).unwrap() else {
        panic!("expected shared");
    };
    for (x, y) in s.data().iter().zip(g.data()) {
        assert!((x - 3.0 * y).abs() <= 1e-15 * y.abs().max(1.0) * 4.0);
    }
    assert!(tied_grad_accumulate(&[g.clone(), Tensor::zeros(&[3, 2])], true).is_err());
    assert!(tied_grad_accumulate(&[], true).is_err());
}

/// Tied-A gradient from one backward equals the layer-sum of an untied clone's gradients.
#[test]
fn tied_gradient_equals_untied_clone_sum() {
    let layers = 3;
    let tied_cfg = cfg(TiedLoraMode::Tab, 4, layers, 2);
    let tied = randomized(&tied_cfg, 5);
    let untied_cfg = cfg(TiedLoraMode::Lora, 4, layers, 2);
    let named = (0..layers)
        .map(|l| (format!("A.{l}"), tied.a(0).clone()))
        .chain((0..layers).map(|l| (format!("B.{l}"), tied.b(0).clone())))
        .collect();
    let untied = AdapterParams::from_named(&untied_cfg, named).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ws: Vec<Tensor> = (0..layers).map(|_| Tensor::randn(&[12, 4], 1.0, &mut rng)).collect();
    let xs: Vec<Tensor> = (0..layers).map(|_| Tensor::randn(&[3, 4], 1.0, &mut rng)).collect();

    let grads = |p: &AdapterParams, c: &TiedLoraConfig| {
        let mut g = Graph::new();
        let vars = AdapterVars::register(&mut g, p, c, true);
        let mut total = None;
        for l in 0..layers {
            let w = g.constant(ws[l].clone());
            let x = g.constant(xs[l].clone());
            let z = vars.project(&mut g, l, w, None, x).unwrap();
            let zz = g.mul(z, z).unwrap();
            let s = g.sum(zz).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s).unwrap(),
            });
        }
        g.backward(total.unwrap()).unwrap();
        vars.trainable_vars().iter().map(|v| g.grad_or_zeros(*v)).collect::<Vec<_>>()
    };
    let tied_grads = grads(&tied, &tied_cfg);
    let untied_grads = grads(&untied, &untied_cfg);
    let ComponentGrad::Shared(a_sum) = tied_grad_accumulate(&untied_grads[..layers], true).unwrap() else {
        panic!()
    };
    let ComponentGrad::Shared(b_sum) = tied_grad_accumulate(&untied_grads[layers..], true).unwrap() else {
        panic!()
    };
    assert!(tied_grads[0].rel_err(&a_sum) <= 1e-10);
    assert!(tied_grads[1].rel_err(&b_sum) <= 1e-10);
}

#[test]
fn trainable_slot_layouts() {
    let (d, l, r) = (5, 3, 2);
    let p = init_adapter(&cfg(TiedLoraMode::Tuv, d, l, r)).unwrap();
    let slots = p.trainable_slots();
    assert_eq!(slots.len(), 2 * l);
    let names: Vec<&str> = slots.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["u.0", "v.0", "u.1", "v.1", "u.2", "v.2"]);
    assert_eq!(p.trainable_count(), (l * (r + 3 * d)) as u64);

    let p = init_adapter(&cfg(TiedLoraMode::Ta, d, l, r)).unwrap();
    let slots = p.trainable_slots();
    assert_eq!(slots.len(), 1);
    assert_eq!(slots[0].tensor.shape(), &[r, d]);

    let p = init_adapter(&cfg(TiedLoraMode::Lora, d, l, r)).unwrap();
    let slots = p.trainable_slots();
    assert_eq!(slots.len(), 2 * l);
    assert!(slots.iter().all(|s| s.tensor.is_matrix()));
}

#[test]
fn from_named_rejects_mismatches() {
    let c = cfg(TiedLoraMode::Tab, 4, 2, 2);
    let good: Vec<(String, Tensor)> = init_adapter(&c)
        .unwrap()
        .slots()
        .into_iter()
        .map(|s| (s.name, s.tensor.clone()))
        .collect();
    assert!(AdapterParams::from_named(&c, good.clone()).is_ok());
    let mut wrong_shape = good.clone();
    wrong_shape[0].1 = Tensor::zeros(&[3, 4]);
    assert!(AdapterParams::from_named(&c, wrong_shape).is_err());
    let mut wrong_name = good.clone();
    wrong_name[0].0 = "B".into();
    assert!(AdapterParams::from_named(&c, wrong_name).is_err());
    assert!(AdapterParams::from_named(&c, good[..1].to_vec()).is_err());
}

#[test]
fn adapter_gradient_wrt_u_matches_finite_differences() {
    let c = cfg(TiedLoraMode::Tabuv, 4, 1, 2);
    let p = randomized(&c, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = Tensor::randn(&[12, 4], 1.0, &mut rng);
    let x = Tensor::randn(&[4], 1.0, &mut rng);

    let with_u = |u: &Tensor| {
        let named = p
            .slots()
            .into_iter()
            .map(|s| (s.name.clone(), if s.name == "u.0" { u.clone() } else { s.tensor.clone() }))
            .collect();
        AdapterParams::from_named(&c, named)
    };
    let numeric = crate::numkit::finite_diff_grad(
        |u| Ok(adapter_forward(&with_u(u)?, &c, 0, &w, &x)?.sum()),
        p.u(0).unwrap(),
        crate::numkit::DEFAULT_FD_EPS,
    )
    .unwrap();

    let mut g = Graph::new();
    let vars = AdapterVars::register(&mut g, &p, &c, true);
    let wv = g.constant(w.clone());
    let xv = g.constant(x.clone().reshape(vec![1, 4]).unwrap());
    let z = vars.project(&mut g, 0, wv, None, xv).unwrap();
    let s = g.sum(z).unwrap();
    g.backward(s).unwrap();
    // slot order for TABUV: A, B, u.0, v.0
    let analytic = g.grad_or_zeros(vars.trainable_vars()[2]);
    assert!(crate::numkit::grad_rel_err(&analytic, &numeric) <= 1e-5);
}
