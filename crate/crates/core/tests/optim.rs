use glims::optim::{cosine_lr, AdamW, AdamWConfig};
use glims::params::ParamStore;
use glims::{Error, Tensor};

fn scalar_store(v: f32) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[1], vec![v]).unwrap());
    s
}

fn value(s: &ParamStore<f32>) -> f32 {
    s.iter().next().unwrap().2.data()[0]
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0, 100, 1e-3, 0.0), 1e-3);
    assert_eq!(cosine_lr(100, 100, 1e-3, 0.0), 0.0);
    assert_eq!(cosine_lr(50, 100, 1e-3, 0.0), 5e-4);
    assert_eq!(cosine_lr(150, 100, 1e-3, 1e-5), 1e-5);
    let mut prev = f64::INFINITY;
    for t in 0..=100 {
        let lr = cosine_lr(t, 100, 1e-3, 0.0);
        assert!(lr <= prev);
        prev = lr;
    }
}

#[test]
fn default_hyperparameters() {
    let c = AdamWConfig::default();
    assert_eq!(
        (c.lr, c.weight_decay, c.beta1, c.beta2, c.eps),
        (1e-3, 1e-5, 0.9, 0.999, 1e-8)
    );
}

#[test]
fn first_step_with_unit_gradient_moves_by_lr() {
    let config = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    // start at 0 so f32 storage does not round the step
    let mut store = scalar_store(0.0);
    let mut opt = AdamW::new(config, &store);
    let g = Tensor::new(&[1], vec![1.0f32]).unwrap();
    opt.update(&mut store, &[Some(&g)], 1e-3).unwrap();
    let delta = value(&store) as f64;
    assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
    // later unit-gradient steps keep m_hat / sqrt(v_hat) = 1
    for _ in 0..5 {
        let before = value(&store) as f64;
        opt.update(&mut store, &[Some(&g)], 1e-3).unwrap();
        assert!((value(&store) as f64 - before + 1e-3).abs() < 1e-7);
    }
    assert_eq!(opt.step, 6);
}

#[test]
fn zero_gradient_decays_multiplicatively() {
    let mut store = scalar_store(2.0);
    let config = AdamWConfig {
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(config, &store);
    let g = Tensor::new(&[1], vec![0.0f32]).unwrap();
    opt.update(&mut store, &[Some(&g)], 0.5).unwrap();
    assert_eq!(value(&store), (2.0f64 * (1.0 - 0.5 * 0.1)) as f32);
}

#[test]
fn quadratic_bowl_descends_monotonically_after_the_second_step() {
    let target = [1.5f32, -2.0, 0.25];
    let mut store = ParamStore::new();
    store.add("p", Tensor::zeros(&[3]));
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let loss = |s: &ParamStore<f32>| -> f64 {
        let p = s.iter().next().unwrap().2.data();
        p.iter().zip(target).map(|(a, b)| ((a - b) as f64).powi(2)).sum()
    };
    let mut history = vec![loss(&store)];
    for _ in 0..10 {
        let p = store.iter().next().unwrap().2.data().to_vec();
        let g = Tensor::new(&[3], p.iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect()).unwrap();
        opt.update(&mut store, &[Some(&g)], 0.1).unwrap();
        history.push(loss(&store));
    }
    for w in history[2..].windows(2) {
        assert!(w[1] < w[0], "{history:?}");
    }
}

#[test]
fn missing_gradient_names_the_parameter() {
    let mut store = ParamStore::new();
    store.add("enc0.weight", Tensor::zeros(&[2]));
    store.add("enc0.bias", Tensor::zeros(&[1]));
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    let g = Tensor::zeros(&[2]);
    let err = opt.update(&mut store, &[Some(&g), None], 1e-3).err().unwrap();
    assert!(
        matches!(&err, Error::MissingGradient(name) if name == "enc0.bias"),
        "{err}"
    );
    // nothing moved and the step counter did not advance
    assert_eq!(opt.step, 0);
    let bad = Tensor::zeros(&[3]);
    assert!(opt.update(&mut store, &[Some(&bad), Some(&g)], 1e-3).is_err());
}
