use super::*;
use crate::diffusion::data::eight_gaussians;
use crate::diffusion::NetworkConfig;
use crate::ggdm::{Family, OffDiagonal};

fn setup() -> (Arc<ScoreNetwork>, NoiseSchedule, Tensor, Tensor) {
    let schedule = NoiseSchedule::linear(32, 1e-3, 0.3).unwrap();
    let net = Arc::new(ScoreNetwork::init(
        NetworkConfig {
            data_dim: 2,
            hidden: 16,
            layers: 1,
            embed_dim: 8,
            t_max: 32,
        },
        2,
    ));
    (net, schedule, eight_gaussians(200, 1), eight_gaussians(64, 2))
}

fn small_config() -> SearchConfig {
    SearchConfig {
        k: 3,
        batch_size: 16,
        steps: 6,
        val_every: 3,
        val_size: 32,
        features: FeatureSpec::RandomFourier { dim: 16 },
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        ..SearchConfig::default()
    }
}

#[test]
fn default_hyperparameters() {
    let c = SearchConfig::default();
    assert_eq!(c.adam.learning_rate, 0.0005);
    assert_eq!((c.adam.beta1, c.adam.beta2, c.adam.epsilon), (0.9, 0.999, 1e-8));
    assert_eq!((c.batch_size, c.steps, c.k), (512, 2000, 5));
    let bad = SearchConfig {
        batch_size: 1,
        ..c
    };
    assert!(bad.validate().is_err());
}

#[test]
fn zero_steps_returns_initialization() {
    let (net, schedule, train, val) = setup();
    let config = SearchConfig {
        steps: 0,
        ..small_config()
    };
    let fmap = FeatureMap::from_spec(&config.features, &train, 0).unwrap();
    let r = ddss_search(&net, &schedule, SearchData { train: &train, val: &val }, &fmap, &config).unwrap();
    assert_eq!(r.final_params, init_from_ddpm(&schedule, 3, config.sampler).unwrap());
    assert_eq!(r.trace.len(), 1);
    assert!(r.trace[0].val_kid.is_some());
}

#[test]
fn trace_is_reproducible_and_complete() {
    let (net, schedule, train, val) = setup();
    let config = small_config();
    let fmap = FeatureMap::from_spec(&config.features, &train, 0).unwrap();
    let data = SearchData { train: &train, val: &val };
    let before = net.weight_hash();
    let a = ddss_search(&net, &schedule, data, &fmap, &config).unwrap();
    let b = ddss_search(&net, &schedule, data, &fmap, &config).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.final_params, b.final_params);
    assert_eq!(net.weight_hash(), before);
    assert_eq!(a.trace.len(), 7);
    let with_val: Vec<usize> = a.trace.iter().filter(|r| r.val_kid.is_some()).map(|r| r.step).collect();
    assert_eq!(with_val, vec![0, 3, 6]);
    assert_ne!(a.final_params, a.init);
    let csv = a.trace_csv();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.starts_with("step,train_kid,val_kid\n"));
}

#[test]
fn rematerialization_does_not_change_the_update() {
    let (net, schedule, train, _) = setup();
    let fmap = FeatureMap::random_fourier(&train, 32, 4).unwrap();
    let real = fmap.apply(&gather_rows(&train, &(0..20).collect::<Vec<_>>())).unwrap();
    for family in [Family::Ggdm, Family::GgdmPred, Family::Vars, Family::Ddim] {
        let spec = SamplerSpec {
            off_diagonal: OffDiagonal::Dense,
            ..SamplerSpec::new(family, true)
        };
        let p = init_from_ddpm(&schedule, 4, spec).unwrap();
        let run = |remat: bool| {
            let e = evaluate_step(
                &net,
                &schedule,
                &fmap,
                KernelKind::Linear,
                &p,
                &real,
                &step_noise(1, 0),
                20,
                remat,
            )
            .unwrap();
            let mut q = p.clone();
            let mut adam = AdamState::for_tensors(AdamConfig::default(), &q.group_tensors());
            apply_update(&mut q, &mut adam, &e.grads).unwrap();
            (e, q)
        };
        let (ea, qa) = run(true);
        let (eb, qb) = run(false);
        assert_eq!(ea.loss, eb.loss);
        for ((_, a), (_, b)) in qa.groups().iter().zip(qb.groups()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-10);
            }
        }
        assert!(ea.memory.recomputations > 0);
        assert_eq!(eb.memory.recomputations, 0);
    }
}

#[test]
fn non_finite_loss_aborts_with_last_good_parameters() {
    let (net, schedule, mut train, val) = setup();
    let config = small_config();
    let fmap = FeatureMap::from_spec(&config.features, &train, 0).unwrap();
    train = train.map(|_| f64::NAN);
    let r = ddss_search(&net, &schedule, SearchData { train: &train, val: &val }, &fmap, &config).unwrap();
    assert!(r.aborted.is_some());
    assert!(r.trace.is_empty());
    assert_eq!(r.final_params, r.init);
}

#[test]
fn file_backed_features_cannot_drive_search() {
    let (net, schedule, train, val) = setup();
    let fmap = FeatureMap::file_backed(std::path::Path::new("x"), Tensor::zeros(&[200, 4])).unwrap();
    let config = small_config();
    let err = ddss_search(&net, &schedule, SearchData { train: &train, val: &val }, &fmap, &config);
    assert!(matches!(err, Err(Error::Usage(_))));
}
