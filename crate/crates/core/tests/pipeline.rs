use kgs3d::exec::{compile_network, random_input, ExecMode, PreparedNetwork};
use kgs3d::experiment::train_dense;
use kgs3d::io::{load_masks, load_model, load_network, save_masks, save_model, save_network};
use kgs3d::pruning::{prune, Algorithm, MaskPolicy, PruneConfig};
use kgs3d::sparsity::{sparsity_stats, Scheme};
use kgs3d::tensor::{conv3d_dense, max_rel_diff, FeatureMap};
use kgs3d::train::{evaluate, ArchSpec, ToyTask};

fn relu(mut x: FeatureMap<f64>) -> FeatureMap<f64> {
    for v in x.data_mut() {
        *v = v.max(0.0);
    }
    x
}

#[test]
fn train_prune_compile_run() {
    let arch = ArchSpec::tiny3d();
    let task = ToyTask::for_arch(&arch, 7).unwrap();
    let (dense, log) = train_dense(&arch, &task, 30, 7).unwrap();
    assert_eq!(log.len(), 30);
    let dense_acc = evaluate(&dense, &task.test).unwrap();
    assert!(dense_acc > 0.9, "dense accuracy {dense_acc}");

    let cfg = PruneConfig {
        lambda: 0.1,
        scheme: Scheme::Kgs,
        policy: MaskPolicy::TargetRate(2.0),
        retrain_epochs: 10,
        seed: 7,
        ..Default::default()
    };
    let out = prune(Algorithm::Reweighted, &dense, &task, &cfg).unwrap();
    let stats = sparsity_stats(&out.masks, &out.model.geometry()).unwrap();
    assert!(stats.flops_rate >= 2.0);
    assert_eq!(stats, out.stats);

    let dir = tempfile::tempdir().unwrap();
    save_model(&dir.path().join("m.bin"), &out.model).unwrap();
    save_masks(&dir.path().join("m.mask"), &out.masks).unwrap();
    let model = load_model(&dir.path().join("m.bin")).unwrap();
    let masks = load_masks(&dir.path().join("m.mask")).unwrap();
    assert_eq!(masks, out.masks);
    assert_eq!(evaluate(&model, &task.test).unwrap(), evaluate(&out.model, &task.test).unwrap());

    let net = compile_network(&model, &masks, true).unwrap();
    save_network(&dir.path().join("m.cws"), &net).unwrap();
    let net = load_network(&dir.path().join("m.cws")).unwrap();
    let prepared = PreparedNetwork::<f64>::new(&net.layers).unwrap();
    let x = random_input(net.input_dims(2), 3).unwrap().cast::<f64>();
    let schedules = net.default_schedules(2, 2).unwrap();
    let (y, st) = prepared.run(&x, &schedules, ExecMode::Instrumented).unwrap();
    let macs: u64 = st.iter().map(|s| s.multiply_accumulates).sum();
    assert_eq!(macs, stats.flops_after);

    let mut want = x;
    for (c, l) in model.convs().iter().zip(&net.layers) {
        let w = c.weights.cast::<f32>().cast::<f64>();
        let spec = l.spec.clone();
        want = relu(conv3d_dense(&want, &w, &spec).unwrap());
    }
    assert!(max_rel_diff(y.data(), want.data()) < 1e-9);
}
