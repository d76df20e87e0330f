use slimbio_core::datagen::{generate_set, PhantomSpec, Task};
use slimbio_core::executor;
use slimbio_core::metrics::pearson;
use slimbio_core::trainer::{finetune, LossKind, SgdConfig};
use slimbio_core::zoo::{unet, UnetConfig};

#[test]
fn labelfree_phantoms_are_learnable() {
    let spec = PhantomSpec::default_for(Task::Labelfree3d).with_shape(&[1, 1, 16, 32, 32]);
    let set = generate_set(&spec, 12).unwrap();
    let pairs: Vec<_> = set.iter().map(|p| (p.input.clone(), p.target.clone())).collect();
    let (train, held) = pairs.split_at(8);
    let g = unet(&UnetConfig { dims: 3, base: 4, levels: 2, ..Default::default() });
    let cfg = SgdConfig { lr: 0.01, momentum: 0.9, epochs: 200, batch_size: 4, ..Default::default() };
    let out = finetune(&g, train, LossKind::Mse, &cfg).unwrap();
    assert!(out.losses.last().unwrap() < &out.losses[0]);
    for (x, y) in held {
        let r = pearson(&executor::run_single(&out.graph, x).unwrap(), y).unwrap();
        assert!(r >= 0.8, "held-out Pearson {r}");
    }
}
