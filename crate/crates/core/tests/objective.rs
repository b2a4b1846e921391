mod common;

use xraygan::autograd::{backward, finite_difference, max_relative_error, Tensor, Var};
use xraygan::corpus::View;
use xraygan::gan::{DiscriminatorParams, GanConfig, GeneratorParams};
use xraygan::nn::{load_named, named_tensors, parameter_count, Parameterized};
use xraygan::objective::{
    critic_loss, generator_adversarial_loss, reconstruction_loss, total_generator_loss, view_consistency_reward,
    LossWeights,
};
use xraygan::vcn::{init_vcn, VcnConfig};

fn toy() -> GanConfig {
    GanConfig {
        n_stages: 1,
        base_resolution: 8,
        gen_channels: vec![3],
        disc_channels: vec![3],
        cond_channels: 2,
        base_blocks: 1,
        refine_blocks: 0,
        patch_downsamples: 1,
        ..GanConfig::default()
    }
}

/// Checks `d f / d theta` for every parameter of `module` against central differences.
fn check<M: Parameterized + Clone>(module: &M, f: impl Fn(&M) -> Var) -> f64 {
    let grads = backward(&f(module));
    let base = named_tensors(module);
    let mut analytic = Vec::new();
    module.visit("", &mut |n, v| analytic.push((n.to_string(), grads.get_or_zero(v))));
    let mut worst = 0.0f64;
    for (name, a) in analytic {
        let numeric = finite_difference(&base[&name], 1e-6, |t| {
            let mut m = module.clone();
            let mut p = base.clone();
            p.insert(name.clone(), t.clone());
            load_named(&mut m, &p).unwrap();
            f(&m).item()
        });
        worst = worst.max(max_relative_error(&a, &numeric, 1e-3));
    }
    worst
}

#[test]
fn generator_loss_gradients() {
    let cfg = toy();
    let mut rng = common::rng(31);
    let g = GeneratorParams::new(&cfg, 3, 1).unwrap();
    let d = DiscriminatorParams::new(&cfg, 3, 2).unwrap();
    let mut vcn = init_vcn(
        &VcnConfig {
            widths: vec![2],
            embed_dim: 2,
            ..Default::default()
        },
        1,
        8,
        3,
    )
    .unwrap();
    vcn.weights = Var::param(Tensor::new(&[2, 1], vec![0.7, -0.4]));
    let vcn = vcn.frozen();
    assert!(parameter_count(&g) <= 2000, "{}", parameter_count(&g));
    let c = Var::constant(common::random_tensor(&mut rng, &[2, 3], 1.0));
    let real = Var::constant(common::random_tensor(&mut rng, &[2, 1, 8, 8], 0.5));
    let weights = LossWeights::default();
    let err = check(&g, |g| {
        let f = g.generate_base(&c, View::Frontal, None).unwrap();
        let l = g.generate_base(&c, View::Lateral, None).unwrap();
        let adv = generator_adversarial_loss(&xraygan::nn::frozen(d.get(1, View::Frontal)), &f, &c).unwrap();
        let recon = reconstruction_loss(&f, &real)
            .unwrap()
            .add(&reconstruction_loss(&l, &real).unwrap());
        let vc = view_consistency_reward(&f, &l, 1, &vcn).unwrap();
        total_generator_loss(&adv, &recon, &vc, &weights).unwrap()
    });
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn critic_loss_gradients_including_penalty() {
    let cfg = toy();
    let mut rng = common::rng(32);
    let d = DiscriminatorParams::new(&cfg, 3, 4).unwrap();
    let critic = d.get(1, View::Frontal).clone();
    assert!(parameter_count(&critic) <= 2000);
    let c = Var::constant(common::random_tensor(&mut rng, &[3, 3], 1.0));
    let real = Var::constant(common::random_tensor(&mut rng, &[3, 1, 8, 8], 0.5));
    let fake = Var::constant(common::random_tensor(&mut rng, &[3, 1, 8, 8], 0.5));
    let eps = Tensor::new(&[3], vec![0.2, 0.5, 0.9]);
    let err = check(&critic, |m| critic_loss(m, &real, &fake, &c, &eps, 10.0).unwrap().0);
    assert!(err < 1e-3, "relative error {err}");
}
