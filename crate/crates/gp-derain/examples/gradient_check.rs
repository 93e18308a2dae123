//! Verifies the reverse-mode gradients of the full supervised loss
//! against central finite differences on a down-scaled model.
//!
//!     cargo run --example gradient_check

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gp_derain::loss::{sup_loss, FeatureExtractor};
use gp_derain::nn::{Activation, BoundModel, ModelConfig, ParamSet, Shape, Tape, Tensor};
use gp_derain::Result;

fn loss_value(
    params: &ParamSet,
    x: &Tensor,
    target: &Tensor,
    fx: &FeatureExtractor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, params);
    let pass = bound.derain_pass(&mut tape, x)?;
    let sup = sup_loss(&mut tape, pass.prediction, target, fx, 0.04)?;
    Ok(sup.total)
}

fn main() -> Result<()> {
    let cfg = ModelConfig {
        patch: 8,
        in_channels: 1,
        widths: [4, 6, 8],
        latent_dim: 16,
        activation: Activation::Relu,
        seed: 11,
    };
    let mut params = ParamSet::init(&cfg)?;
    let fx = FeatureExtractor::new(cfg.in_channels, 99);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = cfg.patch * cfg.patch;
    let x = Tensor::new(
        Shape::Chw(1, cfg.patch, cfg.patch),
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let target = Tensor::new(
        Shape::Chw(1, cfg.patch, cfg.patch),
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;

    // Analytic gradients for every parameter in one backward sweep.
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &params);
    let pass = bound.derain_pass(&mut tape, &x)?;
    let sup = sup_loss(&mut tape, pass.prediction, &target, &fx, 0.04)?;
    let grads = tape.backward(&sup.seeds)?;

    // Probe a handful of coordinates in every tensor with central
    // differences and report the worst relative disagreement.
    let names: Vec<String> = params.iter().map(|(name, _)| name.to_string()).collect();
    let h = 1e-5;
    let mut worst = (0.0_f64, String::new());
    let mut probes = 0;
    for name in &names {
        let len = params.get(name).unwrap().len();
        for _ in 0..4 {
            let i = rng.gen_range(0..len);
            let base = params.get(name).unwrap().values()[i];
            params.get_mut(name).unwrap().values_mut()[i] = base + h;
            let up = loss_value(&params, &x, &target, &fx)?;
            params.get_mut(name).unwrap().values_mut()[i] = base - h;
            let down = loss_value(&params, &x, &target, &fx)?;
            params.get_mut(name).unwrap().values_mut()[i] = base;

            let fd = (up - down) / (2.0 * h);
            let an = grads.get(name).map_or(0.0, |g| g.values()[i]);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            probes += 1;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]"));
            }
        }
    }

    println!("loss {:.6} = l1 {:.6} + 0.04 * perceptual {:.6}", sup.total, sup.l1, sup.perceptual);
    println!("checked {probes} coordinates across {} tensors", names.len());
    println!("worst relative error {:.3e} at {}", worst.0, worst.1);
    assert!(worst.0 < 1e-4, "gradient check failed");
    println!("gradients agree with finite differences");
    Ok(())
}
