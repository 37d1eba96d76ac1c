use dimts::gradcheck::{check_gradient, random_array};
use dimts::network::{DimTs, ModelConfig};
use dimts::{DenseArray, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        state_dim: 4,
        time_features: 16,
        diffusion_steps: 50,
        seed,
        ..ModelConfig::new(8, 3)
    }
}

fn perturbed(seed: u64) -> DimTs {
    let mut model = DimTs::new(config(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let names = model.params().names().to_vec();
    for name in names.iter().filter(|n| n.contains(".ada.")) {
        let v = model.params_mut().by_name_mut(name).unwrap();
        *v = random_array(&mut rng, v.shape()).map(|x| 0.3 * x);
    }
    model.set_channel_order(vec![2, 0, 1]).unwrap();
    model
}

/// Loss `mean((x_out - target)^2)` with the named parameter swapped for `w`.
fn loss_and_grad(
    model: &DimTs,
    name: &str,
    w: &DenseArray,
    x: &DenseArray,
    target: &DenseArray,
) -> (f64, DenseArray) {
    let mut m = model.clone();
    *m.params_mut().by_name_mut(name).unwrap() = w.clone();
    let mut g = Graph::new();
    let p = m.params().bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = m.forward(&mut g, &p, xv, 17).unwrap();
    let tv = g.constant(target.clone());
    let d = g.sub(out, tv).unwrap();
    let sq = g.square(d);
    let loss = g.mean(sq);
    g.backward(loss).unwrap();
    let id = m.params().id(name).unwrap();
    (g.value(loss).data()[0], g.grad(p.var(id)))
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let model = perturbed(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_array(&mut rng, &[8, 3]);
    let target = random_array(&mut rng, &[8, 3]);
    for name in model.params().names() {
        let w0 = model.params().by_name(name).unwrap().clone();
        let r = check_gradient(
            |w| loss_and_grad(&model, name, w, &x, &target),
            &w0,
            1e-6,
            1e-3,
        );
        match r {
            Ok(e) => println!("{name} {e:.2e}"),
            Err(e) => panic!("{name}: {e}"),
        }
    }
}
