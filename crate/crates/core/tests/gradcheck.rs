//! Central-difference verification of reverse-mode gradients across the
//! public surface: raw tensor ops, layers, reparameterized sampling,
//! log-joints, and the full ELBO estimator.

use indexmap::IndexMap;
use platedvi::dist::{Dist, NormalDiag};
use platedvi::model::{ModelDefinition, TraceSpec};
use platedvi::nn::{softplus_inv, BoundParams, Exec, Layer, ParamStore, Sequential};
use platedvi::svi::{elbo_estimate, elbo_gradients};
use platedvi::{Rng, Tape, Tensor};

const H: f64 = 1e-5;

fn assert_close(got: f64, want: f64, what: &str) {
    let tol = 1e-5 * want.abs().max(got.abs()).max(1.0);
    assert!(
        (got - want).abs() <= tol,
        "{what}: analytic {got} vs finite difference {want}"
    );
}

/// Check d loss(x) / dx against central differences, component by component.
fn check_wrt_input<F>(what: &str, shape: &[usize], values: &[f64], loss: F)
where
    F: Fn(&Tensor) -> Tensor,
{
    let tape = Tape::new();
    let x = tape.watch(&Tensor::from_vec(shape.to_vec(), values.to_vec()).unwrap());
    let grads = tape.backward(&loss(&x)).unwrap();
    let analytic = grads.wrt(&x).unwrap().to_vec();
    for i in 0..values.len() {
        let eval = |delta: f64| {
            let mut bumped = values.to_vec();
            bumped[i] += delta;
            loss(&Tensor::from_vec(shape.to_vec(), bumped).unwrap()).item()
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        assert_close(analytic[i], fd, &format!("{what}[{i}]"));
    }
}

/// Check d loss(store) / d(param component) for every registered parameter,
/// where the loss reads parameters through a BoundParams view.
fn check_wrt_store<F>(what: &str, store: &ParamStore, loss: F)
where
    F: Fn(&BoundParams) -> Tensor,
{
    let tape = Tape::new();
    let bound = BoundParams::watch(store, &tape);
    let grads = tape.backward(&loss(&bound)).unwrap();
    for (name, leaf) in bound.iter() {
        let analytic = grads.wrt(leaf).unwrap().to_vec();
        let base = leaf.to_vec();
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut bumped = store.clone();
                let mut values = base.clone();
                values[i] += delta;
                bumped
                    .set(name, Tensor::from_vec(leaf.shape().to_vec(), values).unwrap())
                    .unwrap();
                loss(&BoundParams::detach(&bumped)).item()
            };
            let fd = (eval(H) - eval(-H)) / (2.0 * H);
            assert_close(analytic[i], fd, &format!("{what} {name}[{i}]"));
        }
    }
}

#[test]
fn unary_ops_match_finite_differences() {
    let positive = [0.4, 1.7, 2.2];
    let mixed = [-0.7, 0.3, 1.1];
    check_wrt_input("exp", &[3], &mixed, |x| x.exp().sum());
    check_wrt_input("log", &[3], &positive, |x| x.log().sum());
    check_wrt_input("neg", &[3], &mixed, |x| x.neg().sum());
    check_wrt_input("tanh", &[3], &mixed, |x| x.tanh().sum());
    check_wrt_input("sigmoid", &[3], &mixed, |x| x.sigmoid().sum());
    check_wrt_input("softplus", &[3], &[-2.0, 0.5, 3.0], |x| x.softplus().sum());
    check_wrt_input("square", &[3], &mixed, |x| x.square().sum());
    // relu is checked away from its kink.
    check_wrt_input("relu", &[4], &[-1.5, -0.2, 0.4, 2.0], |x| x.relu().sum());
}

#[test]
fn binary_ops_match_finite_differences() {
    let a = [0.6, 1.2, 0.9, 1.8, 0.7, 1.4];
    let b = [1.1, 0.8, 1.6];
    for (name, f) in [
        ("add", (|x: &Tensor, y: &Tensor| x.add(y).unwrap()) as fn(&Tensor, &Tensor) -> Tensor),
        ("sub", |x, y| x.sub(y).unwrap()),
        ("mul", |x, y| x.mul(y).unwrap()),
        ("div", |x, y| x.div(y).unwrap()),
    ] {
        // Broadcast [2,3] with [3]: gradient of the left operand.
        let rhs = Tensor::vector(b.to_vec());
        check_wrt_input(&format!("{name} lhs"), &[2, 3], &a, |x| {
            f(x, &rhs).square().sum()
        });
        // And of the broadcast right operand.
        let lhs = Tensor::from_vec(vec![2, 3], a.to_vec()).unwrap();
        check_wrt_input(&format!("{name} rhs"), &[3], &b, |y| {
            f(&lhs, y).square().sum()
        });
        // Scalar broadcast.
        check_wrt_input(&format!("{name} scalar"), &[], &[0.7], |s| {
            f(&lhs, s).square().sum()
        });
    }
}

#[test]
fn matmul_and_reductions_match_finite_differences() {
    let a = [0.3, -0.8, 1.1, 0.5, 0.2, -0.4];
    let b = [1.2, 0.1, -0.6, 0.9, 0.4, -1.3];
    let bt = Tensor::from_vec(vec![3, 2], b.to_vec()).unwrap();
    check_wrt_input("matmul lhs", &[2, 3], &a, |x| x.matmul(&bt).unwrap().square().sum());
    let at = Tensor::from_vec(vec![2, 3], a.to_vec()).unwrap();
    check_wrt_input("matmul rhs", &[3, 2], &b, |y| at.matmul(y).unwrap().square().sum());

    check_wrt_input("mean", &[2, 3], &a, |x| x.mean().square());
    check_wrt_input("sum_axis", &[2, 3], &a, |x| {
        x.sum_axis(0).unwrap().square().sum()
    });
    check_wrt_input("mean_axis", &[2, 3], &a, |x| {
        x.mean_axis(1).unwrap().square().sum()
    });
}

#[test]
fn fan_out_reuse_accumulates_correctly() {
    check_wrt_input("fan-out", &[3], &[0.4, -0.9, 1.3], |x| {
        x.exp().add(&x.square()).unwrap().mul(&x.sigmoid()).unwrap().sum()
    });
}

#[test]
fn distribution_terms_match_finite_differences() {
    // log_prob as a function of loc, scale, and the value itself.
    let loc = [0.2, -0.5];
    let scale = [0.8, 1.3];
    let value = [0.9, 0.1];
    let mk = |l: &Tensor, s: &Tensor| NormalDiag::new(l.clone(), s.clone()).unwrap();

    let s0 = Tensor::vector(scale.to_vec());
    let v0 = Tensor::vector(value.to_vec());
    check_wrt_input("log_prob wrt loc", &[2], &loc, |l| {
        mk(l, &s0).log_prob(&v0).unwrap().sum()
    });
    let l0 = Tensor::vector(loc.to_vec());
    check_wrt_input("log_prob wrt scale", &[2], &scale, |s| {
        mk(&l0, s).log_prob(&v0).unwrap().sum()
    });
    check_wrt_input("log_prob wrt value", &[2], &value, |v| {
        mk(&l0, &s0).log_prob(v).unwrap().sum()
    });

    // Reparameterized draw with frozen noise.
    let eps = Tensor::vector(vec![0.7, -1.2]);
    check_wrt_input("rsample wrt loc", &[2], &loc, |l| {
        mk(l, &s0).rsample_with_eps(&eps).square().sum()
    });
    check_wrt_input("rsample wrt scale", &[2], &scale, |s| {
        mk(&l0, s).rsample_with_eps(&eps).square().sum()
    });

    // Bernoulli log-likelihood as a function of logits.
    let logits = [-1.4, 0.3, 2.0];
    let v = Tensor::vector(vec![1.0, 0.0, 1.0]);
    check_wrt_input("bernoulli wrt logits", &[3], &logits, |t| {
        platedvi::dist::Bernoulli::from_logits(t.clone())
            .log_prob(&v)
            .unwrap()
            .sum()
    });
}

#[test]
fn dense_network_matches_finite_differences() {
    let mut store = ParamStore::new();
    let net = Sequential::new(vec![
        Layer::dense(&mut store, "l0", 3, 4, platedvi::nn::Activation::Tanh).unwrap(),
        Layer::dense(&mut store, "l1", 4, 2, platedvi::nn::Activation::Identity).unwrap(),
    ]);
    net.init_parameters(&mut store, &Rng::from_seed(2)).unwrap();
    let x = Tensor::from_vec(vec![2, 3], vec![0.3, -0.7, 1.2, 0.0, 0.8, -1.1]).unwrap();
    check_wrt_store("dense net", &store, |bound| {
        let mut exec = Exec {
            params: bound,
            rng: Rng::from_seed(0),
        };
        net.forward(&x, &mut exec).unwrap().square().mean()
    });
}

#[test]
fn bayesian_layer_matches_finite_differences() {
    let mut store = ParamStore::new();
    let net = Sequential::new(vec![
        Layer::bayesian(&mut store, "b0", 2, 3, platedvi::nn::Activation::Relu).unwrap(),
    ]);
    net.init_parameters(&mut store, &Rng::from_seed(3)).unwrap();
    let x = Tensor::from_vec(vec![2, 2], vec![0.9, -0.4, 0.25, 1.3]).unwrap();
    // A fixed executor seed freezes the weight noise, making the loss a
    // smooth function of the variational parameters.
    check_wrt_store("bayesian forward", &store, |bound| {
        let mut exec = Exec {
            params: bound,
            rng: Rng::from_seed(11),
        };
        let fit_term = net.forward(&x, &mut exec).unwrap().square().mean();
        fit_term.add(&net.kl_penalty(bound).unwrap()).unwrap()
    });
}

#[test]
fn log_joint_matches_finite_differences() {
    // z1 ~ N(0,1); z2 ~ N(z1, 0.8); plate: x ~ N(z2, 1.2).
    let model = ModelDefinition::new(|ctx| {
        let z1 = ctx.rv(
            "z1",
            Dist::Normal(NormalDiag::new(Tensor::scalar(0.0), Tensor::scalar(1.0)).unwrap()),
        )?;
        let z2 = ctx.rv(
            "z2",
            Dist::Normal(NormalDiag::new(z1, Tensor::scalar(0.8)).unwrap()),
        )?;
        ctx.plate(|pl| {
            pl.rv(
                "x",
                Dist::Normal(NormalDiag::new(z2.clone(), Tensor::scalar(1.2)).unwrap()),
            )?;
            Ok(())
        })
    });
    let observations: IndexMap<String, Tensor> =
        [("x".to_string(), Tensor::vector(vec![0.4, -0.2, 1.5]))].into();

    let latents = [("z1", 0.3), ("z2", -0.6)];
    for (target, _) in latents {
        let eval = |zs: &[(&str, f64)]| {
            let injected: IndexMap<String, Tensor> = zs
                .iter()
                .map(|(n, v)| (n.to_string(), Tensor::scalar(*v)))
                .collect();
            model
                .trace_with(TraceSpec {
                    observations: Some(&observations),
                    injected: Some(&injected),
                    ..TraceSpec::new(3, Rng::from_seed(0))
                })
                .unwrap()
                .log_joint()
                .unwrap()
                .item()
        };
        let bump = |delta: f64| {
            let moved: Vec<(&str, f64)> = latents
                .iter()
                .map(|&(n, v)| (n, if n == target { v + delta } else { v }))
                .collect();
            eval(&moved)
        };
        let fd = (bump(H) - bump(-H)) / (2.0 * H);

        let tape = Tape::new();
        let tracked: IndexMap<String, Tensor> = latents
            .iter()
            .map(|&(n, v)| (n.to_string(), tape.watch(&Tensor::scalar(v))))
            .collect();
        let lj = model
            .trace_with(TraceSpec {
                observations: Some(&observations),
                injected: Some(&tracked),
                ..TraceSpec::new(3, Rng::from_seed(0))
            })
            .unwrap()
            .log_joint()
            .unwrap();
        let grads = tape.backward(&lj).unwrap();
        let analytic = grads.wrt(&tracked[target]).unwrap().item();
        assert_close(analytic, fd, &format!("log_joint wrt {target}"));
    }
}

#[test]
fn elbo_gradients_match_finite_differences() {
    // Free mean-field pair.
    let p = ModelDefinition::new(|ctx| {
        let z = ctx.rv(
            "z",
            Dist::Normal(NormalDiag::new(Tensor::scalar(0.0), Tensor::scalar(1.0)).unwrap()),
        )?;
        ctx.plate(|pl| {
            pl.rv(
                "x",
                Dist::Normal(NormalDiag::new(z.clone(), Tensor::scalar(1.0)).unwrap()),
            )?;
            Ok(())
        })
    });
    let mut store = ParamStore::new();
    store.register("z.loc", Tensor::scalar(0.4)).unwrap();
    store
        .register("z.rho", Tensor::scalar(softplus_inv(0.7)))
        .unwrap();
    let q = ModelDefinition::with_params(
        |ctx| {
            let loc = ctx.param("z.loc")?;
            let scale = ctx.param("z.rho")?.softplus();
            ctx.rv("z", Dist::Normal(NormalDiag::new(loc, scale)?))?;
            Ok(())
        },
        store,
    );
    let observations: IndexMap<String, Tensor> =
        [("x".to_string(), Tensor::vector(vec![0.9, -0.1, 0.5, 1.4]))].into();
    let rng = Rng::from_seed(40);
    let report = elbo_gradients(&p, &q, &observations, 3, &rng).unwrap();

    for name in ["z.loc", "z.rho"] {
        let base = q.store().lock().unwrap().get(name).unwrap().item();
        let eval = |delta: f64| {
            q.store()
                .lock()
                .unwrap()
                .set(name, Tensor::scalar(base + delta))
                .unwrap();
            let v = elbo_estimate(&p, &q, &observations, 3, &rng).unwrap();
            q.store()
                .lock()
                .unwrap()
                .set(name, Tensor::scalar(base))
                .unwrap();
            v
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        assert_close(report.q_grads[name].item(), fd, &format!("elbo wrt {name}"));
    }
}
