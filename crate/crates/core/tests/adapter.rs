use clorae_core::gradcheck::finite_diff_check;
use clorae_core::rng::gaussian;
use clorae_core::{
    default_layer_groups, mim_loss, routing_report, Adam, AdamConfig, CloraeConfig, CloraeLinear, ForwardCtx, GateMode,
    Graph, Linear, LoraLinear, ParamId, ParamStore, RoutingStats, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn layer(store: &mut ParamStore<f64>, cfg: CloraeConfig, seed: u64) -> CloraeLinear {
    let base = Linear::new(store, "l", cfg.d_in, cfg.d_out, true, seed).unwrap();
    CloraeLinear::new(store, base, "l", 0, cfg, seed).unwrap()
}

/// Replaces every trainable tensor with fresh N(0, 0.5²) values.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.trainable_ids() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = gaussian(rng, shape, 0.5);
    }
}

fn input(rng: &mut ChaCha8Rng, tokens: usize, d: usize) -> Tensor<f64> {
    gaussian(rng, [tokens, d], 1.0)
}

fn grad_norm(g: Option<&Tensor<f64>>) -> f64 {
    g.map_or(0.0, |t| t.norm())
}

#[test]
fn every_trainable_parameter_passes_the_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let mut cfg = CloraeConfig::new(8, 8, 4, 2);
    cfg.dropout = 0.0;
    let l = layer(&mut store, cfg, 1);
    randomize(&mut store, &mut rng);
    let x = input(&mut rng, 5, 8);
    let probe = gaussian::<f64>(&mut rng, [5, 8], 1.0);
    let params = store.trainable_ids();
    assert_eq!(params.len(), 2 + 4 + 1 + 3);

    let layer_report = finite_diff_check(&mut store, &params, 1e-5, |st, g| {
        let xn = g.constant(x.clone());
        let y = l.forward(g, st, xn, 1, &mut ForwardCtx::eval())?;
        let p = g.constant(probe.clone());
        let fit = g.mul(y, p)?;
        Ok(g.sum(fit))
    })
    .unwrap();
    assert!(layer_report.max_rel_error <= 1e-4, "{layer_report:?}");
    for p in layer_report.params.iter().filter(|p| p.name.starts_with("l.task0")) {
        assert_eq!(p.max_abs_analytic, 0.0, "{}", p.name);
    }

    // the teacher is detached, so it enters the head's check as data
    let teacher = {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let u = l.universal_forward(&mut g, &store, xn).unwrap().unwrap();
        g.value(u).clone()
    };
    let head = l.head.clone().unwrap();
    let head_report = finite_diff_check(&mut store, &params, 1e-5, |st, g| {
        let xn = g.constant(x.clone());
        let d = l.task_forward(g, st, xn, 1)?.expect("task experts");
        let u = g.constant(teacher.clone());
        mim_loss(g, st, d, u, &head)
    })
    .unwrap();
    assert!(head_report.max_rel_error <= 1e-4, "{head_report:?}");
    for p in head_report.params.iter().filter(|p| p.name.starts_with("l.mim") || p.name.starts_with("l.task1")) {
        assert!(p.max_abs_analytic > 0.0, "{}", p.name);
    }
}

#[test]
fn task_batches_leave_other_experts_without_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let l = layer(&mut store, CloraeConfig::new(8, 8, 6, 3), 2);
    let set = l.task_experts.clone().unwrap();
    let mut universal_live = 0;
    for _ in 0..50 {
        let tokens = rng.gen_range(1..6);
        let x = input(&mut rng, tokens, 8);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut g = Graph::new();
        let xn = g.constant(x);
        let mut ctx = ForwardCtx::train(&mut drop_rng);
        let y = l.forward(&mut g, &store, xn, 0, &mut ctx).unwrap();
        let sq = g.square(y);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        for t in 1..3 {
            for id in set.experts[t].ids() {
                assert_eq!(grad_norm(grads.param(id)), 0.0);
            }
        }
        let u = l.universal.as_ref().unwrap().factors.ids();
        if u.iter().map(|&id| grad_norm(grads.param(id))).sum::<f64>() > 0.0 {
            universal_live += 1;
        }
    }
    assert!(universal_live >= 48, "{universal_live}/50");
}

#[test]
fn gate_is_convex_and_routing_report_matches_flat_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let l = layer(&mut store, CloraeConfig::new(6, 6, 3, 3), 4);
    randomize(&mut store, &mut rng);
    let gate = l.gate.clone().unwrap();

    let mut stats = RoutingStats::new();
    let mut flat: Vec<(usize, usize, f64)> = Vec::new();
    let n_layers = 6;
    for i in 0..10_000 {
        let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (g1, g2) = gate.route(&store, &x).unwrap();
        assert!(g1 > 0.0 && g2 > 0.0);
        assert!((g1 + g2 - 1.0).abs() <= 1e-6);
        let (layer, task) = (i % n_layers, (i / 7) % 3);
        stats.record(layer, task, [g2]);
        flat.push((layer, task, g2));
    }

    let groups = default_layer_groups(n_layers);
    let report = routing_report(&stats, &groups).unwrap();
    for grp in &groups {
        for task in 0..3 {
            let hits: Vec<f64> = flat
                .iter()
                .filter(|(l, t, _)| *t == task && grp.layers.contains(l))
                .map(|r| r.2)
                .collect();
            let expect = hits.iter().sum::<f64>() / hits.len() as f64;
            let row = report.get(&grp.name, task).unwrap();
            assert_eq!(row.tokens, hits.len() as u64);
            assert!((row.task_specific - expect).abs() <= 1e-9);
            assert!((row.universal - (1.0 - expect)).abs() <= 1e-9);
        }
    }
}

#[test]
fn learned_gate_over_a_sequence_is_convex_in_the_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let l = layer(&mut store, CloraeConfig::new(4, 4, 2, 2), 9);
    randomize(&mut store, &mut rng);
    let gate = l.gate.clone().unwrap();
    let mut g = Graph::new();
    let x = g.constant(input(&mut rng, 64, 4));
    let w = gate.forward(&mut g, &store, x).unwrap();
    for row in 0..64 {
        let v = g.value(w);
        assert!((v.get2(row, 0) + v.get2(row, 1) - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #[test]
    fn trainable_counts_follow_the_closed_form(d_in in 2usize..20, d_out in 2usize..20, n in 1usize..4, k in 1usize..4) {
        let r = n * k;
        prop_assume!(r <= d_in.min(d_out));
        let mut store = ParamStore::<f64>::new();
        let l = layer(&mut store, CloraeConfig::new(d_in, d_out, r, n), 0);
        let c = l.count_trainable(&store);
        prop_assert_eq!(c.universal, r * (d_in + d_out));
        prop_assert_eq!(c.task_experts, n * (r / n) * (d_in + d_out));
        prop_assert_eq!(c.gate, 2 * d_in);
        prop_assert_eq!(c.mim_head, d_out * d_out + 2 * d_out);
        prop_assert_eq!(c.total, c.universal + c.task_experts + c.gate + c.mim_head);
        prop_assert_eq!(c.total, store.trainable_count());

        let mut vstore = ParamStore::<f64>::new();
        let base = Linear::new(&mut vstore, "l", d_in, d_out, true, 0).unwrap();
        let v = LoraLinear::new(&mut vstore, base, "l", r, r as f64, 0.1, 0).unwrap();
        prop_assert_eq!(c.lora_matrices(), 2 * v.factors.param_count());
    }
}

#[test]
fn universal_only_fixed_gate_is_vanilla_lora_bit_for_bit() {
    let (d, r) = (8, 4);
    let mut cfg = CloraeConfig::new(d, d, r, 2);
    cfg.task_experts = false;
    cfg.gate = GateMode::Fixed(1.0, 0.0);
    cfg.mim = false;

    let mut cs = ParamStore::<f64>::new();
    let cl = layer(&mut cs, cfg.clone(), 21);
    let mut vs = ParamStore::<f64>::new();
    let base = Linear::new(&mut vs, "l", d, d, true, 21).unwrap();
    let vl = LoraLinear::new(&mut vs, base, "l", r, cfg.alpha, cfg.dropout, 21).unwrap();

    let names = |s: &ParamStore<f64>| s.iter().map(|(_, p)| (p.name.clone(), p.frozen)).collect::<Vec<_>>();
    assert_eq!(names(&cs), names(&vs));

    let mut copt = Adam::new(AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() }, &cs);
    let mut vopt = Adam::new(AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() }, &vs);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for step in 0..20 {
        let x = input(&mut rng, 3, d);
        let target = input(&mut rng, 3, d);
        let drop_seed: u64 = rng.gen();
        let run = |store: &mut ParamStore<f64>, opt: &mut Adam<f64>, clorae: bool| -> u64 {
            let mut drop = ChaCha8Rng::seed_from_u64(drop_seed);
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let mut ctx = ForwardCtx::train(&mut drop);
            let y = if clorae {
                cl.forward(&mut g, store, xn, step % 2, &mut ctx).unwrap()
            } else {
                vl.forward(&mut g, store, xn, &mut ctx).unwrap()
            };
            let t = g.constant(target.clone());
            let diff = g.sub(y, t).unwrap();
            let sq = g.square(diff);
            let loss = g.mean(sq);
            store.zero_grad();
            g.backward(loss).unwrap().accumulate_into(store);
            opt.step(store);
            g.value(loss).item().to_bits()
        };
        assert_eq!(run(&mut cs, &mut copt, true), run(&mut vs, &mut vopt, false), "step {step}");
    }
    for ((_, a), (_, b)) in cs.iter().zip(vs.iter()) {
        let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
    }
}

#[test]
fn unit_fixed_gate_is_plain_addition() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cfg = CloraeConfig::new(6, 6, 4, 2);
    cfg.gate = GateMode::Fixed(1.0, 1.0);
    cfg.dropout = 0.0;
    let mut store = ParamStore::new();
    let l = layer(&mut store, cfg, 3);
    randomize(&mut store, &mut rng);
    let x = input(&mut rng, 4, 6);

    let mut g = Graph::new();
    let xn = g.constant(x);
    let y = l.forward(&mut g, &store, xn, 1, &mut ForwardCtx::eval()).unwrap();
    let base = l.base.forward(&mut g, &store, xn).unwrap();
    let u = l.universal_forward(&mut g, &store, xn).unwrap().unwrap();
    let d = l.task_forward(&mut g, &store, xn, 1).unwrap().unwrap();
    let sum = g.add(u, d).unwrap();
    let scaled = g.scale(sum, l.scaling());
    let expect = g.add(base, scaled).unwrap();
    assert_eq!(g.value(y), g.value(expect));
}

#[test]
fn optimizer_never_moves_frozen_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let l = layer(&mut store, CloraeConfig::new(6, 5, 3, 3), 6);
    let before = store.value(l.base.weight).clone();
    let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..AdamConfig::default() }, &store);
    for step in 0..10 {
        let mut drop = ChaCha8Rng::seed_from_u64(step);
        let mut g = Graph::new();
        let xn = g.constant(input(&mut rng, 4, 6));
        let mut ctx = ForwardCtx::train(&mut drop);
        let y = l.forward(&mut g, &store, xn, (step % 3) as usize, &mut ctx).unwrap();
        let sq = g.square(y);
        let loss = g.sum(sq);
        store.zero_grad();
        g.backward(loss).unwrap().accumulate_into(&mut store);
        opt.step(&mut store);
    }
    assert_eq!(store.value(l.base.weight), &before);
    assert_eq!(store.grad(l.base.weight).norm(), 0.0);
}

#[test]
fn initialization_is_seeded_and_name_keyed() {
    let values = |s: &ParamStore<f64>, ids: &[ParamId]| ids.iter().map(|&i| s.value(i).clone()).collect::<Vec<_>>();
    let mut a = ParamStore::new();
    let la = layer(&mut a, CloraeConfig::new(8, 8, 4, 2), 42);
    let mut b = ParamStore::new();
    let lb = layer(&mut b, CloraeConfig::new(8, 8, 4, 2), 42);
    assert_eq!(values(&a, &la.adapter_params()), values(&b, &lb.adapter_params()));

    // dropping every other module leaves the universal expert's draw intact
    let mut cfg = CloraeConfig::new(8, 8, 4, 2);
    cfg.task_experts = false;
    cfg.gate = GateMode::Fixed(1.0, 0.0);
    let mut c = ParamStore::new();
    let lc = layer(&mut c, cfg, 42);
    let ua = la.universal.unwrap().factors.ids();
    let uc = lc.universal.unwrap().factors.ids();
    assert_eq!(values(&a, &ua), values(&c, &uc));

    let mut d = ParamStore::new();
    let ld = layer(&mut d, CloraeConfig::new(8, 8, 4, 2), 43);
    assert_ne!(values(&a, &ua), values(&d, &ld.universal.unwrap().factors.ids()));
}
