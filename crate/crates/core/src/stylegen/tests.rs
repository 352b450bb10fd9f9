use super::*;
use crate::autodiff::finite_diff_check;
use crate::deform::lattice_margin;
use crate::tensor::Tensor;

fn small(groups: &[Group]) -> GeneratorConfig {
    GeneratorConfig {
        resolution: 8,
        channels: vec![3, 3],
        z_dim: 4,
        w_dim: 4,
        m_dim: 2,
        ..GeneratorConfig::default()
    }
    .with_groups(groups)
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, &mut Rng::new(seed)).unwrap()
}

/// Gives every offset head random weights so offsets are non-zero.
fn wake_offsets(g: &mut Generator, scale: f64, seed: u64) {
    for (i, (name, t)) in g.params.iter_mut().enumerate() {
        if name.ends_with(".offset.weight") || name.ends_with(".offset.bias") {
            *t = rand(t.shape(), seed + i as u64).map(|v| scale * v);
        }
    }
}

/// Max relative error over all parameters in `params` of a scalar loss.
fn params_gradcheck(params: &Params, loss: &dyn Fn(&mut Tape, &Bound) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, params, true);
    let l = loss(&mut tape, &b).unwrap();
    let vars = b.vars();
    let grads = tape.backward(l, &vars, false).unwrap();
    let mut worst = 0.0f64;
    for (name, v) in b.iter() {
        let analytic = tape.value(grads.get(*v).unwrap()).unwrap().clone();
        let mut f = |p: &Tensor| {
            let mut ps = params.clone();
            ps.insert(name.clone(), p.clone());
            let mut t = Tape::no_grad();
            let bb = Bound::new(&mut t, &ps, false);
            let l = loss(&mut t, &bb)?;
            t.value(l)?.item()
        };
        let e = finite_diff_check(&mut f, &params[name], &analytic, 1e-5).unwrap();
        assert!(e < 1e-4, "{name}: {e}");
        worst = worst.max(e);
    }
    worst
}

#[test]
fn groups_parse_and_partition() {
    assert_eq!(Group::of_resolution(4), Group::Low);
    assert_eq!(Group::of_resolution(8), Group::Low);
    assert_eq!(Group::of_resolution(16), Group::Mid);
    assert_eq!(Group::of_resolution(32), Group::High);
    assert_eq!("mid".parse::<Group>().unwrap(), Group::Mid);
    assert!("middle".parse::<Group>().is_err());
    assert_eq!(groups_label(&BTreeSet::new()), "none");
    assert_eq!(groups_label(&[Group::Mid, Group::Low].into_iter().collect()), "low+mid");
}

#[test]
fn config_validation() {
    assert!(GeneratorConfig::default().validate().is_ok());
    assert_eq!(GeneratorConfig::default().resolutions(), vec![4, 8, 16, 32]);
    let mut c = GeneratorConfig::default();
    c.channels.pop();
    assert!(c.validate().is_err());
    assert!(GeneratorConfig::flat(12, 8).validate().is_err());
}

#[test]
fn mapping_contracts() {
    let g = Generator::init(small(&[]), 1).unwrap();
    let w = g.mapping(&Tensor::zeros(&[2, 4])).unwrap();
    assert!(w.data().iter().all(|&v| v == 0.0));
    let z = rand(&[3, 4], 2);
    assert_eq!(g.mapping(&z).unwrap(), g.mapping(&z).unwrap());
    assert!(g.mapping(&Tensor::zeros(&[2, 5])).is_err());
}

#[test]
fn mapping_jacobian_gradcheck() {
    let g = Generator::init(small(&[]), 3).unwrap();
    let z = rand(&[2, 4], 4);
    let r = rand(&[2, 4], 5);
    let f = |t: &mut Tape, b: &Bound, zv: Var| -> Result<Var> {
        let w = generator::mapping_var(t, b, zv)?;
        let rv = t.constant(r.clone());
        let p = t.mul(w, rv)?;
        t.sum(p)
    };
    let mut tape = Tape::new();
    let b = Bound::new(&mut tape, &g.params, false);
    let zv = tape.leaf(z.clone());
    let l = f(&mut tape, &b, zv).unwrap();
    let gz = tape.backward(l, &[zv], false).unwrap().get(zv).unwrap();
    let analytic = tape.value(gz).unwrap().clone();
    let mut num = |p: &Tensor| {
        let mut t = Tape::no_grad();
        let b = Bound::new(&mut t, &g.params, false);
        let zv = t.constant(p.clone());
        let l = f(&mut t, &b, zv)?;
        t.value(l)?.item()
    };
    assert!(finite_diff_check(&mut num, &z, &analytic, 1e-5).unwrap() < 1e-4);
}

#[test]
fn fresh_mtm_block_equals_plain_block() {
    let g = Generator::init(small(&[Group::Low]), 6).unwrap();
    let w = g.mapping(&rand(&[2, 4], 7)).unwrap();
    let feat = rand(&[2, 3, 4, 4], 8);
    let a = g.synthesis_block(8, &feat, &w, true).unwrap();
    let b = g.synthesis_block(8, &feat, &w, false).unwrap();
    assert_eq!(a.shape(), &[2, 3, 8, 8]);
    assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
    let plain = Generator::init(small(&[]), 6).unwrap();
    assert!(plain.synthesis_block(8, &feat, &w, true).is_err());
}

#[test]
fn block_gradcheck_with_live_offsets() {
    let mut g = Generator::init(small(&[Group::Low]), 9).unwrap();
    wake_offsets(&mut g, 0.4, 10);
    let mut seed = 11;
    let (feat, z) = loop {
        let feat = rand(&[1, 3, 4, 4], seed);
        let z = rand(&[1, 4], seed + 1);
        let out = g.generate_full(&z, None, SynthOptions::default()).unwrap();
        let mut t = Tape::no_grad();
        let b = Bound::new(&mut t, &g.params, false);
        let fv = t.constant(feat.clone());
        let zv = t.constant(z.clone());
        let w = generator::mapping_var(&mut t, &b, zv).unwrap();
        let (_, off, _) = generator::synthesis_block_var(&mut t, &b, 8, fv, w, w, true, SynthOptions::default()).unwrap();
        let m = lattice_margin(t.value(off.unwrap()).unwrap());
        if m >= 1e-3 && out.image.is_finite() {
            break (feat, z);
        }
        seed += 2;
    };
    let block_params: Params = g
        .params
        .iter()
        .filter(|(k, _)| k.starts_with("g.b8.") || k.starts_with("g.mapping"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let loss = |t: &mut Tape, b: &Bound| -> Result<Var> {
        let fv = t.constant(feat.clone());
        let zv = t.constant(z.clone());
        let w = generator::mapping_var(t, b, zv)?;
        let (y, _, _) = generator::synthesis_block_var(t, b, 8, fv, w, w, true, SynthOptions::default())?;
        let y = t.tanh(y)?;
        t.sum(y)
    };
    params_gradcheck(&block_params, &loss);
}

#[test]
fn generate_contracts() {
    let g = Generator::init(small(&[Group::Low]), 12).unwrap();
    let z = rand(&[3, 4], 13);
    let img = g.generate(&z).unwrap();
    assert_eq!(img.shape(), &[3, 1, 8, 8]);
    assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(img, g.generate(&z).unwrap());
    let d = img.outer_slice(0).iter().zip(img.outer_slice(1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(d > 0.0);
}

#[test]
fn placement_audit() {
    let cfg = GeneratorConfig::default().with_groups(&[Group::Low]);
    let specs = cfg.param_specs();
    let heads: Vec<&String> = specs.keys().filter(|k| k.ends_with(".offset.weight")).collect();
    assert_eq!(heads, vec!["g.b4.conv0.offset.weight", "g.b8.conv0.offset.weight"]);
    let all = GeneratorConfig::default().with_groups(&Group::ALL);
    assert_eq!(all.param_specs().keys().filter(|k| k.ends_with(".offset.weight")).count(), 4);
    assert!(specs.keys().all(|k| !k.contains("conv1.offset")));
}

#[test]
fn fresh_networks_match_baseline() {
    let z = rand(&[2, 4], 14);
    let base = Generator::init(small(&[]), 15).unwrap().generate(&z).unwrap();
    for groups in [vec![Group::Low], Group::ALL.to_vec()] {
        let g = Generator::init(small(&groups), 15).unwrap();
        assert!(g.generate(&z).unwrap().max_abs_diff(&base).unwrap() <= 1e-12);
    }
}

#[test]
fn config_inferred_from_params() {
    let mut cfg = small(&[Group::Low]);
    cfg.video = true;
    let g = Generator::init(cfg.clone(), 16).unwrap();
    let back = Generator::from_params(&g.params).unwrap();
    assert_eq!(back.config, cfg);
    let mut broken = g.params.clone();
    broken.remove("g.b8.conv0.offset.bias");
    assert!(Generator::from_params(&broken).is_err());
}

fn video_gen() -> Generator {
    let mut cfg = small(&[Group::Low]);
    cfg.video = true;
    let mut g = Generator::init(cfg, 17).unwrap();
    wake_offsets(&mut g, 0.3, 18);
    g
}

#[test]
fn frozen_motion_gives_identical_frames() {
    let g = video_gen();
    let z = rand(&[1, 4], 19);
    let out = g.generate_video(&z, &[Tensor::zeros(&[4, 2])], SynthOptions::default()).unwrap();
    for f in 1..4 {
        assert_eq!(out.image.outer_slice(f), out.image.outer_slice(0));
    }
}

#[test]
fn motion_moves_only_offsets() {
    let g = video_gen();
    let z = rand(&[1, 4], 20);
    let m = motion_codes(&mut Rng::new(21), 4, 2).unwrap();
    let out = g.generate_video(&z, &[m], SynthOptions::default()).unwrap();
    for (_, off) in &out.offsets {
        let t = off.tensor();
        let d = t.outer_slice(0).iter().zip(t.outer_slice(1)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(d > 0.0);
    }
    for (_, s) in &out.main_styles {
        for f in 1..4 {
            assert_eq!(s.outer_slice(f), s.outer_slice(0));
        }
    }
    let zeroed = g.generate_video(&z, &[motion_codes(&mut Rng::new(21), 4, 2).unwrap()], SynthOptions { offsets_enabled: false }).unwrap();
    for f in 1..4 {
        assert_eq!(zeroed.image.outer_slice(f), zeroed.image.outer_slice(0));
    }
}

#[test]
fn single_frame_video_equals_generate() {
    let g = video_gen();
    let z = rand(&[1, 4], 22);
    let m = motion_codes(&mut Rng::new(23), 1, 2).unwrap();
    let v = g.generate_video(&z, std::slice::from_ref(&m), SynthOptions::default()).unwrap();
    let i = g.generate_full(&z, Some(&m), SynthOptions::default()).unwrap();
    assert_eq!(v.image, i.image);
}

#[test]
fn motion_walk_is_smooth_and_seeded() {
    let a = motion_codes(&mut Rng::new(1), 5, 3).unwrap();
    assert_eq!(a, motion_codes(&mut Rng::new(1), 5, 3).unwrap());
    assert_eq!(a.shape(), &[5, 3]);
    assert!(motion_codes(&mut Rng::new(1), 0, 3).is_err());
}

#[test]
fn discriminator_contracts_and_input_gradcheck() {
    let cfg = DiscriminatorConfig {
        resolution: 8,
        channels: 3,
        in_channels: 1,
        prefix: "d".into(),
    };
    let d = Discriminator::init(cfg.clone(), 24).unwrap();
    let x = rand(&[2, 1, 8, 8], 25);
    let y = d.discriminate(&x).unwrap();
    assert_eq!(y.shape(), &[2]);
    assert_eq!(y, d.discriminate(&x).unwrap());
    assert!(d.discriminate(&rand(&[2, 1, 4, 4], 1)).is_err());

    let f = |t: &mut Tape, xv: Var| -> Result<Var> {
        let b = Bound::new(t, &d.params, false);
        let y = discriminate_var(t, &b, &cfg, xv)?;
        t.sum(y)
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let l = f(&mut tape, xv).unwrap();
    let g = tape.backward(l, &[xv], false).unwrap().get(xv).unwrap();
    let analytic = tape.value(g).unwrap().clone();
    let mut num = |p: &Tensor| {
        let mut t = Tape::no_grad();
        let xv = t.constant(p.clone());
        let l = f(&mut t, xv)?;
        t.value(l)?.item()
    };
    assert!(finite_diff_check(&mut num, &x, &analytic, 1e-5).unwrap() < 1e-4);
    let loss = |t: &mut Tape, b: &Bound| -> Result<Var> {
        let xv = t.constant(x.clone());
        let y = discriminate_var(t, b, &cfg, xv)?;
        t.sum(y)
    };
    params_gradcheck(&d.params, &loss);
}

#[test]
fn default_parameter_overhead() {
    // Counted from the layout, independent of any forward pass.
    let base = Generator::init(GeneratorConfig::default(), 0).unwrap();
    let low = Generator::init(GeneratorConfig::default().with_groups(&[Group::Low]), 0).unwrap();
    assert_eq!(low.param_count() - base.param_count(), low.offset_param_count());
    assert_eq!(low.offset_param_count(), 2 * (64 * 18 * 9 + 18 + 64 * 64 + 64));
}
