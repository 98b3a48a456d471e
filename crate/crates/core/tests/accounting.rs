//! Planner counts against enumeration of real parameters and the
//! multiply-accumulate tally of real forward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thrifty::macs;
use thrifty::model::{init_params, predict};
use thrifty::ops::batchnorm::Mode;
use thrifty::planner::{make_schedule, mac_count, param_count, solve_filters, BudgetConvention, Placement};
use thrifty::{ConvMode, Dims, Tensor4, ThriftyConfig};

fn random_config(rng: &mut ChaCha8Rng, max_f: usize, hw: (usize, usize)) -> ThriftyConfig {
    let t = rng.gen_range(1..=12);
    let h = rng.gen_range(0..=10);
    let mut c = ThriftyConfig::new(rng.gen_range(1..=max_f), t, h, rng.gen_range(2..=12));
    c.conv_mode = if rng.gen_bool(0.5) { ConvMode::Grouped } else { ConvMode::Classical };
    let k = [1, 3, 5][rng.gen_range(0..3)];
    c.kernel = (k, [1, 3, 5][rng.gen_range(0..3)]);
    c.input_channels = rng.gen_range(1..=4).min(c.filters);
    let max_pools = (hw.0.min(hw.1) as f64).log2().floor() as usize;
    let n = rng.gen_range(0..=max_pools.min(t));
    let placement = if rng.gen_bool(0.5) { Placement::Regular } else { Placement::FrontLoaded };
    c.schedule = make_schedule(t, n, &placement, hw).unwrap();
    c
}

#[test]
fn param_count_equals_enumeration_and_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..300 {
        let c = random_config(&mut rng, 48, (32, 32));
        let p = param_count(&c);
        let params = init_params::<f32>(&c, i).unwrap();
        assert_eq!(p.total, params.trainable_count() as u64, "{c:?}");

        let (f, t, h) = (c.filters as u64, c.iterations as u64, c.history as u64);
        let ab = (c.kernel.0 * c.kernel.1) as u64;
        let core = match c.conv_mode {
            ConvMode::Classical => f * f * ab + 2 * f * t,
            ConvMode::Grouped => f * (ab + f) + 2 * f * t,
        };
        assert_eq!(p.core, core);
        assert_eq!(p.table1_total, core + h * t);
        let alpha = if h > 0 { t * (h + 1) } else { 0 };
        assert_eq!(p.total, core + alpha + f * c.num_classes as u64 + c.num_classes as u64);
    }
}

#[test]
fn worked_examples() {
    let c = ThriftyConfig::new(64, 15, 5, 10);
    let p = param_count(&c);
    assert_eq!((p.core, p.table1_total, p.total), (38_784, 38_859, 39_524));
    assert_eq!(solve_filters(40_000, &c, BudgetConvention::Full).unwrap(), 64);
    assert_eq!(solve_filters(40_000, &c, BudgetConvention::Table1).unwrap(), 64);
}

#[test]
fn mac_count_equals_forward_tally() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..60 {
        let hw = (rng.gen_range(4..=16), rng.gen_range(4..=16));
        let c = random_config(&mut rng, 8, hw);
        let params = init_params::<f64>(&c, i).unwrap();
        let n = rng.gen_range(1..=3);
        let x = Tensor4::<f64>::uniform(Dims::new(n, c.input_channels, hw.0, hw.1), 1.0, &mut rng);
        let (out, tally) = macs::tally(|| predict(&c, &params, &x, Mode::Eval));
        out.unwrap();
        assert_eq!(tally, n as u64 * mac_count(&c, hw).total, "{c:?} at {hw:?}");
    }
}

#[test]
fn front_loading_never_costs_more() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let t = rng.gen_range(1..=30);
        let n = rng.gen_range(0..=t.min(5));
        let mut c = ThriftyConfig::new(rng.gen_range(1..=64), t, rng.gen_range(0..=5), 10);
        c.schedule = make_schedule(t, n, &Placement::Regular, (32, 32)).unwrap();
        let regular = mac_count(&c, (32, 32)).total;
        c.schedule = make_schedule(t, n, &Placement::FrontLoaded, (32, 32)).unwrap();
        assert!(mac_count(&c, (32, 32)).total <= regular);
    }
}

#[test]
fn solve_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let template = random_config(&mut rng, 8, (32, 32));
        let convention = if rng.gen_bool(0.5) { BudgetConvention::Full } else { BudgetConvention::Table1 };
        let budget = rng.gen_range(1_000..200_000);
        let Ok(f) = solve_filters(budget, &template, convention) else {
            continue;
        };
        let at = |f: usize| {
            let mut c = template.clone();
            c.filters = f;
            param_count(&c).budgeted(convention)
        };
        assert!(at(f) <= budget);
        assert!(at(f + 1) > budget);
        let mut exact = template.clone();
        exact.filters = f;
        assert_eq!(solve_filters(at(f), &exact, convention).unwrap(), f);
    }
}
