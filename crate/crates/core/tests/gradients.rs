mod common;

use common::*;
use gc4dgs::gaussian::ColorModel;
use gc4dgs::raster::RenderConfig;

const TOL: f64 = 1e-5;

fn check(seed: u64, count: usize, model: ColorModel, weights: [f64; 4]) {
    let field = random_field(seed, count, model);
    let cam = camera(24, 20);
    let s = supervision(seed + 100, 24, 20, weights);
    let c = gradient_error(&field, &cam, 0.45, &RenderConfig::default(), &s);
    assert!(c.worst < TOL, "seed {seed}: worst relative error {:e} over {} parameters", c.worst, c.checked);
    assert!(c.kinks * 20 <= c.checked, "seed {seed}: {} non-smooth parameters", c.kinks);
}

#[test]
fn photometric_only() {
    check(1, 12, ColorModel { degree: 1, time_modulation: true }, [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn ranking_only() {
    check(2, 12, ColorModel::default(), [0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn patch_only() {
    check(3, 12, ColorModel::default(), [0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn structure_only() {
    check(4, 12, ColorModel::default(), [0.0, 0.0, 0.0, 1.0]);
}

#[test]
fn full_objective_on_several_scenes() {
    for seed in 10..13 {
        check(seed, 20, ColorModel { degree: 1, time_modulation: true }, [1.0, 0.05, 0.02, 0.02]);
    }
}
