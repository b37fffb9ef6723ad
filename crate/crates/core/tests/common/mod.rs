#![allow(dead_code)]

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Smooth random-ish RGB image so greedy choices are not dominated by ties.
pub fn write_png(path: &Path, side: u32, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (fx, fy, phase): (f64, f64, f64) = (rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen());
    let img = RgbImage::from_fn(side, side, |x, y| {
        let u = x as f64 / side as f64;
        let v = y as f64 / side as f64;
        let wave = |k: f64| 0.5 + 0.5 * (std::f64::consts::TAU * (fx * u * k + fy * v + phase)).sin();
        let px = |t: f64| (t * 255.0).round() as u8;
        Rgb([px(wave(1.0)), px(wave(1.5) * u), px(v)])
    });
    img.save(path).unwrap();
}

pub fn png_in(dir: &Path, name: &str, side: u32, seed: u64) -> PathBuf {
    let path = dir.join(name);
    write_png(&path, side, seed);
    path
}

pub fn run(args: &[&str]) -> i32 {
    let mut full = vec!["kpp"];
    full.extend_from_slice(args);
    kpp::cli::main_with_args(full)
}
