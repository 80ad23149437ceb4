#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use colfig_core::{ColorImage, ColorSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn colfig<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_colfig"))
        .args(args)
        .output()
        .expect("spawn colfig")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_ppm(path: &Path, size: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..size * size * 3).map(|_| rng.random()).collect();
    let img = ColorImage::new(size, size, ColorSpace::Rgb, px).unwrap();
    std::fs::write(path, img.to_ppm().unwrap()).unwrap();
}

pub fn colfig_in<I, S>(dir: &Path, args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_colfig"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn colfig")
}
