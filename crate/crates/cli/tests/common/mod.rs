#![allow(dead_code)]

use std::path::{Path, PathBuf};

use vigil_core::dataset::write_image;
use vigil_core::synth::{background, stream_rng, tile_sample, write_shape_dataset};

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn vigil<S: AsRef<str>>(args: &[S]) -> Output {
    let argv = std::iter::once("vigil").chain(args.iter().map(|a| a.as_ref()));
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = vigil_cli::run(argv, &mut out, &mut err);
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn path(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Six-class shape dataset with `per_class` images of side `size`.
pub fn shapes(root: &Path, per_class: usize, size: usize, seed: u64) -> PathBuf {
    let dir = root.join("shapes");
    write_shape_dataset(&dir, per_class, size, seed).unwrap();
    dir
}

/// Window-sized tile crops and clutter backgrounds for cascade training.
pub fn cascade_data(root: &Path, positives: usize, negatives: usize, seed: u64) -> (PathBuf, PathBuf) {
    let (pos, neg) = (root.join("pos"), root.join("neg"));
    std::fs::create_dir_all(&pos).unwrap();
    std::fs::create_dir_all(&neg).unwrap();
    let mut rng = stream_rng(seed, 0);
    for i in 0..positives {
        write_image(&pos.join(format!("{i:04}.pgm")), &tile_sample(24, &mut rng)).unwrap();
    }
    for i in 0..negatives {
        write_image(&neg.join(format!("{i:04}.pgm")), &background(96, 72, &mut rng)).unwrap();
    }
    (pos, neg)
}

/// Small CNN flags shared by the CLI tests: 16×16 input, two conv blocks.
pub const TINY_CNN: [&str; 12] = ["--size", "16", "--lr", "0.01", "--conv", "4,8", "--dense", "8", "--batch", "8", "--epochs", "3"];
