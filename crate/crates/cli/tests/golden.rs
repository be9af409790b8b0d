//! Transcript tests. Set `VIGIL_BLESS=1` to rewrite the files under
//! `tests/golden/` from the current output.

mod common;

use std::fs;
use std::path::Path;

use common::{cascade_data, path, shapes, vigil};
use tempfile::TempDir;

fn check(name: &str, actual: &str, root: &Path) {
    let actual = actual.replace(&path(root), "$TMP");
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("VIGIL_BLESS").is_some() {
        fs::write(&file, &actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&file).unwrap_or_else(|e| panic!("{}: {e}", file.display()));
    assert_eq!(actual, expected, "transcript {name} changed");
}

#[test]
fn cnn_transcripts() {
    let dir = TempDir::new().unwrap();
    let data = shapes(dir.path(), 6, 16, 3);
    let model = path(&dir.path().join("tiny.sadm"));
    let args = [
        "train-cnn", "--data", data.to_str().unwrap(), "--out", &model, "--test-fraction", "0.34", "--size", "16",
        "--conv", "8,16", "--dense", "16", "--dropout", "0", "--lr", "0.01", "--batch", "4", "--epochs", "8",
    ];
    let train = vigil(&args);
    assert_eq!(train.code, 0, "{}", train.stderr);
    check("train_cnn.txt", &train.stdout, dir.path());

    let classify = vigil(&["classify", "--model", &model, &path(&data.join("hstripes")), &path(&data.join("vstripes"))]);
    check("classify.txt", &classify.stdout, dir.path());
    let eval = vigil(&["eval", "--model", &model, "--data", &path(&data)]);
    check("eval.txt", &eval.stdout, dir.path());
}

#[test]
fn cascade_transcripts() {
    let dir = TempDir::new().unwrap();
    let (pos, neg) = cascade_data(dir.path(), 150, 6, 5);
    let cascade = path(&dir.path().join("c.sadc"));
    let train = vigil(&[
        "train-cascade", "--pos", &path(&pos), "--neg", &path(&neg), "--out", &cascade, "--stages", "3", "--negatives", "200",
    ]);
    assert_eq!(train.code, 0, "{}", train.stderr);
    check("train_cascade.txt", &train.stdout, dir.path());

    let scene = dir.path().join("scene.ppm");
    let mut rng = vigil_core::synth::stream_rng(9, 0);
    let (img, _) = vigil_core::synth::random_scene(96, 72, 32, 48, &mut rng);
    vigil_core::dataset::write_image(&scene, &img).unwrap();
    let detect = vigil(&["detect", "--cascade", &cascade, "--min-neighbors", "2", &path(&scene)]);
    assert_eq!(detect.code, 0, "{}", detect.stderr);
    check("detect.txt", &detect.stdout, dir.path());
}
