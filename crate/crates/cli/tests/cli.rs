use dwislice_core::volume::read_nifti;
use std::path::Path;
use std::process::Command;

const SUBCOMMANDS: [&str; 9] = [
    "fit-sh", "project-sh", "fit-dti", "interp", "train", "infer", "phantom", "evaluate", "sh-bound",
];

fn run(args: &[&str]) -> i32 {
    dwislice_cli::dispatch(std::iter::once("dwislice").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_phantom(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join("ph");
    let mut args = vec!["phantom", "--out-dir", s(&out), "--dims", "16", "16", "6", "--directions", "20"];
    args.extend_from_slice(extra);
    assert_eq!(run(&args), 0);
    out
}

#[test]
fn help_lists_flags_for_every_subcommand() {
    let bin = env!("CARGO_BIN_EXE_dwislice");
    for sub in SUBCOMMANDS {
        let out = Command::new(bin).args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub}");
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(text.contains("--seed") && text.contains("--threads"), "{sub}");
    }
    let out = Command::new(bin).arg("--version").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let bin = env!("CARGO_BIN_EXE_dwislice");
    let code = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(code(&["no-such-command"]), Some(1));
    assert_eq!(code(&["interp", "--gap-start", "2"]), Some(1));
    assert_eq!(code(&["interp", "--input", "/nonexistent.nii", "--gap-start", "2", "--out", "/tmp/x.nii"]), Some(2));
    assert_eq!(code(&["interp", "--input", "a.nii", "--gap-start", "2", "--n", "3", "--out", "b.nii"]), Some(1));
}

#[test]
fn config_file_sits_under_explicit_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "seed = 4\n[phantom]\ndirections = 12\nn_b0 = 2\ndims = [16, 16, 4]\n").unwrap();
    let out = dir.path().join("ph");
    assert_eq!(run(&["--config", s(&cfg), "phantom", "--out-dir", s(&out), "--directions", "9"]), 0);
    let bvals = std::fs::read_to_string(out.join("dwi.bval")).unwrap();
    assert_eq!(bvals.split_whitespace().count(), 11);
    assert_eq!(read_nifti(&out.join("labels.nii")).unwrap().dims(), [16, 16, 4, 1]);

    std::fs::write(&cfg, "[phantom]\ndirectionz = 12\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "phantom", "--out-dir", s(&out)]), 1);
    std::fs::write(&cfg, "[nonsense]\nx = 1\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "phantom", "--out-dir", s(&out)]), 1);
}

#[test]
fn phantom_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = ["--noise", "rician", "--sigma", "20"];
    let a = small_phantom(&dir.path().join("a"), &noisy);
    let b = small_phantom(&dir.path().join("b"), &noisy);
    let c = dir.path().join("c");
    let mut args = vec!["--seed", "1", "phantom", "--out-dir", s(&c), "--dims", "16", "16", "6", "--directions", "20"];
    args.extend_from_slice(&noisy);
    assert_eq!(run(&args), 0);
    let read = |p: &Path| std::fs::read(p.join("dwi.nii")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn sh_fit_and_projection_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path(), &[]);
    let sh = dir.path().join("sh.nii");
    assert_eq!(run(&["fit-sh", "--dwi", s(&ph.join("dwi.nii")), "--out", s(&sh)]), 0);
    assert_eq!(read_nifti(&sh).unwrap().dims(), [16, 16, 6, 15]);
    let back = dir.path().join("back.nii");
    assert_eq!(
        run(&[
            "project-sh", "--sh", s(&sh), "--bval", s(&ph.join("dwi.bval")), "--bvec", s(&ph.join("dwi.bvec")),
            "--out", s(&back),
        ]),
        0
    );
    assert_eq!(read_nifti(&back).unwrap().dims()[3], 20);
    assert_eq!(run(&["sh-bound", "--dwi", s(&ph.join("dwi.nii")), "--lmax", "2", "4", "6"]), 0);
}

fn changed_slices(a: &Path, b: &Path) -> Vec<usize> {
    let (a, b) = (read_nifti(a).unwrap(), read_nifti(b).unwrap());
    assert_eq!(a.dims(), b.dims());
    let [_, _, nz, _] = a.dims();
    (0..nz).filter(|&z| a.slice(z) != b.slice(z)).collect()
}

#[test]
fn interp_replaces_only_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path(), &[]);
    let input = ph.join("dwi.nii");
    for method in ["linear", "cubic", "bspline5"] {
        let out = dir.path().join(format!("{method}.nii"));
        assert_eq!(run(&["interp", "--input", s(&input), "--gap-start", "2", "--n", "2", "--method", method, "--out", s(&out)]), 0);
        assert_eq!(changed_slices(&input, &out), vec![2, 3], "{method}");
    }
}

#[test]
fn train_then_infer_two_slices() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path(), &[]);
    let dwi = ph.join("dwi.nii");
    let labels = ph.join("labels.nii");
    let model = dir.path().join("b0.ckpt");
    let log = dir.path().join("log.csv");
    let train = [
        "train", "--dwi", s(&dwi), "--mask", s(&labels), "--net", "b0", "--input-size", "16",
        "--width-divisor", "8", "--latent-maps", "4", "--epochs", "3", "--batch-size", "2", "--split", "slice",
        "--out", s(&model), "--log", s(&log),
    ];
    assert_eq!(run(&train), 0);
    let csv = std::fs::read_to_string(&log).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_mse,val_mse"));
    assert_eq!(csv.lines().count(), 4);

    let out = dir.path().join("filled.nii");
    let infer = [
        "infer", "--dwi", s(&dwi), "--model", s(&model), "--gap-start", "3", "--n", "2", "--out", s(&out),
    ];
    assert_eq!(run(&infer), 0);
    assert_eq!(changed_slices(&dwi, &out), vec![3, 4]);
    let bad_gap = [
        "infer", "--dwi", s(&dwi), "--model", s(&model), "--gap-start", "5", "--n", "2", "--out", s(&out),
    ];
    assert_eq!(run(&bad_gap), 2);
}

#[test]
fn sh_training_records_normalization_mode() {
    let dir = tempfile::tempdir().unwrap();
    let ph = small_phantom(dir.path(), &[]);
    let dwi = ph.join("dwi.nii");
    let model = dir.path().join("sh.ckpt");
    let train = [
        "train", "--dwi", s(&dwi), "--net", "sh4", "--input-size", "16", "--width-divisor", "16", "--epochs", "1",
        "--batch-size", "2", "--split", "slice", "--norm", "joint", "--out", s(&model),
    ];
    assert_eq!(run(&train), 0);
    let params = dwislice_core::nn::load_checkpoint(&model).unwrap();
    assert_eq!(params.config.input_channels, 15);
    assert_eq!(params.config.latent_maps, 64);
    assert_eq!(params.config.norm, dwislice_core::volume::NormMode::Joint);
}
