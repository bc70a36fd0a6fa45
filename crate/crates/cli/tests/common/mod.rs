#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn c2mf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2mf"))
        .args(args)
        .output()
        .expect("the binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Runs the binary and panics with its stderr unless it succeeds.
pub fn ok(args: &[&str]) -> Output {
    let out = c2mf(args);
    assert_eq!(
        code(&out),
        0,
        "c2mf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

pub fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

/// A three-class problem small enough to train in a second.
pub const SMALL: &str = r#"
seed = 5
lambda_test = [0.0, 1.0]

[synthetic]
num_classes = 3
dims = [3, 2]
mean_scale = 3.0
noise_std = [0.7, 0.7]
train_size = 120
validation_size = 40
test_size = 60
seed = 0

[conflict]
class_sets = [[0], [1]]
lambda_train = 0.7
lambda_test = 0.0
seed = 0

[train]
epochs = 3
learning_rate = 0.01

[model]
encoder_widths = [8]
aggregator_widths = [4]
hypernet_hidden = [4]
structure = { depth = 1, num_sums = 2, num_repetitions = 1 }
"#;
