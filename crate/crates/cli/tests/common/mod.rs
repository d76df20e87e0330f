#![allow(dead_code)]

use std::path::{Path, PathBuf};

use slimbio_cli::RunConfig;
use slimbio_core::datagen::{generate_set, write_dataset, PhantomSpec, Task};
use slimbio_core::graph::Graph;

/// Writes `n` phantoms of `task` at `shape` into `dir`, seeds from `seed`.
pub fn dataset(dir: &Path, task: Task, shape: &[usize], n: usize, seed: u64) -> PathBuf {
    let spec = PhantomSpec::default_for(task).with_shape(shape).with_seed(seed);
    let set = generate_set(&spec, n).unwrap();
    write_dataset(dir, &spec, &set).unwrap();
    dir.to_path_buf()
}

pub fn save(g: &Graph, path: &Path) -> PathBuf {
    g.save_model(path).unwrap();
    path.to_path_buf()
}

/// Parses a JSON config after substituting `{root}` with `root`.
pub fn config(root: &Path, json: &str) -> RunConfig {
    let text = json.replace("{root}", root.to_str().unwrap());
    RunConfig::from_json(&text).unwrap()
}
