#![allow(dead_code)]

use std::path::{Path, PathBuf};

use stepwise_core::config::RunConfig;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub struct RunSpec {
    pub iterations: usize,
    pub d: usize,
    pub n: usize,
    pub seed: u64,
    pub hook: &'static str,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            iterations: 2,
            d: 5,
            n: 3,
            seed: 11,
            hook: "toy",
        }
    }
}

/// Config text for an offline run over the bundled fixtures.
pub fn config_text(spec: &RunSpec, workspace: &Path) -> String {
    let f = fixtures();
    format!(
        r#"[run]
iterations = {iterations}
d = {d}
rng_seed = {seed}
workers = 4
workspace = "{ws}"
seed_pool = "{f}/seeds.jsonl"
registry = "{f}/registry.json"
image_index = "{f}/images"
tuning_hook = '{hook}'

[backends.default]
kind = "sim"

[sandbox]
kind = "fixture"

[explore]
n_candidates = {n}
"#,
        iterations = spec.iterations,
        d = spec.d,
        seed = spec.seed,
        n = spec.n,
        hook = spec.hook,
        ws = workspace.display(),
        f = f.display(),
    )
}

pub fn config(spec: &RunSpec, workspace: &Path) -> RunConfig {
    RunConfig::parse(&config_text(spec, workspace), Path::new("/")).expect("fixture config parses")
}
