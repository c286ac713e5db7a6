pub mod evaluate;
pub mod export3d;
pub mod lint;
pub mod matrix;
pub mod phantom;
pub mod preprocess;
pub mod train;

use std::path::PathBuf;

/// Resolved global options shared by every command.
pub struct CommandContext {
    pub out_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub jobs: Option<usize>,
    pub run_name: Option<String>,
}

impl CommandContext {
    /// Canonical global arguments, echoed into every run manifest.
    pub fn global_args(&self, b: &mut crate::manifest::ManifestBuilder) {
        b.arg("--out-dir", self.out_dir.display());
        if let Some(jobs) = self.jobs {
            b.arg("--jobs", jobs);
        }
        if let Some(name) = &self.run_name {
            b.arg("--run-name", name);
        }
    }
}
