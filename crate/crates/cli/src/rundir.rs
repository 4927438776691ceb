//! Run-directory layout, the single-writer lock, and stage-completion
//! markers. A marker stores the effective config the stage completed under;
//! re-running with the same config is a no-op, with a different one an error
//! unless forced.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::RunConfig;
use mclearn_core::metatrain::SamplerKind;

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

pub fn sampler_name(sampler: SamplerKind) -> &'static str {
    match sampler {
        SamplerKind::Curriculum => "curriculum",
        SamplerKind::Uniform => "uniform",
    }
}

impl RunDir {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_json(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn domains_json(&self) -> PathBuf {
        self.data_dir().join("domains.json")
    }

    pub fn vocab_json(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn splits_json(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn vanilla_ckpt(&self) -> PathBuf {
        self.root.join("vanilla.ckpt")
    }

    pub fn lms_dir(&self) -> PathBuf {
        self.root.join("lms")
    }

    /// `which` is a domain name or `"general"`.
    pub fn lm_ckpt(&self, which: &str) -> PathBuf {
        self.lms_dir().join(format!("{which}.lm.ckpt"))
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    /// Divergence scores of a seen domain's meta-training pool.
    pub fn train_scores(&self, domain: &str) -> PathBuf {
        self.scores_dir().join(format!("{domain}.train.scores.tsv"))
    }

    /// Divergence scores of a test domain's query split.
    pub fn query_scores(&self, domain: &str) -> PathBuf {
        self.scores_dir().join(format!("{domain}.query.scores.tsv"))
    }

    pub fn score_summaries(&self) -> PathBuf {
        self.scores_dir().join("summaries.json")
    }

    pub fn meta_dir(&self, sampler: SamplerKind) -> PathBuf {
        self.root.join("meta").join(sampler_name(sampler))
    }

    pub fn meta_ckpt(&self, sampler: SamplerKind) -> PathBuf {
        self.meta_dir(sampler).join("meta.ckpt")
    }

    pub fn step_ckpt(&self, sampler: SamplerKind, step: usize) -> PathBuf {
        self.meta_dir(sampler).join(format!("step_{step}.ckpt"))
    }

    pub fn train_log(&self, sampler: SamplerKind) -> PathBuf {
        self.meta_dir(sampler).join("train_log.tsv")
    }

    pub fn task_manifest(&self, sampler: SamplerKind, step: usize) -> PathBuf {
        self.meta_dir(sampler)
            .join("tasks")
            .join(format!("step_{step}.json"))
    }

    pub fn finetune_ckpt(&self, system: &str, domain: &str) -> PathBuf {
        self.root
            .join("finetune")
            .join(system)
            .join(format!("{domain}.ckpt"))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn hyps_txt(&self, system: &str, domain: &str) -> PathBuf {
        self.eval_dir().join(system).join(format!("{domain}.hyps.txt"))
    }

    pub fn system_eval(&self, system: &str) -> PathBuf {
        self.eval_dir().join(format!("{system}.bleu.json"))
    }

    pub fn report_tsv(&self) -> PathBuf {
        self.root.join("report.tsv")
    }

    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }

    pub fn buckets_json(&self) -> PathBuf {
        self.root.join("buckets.json")
    }

    fn markers_dir(&self) -> PathBuf {
        self.root.join("markers")
    }

    pub fn marker(&self, stage: &str) -> PathBuf {
        self.markers_dir().join(format!("{stage}.json"))
    }

    /// Takes the per-run-directory lock; at most one stage runs at a time.
    pub fn lock(&self) -> Result<LockGuard> {
        fs::create_dir_all(&self.root)
            .with_context(|| format!("creating run dir {}", self.root.display()))?;
        let path = self.root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => bail!(
                "run directory {} is locked ({} exists); another stage may be \
                 running — remove the file if it is stale",
                self.root.display(),
                path.display()
            ),
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }

    /// Persists the effective config, or checks it against an existing one.
    /// A mismatch is an error unless `force`, which overwrites.
    pub fn persist_config(&self, cfg: &RunConfig, force: bool) -> Result<()> {
        let path = self.config_json();
        if path.exists() && !force {
            let stored = RunConfig::from_file(&path)?;
            if &stored != cfg {
                bail!(
                    "effective config differs from {}; rerun with --force to \
                     overwrite (this invalidates completed stages)",
                    path.display()
                );
            }
            return Ok(());
        }
        fs::create_dir_all(&self.root)?;
        fs::write(&path, cfg.to_json())
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Is the stage already complete under this exact config?
    pub fn stage_is_current(&self, stage: &str, cfg: &RunConfig) -> Result<bool> {
        let path = self.marker(stage);
        if !path.exists() {
            return Ok(false);
        }
        let stored = RunConfig::from_file(&path)
            .with_context(|| format!("reading stage marker {}", path.display()))?;
        Ok(&stored == cfg)
    }

    pub fn write_marker(&self, stage: &str, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(self.markers_dir())?;
        let path = self.marker(stage);
        fs::write(&path, cfg.to_json())
            .with_context(|| format!("writing stage marker {}", path.display()))?;
        Ok(())
    }

    /// Prerequisite check with an actionable message.
    pub fn require(&self, path: &Path, what: &str, produced_by: &str) -> Result<()> {
        if !path.exists() {
            bail!(
                "missing {what}: {} — run `{produced_by}` first",
                path.display()
            );
        }
        Ok(())
    }
}

/// Deletes the lock file when dropped.
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
