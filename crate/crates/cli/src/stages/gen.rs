//! `gen`: materialize the synthetic multi-domain corpora under `data/`.

use anyhow::{Context, Result};

use mclearn_core::synth::{gen_synthetic, write_parallel};

use crate::config::RunConfig;
use crate::rundir::RunDir;

use super::{test_stem, train_stem, DomainMeta, DomainsManifest};

pub fn run(dir: &RunDir, cfg: &RunConfig) -> Result<()> {
    let data = gen_synthetic(&cfg.synth).context("generating synthetic corpora")?;
    let out = dir.data_dir();
    std::fs::create_dir_all(&out)?;

    write_parallel(&data.general, &out, "general")?;
    for c in &data.meta_train {
        write_parallel(c, &out, &train_stem(&c.domain))?;
    }
    for c in &data.meta_test {
        write_parallel(c, &out, &test_stem(&c.domain))?;
    }

    let mut domains: Vec<DomainMeta> = data
        .meta_test
        .iter()
        .map(|c| DomainMeta {
            name: c.domain.clone(),
            seen: c.role == mclearn_core::corpus::CorpusRole::MetaTestSeen,
        })
        .collect();
    domains.sort_by(|a, b| a.name.cmp(&b.name));
    DomainsManifest { domains }.save(dir)?;
    Ok(())
}
