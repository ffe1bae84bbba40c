use std::path::Path;

use crate::error::{Error, Result};
use crate::synthdata::{filter_split, SampleRecord, Split};

use super::config::TrainConfig;
use super::train::{evaluate_records, train, TrainOptions};

pub const ABLATION_HEADER: &str = "configuration,seed,mpjpe,ged,tf";

/// Test-split metrics of one configuration trained with one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub configuration: String,
    pub seed: u64,
    pub mpjpe: f64,
    pub ged: f64,
    pub sc: f64,
    pub tf: f64,
}

/// Trains every ablation variant once per seed in `cfg.ablation_seeds` and
/// scores the best-validation checkpoint on the test split. `only` restricts
/// the variants by name. With `out_dir`, each run logs to
/// `<out_dir>/<variant>_seed<seed>/`.
pub fn ablate(
    cfg: &TrainConfig,
    records: &[SampleRecord],
    only: Option<&[&str]>,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRun>> {
    cfg.validate()?;
    let variants = cfg.ablation_variants();
    if let Some(names) = only {
        if let Some(bad) = names.iter().find(|n| !variants.iter().any(|(v, _)| v == *n)) {
            return Err(Error::Config(format!("unknown ablation variant '{bad}'")));
        }
    }
    let test = filter_split(records, Split::Test);
    if test.is_empty() {
        return Err(Error::Data("ablation needs a non-empty test split".into()));
    }
    let mut runs = Vec::new();
    for (name, variant) in variants {
        if only.is_some_and(|names| !names.contains(&name)) {
            continue;
        }
        for &seed in &cfg.ablation_seeds {
            let mut c = variant.clone();
            c.seed = seed;
            let run_dir = match out_dir {
                Some(dir) => {
                    let d = dir.join(format!("{name}_seed{seed}"));
                    std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                    Some(d)
                }
                None => None,
            };
            let outcome = train(&c, records, &TrainOptions { out_dir: run_dir, resume: None })?;
            let (best_cfg, model) = outcome.best.model()?;
            let report = evaluate_records(&model, &best_cfg, &test)?;
            runs.push(AblationRun {
                configuration: name.to_string(),
                seed,
                mpjpe: report.mpjpe,
                ged: report.ged,
                sc: report.sc,
                tf: report.tf,
            });
        }
    }
    Ok(runs)
}

/// CSV with one row per run followed by one `mean` row per configuration.
pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in runs {
        out.push_str(&format!("{},{},{},{},{}\n", r.configuration, r.seed, r.mpjpe, r.ged, r.tf));
    }
    let mut names: Vec<&str> = Vec::new();
    for r in runs {
        if !names.contains(&r.configuration.as_str()) {
            names.push(&r.configuration);
        }
    }
    for name in names {
        let group: Vec<&AblationRun> = runs.iter().filter(|r| r.configuration == name).collect();
        let n = group.len() as f64;
        let mean = |f: fn(&AblationRun) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
        out.push_str(&format!(
            "{name},mean,{},{},{}\n",
            mean(|r| r.mpjpe),
            mean(|r| r.ged),
            mean(|r| r.tf)
        ));
    }
    out
}
