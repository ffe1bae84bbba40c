//! Training configuration as flat `key = value` text.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub w_coord: f64,
    pub w_spectral: f64,
    pub w_adv: f64,
    /// Trace coupling coefficient of the spectral loss; may be negative.
    pub alpha: f64,
    /// Eigenvalues compared by the spectral loss; 0 means `min(N_pred, N_gt)`.
    pub spectral_k: usize,
    pub spectral_loss: bool,
    pub hierarchical_attention: bool,
    pub adaptive_complexity: bool,
    pub adversarial: bool,
    /// Adds a second discriminator that sees only the Laplacian spectrum.
    pub topology_discriminator: bool,
    pub encoder_samples: Vec<usize>,
    pub encoder_radii: Vec<f64>,
    pub encoder_hidden: usize,
    pub global_dim: usize,
    pub decoder_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub knn_k: usize,
    pub edge_hidden: Vec<usize>,
    pub attention_thresholds: Vec<f64>,
    pub attention_gate: bool,
    pub disc_hidden: Vec<usize>,
    pub disc_k: usize,
    pub disc_bins: usize,
    pub leaky_slope: f64,
    pub edge_threshold: f64,
    pub metric_k: usize,
    pub exact_ged_limit: usize,
    pub ablation_seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 4,
            w_coord: 1.0,
            w_spectral: 0.01,
            w_adv: 0.01,
            alpha: -0.01,
            spectral_k: 0,
            spectral_loss: true,
            hierarchical_attention: true,
            adaptive_complexity: true,
            adversarial: true,
            topology_discriminator: false,
            encoder_samples: vec![64, 16],
            encoder_radii: vec![0.2, 0.4],
            encoder_hidden: 32,
            global_dim: 64,
            decoder_hidden: vec![128],
            feature_dim: 8,
            n_min: 2,
            n_max: 12,
            knn_k: 8,
            edge_hidden: vec![16],
            attention_thresholds: vec![0.3, 0.5, 0.7],
            attention_gate: false,
            disc_hidden: vec![32],
            disc_k: 12,
            disc_bins: 8,
            leaky_slope: 0.2,
            edge_threshold: 0.5,
            metric_k: 12,
            exact_ged_limit: 8,
            ablation_seeds: vec![41, 42, 43],
        }
    }
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_one<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_one(key, v.trim())).collect()
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// lists are comma-separated. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file; an unreadable file is a config error.
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_one(key, v)?,
            "epochs" => self.epochs = parse_one(key, v)?,
            "learning_rate" => self.learning_rate = parse_one(key, v)?,
            "batch_size" => self.batch_size = parse_one(key, v)?,
            "w_coord" => self.w_coord = parse_one(key, v)?,
            "w_spectral" => self.w_spectral = parse_one(key, v)?,
            "w_adv" => self.w_adv = parse_one(key, v)?,
            "alpha" => self.alpha = parse_one(key, v)?,
            "spectral_k" => self.spectral_k = parse_one(key, v)?,
            "spectral_loss" => self.spectral_loss = parse_one(key, v)?,
            "hierarchical_attention" => self.hierarchical_attention = parse_one(key, v)?,
            "adaptive_complexity" => self.adaptive_complexity = parse_one(key, v)?,
            "adversarial" => self.adversarial = parse_one(key, v)?,
            "topology_discriminator" => self.topology_discriminator = parse_one(key, v)?,
            "encoder_samples" => self.encoder_samples = parse_list(key, v)?,
            "encoder_radii" => self.encoder_radii = parse_list(key, v)?,
            "encoder_hidden" => self.encoder_hidden = parse_one(key, v)?,
            "global_dim" => self.global_dim = parse_one(key, v)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(key, v)?,
            "feature_dim" => self.feature_dim = parse_one(key, v)?,
            "n_min" => self.n_min = parse_one(key, v)?,
            "n_max" => self.n_max = parse_one(key, v)?,
            "knn_k" => self.knn_k = parse_one(key, v)?,
            "edge_hidden" => self.edge_hidden = parse_list(key, v)?,
            "attention_thresholds" => self.attention_thresholds = parse_list(key, v)?,
            "attention_gate" => self.attention_gate = parse_one(key, v)?,
            "disc_hidden" => self.disc_hidden = parse_list(key, v)?,
            "disc_k" => self.disc_k = parse_one(key, v)?,
            "disc_bins" => self.disc_bins = parse_one(key, v)?,
            "leaky_slope" => self.leaky_slope = parse_one(key, v)?,
            "edge_threshold" => self.edge_threshold = parse_one(key, v)?,
            "metric_k" => self.metric_k = parse_one(key, v)?,
            "exact_ged_limit" => self.exact_ged_limit = parse_one(key, v)?,
            "ablation_seeds" => self.ablation_seeds = parse_list(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Canonical text: every key, fixed order, round-trips through [`parse`](Self::parse).
    pub fn to_text(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("w_coord", self.w_coord.to_string()),
            ("w_spectral", self.w_spectral.to_string()),
            ("w_adv", self.w_adv.to_string()),
            ("alpha", self.alpha.to_string()),
            ("spectral_k", self.spectral_k.to_string()),
            ("spectral_loss", self.spectral_loss.to_string()),
            ("hierarchical_attention", self.hierarchical_attention.to_string()),
            ("adaptive_complexity", self.adaptive_complexity.to_string()),
            ("adversarial", self.adversarial.to_string()),
            ("topology_discriminator", self.topology_discriminator.to_string()),
            ("encoder_samples", list(&self.encoder_samples)),
            ("encoder_radii", list(&self.encoder_radii)),
            ("encoder_hidden", self.encoder_hidden.to_string()),
            ("global_dim", self.global_dim.to_string()),
            ("decoder_hidden", list(&self.decoder_hidden)),
            ("feature_dim", self.feature_dim.to_string()),
            ("n_min", self.n_min.to_string()),
            ("n_max", self.n_max.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("edge_hidden", list(&self.edge_hidden)),
            ("attention_thresholds", list(&self.attention_thresholds)),
            ("attention_gate", self.attention_gate.to_string()),
            ("disc_hidden", list(&self.disc_hidden)),
            ("disc_k", self.disc_k.to_string()),
            ("disc_bins", self.disc_bins.to_string()),
            ("leaky_slope", self.leaky_slope.to_string()),
            ("edge_threshold", self.edge_threshold.to_string()),
            ("metric_k", self.metric_k.to_string()),
            ("exact_ged_limit", self.exact_ged_limit.to_string()),
            ("ablation_seeds", list(&self.ablation_seeds)),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of [`to_text`](Self::to_text).
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Same hash with `epochs` ignored, so a run may be extended on resume.
    pub fn resume_hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.hash()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, w) in [("w_coord", self.w_coord), ("w_spectral", self.w_spectral), ("w_adv", self.w_adv)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {w}"));
            }
        }
        if !self.alpha.is_finite() {
            return bad("alpha must be finite".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.n_min < 2 || self.n_min > self.n_max || self.n_max > crate::encdec::MAX_NODES {
            return bad(format!(
                "node bounds must satisfy 2 <= n_min <= n_max <= {}, got ({}, {})",
                crate::encdec::MAX_NODES,
                self.n_min,
                self.n_max
            ));
        }
        if self.hierarchical_attention && self.attention_thresholds.is_empty() {
            return bad("hierarchical attention needs at least one threshold".into());
        }
        if self.attention_thresholds.iter().any(|t| !(0.0..1.0).contains(t)) {
            return bad("attention thresholds must lie in [0, 1)".into());
        }
        if self.knn_k == 0 || self.feature_dim == 0 || self.global_dim == 0 || self.encoder_hidden == 0 {
            return bad("knn_k, feature_dim, global_dim and encoder_hidden must be positive".into());
        }
        if self.disc_bins == 0 {
            return bad("disc_bins must be positive".into());
        }
        if !(0.0..1.0).contains(&self.edge_threshold) {
            return bad("edge_threshold must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// The five configurations of the ablation table, named.
    pub fn ablation_variants(&self) -> Vec<(&'static str, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = self.clone();
            f(&mut c);
            c
        };
        vec![
            ("full", self.clone()),
            ("no_hierarchical_attention", with(&|c| c.hierarchical_attention = false)),
            ("no_adaptive_complexity", with(&|c| c.adaptive_complexity = false)),
            ("no_adversarial", with(&|c| c.adversarial = false)),
            ("no_spectral_loss", with(&|c| c.spectral_loss = false)),
        ]
    }
}
