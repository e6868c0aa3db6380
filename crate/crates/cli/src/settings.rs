//! `key=value` config files and their merge with command-line flags.
//!
//! Blank lines and lines starting with `#` are skipped. Flags given on the
//! command line win over file values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use llsa::bench::LevelChoice;
use llsa::{LlsaConfig, ReweightMode};

/// Parameters shared by every subcommand. All optional so that a config file
/// can supply them.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// key=value file with any of the options below (flags take precedence)
    #[arg(long, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,
    /// Sequence length N
    #[arg(long)]
    pub n: Option<usize>,
    /// Feature dimension d
    #[arg(long)]
    pub d: Option<usize>,
    /// Block size B
    #[arg(long)]
    pub b: Option<usize>,
    /// Key blocks kept per query block and level (K)
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Number of coarse levels L, or `auto` for the deepest valid one
    #[arg(long)]
    pub levels: Option<LevelChoice>,
    /// Number of coarse levels appended to the KV set (L_e); defaults to L
    #[arg(long)]
    pub enrich: Option<usize>,
    /// scale-kv or logit-bias
    #[arg(long)]
    pub mode: Option<ReweightMode>,
    /// Softmax scale; defaults to 1/sqrt(d)
    #[arg(long)]
    pub scale: Option<f64>,
    /// Disable max subtraction in the softmax
    #[arg(long)]
    pub no_safe_softmax: bool,
    /// Seed for generated tensors
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct Settings {
    pub n: usize,
    pub d: usize,
    pub b: usize,
    pub top_k: usize,
    pub levels: LevelChoice,
    pub enrich: Option<usize>,
    pub mode: ReweightMode,
    pub scale: Option<f64>,
    pub safe_softmax: bool,
    pub seed: u64,
    /// Extra keys only some commands understand (`n_grid`, ...).
    pub extra: BTreeMap<String, String>,
}

/// Defaults a subcommand starts from before the file and flags apply.
#[derive(Debug, Clone, Copy)]
pub struct Defaults {
    pub n: usize,
    pub d: usize,
    pub b: usize,
    pub top_k: usize,
    pub levels: LevelChoice,
}

pub fn read_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value, got `{line}`", path.display(), lineno + 1);
        };
        map.insert(key.trim().replace('-', "_"), value.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, keys: &[&str]) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    for key in keys {
        if let Some(raw) = map.remove(*key) {
            return raw
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key `{key}`: {e}"));
        }
    }
    Ok(None)
}

impl ConfigArgs {
    pub fn resolve(&self, defaults: Defaults, allowed_extra: &[&str]) -> Result<Settings> {
        let mut file = match &self.config {
            Some(path) => read_config_file(path)?,
            None => BTreeMap::new(),
        };
        let n = take(&mut file, &["n"])?;
        let d = take(&mut file, &["d"])?;
        let b = take(&mut file, &["b", "block_size"])?;
        let top_k = take(&mut file, &["k", "top_k"])?;
        let levels = take(&mut file, &["levels", "l"])?;
        let enrich = take(&mut file, &["enrich", "enrich_levels"])?;
        let mode = take(&mut file, &["mode", "reweight_mode"])?;
        let scale = take(&mut file, &["scale", "softmax_scale"])?;
        let safe: Option<bool> = take(&mut file, &["safe_softmax"])?;
        let seed = take(&mut file, &["seed"])?;
        if let Some(unknown) = file.keys().find(|k| !allowed_extra.contains(&k.as_str())) {
            bail!("unknown config key `{unknown}`");
        }
        Ok(Settings {
            n: self.n.or(n).unwrap_or(defaults.n),
            d: self.d.or(d).unwrap_or(defaults.d),
            b: self.b.or(b).unwrap_or(defaults.b),
            top_k: self.top_k.or(top_k).unwrap_or(defaults.top_k),
            levels: self.levels.or(levels).unwrap_or(defaults.levels),
            enrich: self.enrich.or(enrich),
            mode: self.mode.or(mode).unwrap_or_default(),
            scale: self.scale.or(scale),
            safe_softmax: !self.no_safe_softmax && safe.unwrap_or(true),
            seed: self.seed.or(seed).unwrap_or(0),
            extra: file,
        })
    }
}

impl Settings {
    /// Config for sequence length `n` (and feature dimension `d`).
    pub fn config(&self, n: usize, d: usize) -> Result<LlsaConfig> {
        let levels = match self.levels {
            LevelChoice::Fixed(l) => l,
            LevelChoice::Auto => llsa::config::auto_levels(n, d, self.b, self.top_k)
                .with_context(|| format!("no valid level count for n={n}, b={}, k={}", self.b, self.top_k))?,
        };
        let mut cfg = LlsaConfig::new(n, d, self.b, self.top_k, levels)
            .with_mode(self.mode)
            .with_safe_softmax(self.safe_softmax)
            .with_enrich_levels(self.enrich.unwrap_or(levels));
        if let Some(s) = self.scale {
            cfg = cfg.with_scale(s as llsa::Real);
        }
        Ok(cfg)
    }
}

/// Parses `8192,16384` style lists.
pub fn parse_grid(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| x.trim().parse().with_context(|| format!("bad grid entry `{x}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const DEFAULTS: Defaults = Defaults {
        n: 256,
        d: 16,
        b: 4,
        top_k: 2,
        levels: LevelChoice::Fixed(2),
    };

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# comment\nn = 512\nblock-size=8\nmode=logit-bias\nn_grid=1,2\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            n: Some(1024),
            ..ConfigArgs::default()
        };
        let s = args.resolve(DEFAULTS, &["n_grid"]).unwrap();
        assert_eq!((s.n, s.b, s.mode), (1024, 8, ReweightMode::LogitBias));
        assert_eq!(s.extra["n_grid"], "1,2");
        assert!(args.resolve(DEFAULTS, &[]).is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        fs::write(&path, "n 512\n").unwrap();
        assert!(read_config_file(&path).is_err());
        fs::write(&path, "n = many\n").unwrap();
        let args = ConfigArgs {
            config: Some(path),
            ..ConfigArgs::default()
        };
        assert!(args.resolve(DEFAULTS, &[]).is_err());
    }

    #[test]
    fn grids_parse() {
        assert_eq!(parse_grid("8192, 16384").unwrap(), vec![8192, 16384]);
        assert!(parse_grid("8192,x").is_err());
    }
}
