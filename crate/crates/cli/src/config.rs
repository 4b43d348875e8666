use std::path::Path;

use anyhow::{bail, Context};
use medvl::corpus::SyntheticSpec;
use medvl::eval::{ProbeConfig, VqaConfig};
use medvl::trainer::{Stage, TrainConfig};
use medvl::ModelConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Toy,
    Paper,
}

/// Everything a command may read. Values come from the defaults of the
/// chosen scale, then the config file, then command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scale: Scale,
    /// Master seed; copied into every section.
    pub seed: u64,
    pub eval_batch_size: usize,
    /// Fraction of the corpus used for fitting in probe and VQA runs.
    pub eval_train_fraction: f64,
    pub synthetic: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub vqa: VqaConfig,
}

impl RunConfig {
    pub fn defaults(scale: Scale, stage: Stage) -> Self {
        let (model, train) = match scale {
            Scale::Toy => (ModelConfig::toy(0), TrainConfig::toy(stage)),
            Scale::Paper => (ModelConfig::paper(0), TrainConfig::paper(stage)),
        };
        Self {
            scale,
            seed: 0,
            eval_batch_size: 64,
            eval_train_fraction: 0.8,
            synthetic: SyntheticSpec {
                image_size: model.image.image_size,
                channels: model.image.channels,
                ..Default::default()
            },
            model,
            train,
            probe: ProbeConfig::default(),
            vqa: VqaConfig::default(),
        }
    }

    /// Layers `file` over the defaults. `scale` from the flags wins over the
    /// file's.
    pub fn resolve(file: Option<&Path>, scale: Option<Scale>, stage: Stage, seed: Option<u64>) -> anyhow::Result<Self> {
        let table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        let scale = match (scale, table.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => v.clone().try_into().context("config key `scale`")?,
            (None, None) => Scale::Toy,
        };
        let mut base = toml::Table::try_from(Self::defaults(scale, stage))?;
        merge(&mut base, table);
        base.insert("scale".into(), toml::Value::try_from(scale)?);
        let mut cfg: Self = toml::Value::Table(base)
            .try_into()
            .context("config does not match the expected layout")?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.stage = stage;
        cfg.sync_seeds();
        Ok(cfg)
    }

    fn sync_seeds(&mut self) {
        self.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        self.probe.seed = self.seed;
        self.vqa.seed = self.seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        if self.eval_batch_size == 0 {
            bail!("eval_batch_size must be positive");
        }
        if !(self.eval_train_fraction > 0.0 && self.eval_train_fraction < 1.0) {
            bail!("eval_train_fraction must be in (0, 1)");
        }
        if self.probe.epochs == 0 || self.probe.batch_size == 0 {
            bail!("probe epochs and batch_size must be positive");
        }
        if self.vqa.epochs == 0 || self.vqa.batch_size == 0 || self.vqa.hidden == 0 {
            bail!("vqa epochs, batch_size and hidden must be positive");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Prints the resolved configuration and stores it in `out`.
    pub fn echo(&self, out: Option<&Path>) -> anyhow::Result<()> {
        let text = self.to_toml()?;
        println!("# resolved configuration\n{text}");
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let p = dir.join(RESOLVED_CONFIG);
            std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
