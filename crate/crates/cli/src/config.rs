//! Sectioned key/value experiment configs.
//!
//! The format is deliberately plain: `[section]` headers, `key = value`
//! lines, `#` comments. Unknown sections or keys are errors so that a typo
//! cannot silently fall back to a default. The parsed config is re-rendered
//! verbatim into the run directory for provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use fedcycle::fed::{AggMode, GradMode, OptimKind, RunConfig, Seeds, TaskSpec, TransportKind};
use fedcycle::nn::{ModelConfig, ModelSpec, NormMode, Variant};
use fedcycle::objectives::{GanMode, LossWeights};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Training mode selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Centralized,
    Federated,
    SwitchableFederated,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "centralized" => Ok(TrainMode::Centralized),
            "federated" => Ok(TrainMode::Federated),
            "switchable-federated" => Ok(TrainMode::SwitchableFederated),
            other => err(format!(
                "unknown mode {other:?}; expected centralized | federated | switchable-federated"
            )),
        }
    }
}

/// Fully validated experiment configuration with the raw text it came from.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub out_dir: PathBuf,
    pub master_seed: u64,
    /// Canonical re-rendering of the parsed input.
    pub echo: String,
    /// Warnings emitted during parsing (e.g. ignored sections).
    pub warnings: Vec<String>,
}

type Sections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections, ConfigError> {
    let mut sections = Sections::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim().to_string();
            if sections.contains_key(&name) {
                return err(format!("line {}: duplicate section [{name}]", lineno + 1));
            }
            sections.insert(name.clone(), BTreeMap::new());
            current = Some(name);
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return err(format!("line {}: expected `key = value`, got {line:?}", lineno + 1));
        };
        let Some(section) = &current else {
            return err(format!("line {}: key outside any [section]", lineno + 1));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        let entries = sections.get_mut(section).expect("section exists");
        if entries.contains_key(&key) {
            return err(format!("line {}: duplicate key {key:?} in [{section}]", lineno + 1));
        }
        entries.insert(key, value);
    }
    Ok(sections)
}

struct Section<'a> {
    name: &'a str,
    entries: BTreeMap<String, String>,
    consumed: Vec<String>,
}

impl<'a> Section<'a> {
    fn take(sections: &mut Sections, name: &'a str) -> Self {
        Self {
            name,
            entries: sections.remove(name).unwrap_or_default(),
            consumed: Vec::new(),
        }
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        self.consumed.push(key.to_string());
        match self.entries.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| {
                ConfigError(format!("[{}] {key} = {v:?}: {e}", self.name))
            }),
        }
    }

    fn get_str(&mut self, key: &str, default: &str) -> String {
        self.consumed.push(key.to_string());
        self.entries
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    fn finish(self) -> Result<(), ConfigError> {
        for key in self.entries.keys() {
            if !self.consumed.contains(key) {
                return err(format!("unknown key {key:?} in [{}]", self.name));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, mode: TrainMode) -> Result<Self, ConfigError> {
        let mut sections = parse_sections(text)?;
        let mut warnings = Vec::new();

        let mut task = Section::take(&mut sections, "task");
        let task_kind = task.get_str("kind", "denoise");
        let task_spec = match task_kind.as_str() {
            "denoise" => TaskSpec::Denoise {
                n_train: task.get("train_per_domain", 64usize)?,
                n_eval: task.get("eval_pairs", 32usize)?,
                sigma: task.get("noise_sigma", 0.1f64)?,
            },
            "style" => TaskSpec::Style {
                n_per_domain: task.get("train_per_domain", 64usize)?,
            },
            other => return err(format!("[task] kind = {other:?}: expected denoise | style")),
        };
        task.finish()?;

        let variant = match mode {
            TrainMode::Centralized | TrainMode::Federated => Variant::Standard,
            TrainMode::SwitchableFederated => Variant::Switchable,
        };
        let norm = match variant {
            Variant::Standard => NormMode::Instance,
            Variant::Switchable => NormMode::AdaIn,
        };

        let mut model = Section::take(&mut sections, "model");
        let spec = ModelSpec {
            variant,
            gen: ModelConfig {
                in_channels: model.get("in_channels", 1usize)?,
                base_width: model.get("base_width", 8usize)?,
                depth: model.get("depth", 2usize)?,
                residual_skip: model.get("residual_skip", matches!(task_spec, TaskSpec::Denoise { .. }))?,
                norm,
                tanh_output: model.get("tanh_output", false)?,
            },
            disc: ModelConfig {
                in_channels: model.get("in_channels", 1usize)?,
                base_width: model.get("disc_width", 8usize)?,
                depth: model.get("disc_depth", 2usize)?,
                residual_skip: false,
                norm,
                tanh_output: false,
            },
            code_hidden: model.get("code_hidden", 32usize)?,
        };
        model.finish()?;

        let mut loss = Section::take(&mut sections, "loss");
        let gan_mode = match loss.get_str("gan_mode", "least-squares").as_str() {
            "least-squares" => GanMode::LeastSquares,
            "vanilla-log" => GanMode::VanillaLog,
            other => {
                return err(format!(
                    "[loss] gan_mode = {other:?}: expected least-squares | vanilla-log"
                ))
            }
        };
        let weights = LossWeights {
            lambda_cycle: loss.get("lambda_cycle", 10.0f64)?,
            lambda_identity: loss.get("lambda_identity", 5.0f64)?,
            gan_mode,
        };
        loss.finish()?;

        let mut fed = Section::take(&mut sections, "fed");
        let fed_present = !fed.entries.is_empty();
        let clients_per_domain = fed.get("clients_per_domain", 1usize)?;
        let select_per_round = fed.get("select_per_round", 2 * clients_per_domain)?;
        let aggregation = match fed.get_str("aggregation", "mean").as_str() {
            "sum" => AggMode::Sum,
            "mean" => AggMode::Mean,
            other => return err(format!("[fed] aggregation = {other:?}: expected sum | mean")),
        };
        let grad_mode = match fed.get_str("grad_mode", "step-split").as_str() {
            "step-split" => GradMode::StepSplit,
            "alg1-combined" => GradMode::Alg1Combined,
            other => {
                return err(format!(
                    "[fed] grad_mode = {other:?}: expected step-split | alg1-combined"
                ))
            }
        };
        let transport = match fed.get_str("transport", "in-process").as_str() {
            "in-process" => TransportKind::InProcess,
            "tcp" => TransportKind::Tcp,
            other => {
                return err(format!(
                    "[fed] transport = {other:?}: expected in-process | tcp"
                ))
            }
        };
        fed.finish()?;
        if mode == TrainMode::Centralized && fed_present {
            warnings.push(
                "mode is centralized: [fed] settings are ignored (batches are consumed directly)"
                    .to_string(),
            );
        }

        let mut optim = Section::take(&mut sections, "optim");
        let optimizer = match optim.get_str("kind", "adam").as_str() {
            "adam" => OptimKind::Adam {
                beta1: optim.get("beta1", 0.5f64)?,
                beta2: optim.get("beta2", 0.999f64)?,
                eps: optim.get("epsilon", 1e-8f64)?,
            },
            "sgd" => OptimKind::Sgd,
            other => return err(format!("[optim] kind = {other:?}: expected adam | sgd")),
        };
        let base_lr = optim.get("lr", 2e-4f64)?;
        optim.finish()?;

        let mut run = Section::take(&mut sections, "run");
        let rounds = run.get("rounds", 400u32)?;
        let batch_size = run.get("batch_size", 4usize)?;
        let master_seed = run.get("seed", 17u64)?;
        let out_dir = PathBuf::from(run.get_str("out_dir", "runs/latest"));
        run.finish()?;

        if let Some(unknown) = sections.keys().next() {
            return err(format!("unknown section [{unknown}]"));
        }

        let run_config = RunConfig {
            task: task_spec,
            spec,
            weights,
            optimizer,
            base_lr,
            rounds,
            batch_size,
            clients_per_domain,
            select_per_round,
            aggregation,
            grad_mode,
            transport,
            seeds: Seeds::derive(master_seed),
        };
        run_config
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;

        let config = Self {
            echo: render(&run_config, master_seed, &out_dir, mode),
            run: run_config,
            out_dir,
            master_seed,
            warnings,
        };
        Ok(config)
    }
}

/// Canonical rendering of a parsed config; written into the run directory.
pub fn render(run: &RunConfig, master_seed: u64, out_dir: &std::path::Path, mode: TrainMode) -> String {
    let mut s = String::new();
    s.push_str("# canonical experiment config\n");
    s.push_str(&format!(
        "# mode = {}\n\n",
        match mode {
            TrainMode::Centralized => "centralized",
            TrainMode::Federated => "federated",
            TrainMode::SwitchableFederated => "switchable-federated",
        }
    ));
    s.push_str("[task]\n");
    match &run.task {
        TaskSpec::Denoise { n_train, n_eval, sigma } => {
            s.push_str("kind = denoise\n");
            s.push_str(&format!("train_per_domain = {n_train}\n"));
            s.push_str(&format!("eval_pairs = {n_eval}\n"));
            s.push_str(&format!("noise_sigma = {sigma}\n"));
        }
        TaskSpec::Style { n_per_domain } => {
            s.push_str("kind = style\n");
            s.push_str(&format!("train_per_domain = {n_per_domain}\n"));
        }
    }
    s.push_str("\n[model]\n");
    s.push_str(&format!("in_channels = {}\n", run.spec.gen.in_channels));
    s.push_str(&format!("base_width = {}\n", run.spec.gen.base_width));
    s.push_str(&format!("depth = {}\n", run.spec.gen.depth));
    s.push_str(&format!("residual_skip = {}\n", run.spec.gen.residual_skip));
    s.push_str(&format!("tanh_output = {}\n", run.spec.gen.tanh_output));
    s.push_str(&format!("disc_width = {}\n", run.spec.disc.base_width));
    s.push_str(&format!("disc_depth = {}\n", run.spec.disc.depth));
    s.push_str(&format!("code_hidden = {}\n", run.spec.code_hidden));
    s.push_str("\n[loss]\n");
    s.push_str(&format!(
        "gan_mode = {}\n",
        match run.weights.gan_mode {
            GanMode::LeastSquares => "least-squares",
            GanMode::VanillaLog => "vanilla-log",
        }
    ));
    s.push_str(&format!("lambda_cycle = {}\n", run.weights.lambda_cycle));
    s.push_str(&format!("lambda_identity = {}\n", run.weights.lambda_identity));
    s.push_str("\n[fed]\n");
    s.push_str(&format!("clients_per_domain = {}\n", run.clients_per_domain));
    s.push_str(&format!("select_per_round = {}\n", run.select_per_round));
    s.push_str(&format!(
        "aggregation = {}\n",
        match run.aggregation {
            AggMode::Sum => "sum",
            AggMode::Mean => "mean",
        }
    ));
    s.push_str(&format!(
        "grad_mode = {}\n",
        match run.grad_mode {
            GradMode::StepSplit => "step-split",
            GradMode::Alg1Combined => "alg1-combined",
        }
    ));
    s.push_str(&format!(
        "transport = {}\n",
        match run.transport {
            TransportKind::InProcess => "in-process",
            TransportKind::Tcp => "tcp",
        }
    ));
    s.push_str("\n[optim]\n");
    match run.optimizer {
        OptimKind::Adam { beta1, beta2, eps } => {
            s.push_str("kind = adam\n");
            s.push_str(&format!("beta1 = {beta1}\n"));
            s.push_str(&format!("beta2 = {beta2}\n"));
            s.push_str(&format!("epsilon = {eps}\n"));
        }
        OptimKind::Sgd => s.push_str("kind = sgd\n"),
    }
    s.push_str(&format!("lr = {}\n", run.base_lr));
    s.push_str("\n[run]\n");
    s.push_str(&format!("rounds = {}\n", run.rounds));
    s.push_str(&format!("batch_size = {}\n", run.batch_size));
    s.push_str(&format!("seed = {master_seed}\n"));
    s.push_str(&format!("out_dir = {}\n", out_dir.display()));
    s
}
