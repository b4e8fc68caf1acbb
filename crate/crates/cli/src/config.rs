//! Line-based `key = value` training configuration.

use std::path::{Path, PathBuf};

use idp_core::planners::{Differentiation, PlannerKind, PlannerSpec};
use idp_core::solvers::SolverKind;
use idp_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainJob {
    pub train: TrainConfig,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub test_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Map size stated in the file, if any; otherwise taken from the data.
    pub map_size: Option<usize>,
}

const KEYS: &[&str] = &[
    "planner",
    "differentiation",
    "map_size",
    "channels",
    "kernel",
    "latent",
    "mapper_nonlinearity",
    "k_layer",
    "forward_solver",
    "forward_max_iter",
    "forward_tol",
    "forward_memory",
    "forward_beta",
    "forward_ridge",
    "backward_solver",
    "backward_max_iter",
    "backward_tol",
    "backward_memory",
    "backward_beta",
    "backward_ridge",
    "epochs",
    "batch_size",
    "lr",
    "rmsprop_alpha",
    "rmsprop_eps",
    "seed",
    "eval_horizon_factor",
    "eval_full_start_limit",
    "eval_starts",
    "eval_seed",
    "train_data",
    "val_data",
    "test_data",
    "out",
];

fn parse_value<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| ConfigError::Line {
        line,
        msg: format!("cannot parse `{v}` for `{key}`"),
    })
}

/// Parses `text`; relative paths resolve against `base`.
pub fn parse_train_config(text: &str, base: &Path) -> Result<TrainJob, ConfigError> {
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError::Line {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(ConfigError::Line {
                line,
                msg: format!("unknown key `{k}`"),
            });
        }
        if v.is_empty() {
            return Err(ConfigError::Line {
                line,
                msg: format!("missing value for `{k}`"),
            });
        }
        if let Some((first, ..)) = entries.iter().find(|(_, key, _)| key == k) {
            return Err(ConfigError::Line {
                line,
                msg: format!("`{k}` already set on line {first}"),
            });
        }
        entries.push((line, k.to_string(), v.to_string()));
    }
    let find = |key: &str| {
        entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
    };

    let kind = match find("planner") {
        Some((l, v)) => PlannerKind::parse(v).ok_or_else(|| ConfigError::Line {
            line: l,
            msg: format!("planner must be `vin` or `convgppn`, got `{v}`"),
        })?,
        None => PlannerKind::Vin,
    };
    let differentiation = match find("differentiation") {
        Some((l, v)) => Differentiation::parse(v).ok_or_else(|| ConfigError::Line {
            line: l,
            msg: format!("differentiation must be `implicit` or `explicit`, got `{v}`"),
        })?,
        None => Differentiation::Implicit,
    };
    let map_size = find("map_size")
        .map(|(l, v)| parse_value::<usize>(l, "map_size", v))
        .transpose()?;
    let mut spec = PlannerSpec::new(kind, differentiation, map_size.unwrap_or(1));
    let mut train = TrainConfig::new(spec, 0);
    let mut train_data = None;
    let mut val_data = None;
    let mut test_data = None;
    let mut out = None;
    let mut eval_seed = None;
    let path = |v: &str| {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let solver = |l: usize, v: &str| {
        SolverKind::parse(v).ok_or_else(|| ConfigError::Line {
            line: l,
            msg: format!("solver must be `forward` or `anderson`, got `{v}`"),
        })
    };
    for (l, k, v) in &entries {
        let (l, v) = (*l, v.as_str());
        match k.as_str() {
            "planner" | "differentiation" | "map_size" => {}
            "channels" => spec.channels = parse_value(l, k, v)?,
            "kernel" => spec.kernel = parse_value(l, k, v)?,
            "latent" => spec.latent = parse_value(l, k, v)?,
            "mapper_nonlinearity" => spec.mapper_nonlinearity = parse_value(l, k, v)?,
            "k_layer" => spec.k_layer = parse_value(l, k, v)?,
            "forward_solver" => spec.forward.kind = solver(l, v)?,
            "forward_max_iter" => spec.forward.max_iter = parse_value(l, k, v)?,
            "forward_tol" => spec.forward.tol = parse_value(l, k, v)?,
            "forward_memory" => spec.forward.memory = parse_value(l, k, v)?,
            "forward_beta" => spec.forward.beta = parse_value(l, k, v)?,
            "forward_ridge" => spec.forward.ridge = parse_value(l, k, v)?,
            "backward_solver" => spec.backward.kind = solver(l, v)?,
            "backward_max_iter" => spec.backward.max_iter = parse_value(l, k, v)?,
            "backward_tol" => spec.backward.tol = parse_value(l, k, v)?,
            "backward_memory" => spec.backward.memory = parse_value(l, k, v)?,
            "backward_beta" => spec.backward.beta = parse_value(l, k, v)?,
            "backward_ridge" => spec.backward.ridge = parse_value(l, k, v)?,
            "epochs" => train.epochs = parse_value(l, k, v)?,
            "batch_size" => train.batch_size = parse_value(l, k, v)?,
            "lr" => train.lr = parse_value(l, k, v)?,
            "rmsprop_alpha" => train.rmsprop_alpha = parse_value(l, k, v)?,
            "rmsprop_eps" => train.rmsprop_eps = parse_value(l, k, v)?,
            "seed" => train.seed = parse_value(l, k, v)?,
            "eval_horizon_factor" => train.eval.horizon_factor = parse_value(l, k, v)?,
            "eval_full_start_limit" => train.eval.full_start_limit = parse_value(l, k, v)?,
            "eval_starts" => train.eval.sampled_starts = parse_value(l, k, v)?,
            "eval_seed" => eval_seed = Some(parse_value(l, k, v)?),
            "train_data" => train_data = Some(path(v)),
            "val_data" => val_data = Some(path(v)),
            "test_data" => test_data = Some(path(v)),
            "out" => out = Some(path(v)),
            other => unreachable!("key `{other}` is listed but not handled"),
        }
    }
    train.eval.seed = eval_seed.unwrap_or(train.seed);
    train.planner = spec;
    Ok(TrainJob {
        train,
        train_data: train_data.ok_or_else(|| ConfigError::Missing("config needs `train_data`".into()))?,
        val_data: val_data.ok_or_else(|| ConfigError::Missing("config needs `val_data`".into()))?,
        test_data,
        out,
        map_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<TrainJob, ConfigError> {
        parse_train_config(text, Path::new("/data"))
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let job = parse("train_data = t.idpd\nval_data = /abs/v.idpd\n").unwrap();
        assert_eq!(job.train_data, PathBuf::from("/data/t.idpd"));
        assert_eq!(job.val_data, PathBuf::from("/abs/v.idpd"));
        assert_eq!(job.train.epochs, 60);
        assert_eq!(job.train.batch_size, 32);
        assert_eq!(job.train.lr, 1e-3);
        assert_eq!(job.train.planner.kind, PlannerKind::Vin);
        assert_eq!(job.map_size, None);
    }

    #[test]
    fn explicit_mode_and_comments() {
        let job = parse(
            "# unrolled VIN\n\
             differentiation = explicit   # trailing comment\n\
             k_layer = 30\n\
             backward_solver = forward\n\
             \n\
             train_data = a\nval_data = b\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(job.train.planner.differentiation, Differentiation::Explicit);
        assert_eq!(job.train.planner.k_layer, 30);
        assert_eq!(job.train.planner.backward.kind, SolverKind::ForwardIteration);
        assert_eq!(job.train.seed, 7);
        assert_eq!(job.train.eval.seed, 7);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = parse("train_data = a\nval_data = b\nbogus = 1\n").unwrap_err();
        assert_eq!(
            err,
            ConfigError::Line {
                line: 3,
                msg: "unknown key `bogus`".into()
            }
        );
        assert!(matches!(parse("lr 0.1\n"), Err(ConfigError::Line { line: 1, .. })));
        assert!(matches!(
            parse("\n\nlr = fast\n"),
            Err(ConfigError::Line { line: 3, .. })
        ));
        assert!(matches!(
            parse("lr = 1\nlr = 2\n"),
            Err(ConfigError::Line { line: 2, .. })
        ));
        assert!(matches!(
            parse("planner = qmdp\n"),
            Err(ConfigError::Line { line: 1, .. })
        ));
        assert!(matches!(parse("lr = 0.1\n"), Err(ConfigError::Missing(_))));
    }
}
