//! `blockrank` command line: data generation, training, evaluation,
//! benchmarking, attention analysis, and ablation grids over a layered
//! configuration (defaults < profile < config file < dotted flags).

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use serde_json::Value;

use blockrank_core::inference::InferenceMethod;
use blockrank_core::model::AttentionMode;

use config::{parse_flat_config_file, parse_override_value, resolve_config, ConfigError, RunConfig};

pub const USAGE: &str = "\
blockrank <command> [options]

commands:
  gen-data   generate a synthetic ranking dataset (+ vocabulary)
  train      fine-tune a model on a dataset directory
  eval       score a checkpoint with one inference method
  bench      latency scaling across candidate-list sizes
  analyze    attention heatmaps, layout dump, layerwise precision
  ablate     loss/attention/prefix ablation grid

common options:
  --out DIR           output directory (default: $BLOCKRANK_OUT/<command>)
  --force             write into a non-empty output directory
  --config FILE       flat dotted-key JSON config
  --profile NAME      desk | paper_scale
  --data DIR          dataset directory (gen-data output)
  --ckpt PATH         checkpoint file or training run directory
  --deterministic     accepted for compatibility (always deterministic)
  --<dotted.key> V    override any config key, e.g. --model.n_layers 4

command options:
  gen-data: --n COUNT  --N DOCS  --seed SEED
  eval:     --method attention|greedy|beam  --N DOCS (rebuild lists)
  bench:    --N LIST  --modes LIST  --methods LIST  --repeats COUNT
  analyze:  --layers LIST|all  --example IDX  --n-eval COUNT  --dump-layout
  ablate:   --n-train COUNT  --n-eval COUNT
";

const EXIT_OK: i32 = 0;
const EXIT_ERROR: i32 = 1;
const EXIT_USAGE: i32 = 2;

struct ParsedArgs {
    command: String,
    out: Option<PathBuf>,
    force: bool,
    config: Option<PathBuf>,
    profile: Option<String>,
    data: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    method: Option<String>,
    layers: Option<String>,
    example: usize,
    n_eval: Option<usize>,
    n_train: Option<usize>,
    dump_layout: bool,
    n: Option<u64>,
    big_n: Option<String>,
    seed: Option<u64>,
    modes: Option<String>,
    methods: Option<String>,
    repeats: Option<usize>,
    overrides: Vec<(String, Value)>,
}

fn usage_err(msg: impl std::fmt::Display) -> Result<ParsedArgs, (i32, String)> {
    Err((EXIT_USAGE, format!("{msg}\n\n{USAGE}")))
}

fn parse_args(args: &[String]) -> Result<ParsedArgs, (i32, String)> {
    let Some(command) = args.first() else {
        return usage_err("missing command");
    };
    if !matches!(
        command.as_str(),
        "gen-data" | "train" | "eval" | "bench" | "analyze" | "ablate"
    ) {
        return usage_err(format!("unknown command {command:?}"));
    }
    let mut parsed = ParsedArgs {
        command: command.clone(),
        out: None,
        force: false,
        config: None,
        profile: None,
        data: None,
        ckpt: None,
        method: None,
        layers: None,
        example: 0,
        n_eval: None,
        n_train: None,
        dump_layout: false,
        n: None,
        big_n: None,
        seed: None,
        modes: None,
        methods: None,
        repeats: None,
        overrides: Vec::new(),
    };
    let mut i = 1;
    while i < args.len() {
        let arg = &args[i];
        let Some(name) = arg.strip_prefix("--") else {
            return usage_err(format!("unexpected argument {arg:?}"));
        };
        // Boolean flags take no value.
        match name {
            "force" => {
                parsed.force = true;
                i += 1;
                continue;
            }
            "dump-layout" => {
                parsed.dump_layout = true;
                i += 1;
                continue;
            }
            "deterministic" => {
                i += 1;
                continue;
            }
            _ => {}
        }
        let Some(value) = args.get(i + 1) else {
            return usage_err(format!("--{name} expects a value"));
        };
        let int = || -> Result<u64, (i32, String)> {
            value
                .parse::<u64>()
                .map_err(|_| (EXIT_USAGE, format!("--{name} expects an integer\n\n{USAGE}")))
        };
        match name {
            "out" => parsed.out = Some(PathBuf::from(value)),
            "config" => parsed.config = Some(PathBuf::from(value)),
            "profile" => parsed.profile = Some(value.clone()),
            "data" => parsed.data = Some(PathBuf::from(value)),
            "ckpt" => parsed.ckpt = Some(PathBuf::from(value)),
            "method" => parsed.method = Some(value.clone()),
            "layers" => parsed.layers = Some(value.clone()),
            "example" => parsed.example = int()? as usize,
            "n-eval" => parsed.n_eval = Some(int()? as usize),
            "n-train" => parsed.n_train = Some(int()? as usize),
            "n" => parsed.n = Some(int()?),
            "N" => parsed.big_n = Some(value.clone()),
            "seed" => parsed.seed = Some(int()?),
            "modes" => parsed.modes = Some(value.clone()),
            "methods" => parsed.methods = Some(value.clone()),
            "repeats" => parsed.repeats = Some(int()? as usize),
            dotted if dotted.contains('.') => parsed
                .overrides
                .push((dotted.to_string(), parse_override_value(value))),
            other => return usage_err(format!("unknown flag --{other}")),
        }
        i += 2;
    }
    Ok(parsed)
}

fn parse_usize_list(raw: &str, what: &str) -> Result<Vec<usize>, String> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("{what}: {p:?} is not an integer"))
        })
        .collect()
}

fn parse_mode(raw: &str) -> Result<AttentionMode, String> {
    match raw.trim() {
        "blockwise" => Ok(AttentionMode::Blockwise),
        "dense" | "dense_causal" => Ok(AttentionMode::DenseCausal),
        other => Err(format!("unknown attention mode {other:?}")),
    }
}

fn parse_method(raw: &str) -> Result<InferenceMethod, String> {
    match raw.trim() {
        "attention" | "attn" => Ok(InferenceMethod::Attention),
        "greedy" | "decode" => Ok(InferenceMethod::Greedy),
        "beam" => Ok(InferenceMethod::Beam),
        other => Err(format!("unknown inference method {other:?}")),
    }
}

/// Applies the command shorthands onto the dotted-override list.
fn shorthand_overrides(parsed: &ParsedArgs) -> Result<Vec<(String, Value)>, String> {
    let mut o = parsed.overrides.clone();
    match parsed.command.as_str() {
        "gen-data" => {
            if let Some(n) = parsed.n {
                o.push(("n_examples".into(), Value::from(n)));
            }
            if let Some(raw) = &parsed.big_n {
                let n: usize = raw
                    .parse()
                    .map_err(|_| format!("--N {raw:?} is not an integer"))?;
                o.push(("task.n_docs".into(), Value::from(n)));
                o.push(("train.n_candidates".into(), Value::from(n)));
            }
            if let Some(seed) = parsed.seed {
                o.push(("task.seed".into(), Value::from(seed)));
            }
        }
        "bench" => {
            if let Some(raw) = &parsed.big_n {
                let ns = parse_usize_list(raw, "--N")?;
                o.push(("bench.n_values".into(), serde_json::to_value(ns).unwrap()));
            }
            if let Some(raw) = &parsed.modes {
                let modes: Vec<AttentionMode> = raw
                    .split(',')
                    .map(parse_mode)
                    .collect::<Result<_, _>>()?;
                o.push(("bench.modes".into(), serde_json::to_value(modes).unwrap()));
            }
            if let Some(raw) = &parsed.methods {
                let methods: Vec<InferenceMethod> = raw
                    .split(',')
                    .map(parse_method)
                    .collect::<Result<_, _>>()?;
                o.push(("bench.methods".into(), serde_json::to_value(methods).unwrap()));
            }
            if let Some(r) = parsed.repeats {
                o.push(("bench.repeats".into(), Value::from(r)));
            }
        }
        _ => {
            if let Some(seed) = parsed.seed {
                o.push(("train.seed".into(), Value::from(seed)));
            }
        }
    }
    Ok(o)
}

fn out_dir(parsed: &ParsedArgs) -> Result<PathBuf, String> {
    if let Some(out) = &parsed.out {
        return Ok(out.clone());
    }
    match std::env::var_os("BLOCKRANK_OUT") {
        Some(root) => Ok(PathBuf::from(root).join(&parsed.command)),
        None => Err("--out is required (or set BLOCKRANK_OUT)".into()),
    }
}

fn prepare_out(parsed: &ParsedArgs) -> Result<PathBuf, String> {
    let out = out_dir(parsed)?;
    if out.exists() {
        let non_empty = fs::read_dir(&out)
            .map_err(|e| format!("{}: {e}", out.display()))?
            .next()
            .is_some();
        if non_empty && !parsed.force {
            return Err(format!(
                "output directory {} is not empty (pass --force to reuse it)",
                out.display()
            ));
        }
    }
    fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    Ok(out)
}

/// Parses argv (without the program name), runs the command, and returns the
/// process exit status: 0 on success, 1 on operational/validation failure,
/// 2 on usage errors.
pub fn run_command(args: &[String]) -> i32 {
    let parsed = match parse_args(args) {
        Ok(p) => p,
        Err((code, msg)) => {
            eprintln!("{msg}");
            return code;
        }
    };

    match run_parsed(&parsed) {
        Ok(()) => EXIT_OK,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            code
        }
    }
}

fn run_parsed(parsed: &ParsedArgs) -> Result<(), (i32, String)> {
    let op_err = |msg: String| (EXIT_ERROR, msg);

    let base = match &parsed.profile {
        Some(name) => config::profile(name)
            .ok_or_else(|| (EXIT_USAGE, format!("unknown profile {name:?}\n\n{USAGE}")))?,
        None => RunConfig::default(),
    };
    let file_flat: Option<BTreeMap<String, Value>> = match &parsed.config {
        Some(path) => {
            let bytes =
                fs::read(path).map_err(|e| op_err(format!("{}: {e}", path.display())))?;
            Some(parse_flat_config_file(&bytes).map_err(|e| op_err(e.to_string()))?)
        }
        None => None,
    };
    // File-level problems are validation failures; a bad flag is usage.
    let (cfg, _) = resolve_config(base, file_flat.as_ref(), &[])
        .map_err(|e| op_err(e.to_string()))?;
    let overrides = shorthand_overrides(parsed).map_err(|e| (EXIT_USAGE, format!("{e}\n\n{USAGE}")))?;
    let (cfg, flat) = resolve_config(cfg, None, &overrides).map_err(|e| match e {
        ConfigError::UnknownKey(_) => (EXIT_USAGE, format!("{e}\n\n{USAGE}")),
        ConfigError::Invalid(_) => op_err(e.to_string()),
    })?;

    let out = prepare_out(parsed).map_err(op_err)?;
    let (snapshot_body, digest) = config::snapshot(&flat);
    commands::write_snapshot(&out, &snapshot_body).map_err(op_err)?;
    let digest8 = &digest[..8];

    let need = |opt: &Option<PathBuf>, flag: &str| -> Result<PathBuf, (i32, String)> {
        opt.clone()
            .ok_or_else(|| (EXIT_USAGE, format!("--{flag} is required\n\n{USAGE}")))
    };

    let result = match parsed.command.as_str() {
        "gen-data" => commands::gen_data(&cfg, &out),
        "train" => {
            let data = need(&parsed.data, "data")?;
            commands::train_cmd(&cfg, &data, &out)
        }
        "eval" => {
            let data = need(&parsed.data, "data")?;
            let ckpt = need(&parsed.ckpt, "ckpt")?;
            let method = parse_method(parsed.method.as_deref().unwrap_or("attention"))
                .map_err(|e| (EXIT_USAGE, format!("{e}\n\n{USAGE}")))?;
            let rebuild = match &parsed.big_n {
                Some(raw) => Some(raw.parse::<usize>().map_err(|_| {
                    (EXIT_USAGE, format!("--N {raw:?} is not an integer\n\n{USAGE}"))
                })?),
                None => None,
            };
            commands::eval_cmd(&cfg, &data, &ckpt, method, rebuild, &out, digest8)
        }
        "bench" => {
            let data = need(&parsed.data, "data")?;
            let ckpt = need(&parsed.ckpt, "ckpt")?;
            commands::bench_cmd(&cfg, &data, &ckpt, &out, digest8)
        }
        "analyze" => {
            let data = need(&parsed.data, "data")?;
            let ckpt = need(&parsed.ckpt, "ckpt")?;
            let layers = match parsed.layers.as_deref() {
                None | Some("all") => None,
                Some(raw) => Some(
                    parse_usize_list(raw, "--layers")
                        .map_err(|e| (EXIT_USAGE, format!("{e}\n\n{USAGE}")))?,
                ),
            };
            commands::analyze_cmd(
                &cfg,
                &data,
                &ckpt,
                layers,
                parsed.example,
                parsed.n_eval.unwrap_or(100),
                parsed.dump_layout,
                &out,
                digest8,
            )
        }
        "ablate" => commands::ablate_cmd(
            &cfg,
            parsed.n_train.unwrap_or(256),
            parsed.n_eval.unwrap_or(100),
            &out,
            digest8,
        ),
        _ => unreachable!("validated in parse_args"),
    };
    result.map_err(op_err)
}
