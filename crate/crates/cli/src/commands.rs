use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dbmm::envs::{optimal_return, EnvSpec, DetPomdp};
use dbmm::machine::{RmCore, TmCore};
use dbmm::oracle::{check_resolvent, MachineRef};
use dbmm::pipeline::{infer_machines, replay_mismatches};
use dbmm::qlearning::{curve_csv, evaluate_greedy, train, QLearningError};
use dbmm::traces::{read_traces, write_traces};
use dbmm::{RewardMachine, TransitionMachine};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::CliError;

/// Write through a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::Internal(e.to_string()))?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
        w.flush().map_err(|e| CliError::Internal(e.to_string()))?;
    }
    tmp.persist(path)
        .map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    write_atomic(path, |w| writeln!(w, "{text}"))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_env(path: &Path) -> Result<(EnvSpec, DetPomdp), CliError> {
    let spec: EnvSpec =
        serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let env = spec.build().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((spec, env))
}

fn load_tm(path: &Path) -> Result<TransitionMachine, CliError> {
    TmCore::from_json_str(&read_text(path)?)
        .map(TransitionMachine::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_rm(path: &Path) -> Result<RewardMachine, CliError> {
    RmCore::from_json_str(&read_text(path)?)
        .map(RewardMachine::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Input and output locations, defaulting to files in the output directory.
pub struct Paths {
    pub out: PathBuf,
    pub env: Option<PathBuf>,
    pub traces: Option<PathBuf>,
    pub tm: Option<PathBuf>,
    pub rm: Option<PathBuf>,
}

impl Paths {
    fn env(&self) -> PathBuf {
        self.env.clone().unwrap_or_else(|| self.out.join("env.json"))
    }
    fn traces(&self) -> PathBuf {
        self.traces.clone().unwrap_or_else(|| self.out.join("traces.jsonl"))
    }
    fn tm(&self) -> PathBuf {
        self.tm.clone().unwrap_or_else(|| self.out.join("tm.json"))
    }
    fn rm(&self) -> PathBuf {
        self.rm.clone().unwrap_or_else(|| self.out.join("rm.json"))
    }
}

pub fn gen_env(cfg: &RunConfig, paths: &Paths) -> Result<String, CliError> {
    let spec = cfg.env.to_spec(cfg.seed)?;
    let env = spec.build().map_err(|e| CliError::Data(e.to_string()))?;
    let path = paths.out.join("env.json");
    write_json(&path, &spec)?;
    Ok(format!(
        "wrote {} ({} hidden states, {} observations)",
        path.display(),
        env.num_states(),
        env.observations().len()
    ))
}

pub fn gen_traces(cfg: &RunConfig, paths: &Paths) -> Result<String, CliError> {
    let (_, env) = load_env(&paths.env())?;
    let traces = dbmm::envs::generate_traces(&env, cfg.traces.count, cfg.traces.max_len, cfg.seed.unwrap_or(0));
    let path = paths.out.join("traces.jsonl");
    write_atomic(&path, |w| write_traces(w, &traces))?;
    let steps: usize = traces.iter().map(|t| t.len()).sum();
    Ok(format!("wrote {} ({} traces, {} steps)", path.display(), traces.len(), steps))
}

pub fn infer(cfg: &RunConfig, paths: &Paths) -> Result<String, CliError> {
    let traces = read_traces(paths.traces()).map_err(|e| CliError::Data(e.to_string()))?;
    match infer_machines(&traces, &cfg.pipeline) {
        Ok((tm, rm, manifest)) => {
            write_json(&paths.out.join("tm.json"), &tm.core().to_json())?;
            write_json(&paths.out.join("rm.json"), &rm.core().to_json())?;
            write_json(&paths.out.join("manifest.json"), &manifest)?;
            Ok(format!(
                "TM {} states, RM {} states; wrote tm.json, rm.json, manifest.json to {}",
                tm.states(),
                rm.states(),
                paths.out.display()
            ))
        }
        Err(e) => {
            // Keep whatever the finished stages produced.
            write_json(&paths.out.join("manifest.json"), &e.manifest)?;
            let msg = e.to_string();
            if e.is_data_error() {
                Err(CliError::Data(msg))
            } else {
                Err(CliError::Internal(msg))
            }
        }
    }
}

pub fn verify(cfg: &RunConfig, paths: &Paths) -> Result<String, CliError> {
    let (spec, env) = load_env(&paths.env())?;
    let tm = load_tm(&paths.tm())?;
    let rm = load_rm(&paths.rm())?;
    let depth = cfg.verify.depth;
    let internal = |e: dbmm::oracle::OracleError| CliError::Internal(e.to_string());
    let tm_report = check_resolvent(MachineRef::Tm(&tm), &env, depth).map_err(internal)?;
    let supplement = cfg.pipeline.supplement.then_some(&tm);
    let rm_report = check_resolvent(MachineRef::Rm { rm: &rm, supplement }, &env, depth).map_err(internal)?;
    let traces_path = paths.traces();
    let mismatches = if paths.traces.is_some() || traces_path.exists() {
        let traces = read_traces(&traces_path).map_err(|e| CliError::Data(e.to_string()))?;
        Some(replay_mismatches(&tm, &rm, &traces, cfg.pipeline.supplement))
    } else {
        None
    };
    let ground_truth = spec.ground_truth().map(|gt| {
        json!({
            "tm_states": gt.tm_delta.len(),
            "rm_states": gt.rm_delta.len(),
        })
    });
    let ok = tm_report.resolvent && rm_report.resolvent && mismatches.as_ref().is_none_or(|m| m.is_empty());
    let report = json!({
        "depth": depth,
        "passed": ok,
        "tm": {"states": tm.states(), "report": tm_report},
        "rm": {"states": rm.states(), "report": rm_report},
        "replay_mismatches": mismatches,
        "ground_truth": ground_truth,
    });
    write_json(&paths.out.join("verify.json"), &report)?;
    let summary = format!(
        "TM resolvent: {}, RM resolvent: {} (depth {depth}); replay mismatches: {}",
        tm_report.resolvent,
        rm_report.resolvent,
        mismatches.map_or("not checked".to_owned(), |m| m.len().to_string())
    );
    if ok {
        Ok(summary)
    } else {
        Err(CliError::Verification(summary))
    }
}

pub fn train_agent(cfg: &RunConfig, paths: &Paths) -> Result<String, CliError> {
    let (_, env) = load_env(&paths.env())?;
    let tm = load_tm(&paths.tm())?;
    let rm = load_rm(&paths.rm())?;
    let mut q = cfg.qlearning.clone();
    if let Some(seed) = cfg.seed {
        q.seed = seed;
    }
    let classify = |e: QLearningError| match e {
        QLearningError::NonFinite { .. } => CliError::Internal(e.to_string()),
        _ => CliError::Data(e.to_string()),
    };
    let out = train(&env, &tm, &rm, &q).map_err(classify)?;
    let greedy = evaluate_greedy(&env, &tm, &rm, &out.table, cfg.evaluation.episodes, cfg.evaluation.max_steps, q.seed)
        .map_err(classify)?;
    let optimum = optimal_return(&env, env.gamma(), cfg.evaluation.max_steps).to_f64();
    write_json(&paths.out.join("qtable.json"), &out.table.to_json(&env, &tm, &rm))?;
    let csv = curve_csv(&out.curve);
    write_atomic(&paths.out.join("curve.csv"), |w| w.write_all(csv.as_bytes()))?;
    write_json(
        &paths.out.join("train.json"),
        &json!({
            "config": q,
            "episodes": out.curve.len(),
            "markov_violations": out.markov_violations,
            "final_epsilon": out.final_epsilon,
            "greedy_return": greedy,
            "optimal_return": optimum,
        }),
    )?;
    let summary = format!(
        "{} episodes, {} Markov violations, greedy return {greedy}, optimum {optimum}",
        out.curve.len(),
        out.markov_violations
    );
    if out.markov_violations == 0 {
        Ok(summary)
    } else {
        Err(CliError::Verification(summary))
    }
}

pub fn export_dot(paths: &Paths) -> Result<String, CliError> {
    let tm = load_tm(&paths.tm())?;
    let rm = load_rm(&paths.rm())?;
    let tm_dot = tm.core().to_dot("tm");
    let rm_dot = rm.core().to_dot("rm");
    write_atomic(&paths.out.join("tm.dot"), |w| w.write_all(tm_dot.as_bytes()))?;
    write_atomic(&paths.out.join("rm.dot"), |w| w.write_all(rm_dot.as_bytes()))?;
    Ok(format!("wrote tm.dot and rm.dot to {}", paths.out.display()))
}
