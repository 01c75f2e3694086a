use std::fs::File;
use std::path::{Path, PathBuf};

use mowst::confidence::{quasiconvexity_witness_search, Confidence, ConfidenceSpec, Dispersion, GFunction};
use mowst::experts::ExpertModel;
use mowst::graph::{
    build_blindspot_graph, cost_from_sizes, generate_specialization_graph, khop_sizes, load_graph, Architecture,
    BlindspotInstance, BlindspotMeta, Graph, SpecializationParams, Split,
};
use mowst::mixture::{csv_float, infer_expected, infer_stochastic, write_predictions, ExpertChoice, PredictionRow};
use mowst::theory::{run_suite, verify_blindspot, write_report, ClauseResult, ReportRow};
use mowst::training::{derive_seed, evaluate, train, Mixture, TrainMode};
use mowst::Exec;

use crate::config::{DataSource, GateCheck, RunConfig, Suite};
use crate::{CliError, Command, GenKind, ModeArg};

const META_FILE: &str = "blindspot_meta.json";

pub fn dispatch(cmd: Command, cfg: RunConfig) -> Result<(), CliError> {
    match cmd {
        Command::Gen {
            kind,
            k,
            f,
            n_per_group,
            noise,
        } => gen(&cfg, kind, k, f, n_per_group, noise),
        Command::Train { graph, mode } => train_cmd(&cfg, graph, mode),
        Command::Infer {
            graph,
            checkpoint,
            stochastic,
        } => infer(&cfg, graph, checkpoint, stochastic),
        Command::Verify { suite, graph, meta } => verify(&cfg, suite, graph.zip(meta)),
        Command::Cost { graph, f, layers } => cost(&cfg, graph, f, layers),
    }
}

fn seed(cfg: &RunConfig) -> Result<u64, CliError> {
    cfg.seed
        .ok_or_else(|| CliError::Usage("a seed is required: pass --seed N or set \"seed\" in the config".into()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create output directory {}: {e}", dir.display())))?;
    Ok(dir)
}

fn load_meta(path: &Path) -> Result<BlindspotMeta, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// The graph named by `--graph`, else the config's data source.
fn resolve_graph(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<Graph, CliError> {
    if let Some(path) = flag {
        return Ok(load_graph(path)?);
    }
    match cfg.data.clone() {
        Some(DataSource::File { path, .. }) => Ok(load_graph(path)?),
        Some(DataSource::Specialization { n_per_group, f, noise }) => {
            Ok(generate_specialization_graph(SpecializationParams {
                n_per_group,
                f,
                noise,
                seed: seed(cfg)?,
            })?)
        }
        Some(DataSource::Blindspot { k, f }) => Ok(build_blindspot_graph(k, f, seed(cfg)?)?.graph),
        None => Err(CliError::Usage(
            "no graph: pass --graph PATH or set \"data\" in the config".into(),
        )),
    }
}

fn gen(
    cfg: &RunConfig,
    kind: Option<GenKind>,
    k: Option<usize>,
    f: Option<usize>,
    n_per_group: Option<usize>,
    noise: Option<f64>,
) -> Result<(), CliError> {
    let seed = seed(cfg)?;
    let base = match (kind, cfg.data.clone()) {
        (Some(GenKind::Specialization), Some(d @ DataSource::Specialization { .. })) => d,
        (Some(GenKind::Blindspot), Some(d @ DataSource::Blindspot { .. })) => d,
        (Some(GenKind::Specialization), _) => {
            let p = SpecializationParams::default();
            DataSource::Specialization {
                n_per_group: p.n_per_group,
                f: p.f,
                noise: p.noise,
            }
        }
        (Some(GenKind::Blindspot), _) => DataSource::Blindspot { k: 2, f: 4 },
        (None, Some(DataSource::File { .. })) => {
            return Err(CliError::Usage("gen needs a generator, not a file data source".into()))
        }
        (None, Some(d)) => d,
        (None, None) => return Err(CliError::Usage("gen needs --kind specialization|blindspot".into())),
    };
    let dir = out_dir(cfg)?;
    let path = dir.join("graph.json");
    match base {
        DataSource::Specialization {
            n_per_group: n0,
            f: f0,
            noise: s0,
        } => {
            let params = SpecializationParams {
                n_per_group: n_per_group.unwrap_or(n0),
                f: f.unwrap_or(f0),
                noise: noise.unwrap_or(s0),
                seed,
            };
            let g = generate_specialization_graph(params)?;
            g.save(&path)?;
        }
        DataSource::Blindspot { k: k0, f: f0 } => {
            let inst = build_blindspot_graph(k.unwrap_or(k0), f.unwrap_or(f0), seed)?;
            inst.graph.save(&path)?;
            let meta = serde_json::to_string_pretty(&inst.meta).map_err(mowst::Error::from)?;
            std::fs::write(dir.join(META_FILE), meta)?;
        }
        DataSource::File { .. } => unreachable!("rejected above"),
    }
    println!("{}", path.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, graph: Option<PathBuf>, mode: Option<ModeArg>) -> Result<(), CliError> {
    let mut tc = cfg.train.clone().unwrap_or_default();
    tc.seed = seed(cfg)?;
    if let Some(m) = mode {
        tc.mode = match m {
            ModeArg::InTurn => TrainMode::MowstInTurn,
            ModeArg::Joint => TrainMode::MowstJoint,
            ModeArg::Star => TrainMode::MowstStar,
        };
    }
    let g = resolve_graph(cfg, graph)?;
    let dir = out_dir(cfg)?;
    let (m, report) = train(&tc, &g)?;
    m.save(&dir.join("checkpoint.json"))?;
    report.write_dir(&dir)?;
    for row in report.metrics.iter().filter(|r| r.split == Split::Test) {
        println!("test {} accuracy {:.4}", row.mode, row.accuracy);
    }
    Ok(())
}

fn infer(
    cfg: &RunConfig,
    graph: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    stochastic: bool,
) -> Result<(), CliError> {
    let seed = seed(cfg)?;
    let ckpt = checkpoint
        .or_else(|| cfg.checkpoint.clone())
        .ok_or_else(|| CliError::Usage("infer needs --checkpoint PATH".into()))?;
    let g = resolve_graph(cfg, graph)?;
    let m = Mixture::load(&ckpt)?;
    let out = m.output(&g)?;
    let rows: Vec<PredictionRow> = if stochastic {
        infer_stochastic(&out.weak, &out.strong, &out.confidence, seed)?
            .into_iter()
            .enumerate()
            .map(|(v, pick)| PredictionRow {
                node_id: v,
                expert: pick.expert,
                confidence: out.confidence[v],
                pred_class: pick.class,
                true_class: g.labels()[v],
            })
            .collect()
    } else {
        let (_, classes) = infer_expected(&out.weak, &out.strong, &out.confidence)?;
        classes
            .into_iter()
            .enumerate()
            .map(|(v, class)| PredictionRow {
                node_id: v,
                expert: ExpertChoice::Expected,
                confidence: out.confidence[v],
                pred_class: class,
                true_class: g.labels()[v],
            })
            .collect()
    };
    let dir = out_dir(cfg)?;
    write_predictions(File::create(dir.join("predictions.csv"))?, &rows)?;
    if !g.splits().test.is_empty() {
        let e = evaluate(&m, &g, Split::Test, seed)?;
        let acc = if stochastic { e.stochastic } else { e.expected };
        println!("test accuracy {acc:.4}");
    }
    Ok(())
}

fn builtin_checks() -> Vec<GateCheck> {
    let gs = [
        GFunction::Step { tau: 0.0 },
        GFunction::Step { tau: 0.05 },
        GFunction::TwoLevel { d_max: 0.08, beta: 0.1 },
        GFunction::CappedLinear { slope: 4.0 },
    ];
    [Dispersion::Variance, Dispersion::NegEntropy]
        .into_iter()
        .flat_map(|d| {
            gs.iter().map(move |&g| GateCheck {
                spec: ConfidenceSpec::new(d, g),
                gate: None,
            })
        })
        .collect()
}

fn quasiconvexity_rows(cfg: &RunConfig, seed: u64) -> Result<Vec<ReportRow>, CliError> {
    let q = &cfg.verify.quasiconvexity;
    let checks = if q.specs.is_empty() {
        builtin_checks()
    } else {
        q.specs.clone()
    };
    let mut rows = Vec::new();
    for (i, check) in checks.into_iter().enumerate() {
        let conf = match check.gate {
            Some(doc) => Confidence::with_gate(check.spec.dispersion, ExpertModel::from_document(doc)?)?,
            None => Confidence::new(check.spec, derive_seed(seed, 10 + i as u64))?,
        };
        for &n in &q.classes {
            let worst = quasiconvexity_witness_search(&conf, n, q.trials, derive_seed(seed, (i * 100 + n) as u64))?;
            rows.push(ReportRow {
                case: "quasiconvexity".into(),
                n,
                alpha: vec![],
                mu: None,
                spec: check.spec.label(),
                clause: ClauseResult::at_most("max_margin", worst, 1e-12),
            });
        }
    }
    Ok(rows)
}

fn blindspot_rows(cfg: &RunConfig, seed: u64, given: Option<(PathBuf, PathBuf)>) -> Result<Vec<ReportRow>, CliError> {
    let b = &cfg.verify.blindspot;
    let instances = match given {
        Some((graph, meta)) => vec![BlindspotInstance::from_parts(load_graph(graph)?, load_meta(&meta)?)?],
        None => b
            .radii
            .iter()
            .map(|&k| build_blindspot_graph(k, b.f, derive_seed(seed, k as u64)))
            .collect::<Result<_, _>>()?,
    };
    let mut rows = Vec::new();
    for inst in &instances {
        let r = verify_blindspot(inst, b.draws, seed)?;
        rows.extend(r.rows(inst.graph.num_classes()));
    }
    Ok(rows)
}

fn verify(cfg: &RunConfig, suite: Option<Suite>, given: Option<(PathBuf, PathBuf)>) -> Result<(), CliError> {
    let seed = seed(cfg)?;
    let suite = if given.is_some() {
        Suite::Blindspot
    } else {
        suite.unwrap_or(cfg.verify.suite)
    };
    let mut rows = Vec::new();
    if matches!(suite, Suite::Theorem | Suite::All) {
        let sc = mowst::theory::SuiteConfig {
            seed,
            ..cfg.verify.theorem.clone()
        };
        for r in run_suite(&sc, Exec::Parallel)? {
            rows.extend(r.rows());
        }
        rows.extend(quasiconvexity_rows(cfg, seed)?);
    }
    if matches!(suite, Suite::Blindspot | Suite::All) {
        rows.extend(blindspot_rows(cfg, seed, given)?);
    }
    let dir = out_dir(cfg)?;
    write_report(File::create(dir.join("theorem_report.csv"))?, &rows)?;
    let failed = rows.iter().filter(|r| !r.clause.pass).count();
    println!("{} clauses checked, {failed} failed", rows.len());
    if failed > 0 {
        return Err(CliError::Failed(failed));
    }
    Ok(())
}

fn cost(cfg: &RunConfig, graph: Option<PathBuf>, f: Option<usize>, layers: Option<usize>) -> Result<(), CliError> {
    let f = f.unwrap_or(cfg.cost.f);
    let layers = layers.unwrap_or(cfg.cost.layers);
    if f == 0 || layers == 0 {
        return Err(CliError::Usage("cost needs f >= 1 and layers >= 1".into()));
    }
    let g = resolve_graph(cfg, graph)?;
    let sizes = khop_sizes(&g, layers, Exec::Parallel);
    let hops = sizes.iter().map(|&b| csv_float(b)).collect::<Vec<_>>().join(";");
    println!("arch,f,layers,hop_sizes,macs");
    for arch in [Architecture::Weak, Architecture::Gcn, Architecture::GcnSkip] {
        println!(
            "{},{f},{layers},{hops},{}",
            arch.name(),
            csv_float(cost_from_sizes(&sizes, f, arch))
        );
    }
    Ok(())
}
