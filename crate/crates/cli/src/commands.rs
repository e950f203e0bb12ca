use std::fs;
use std::path::{Path, PathBuf};

use pmstrnn::analysis::{attractor_census, pca, AttractorKind, CensusConfig, CensusReport, DetectConfig, MapKind, TrajectoryRecord, TrajectorySource};
use pmstrnn::checkpoint::{mse_sidecar_path, scaled_schedule, CheckpointWriter};
use pmstrnn::gradcheck::{check_instance, check_with, GradCheckSpec};
use pmstrnn::learner::{bptt, frame_mse, rollout, Drive, Trace};
use pmstrnn::movegen::{generate_script, parse_script, PrimitiveId, SubjectProfile};
use pmstrnn::regression::{run_imitation, ImitationMode, RegressionConfig};
use pmstrnn::{load_checkpoint, train as run_training, Checkpoint, Error, FrameSequence, Network, NetworkConfig, TrainSpec};

use crate::manifest::RunManifest;
use crate::{AnalyzeArgs, Failure, GenDataArgs, GenerateArgs, GradcheckArgs, ImitateArgs, TrainArgs};

type CmdResult = std::result::Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn parse_size(text: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || invalid(format!("bad frame size {text:?}, expected HxW"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let (h, w) = (h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?);
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Expands `Pa..Pb` into one single-primitive script per id; anything else is one script.
fn expand_scripts(text: &str, cycles: usize, period: usize) -> std::result::Result<Vec<(String, Vec<(PrimitiveId, usize)>)>, Failure> {
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (PrimitiveId, PrimitiveId) = (a.trim().parse()?, b.trim().parse()?);
        let ids: Vec<PrimitiveId> = PrimitiveId::ALL.iter().copied().skip_while(|p| *p != a).collect();
        let end = ids.iter().position(|p| *p == b).ok_or_else(|| invalid(format!("empty primitive range {text:?}")))?;
        return Ok(ids[..=end].iter().map(|p| (p.to_string(), vec![(*p, cycles)])).collect());
    }
    let script = parse_script(text, period)?;
    let name: String = text.trim().chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '-' }).collect();
    Ok(vec![(name, script)])
}

fn create_dir(dir: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>, manifest: &mut RunManifest) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))?;
    manifest.output(path)?;
    Ok(())
}

fn finish(manifest: &RunManifest, dir: &Path) -> CmdResult {
    let path = manifest.write(dir)?;
    println!("manifest: {}", path.display());
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> CmdResult {
    let size = parse_size(&args.size)?;
    let mut scripts = Vec::new();
    for s in &args.script {
        scripts.extend(expand_scripts(s, args.cycles, args.period)?);
    }
    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("gen-data", Some(args.seed));
    for (name, script) in &scripts {
        for subject in args.first_subject..args.first_subject + args.subjects {
            let profile = SubjectProfile::new(subject, args.seed);
            let seq = generate_script(script, &profile, args.period, size)?;
            let path = args.out.join(format!("{name}_s{subject}.pmv"));
            write_file(&path, seq.to_pmv_bytes(), &mut manifest)?;
        }
    }
    println!("wrote {} sequences to {}", manifest.outputs.len(), args.out.display());
    finish(&manifest, &args.out)
}

/// PMV files named by `paths`, directories expanded in file-name order.
fn data_files(paths: &[PathBuf]) -> std::result::Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "pmv"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(invalid("no sequence files given"));
    }
    Ok(out)
}

fn load_data(paths: &[PathBuf], manifest: &mut RunManifest) -> std::result::Result<Vec<FrameSequence>, Failure> {
    data_files(paths)?
        .iter()
        .map(|f| {
            manifest.input(f)?;
            Ok(FrameSequence::load_pmv(f)?)
        })
        .collect()
}

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut manifest = RunManifest::new("train", None);
    let config = NetworkConfig::from_toml(&read_text(&args.config)?)?;
    manifest.config(&args.config)?;
    let mut spec = TrainSpec::from_toml(&read_text(&args.spec)?)?;
    manifest.config(&args.spec)?;
    manifest.seed = Some(spec.seed);
    let data = load_data(&args.data, &mut manifest)?;
    let net = Network::new(config.clone())?;
    for (k, seq) in data.iter().enumerate() {
        if seq.size() != net.frame_size() {
            return Err(Error::Topology(format!("sequence {k} has frames {:?}, network expects {:?}", seq.size(), net.frame_size())).into());
        }
    }
    if let Some(c) = &args.checkpoints {
        spec.checkpoint_epochs = c.clone();
    } else if spec.checkpoint_epochs.is_empty() {
        spec.checkpoint_epochs = scaled_schedule(spec.epochs_max);
    }
    create_dir(&args.out)?;
    let mut writer = CheckpointWriter::new(&args.out, config, spec.checkpoint_epochs.clone())?;
    let params = net.init_params(data.len(), spec.seed);
    let outcome = run_training(&net, params, &data, &spec, |rec, p, hist, last| {
        if rec.epoch % 50 == 0 || last {
            eprintln!("epoch {} open {:.5} closed {:.5}", rec.epoch, rec.open_mse, rec.closed_mse);
        }
        writer.on_epoch(rec, p, hist, last)
    })?;
    for p in &writer.written {
        manifest.output(p)?;
        manifest.output(&mse_sidecar_path(p))?;
    }
    let history = pmstrnn::checkpoint::mse_history_csv(&outcome.history);
    write_file(&args.out.join("mse.csv"), history, &mut manifest)?;
    match outcome.terminated_at {
        Some(e) => println!("closed-loop error below threshold after epoch {e}"),
        None => println!("stopped at epochs_max = {}", spec.epochs_max),
    }
    finish(&manifest, &args.out)
}

/// Parses `layer:kind` (`kind` in fm, cm, out).
fn parse_map(text: &str) -> std::result::Result<(usize, MapKind), Failure> {
    let bad = || invalid(format!("bad map selector {text:?}, expected layer:fm|cm|out"));
    let (layer, kind) = text.split_once(':').ok_or_else(bad)?;
    let kind = match kind.trim().to_ascii_lowercase().as_str() {
        "fm" => MapKind::Fm,
        "cm" => MapKind::Cm,
        "out" | "output" => MapKind::Output,
        _ => return Err(bad()),
    };
    let layer = if kind == MapKind::Output { 0 } else { layer.trim().parse().map_err(|_| bad())? };
    Ok((layer, kind))
}

fn map_label(layer: usize, kind: MapKind) -> String {
    match kind {
        MapKind::Fm => format!("fm{layer}"),
        MapKind::Cm => format!("cm{layer}"),
        MapKind::Output => "out".into(),
    }
}

/// Activity of one map group over the trace, excluding the initial state.
fn trace_record(trace: &Trace, layer: usize, kind: MapKind, source: TrajectorySource) -> pmstrnn::Result<TrajectoryRecord> {
    let rows = match kind {
        MapKind::Output => trace.outputs.iter().map(|f| f.as_slice().to_vec()).collect(),
        _ => {
            let n = trace.states.first().map_or(0, |s| s.layers.len());
            if layer == 0 || layer > n {
                return Err(Error::InvalidArgument(format!("no layer {layer}")));
            }
            trace.states[1..]
                .iter()
                .map(|s| {
                    let l = &s.layers[layer - 1];
                    if kind == MapKind::Fm { l.fm_act.as_slice().to_vec() } else { l.cm_act.as_slice().to_vec() }
                })
                .collect()
        }
    };
    TrajectoryRecord::new(source, rows)
}

fn record_csv(rec: &TrajectoryRecord) -> String {
    let mut s = String::from("step");
    for i in 0..rec.dim() {
        s.push_str(&format!(",u{i}"));
    }
    s.push('\n');
    for (t, row) in rec.rows().enumerate().take(rec.steps()) {
        s.push_str(&t.to_string());
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn generate(args: &GenerateArgs) -> CmdResult {
    let mut manifest = RunManifest::new("generate", None);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    manifest.input(&args.checkpoint)?;
    let data = FrameSequence::load_pmv(&args.data)?;
    manifest.input(&args.data)?;
    let net = ckpt.network()?;
    let init = ckpt.initial_state(args.sequence_id)?;
    if data.size() != net.frame_size() {
        return Err(Error::Topology(format!("data frames are {:?}, checkpoint expects {:?}", data.size(), net.frame_size())).into());
    }
    let first = data.frames().first().ok_or_else(|| invalid("data sequence is empty"))?;
    let weights = &ckpt.params.weights;
    let drive = if args.mode == "open" { Drive::Open(data.frames()) } else { Drive::Closed { seed: first } };
    let trace = rollout(&net, weights, init, drive, args.steps)?;
    let maps: Vec<(usize, MapKind)> = args.record.iter().map(|r| parse_map(r)).collect::<std::result::Result<_, _>>()?;

    create_dir(&args.out)?;
    let (h, w) = net.frame_size();
    let outputs = FrameSequence::from_frames(h, w, trace.outputs.clone())?;
    write_file(&args.out.join(format!("{}.pmv", args.mode)), outputs.to_pmv_bytes(), &mut manifest)?;
    let mut mse = String::from("step,mse\n");
    for (s, out) in trace.outputs.iter().enumerate() {
        if let Some(target) = data.frames().get(s + args.lookahead) {
            mse.push_str(&format!("{s},{}\n", frame_mse(out, target)));
        }
    }
    write_file(&args.out.join(format!("{}_mse.csv", args.mode)), mse, &mut manifest)?;
    for (layer, kind) in maps {
        let source = TrajectorySource { layer, kind, checkpoint: ckpt.epoch.to_string(), sequence: args.sequence_id };
        let rec = trace_record(&trace, layer, kind, source)?;
        write_file(&args.out.join(format!("trajectory_{}.csv", map_label(layer, kind))), record_csv(&rec), &mut manifest)?;
    }
    finish(&manifest, &args.out)
}

pub fn imitate(args: &ImitateArgs) -> CmdResult {
    let mut manifest = RunManifest::new("imitate", None);
    let ckpt = load_checkpoint(&args.checkpoint)?;
    manifest.input(&args.checkpoint)?;
    let target = FrameSequence::load_pmv(&args.target)?;
    manifest.input(&args.target)?;
    let mut cfg = RegressionConfig::for_checkpoint(&ckpt);
    cfg.window = args.window;
    cfg.iterations_per_step = args.iters;
    cfg.adaptation_rate = args.rate;
    cfg.lookahead = args.lookahead;
    if let Some(t) = args.threshold {
        cfg.threshold = t;
    }
    let modes: Vec<ImitationMode> = match args.mode.as_str() {
        "both" => vec![ImitationMode::ErrorRegression, ImitationMode::Entrainment],
        m => vec![m.parse()?],
    };
    create_dir(&args.out)?;
    let input = args.target.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut summary = String::from("input,mode,mean_mse\n");
    for mode in modes {
        let label = if mode == ImitationMode::ErrorRegression { "er" } else { "entrain" };
        let report = run_imitation(&target, &ckpt, mode, &cfg)?;
        write_file(&args.out.join(format!("imitation_{label}.csv")), report.to_csv(), &mut manifest)?;
        write_file(&args.out.join(format!("predictions_{label}.pmv")), report.predictions.to_pmv_bytes(), &mut manifest)?;
        summary.push_str(&format!("{input},{label},{}\n", report.mean_mse));
        println!("{label}: mean prediction MSE {:.6}", report.mean_mse);
    }
    write_file(&args.out.join("summary.csv"), summary, &mut manifest)?;
    finish(&manifest, &args.out)
}

fn checkpoint_files(paths: &[PathBuf]) -> std::result::Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "pmn"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn kind_cell(kind: AttractorKind) -> (String, String) {
    match kind {
        AttractorKind::LimitCycle { period } => ("limit_cycle".into(), period.to_string()),
        AttractorKind::FixedPoint => ("fixed_point".into(), String::new()),
        AttractorKind::None => ("none".into(), String::new()),
    }
}

pub fn analyze(args: &AnalyzeArgs) -> CmdResult {
    if !args.census && args.pca.is_empty() {
        return Err(Failure::Usage("nothing to do: pass --census and/or --pca".into()));
    }
    let mut manifest = RunManifest::new("analyze", None);
    let data = load_data(&args.data, &mut manifest)?;
    let mut ckpts: Vec<(PathBuf, Checkpoint)> = Vec::new();
    for f in checkpoint_files(&args.checkpoints)? {
        let c = load_checkpoint(&f)?;
        manifest.input(&f)?;
        ckpts.push((f, c));
    }
    // the final checkpoint usually duplicates a scheduled epoch; order by epoch, keep both
    ckpts.sort_by_key(|(f, c)| (c.epoch, f.clone()));
    let pcas: Vec<(usize, MapKind, usize)> = args
        .pca
        .iter()
        .map(|spec| {
            let (map, n) = spec.rsplit_once(':').ok_or_else(|| invalid(format!("bad PCA spec {spec:?}, expected layer:kind:n")))?;
            let (layer, kind) = parse_map(map)?;
            let n = n.parse().map_err(|_| invalid(format!("bad component count in {spec:?}")))?;
            Ok((layer, kind, n))
        })
        .collect::<std::result::Result<_, Failure>>()?;
    create_dir(&args.out)?;

    if args.census {
        let cfg = CensusConfig { steps: args.steps, layer: 1, detect: DetectConfig::for_rollout(args.steps) };
        let mut reports = Vec::new();
        let mut entries = String::from("epoch,sequence,kind,period,output_kind,output_period,pixel_fidelity,embeds_target,attractor\n");
        for (_, c) in &ckpts {
            let r = attractor_census(c, &data, &cfg)?;
            for e in &r.entries {
                let (k, p) = kind_cell(e.verdict.kind);
                let (ok, op) = kind_cell(e.verdict.output_kind);
                let a = e.attractor.map(|a| a.to_string()).unwrap_or_default();
                entries.push_str(&format!(
                    "{},{},{k},{p},{ok},{op},{},{},{a}\n",
                    r.epoch, e.sequence, e.verdict.pixel_fidelity, e.verdict.embeds_target
                ));
            }
            println!("epoch {}: {} attractors", r.epoch, r.count);
            reports.push(r);
        }
        write_file(&args.out.join("census.csv"), CensusReport::table_csv(&reports), &mut manifest)?;
        write_file(&args.out.join("census_entries.csv"), entries, &mut manifest)?;
    }

    for (path, c) in &ckpts {
        if pcas.is_empty() {
            break;
        }
        let net = c.network()?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (k, seq) in data.iter().enumerate() {
            let first = seq.frames().first().ok_or_else(|| invalid(format!("sequence {k} is empty")))?;
            let trace = rollout(&net, &c.params.weights, c.initial_state(k)?, Drive::Closed { seed: first }, args.steps)?;
            for &(layer, kind, n) in &pcas {
                let source = TrajectorySource { layer, kind, checkpoint: stem.clone(), sequence: k };
                let rec = trace_record(&trace, layer, kind, source)?;
                let p = pca(&rec, n)?;
                let name = format!("pca_{stem}_seq{k}_{}.csv", map_label(layer, kind));
                write_file(&args.out.join(name), p.to_csv(), &mut manifest)?;
            }
        }
    }
    finish(&manifest, &args.out)
}

pub fn gradcheck(args: &GradcheckArgs) -> CmdResult {
    let mut manifest = RunManifest::new("gradcheck", Some(args.seed));
    let config = match &args.config {
        Some(p) => {
            manifest.config(p)?;
            NetworkConfig::from_toml(&read_text(p)?)?
        }
        None => NetworkConfig::toy(),
    };
    let spec = GradCheckSpec {
        seed: args.seed,
        steps: args.steps,
        samples_per_tensor: args.samples,
        tolerance: args.tolerance,
        ..GradCheckSpec::default()
    };
    let report = match &args.corrupt_class {
        None => pmstrnn::gradcheck::run_gradcheck(&config, &spec)?,
        Some(class) => corrupted_check(&config, &spec, class)?,
    };
    print!("{}", report.to_csv());
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_file(&out.join("gradcheck.csv"), report.to_csv(), &mut manifest)?;
        finish(&manifest, out)?;
    }
    if report.passed() {
        println!("gradcheck passed: max relative error {:e}", report.max_rel_error());
        Ok(())
    } else {
        Err(Failure::Numerical(format!(
            "max relative error {:e} >= tolerance {:e}",
            report.max_rel_error(),
            report.tolerance
        )))
    }
}

/// The [`pmstrnn::gradcheck::run_gradcheck`] instance with one weight class
/// of the analytic gradient scaled by 1.001.
fn corrupted_check(config: &NetworkConfig, spec: &GradCheckSpec, class: &str) -> pmstrnn::Result<pmstrnn::gradcheck::GradCheckReport> {
    let (net, weights, init, seq) = check_instance(config, spec)?;
    check_with(&net, &weights, &init, &seq, spec, |w, s| {
        let mut g = bptt(&net, w, s, &seq, &spec.train)?;
        for t in g.weights.tensors_mut() {
            if t.name.rsplit('.').next() == Some(class) {
                for v in t.data.iter_mut() {
                    *v *= 1.001;
                }
            }
        }
        Ok((g.weights, g.initial_state.tensors().into_iter().cloned().collect()))
    })
}
