//! Subcommand implementations behind the argument surface in `main`.

use std::fs;
use std::path::Path;

use spikegate::config::RunConfig;
use spikegate::energy::{energy_report, measure_firing_rate};
use spikegate::error::{Result, SgError};
use spikegate::events::{compute_residual, Clip, EmbeddingSequence, Label, ResidualKind};
use spikegate::gatenet::GateNet;
use spikegate::io::{load_checkpoint, load_manifest, read_ct01, write_pgm, ManifestEntry};
use spikegate::metrics::{
    angular_curvature, convex_hull_volume, hoyer, pca3_project, percentile_threshold,
    raw_anomaly_trace, run_filtered_fractions, spectral_centroid, MetricReport,
};
use spikegate::synthgen::{load_sample, make_dataset, SynthClass, SynthSpec};
use spikegate::train::{evaluate, run_training, ClipSample};
use spikegate::Tape;

use crate::{AnalyzeArgs, EnergyArgs, EvalArgs, GatemapArgs, SynthArgs, TrainArgs};

// active = gate above the per-frame 70th percentile, runs of 3 or more
const FIRE_PERCENTILE: f64 = 70.0;
const FIRE_MIN_RUN: usize = 3;

pub fn synth(args: &SynthArgs) -> Result<()> {
    let mut template = SynthSpec::new(SynthClass::Natural, args.seed);
    template.frames = args.frames;
    template.size = args.size;
    let entries = make_dataset(args.clips, &template, &args.out)?;
    println!("wrote {} clips to {}", entries.len(), args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut run = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(epochs) = args.epochs {
        run.train.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    run.validate()?;
    let (_, samples) = load_dataset(&args.data, &run)?;
    let mut net = GateNet::init(run.gatenet.clone(), run.event.clone(), run.train.seed)?;
    let history = run_training(&mut net, &samples, &run.train, run.to_value()?, Some(&args.out))?;
    fs::write(args.out.with_extension("csv"), &history.log_csv)?;
    print!("{}", history.log_csv);
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (net, run) = net_from_checkpoint(&args.ckpt)?;
    let (entries, samples) = load_dataset(&args.data, &run)?;
    let result = evaluate(&net, &samples)?;
    let mut out = String::from("clip,label,y_main,y_aux\n");
    for (entry, score) in entries.iter().zip(&result.scores) {
        out.push_str(&format!("{},{},{},{}\n", entry.clip, score.label, score.y, score.y_aux));
    }
    out.push('\n');
    out.push_str(&format!("acc,{}\n", result.acc));
    out.push_str(&format!("auc,{}\n", result.auc));
    print!("{}", out);
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum MetricKind {
    Hoyer,
    Fc,
    Curvature,
    Volume,
    Anomaly,
}

impl MetricKind {
    fn name(self) -> &'static str {
        match self {
            MetricKind::Hoyer => "hoyer",
            MetricKind::Fc => "fc",
            MetricKind::Curvature => "curvature",
            MetricKind::Volume => "volume",
            MetricKind::Anomaly => "anomaly",
        }
    }
}

fn parse_metrics(spec: &str) -> Result<Vec<MetricKind>> {
    spec.split(',')
        .map(|name| match name.trim() {
            "hoyer" => Ok(MetricKind::Hoyer),
            "fc" => Ok(MetricKind::Fc),
            "curvature" => Ok(MetricKind::Curvature),
            "volume" => Ok(MetricKind::Volume),
            "anomaly" => Ok(MetricKind::Anomaly),
            other => Err(SgError::invalid(
                "analyze",
                format!("unknown metric `{}`", other),
            )),
        })
        .collect()
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let kinds = parse_metrics(&args.metrics)?;
    if !(args.tau_anom > 0.0) {
        return Err(SgError::invalid("analyze", "tau-anom must be positive"));
    }
    let entries = load_manifest(&args.data.join("manifest.json"))?;
    if entries.is_empty() {
        return Err(SgError::data(args.data.display().to_string(), "empty manifest"));
    }
    let mut loaded = Vec::with_capacity(entries.len());
    for entry in &entries {
        loaded.push(load_sample(&args.data, entry)?);
    }

    let needs_emb = kinds
        .iter()
        .any(|k| matches!(k, MetricKind::Curvature | MetricKind::Volume));
    let mut trajectories: Vec<Vec<Vec<f64>>> = Vec::new();
    if needs_emb {
        for (entry, (_, emb)) in entries.iter().zip(&loaded) {
            let emb = emb.as_ref().ok_or_else(|| {
                SgError::data(entry.clip.clone(), "metric needs embeddings but the entry has none")
            })?;
            trajectories.push(token_mean_trajectory(emb));
        }
    }

    // one PCA basis fit on every analyzed trajectory point, then per-clip hulls
    let volumes = if kinds.contains(&MetricKind::Volume) {
        let all: Vec<Vec<f64>> = trajectories.iter().flatten().cloned().collect();
        let projected = pca3_project(&all)?;
        let mut vols = Vec::with_capacity(trajectories.len());
        let mut off = 0;
        for traj in &trajectories {
            vols.push(convex_hull_volume(&projected[off..off + traj.len()])?);
            off += traj.len();
        }
        vols
    } else {
        Vec::new()
    };

    let mut report = MetricReport::new(kinds.iter().map(|k| k.name().to_string()).collect());
    for (i, (entry, (clip, _))) in entries.iter().zip(&loaded).enumerate() {
        let residual = compute_residual(ResidualKind::Hf, clip)?;
        let series: Vec<f64> = residual
            .iter()
            .map(|m| m.data().iter().sum::<f64>() / m.numel() as f64)
            .collect();
        let mut row = Vec::with_capacity(kinds.len());
        for kind in &kinds {
            let v = match kind {
                MetricKind::Hoyer => {
                    let per: Vec<f64> =
                        residual.iter().map(|m| hoyer(m.data())).collect::<Result<_>>()?;
                    per.iter().sum::<f64>() / per.len() as f64
                }
                MetricKind::Fc => spectral_centroid(&series)?,
                MetricKind::Curvature => angular_curvature(&trajectories[i])?.1,
                MetricKind::Volume => volumes[i],
                MetricKind::Anomaly => {
                    // residual frames start at t = 1; frame 0 contributes nothing
                    let mut padded = vec![0.0];
                    padded.extend_from_slice(&series);
                    *raw_anomaly_trace(&padded, args.tau_anom)?.last().unwrap()
                }
            };
            row.push(v);
        }
        report.push_row(entry.clip.clone(), row)?;
    }
    print!("{}", render_metric_csv(&report));
    Ok(())
}

pub fn gatemap(args: &GatemapArgs) -> Result<()> {
    let (net, run) = net_from_checkpoint(&args.ckpt)?;
    let frames = read_ct01(&args.clip)?;
    let clip = Clip::new(frames, Label::Real, args.clip.display().to_string(), 8.0)
        .map_err(|e| SgError::data(args.clip.display().to_string(), e.to_string()))?;
    let emb = sibling_embedding(&args.clip, &run)?;
    let sample = ClipSample::prepare(&clip, emb.as_ref(), &run.event, run.gatenet.video_dim > 0)?;
    let mut tape = Tape::new();
    let out = net.forward(&mut tape, &sample.pooled, sample.video.as_ref())?;

    fs::create_dir_all(&args.out)?;
    let maps = &out.gate.maps;
    let g = run.gatenet.grid;
    let frame = g * g;
    for t in 0..run.gatenet.frames {
        // frame 0 carries no events by construction; export it black
        let pixels: Vec<u8> = if t == 0 {
            vec![0; frame]
        } else {
            maps.data()[t * frame..(t + 1) * frame]
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect()
        };
        write_pgm(&args.out.join(format!("frame_{:02}.pgm", t)), g, g, &pixels)?;
    }

    let mut csv = String::from("frame,boundary_fire,interior_fire\n");
    let (mut bf_sum, mut if_sum) = (0.0, 0.0);
    for t in 0..run.gatenet.frames {
        let vals = &maps.data()[t * frame..(t + 1) * frame];
        let thr = percentile_threshold(vals, FIRE_PERCENTILE);
        let active: Vec<bool> = vals.iter().map(|v| *v > thr).collect();
        let (bf, inf) = run_filtered_fractions(&active, g, FIRE_MIN_RUN)?;
        csv.push_str(&format!("{},{},{}\n", t, bf, inf));
        bf_sum += bf;
        if_sum += inf;
    }
    let t = run.gatenet.frames as f64;
    csv.push_str(&format!("mean,{},{}\n", bf_sum / t, if_sum / t));
    fs::write(args.out.join("fire.csv"), csv)?;
    Ok(())
}

pub fn energy(args: &EnergyArgs) -> Result<()> {
    let (net, run) = net_from_checkpoint(&args.ckpt)?;
    let (_, samples) = load_dataset(&args.data, &run)?;
    let mut outputs = Vec::with_capacity(samples.len());
    for sample in &samples {
        let mut tape = Tape::new();
        outputs.push(net.forward(&mut tape, &sample.pooled, sample.video.as_ref())?.gate);
    }
    let rate = measure_firing_rate(&outputs);
    let report = energy_report(&run.gatenet, rate.sbar);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    print!("{}", text);
    Ok(())
}

// Rebuild a network exactly as the checkpoint header describes it.
fn net_from_checkpoint(path: &Path) -> Result<(GateNet, RunConfig)> {
    let ckpt = load_checkpoint(path)?;
    let run = RunConfig::from_value(&ckpt.config)
        .map_err(|e| SgError::data(path.display().to_string(), e.to_string()))?;
    let mut net = GateNet::init(run.gatenet.clone(), run.event.clone(), ckpt.seed)?;
    net.import_params(&ckpt.params)
        .map_err(|e| SgError::data(path.display().to_string(), e.to_string()))?;
    Ok((net, run))
}

// Load every manifest entry and pool it for the given run configuration.
// Embeddings are consumed only when the architecture asks for them.
fn load_dataset(dir: &Path, run: &RunConfig) -> Result<(Vec<ManifestEntry>, Vec<ClipSample>)> {
    let entries = load_manifest(&dir.join("manifest.json"))?;
    if entries.is_empty() {
        return Err(SgError::data(dir.display().to_string(), "empty manifest"));
    }
    let want_traj = run.gatenet.channels > 4;
    let want_video = run.gatenet.video_dim > 0;
    let mut samples = Vec::with_capacity(entries.len());
    for entry in &entries {
        let (clip, emb) = load_sample(dir, entry)?;
        if (want_traj || want_video) && emb.is_none() {
            return Err(SgError::data(
                entry.clip.clone(),
                "config wants embedding channels but the entry has none",
            ));
        }
        let emb_ref = if want_traj || want_video { emb.as_ref() } else { None };
        samples.push(ClipSample::prepare(&clip, emb_ref, &run.event, want_video)?);
    }
    Ok((entries, samples))
}

// Embedding tensor next to a clip file, `clip_*.ct01` -> `emb_*.ct01`.
fn sibling_embedding(clip_path: &Path, run: &RunConfig) -> Result<Option<EmbeddingSequence>> {
    if run.gatenet.channels <= 4 && run.gatenet.video_dim == 0 {
        return Ok(None);
    }
    let name = clip_path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let sibling = name
        .strip_prefix("clip_")
        .map(|rest| clip_path.with_file_name(format!("emb_{}", rest)));
    match sibling {
        Some(path) if path.exists() => Ok(Some(EmbeddingSequence::new(read_ct01(&path)?, None)?)),
        _ => Err(SgError::data(
            clip_path.display().to_string(),
            "config wants embeddings; expected a sibling emb_*.ct01 file",
        )),
    }
}

// Per-frame mean over patch tokens: the clip-level trajectory.
fn token_mean_trajectory(emb: &EmbeddingSequence) -> Vec<Vec<f64>> {
    let (t, n, d) = (emb.t(), emb.n(), emb.dim());
    (0..t)
        .map(|ti| {
            let mut mean = vec![0.0; d];
            for tok in 0..n {
                for (m, v) in mean.iter_mut().zip(emb.token(ti, tok)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            mean
        })
        .collect()
}

// Rows per clip, then mean and std summary rows.
fn render_metric_csv(report: &MetricReport) -> String {
    let mut out = String::from("clip");
    for name in &report.metrics {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (id, row) in &report.rows {
        out.push_str(id);
        for v in row {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    for (label, row) in [("mean", report.mean_row()), ("std", report.std_row())] {
        out.push_str(label);
        for v in &row {
            out.push_str(&format!(",{}", v));
        }
        out.push('\n');
    }
    out
}
