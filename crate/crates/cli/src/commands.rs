//! One function per subcommand, each driven by resolved settings.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use sofas::baseline_lk::{LkConfig, LkEstimator};
use sofas::engine::{write_labeled, Engine, EngineConfig};
use sofas::eval::{self, FlowRecord};
use sofas::flow_plane::FlowPlaneConfig;
use sofas::synth::{read_ground_truth, MotionModel, Pendulum, Scene, SceneObject, SensorNoise, Shape, ShapeContour};
use sofas::track_plane::{TrackPlaneConfig, SNAPSHOT_HEADER};
use sofas::{EventStream, FlowVector, SensorGeometry};

use crate::error::CliError;
use crate::render::{self, ColorMode, RenderConfig};
use crate::settings::{Pair, PathArg, Settings, Size};

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Writes `w` to `path` through `body`, attributing failures to the path.
fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> sofas::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    body(&mut w).map_err(|e| CliError::data(path, e))?;
    finish(path, w)
}

fn path(s: &Settings, key: &str) -> Result<PathBuf, CliError> {
    Ok(s.require::<PathArg>(key)?.0)
}

/// `key`, or `base` with `suffix` appended.
fn path_or(s: &Settings, key: &str, base: &Path, suffix: &str) -> Result<PathBuf, CliError> {
    let default = PathArg(format!("{}{suffix}", base.display()).into());
    Ok(s.get(key, default)?.0)
}

fn geometry(s: &Settings) -> Result<SensorGeometry, CliError> {
    let d = SensorGeometry::DAVIS240;
    let Size(w, h) = s.get("sensor", Size(d.width, d.height))?;
    SensorGeometry::new(w, h).map_err(|e| CliError::Config { key: "sensor".into(), message: e.to_string() })
}

fn read_events(s: &Settings) -> Result<(PathBuf, EventStream), CliError> {
    let input = path(s, "input")?;
    let g = geometry(s)?;
    let stream = EventStream::read(open(&input)?, g).map_err(|e| CliError::data(&input, e))?;
    Ok((input, stream))
}

pub fn engine_config(s: &Settings) -> Result<EngineConfig, CliError> {
    let d = EngineConfig::default();
    let (f, t) = (FlowPlaneConfig::default(), TrackPlaneConfig::default());
    let cfg = EngineConfig {
        flow_plane: FlowPlaneConfig {
            n: s.get("flow_plane.n", f.n)?,
            range: s.get("flow_plane.range", f.range)?,
            p_stable: s.get("flow_plane.p_stable", f.p_stable)?,
            q: s.get("flow_plane.q", f.q)?,
            depth_max: s.get("flow_plane.depth_max", f.depth_max)?,
            w: s.get("flow_plane.w", f.w)?,
            v_ref: s.get("flow_plane.v_ref", f.v_ref)?,
            noise_lifespan: s.get("flow_plane.noise_lifespan", f.noise_lifespan)?,
            min_assoc_events: s.get("flow_plane.min_assoc_events", f.min_assoc_events)?,
            hysteresis: s.get("flow_plane.hysteresis", f.hysteresis)?,
            seeds: s.get("flow_plane.seeds", f.seeds)?,
        },
        track_plane: TrackPlaneConfig {
            m_grid: s.get("track_plane.m_grid", t.m_grid)?,
            h0: s.get("track_plane.h0", t.h0)?,
            hit_fraction: s.get("track_plane.hit_fraction", t.hit_fraction)?,
            evolve_threshold: s.get("track_plane.evolve_threshold", t.evolve_threshold)?,
            lifetime_px: s.get("track_plane.lifetime_px", t.lifetime_px)?,
            h_min: s.get("track_plane.h_min", t.h_min)?,
            h_max: s.get("track_plane.h_max", t.h_max)?,
            v_floor: s.get("track_plane.v_floor", t.v_floor)?,
            v_ref: s.get("track_plane.v_ref", t.v_ref)?,
            rate_scale: s.get("track_plane.rate_scale", t.rate_scale)?,
            history_px: s.get("track_plane.history_px", t.history_px)?,
            refine_margin: s.get("track_plane.refine_margin", t.refine_margin)?,
        },
        prune_fraction: s.get("prune_fraction", d.prune_fraction)?,
        merge_flow_tol: s.get("merge_flow_tol", d.merge_flow_tol)?,
        merge_overlap_tol: s.get("merge_overlap_tol", d.merge_overlap_tol)?,
        merge_reach: s.get("merge_reach", d.merge_reach)?,
        maintenance_period: s.get("maintenance_period", d.maintenance_period)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn lk_config(s: &Settings) -> Result<LkConfig, CliError> {
    let d = LkConfig::default();
    let cfg = LkConfig {
        window: s.get("lk.window", d.window)?,
        min_valid: s.get("lk.min_valid", d.min_valid)?,
        eigen_ratio_floor: s.get("lk.eigen_ratio_floor", d.eigen_ratio_floor)?,
        eigen_floor: s.get("lk.eigen_floor", d.eigen_floor)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Resolved settings as a config file. Provenance and timing are comments,
/// so replaying the manifest reproduces the outputs byte for byte.
fn write_manifest(path: &Path, command: &str, s: &Settings, notes: &[(&str, String)]) -> Result<(), CliError> {
    let mut w = create(path)?;
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "# sofas {} {command}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "# replay: sofas {command} --config {}", path.display())?;
        for (k, v) in notes {
            writeln!(w, "# {k} = {v}")?;
        }
        for (k, v) in s.resolved() {
            writeln!(w, "{k} = {v}")?;
        }
        Ok(())
    };
    body().map_err(|e| CliError::io(path, e))?;
    finish(path, w)
}

fn rate(events: usize, secs: f64) -> f64 {
    if secs > 0.0 {
        events as f64 / secs
    } else {
        f64::INFINITY
    }
}

pub fn synth(s: &Settings) -> Result<(), CliError> {
    let g = geometry(s)?;
    let shape_name: String = s.get("shape", "hexagon".to_string())?;
    let width: f64 = s.get("width", 65.0)?;
    let shape = match shape_name.as_str() {
        "circle" => Shape::Circle { radius: width / 2.0 },
        "hexagon" => Shape::Hexagon { width },
        "rectangle" => Shape::Rectangle { width, height: s.get("height", width)? },
        "bar" => Shape::Bar { length: width, thickness: s.get("height", 3.0)? },
        other => {
            return Err(CliError::Config {
                key: "shape".into(),
                message: format!("unknown shape `{other}` (circle, hexagon, rectangle or bar)"),
            })
        }
    };
    let contour = ShapeContour::build(shape, g)?;
    let duration: f64 = s.get("duration", 2.0)?;
    let center = (g.width as f64 / 2.0, g.height as f64 / 2.0);
    let motion_name: String = s.get("motion", "constant".to_string())?;
    let motion = match motion_name.as_str() {
        "constant" => {
            let Pair(u, v) = s.get("vel", Pair(58.0, 0.0))?;
            MotionModel::Constant(FlowVector::new(u, v))
        }
        "pendulum" => {
            let r = Pendulum::reference();
            let mut p = Pendulum::new(
                s.get("pendulum.length", r.length)?,
                s.get("pendulum.theta_max_deg", r.theta_max.to_degrees())?.to_radians(),
                s.get("pendulum.g", r.g)?,
            )?;
            p.phase = s.get("pendulum.phase", r.phase)?;
            MotionModel::Pendulum(p)
        }
        "rotation" => {
            let Pair(cx, cy) = s.get("rotation.center", Pair(center.0, center.1))?;
            MotionModel::Rotation { center: (cx, cy), omega: s.require("rotation.omega")? }
        }
        other => {
            return Err(CliError::Config {
                key: "motion".into(),
                message: format!("unknown motion `{other}` (constant, pendulum or rotation)"),
            })
        }
    };
    // Constant motion is centred on the sensor over the run by default.
    let drift = match motion {
        MotionModel::Constant(v) => (v.v_u * duration / 2.0, v.v_v * duration / 2.0),
        _ => (0.0, 0.0),
    };
    let Pair(ox, oy) = s.get("origin", Pair(center.0 - drift.0, center.1 - drift.1))?;
    let noise = SensorNoise {
        noise_rate: s.get("noise_rate", 0.0)?,
        jitter_us: s.get("jitter_us", 0)?,
        refractory_us: s.get("refractory_us", 0)?,
        seed: s.get("seed", 0)?,
    };
    let out = path(s, "output")?;
    let gt_path = path_or(s, "gt", &out, ".gt")?;
    let manifest = path_or(s, "manifest", &out, ".manifest")?;
    s.finish()?;

    let scene = Scene::new(vec![SceneObject::new(contour, (ox, oy), motion)]).with_noise(noise);
    let (stream, gt) = scene.generate(duration, g)?;
    write_file(&out, |w| stream.write(w))?;
    write_file(&gt_path, |w| gt.write(&stream.events, w))?;
    let notes = [("events", stream.len().to_string()), ("clipped", gt.clipped.to_string())];
    write_manifest(&manifest, "synth", s, &notes)?;
    println!("events={}", stream.len());
    Ok(())
}

pub fn run(s: &Settings) -> Result<(), CliError> {
    let (input, stream) = read_events(s)?;
    let cfg = engine_config(s)?;
    let out = path_or(s, "output", &input, ".flow")?;
    let snapshots = path_or(s, "snapshots", &out, ".snapshots.csv")?;
    let snapshot_us: u64 = s.get("snapshot_us", 100_000)?;
    if snapshot_us == 0 {
        return Err(CliError::Config { key: "snapshot_us".into(), message: "must be positive".into() });
    }
    let manifest = path_or(s, "manifest", &out, ".manifest")?;
    s.finish()?;

    let mut engine = Engine::new(cfg)?;
    let mut snap = create(&snapshots)?;
    let mut next_snap = stream.events.first().map_or(0, |e| e.t) + snapshot_us;
    let rows = |engine: &Engine, now: u64, w: &mut BufWriter<File>| -> sofas::Result<()> {
        for p in engine.planes() {
            p.write_snapshot_row(now, &mut *w)?;
        }
        Ok(())
    };
    writeln!(snap, "{SNAPSHOT_HEADER}").map_err(|e| CliError::io(&snapshots, e))?;

    let start = Instant::now();
    let mut labeled = Vec::with_capacity(stream.len());
    for e in &stream.events {
        labeled.push(engine.process(*e).map_err(|err| CliError::data(&input, err))?);
        if e.t >= next_snap {
            rows(&engine, e.t, &mut snap).map_err(|err| CliError::data(&snapshots, err))?;
            next_snap = (e.t / snapshot_us + 1) * snapshot_us;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if let Some(last) = stream.events.last() {
        rows(&engine, last.t, &mut snap).map_err(|err| CliError::data(&snapshots, err))?;
    }
    finish(&snapshots, snap)?;

    let stats = engine.stats();
    if labeled.len() != stream.len() || stats.events != stream.len() {
        return Err(CliError::Internal(format!("{} events in, {} labels out", stream.len(), labeled.len())));
    }
    if let Some(bad) = labeled.iter().filter_map(|l| l.segment()).find(|&id| id as usize >= stats.planes_created) {
        return Err(CliError::Internal(format!("segment {bad} was never created")));
    }
    write_file(&out, |w| write_labeled(stream.geometry, &labeled, w))?;
    let notes = [
        ("events", stats.events.to_string()),
        ("labeled", stats.labeled.to_string()),
        ("planes_created", stats.planes_created.to_string()),
        ("planes_merged", stats.planes_merged.to_string()),
        ("planes_pruned", stats.planes_pruned.to_string()),
        ("seconds", format!("{secs:.3}")),
        ("events_per_sec", format!("{:.0}", rate(stream.len(), secs))),
    ];
    write_manifest(&manifest, "run", s, &notes)?;
    println!("events={} labeled={} planes={}", stats.events, stats.labeled, engine.planes().len());
    Ok(())
}

pub fn lk(s: &Settings) -> Result<(), CliError> {
    let (input, stream) = read_events(s)?;
    let cfg = lk_config(s)?;
    let out = path_or(s, "output", &input, ".lk")?;
    let manifest = path_or(s, "manifest", &out, ".manifest")?;
    s.finish()?;

    let start = Instant::now();
    let records = LkEstimator::new(stream.geometry, cfg)?.run(&stream.events).map_err(|e| CliError::data(&input, e))?;
    let secs = start.elapsed().as_secs_f64();
    if records.len() != stream.len() {
        return Err(CliError::Internal(format!("{} events in, {} records out", stream.len(), records.len())));
    }
    write_file(&out, |w| eval::write_flow_records(stream.geometry, &records, w))?;
    let solved = records.iter().filter(|r| r.flow.is_some()).count();
    let notes = [
        ("events", stream.len().to_string()),
        ("solved", solved.to_string()),
        ("seconds", format!("{secs:.3}")),
        ("events_per_sec", format!("{:.0}", rate(stream.len(), secs))),
    ];
    write_manifest(&manifest, "lk", s, &notes)?;
    println!("events={} solved={solved}", stream.len());
    Ok(())
}

fn read_records(s: &Settings) -> Result<(PathBuf, SensorGeometry, Vec<FlowRecord>), CliError> {
    let input = path(s, "input")?;
    let g = geometry(s)?;
    let (g, records) = eval::read_flow_records(open(&input)?, g).map_err(|e| CliError::data(&input, e))?;
    Ok((input, g, records))
}

pub fn eval(s: &Settings) -> Result<(), CliError> {
    let (_, _, records) = read_records(s)?;
    let gt_path = path(s, "gt")?;
    let since: f64 = s.get("since", 0.0)?;
    if !(since >= 0.0 && since.is_finite()) {
        return Err(CliError::Config { key: "since".into(), message: "must be a non-negative number of seconds".into() });
    }
    let bin_width: f64 = s.get("bin_width", 5.0)?;
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(CliError::Config { key: "bin_width".into(), message: "must be positive".into() });
    }
    let out = s.opt::<PathArg>("output")?.map(|p| p.0);
    let histograms = s.opt::<PathArg>("histograms")?.map(|p| p.0);
    s.finish()?;

    let gt = read_ground_truth(open(&gt_path)?).map_err(|e| CliError::data(&gt_path, e))?;
    let ev = eval::evaluate(&records, &gt, (since * 1e6).round() as u64)?;
    let segments: BTreeSet<u32> = records.iter().filter_map(|r| r.segment).collect();

    let mut text = Vec::new();
    let body = |w: &mut Vec<u8>| -> sofas::Result<()> {
        writeln!(w, "events={}", ev.total)?;
        writeln!(w, "labeled={}", ev.labeled)?;
        writeln!(w, "coverage={}", ev.coverage())?;
        writeln!(w, "undefined={}", ev.undefined)?;
        writeln!(w, "segments={}", segments.len())?;
        writeln!(w, "cross_label_rate={}", eval::cross_label_rate(&records, &gt))?;
        let (mags, angles) = (ev.magnitudes(), ev.angles());
        if mags.is_empty() {
            writeln!(w, "magnitude_count=0")?;
            writeln!(w, "angle_count=0")?;
            return Ok(());
        }
        eval::summarize(&mags, bin_width)?.write("magnitude", &mut *w)?;
        let abs: Vec<f64> = mags.iter().map(|m| m.abs()).collect();
        writeln!(w, "magnitude_abs_median={}", eval::median(&abs))?;
        eval::summarize(&angles, bin_width)?.write("angle", &mut *w)?;
        Ok(())
    };
    body(&mut text)?;

    if let Some(prefix) = histograms {
        let (mags, angles) = (ev.magnitudes(), ev.angles());
        if !mags.is_empty() {
            for (name, values) in [("magnitude", &mags), ("angle", &angles)] {
                let p = PathBuf::from(format!("{}.{name}.csv", prefix.display()));
                let h = eval::Histogram::build(values, bin_width)?;
                write_file(&p, |w| h.write_csv(w))?;
            }
        }
    }
    match out {
        Some(p) => {
            let mut w = create(&p)?;
            w.write_all(&text).map_err(|e| CliError::io(&p, e))?;
            finish(&p, w)
        }
        None => {
            std::io::stdout().write_all(&text).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
            Ok(())
        }
    }
}

pub fn render(s: &Settings) -> Result<(), CliError> {
    let (_, g, records) = read_records(s)?;
    let dir = path(s, "output")?;
    let cfg = RenderConfig {
        frame_us: s.get("render.frame_us", 33_333)?,
        v_sat: s.get("render.v_sat", 100.0)?,
        mode: s.get("render.mode", ColorMode::Flow)?,
    };
    if cfg.frame_us == 0 {
        return Err(CliError::Config { key: "render.frame_us".into(), message: "must be positive".into() });
    }
    if !(cfg.v_sat > 0.0 && cfg.v_sat.is_finite()) {
        return Err(CliError::Config { key: "render.v_sat".into(), message: "must be positive".into() });
    }
    s.finish()?;

    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let n = render::render(g, &records, &cfg, |frame| {
        let p = dir.join(format!("frame_{:05}.ppm", frame.index));
        let mut w = create(&p)?;
        frame.write_ppm(&mut w).map_err(|e| CliError::io(&p, e))?;
        finish(&p, w)
    })?;
    println!("frames={n}");
    Ok(())
}

pub fn bench(s: &Settings) -> Result<(), CliError> {
    let stream = match s.opt::<PathArg>("input")? {
        Some(_) => read_events(s)?.1,
        None => {
            let g = SensorGeometry::DAVIS240;
            let contour = ShapeContour::build(Shape::Hexagon { width: 65.0 }, g)?;
            let motion = MotionModel::Constant(FlowVector::new(58.0, 0.0));
            Scene::new(vec![SceneObject::new(contour, (60.0, 90.0), motion)]).generate(2.0, g)?.0
        }
    };
    let cfg = engine_config(s)?;
    let lk_cfg = lk_config(s)?;
    let repeat: usize = s.get("repeat", 3)?;
    if repeat == 0 {
        return Err(CliError::Config { key: "repeat".into(), message: "must be positive".into() });
    }
    s.finish()?;

    let best = |f: &mut dyn FnMut() -> sofas::Result<()>| -> sofas::Result<f64> {
        let mut best = f64::INFINITY;
        for _ in 0..repeat {
            let start = Instant::now();
            f()?;
            best = best.min(start.elapsed().as_secs_f64());
        }
        Ok(best)
    };
    let engine_secs = best(&mut || Engine::new(cfg.clone())?.run(&stream.events).map(drop))?;
    let lk_secs = best(&mut || LkEstimator::new(stream.geometry, lk_cfg.clone())?.run(&stream.events).map(drop))?;
    println!("events={}", stream.len());
    println!("engine_seconds={engine_secs:.4}");
    println!("engine_events_per_sec={:.0}", rate(stream.len(), engine_secs));
    println!("lk_seconds={lk_secs:.4}");
    println!("lk_events_per_sec={:.0}", rate(stream.len(), lk_secs));
    Ok(())
}
