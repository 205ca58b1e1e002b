//! Dataset ingestion from frame-based files, sliding-window scene
//! extraction, synthetic scene generation, and report/plot emission.
//!
//! Frame files are TSV/CSV rows `frame_id, agent_id, x, y` in world
//! coordinates (2.5 fps convention). Scenes are interchanged as JSONL, one
//! scene per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attack::AttackSummaryStats;
use crate::error::{Error, Result};
use crate::model::{
    check_collision, distance_matrix, Agent, AttackReport, Point, Scene, Trajectory,
};
use crate::predictors::Predictor;

/// One row of a frame-based trajectory file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: i64,
    pub agent_id: String,
    pub x: f64,
    pub y: f64,
}

/// A line that failed to parse, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseIssue {
    pub line: usize,
    pub message: String,
}

/// Parses tab- or comma-separated `frame_id, agent_id, x, y` rows. Lines
/// beginning with `#` are skipped. In strict mode the first malformed line
/// is an error; otherwise issues are returned alongside the records.
pub fn parse_frames<R: std::io::Read>(
    reader: R,
    strict: bool,
) -> Result<(Vec<FrameRecord>, Vec<ParseIssue>)> {
    let mut records = Vec::new();
    let mut issues = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed
            .split(|c| c == '\t' || c == ',')
            .map(str::trim)
            .filter(|f| !f.is_empty())
            .collect();
        let parsed = (|| -> std::result::Result<FrameRecord, String> {
            if fields.len() != 4 {
                return Err(format!("expected 4 fields, got {}", fields.len()));
            }
            let frame_id: i64 = fields[0]
                .parse()
                .map_err(|_| format!("bad frame id {:?}", fields[0]))?;
            let x: f64 = fields[2]
                .parse()
                .map_err(|_| format!("bad x coordinate {:?}", fields[2]))?;
            let y: f64 = fields[3]
                .parse()
                .map_err(|_| format!("bad y coordinate {:?}", fields[3]))?;
            if !x.is_finite() || !y.is_finite() {
                return Err("non-finite coordinate".into());
            }
            Ok(FrameRecord {
                frame_id,
                agent_id: fields[1].to_string(),
                x,
                y,
            })
        })();
        match parsed {
            Ok(rec) => {
                if !seen.insert((rec.frame_id, rec.agent_id.clone())) {
                    let issue = ParseIssue {
                        line: line_no,
                        message: format!(
                            "duplicate (frame {}, agent {})",
                            rec.frame_id, rec.agent_id
                        ),
                    };
                    if strict {
                        return Err(Error::Parse {
                            line: issue.line,
                            msg: issue.message,
                        });
                    }
                    issues.push(issue);
                } else {
                    records.push(rec);
                }
            }
            Err(message) => {
                if strict {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: message,
                    });
                }
                issues.push(ParseIssue {
                    line: line_no,
                    message,
                });
            }
        }
    }
    Ok((records, issues))
}

pub fn parse_frames_file(path: &Path, strict: bool) -> Result<(Vec<FrameRecord>, Vec<ParseIssue>)> {
    parse_frames(std::fs::File::open(path)?, strict)
}

/// Serializes records as TSV with full double-precision round-tripping.
pub fn serialize_frames<W: Write>(records: &[FrameRecord], mut w: W) -> Result<()> {
    for r in records {
        writeln!(w, "{}\t{}\t{}\t{}", r.frame_id, r.agent_id, r.x, r.y)?;
    }
    Ok(())
}

/// Sliding-window extraction configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneWindowConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
    pub min_neighbors: usize,
}

impl Default for SceneWindowConfig {
    fn default() -> Self {
        SceneWindowConfig {
            t_obs: 9,
            t_pred: 12,
            stride: 1,
            min_neighbors: 1,
        }
    }
}

impl SceneWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 || self.t_pred < 1 || self.stride < 1 {
            return Err(Error::Config(
                "window config requires t_obs >= 2, t_pred >= 1, stride >= 1".into(),
            ));
        }
        Ok(())
    }
}

fn agent_sort_key(id: &str) -> (u64, String) {
    match id.parse::<u64>() {
        Ok(n) => (n, String::new()),
        Err(_) => (u64::MAX, id.to_string()),
    }
}

/// Slides a window of t_obs + t_pred consecutive frames over the recorded
/// frame sequence. An agent joins a scene only if present in every frame of
/// the window; scenes with fewer than 1 + min_neighbors agents are dropped.
/// Output is invariant to the input record order.
pub fn build_scenes(records: &[FrameRecord], cfg: &SceneWindowConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let window = cfg.t_obs + cfg.t_pred;

    // (agent, frame) -> position
    let mut by_agent: BTreeMap<(u64, String), BTreeMap<i64, Point>> = BTreeMap::new();
    let mut frames: BTreeSet<i64> = BTreeSet::new();
    for r in records {
        frames.insert(r.frame_id);
        by_agent
            .entry(agent_sort_key(&r.agent_id))
            .or_default()
            .insert(r.frame_id, [r.x, r.y]);
    }
    // keep original ids alongside the sort key
    let mut id_of: BTreeMap<(u64, String), String> = BTreeMap::new();
    for r in records {
        id_of
            .entry(agent_sort_key(&r.agent_id))
            .or_insert_with(|| r.agent_id.clone());
    }

    let frames: Vec<i64> = frames.into_iter().collect();
    let mut scenes = Vec::new();
    if frames.len() < window {
        return Ok(scenes);
    }
    let mut start = 0usize;
    while start + window <= frames.len() {
        let span = &frames[start..start + window];
        let mut agents = Vec::new();
        for (key, positions) in &by_agent {
            if span.iter().all(|f| positions.contains_key(f)) {
                let pts: Vec<Point> = span.iter().map(|f| positions[f]).collect();
                agents.push(Agent {
                    id: id_of[key].clone(),
                    observation: Trajectory::new(pts[..cfg.t_obs].to_vec()),
                    future: Some(Trajectory::new(pts[cfg.t_obs..].to_vec())),
                });
            }
        }
        if agents.len() >= 1 + cfg.min_neighbors {
            scenes.push(Scene {
                scene_id: format!("w{}", span[0]),
                agents,
                candidate_index: 0,
            });
        }
        start += cfg.stride;
    }
    Ok(scenes)
}

/// Synthetic scene geometry templates. All agents walk straight at roughly
/// 1 m/s (0.4 m per frame at 2.5 fps) for t_obs + t_pred = 21 frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTemplate {
    HeadOn,
    Crossing90deg,
    Parallel,
    Overtake,
}

impl SyntheticTemplate {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "head_on" => Ok(SyntheticTemplate::HeadOn),
            "crossing_90deg" => Ok(SyntheticTemplate::Crossing90deg),
            "parallel" => Ok(SyntheticTemplate::Parallel),
            "overtake" => Ok(SyntheticTemplate::Overtake),
            "mixed" => Err(Error::Config(
                "mixed is handled by generate_mixed, not a single template".into(),
            )),
            _ => Err(Error::Config(format!(
                "unknown template {s:?} (expected head_on|crossing_90deg|parallel|overtake|mixed)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SyntheticTemplate::HeadOn => "head_on",
            SyntheticTemplate::Crossing90deg => "crossing_90deg",
            SyntheticTemplate::Parallel => "parallel",
            SyntheticTemplate::Overtake => "overtake",
        }
    }
}

pub const T_OBS: usize = 9;
pub const T_PRED: usize = 12;
const FRAME_STEP: f64 = 0.4; // meters per frame at ~1 m/s

/// Straight line sampled over the full window; `pos0` is the position at
/// frame `at_frame`.
fn line(pos0: Point, dir: [f64; 2], speed: f64, at_frame: f64) -> Vec<Point> {
    (0..T_OBS + T_PRED)
        .map(|t| {
            let s = (t as f64 - at_frame) * speed * FRAME_STEP;
            [pos0[0] + dir[0] * s, pos0[1] + dir[1] * s]
        })
        .collect()
}

fn to_agent(id: &str, pts: Vec<Point>) -> Agent {
    Agent {
        id: id.into(),
        observation: Trajectory::new(pts[..T_OBS].to_vec()),
        future: Some(Trajectory::new(pts[T_OBS..].to_vec())),
    }
}

/// Two agents walking toward each other, offset laterally so their
/// ground-truth paths pass at `lateral_offset` meters.
pub fn head_on_scene(scene_id: &str, lateral_offset: f64, speed_a: f64, speed_b: f64) -> Scene {
    // both pass x = 4.2 around frame 12 (early in the prediction horizon)
    let meet = 12.0;
    let a = line([4.2, 0.0], [1.0, 0.0], speed_a, meet);
    let b = line([4.2, lateral_offset], [-1.0, 0.0], speed_b, meet);
    Scene {
        scene_id: scene_id.into(),
        agents: vec![to_agent("a0", a), to_agent("a1", b)],
        candidate_index: 0,
    }
}

/// Agents in adjacent lanes 1 m apart walking the same direction.
pub fn parallel_scene(scene_id: &str, n_agents: usize, speeds: &[f64], x_offsets: &[f64]) -> Scene {
    let agents = (0..n_agents)
        .map(|i| {
            let pts = line(
                [x_offsets[i], i as f64],
                [1.0, 0.0],
                speeds[i],
                0.0,
            );
            to_agent(&format!("a{i}"), pts)
        })
        .collect();
    Scene {
        scene_id: scene_id.into(),
        agents,
        candidate_index: 0,
    }
}

/// Perpendicular crossing: agent a walks +x through the origin at frame
/// `meet`; agent b walks +y along x = miss_distance through y = 0 at the
/// same frame.
pub fn crossing_scene(scene_id: &str, miss_distance: f64, meet: f64) -> Scene {
    let a = line([0.0, 0.0], [1.0, 0.0], 1.0, meet);
    let b = line([miss_distance, 0.0], [0.0, 1.0], 1.0, meet);
    Scene {
        scene_id: scene_id.into(),
        agents: vec![to_agent("a0", a), to_agent("a1", b)],
        candidate_index: 0,
    }
}

/// A faster agent overtaking a slower one in an adjacent lane.
pub fn overtake_scene(scene_id: &str, lateral_offset: f64, fast: f64, slow: f64) -> Scene {
    // fast walker starts 2 m behind and draws level mid-window
    let a = line([-2.0, 0.0], [1.0, 0.0], fast, 0.0);
    let b = line([0.0, lateral_offset], [1.0, 0.0], slow, 0.0);
    Scene {
        scene_id: scene_id.into(),
        agents: vec![to_agent("a0", a), to_agent("a1", b)],
        candidate_index: 0,
    }
}

fn add_noise(scene: &mut Scene, sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for agent in &mut scene.agents {
        for p in &mut agent.observation.points {
            p[0] += normal.sample(rng);
            p[1] += normal.sample(rng);
        }
        if let Some(f) = &mut agent.future {
            for p in &mut f.points {
                p[0] += normal.sample(rng);
                p[1] += normal.sample(rng);
            }
        }
    }
}

/// Deterministic-per-seed synthetic scenes in the named geometry, with
/// i.i.d. Gaussian positional noise of standard deviation `noise_sigma`.
pub fn generate_synthetic(
    template: SyntheticTemplate,
    noise_sigma: f64,
    count: usize,
    seed: u64,
) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(count);
    for k in 0..count {
        let id = format!("{}-{k}", template.as_str());
        let mut scene = match template {
            SyntheticTemplate::HeadOn => {
                let offset = rng.gen_range(0.6..2.0);
                let sa = rng.gen_range(0.9..1.1);
                let sb = rng.gen_range(0.9..1.1);
                head_on_scene(&id, offset, sa, sb)
            }
            SyntheticTemplate::Crossing90deg => {
                let miss = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let meet = rng.gen_range(11.0..16.0);
                crossing_scene(&id, miss, meet)
            }
            SyntheticTemplate::Parallel => {
                let n = rng.gen_range(2..=4usize);
                let speeds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.9..1.1)).collect();
                let offsets: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
                parallel_scene(&id, n, &speeds, &offsets)
            }
            SyntheticTemplate::Overtake => {
                let offset = rng.gen_range(0.6..1.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let fast = rng.gen_range(1.2..1.4);
                let slow = rng.gen_range(0.6..0.8);
                overtake_scene(&id, offset, fast, slow)
            }
        };
        add_noise(&mut scene, noise_sigma, &mut rng);
        debug_assert!(scene.validate().is_ok());
        scenes.push(scene);
    }
    scenes
}

/// An even mixture of all four templates, seeded per template.
pub fn generate_mixed(noise_sigma: f64, count: usize, seed: u64) -> Vec<Scene> {
    let templates = [
        SyntheticTemplate::HeadOn,
        SyntheticTemplate::Crossing90deg,
        SyntheticTemplate::Parallel,
        SyntheticTemplate::Overtake,
    ];
    let per = count / templates.len();
    let extra = count % templates.len();
    let mut scenes = Vec::with_capacity(count);
    for (i, t) in templates.iter().enumerate() {
        let c = per + usize::from(i < extra);
        let mut batch = generate_synthetic(*t, noise_sigma, c, seed.wrapping_add(i as u64));
        for (k, s) in batch.iter_mut().enumerate() {
            s.scene_id = format!("{}-{k}", t.as_str());
        }
        scenes.append(&mut batch);
    }
    scenes
}

/// Replaces every scene's ground-truth futures with the given predictor's
/// output, producing socially-consistent supervision targets.
pub fn relabel_futures(scenes: &[Scene], predictor: &dyn Predictor) -> Result<Vec<Scene>> {
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let preds = predictor.predict(scene)?;
        let mut s = scene.clone();
        for (agent, traj) in s.agents.iter_mut().zip(preds.trajectories) {
            agent.future = Some(traj);
        }
        out.push(s);
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Scene JSONL interchange
// ---------------------------------------------------------------------

pub fn write_scenes_jsonl(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in scenes {
        serde_json::to_writer(&mut file, s)?;
        writeln!(file)?;
    }
    Ok(())
}

pub fn read_scenes_jsonl(path: &Path) -> Result<Vec<Scene>> {
    let file = std::fs::File::open(path)?;
    let mut scenes = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------

/// Aggregate block written at the end of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub instances: usize,
    pub cr_original: f64,
    pub cr_attacked: f64,
    pub collided: usize,
    pub mean_p_avg_collided: Option<f64>,
    pub mean_p_avg_all: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ade_fde_before: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ade_fde_after: Option<(f64, f64)>,
}

impl From<&AttackSummaryStats> for ReportSummary {
    fn from(s: &AttackSummaryStats) -> Self {
        ReportSummary {
            instances: s.instances,
            cr_original: s.cr_original,
            cr_attacked: s.cr_attacked,
            collided: s.collided,
            mean_p_avg_collided: s.mean_p_avg_collided,
            mean_p_avg_all: s.mean_p_avg_all,
            ade_fde_before: None,
            ade_fde_after: None,
        }
    }
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ReportLine<'a> {
    Instance { #[serde(flatten)] report: &'a AttackReport },
    Summary { #[serde(flatten)] summary: &'a ReportSummary },
}

/// One JSONL record per instance followed by a summary record. Zero
/// instances still produce the summary line.
pub fn emit_report(reports: &[AttackReport], summary: &ReportSummary, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut file, &ReportLine::Instance { report: r })?;
        writeln!(file)?;
    }
    serde_json::to_writer(&mut file, &ReportLine::Summary { summary })?;
    writeln!(file)?;
    Ok(())
}

/// Parses instance records and the summary back out of a report file.
pub fn read_report(path: &Path) -> Result<(Vec<AttackReport>, Option<ReportSummary>)> {
    #[derive(Deserialize)]
    #[serde(tag = "type", rename_all = "snake_case")]
    enum OwnedLine {
        Instance {
            #[serde(flatten)]
            report: AttackReport,
        },
        Summary {
            #[serde(flatten)]
            summary: ReportSummary,
        },
    }
    let file = std::fs::File::open(path)?;
    let mut reports = Vec::new();
    let mut summary = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })? {
            OwnedLine::Instance { report } => reports.push(report),
            OwnedLine::Summary { summary: s } => summary = Some(s),
        }
    }
    Ok((reports, summary))
}

/// Plain-text table for terminals and logs.
pub fn format_summary(summary: &ReportSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "instances            {}", summary.instances);
    let _ = writeln!(s, "original CR [%]      {:.2}", summary.cr_original);
    let _ = writeln!(s, "attacked CR [%]      {:.2}", summary.cr_attacked);
    let _ = writeln!(s, "collided instances   {}", summary.collided);
    match summary.mean_p_avg_collided {
        Some(p) => {
            let _ = writeln!(s, "mean P-avg (hits) m  {p:.4}");
        }
        None => {
            let _ = writeln!(s, "mean P-avg (hits) m  n/a (0 instances)");
        }
    }
    let _ = writeln!(s, "mean P-avg (all) m   {:.4}", summary.mean_p_avg_all);
    if let Some((ade, fde)) = summary.ade_fde_before {
        let _ = writeln!(s, "ADE/FDE before [m]   {ade:.2} / {fde:.2}");
    }
    if let Some((ade, fde)) = summary.ade_fde_after {
        let _ = writeln!(s, "ADE/FDE after [m]    {ade:.2} / {fde:.2}");
    }
    s
}

// ---------------------------------------------------------------------
// SVG plotting
// ---------------------------------------------------------------------

struct SvgMapper {
    min_x: f64,
    min_y: f64,
    scale: f64,
    height: f64,
}

impl SvgMapper {
    fn map(&self, p: Point) -> (f64, f64) {
        let x = 40.0 + (p[0] - self.min_x) * self.scale;
        let y = self.height - 40.0 - (p[1] - self.min_y) * self.scale;
        (x, y)
    }
}

fn polyline(mapper: &SvgMapper, pts: &[Point], style: &str) -> String {
    let coords: Vec<String> = pts
        .iter()
        .map(|&p| {
            let (x, y) = mapper.map(p);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!("<polyline points=\"{}\" fill=\"none\" {style}/>\n", coords.join(" "))
}

/// Standalone SVG panel: observations, perturbed candidate observation,
/// predictions before/after, and a marker at the collision cell.
pub fn emit_plot(scene: &Scene, report: &AttackReport, path: &Path) -> Result<()> {
    let mut all: Vec<Point> = Vec::new();
    for a in &scene.agents {
        all.extend(&a.observation.points);
    }
    for t in &report.predictions_before.trajectories {
        all.extend(&t.points);
    }
    for t in &report.predictions_after.trajectories {
        all.extend(&t.points);
    }
    let (mut min_x, mut min_y, mut max_x, mut max_y) =
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &all {
        min_x = min_x.min(p[0]);
        min_y = min_y.min(p[1]);
        max_x = max_x.max(p[0]);
        max_y = max_y.max(p[1]);
    }
    let span_x = (max_x - min_x).max(1e-6);
    let span_y = (max_y - min_y).max(1e-6);
    let (width, height) = (800.0f64, 600.0f64);
    let scale = ((width - 80.0) / span_x).min((height - 80.0) / span_y);
    let mapper = SvgMapper {
        min_x,
        min_y,
        scale,
        height,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"40\" y=\"24\" font-size=\"14\">scene {} candidate {} collided {} P-avg {:.3} m</text>",
        scene.scene_id, report.candidate_id, report.collided, report.p_avg
    );

    for (i, a) in scene.agents.iter().enumerate() {
        let style = if i == scene.candidate_index {
            "stroke=\"green\" stroke-width=\"2\""
        } else {
            "stroke=\"gray\" stroke-width=\"1.5\""
        };
        svg.push_str(&polyline(&mapper, &a.observation.points, style));
    }
    // perturbed candidate observation
    let cand_obs = &scene.agents[scene.candidate_index].observation.points;
    let perturbed: Vec<Point> = cand_obs
        .iter()
        .zip(&report.perturbation.offsets)
        .map(|(p, o)| [p[0] + o[0], p[1] + o[1]])
        .collect();
    svg.push_str(&polyline(
        &mapper,
        &perturbed,
        "stroke=\"red\" stroke-width=\"2\" stroke-dasharray=\"4 2\"",
    ));
    for t in &report.predictions_before.trajectories {
        svg.push_str(&polyline(
            &mapper,
            &t.points,
            "stroke=\"blue\" stroke-width=\"1\" opacity=\"0.6\"",
        ));
    }
    for t in &report.predictions_after.trajectories {
        svg.push_str(&polyline(
            &mapper,
            &t.points,
            "stroke=\"orange\" stroke-width=\"1.5\"",
        ));
    }
    if let Some((row, t)) = report.collision_cell {
        if let Ok(d) = distance_matrix(&report.predictions_after, report.candidate_index) {
            let neighbor = d.neighbor_order[row];
            let p = report.predictions_after.trajectories[neighbor].points[t];
            let (x, y) = mapper.map(p);
            let _ = writeln!(
                svg,
                "<g stroke=\"black\" stroke-width=\"2\"><line x1=\"{a}\" y1=\"{b}\" x2=\"{c}\" y2=\"{d}\"/><line x1=\"{a}\" y1=\"{d}\" x2=\"{c}\" y2=\"{b}\"/></g>",
                a = x - 6.0,
                b = y - 6.0,
                c = x + 6.0,
                d = y + 6.0
            );
        }
    }
    let _ = writeln!(svg, "</svg>");
    std::fs::write(path, svg)?;
    Ok(())
}

/// Convenience: does the final prediction of this report collide, judged
/// from its stored predictions rather than the report flag.
pub fn recompute_collided(report: &AttackReport, gamma: f64) -> bool {
    distance_matrix(&report.predictions_after, report.candidate_index)
        .map(|d| check_collision(&d, gamma).is_some())
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::metric_cr;

    #[test]
    fn parse_single_row() {
        let (recs, issues) = parse_frames("1\t7\t0.0\t2.5".as_bytes(), true).unwrap();
        assert!(issues.is_empty());
        assert_eq!(
            recs,
            vec![FrameRecord {
                frame_id: 1,
                agent_id: "7".into(),
                x: 0.0,
                y: 2.5
            }]
        );
    }

    #[test]
    fn parse_empty_and_comments() {
        let (recs, issues) = parse_frames("# header\n\n".as_bytes(), true).unwrap();
        assert!(recs.is_empty() && issues.is_empty());
    }

    #[test]
    fn parse_malformed_line_names_line_number() {
        let err = parse_frames("1\t7\tabc\t2.5".as_bytes(), true).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
        // lenient mode reports the issue instead
        let (recs, issues) = parse_frames("1\t7\tabc\t2.5\n2,7,1.0,2.0".as_bytes(), false).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 1);
    }

    #[test]
    fn frames_roundtrip() {
        let input = "1\t7\t0.125\t-2.5\n2\t7\t0.3333333333333333\t4.0\n1\t9\t1e-3\t2.0\n";
        let (recs, _) = parse_frames(input.as_bytes(), true).unwrap();
        let mut buf = Vec::new();
        serialize_frames(&recs, &mut buf).unwrap();
        let (recs2, _) = parse_frames(buf.as_slice(), true).unwrap();
        assert_eq!(recs, recs2);
    }

    fn full_presence_records(agents: usize, frames: usize) -> Vec<FrameRecord> {
        let mut recs = Vec::new();
        for f in 0..frames as i64 {
            for a in 0..agents {
                recs.push(FrameRecord {
                    frame_id: f,
                    agent_id: format!("{a}"),
                    x: f as f64 * 0.4,
                    y: a as f64,
                });
            }
        }
        recs
    }

    #[test]
    fn build_scenes_window_counts() {
        let cfg = SceneWindowConfig {
            stride: 21,
            ..SceneWindowConfig::default()
        };
        let scenes = build_scenes(&full_presence_records(2, 21), &cfg).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].n(), 2);
        assert_eq!(scenes[0].t_obs(), 9);

        let cfg1 = SceneWindowConfig::default();
        let scenes = build_scenes(&full_presence_records(2, 25), &cfg1).unwrap();
        assert_eq!(scenes.len(), 5); // 25 - 21 + 1
    }

    #[test]
    fn build_scenes_excludes_agent_missing_a_frame() {
        let mut recs = full_presence_records(2, 21);
        recs.retain(|r| !(r.agent_id == "1" && r.frame_id == 10));
        let cfg = SceneWindowConfig {
            stride: 21,
            min_neighbors: 0,
            ..SceneWindowConfig::default()
        };
        let scenes = build_scenes(&recs, &cfg).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].n(), 1);
        assert_eq!(scenes[0].agents[0].id, "0");
    }

    #[test]
    fn build_scenes_invariant_to_record_order() {
        let mut recs = full_presence_records(3, 25);
        let cfg = SceneWindowConfig::default();
        let a = build_scenes(&recs, &cfg).unwrap();
        recs.reverse();
        let b = build_scenes(&recs, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_template_keeps_one_meter_gap() {
        let scenes = generate_synthetic(SyntheticTemplate::Parallel, 0.0, 20, 7);
        for s in &scenes {
            for i in 0..s.n() {
                for j in (i + 1)..s.n() {
                    for t in 0..T_OBS + T_PRED {
                        let pi = if t < T_OBS {
                            s.agents[i].observation.points[t]
                        } else {
                            s.agents[i].future.as_ref().unwrap().points[t - T_OBS]
                        };
                        let pj = if t < T_OBS {
                            s.agents[j].observation.points[t]
                        } else {
                            s.agents[j].future.as_ref().unwrap().points[t - T_OBS]
                        };
                        assert!(crate::model::dist(pi, pj) >= 1.0 - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn head_on_two_meter_offset_never_below_04() {
        let s = head_on_scene("t", 2.0, 1.0, 1.0);
        let mut min_d = f64::INFINITY;
        for t in 0..T_OBS + T_PRED {
            let get = |a: &Agent| {
                if t < T_OBS {
                    a.observation.points[t]
                } else {
                    a.future.as_ref().unwrap().points[t - T_OBS]
                }
            };
            min_d = min_d.min(crate::model::dist(get(&s.agents[0]), get(&s.agents[1])));
        }
        assert!(min_d >= 0.4, "min ground-truth distance {min_d}");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_synthetic(SyntheticTemplate::Crossing90deg, 0.05, 5, 42);
        let b = generate_synthetic(SyntheticTemplate::Crossing90deg, 0.05, 5, 42);
        assert_eq!(a, b);
        let c = generate_synthetic(SyntheticTemplate::Crossing90deg, 0.05, 5, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn generated_scenes_satisfy_invariants() {
        for s in generate_mixed(0.02, 40, 3) {
            s.validate().unwrap();
            assert_eq!(s.t_obs(), T_OBS);
            assert!(s.has_futures());
        }
    }

    #[test]
    fn scenes_jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenes.jsonl");
        let scenes = generate_mixed(0.01, 8, 11);
        write_scenes_jsonl(&scenes, &path).unwrap();
        let back = read_scenes_jsonl(&path).unwrap();
        assert_eq!(scenes, back);
    }

    #[test]
    fn report_roundtrip_and_cr_consistency() {
        use crate::model::{AttackConfig, AttackMode};
        use crate::predictors::ConstantVelocity;

        let scenes = generate_synthetic(SyntheticTemplate::Parallel, 0.0, 4, 5);
        let cv = ConstantVelocity::default();
        let cfg = AttackConfig {
            mode: AttackMode::Random,
            max_iters: 1,
            ..AttackConfig::default()
        };
        let (reports, stats) = crate::attack::attack_dataset(&scenes, &cv, &cfg, 9).unwrap();
        let summary = ReportSummary::from(&stats);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        emit_report(&reports, &summary, &path).unwrap();
        let (back, back_summary) = read_report(&path).unwrap();
        assert_eq!(back.len(), reports.len());
        assert_eq!(back_summary.unwrap(), summary);

        // CR recomputed from the stored records equals the emitted one
        let flags: Vec<bool> = back.iter().map(|r| recompute_collided(r, cfg.gamma)).collect();
        assert!((metric_cr(&flags).unwrap() - summary.cr_attacked).abs() < 1e-9);
    }

    #[test]
    fn empty_report_still_emits_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        let summary = ReportSummary {
            instances: 0,
            cr_original: 0.0,
            cr_attacked: 0.0,
            collided: 0,
            mean_p_avg_collided: None,
            mean_p_avg_all: 0.0,
            ade_fde_before: None,
            ade_fde_after: None,
        };
        emit_report(&[], &summary, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"instances\":0"));
        let rendered = format_summary(&summary);
        assert!(rendered.contains("0 instances"));
    }

    #[test]
    fn plot_contains_collision_marker() {
        use crate::model::{AttackConfig, AttackMode};
        use crate::predictors::ConstantVelocity;

        // parallel scene close enough that a lateral perturbation collides
        let scene = parallel_scene("p", 2, &[1.0, 1.0], &[0.0, 0.0]);
        let cfg = AttackConfig {
            mode: AttackMode::Soft,
            ..AttackConfig::default()
        };
        let report =
            crate::attack::run_attack(&scene, &ConstantVelocity::default(), &cfg, 0).unwrap();
        assert!(report.collided, "attack must collide for the marker test");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.svg");
        emit_plot(&scene, &report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("<g stroke=\"black\""), "collision marker present");
    }
}
