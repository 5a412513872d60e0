//! Batch evaluation: constrained-prompt IoU suites, the reprompt on/off
//! matrix, qualitative grades and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dronesim::{derive_seed, run_build, BuildConfig, BuildError, BuildReport, ErrorEvent, ErrorModel, StopReason};
use crate::framesync::PadMap;
use crate::gridworld::{Footprint, GridWorld};
use crate::planner::{build_prompt, parse_plan_lenient, ChatRequest, DesignLibrary, MockBackend, PlannerBackend};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("grid sizes differ: {0}x{0} vs {1}x{1}")]
    DimensionMismatch(usize, usize),
    #[error("corpus entry {path}: {msg}")]
    Corpus { path: String, msg: String },
    #[error("grade must be 1, 2 or 3, got {0}")]
    Grade(u8),
    #[error("grader `{grader}` already graded `{design}`")]
    DuplicateGrade { design: String, grader: String },
    #[error("worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Intersection over union of two layouts; 1.0 when both are empty.
pub fn iou(a: &Footprint, b: &Footprint) -> Result<f64, EvalError> {
    if a.size() != b.size() {
        return Err(EvalError::DimensionMismatch(a.size(), b.size()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        inter += (*x && *y) as usize;
        union += (*x || *y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean and population variance in one pass (Welford).
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for &x in xs {
        n += 1.0;
        let d = x - mean;
        mean += d / n;
        m2 += d * (x - mean);
    }
    if n == 0.0 {
        (0.0, 0.0)
    } else {
        (mean, m2 / n)
    }
}

/// A request with exactly one correct layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstrainedPrompt {
    pub id: String,
    pub request: String,
    pub answer: Footprint,
}

#[derive(Deserialize)]
struct CorpusFile {
    id: String,
    request: String,
    answer: String,
}

fn parse_corpus_entry(path: &str, text: &str) -> Result<ConstrainedPrompt, EvalError> {
    let bad = |msg: String| EvalError::Corpus {
        path: path.to_string(),
        msg,
    };
    let f: CorpusFile = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
    let answer = Footprint::parse(&f.answer).map_err(|e| bad(e.to_string()))?;
    if answer.is_empty() {
        return Err(bad("answer grid has no blocks".to_string()));
    }
    if f.id.trim().is_empty() || f.request.trim().is_empty() {
        return Err(bad("id and request must be non-empty".to_string()));
    }
    Ok(ConstrainedPrompt {
        id: f.id,
        request: f.request,
        answer,
    })
}

/// Load every `*.toml` prompt in `dir`, sorted by file name.
pub fn load_corpus(dir: &Path) -> Result<Vec<ConstrainedPrompt>, EvalError> {
    let entries = fs::read_dir(dir).map_err(|e| EvalError::Corpus {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(EvalError::Corpus {
            path: dir.display().to_string(),
            msg: "no .toml prompt files".to_string(),
        });
    }
    let prompts: Vec<ConstrainedPrompt> = paths
        .iter()
        .map(|p| parse_corpus_entry(&p.display().to_string(), &fs::read_to_string(p)?))
        .collect::<Result<_, _>>()?;
    let mut ids: Vec<&str> = prompts.iter().map(|p| p.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(EvalError::Corpus {
            path: dir.display().to_string(),
            msg: format!("duplicate prompt id `{}`", w[0]),
        });
    }
    if prompts.iter().any(|p| p.answer.size() != prompts[0].answer.size()) {
        return Err(EvalError::Corpus {
            path: dir.display().to_string(),
            msg: "answer grids differ in size".to_string(),
        });
    }
    Ok(prompts)
}

const BUILTIN_CORPUS: [(&str, &str); 15] = [
    ("01_row6", include_str!("../corpus/constrained/01_row6.toml")),
    ("02_col3", include_str!("../corpus/constrained/02_col3.toml")),
    ("03_border", include_str!("../corpus/constrained/03_border.toml")),
    ("04_diag", include_str!("../corpus/constrained/04_diag.toml")),
    ("05_antidiag", include_str!("../corpus/constrained/05_antidiag.toml")),
    ("06_corners", include_str!("../corpus/constrained/06_corners.toml")),
    ("07_bottom2", include_str!("../corpus/constrained/07_bottom2.toml")),
    ("08_lefthalf", include_str!("../corpus/constrained/08_lefthalf.toml")),
    ("09_center4", include_str!("../corpus/constrained/09_center4.toml")),
    ("10_plus5", include_str!("../corpus/constrained/10_plus5.toml")),
    ("11_topbottom", include_str!("../corpus/constrained/11_topbottom.toml")),
    ("12_alternate", include_str!("../corpus/constrained/12_alternate.toml")),
    ("13_checker", include_str!("../corpus/constrained/13_checker.toml")),
    ("14_ring6", include_str!("../corpus/constrained/14_ring6.toml")),
    ("15_letterl", include_str!("../corpus/constrained/15_letterl.toml")),
];

/// The fifteen shipped 10x10 constrained prompts.
pub fn builtin_corpus() -> Vec<ConstrainedPrompt> {
    BUILTIN_CORPUS
        .iter()
        .map(|(name, text)| parse_corpus_entry(name, text).expect("shipped corpus is valid"))
        .collect()
}

/// A mock that answers each corpus prompt with its registered answer.
pub fn corpus_mock(prompts: &[ConstrainedPrompt]) -> MockBackend {
    let mut lib = DesignLibrary::new();
    for p in prompts {
        lib.register_fixed(&p.request, &p.answer);
    }
    MockBackend::new(lib)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub trials_per_prompt: usize,
    /// Upper bound on concurrent backend requests.
    pub parallelism: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            trials_per_prompt: 5,
            parallelism: 4,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub prompt_id: String,
    pub trial: usize,
    pub iou: f64,
    /// A plan could be read from the response.
    pub parsed: bool,
    pub dropped_out_of_bounds: usize,
    pub dropped_duplicates: usize,
    pub latency_ms: Option<f64>,
    pub tokens: Option<u64>,
    /// Parse failure or backend error, if any.
    pub error: Option<String>,
    pub layout: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub prompt_id: String,
    pub request: String,
    pub model: String,
    pub trials: Vec<TrialResult>,
    pub mean_iou: f64,
    /// Population variance of the trial IoUs.
    pub variance: f64,
    pub mean_latency_ms: Option<f64>,
    pub total_tokens: Option<u64>,
}

impl EvalResult {
    fn from_trials(prompt: &ConstrainedPrompt, model: &str, trials: Vec<TrialResult>) -> Self {
        let ious: Vec<f64> = trials.iter().map(|t| t.iou).collect();
        let (mean_iou, variance) = mean_and_variance(&ious);
        let lat: Vec<f64> = trials.iter().filter_map(|t| t.latency_ms).collect();
        let tok: Vec<u64> = trials.iter().filter_map(|t| t.tokens).collect();
        Self {
            prompt_id: prompt.id.clone(),
            request: prompt.request.clone(),
            model: model.to_string(),
            mean_iou,
            variance,
            mean_latency_ms: (!lat.is_empty()).then(|| mean_and_variance(&lat).0),
            total_tokens: (!tok.is_empty()).then(|| tok.iter().sum()),
            trials,
        }
    }
}

fn run_trial(prompt: &ConstrainedPrompt, trial: usize, backend: &dyn PlannerBackend, cfg: &SuiteConfig) -> TrialResult {
    let n = prompt.answer.size();
    let grid = GridWorld::with_pad(n).expect("corpus grids are non-empty");
    let mut request = ChatRequest::new(build_prompt(&prompt.request, &grid.empty_state(), &grid), format!("{}/{trial}", prompt.id));
    request.temperature = cfg.temperature;
    request.max_tokens = cfg.max_tokens;
    let mut result = TrialResult {
        prompt_id: prompt.id.clone(),
        trial,
        iou: 0.0,
        parsed: false,
        dropped_out_of_bounds: 0,
        dropped_duplicates: 0,
        latency_ms: None,
        tokens: None,
        error: None,
        layout: String::new(),
    };
    let completion = match backend.complete(&request) {
        Ok(c) => c,
        Err(e) => {
            result.error = Some(format!("backend: {e}"));
            return result;
        }
    };
    result.latency_ms = completion.latency_ms;
    result.tokens = completion.tokens;
    match parse_plan_lenient(&completion.text, n) {
        Ok(lp) => {
            let layout = lp.plan.layout(n);
            result.parsed = true;
            result.dropped_out_of_bounds = lp.dropped_out_of_bounds;
            result.dropped_duplicates = lp.dropped_duplicates;
            result.iou = iou(&prompt.answer, &layout).expect("same pad size");
            result.layout = layout.render();
        }
        Err(e) => result.error = Some(format!("unparseable: {e}")),
    }
    result
}

/// Ask for every prompt `trials_per_prompt` times on an empty pad and score
/// each answer. Backend and parse failures score 0 and are kept as trials.
pub fn run_constrained_suite(
    prompts: &[ConstrainedPrompt],
    backend: &dyn PlannerBackend,
    cfg: &SuiteConfig,
) -> Result<Vec<EvalResult>, EvalError> {
    let jobs: Vec<(usize, usize)> = (0..prompts.len())
        .flat_map(|p| (0..cfg.trials_per_prompt).map(move |t| (p, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let mut trials: Vec<(usize, TrialResult)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, t)| (p, run_trial(&prompts[p], t, backend, cfg)))
            .collect()
    });
    trials.sort_by_key(|(p, t)| (*p, t.trial));
    let model = backend.label();
    let mut by_prompt: Vec<Vec<TrialResult>> = vec![Vec::new(); prompts.len()];
    for (p, t) in trials {
        by_prompt[p].push(t);
    }
    Ok(prompts
        .iter()
        .zip(by_prompt)
        .map(|(p, ts)| EvalResult::from_trials(p, &model, ts))
        .collect())
}

/// Suite-level numbers: one row per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub model: String,
    pub prompts: usize,
    pub trials: usize,
    pub unparsed: usize,
    pub mean_iou: f64,
    pub variance: f64,
    pub mean_latency_ms: Option<f64>,
    pub total_tokens: Option<u64>,
}

pub fn summarize(results: &[EvalResult]) -> SuiteSummary {
    let trials: Vec<&TrialResult> = results.iter().flat_map(|r| &r.trials).collect();
    let ious: Vec<f64> = trials.iter().map(|t| t.iou).collect();
    let (mean_iou, variance) = mean_and_variance(&ious);
    let lat: Vec<f64> = trials.iter().filter_map(|t| t.latency_ms).collect();
    let tok: Vec<u64> = trials.iter().filter_map(|t| t.tokens).collect();
    SuiteSummary {
        model: results.first().map(|r| r.model.clone()).unwrap_or_default(),
        prompts: results.len(),
        trials: trials.len(),
        unparsed: trials.iter().filter(|t| !t.parsed).count(),
        mean_iou,
        variance,
        mean_latency_ms: (!lat.is_empty()).then(|| mean_and_variance(&lat).0),
        total_tokens: (!tok.is_empty()).then(|| tok.iter().sum()),
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

/// Write `trials.csv`, `summary.csv`, `model_summary.csv`, `summary.json` and
/// `iou_chart.svg` into `out_dir`. Returns the paths written.
pub fn emit_report(results: &[EvalResult], out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let path = out_dir.join("trials.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "prompt_id", "trial", "model", "iou", "parsed", "dropped_out_of_bounds", "dropped_duplicates", "latency_ms", "tokens", "error",
    ])?;
    for r in results {
        for t in &r.trials {
            w.write_record([
                t.prompt_id.clone(),
                t.trial.to_string(),
                r.model.clone(),
                fmt6(t.iou),
                t.parsed.to_string(),
                t.dropped_out_of_bounds.to_string(),
                t.dropped_duplicates.to_string(),
                opt(t.latency_ms.map(|l| format!("{l:.3}"))),
                opt(t.tokens),
                t.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["prompt_id", "request", "model", "trials", "mean_iou", "variance_pop", "mean_latency_ms", "total_tokens"])?;
    for r in results {
        w.write_record([
            r.prompt_id.clone(),
            r.request.clone(),
            r.model.clone(),
            r.trials.len().to_string(),
            fmt6(r.mean_iou),
            fmt6(r.variance),
            opt(r.mean_latency_ms.map(|l| format!("{l:.3}"))),
            opt(r.total_tokens),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let summary = summarize(results);
    let path = out_dir.join("model_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["model", "average_iou", "variance_pop", "inference_time_ms", "total_tokens"])?;
    if !results.is_empty() {
        w.write_record([
            summary.model.clone(),
            fmt6(summary.mean_iou),
            fmt6(summary.variance),
            opt(summary.mean_latency_ms.map(|l| format!("{l:.3}"))),
            opt(summary.total_tokens),
        ])?;
    }
    w.flush()?;
    written.push(path);

    let path = out_dir.join("summary.json");
    let json = serde_json::json!({ "summary": summary, "results": results });
    fs::write(&path, serde_json::to_string_pretty(&json)? + "\n")?;
    written.push(path);

    let path = out_dir.join("iou_chart.svg");
    fs::write(&path, iou_chart(results))?;
    written.push(path);
    Ok(written)
}

/// Bar chart of mean IoU per prompt with a variance whisker.
pub fn iou_chart(results: &[EvalResult]) -> String {
    let bar = 28.0;
    let gap = 12.0;
    let plot_h = 200.0;
    let left = 40.0;
    let top = 20.0;
    let width = left + results.len() as f64 * (bar + gap) + gap;
    let height = top + plot_h + 90.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.1}" x2="{width:.0}" y2="{y:.1}" stroke="#ddd"/><text x="{:.0}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            left - 4.0,
            y + 3.0
        );
    }
    for (i, r) in results.iter().enumerate() {
        let x = left + gap + i as f64 * (bar + gap);
        let h = plot_h * r.mean_iou;
        let y = top + plot_h - h;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{bar}" height="{h:.1}" fill="#4a7fb5"><title>{}: {:.3}</title></rect>"##,
            xml_escape(&r.prompt_id),
            r.mean_iou
        );
        let sd = r.variance.sqrt() * plot_h;
        let cx = x + bar / 2.0;
        let _ = writeln!(
            s,
            r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#222"/>"##,
            (y - sd).max(top),
            (y + sd).min(top + plot_h)
        );
        let ly = top + plot_h + 10.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{ly:.1}" transform="rotate(60 {cx:.1} {ly:.1})">{}</text>"#,
            xml_escape(&r.prompt_id)
        );
    }
    if results.is_empty() {
        let _ = writeln!(s, r#"<text x="{left}" y="{:.0}">no results</text>"#, top + plot_h / 2.0);
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One design and seed run with reprompting on and off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub design: String,
    pub seed_index: usize,
    pub seed: u64,
    pub iou_reprompt: f64,
    pub iou_no_reprompt: f64,
    pub prompts_reprompt: usize,
    pub prompts_no_reprompt: usize,
    pub stop_reprompt: StopReason,
    pub stop_no_reprompt: StopReason,
    /// Both arms saw the same error events over their common attempts.
    pub events_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub design: String,
    pub runs: usize,
    pub complete_reprompt: usize,
    pub complete_no_reprompt: usize,
    pub mean_iou_reprompt: f64,
    pub mean_iou_no_reprompt: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixTable {
    pub rows: Vec<MatrixRow>,
}

impl MatrixTable {
    pub fn summaries(&self) -> Vec<DesignSummary> {
        let mut groups: Vec<(String, Vec<&MatrixRow>)> = Vec::new();
        for r in &self.rows {
            match groups.iter_mut().find(|g| g.0 == r.design) {
                Some(g) => g.1.push(r),
                None => groups.push((r.design.clone(), vec![r])),
            }
        }
        groups
            .into_iter()
            .map(|(design, rows)| {
                let n = rows.len();
                let on: Vec<f64> = rows.iter().map(|r| r.iou_reprompt).collect();
                let off: Vec<f64> = rows.iter().map(|r| r.iou_no_reprompt).collect();
                DesignSummary {
                    design,
                    runs: n,
                    complete_reprompt: on.iter().filter(|x| **x == 1.0).count(),
                    complete_no_reprompt: off.iter().filter(|x| **x == 1.0).count(),
                    mean_iou_reprompt: mean_and_variance(&on).0,
                    mean_iou_no_reprompt: mean_and_variance(&off).0,
                }
            })
            .collect()
    }

    pub fn complete_counts(&self) -> (usize, usize) {
        (
            self.rows.iter().filter(|r| r.iou_reprompt == 1.0).count(),
            self.rows.iter().filter(|r| r.iou_no_reprompt == 1.0).count(),
        )
    }
}

#[derive(Debug, Error)]
#[error("matrix run for `{design}` (seed index {seed_index}) failed: {source}")]
pub struct MatrixError {
    pub design: String,
    pub seed_index: usize,
    pub source: Box<BuildError>,
    pub partial: MatrixTable,
}

fn events_agree(a: &[ErrorEvent], b: &[ErrorEvent]) -> bool {
    let k = a.len().min(b.len());
    a[..k] == b[..k]
}

/// Run each design under `seeds` derived seeds, once with reprompting and
/// once without. Both arms of a pair use the same error seed.
#[allow(clippy::too_many_arguments)]
pub fn run_reprompt_matrix(
    designs: &[String],
    backend: &dyn PlannerBackend,
    world: &GridWorld,
    pad_map: &PadMap,
    err: &ErrorModel,
    seeds: usize,
    cfg: &BuildConfig,
) -> Result<MatrixTable, MatrixError> {
    let jobs: Vec<(usize, usize)> = (0..designs.len()).flat_map(|d| (0..seeds).map(move |s| (d, s))).collect();
    let arm = |design: &str, model: &ErrorModel, reprompt: bool| -> Result<BuildReport, BuildError> {
        let c = BuildConfig {
            reprompt_enabled: reprompt,
            frame_dump_dir: None,
            ..cfg.clone()
        };
        run_build(design, backend, world, pad_map, model, &c, None)
    };
    let results: Vec<Result<MatrixRow, (usize, usize, BuildError)>> = jobs
        .par_iter()
        .map(|&(d, s)| {
            let design = &designs[d];
            let model = ErrorModel {
                seed: derive_seed(err.seed, s as u64),
                ..err.clone()
            };
            let on = arm(design, &model, true).map_err(|e| (d, s, e))?;
            let off = arm(design, &model, false).map_err(|e| (d, s, e))?;
            Ok(MatrixRow {
                design: design.clone(),
                seed_index: s,
                seed: model.seed,
                iou_reprompt: on.final_iou,
                iou_no_reprompt: off.final_iou,
                prompts_reprompt: on.prompts_used,
                prompts_no_reprompt: off.prompts_used,
                stop_reprompt: on.stop_reason,
                stop_no_reprompt: off.stop_reason,
                events_match: events_agree(&on.error_events, &off.error_events),
            })
        })
        .collect();
    let mut table = MatrixTable::default();
    for r in results {
        match r {
            Ok(row) => table.rows.push(row),
            Err((d, s, source)) => {
                return Err(MatrixError {
                    design: designs[d].clone(),
                    seed_index: s,
                    source: Box::new(source),
                    partial: table,
                })
            }
        }
    }
    Ok(table)
}

/// Write `matrix.csv` and `matrix_summary.json`.
pub fn emit_matrix_report(table: &MatrixTable, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("matrix.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "design", "seed_index", "seed", "iou_reprompt", "iou_no_reprompt", "prompts_reprompt", "prompts_no_reprompt", "stop_reprompt", "stop_no_reprompt", "events_match",
    ])?;
    let stop = |s: StopReason| serde_json::to_value(s).expect("enum serializes").as_str().unwrap_or_default().to_string();
    for r in &table.rows {
        w.write_record([
            r.design.clone(),
            r.seed_index.to_string(),
            r.seed.to_string(),
            fmt6(r.iou_reprompt),
            fmt6(r.iou_no_reprompt),
            r.prompts_reprompt.to_string(),
            r.prompts_no_reprompt.to_string(),
            stop(r.stop_reprompt),
            stop(r.stop_no_reprompt),
            r.events_match.to_string(),
        ])?;
    }
    w.flush()?;
    let (on, off) = table.complete_counts();
    let json = serde_json::json!({
        "runs": table.rows.len(),
        "complete_reprompt": on,
        "complete_no_reprompt": off,
        "designs": table.summaries(),
    });
    let jpath = out_dir.join("matrix_summary.json");
    fs::write(&jpath, serde_json::to_string_pretty(&json)? + "\n")?;
    Ok(vec![path, jpath])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualitativeRecord {
    pub design_id: String,
    pub grader_id: String,
    pub grade: u8,
}

/// Append-only store of three-point human grades.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualitativeStore {
    records: Vec<QualitativeRecord>,
}

impl QualitativeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, design_id: &str, grade: u8, grader_id: &str) -> Result<&QualitativeRecord, EvalError> {
        if !(1..=3).contains(&grade) {
            return Err(EvalError::Grade(grade));
        }
        if self.records.iter().any(|r| r.design_id == design_id && r.grader_id == grader_id) {
            return Err(EvalError::DuplicateGrade {
                design: design_id.to_string(),
                grader: grader_id.to_string(),
            });
        }
        self.records.push(QualitativeRecord {
            design_id: design_id.to_string(),
            grader_id: grader_id.to_string(),
            grade,
        });
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn records(&self) -> &[QualitativeRecord] {
        &self.records
    }

    /// Number of records per grade, always with keys 1, 2 and 3.
    pub fn counts(&self) -> BTreeMap<u8, usize> {
        let mut c: BTreeMap<u8, usize> = (1..=3).map(|g| (g, 0)).collect();
        for r in &self.records {
            *c.entry(r.grade).or_default() += 1;
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
