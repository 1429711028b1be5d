//! Root-cause analysis from the attention-refined feature map: the channel
//! mean of `F_S` gives a variables x time heatmap whose row means rank the
//! process variables.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::data::WindowedSample;
use crate::model::{ForwardArtifacts, Model, ModelError};
use crate::par::Execution;

/// Label of the fault-free class; its explanations carry no root-cause claim.
pub const NORMAL_CLASS: usize = 0;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("class {class} has no samples to explain")]
    EmptyClass { class: usize },
    #[error("{expected} variable names expected, got {found}")]
    Names { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed heatmap: {0}")]
    Parse(String),
}

/// Which tensor the heatmap is computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MapSource {
    /// Channel mean of the refined feature map.
    #[default]
    Refined,
    /// The spatial attention gate alone (diagnostic).
    SpatialOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Global,
    Local,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Global => "global",
            Self::Local => "local",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Self::Global),
            "local" => Ok(Self::Local),
            other => Err(format!("unknown scope {other:?} (global|local)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

/// Variables x time heatmap, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub variables: Vec<String>,
    /// Time index of each column; absolute for a local map, `0..W` for a global one.
    pub times: Vec<usize>,
}

impl AttentionMap {
    /// `map[h, w] = mean_c F_S[c, h, w]` (or `A_S[h, w]` for the diagnostic source).
    pub fn from_artifacts(artifacts: &ForwardArtifacts, source: MapSource, variables: &[String], times: Vec<usize>) -> Self {
        let (values, height, width) = match source {
            MapSource::Refined => {
                let shape = artifacts.refined.shape();
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let mut values = vec![0.0; h * w];
                for channel in artifacts.refined.data().chunks_exact(h * w) {
                    for (v, x) in values.iter_mut().zip(channel) {
                        *v += x;
                    }
                }
                values.iter_mut().for_each(|v| *v /= c as f64);
                (values, h, w)
            }
            MapSource::SpatialOnly => {
                let shape = artifacts.spatial.shape();
                (artifacts.spatial.data().to_vec(), shape[1], shape[2])
            }
        };
        Self { values, height, width, variables: variables.to_vec(), times }
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.values[h * self.width..(h + 1) * self.width]
    }

    /// Time average of each variable's row.
    pub fn contributions(&self) -> Vec<f64> {
        (0..self.height).map(|h| self.row(h).iter().sum::<f64>() / self.width as f64).collect()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Indices by descending score; equal scores keep ascending index order.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub map: AttentionMap,
    pub contributions: Vec<f64>,
    pub ranking: Vec<usize>,
    pub root_cause: usize,
    pub scope: Scope,
    /// Explained class: the predicted class for a local explanation.
    pub class: usize,
}

impl Explanation {
    pub fn new(map: AttentionMap, scope: Scope, class: usize) -> Self {
        let contributions = map.contributions();
        let ranking = rank(&contributions);
        Self { root_cause: ranking[0], map, contributions, ranking, scope, class }
    }

    pub fn is_normal_class(&self) -> bool {
        self.class == NORMAL_CLASS
    }

    pub fn root_cause_name(&self) -> &str {
        &self.map.variables[self.root_cause]
    }

    /// One machine-readable line, e.g. `root_cause=steam rank=[steam,level,...]`.
    /// For the normal class the root cause is reported as `none`.
    pub fn verdict(&self) -> String {
        let names: Vec<&str> = self.ranking.iter().map(|&i| self.map.variables[i].as_str()).collect();
        let cause = if self.is_normal_class() { "none" } else { self.root_cause_name() };
        format!("root_cause={cause} rank=[{}]", names.join(","))
    }
}

fn check_names(model: &Model, variables: &[String]) -> Result<(), ExplainError> {
    let expected = model.encoder.config.height;
    if variables.len() != expected {
        return Err(ExplainError::Names { expected, found: variables.len() });
    }
    Ok(())
}

/// Explains one window with the class the model assigns to it.
pub fn local_explanation(
    model: &Model,
    window: &WindowedSample,
    variables: &[String],
    source: MapSource,
) -> Result<Explanation, ExplainError> {
    check_names(model, variables)?;
    let artifacts = model.encoder.infer(&[window], Execution::Sequential)?;
    let class = model.classifier.classify(&artifacts[0].embedding)?.label;
    let times = (window.origin.start..window.origin.start + window.width).collect();
    let map = AttentionMap::from_artifacts(&artifacts[0], source, variables, times);
    Ok(Explanation::new(map, Scope::Local, class))
}

/// Element-wise mean of the attention maps of every window labelled `class`.
pub fn global_explanation(
    model: &Model,
    windows: &[WindowedSample],
    class: usize,
    variables: &[String],
    source: MapSource,
    exec: Execution,
) -> Result<Explanation, ExplainError> {
    check_names(model, variables)?;
    let members: Vec<&WindowedSample> = windows.iter().filter(|s| s.label == class).collect();
    if members.is_empty() {
        return Err(ExplainError::EmptyClass { class });
    }
    let artifacts = model.encoder.infer(&members, exec)?;
    let width = model.encoder.config.width;
    let maps: Vec<AttentionMap> =
        artifacts.iter().map(|a| AttentionMap::from_artifacts(a, source, variables, (0..width).collect())).collect();
    Ok(Explanation::new(mean_map(&maps), Scope::Global, class))
}

/// Element-wise mean; all maps must share shape and labels.
pub fn mean_map(maps: &[AttentionMap]) -> AttentionMap {
    let mut out = AttentionMap { values: vec![0.0; maps[0].values.len()], ..maps[0].clone() };
    for m in maps {
        for (o, v) in out.values.iter_mut().zip(&m.values) {
            *o += v;
        }
    }
    out.values.iter_mut().for_each(|v| *v /= maps.len() as f64);
    out
}

/// CSV layout: header `variable,<time>,...`, then one row per variable with
/// its name followed by its values in shortest round-trip form.
pub fn heatmap_csv(map: &AttentionMap) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("variable".to_string()).chain(map.times.iter().map(|t| t.to_string()));
    w.write_record(header).expect("in-memory write");
    for (h, name) in map.variables.iter().enumerate() {
        let row = std::iter::once(name.clone()).chain(map.row(h).iter().map(|v| v.to_string()));
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn parse_heatmap_csv(text: &str) -> Result<AttentionMap, ExplainError> {
    let bad = |m: String| ExplainError::Parse(m);
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = records.next().ok_or_else(|| bad("empty file".into()))?.map_err(|e| bad(e.to_string()))?;
    if header.get(0) != Some("variable") {
        return Err(bad("first header cell must be \"variable\"".into()));
    }
    let times = header
        .iter()
        .skip(1)
        .map(|t| t.parse::<usize>().map_err(|_| bad(format!("time index {t:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let (mut variables, mut values) = (Vec::new(), Vec::new());
    for (line, record) in records.enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != times.len() + 1 {
            return Err(bad(format!("row {} has {} cells, expected {}", line + 2, record.len(), times.len() + 1)));
        }
        variables.push(record[0].to_string());
        for cell in record.iter().skip(1) {
            values.push(cell.parse::<f64>().map_err(|_| bad(format!("row {}: value {cell:?}", line + 2)))?);
        }
    }
    Ok(AttentionMap { height: variables.len(), width: times.len(), values, variables, times })
}

/// Binary PGM (`P5`), one pixel row per variable, min-max scaled to 0..=255
/// (a constant map becomes uniform 128). The scaling range is kept in a
/// `# min=... max=...` comment.
pub fn heatmap_pgm(map: &AttentionMap) -> Vec<u8> {
    let (lo, hi) = map.min_max();
    let mut out = format!("P5\n# min={lo} max={hi}\n{} {}\n255\n", map.width, map.height).into_bytes();
    let range = hi - lo;
    out.extend(map.values.iter().map(|&v| {
        if range > 0.0 {
            ((v - lo) / range * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

pub fn export_heatmap(explanation: &Explanation, path: &Path, format: HeatmapFormat) -> Result<(), ExplainError> {
    let bytes = match format {
        HeatmapFormat::Csv => heatmap_csv(&explanation.map).into_bytes(),
        HeatmapFormat::Pgm => heatmap_pgm(&explanation.map),
    };
    fs::write(path, bytes).map_err(|source| ExplainError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::numerics::Tensor;

    fn names(h: usize) -> Vec<String> {
        crate::data::default_names(h)
    }

    fn artifacts(refined: Tensor) -> ForwardArtifacts {
        let (h, w) = (refined.shape()[1], refined.shape()[2]);
        ForwardArtifacts { embedding: vec![], channel: vec![], spatial: Tensor::full(&[1, h, w], 0.5), refined }
    }

    fn map(h: usize, w: usize, values: Vec<f64>) -> AttentionMap {
        AttentionMap { values, height: h, width: w, variables: names(h), times: (0..w).collect() }
    }

    #[test]
    fn channel_mean() {
        let a = artifacts(Tensor::new(&[2, 1, 1], vec![1.0, 3.0]).unwrap());
        assert_eq!(AttentionMap::from_artifacts(&a, MapSource::Refined, &names(1), vec![0]).values, vec![2.0]);
        let c = artifacts(Tensor::full(&[32, 3, 4], 0.7));
        let m = AttentionMap::from_artifacts(&c, MapSource::Refined, &names(3), (0..4).collect());
        assert!(m.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let s = AttentionMap::from_artifacts(&c, MapSource::SpatialOnly, &names(3), (0..4).collect());
        assert_eq!(s.values, vec![0.5; 12]);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        assert_eq!(rank(&[1.0, 3.0, 3.0, 0.5]), vec![1, 2, 0, 3]);
        let e = Explanation::new(map(3, 2, vec![0.25; 6]), Scope::Local, 1);
        assert_eq!(e.ranking, vec![0, 1, 2]);
        assert_eq!(e.root_cause, 0);
        assert_eq!(e.verdict(), "root_cause=x1 rank=[x1,x2,x3]");
    }

    #[test]
    fn normal_class_makes_no_claim() {
        let e = Explanation::new(map(2, 1, vec![0.1, 0.9]), Scope::Local, NORMAL_CLASS);
        assert!(e.is_normal_class());
        assert_eq!(e.root_cause, 1);
        assert_eq!(e.verdict(), "root_cause=none rank=[x2,x1]");
    }

    #[test]
    fn csv_layout_and_round_trip() {
        let mut m = map(2, 3, vec![0.1, 1.0 / 3.0, -2.5e-17, 4.0, 5.5, 6.0]);
        m.variables = vec!["level".into(), "steam, valve".into()];
        m.times = vec![10, 11, 12];
        let text = heatmap_csv(&m);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "variable,10,11,12");
        assert_eq!(lines[2], "\"steam, valve\",4,5.5,6");
        assert_eq!(parse_heatmap_csv(&text).unwrap(), m);
        assert!(parse_heatmap_csv("variable,0\nx,1,2\n").is_err());
        assert!(parse_heatmap_csv("").is_err());
    }

    #[test]
    fn pgm_layout() {
        let bytes = heatmap_pgm(&map(2, 2, vec![0.0, 1.0, 0.5, 2.0]));
        let header = b"P5\n# min=0 max=2\n2 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 64, 255]);
        let flat = heatmap_pgm(&map(1, 3, vec![4.2; 3]));
        assert_eq!(&flat[flat.len() - 3..], &[128, 128, 128]);
    }

    #[test]
    fn export_writes_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let e = Explanation::new(map(2, 2, vec![0.0, 1.0, 0.5, 2.0]), Scope::Global, 1);
        export_heatmap(&e, &dir.path().join("m.csv"), HeatmapFormat::Csv).unwrap();
        export_heatmap(&e, &dir.path().join("m.pgm"), HeatmapFormat::Pgm).unwrap();
        let back = parse_heatmap_csv(&fs::read_to_string(dir.path().join("m.csv")).unwrap()).unwrap();
        assert_eq!(back, e.map);
        let err = export_heatmap(&e, &dir.path().join("missing/m.csv"), HeatmapFormat::Csv).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    proptest! {
        #[test]
        fn ranking_is_a_sorted_permutation(scores in prop::collection::vec(-3i32..3, 1..12)) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let r = rank(&scores);
            let mut sorted = r.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..scores.len()).collect::<Vec<_>>());
            for pair in r.windows(2) {
                prop_assert!(scores[pair[0]] > scores[pair[1]] || (scores[pair[0]] == scores[pair[1]] && pair[0] < pair[1]));
            }
        }

        #[test]
        fn map_shape_follows_the_window(h in 1usize..6, w in 1usize..9, c in 1usize..4) {
            let a = artifacts(Tensor::full(&[c, h, w], 1.0));
            let m = AttentionMap::from_artifacts(&a, MapSource::Refined, &names(h), (0..w).collect());
            prop_assert_eq!((m.height, m.width, m.values.len()), (h, w, h * w));
        }
    }
}
