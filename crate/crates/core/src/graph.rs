//! Model configs, two-stage partitions, the cost model and the split planner.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::layers::{LayerError, LayerKind, LayerSpec};
use crate::prng::{Prng, StreamKey};
use crate::stage::Stage;
use crate::tensor::{numel, DType};
use crate::wire::{PayloadReader, PayloadWriter, WireError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error("cut {cut} is not legal: {why}")]
    BadCut { cut: usize, why: String },
    #[error("partition: {0}")]
    Partition(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("costs: {0}")]
    Costs(String),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// A linear chain of layers plus residual edges, with every activation
/// shape resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    /// `shapes[k]` is the input to layer `k`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
}

fn parse_err(line: usize, msg: impl Into<String>) -> GraphError {
    GraphError::Parse { line, msg: msg.into() }
}

fn parse_usize(s: &str, line: usize, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{what}: expected an integer, got {:?}", s.trim())))
}

fn parse_kind(body: &str, line: usize) -> Result<LayerKind> {
    let body = body.trim();
    let (name, rest) = match body.find(|c: char| c == '(' || c.is_whitespace()) {
        Some(i) => (&body[..i], body[i..].trim()),
        None => (body, ""),
    };
    let (args, tail) = if let Some(stripped) = rest.strip_prefix('(') {
        let close = stripped.find(')').ok_or_else(|| parse_err(line, "missing ')'"))?;
        (&stripped[..close], stripped[close + 1..].trim())
    } else {
        ("", rest)
    };
    let mut args: Vec<&str> = args.split(',').map(str::trim).filter(|a| !a.is_empty()).collect();
    let mut skip = None;
    for tok in tail.split_whitespace() {
        match tok.strip_prefix("skip=") {
            Some(v) => skip = Some(parse_usize(v, line, "skip")?),
            None => return Err(parse_err(line, format!("unexpected token {tok:?}"))),
        }
    }
    if let Some(pos) = args.iter().position(|a| a.starts_with("skip=")) {
        skip = Some(parse_usize(&args.remove(pos)[5..], line, "skip")?);
    }
    let want = |n: usize| -> Result<Vec<usize>> {
        if args.len() != n {
            return Err(parse_err(
                line,
                format!("{name} takes {n} arguments, got {}", args.len()),
            ));
        }
        args.iter().map(|a| parse_usize(a, line, name)).collect()
    };
    let kind = match name {
        "Linear" => {
            let a = want(2)?;
            LayerKind::Linear {
                in_features: a[0],
                out_features: a[1],
            }
        }
        "Conv2d" => {
            let a = want(5)?;
            LayerKind::Conv2d {
                in_channels: a[0],
                out_channels: a[1],
                kernel: a[2],
                stride: a[3],
                padding: a[4],
            }
        }
        "ReLU" | "Relu" => {
            want(0)?;
            LayerKind::Relu
        }
        "Dropout" => {
            if args.len() != 1 {
                return Err(parse_err(line, "Dropout takes 1 argument"));
            }
            let rate = args[0]
                .parse()
                .map_err(|_| parse_err(line, format!("Dropout: bad rate {:?}", args[0])))?;
            LayerKind::Dropout { rate }
        }
        "ResidualAdd" => {
            want(0)?;
            LayerKind::ResidualAdd {
                skip: skip
                    .take()
                    .ok_or_else(|| parse_err(line, "ResidualAdd needs skip=<index>"))?,
            }
        }
        "GlobalAvgPool" => {
            want(0)?;
            LayerKind::GlobalAvgPool
        }
        "SoftmaxXent" => {
            want(0)?;
            LayerKind::SoftmaxXent
        }
        other => return Err(parse_err(line, format!("unknown layer kind {other:?}"))),
    };
    if skip.is_some() {
        return Err(parse_err(line, "skip= only applies to ResidualAdd"));
    }
    kind.validate().map_err(|e| parse_err(line, e.to_string()))?;
    Ok(kind)
}

fn parse_dims(s: &str, line: usize) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| parse_usize(d, line, "input"))
        .collect::<Result<_>>()?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(parse_err(line, "input dimensions must be positive"));
    }
    Ok(dims)
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Result<ModelGraph> {
        let shapes = propagate(&input_shape, &layers)?;
        Ok(ModelGraph {
            name: name.into(),
            layers,
            shapes,
        })
    }

    /// Parses the text config format:
    ///
    /// ```text
    /// name tiny
    /// input 8x16
    /// 0: Linear(16,4)
    /// 1: SoftmaxXent
    /// ```
    pub fn parse(text: &str) -> Result<ModelGraph> {
        let mut name = String::from("model");
        let mut input = None;
        let mut layers = Vec::new();
        let mut last_line = 0;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            last_line = line;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix("name ") {
                name = rest.trim().to_string();
            } else if let Some(rest) = content.strip_prefix("input ") {
                input = Some(parse_dims(rest.trim(), line)?);
            } else if let Some((idx, body)) = content.split_once(':') {
                let idx = parse_usize(idx, line, "layer index")?;
                if idx != layers.len() {
                    return Err(parse_err(
                        line,
                        format!("expected layer index {}, got {idx}", layers.len()),
                    ));
                }
                let kind = parse_kind(body, line)?;
                layers.push(LayerSpec::new(kind).map_err(|e| parse_err(line, e.to_string()))?);
            } else {
                return Err(parse_err(line, format!("cannot parse {content:?}")));
            }
        }
        let input = input.ok_or_else(|| parse_err(last_line.max(1), "missing 'input' line"))?;
        if layers.is_empty() {
            return Err(parse_err(last_line.max(1), "no layers"));
        }
        ModelGraph::new(name, input, layers)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelGraph> {
        ModelGraph::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_config(&self) -> String {
        let dims: Vec<String> = self.shapes[0].iter().map(ToString::to_string).collect();
        let mut out = format!("name {}\ninput {}\n", self.name, dims.join("x"));
        for (i, l) in self.layers.iter().enumerate() {
            out.push_str(&format!("{i}: {}\n", l.kind));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[0]
    }

    pub fn batch_size(&self) -> usize {
        self.shapes[0][0]
    }

    /// Input shape of layer `k`, or the model output for `k == len()`.
    pub fn activation_shape(&self, k: usize) -> &[usize] {
        &self.shapes[k]
    }

    /// Same model with a different batch size.
    pub fn with_batch(&self, batch: usize) -> Result<ModelGraph> {
        let mut input = self.shapes[0].clone();
        input[0] = batch;
        ModelGraph::new(self.name.clone(), input, self.layers.clone())
    }

    /// `(source, add)` pairs, one per residual edge.
    pub fn skip_edges(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(k, l)| match l.kind {
                LayerKind::ResidualAdd { skip } => Some((skip, k)),
                _ => None,
            })
            .collect()
    }

    /// A cut `c` puts layers `[0, c)` on stage 0 and `[c, n)` on stage 1.
    /// No residual edge may cross it.
    pub fn check_cut(&self, cut: usize) -> Result<()> {
        let bad = |why: String| Err(GraphError::BadCut { cut, why });
        if cut == 0 || cut >= self.len() {
            return bad(format!("must be in 1..{}", self.len()));
        }
        if let Some((s, k)) = self.skip_edges().into_iter().find(|&(s, k)| s < cut && k >= cut) {
            return bad(format!("residual edge {s}->{k} crosses it"));
        }
        Ok(())
    }

    pub fn legal_cuts(&self) -> Vec<usize> {
        (1..self.len()).filter(|&c| self.check_cut(c).is_ok()).collect()
    }

    pub fn partition(&self, cut: usize) -> Result<PartitionSpec> {
        self.check_cut(cut)?;
        Ok(PartitionSpec {
            cut,
            stage0: 0..cut,
            stage1: cut..self.len(),
            cut_shape: self.shapes[cut].clone(),
        })
    }

    pub fn stage(&self, range: Range<usize>) -> Stage {
        Stage {
            first_index: range.start,
            input_shape: self.shapes[range.start].clone(),
            layers: self.layers[range].to_vec(),
        }
    }

    pub fn full_stage(&self) -> Stage {
        self.stage(0..self.len())
    }

    pub fn split(&self, spec: &PartitionSpec) -> (Stage, Stage) {
        (self.stage(spec.stage0.clone()), self.stage(spec.stage1.clone()))
    }

    /// Deterministic initialisation; each layer draws from its own stream.
    pub fn init_weights(&mut self, seed: u64) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            let mut prng = Prng::for_stream(StreamKey::new(seed, u64::MAX, 0, k as u64));
            l.init_params(&mut prng);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    /// Output features of the last linear layer, if any.
    pub fn num_classes(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l.kind {
            LayerKind::Linear { out_features, .. } => Some(out_features),
            _ => None,
        })
    }
}

fn propagate(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for (k, l) in layers.iter().enumerate() {
        if let LayerKind::ResidualAdd { skip } = l.kind {
            if skip >= k {
                return Err(GraphError::Shape {
                    layer: k,
                    msg: format!("skip source {skip} must precede the add"),
                });
            }
            if shapes[skip] != shapes[k] {
                return Err(GraphError::Shape {
                    layer: k,
                    msg: format!("skip shape {:?} differs from input {:?}", shapes[skip], shapes[k]),
                });
            }
        }
        if l.kind == LayerKind::SoftmaxXent && k + 1 != layers.len() {
            return Err(GraphError::Shape {
                layer: k,
                msg: "SoftmaxXent must be the last layer".into(),
            });
        }
        let out = l.kind.output_shape(&shapes[k]).map_err(|e| GraphError::Shape {
            layer: k,
            msg: e.to_string(),
        })?;
        shapes.push(out);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSpec {
    pub cut: usize,
    pub stage0: Range<usize>,
    pub stage1: Range<usize>,
    /// Activation shape crossing the link, per microbatch.
    pub cut_shape: Vec<usize>,
}

impl PartitionSpec {
    /// Bytes crossing the link per microbatch in one direction (f32).
    pub fn activation_bytes(&self) -> usize {
        numel(&self.cut_shape) * DType::F32.byte_width()
    }
}

/// Per-layer forward and backward costs in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
}

impl CostModel {
    pub fn uniform(n: usize, fwd: f64, bwd: f64) -> CostModel {
        CostModel {
            forward: vec![fwd; n],
            backward: vec![bwd; n],
        }
    }

    /// Synthetic cost file: `default fwd=<s> bwd=<s>` and `<layer> fwd=<s> bwd=<s>`
    /// lines, `#` comments. Unlisted layers take the default (zero if absent).
    pub fn parse(text: &str, n_layers: usize) -> Result<CostModel> {
        let mut default = (0.0, 0.0);
        let mut explicit: Vec<Option<(f64, f64)>> = vec![None; n_layers];
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let mut toks = content.split_whitespace();
            let head = toks.next().unwrap_or("");
            let (mut f, mut b) = (None, None);
            for tok in toks {
                let (key, val) = tok
                    .split_once('=')
                    .ok_or_else(|| GraphError::Costs(format!("line {line}: expected key=value, got {tok:?}")))?;
                let v: f64 = val
                    .parse()
                    .map_err(|_| GraphError::Costs(format!("line {line}: bad number {val:?}")))?;
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(GraphError::Costs(format!("line {line}: cost must be >= 0")));
                }
                match key {
                    "fwd" => f = Some(v),
                    "bwd" => b = Some(v),
                    _ => return Err(GraphError::Costs(format!("line {line}: unknown key {key:?}"))),
                }
            }
            let pair = (f.unwrap_or(0.0), b.unwrap_or(0.0));
            if head == "default" {
                default = pair;
            } else {
                let idx: usize = head
                    .parse()
                    .map_err(|_| GraphError::Costs(format!("line {line}: expected layer index, got {head:?}")))?;
                if idx >= n_layers {
                    return Err(GraphError::Costs(format!("line {line}: layer {idx} out of range")));
                }
                explicit[idx] = Some(pair);
            }
        }
        let resolved: Vec<(f64, f64)> = explicit.into_iter().map(|e| e.unwrap_or(default)).collect();
        Ok(CostModel {
            forward: resolved.iter().map(|p| p.0).collect(),
            backward: resolved.iter().map(|p| p.1).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>, n_layers: usize) -> Result<CostModel> {
        CostModel::parse(&std::fs::read_to_string(path)?, n_layers)
    }

    /// Times every layer on one microbatch, median of three runs.
    pub fn measure(graph: &ModelGraph, input: &crate::Tensor, labels: &crate::Tensor) -> Result<CostModel> {
        let times = graph.full_stage().time_layers(input, Some(labels), 3)?;
        Ok(CostModel {
            forward: times.iter().map(|t| t.0).collect(),
            backward: times.iter().map(|t| t.1).collect(),
        })
    }

    /// Forward plus backward time of each stage.
    pub fn stage_times(&self, spec: &PartitionSpec) -> (f64, f64) {
        let sum = |r: &Range<usize>| r.clone().map(|k| self.forward[k] + self.backward[k]).sum::<f64>();
        (sum(&spec.stage0), sum(&spec.stage1))
    }
}

/// Link between the two devices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    /// Bytes per second; `f64::INFINITY` means free transfers.
    pub bandwidth: f64,
    /// Seconds per message.
    pub latency: f64,
}

impl LinkModel {
    pub const LIGHTNING: LinkModel = LinkModel {
        bandwidth: 60e6,
        latency: 0.0,
    };
    pub const USB_C: LinkModel = LinkModel {
        bandwidth: 1.25e9,
        latency: 0.0,
    };
    pub const IDEAL: LinkModel = LinkModel {
        bandwidth: f64::INFINITY,
        latency: 0.0,
    };

    pub fn transfer_time(&self, bytes: usize) -> f64 {
        bytes as f64 / self.bandwidth + self.latency
    }
}

/// Predicted wall time of one batch of `m` microbatches under the
/// hybrid schedule. Each stage runs forward and backward back to back per
/// microbatch, so the steady state is bounded by the slower stage and the
/// pipeline pays one fill and one drain of the faster one.
pub fn predict_makespan(spec: &PartitionSpec, costs: &CostModel, link: &LinkModel, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let (t0, t1) = costs.stage_times(spec);
    let mf = m as f64;
    let bytes = spec.activation_bytes();
    t0 + t1 + (mf - 1.0) * t0.max(t1) + mf * (2.0 * bytes as f64) / link.bandwidth + 2.0 * mf * link.latency
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub spec: PartitionSpec,
    pub makespan: f64,
    /// `(cut, makespan)` for every legal cut, ascending by cut.
    pub candidates: Vec<(usize, f64)>,
}

/// Picks the legal cut with the lowest predicted makespan. Ties go to the
/// smaller cut activation, then the lower index.
pub fn plan_split(graph: &ModelGraph, costs: &CostModel, link: &LinkModel, m: usize) -> Result<SplitPlan> {
    if costs.forward.len() != graph.len() || costs.backward.len() != graph.len() {
        return Err(GraphError::Costs(format!(
            "{} costs for {} layers",
            costs.forward.len(),
            graph.len()
        )));
    }
    let mut best: Option<(PartitionSpec, f64)> = None;
    let mut candidates = Vec::new();
    for cut in graph.legal_cuts() {
        let spec = graph.partition(cut)?;
        let t = predict_makespan(&spec, costs, link, m);
        candidates.push((cut, t));
        let better = match &best {
            None => true,
            Some((b, bt)) => {
                let tol = 1e-12 * bt.abs().max(t.abs()).max(1e-300);
                if (t - bt).abs() <= tol {
                    spec.activation_bytes() < b.activation_bytes()
                } else {
                    t < *bt
                }
            }
        };
        if better {
            best = Some((spec, t));
        }
    }
    let (spec, makespan) = best.ok_or_else(|| GraphError::BadCut {
        cut: 0,
        why: "model has no legal cut".into(),
    })?;
    Ok(SplitPlan {
        spec,
        makespan,
        candidates,
    })
}

const PARTITION_MAGIC: &[u8; 4] = b"EPST";
const PARTITION_VERSION: u16 = 1;

fn kind_code(kind: &LayerKind, w: &mut PayloadWriter) {
    match *kind {
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            w.u8(1).u32(in_features as u32).u32(out_features as u32);
        }
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            w.u8(2);
            for v in [in_channels, out_channels, kernel, stride, padding] {
                w.u32(v as u32);
            }
        }
        LayerKind::Relu => {
            w.u8(3);
        }
        LayerKind::Dropout { rate } => {
            w.u8(4).f64(rate);
        }
        LayerKind::ResidualAdd { skip } => {
            w.u8(5).u32(skip as u32);
        }
        LayerKind::GlobalAvgPool => {
            w.u8(6);
        }
        LayerKind::SoftmaxXent => {
            w.u8(7);
        }
    }
}

fn read_kind(r: &mut PayloadReader) -> Result<LayerKind> {
    let u = |r: &mut PayloadReader| -> Result<usize> { Ok(r.u32()? as usize) };
    Ok(match r.u8()? {
        1 => LayerKind::Linear {
            in_features: u(r)?,
            out_features: u(r)?,
        },
        2 => LayerKind::Conv2d {
            in_channels: u(r)?,
            out_channels: u(r)?,
            kernel: u(r)?,
            stride: u(r)?,
            padding: u(r)?,
        },
        3 => LayerKind::Relu,
        4 => LayerKind::Dropout { rate: r.f64()? },
        5 => LayerKind::ResidualAdd { skip: u(r)? },
        6 => LayerKind::GlobalAvgPool,
        7 => LayerKind::SoftmaxXent,
        c => return Err(GraphError::Partition(format!("unknown layer code {c}"))),
    })
}

/// Serialized stage layout:
///
/// `"EPST" | version: u16 | first_index: u32 | ndims: u8 | dims: u32 x ndims |
/// count: u32 | count x (kind | nparams: u8 | tensors)`
pub fn serialize_stage(stage: &Stage) -> Result<Vec<u8>> {
    if stage.layers.is_empty() {
        return Err(GraphError::Partition("stage has no layers".into()));
    }
    let mut w = PayloadWriter::default();
    w.buf.extend_from_slice(PARTITION_MAGIC);
    w.u16(PARTITION_VERSION)
        .u32(stage.first_index as u32)
        .u8(stage.input_shape.len() as u8);
    for &d in &stage.input_shape {
        w.u32(d as u32);
    }
    w.u32(stage.layers.len() as u32);
    for (k, l) in stage.layers.iter().enumerate() {
        let shapes = l.kind.param_shapes();
        if l.params.len() != shapes.len() || l.params.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice()) {
            return Err(GraphError::Partition(format!(
                "layer {} is missing weights",
                stage.first_index + k
            )));
        }
        kind_code(&l.kind, &mut w);
        w.u8(l.params.len() as u8);
        for t in &l.params {
            w.tensor(t)?;
        }
    }
    Ok(w.buf)
}

pub fn deserialize_stage(bytes: &[u8]) -> Result<Stage> {
    if bytes.len() < 4 || &bytes[..4] != PARTITION_MAGIC {
        return Err(GraphError::Partition("bad magic".into()));
    }
    let mut r = PayloadReader::new(&bytes[4..], "partition");
    let version = r.u16()?;
    if version != PARTITION_VERSION {
        return Err(GraphError::Partition(format!("unsupported version {version}")));
    }
    let first_index = r.u32()? as usize;
    let nd = r.u8()? as usize;
    let input_shape = (0..nd)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let kind = read_kind(&mut r)?;
        let np = r.u8()? as usize;
        let params = (0..np)
            .map(|_| r.tensor())
            .collect::<std::result::Result<Vec<_>, _>>()?;
        layers.push(LayerSpec::with_params(kind, params)?);
    }
    if r.remaining() != 0 {
        return Err(GraphError::Partition(format!("{} trailing bytes", r.remaining())));
    }
    let shifted: Vec<LayerSpec> = layers
        .iter()
        .map(|l| match l.kind {
            LayerKind::ResidualAdd { skip } if skip >= first_index => Ok(LayerSpec {
                kind: LayerKind::ResidualAdd {
                    skip: skip - first_index,
                },
                params: Vec::new(),
            }),
            LayerKind::ResidualAdd { skip } => Err(GraphError::Partition(format!(
                "residual source {skip} lies outside the stage"
            ))),
            _ => Ok(l.clone()),
        })
        .collect::<Result<_>>()?;
    // Validate shapes with stage-local skip indices.
    propagate(&input_shape, &shifted)?;
    Ok(Stage {
        first_index,
        input_shape,
        layers,
    })
}

pub fn serialize_partition(graph: &ModelGraph, spec: &PartitionSpec) -> Result<Vec<u8>> {
    graph.check_cut(spec.cut)?;
    serialize_stage(&graph.stage(spec.stage1.clone()))
}

impl fmt::Display for PartitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cut={} stage0={}..{} stage1={}..{} activation={:?}",
            self.cut, self.stage0.start, self.stage0.end, self.stage1.start, self.stage1.end, self.cut_shape
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = "\
name tiny
input 2x4   # batch of two
0: Linear(4,4)
1: ReLU
2: ResidualAdd skip=1
3: Linear(4,3)
4: SoftmaxXent
";

    #[test]
    fn parses_and_resolves_shapes() {
        let g = ModelGraph::parse(TINY).unwrap();
        assert_eq!(g.name, "tiny");
        assert_eq!(g.len(), 5);
        assert_eq!(g.activation_shape(3), &[2, 4]);
        assert_eq!(g.activation_shape(5), &[] as &[usize]);
        assert_eq!(g.skip_edges(), vec![(1, 2)]);
        assert_eq!(ModelGraph::parse(&g.to_config()).unwrap(), g);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ModelGraph::parse("input 2x4\n0: Linear(4,4)\n1: Bogus\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 3, .. }), "{err}");
        let err = ModelGraph::parse("input 2x4\n0: Linear(4)\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 2, .. }));
        let err = ModelGraph::parse("input 2x4\n1: ReLU\n").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 2, .. }));
    }

    #[test]
    fn skip_shape_mismatch_rejected() {
        let err = ModelGraph::parse("input 2x4\n0: Linear(4,3)\n1: ResidualAdd skip=0\n").unwrap_err();
        assert!(matches!(err, GraphError::Shape { layer: 1, .. }));
    }

    #[test]
    fn cuts_inside_residual_are_illegal() {
        let g = ModelGraph::parse(TINY).unwrap();
        assert_eq!(g.legal_cuts(), vec![1, 3, 4]);
        assert!(g.check_cut(2).is_err());
        assert!(g.check_cut(0).is_err());
        assert!(g.check_cut(5).is_err());
    }

    #[test]
    fn balanced_costs_choose_middle() {
        let g =
            ModelGraph::parse("input 1x4\n0: Linear(4,4)\n1: Linear(4,4)\n2: Linear(4,4)\n3: Linear(4,4)\n").unwrap();
        let costs = CostModel {
            forward: vec![10.0; 4],
            backward: vec![0.0; 4],
        };
        let plan = plan_split(&g, &costs, &LinkModel::IDEAL, 8).unwrap();
        assert_eq!(plan.spec.cut, 2);
    }

    #[test]
    fn zero_cost_stage_gives_serial_time() {
        let g = ModelGraph::parse("input 1x4\n0: Linear(4,4)\n1: Linear(4,4)\n").unwrap();
        let spec = g.partition(1).unwrap();
        let costs = CostModel {
            forward: vec![3.0, 0.0],
            backward: vec![1.0, 0.0],
        };
        assert_eq!(predict_makespan(&spec, &costs, &LinkModel::IDEAL, 5), 20.0);
    }

    #[test]
    fn cost_file_defaults() {
        let c = CostModel::parse("default fwd=1 bwd=2\n# comment\n2 fwd=5\n", 3).unwrap();
        assert_eq!(c.forward, vec![1.0, 1.0, 5.0]);
        assert_eq!(c.backward, vec![2.0, 2.0, 0.0]);
        assert!(CostModel::parse("7 fwd=1\n", 3).is_err());
    }

    #[test]
    fn stage_round_trip() {
        let mut g = ModelGraph::parse(TINY).unwrap();
        g.init_weights(3);
        let spec = g.partition(1).unwrap();
        let bytes = serialize_partition(&g, &spec).unwrap();
        let stage = deserialize_stage(&bytes).unwrap();
        assert_eq!(stage, g.stage(1..5));
        assert!(deserialize_stage(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn missing_weights_rejected() {
        let g = ModelGraph::parse(TINY).unwrap();
        let mut stage = g.stage(0..5);
        stage.layers[0].params.pop();
        assert!(matches!(serialize_stage(&stage), Err(GraphError::Partition(_))));
    }
}
