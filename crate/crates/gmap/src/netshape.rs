//! Symbolic shape propagation through the generator and discriminator
//! architectures. No weights and no execution; the point is to lock the
//! layer arithmetic (channel counts, spatial sizes, solved paddings)
//! into testable constants.

use std::fmt;

use crate::error::{Error, Result};

/// Vertex count of the registered face template the networks consume.
pub const TEMPLATE_VERTEX_COUNT: usize = 10857;
pub const MAP_RESOLUTION: usize = 128;
pub const LABEL_CHANNELS: usize = 23;
pub const RESIDUAL_BLOCKS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Deconv,
    Residual,
    ConcatLabel,
    GeomMap,
    GridSample,
    BranchConv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorShape {
    Points { channels: usize, n: usize },
    Image { channels: usize, h: usize, w: usize },
}

impl TensorShape {
    pub fn flat_len(&self) -> usize {
        match *self {
            TensorShape::Points { channels, n } => channels * n,
            TensorShape::Image { channels, h, w } => channels * h * w,
        }
    }

    pub fn channels(&self) -> usize {
        match *self {
            TensorShape::Points { channels, .. } | TensorShape::Image { channels, .. } => channels,
        }
    }

    pub fn spatial(&self) -> Option<(usize, usize)> {
        match *self {
            TensorShape::Image { h, w, .. } => Some((h, w)),
            TensorShape::Points { .. } => None,
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TensorShape::Points { channels, n } => write!(f, "{channels} x {n}"),
            TensorShape::Image { channels, h, w } => write!(f, "{channels} x {h} x {w}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub name: String,
    pub layer: Option<LayerSpec>,
    pub shape: TensorShape,
}

/// A side branch reducing one cascade layer to a single channel for the
/// multi-scale adversarial score.
#[derive(Debug, Clone)]
pub struct PyramidTap {
    /// Name of the main-chain entry the branch reads.
    pub after: String,
    pub layer: LayerSpec,
    pub shape: TensorShape,
}

#[derive(Debug, Clone)]
pub struct ShapeTrace {
    pub name: String,
    pub entries: Vec<TraceEntry>,
    pub taps: Vec<PyramidTap>,
}

pub fn conv_out(in_size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if in_size == 0 || kernel == 0 || stride == 0 {
        return Err(Error::Shape(
            "convolution sizes must be positive".into(),
        ));
    }
    let num = in_size as i64 + 2 * pad as i64 - kernel as i64;
    if num < 0 {
        return Err(Error::Shape(format!(
            "kernel {kernel} exceeds padded input {in_size}+2*{pad}"
        )));
    }
    Ok((num / stride as i64) as usize + 1)
}

pub fn deconv_out(in_size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if in_size == 0 || kernel == 0 || stride == 0 {
        return Err(Error::Shape(
            "deconvolution sizes must be positive".into(),
        ));
    }
    let out = (in_size as i64 - 1) * stride as i64 - 2 * pad as i64 + kernel as i64;
    if out <= 0 {
        return Err(Error::Shape(format!(
            "deconvolution of {in_size} with kernel {kernel}, stride {stride}, pad {pad} collapses"
        )));
    }
    Ok(out as usize)
}

/// Smallest non-negative pad reproducing `out_size`, if any. The tables
/// leave pads implicit, so traces solve them instead of hard-coding.
pub fn solve_conv_pad(in_size: usize, out_size: usize, kernel: usize, stride: usize) -> Option<usize> {
    (0..=2 * kernel.max(stride) + 2)
        .find(|&p| conv_out(in_size, kernel, stride, p).is_ok_and(|o| o == out_size))
}

pub fn solve_deconv_pad(
    in_size: usize,
    out_size: usize,
    kernel: usize,
    stride: usize,
) -> Option<usize> {
    (0..=2 * kernel.max(stride) + 2)
        .find(|&p| deconv_out(in_size, kernel, stride, p).is_ok_and(|o| o == out_size))
}

impl ShapeTrace {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            entries: Vec::new(),
            taps: Vec::new(),
        }
    }

    fn last_shape(&self) -> TensorShape {
        self.entries.last().expect("trace has an input entry").shape
    }

    fn push(&mut self, name: &str, layer: Option<LayerSpec>, shape: TensorShape) {
        self.entries.push(TraceEntry {
            name: name.to_string(),
            layer,
            shape,
        });
    }

    fn conv(&mut self, name: &str, kernel: usize, stride: usize, out_c: usize, out_hw: usize) {
        let (h, _) = self.last_shape().spatial().expect("conv input is an image");
        let pad = solve_conv_pad(h, out_hw, kernel, stride)
            .expect("table row admits a compatible pad");
        self.push(
            name,
            Some(LayerSpec {
                kind: LayerKind::Conv,
                kernel,
                stride,
                pad,
                out_channels: out_c,
            }),
            TensorShape::Image {
                channels: out_c,
                h: out_hw,
                w: out_hw,
            },
        );
    }

    fn deconv(&mut self, name: &str, kernel: usize, stride: usize, out_c: usize, out_hw: usize) {
        let (h, _) = self.last_shape().spatial().expect("deconv input is an image");
        let pad = solve_deconv_pad(h, out_hw, kernel, stride)
            .expect("table row admits a compatible pad");
        self.push(
            name,
            Some(LayerSpec {
                kind: LayerKind::Deconv,
                kernel,
                stride,
                pad,
                out_channels: out_c,
            }),
            TensorShape::Image {
                channels: out_c,
                h: out_hw,
                w: out_hw,
            },
        );
    }

    fn tap(&mut self, kernel: usize, stride: usize) {
        let entry = self.entries.last().expect("tap follows a cascade layer");
        let (h, _) = entry.shape.spatial().expect("tap input is an image");
        let pad = solve_conv_pad(h, h, kernel, stride)
            .expect("branch conv admits a size-preserving pad");
        self.taps.push(PyramidTap {
            after: entry.name.clone(),
            layer: LayerSpec {
                kind: LayerKind::BranchConv,
                kernel,
                stride,
                pad,
                out_channels: 1,
            },
            shape: TensorShape::Image {
                channels: 1,
                h,
                w: h,
            },
        });
    }

    pub fn output(&self) -> TensorShape {
        self.last_shape()
    }

    /// Flattened element counts of the branch outputs, in cascade order.
    pub fn pyramid_taps(&self) -> Vec<usize> {
        self.taps.iter().map(|t| t.shape.flat_len()).collect()
    }

    pub fn pyramid_concat_len(&self) -> usize {
        self.pyramid_taps().iter().sum()
    }

    /// Aligned text table: name, operation, output shape, plus branch
    /// rows at the end.
    pub fn render(&self) -> String {
        fn op_column(layer: &Option<LayerSpec>) -> String {
            match layer {
                None => "input".to_string(),
                Some(l) => {
                    let kind = match l.kind {
                        LayerKind::Conv => "conv",
                        LayerKind::Deconv => "deconv",
                        LayerKind::Residual => "residual",
                        LayerKind::ConcatLabel => "concat label",
                        LayerKind::GeomMap => "geometric map",
                        LayerKind::GridSample => "grid sample",
                        LayerKind::BranchConv => "branch conv",
                    };
                    match l.kind {
                        LayerKind::Conv
                        | LayerKind::Deconv
                        | LayerKind::Residual
                        | LayerKind::BranchConv => {
                            format!("{kind} k{} s{} p{}", l.kernel, l.stride, l.pad)
                        }
                        _ => kind.to_string(),
                    }
                }
            }
        }

        let mut rows: Vec<[String; 3]> = self
            .entries
            .iter()
            .map(|e| [e.name.clone(), op_column(&e.layer), e.shape.to_string()])
            .collect();
        for t in &self.taps {
            rows.push([
                format!("tap @ {}", t.after),
                op_column(&Some(t.layer)),
                format!("{} (flat {})", t.shape, t.shape.flat_len()),
            ]);
        }
        let mut widths = [0usize; 3];
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = format!("{}\n", self.name);
        for row in rows {
            out.push_str(&format!(
                "  {:<w0$}  {:<w1$}  {}\n",
                row[0],
                row[1],
                row[2],
                w0 = widths[0],
                w1 = widths[1]
            ));
        }
        out
    }
}

/// Encoder-decoder generator trace: geometric map in, label concat,
/// downsample by 4, six residual blocks, mirror-image decoder, grid
/// sampling back to the template vertices.
pub fn trace_generator() -> ShapeTrace {
    let r = MAP_RESOLUTION;
    let mut t = ShapeTrace::new("generator");
    t.push(
        "input",
        None,
        TensorShape::Points {
            channels: 3,
            n: TEMPLATE_VERTEX_COUNT,
        },
    );
    t.push(
        "map",
        Some(LayerSpec {
            kind: LayerKind::GeomMap,
            kernel: 1,
            stride: 1,
            pad: 0,
            out_channels: 3,
        }),
        TensorShape::Image {
            channels: 3,
            h: r,
            w: r,
        },
    );
    t.push(
        "label cat",
        Some(LayerSpec {
            kind: LayerKind::ConcatLabel,
            kernel: 1,
            stride: 1,
            pad: 0,
            out_channels: 3 + LABEL_CHANNELS,
        }),
        TensorShape::Image {
            channels: 3 + LABEL_CHANNELS,
            h: r,
            w: r,
        },
    );
    t.conv("enc 1", 7, 1, 64, r);
    t.conv("enc 2", 4, 2, 128, r / 2);
    t.conv("enc 3", 4, 2, 256, r / 4);
    for i in 1..=RESIDUAL_BLOCKS {
        let (h, _) = t.last_shape().spatial().unwrap();
        let c = t.last_shape().channels();
        let pad = solve_conv_pad(h, h, 3, 1).expect("residual conv keeps its size");
        t.push(
            &format!("res {i}"),
            Some(LayerSpec {
                kind: LayerKind::Residual,
                kernel: 3,
                stride: 1,
                pad,
                out_channels: c,
            }),
            TensorShape::Image {
                channels: c,
                h,
                w: h,
            },
        );
    }
    t.deconv("dec 1", 4, 2, 128, r / 2);
    t.deconv("dec 2", 4, 2, 64, r);
    t.conv("to map", 7, 1, 3, r);
    t.push(
        "output",
        Some(LayerSpec {
            kind: LayerKind::GridSample,
            kernel: 1,
            stride: 1,
            pad: 0,
            out_channels: 3,
        }),
        TensorShape::Points {
            channels: 3,
            n: TEMPLATE_VERTEX_COUNT,
        },
    );
    t
}

/// Cascade discriminator trace: halve the map until 2x2, branch a
/// single-channel conv off every other layer for the multi-scale
/// adversarial score, and end in a 23-channel classification head.
pub fn trace_discriminator() -> ShapeTrace {
    let r = MAP_RESOLUTION;
    let mut t = ShapeTrace::new("discriminator");
    t.push(
        "input",
        None,
        TensorShape::Points {
            channels: 3,
            n: TEMPLATE_VERTEX_COUNT,
        },
    );
    t.push(
        "map",
        Some(LayerSpec {
            kind: LayerKind::GeomMap,
            kernel: 1,
            stride: 1,
            pad: 0,
            out_channels: 3,
        }),
        TensorShape::Image {
            channels: 3,
            h: r,
            w: r,
        },
    );
    let mut channels = 64;
    let mut size = r / 2;
    let mut layer = 1;
    while size >= 2 {
        t.conv(&format!("casc {layer}"), 4, 2, channels, size);
        if layer % 2 == 0 {
            t.tap(3, 1);
        }
        channels *= 2;
        size /= 2;
        layer += 1;
    }
    t.conv("class head", 2, 1, LABEL_CHANNELS, 1);
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_arithmetic_examples() {
        assert_eq!(conv_out(128, 4, 2, 1).unwrap(), 64);
        assert_eq!(conv_out(128, 7, 1, 3).unwrap(), 128);
        assert_eq!(deconv_out(32, 4, 2, 1).unwrap(), 64);
    }

    #[test]
    fn degenerate_convolutions_rejected() {
        assert!(conv_out(2, 7, 1, 0).is_err());
        assert!(conv_out(0, 3, 1, 1).is_err());
        assert!(conv_out(4, 3, 0, 1).is_err());
        assert!(deconv_out(1, 2, 1, 2).is_err());
    }

    #[test]
    fn pad_solving_finds_the_smallest() {
        assert_eq!(solve_conv_pad(128, 64, 4, 2), Some(1));
        assert_eq!(solve_conv_pad(128, 128, 7, 1), Some(3));
        assert_eq!(solve_conv_pad(32, 32, 3, 1), Some(1));
        assert_eq!(solve_deconv_pad(32, 64, 4, 2), Some(1));
        assert_eq!(solve_conv_pad(2, 1, 2, 1), Some(0));
        assert_eq!(solve_conv_pad(128, 5, 4, 2), None);
    }

    fn image(c: usize, h: usize) -> TensorShape {
        TensorShape::Image {
            channels: c,
            h,
            w: h,
        }
    }

    #[test]
    fn generator_trace_matches_the_table() {
        let t = trace_generator();
        let shapes: Vec<TensorShape> = t.entries.iter().map(|e| e.shape).collect();
        let expected = vec![
            TensorShape::Points {
                channels: 3,
                n: 10857,
            },
            image(3, 128),
            image(26, 128),
            image(64, 128),
            image(128, 64),
            image(256, 32),
            image(256, 32),
            image(256, 32),
            image(256, 32),
            image(256, 32),
            image(256, 32),
            image(256, 32),
            image(128, 64),
            image(64, 128),
            image(3, 128),
            TensorShape::Points {
                channels: 3,
                n: 10857,
            },
        ];
        assert_eq!(shapes, expected);
        assert!(t.taps.is_empty());
    }

    #[test]
    fn generator_bottleneck_downsamples_by_four() {
        let t = trace_generator();
        let bottleneck = t
            .entries
            .iter()
            .filter_map(|e| e.shape.spatial())
            .map(|(h, _)| h)
            .min()
            .unwrap();
        assert_eq!(bottleneck, 32);
        assert_eq!(MAP_RESOLUTION / bottleneck, 4);
    }

    #[test]
    fn generator_residuals_preserve_shape() {
        let t = trace_generator();
        let res: Vec<&TraceEntry> = t
            .entries
            .iter()
            .filter(|e| matches!(e.layer, Some(l) if l.kind == LayerKind::Residual))
            .collect();
        assert_eq!(res.len(), 6);
        for e in &res {
            assert_eq!(e.shape, image(256, 32));
        }
    }

    #[test]
    fn generator_ends_where_it_starts() {
        let t = trace_generator();
        assert_eq!(t.entries.first().unwrap().shape, t.output());
        let first_image = t.entries.iter().find_map(|e| e.shape.spatial()).unwrap();
        let last_image = t
            .entries
            .iter()
            .rev()
            .find_map(|e| e.shape.spatial())
            .unwrap();
        assert_eq!(first_image, last_image);
    }

    #[test]
    fn discriminator_cascade_halves_to_two() {
        let t = trace_discriminator();
        let cascade: Vec<(usize, usize)> = t
            .entries
            .iter()
            .filter(|e| matches!(e.layer, Some(l) if l.kind == LayerKind::Conv))
            .map(|e| (e.shape.channels(), e.shape.spatial().unwrap().0))
            .collect();
        assert_eq!(
            cascade,
            vec![
                (64, 64),
                (128, 32),
                (256, 16),
                (512, 8),
                (1024, 4),
                (2048, 2),
                (23, 1)
            ]
        );
    }

    #[test]
    fn discriminator_taps_every_other_layer() {
        let t = trace_discriminator();
        assert_eq!(t.taps.len(), 3);
        let sizes: Vec<usize> = t.taps.iter().map(|p| p.shape.spatial().unwrap().0).collect();
        assert_eq!(sizes, vec![32, 8, 2]);
        assert_eq!(t.pyramid_taps(), vec![1024, 64, 4]);
        assert_eq!(t.pyramid_concat_len(), 1092);
        for tap in &t.taps {
            assert_eq!(tap.layer.kernel, 3);
            assert_eq!(tap.layer.stride, 1);
            assert_eq!(tap.layer.pad, 1);
            assert_eq!(tap.shape.channels(), 1);
        }
    }

    #[test]
    fn discriminator_head_is_23_by_1() {
        let t = trace_discriminator();
        assert_eq!(t.output(), image(23, 1));
        let head = t.entries.last().unwrap().layer.unwrap();
        assert_eq!((head.kernel, head.stride, head.pad), (2, 1, 0));
    }

    #[test]
    fn adjacent_shapes_satisfy_the_arithmetic() {
        for trace in [trace_generator(), trace_discriminator()] {
            for pair in trace.entries.windows(2) {
                let layer = match pair[1].layer {
                    Some(l) => l,
                    None => continue,
                };
                let (in_h, _) = match pair[0].shape.spatial() {
                    Some(s) => s,
                    None => continue,
                };
                let (out_h, _) = match pair[1].shape.spatial() {
                    Some(s) => s,
                    None => continue,
                };
                let check = match layer.kind {
                    LayerKind::Conv | LayerKind::Residual | LayerKind::BranchConv => {
                        Some(conv_out(in_h, layer.kernel, layer.stride, layer.pad).unwrap())
                    }
                    LayerKind::Deconv => {
                        Some(deconv_out(in_h, layer.kernel, layer.stride, layer.pad).unwrap())
                    }
                    _ => None,
                };
                if let Some(got) = check {
                    assert_eq!(got, out_h, "{}: {}", trace.name, pair[1].name);
                }
                assert_eq!(layer.out_channels, pair[1].shape.channels());
            }
        }
    }

    #[test]
    fn solved_pads_are_recoverable_independently() {
        for trace in [trace_generator(), trace_discriminator()] {
            for pair in trace.entries.windows(2) {
                let Some(layer) = pair[1].layer else { continue };
                let (Some((in_h, _)), Some((out_h, _))) =
                    (pair[0].shape.spatial(), pair[1].shape.spatial())
                else {
                    continue;
                };
                let solved = match layer.kind {
                    LayerKind::Conv | LayerKind::Residual => {
                        solve_conv_pad(in_h, out_h, layer.kernel, layer.stride)
                    }
                    LayerKind::Deconv => {
                        solve_deconv_pad(in_h, out_h, layer.kernel, layer.stride)
                    }
                    _ => continue,
                };
                assert_eq!(solved, Some(layer.pad), "{}", pair[1].name);
            }
        }
    }

    #[test]
    fn render_aligns_columns() {
        for trace in [trace_generator(), trace_discriminator()] {
            let text = trace.render();
            let lines: Vec<&str> = text.lines().collect();
            assert_eq!(lines[0], trace.name);
            assert_eq!(lines.len(), 1 + trace.entries.len() + trace.taps.len());
            for e in &trace.entries {
                assert!(text.contains(&e.name), "missing {}", e.name);
                assert!(text.contains(&e.shape.to_string()));
            }
            // Shape column starts at the same offset on every row.
            let offsets: Vec<usize> = trace
                .entries
                .iter()
                .zip(&lines[1..])
                .map(|(e, line)| line.rfind(&e.shape.to_string()).unwrap())
                .collect();
            assert!(offsets.windows(2).all(|w| w[0] == w[1]));
        }
        assert!(trace_discriminator().render().contains("flat 1024"));
    }
}
