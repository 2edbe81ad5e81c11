//! Subcommand front end for the geometric-map pipeline. Stages talk to
//! each other only through files (OBJ meshes, key-vertex JSON, GMAP and
//! GTAB binaries, JSON reports), so every step can be rerun, cached, or
//! inspected on its own.
//!
//! Exit codes: 0 success, 1 quality failure (flips, non-convergence,
//! broken topology), 2 usage or bad key-vertex documents, 3 I/O and
//! format trouble.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gmap::deform::{deform_to_gmap, DeformParams, KeySpecDoc};
use gmap::error::Error;
use gmap::harmonic::{boundary_to_circle, solve_harmonic, Frame, UVEmbedding};
use gmap::losses::{
    adversarial_terms, classification_loss, cycle_loss, encode_label, reconstruction_loss,
    symmetry_loss, total_losses, ClassificationMode, DomainLabel, LossParts, LossWeights,
    LABEL_DIM,
};
use gmap::mesh::{load_obj, obj_string, Mesh};
use gmap::metrics::{icp_align, mse_n, mse_v, procrustes_align, AlignmentResult};
use gmap::netshape::{trace_discriminator, trace_generator, ShapeTrace};
use gmap::sampling::{
    backward_sample, build_raster_table, forward_map, roundtrip_error, GeometricMap, RasterTable,
    DEFAULT_RESOLUTION, MIN_RESOLUTION,
};

#[derive(Parser)]
#[command(name = "gmap", version, about = "Square symmetric geometric maps for face surfaces")]
struct Cli {
    /// Report format on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Seed for any randomized step; echoed into reports.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Flatten a face mesh and deform it into the unit square; writes
    /// uv.json, table.bin, and report.json.
    BuildMap {
        mesh: PathBuf,
        spec: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESOLUTION)]
        resolution: usize,
        #[arg(long, default_value_t = 200)]
        max_iters: usize,
        /// Mean in-plane offset below which the deformation stops.
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Interpolate mesh positions through a raster table; writes
    /// map.gmap and a map.png preview (the PNG is for eyeballing only,
    /// never an input).
    Rasterize {
        mesh: PathBuf,
        table: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Sample a geometric map back to mesh vertices; writes out.obj
    /// with the template's topology and prints round-trip statistics.
    SampleBack {
        map: PathBuf,
        uv: PathBuf,
        template: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Evaluate the training objective over files listed in a manifest;
    /// writes losses.json.
    LossesEval {
        manifest: PathBuf,
        /// Loss weight overrides; defaults match the training recipe
        /// and are echoed into the output.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Validate mesh topology and report connectivity statistics.
    Check { mesh: PathBuf },
    /// Print the generator and discriminator shape traces.
    Trace,
    /// Rigidly align a candidate mesh onto a reference and report
    /// vertex and normal errors.
    Metrics {
        reference: PathBuf,
        candidate: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Procrustes)]
        method: MethodArg,
        /// Report squared means instead of mean distance and angle.
        #[arg(long)]
        squared: bool,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
    },
    /// Generate the bundled synthetic face fixture deterministically;
    /// writes face.obj and face_key_spec.json.
    Synth {
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Vertices per grid side; odd so the symmetry axis lies on a
        /// vertex column.
        #[arg(long, default_value_t = 65)]
        grid: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Procrustes,
    Icp,
}

/// A failed stage with the exit class it maps to.
struct Failure {
    stage: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn usage(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
            code: 2,
        }
    }
}

fn classify(e: &Error) -> u8 {
    match e {
        Error::KeySpec(_) => 2,
        Error::Topology(_) | Error::Solve(_) | Error::NonFinite(_) => 1,
        Error::Io(_) | Error::ObjParse { .. } | Error::Format(_) | Error::Shape(_) => 3,
    }
}

/// Tags a library result with the pipeline stage it came from.
fn at<T>(stage: &'static str, r: gmap::error::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure {
        stage,
        message: e.to_string(),
        code: classify(&e),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let format = cli.format;
    let seed = cli.seed;
    let out = match cli.command {
        Command::BuildMap {
            mesh,
            spec,
            resolution,
            max_iters,
            threshold,
            out_dir,
        } => cmd_build_map(&mesh, &spec, resolution, max_iters, threshold, &out_dir, seed, format),
        Command::Rasterize {
            mesh,
            table,
            out_dir,
        } => cmd_rasterize(&mesh, &table, &out_dir, format),
        Command::SampleBack {
            map,
            uv,
            template,
            out_dir,
        } => cmd_sample_back(&map, &uv, &template, &out_dir, format),
        Command::LossesEval {
            manifest,
            weights,
            out_dir,
        } => cmd_losses_eval(&manifest, weights.as_deref(), &out_dir, format),
        Command::Check { mesh } => cmd_check(&mesh, format),
        Command::Trace => cmd_trace(format),
        Command::Metrics {
            reference,
            candidate,
            method,
            squared,
            max_iters,
        } => cmd_metrics(&reference, &candidate, method, squared, max_iters, format),
        Command::Synth { out_dir, grid } => cmd_synth(&out_dir, grid, format),
    };
    match out {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error at {}: {}", f.stage, f.message);
            ExitCode::from(f.code)
        }
    }
}

// ---------------------------------------------------------------------
// build-map

#[derive(Serialize)]
struct BuildReport {
    schema: &'static str,
    resolution: usize,
    seed: u64,
    n_vertices: usize,
    n_triangles: usize,
    boundary_loops: usize,
    iterations: usize,
    converged: bool,
    flips: usize,
    symmetry_error: Option<f64>,
    uv_overshoot: f64,
    conflicts: usize,
    valid_pixels: usize,
    roundtrip_mean: f64,
    roundtrip_max: f64,
    masked_vertices: usize,
}

/// On-disk uv embedding document.
#[derive(Serialize, Deserialize)]
struct UvDoc {
    schema: String,
    frame: Frame,
    uv: Vec<[f64; 2]>,
}

const UV_SCHEMA: &str = "gmap/uv/1";

#[allow(clippy::too_many_arguments)]
fn cmd_build_map(
    mesh_path: &Path,
    spec_path: &Path,
    resolution: usize,
    max_iters: usize,
    threshold: f64,
    out_dir: &Path,
    seed: u64,
    format: Format,
) -> Result<u8, Failure> {
    if resolution < MIN_RESOLUTION {
        return Err(Failure::usage(
            "config",
            format!("--resolution {resolution} below the minimum of {MIN_RESOLUTION}"),
        ));
    }
    if max_iters < 1 {
        return Err(Failure::usage("config", "--max-iters must be at least 1"));
    }
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Failure::usage(
            "config",
            format!("--threshold {threshold} must be positive and finite"),
        ));
    }

    let mesh = at("load", load_obj(mesh_path))?;
    let doc = at("spec", KeySpecDoc::load(spec_path))?;
    let topology = mesh.validate_topology();
    if !topology.is_manifold || !topology.is_oriented {
        return Err(Failure {
            stage: "validate",
            message: format!(
                "mesh is not a clean surface (manifold: {}, oriented: {})",
                topology.is_manifold, topology.is_oriented
            ),
            code: 1,
        });
    }
    if topology.boundary_loops == 0 {
        return Err(Failure {
            stage: "validate",
            message: "closed surface has no boundary to flatten".into(),
            code: 1,
        });
    }
    let spec = doc.resolve(&topology);
    at("spec", spec.validate_against(&mesh, &topology))?;

    let circle = at("harmonic", boundary_to_circle(&mesh, &topology))?;
    let disk = at("harmonic", solve_harmonic(&mesh, &circle))?;

    let params = DeformParams {
        max_iterations: max_iters,
        convergence_threshold: threshold,
        log_every: 10,
    };
    let (square, deform) = at("deform", deform_to_gmap(&mesh, &disk, &spec, &params))?;

    let table = at("raster", build_raster_table(&square, &mesh, resolution))?;
    let roundtrip = at("roundtrip", roundtrip_error(&mesh, &square, &table))?;

    at("write", create_dir(out_dir))?;
    let uv_doc = UvDoc {
        schema: UV_SCHEMA.to_string(),
        frame: square.frame,
        uv: square.uv.clone(),
    };
    at("write", write_json(&out_dir.join("uv.json"), &uv_doc))?;
    at("write", table.write(out_dir.join("table.bin")))?;

    let report = BuildReport {
        schema: "gmap/build-report/1",
        resolution,
        seed,
        n_vertices: topology.n_vertices,
        n_triangles: topology.n_triangles,
        boundary_loops: topology.boundary_loops,
        iterations: deform.iterations,
        converged: deform.converged,
        flips: deform.flips,
        symmetry_error: deform.symmetry,
        uv_overshoot: deform.uv_overshoot,
        conflicts: table.conflicts,
        valid_pixels: table.valid_pixels(),
        roundtrip_mean: roundtrip.mean,
        roundtrip_max: roundtrip.max,
        masked_vertices: roundtrip.masked_vertices.len(),
    };
    at("write", write_json(&out_dir.join("report.json"), &report))?;

    match format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!("vertices:        {}", report.n_vertices);
            println!("boundary loops:  {}", report.boundary_loops);
            println!(
                "deform:          {} iterations, converged: {}, flips: {}",
                report.iterations, report.converged, report.flips
            );
            if let Some(s) = report.symmetry_error {
                println!("symmetry error:  {s:.3e}");
            }
            println!(
                "raster:          {} of {} pixels valid, {} conflicts",
                report.valid_pixels,
                resolution * resolution,
                report.conflicts
            );
            println!(
                "round trip:      mean {:.6} max {:.6} over {} vertices ({} masked)",
                report.roundtrip_mean,
                report.roundtrip_max,
                report.n_vertices - report.masked_vertices,
                report.masked_vertices
            );
            println!("wrote {}", out_dir.join("uv.json").display());
            println!("wrote {}", out_dir.join("table.bin").display());
            println!("wrote {}", out_dir.join("report.json").display());
        }
    }
    Ok(u8::from(!(deform.converged && deform.flips == 0)))
}

// ---------------------------------------------------------------------
// rasterize

#[derive(Serialize)]
struct RasterizeReport {
    schema: &'static str,
    resolution: usize,
    valid_pixels: usize,
    conflicts: usize,
    map: String,
    png: String,
}

fn cmd_rasterize(
    mesh_path: &Path,
    table_path: &Path,
    out_dir: &Path,
    format: Format,
) -> Result<u8, Failure> {
    let mesh = at("load", load_obj(mesh_path))?;
    let table = at("table", RasterTable::read(table_path))?;
    let map = at("forward", forward_map(mesh.vertices(), &table))?;

    at("write", create_dir(out_dir))?;
    let map_path = out_dir.join("map.gmap");
    let png_path = out_dir.join("map.png");
    at("write", map.write(&map_path))?;
    write_png(&map, &png_path)?;

    let report = RasterizeReport {
        schema: "gmap/rasterize-report/1",
        resolution: map.resolution(),
        valid_pixels: map.valid_pixels(),
        conflicts: table.conflicts,
        map: map_path.display().to_string(),
        png: png_path.display().to_string(),
    };
    match format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!(
                "map:    {} ({}x{}, {} valid pixels)",
                report.map, report.resolution, report.resolution, report.valid_pixels
            );
            println!("png:    {}", report.png);
        }
    }
    Ok(0)
}

/// Channel-normalized preview. Valid pixels stretch each channel over
/// its observed range; masked pixels are black. Row 0 of the image is
/// the top of the uv square.
fn write_png(map: &GeometricMap, path: &Path) -> Result<(), Failure> {
    let res = map.resolution();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for y in 0..res {
        for x in 0..res {
            if map.masked(x, y) {
                continue;
            }
            let v = map.get(x, y);
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
    }
    let mut img = image::RgbImage::new(res as u32, res as u32);
    for y in 0..res {
        for x in 0..res {
            let px = if map.masked(x, y) {
                [0, 0, 0]
            } else {
                let v = map.get(x, y);
                let mut q = [0u8; 3];
                for c in 0..3 {
                    let t = if hi[c] > lo[c] {
                        (v[c] - lo[c]) / (hi[c] - lo[c])
                    } else {
                        0.5
                    };
                    q[c] = (t * 255.0).round().clamp(0.0, 255.0) as u8;
                }
                q
            };
            img.put_pixel(x as u32, (res - 1 - y) as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Failure {
        stage: "png",
        message: e.to_string(),
        code: 3,
    })
}

// ---------------------------------------------------------------------
// sample-back

#[derive(Serialize)]
struct SampleBackReport {
    schema: &'static str,
    n_vertices: usize,
    masked_reads: usize,
    mean_error: f64,
    max_error: f64,
    out: String,
}

fn cmd_sample_back(
    map_path: &Path,
    uv_path: &Path,
    template_path: &Path,
    out_dir: &Path,
    format: Format,
) -> Result<u8, Failure> {
    let map = at("map", GeometricMap::read(map_path))?;
    let res = map.resolution();
    for y in 0..res {
        for x in 0..res {
            if map.masked(x, y) {
                continue;
            }
            let v = map.get(x, y);
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Failure {
                    stage: "map",
                    message: format!("map pixel ({x}, {y}) has a non-finite value"),
                    code: 3,
                });
            }
        }
    }

    let uv_doc: UvDoc = at("uv", read_json(uv_path))?;
    if !uv_doc.schema.starts_with("gmap/uv/") {
        return Err(Failure {
            stage: "uv",
            message: format!("unexpected uv document schema {:?}", uv_doc.schema),
            code: 3,
        });
    }
    let template = at("load", load_obj(template_path))?;
    if uv_doc.uv.len() != template.n_vertices() {
        return Err(Failure {
            stage: "uv",
            message: format!(
                "uv document has {} entries, template has {} vertices",
                uv_doc.uv.len(),
                template.n_vertices()
            ),
            code: 3,
        });
    }
    let emb = UVEmbedding {
        uv: uv_doc.uv,
        frame: uv_doc.frame,
    };
    let sampled = at("sample", backward_sample(&map, &emb))?;

    let rebuilt = at(
        "rebuild",
        Mesh::new(sampled.points.clone(), template.triangles().to_vec()),
    )?;
    at("write", create_dir(out_dir))?;
    let out_path = out_dir.join("out.obj");
    at(
        "write",
        std::fs::write(&out_path, obj_string(&rebuilt)).map_err(Error::from),
    )?;

    let masked: std::collections::BTreeSet<usize> =
        sampled.masked_reads.iter().copied().collect();
    let mut sum = 0.0;
    let mut max = 0.0_f64;
    let mut n = 0usize;
    for (i, (s, v)) in sampled.points.iter().zip(template.vertices()).enumerate() {
        if masked.contains(&i) {
            continue;
        }
        let e = ((s[0] - v[0]).powi(2) + (s[1] - v[1]).powi(2) + (s[2] - v[2]).powi(2)).sqrt();
        sum += e;
        max = max.max(e);
        n += 1;
    }
    let report = SampleBackReport {
        schema: "gmap/sample-back-report/1",
        n_vertices: template.n_vertices(),
        masked_reads: sampled.masked_reads.len(),
        mean_error: if n > 0 { sum / n as f64 } else { 0.0 },
        max_error: max,
        out: out_path.display().to_string(),
    };
    match format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!(
                "round trip vs template: mean {:.6} max {:.6} ({} masked reads)",
                report.mean_error, report.max_error, report.masked_reads
            );
            println!("wrote {}", report.out);
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// losses-eval

/// File manifest for one loss evaluation. Every section is optional;
/// omitted sections contribute zero. Network outputs (critic scores,
/// gradient norms, classification scores) are inline numbers since they
/// have no file format of their own; maps come from GMAP files.
#[derive(Deserialize)]
struct Manifest {
    #[serde(default)]
    adversarial: Option<AdversarialSection>,
    #[serde(default)]
    labels: Vec<LabelEntry>,
    #[serde(default)]
    classification_real: Option<ScoreSection>,
    #[serde(default)]
    classification_fake: Option<ScoreSection>,
    /// Pairs of [original, translated-and-back] map files.
    #[serde(default)]
    cycle: Vec<[PathBuf; 2]>,
    /// Pairs of [original, same-domain-reconstruction] map files.
    #[serde(default)]
    reconstruction: Vec<[PathBuf; 2]>,
    #[serde(default)]
    symmetry: Option<SymmetrySection>,
}

#[derive(Deserialize)]
struct AdversarialSection {
    d_real: Vec<f64>,
    d_fake: Vec<f64>,
    grad_norms: Vec<f64>,
}

#[derive(Deserialize)]
struct LabelEntry {
    expression: usize,
    gender: usize,
    age_years: f64,
}

#[derive(Deserialize)]
struct ScoreSection {
    scores: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct SymmetrySection {
    maps: Vec<PathBuf>,
    /// Flags samples whose subject is genuinely asymmetric; flagged
    /// samples are excluded from the term.
    #[serde(default)]
    asymmetric: Vec<bool>,
}

#[derive(Serialize)]
struct LossesReport {
    schema: &'static str,
    weights: LossWeights,
    parts: LossParts,
    gradient_penalty: Option<f64>,
    discriminator: f64,
    generator: f64,
    notes: Vec<String>,
}

fn scores_to_rows(section: &ScoreSection) -> Result<Vec<[f64; LABEL_DIM]>, Failure> {
    section
        .scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            <[f64; LABEL_DIM]>::try_from(row.as_slice()).map_err(|_| Failure {
                stage: "manifest",
                message: format!(
                    "score row {i} has {} entries, expected {LABEL_DIM}",
                    row.len()
                ),
                code: 3,
            })
        })
        .collect()
}

fn map_as_array(map: &GeometricMap) -> ndarray::ArrayD<f64> {
    let res = map.resolution();
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[res, res, 3]), map.data().to_vec())
        .expect("map data length matches its resolution")
}

fn load_map_pairs(
    stage: &'static str,
    pairs: &[[PathBuf; 2]],
) -> Result<Vec<(GeometricMap, GeometricMap)>, Failure> {
    pairs
        .iter()
        .map(|[a, b]| Ok((at(stage, GeometricMap::read(a))?, at(stage, GeometricMap::read(b))?)))
        .collect()
}

fn cmd_losses_eval(
    manifest_path: &Path,
    weights_path: Option<&Path>,
    out_dir: &Path,
    format: Format,
) -> Result<u8, Failure> {
    let manifest: Manifest = at("manifest", read_json(manifest_path))?;
    let weights = match weights_path {
        Some(p) => at("weights", read_json::<LossWeights>(p))?,
        None => LossWeights::default(),
    };
    at("weights", weights.validate())?;

    let mut parts = LossParts::default();
    let mut gradient_penalty = None;
    let mut notes = Vec::new();

    if let Some(adv) = &manifest.adversarial {
        let terms = at(
            "adversarial",
            adversarial_terms(
                &adv.d_real,
                &adv.d_fake,
                &adv.grad_norms,
                weights.alpha,
                weights.lambda_gp,
            ),
        )?;
        parts.adversarial = terms.d_loss_part;
        gradient_penalty = Some(terms.gp);
    }

    let labels: Vec<DomainLabel> = manifest
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            at(
                "labels",
                encode_label(l.expression, l.gender, l.age_years),
            )
            .map_err(|mut f| {
                f.message = format!("label {i}: {}", f.message);
                f
            })
        })
        .collect::<Result<_, _>>()?;

    if let Some(section) = &manifest.classification_real {
        let rows = scores_to_rows(section)?;
        let cls = at(
            "classification",
            classification_loss(&rows, &labels, ClassificationMode::Real),
        )?;
        parts.cls_real_discrete = cls.discrete;
        parts.cls_real_age = cls.age;
    }
    if let Some(section) = &manifest.classification_fake {
        let rows = scores_to_rows(section)?;
        let cls = at(
            "classification",
            classification_loss(&rows, &labels, ClassificationMode::Fake),
        )?;
        parts.cls_fake_discrete = cls.discrete;
        parts.cls_fake_age = cls.age;
    }

    if !manifest.cycle.is_empty() {
        let maps = load_map_pairs("cycle", &manifest.cycle)?;
        let mut total = 0.0;
        for (a, b) in &maps {
            total += at("cycle", cycle_loss(&map_as_array(a), &map_as_array(b)))?;
        }
        parts.cycle = total / maps.len() as f64;
    }

    if !manifest.reconstruction.is_empty() {
        let maps = load_map_pairs("reconstruction", &manifest.reconstruction)?;
        let mut total = 0.0;
        for (a, b) in &maps {
            total += at(
                "reconstruction",
                reconstruction_loss(&map_as_array(a), &map_as_array(b)),
            )?;
        }
        parts.reconstruction = total / maps.len() as f64;
    }

    if let Some(sym) = &manifest.symmetry {
        let maps: Vec<GeometricMap> = sym
            .maps
            .iter()
            .map(|p| at("symmetry", GeometricMap::read(p)))
            .collect::<Result<_, _>>()?;
        let flags = if sym.asymmetric.is_empty() {
            vec![false; maps.len()]
        } else {
            sym.asymmetric.clone()
        };
        let value = at("symmetry", symmetry_loss(&maps, &flags))?;
        parts.symmetry = value.value;
        if value.all_excluded {
            notes.push(
                "symmetry: every sample is flagged asymmetric, term excluded".to_string(),
            );
        }
    }

    let totals = at("total", total_losses(&parts, &weights))?;
    let report = LossesReport {
        schema: "gmap/losses/1",
        weights,
        parts,
        gradient_penalty,
        discriminator: totals.discriminator,
        generator: totals.generator,
        notes,
    };
    at("write", create_dir(out_dir))?;
    at("write", write_json(&out_dir.join("losses.json"), &report))?;

    match format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!("adversarial:     {:+.6}", report.parts.adversarial);
            if let Some(gp) = report.gradient_penalty {
                println!("grad penalty:    {gp:.6}");
            }
            println!(
                "cls real:        discrete {:.6} age {:.6}",
                report.parts.cls_real_discrete, report.parts.cls_real_age
            );
            println!(
                "cls fake:        discrete {:.6} age {:.6}",
                report.parts.cls_fake_discrete, report.parts.cls_fake_age
            );
            println!("cycle:           {:.6}", report.parts.cycle);
            println!("reconstruction:  {:.6}", report.parts.reconstruction);
            println!("symmetry:        {:.6}", report.parts.symmetry);
            println!("discriminator:   {:+.6}", report.discriminator);
            println!("generator:       {:+.6}", report.generator);
            for n in &report.notes {
                println!("note: {n}");
            }
            println!("wrote {}", out_dir.join("losses.json").display());
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// check

#[derive(Serialize)]
struct CheckReport {
    schema: &'static str,
    n_vertices: usize,
    n_triangles: usize,
    is_manifold: bool,
    is_oriented: bool,
    boundary_loops: usize,
    outer_loop_len: usize,
    zero_normals: usize,
}

fn cmd_check(mesh_path: &Path, format: Format) -> Result<u8, Failure> {
    let mesh = at("load", load_obj(mesh_path))?;
    let topology = mesh.validate_topology();
    let normals = mesh.vertex_normals();
    let report = CheckReport {
        schema: "gmap/check/1",
        n_vertices: topology.n_vertices,
        n_triangles: topology.n_triangles,
        is_manifold: topology.is_manifold,
        is_oriented: topology.is_oriented,
        boundary_loops: topology.boundary_loops,
        outer_loop_len: topology.boundary_vertices.len(),
        zero_normals: normals.zero_normals.len(),
    };
    match format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!("vertices:        {}", report.n_vertices);
            println!("triangles:       {}", report.n_triangles);
            println!("manifold:        {}", yes_no(report.is_manifold));
            println!("oriented:        {}", yes_no(report.is_oriented));
            println!("boundary loops:  {}", report.boundary_loops);
            println!("outer loop:      {} vertices", report.outer_loop_len);
            println!("zero normals:    {}", report.zero_normals);
        }
    }
    Ok(u8::from(!(report.is_manifold && report.is_oriented)))
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

// ---------------------------------------------------------------------
// trace

fn trace_json(t: &ShapeTrace) -> serde_json::Value {
    serde_json::json!({
        "name": t.name,
        "entries": t.entries.iter().map(|e| serde_json::json!({
            "name": e.name,
            "shape": e.shape.to_string(),
            "flat": e.shape.flat_len(),
        })).collect::<Vec<_>>(),
        "taps": t.taps.iter().map(|tap| serde_json::json!({
            "after": tap.after,
            "shape": tap.shape.to_string(),
            "flat": tap.shape.flat_len(),
        })).collect::<Vec<_>>(),
        "pyramid_concat_len": t.pyramid_concat_len(),
        "output": t.output().to_string(),
    })
}

fn cmd_trace(format: Format) -> Result<u8, Failure> {
    let g = trace_generator();
    let d = trace_discriminator();
    match format {
        Format::Json => {
            let doc = serde_json::json!({
                "schema": "gmap/trace/1",
                "generator": trace_json(&g),
                "discriminator": trace_json(&d),
            });
            println!("{}", serde_json::to_string_pretty(&doc).expect("valid json"));
        }
        Format::Text => {
            println!("{}", g.render());
            println!();
            println!("{}", d.render());
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// metrics

#[derive(Serialize)]
struct MetricsReport {
    schema: &'static str,
    method: &'static str,
    rms_before: f64,
    rms_after: f64,
    mse_v_mm: Option<f64>,
    mse_n_deg: Option<f64>,
    skipped_normals: usize,
    degenerate: bool,
}

fn cmd_metrics(
    reference_path: &Path,
    candidate_path: &Path,
    method: MethodArg,
    squared: bool,
    max_iters: usize,
    format: Format,
) -> Result<u8, Failure> {
    let reference = at("load", load_obj(reference_path))?;
    let candidate = at("load", load_obj(candidate_path))?;
    let aligned: AlignmentResult = match method {
        MethodArg::Procrustes => at(
            "align",
            procrustes_align(candidate.vertices(), reference.vertices()),
        )?,
        MethodArg::Icp => at(
            "align",
            icp_align(candidate.vertices(), reference.vertices(), max_iters),
        )?,
    };
    let moved = aligned.apply_all(candidate.vertices());

    let mut mse_v_mm = None;
    let mut mse_n_deg = None;
    let mut skipped = 0;
    if candidate.n_vertices() == reference.n_vertices() {
        mse_v_mm = Some(at("metrics", mse_v(&moved, reference.vertices(), squared))?);
        let moved_mesh = at(
            "metrics",
            Mesh::new(moved, candidate.triangles().to_vec()),
        )?;
        let stats = at(
            "metrics",
            mse_n(
                &moved_mesh.vertex_normals().normals,
                &reference.vertex_normals().normals,
                squared,
            ),
        )?;
        mse_n_deg = Some(stats.value);
        skipped = stats.skipped;
    }

    let report = MetricsReport {
        schema: "gmap/metrics/1",
        method: aligned.method.as_str(),
        rms_before: aligned.rms_before,
        rms_after: aligned.rms_after,
        mse_v_mm,
        mse_n_deg,
        skipped_normals: skipped,
        degenerate: aligned.degenerate,
    };
    match format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!("method:      {}", report.method);
            println!("rms before:  {:.6}", report.rms_before);
            println!("rms after:   {:.6}", report.rms_after);
            match (report.mse_v_mm, report.mse_n_deg) {
                (Some(v), Some(n)) => {
                    println!("mse-v:       {v:.6} mm");
                    println!(
                        "mse-n:       {n:.6} deg ({} normals skipped)",
                        report.skipped_normals
                    );
                }
                _ => println!("mse-v/mse-n: skipped (vertex counts differ)"),
            }
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// synth

#[derive(Serialize)]
struct SynthReport {
    schema: &'static str,
    n_vertices: usize,
    n_triangles: usize,
    boundary_loops: usize,
    mesh: String,
    spec: String,
}

fn cmd_synth(out_dir: &Path, grid: usize, format: Format) -> Result<u8, Failure> {
    if grid < 33 || grid % 2 == 0 {
        return Err(Failure::usage(
            "config",
            format!("--grid {grid} must be odd and at least 33"),
        ));
    }
    let face = gmap::synth::synthetic_face(gmap::synth::FaceParams {
        grid,
        ..Default::default()
    });
    let topology = face.mesh.validate_topology();
    at("write", create_dir(out_dir))?;
    let mesh_path = out_dir.join("face.obj");
    let spec_path = out_dir.join("face_key_spec.json");
    at(
        "write",
        std::fs::write(&mesh_path, obj_string(&face.mesh)).map_err(Error::from),
    )?;
    at("write", face.key_spec.save(&spec_path))?;

    let report = SynthReport {
        schema: "gmap/synth/1",
        n_vertices: topology.n_vertices,
        n_triangles: topology.n_triangles,
        boundary_loops: topology.boundary_loops,
        mesh: mesh_path.display().to_string(),
        spec: spec_path.display().to_string(),
    };
    match format {
        Format::Json => print_json(&report),
        Format::Text => {
            println!(
                "face: {} vertices, {} triangles, {} boundary loops",
                report.n_vertices, report.n_triangles, report.boundary_loops
            );
            println!("wrote {}", report.mesh);
            println!("wrote {}", report.spec);
        }
    }
    Ok(0)
}

// ---------------------------------------------------------------------
// shared plumbing

fn create_dir(dir: &Path) -> gmap::error::Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::from)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> gmap::error::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(Error::from)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> gmap::error::Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn print_json<T: Serialize>(value: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("report serializes")
    );
}
