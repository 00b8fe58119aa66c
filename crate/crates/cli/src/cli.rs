//! `metric-lens` subcommands. Exit codes: 0 success, 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use metric_lens::decompose::{pixel_to_cell, Side};
use metric_lens::evaluate::{
    estimate_orientation, localization_accuracy, wrap_angle_error, AerialConvention, AngleDeg,
    BBox, ErrorHistogram, LocalizationSample, OrientationMode,
};
use metric_lens::format::{read_tensor, write_tensor};
use metric_lens::nn::Model;
use metric_lens::render::write_pgm;
use metric_lens::retrieval::{
    build_index, retrieve_interactive, retrieve_overall, EmbeddingIndex, Roi,
};
use metric_lens::Tensor;
use serde_json::json;

use crate::dataset::{read_localization, read_orientation};
use crate::pipeline::{analyze, analyze_pair, ExplainVariant};
use crate::workspace::{image_files, Workspace, WORKSPACE_ENV};

pub const DEFAULT_THRESHOLDS: [f64; 7] = [0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

#[derive(Parser)]
#[command(
    name = "metric-lens",
    version,
    about = "Explain similarity between images for deep metric-learning models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PairArgs {
    /// Model manifest (JSON) for the query stream.
    #[arg(long)]
    model: PathBuf,
    /// Model manifest for the reference stream, if it differs.
    #[arg(long)]
    ref_model: Option<PathBuf>,
    /// Query image tensor (.tnsr).
    #[arg(long)]
    query: PathBuf,
    /// Reference image tensor (.tnsr).
    #[arg(long = "ref")]
    reference: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SideArg {
    Query,
    Ref,
}

impl From<SideArg> for Side {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Query => Side::Query,
            SideArg::Ref => Side::Ref,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Overall,
    PointSpecific,
}

#[derive(Subcommand)]
enum Command {
    /// Print cosine similarity S and squared distance D as JSON.
    Similarity(PairArgs),
    /// Write overall activation maps for both images.
    Explain {
        #[command(flatten)]
        pair: PairArgs,
        #[arg(long)]
        out: PathBuf,
        /// decomposition, gradcam or gradcam_nonorm.
        #[arg(long, default_value = "decomposition")]
        variant: ExplainVariant,
        /// Add the cross bias term to decomposition maps.
        #[arg(long)]
        with_bias: bool,
    },
    /// Write the point-specific map for one clicked pixel.
    Point {
        #[command(flatten)]
        pair: PairArgs,
        /// Pixel column in the clicked image.
        #[arg(long)]
        x: usize,
        /// Pixel row in the clicked image.
        #[arg(long)]
        y: usize,
        #[arg(long, value_enum, default_value = "query")]
        side: SideArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Localization accuracy (IoU > 0.5) per threshold, as CSV.
    Localize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        ref_model: Option<PathBuf>,
        /// JSON lines: {"query", "ref", "gt_box": [x0, y0, x1, y1]}.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS)]
        thresholds: Vec<f64>,
        #[arg(long, default_value = "decomposition")]
        variant: ExplainVariant,
        #[arg(long)]
        with_bias: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Street-to-aerial orientation estimates and error histogram.
    Orient {
        /// Street (query) stream manifest.
        #[arg(long)]
        model: PathBuf,
        /// Aerial (reference) stream manifest.
        #[arg(long)]
        ref_model: Option<PathBuf>,
        /// JSON lines: {"query", "ref", "gt_rotation_deg"}.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "point-specific")]
        mode: ModeArg,
        /// Per-sample CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Histogram CSV with 7-degree bins.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Build or query an embedding index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Serve the HTTP API over a workspace.
    Serve {
        /// Workspace config (JSON).
        #[arg(long, env = WORKSPACE_ENV)]
        workspace: PathBuf,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Generate a toy workspace with models, images and evaluation sets.
    Demo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum IndexCommand {
    /// Embed every .tnsr image in a directory.
    Build {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank indexed images against a query, optionally restricted to pixels.
    Query {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Pixels as `x,y;x,y;...`.
        #[arg(long)]
        roi: Option<String>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(path).with_context(|| format!("reading {}", path.display()))
}

fn models(model: &Path, ref_model: Option<&Path>) -> Result<(Model, Option<Model>)> {
    Ok((load_model(model)?, ref_model.map(load_model).transpose()?))
}

fn fmt_csv_f64(v: f64) -> String {
    format!("{v}")
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Similarity(pair) => {
            let (qm, rm) = models(&pair.model, pair.ref_model.as_deref())?;
            let a = analyze_pair(
                &qm,
                &load_tensor(&pair.query)?,
                rm.as_ref().unwrap_or(&qm),
                &load_tensor(&pair.reference)?,
            )?;
            writeln!(out, "{}", serde_json::to_string(&a.similarity()?)?)?;
        }
        Command::Explain {
            pair,
            out: dir,
            variant,
            with_bias,
        } => {
            let (qm, rm) = models(&pair.model, pair.ref_model.as_deref())?;
            let a = analyze_pair(
                &qm,
                &load_tensor(&pair.query)?,
                rm.as_ref().unwrap_or(&qm),
                &load_tensor(&pair.reference)?,
            )?;
            fs::create_dir_all(&dir)?;
            for (side, stem) in [(Side::Query, "query_map"), (Side::Ref, "ref_map")] {
                let map = a.overall_upsampled(side, variant, with_bias)?;
                write_tensor(&map.values, dir.join(format!("{stem}.tnsr")))?;
                write_pgm(dir.join(format!("{stem}.pgm")), &map.values)?;
            }
            let sim = a.similarity()?;
            let report = json!({
                "S": sim.similarity,
                "D": sim.distance,
                "variant": variant,
                "with_bias": with_bias,
            });
            fs::write(
                dir.join("similarity.json"),
                serde_json::to_vec_pretty(&report)?,
            )?;
            writeln!(out, "{report}")?;
        }
        Command::Point {
            pair,
            x,
            y,
            side,
            out: dir,
        } => {
            let side = Side::from(side);
            let (qm, rm) = models(&pair.model, pair.ref_model.as_deref())?;
            let a = analyze_pair(
                &qm,
                &load_tensor(&pair.query)?,
                rm.as_ref().unwrap_or(&qm),
                &load_tensor(&pair.reference)?,
            )?;
            let d = &a.decomposition;
            let cell = pixel_to_cell(y, x, a.stream(side).image_hw, d.grid(side))?;
            let map = d.point_specific_map(side, cell, None)?;
            let (h, w) = a.stream(side.other()).image_hw;
            let up = map.upsample(h, w)?;
            fs::create_dir_all(&dir)?;
            write_tensor(&up.values, dir.join("point_map.tnsr"))?;
            write_pgm(dir.join("point_map.pgm"), &up.values)?;
            writeln!(
                out,
                "{}",
                json!({ "side": side, "clicked_feature_cell": cell, "sum": map.sum() })
            )?;
        }
        Command::Localize {
            model,
            ref_model,
            dataset,
            thresholds,
            variant,
            with_bias,
            out: csv_path,
        } => {
            let (qm, rm) = models(&model, ref_model.as_deref())?;
            let rm = rm.as_ref().unwrap_or(&qm);
            let records = read_localization(&dataset)?;
            if records.is_empty() {
                bail!("dataset {} has no records", dataset.display());
            }
            let mut samples = Vec::with_capacity(records.len());
            for r in &records {
                let a = analyze_pair(
                    &qm,
                    &load_tensor(&r.query)?,
                    rm,
                    &load_tensor(&r.reference)?,
                )
                .with_context(|| {
                    format!("pair {} / {}", r.query.display(), r.reference.display())
                })?;
                let [x0, y0, x1, y1] = r.gt_box;
                let (image_h, image_w) = a.query.image_hw;
                let gt = BBox::new(x0, y0, x1, y1)?;
                if !gt.fits(image_h, image_w) {
                    bail!(
                        "gt box {:?} exceeds {}x{} image {}",
                        r.gt_box,
                        image_h,
                        image_w,
                        r.query.display()
                    );
                }
                samples.push(LocalizationSample {
                    map: a.overall(Side::Query, variant, with_bias)?,
                    gt,
                    image_h,
                    image_w,
                });
            }
            let mut csv = String::from("threshold,accuracy\n");
            for t in thresholds {
                let acc = localization_accuracy(&samples, t)?;
                csv.push_str(&format!("{},{}\n", fmt_csv_f64(t), fmt_csv_f64(acc)));
            }
            emit(out, csv_path.as_deref(), &csv)?;
        }
        Command::Orient {
            model,
            ref_model,
            dataset,
            mode,
            out: csv_path,
            histogram,
        } => {
            let (qm, rm) = models(&model, ref_model.as_deref())?;
            let rm = rm.as_ref().unwrap_or(&qm);
            let mode = match mode {
                ModeArg::Overall => OrientationMode::Overall,
                ModeArg::PointSpecific => OrientationMode::PointSpecific,
            };
            let records = read_orientation(&dataset)?;
            let mut csv = String::from("query,ref,gt_deg,estimate_deg,error_deg\n");
            let mut hist = ErrorHistogram::new();
            let mut skipped = 0;
            for r in &records {
                let a = analyze_pair(
                    &qm,
                    &load_tensor(&r.query)?,
                    rm,
                    &load_tensor(&r.reference)?,
                )
                .with_context(|| {
                    format!("pair {} / {}", r.query.display(), r.reference.display())
                })?;
                let street =
                    a.overall_upsampled(Side::Query, ExplainVariant::Decomposition, false)?;
                let aerial =
                    a.overall_upsampled(Side::Ref, ExplainVariant::Decomposition, false)?;
                let name = |p: &Path| {
                    p.file_name()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default()
                };
                match estimate_orientation(
                    &street,
                    &aerial,
                    mode,
                    Some(&a.decomposition),
                    AerialConvention::default(),
                ) {
                    Ok(est) => {
                        let err = wrap_angle_error(AngleDeg::new(r.gt_rotation_deg), est);
                        hist.add(err);
                        csv.push_str(&format!(
                            "{},{},{},{},{}\n",
                            name(&r.query),
                            name(&r.reference),
                            r.gt_rotation_deg,
                            est.value(),
                            err
                        ));
                    }
                    Err(e @ (metric_lens::Error::EmptyMask | metric_lens::Error::CenterPixel)) => {
                        log::warn!("{}: {e}", r.query.display());
                        skipped += 1;
                        csv.push_str(&format!(
                            "{},{},{},,\n",
                            name(&r.query),
                            name(&r.reference),
                            r.gt_rotation_deg
                        ));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            emit(out, csv_path.as_deref(), &csv)?;
            if let Some(path) = histogram {
                let mut h = String::from("bin_center_deg,count,fraction\n");
                for ((c, n), f) in hist.centers.iter().zip(&hist.counts).zip(hist.fractions()) {
                    h.push_str(&format!("{c},{n},{f}\n"));
                }
                fs::write(&path, h).with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!(
                "{} estimates, {} skipped, {:.1}% within +-3.5 deg",
                hist.total(),
                skipped,
                100.0 * hist.zero_bin_fraction()
            );
        }
        Command::Index(IndexCommand::Build {
            model,
            images,
            out: dir,
        }) => {
            let model = load_model(&model)?;
            let files =
                image_files(&images).with_context(|| format!("listing {}", images.display()))?;
            let (index, failures) = build_index(&model, &files);
            for (id, e) in &failures {
                eprintln!("skipped {id}: {e}");
            }
            index.save(&dir)?;
            writeln!(
                out,
                "indexed {} images, {} skipped",
                index.len(),
                failures.len()
            )?;
        }
        Command::Index(IndexCommand::Query {
            model,
            index,
            query,
            k,
            roi,
        }) => {
            let model = load_model(&model)?;
            let index = EmbeddingIndex::load(&index)
                .with_context(|| format!("loading index {}", index.display()))?;
            let stream = analyze(&model, &load_tensor(&query)?)?;
            let ranked = match roi {
                None => retrieve_overall(&index, &stream.trace.embedding.to_f64(), k)?,
                Some(text) => {
                    let points = parse_pixels(&text)?;
                    let (image_h, image_w) = stream.image_hw;
                    let roi = match points.as_slice() {
                        [(row, col)] => Roi::Pixel {
                            row: *row,
                            col: *col,
                            image_h,
                            image_w,
                        },
                        _ => Roi::Pixels {
                            points,
                            image_h,
                            image_w,
                        },
                    };
                    retrieve_interactive(&index, &stream.head, &stream.trace.conv_feature, &roi, k)?
                }
            };
            writeln!(out, "rank,id,score")?;
            for (i, r) in ranked.iter().enumerate() {
                writeln!(out, "{},{},{}", i + 1, r.id, r.score)?;
            }
        }
        Command::Serve {
            workspace,
            port,
            host,
        } => {
            let ws = Workspace::open(&workspace)?;
            log::info!(
                "workspace {}: {} images, index {}",
                workspace.display(),
                ws.images.len(),
                ws.index
                    .as_ref()
                    .map_or("absent".to_string(), |i| format!("{} entries", i.len()))
            );
            let runtime = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?;
            runtime.block_on(crate::http::serve(ws, SocketAddr::new(host, port)))?;
        }
        Command::Demo { out: dir, seed } => {
            let layout = crate::demo::write_demo(&dir, seed)?;
            writeln!(out, "workspace: {}", layout.workspace.display())?;
        }
    }
    Ok(())
}

/// Parses `x,y;x,y` into `(row, col)` pairs.
fn parse_pixels(text: &str) -> Result<Vec<(usize, usize)>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|p| {
            let (x, y) = p
                .split_once(',')
                .with_context(|| format!("pixel {p:?} is not x,y"))?;
            Ok((y.trim().parse()?, x.trim().parse()?))
        })
        .collect()
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => out.write_all(text.as_bytes()).map_err(Into::into),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_lists() {
        assert_eq!(parse_pixels("3,4; 5,6").unwrap(), vec![(4, 3), (6, 5)]);
        assert!(parse_pixels("3").is_err());
        assert!(parse_pixels("").unwrap().is_empty());
    }

    #[test]
    fn no_arguments_is_a_usage_error() {
        let mut sink = Vec::new();
        assert_eq!(run(["metric-lens"], &mut sink), 2);
        assert_eq!(
            run(
                ["metric-lens", "explain", "--variant", "saliency"],
                &mut sink
            ),
            2
        );
        assert_eq!(run(["metric-lens", "--help"], &mut sink), 0);
    }
}
