//! Command-line driver: render a face model, unwarp textures from images,
//! fit the model to images, meshes, and textures, relight, and verify
//! gradients.
//!
//! Every error path exits nonzero and reports on stderr; stdout carries only
//! requested output. File outputs are written atomically, and identical
//! inputs with the same seed produce byte-identical outputs.
//!
//! UV maps travel as PNG with row y = u and column x = v, so a U x V map
//! becomes a V-wide, U-tall image. Masked-out texels take the background
//! color; a sidecar mask image (white = valid) preserves the mask exactly.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use facefit_core::camera::{project, rotate, ProjectionParams};
use facefit_core::fit::{
    bbox_diagonal, fit_albedo_lighting, fit_image, fit_shape, fit_shape_scan, nme, relight,
    FitInit, ImageFitProblem, RelightSource,
};
use facefit_core::gradcheck;
use facefit_core::io::{
    atomic_write, load_config, load_landmarks, load_model, load_obj, load_params, load_png,
    save_landmarks, save_model, save_obj, save_params, save_png, ModelFile, ParamFile, RunConfig,
};
use facefit_core::lighting::ShLighting;
use facefit_core::losses::LandmarkSet;
use facefit_core::model::{decode_albedo, decode_shape, Decoder};
use facefit_core::raster::{
    build_normal_map, unwarp_to_uv, Image, OcclusionMask, RenderOptions,
};
use facefit_core::raster::render;
use facefit_core::synthetic::{face_model, gt_scene};
use facefit_core::uv::UvMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "facefit",
    version,
    about = "Differentiable face model rendering and fitting"
)]
struct Cli {
    /// Run configuration file (key=value lines: loss weights, fit settings,
    /// image size, background, default paths).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for randomized procedures (gradient checks).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the model under given parameters to a PNG image.
    Render {
        /// Model container file.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Parameter file (projection, lighting, coefficients).
        #[arg(long)]
        params: PathBuf,
        /// Output image path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project an image onto the model's UV space using known parameters.
    Unwrap {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        /// Input image to unwarp.
        #[arg(long)]
        image: PathBuf,
        /// Output UV texture image.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the validity mask (white = texel seen in the image).
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Fit pose, lighting, shape, and albedo to an image.
    Fit {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Input image.
        #[arg(long)]
        image: PathBuf,
        /// Landmark annotations ("x y [visible]" per line). Enables the
        /// pose-from-landmarks stage; strongly recommended.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        /// Occlusion mask image; pixel brightness weights the data term.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Output parameter file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the fit report (name=value lines) to a file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fit shape coefficients directly to a 3D scan at several basis
    /// truncations and report the error at each.
    FitScan {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Target mesh (OBJ) in model vertex order.
        #[arg(long)]
        mesh: PathBuf,
        /// Basis truncations to evaluate.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        ks: Vec<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit albedo coefficients and lighting to a UV texture.
    FitTexture {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Parameter file providing the pose and shape for normals.
        #[arg(long)]
        params: PathBuf,
        /// Target UV texture image (V wide, U tall).
        #[arg(long)]
        target: PathBuf,
        /// Texture validity mask image (white = valid).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the fitted face under a different light.
    Relight {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Parameter file of the fitted face (pose, original light, coefficients).
        #[arg(long)]
        params: PathBuf,
        /// Parameter file whose lighting block is the new light.
        #[arg(long)]
        light: PathBuf,
        /// Relight a baked texture (PNG in UV layout) instead of the decoded
        /// albedo; per-texel shading ratios replace the original light.
        #[arg(long)]
        texture: Option<PathBuf>,
        /// Validity mask for --texture (white = valid).
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; exit 0 only if all pass.
    Gradcheck,
    /// Write the bundled synthetic model and a ground-truth scene (model,
    /// parameters, landmarks, rendered target, scan mesh) for self-contained
    /// experiments.
    Synth {
        /// Output directory.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    match cli.cmd {
        Cmd::Render { model, params, out } => cmd_render(&cfg, model, &params, out),
        Cmd::Unwrap { model, params, image, out, mask_out } => {
            cmd_unwrap(&cfg, model, &params, &image, out, mask_out)
        }
        Cmd::Fit { model, image, landmarks, mask, out, report } => {
            cmd_fit(&cfg, model, &image, landmarks, mask, out, report)
        }
        Cmd::FitScan { model, mesh, ks, out } => cmd_fit_scan(&cfg, model, &mesh, &ks, out),
        Cmd::FitTexture { model, params, target, mask, out } => {
            cmd_fit_texture(&cfg, model, &params, &target, mask, out)
        }
        Cmd::Relight { model, params, light, texture, mask, out } => {
            cmd_relight(&cfg, model, &params, &light, texture, mask, out)
        }
        Cmd::Gradcheck => cmd_gradcheck(cli.seed),
        Cmd::Synth { dir } => cmd_synth(&dir),
    }
}

/// Resolve a path given on the command line or fall back to the config.
fn resolve(cli: Option<PathBuf>, cfg_default: &Option<String>, what: &str) -> Result<PathBuf> {
    if let Some(p) = cli {
        return Ok(p);
    }
    if let Some(p) = cfg_default {
        return Ok(PathBuf::from(p));
    }
    bail!("no {what} given (pass --{what} or set {what}= in the config)")
}

fn read_model(cli: Option<PathBuf>, cfg: &RunConfig) -> Result<ModelFile> {
    let path = resolve(cli, &cfg.model, "model")?;
    load_model(&path).with_context(|| format!("loading model {}", path.display()))
}

fn read_params(path: &Path) -> Result<ParamFile> {
    load_params(path).with_context(|| format!("loading parameters {}", path.display()))
}

fn read_image(path: &Path) -> Result<Image> {
    load_png(path).with_context(|| format!("loading image {}", path.display()))
}

fn render_opts(cfg: &RunConfig) -> RenderOptions {
    RenderOptions { background: cfg.background, ..RenderOptions::default() }
}

/// Lay a UV map out as an image: row y = u, column x = v.
fn uv_to_image(map: &UvMap, background: [f64; 3]) -> Image {
    let mut img = Image::zeros(map.v_size, map.u_size);
    for u in 0..map.u_size {
        for v in 0..map.v_size {
            let src = map.get(u, v);
            let px = (u * map.v_size + v) * 3;
            for c in 0..3 {
                img.data[px + c] = if map.masked(u, v) { src[c] } else { background[c] };
            }
        }
    }
    img
}

/// White-on-black rendering of a UV mask in the same layout as
/// [`uv_to_image`].
fn uv_mask_to_image(map: &UvMap) -> Image {
    let mut img = Image::zeros(map.v_size, map.u_size);
    for (t, &m) in map.mask.iter().enumerate() {
        if m {
            img.data[t * 3..t * 3 + 3].fill(1.0);
        }
    }
    img
}

/// Read a UV-layout image back into a map for a U x V context.
fn image_to_uv(img: &Image, u_size: usize, v_size: usize, mask: Vec<bool>) -> Result<UvMap> {
    if img.width != v_size || img.height != u_size {
        bail!(
            "texture image is {}x{} but the model's UV space needs {}x{} (V wide, U tall)",
            img.width,
            img.height,
            v_size,
            u_size
        );
    }
    Ok(UvMap::from_parts(u_size, v_size, img.data.clone(), mask)?)
}

/// Interpret a mask image: a texel or pixel is valid when its mean channel
/// exceeds one half.
fn image_to_flags(img: &Image) -> Vec<bool> {
    (0..img.width * img.height)
        .map(|p| (img.data[p * 3] + img.data[p * 3 + 1] + img.data[p * 3 + 2]) / 3.0 > 0.5)
        .collect()
}

fn load_uv_mask(
    path: &Option<PathBuf>,
    u_size: usize,
    v_size: usize,
) -> Result<Vec<bool>> {
    match path {
        None => Ok(vec![true; u_size * v_size]),
        Some(p) => {
            let img = read_image(p)?;
            if img.width != v_size || img.height != u_size {
                bail!(
                    "mask image {} is {}x{}, expected {}x{}",
                    p.display(),
                    img.width,
                    img.height,
                    v_size,
                    u_size
                );
            }
            Ok(image_to_flags(&img))
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_render(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    params: &Path,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = read_model(model, cfg)?;
    let p = read_params(params)?;
    let out = resolve(out, &cfg.out, "out")?;
    let shape = decode_shape(&model.shape_model, &p.f_s)?;
    let albedo = decode_albedo(&model.albedo_model, &p.f_a, model.u_size, model.v_size)?;
    let ctx = model.context();
    let (image, _) = render(
        &p.m,
        &p.light,
        &shape,
        &albedo,
        &model.topo,
        &ctx,
        cfg.width,
        cfg.height,
        &render_opts(cfg),
    )?;
    save_png(&out, &image.rgb).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_unwrap(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    params: &Path,
    image: &Path,
    out: Option<PathBuf>,
    mask_out: Option<PathBuf>,
) -> Result<()> {
    let model = read_model(model, cfg)?;
    let p = read_params(params)?;
    let out = resolve(out, &cfg.out, "out")?;
    let img = read_image(image)?;
    let shape = decode_shape(&model.shape_model, &p.f_s)?;
    let ctx = model.context();
    let tex = unwarp_to_uv(&img, &shape, &p.m, &model.topo, &ctx)?;
    save_png(&out, &uv_to_image(&tex, cfg.background))
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(mp) = mask_out {
        save_png(&mp, &uv_mask_to_image(&tex))
            .with_context(|| format!("writing {}", mp.display()))?;
    }
    Ok(())
}

fn cmd_fit(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    image: &Path,
    landmarks: Option<PathBuf>,
    mask: Option<PathBuf>,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<()> {
    let model = read_model(model, cfg)?;
    let out = resolve(out, &cfg.out, "out")?;
    let img = read_image(image)?;
    let lms: Option<LandmarkSet> = match &landmarks {
        Some(p) => Some(
            load_landmarks(p).with_context(|| format!("loading landmarks {}", p.display()))?,
        ),
        None => None,
    };
    let mask = match &mask {
        Some(p) => {
            let mi = read_image(p)?;
            if mi.width != img.width || mi.height != img.height {
                bail!(
                    "mask is {}x{} but the image is {}x{}",
                    mi.width,
                    mi.height,
                    img.width,
                    img.height
                );
            }
            // Mean channel brightness becomes the per-pixel data weight.
            let w: Vec<f64> = (0..mi.width * mi.height)
                .map(|p| (mi.data[p * 3] + mi.data[p * 3 + 1] + mi.data[p * 3 + 2]) / 3.0)
                .collect();
            OcclusionMask::new(mi.width, mi.height, w)?
        }
        None => OcclusionMask::new(img.width, img.height, vec![1.0; img.width * img.height])?,
    };
    let ctx = model.context();
    let prob = ImageFitProblem {
        input: &img,
        mask: &mask,
        landmarks: lms.as_ref(),
        feature_extractor: None,
        shape_dec: &model.shape_model,
        albedo_dec: &model.albedo_model,
        topo: &model.topo,
        ctx: &ctx,
        opts: render_opts(cfg),
    };
    // Generic frontal start: the landmark stage moves the pose from here.
    let init = FitInit {
        m: ProjectionParams {
            f: img.width.min(img.height) as f64 / 3.0,
            pitch: PI,
            yaw: 0.0,
            roll: 0.0,
            t2d: [img.width as f64 / 2.0, img.height as f64 / 2.0],
        },
        light: ShLighting::ambient([1.0; 3]),
        f_s: vec![0.0; model.shape_model.param_dim()],
        f_a: vec![0.0; model.albedo_model.param_dim()],
    };
    let fit = fit_image(&prob, &init, &cfg.fit)?;
    save_params(
        &out,
        &ParamFile {
            m: fit.m,
            light: fit.light,
            f_s: fit.f_s.clone(),
            f_a: fit.f_a.clone(),
        },
    )
    .with_context(|| format!("writing {}", out.display()))?;
    let text = fit.report_text();
    if let Some(rp) = report {
        write_text(&rp, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_fit_scan(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    mesh: &Path,
    ks: &[usize],
    out: Option<PathBuf>,
) -> Result<()> {
    let model = read_model(model, cfg)?;
    let (target, _, _) =
        load_obj(mesh).with_context(|| format!("loading mesh {}", mesh.display()))?;
    if target.len() != model.vertex_count() {
        bail!(
            "mesh has {} vertices but the model expects {} in model vertex order",
            target.len(),
            model.vertex_count()
        );
    }
    if ks.is_empty() {
        bail!("no truncations given (pass --ks like 2,4,8)");
    }
    let rows = if cfg.bbox_metric {
        // Renormalize by the target's bounding-box diagonal instead of the
        // inter-ocular distance.
        let norm = bbox_diagonal(&target.positions)?;
        let mut rows = Vec::with_capacity(ks.len());
        for &k in ks {
            let truncated = model.shape_model.truncated(k)?;
            let fit = fit_shape(&target, &truncated, &model.topo, None, &cfg.fit)?;
            let fitted = decode_shape(&truncated, &fit.f_s)?;
            rows.push((k, nme(&fitted.positions, &target.positions, norm)?));
        }
        rows
    } else {
        fit_shape_scan(&target, &model.shape_model, &model.topo, ks, &cfg.fit)?
    };
    let mut text = String::new();
    for (k, e) in &rows {
        text.push_str(&format!("k={k} nme={e}\n"));
    }
    match out {
        Some(p) => write_text(&p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_fit_texture(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    params: &Path,
    target: &Path,
    mask: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = read_model(model, cfg)?;
    let p = read_params(params)?;
    let out = resolve(out, &cfg.out, "out")?;
    let timg = read_image(target)?;
    let tmask = load_uv_mask(&mask, model.u_size, model.v_size)?;
    let tex = image_to_uv(&timg, model.u_size, model.v_size, tmask)?;
    let shape = decode_shape(&model.shape_model, &p.f_s)?;
    let rotated = rotate(&shape, &p.m);
    let ctx = model.context();
    let opts = render_opts(cfg);
    let normals = build_normal_map(&rotated, &model.topo, &ctx, opts.dilation_rounds)?;
    let fit = fit_albedo_lighting(&tex, &model.albedo_model, &normals, None, &cfg.fit)?;
    save_params(
        &out,
        &ParamFile { m: p.m, light: fit.light, f_s: p.f_s, f_a: fit.f_a.clone() },
    )
    .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "residual={} iterations={} termination={}",
        fit.residual,
        fit.trace.len().saturating_sub(1),
        fit.reason
    );
    Ok(())
}

fn cmd_relight(
    cfg: &RunConfig,
    model: Option<PathBuf>,
    params: &Path,
    light: &Path,
    texture: Option<PathBuf>,
    mask: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = read_model(model, cfg)?;
    let p = read_params(params)?;
    let new_light = read_params(light)?.light;
    let out = resolve(out, &cfg.out, "out")?;
    let shape = decode_shape(&model.shape_model, &p.f_s)?;
    let ctx = model.context();
    let opts = render_opts(cfg);

    let albedo;
    let tex;
    let source = match &texture {
        None => {
            albedo = decode_albedo(&model.albedo_model, &p.f_a, model.u_size, model.v_size)?;
            RelightSource::Albedo(&albedo)
        }
        Some(tp) => {
            let timg = read_image(tp)?;
            let tmask = load_uv_mask(&mask, model.u_size, model.v_size)?;
            tex = image_to_uv(&timg, model.u_size, model.v_size, tmask)?;
            RelightSource::Texture { texture: &tex, original_light: &p.light }
        }
    };
    let output = relight(
        &shape,
        source,
        &new_light,
        &p.m,
        &model.topo,
        &ctx,
        cfg.width,
        cfg.height,
        &opts,
    )?;
    save_png(&out, &output.image.rgb).with_context(|| format!("writing {}", out.display()))?;
    if texture.is_some() {
        println!("excluded_texels={}", output.excluded);
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let reports = gradcheck::run_all(seed);
    print!("{}", gradcheck::report_text(&reports));
    if !gradcheck::all_pass(&reports) {
        bail!("gradient checks failed");
    }
    println!("all gradient checks passed");
    Ok(())
}

fn cmd_synth(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating directory {}", dir.display()))?;
    let model = face_model();
    let scene = gt_scene();
    let ctx = model.context();
    let shape = model.shape(&scene.f_s)?;
    let albedo = model.albedo(&scene.f_a)?;

    let model_path = dir.join("model.bin");
    let scan_path = dir.join("scan.obj");
    let params_path = dir.join("gt.params");
    let lm_path = dir.join("landmarks.txt");
    let img_path = dir.join("target.png");

    // Ground-truth assets first, while the model still owns its pieces.
    let (image, _) = render(
        &scene.m,
        &scene.light,
        &shape,
        &albedo,
        &model.topo,
        &ctx,
        scene.width,
        scene.height,
        &RenderOptions::default(),
    )?;
    save_png(&img_path, &image.rgb)?;

    let projected = project(&shape, &scene.m);
    let points: Vec<[f64; 2]> = model
        .topo
        .landmarks
        .iter()
        .map(|&vi| projected.coords[vi])
        .collect();
    save_landmarks(&lm_path, &LandmarkSet::all_visible(points))?;

    save_obj(&scan_path, &shape, &model.topo.triangles, Some(&model.topo.uv_coords))?;
    save_params(
        &params_path,
        &ParamFile {
            m: scene.m,
            light: scene.light,
            f_s: scene.f_s.clone(),
            f_a: scene.f_a.clone(),
        },
    )?;
    save_model(&model_path, &ModelFile::from_synthetic(model))?;

    for p in [&model_path, &scan_path, &params_path, &lm_path, &img_path] {
        println!("{}", p.display());
    }
    Ok(())
}
