use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use dehaze_core::checkpoint::load_generator;
use dehaze_core::data::{self, read_depth, read_image, write_image, SceneSource};
use dehaze_core::generator::recursive_dehaze;
use dehaze_core::gradcheck::run_suite;
use dehaze_core::guided::{halo_suppress, GuidedFilterParams};
use dehaze_core::haze::{synthesize_haze, transmission_from_depth, AtmosphericLight, DepthMap};
use dehaze_core::metrics::{psnr, ssim, SsimParams};
use dehaze_core::train::{self as training, TrainConfig};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{DehazeArgs, EvaluateArgs, FilterArgs, MakeDatasetArgs, PostprocessArgs, SynthesizeArgs, TrainArgs};

fn filter_params(f: &FilterArgs) -> Result<GuidedFilterParams> {
    Ok(GuidedFilterParams::new(f.radius, f.epsilon)?)
}

pub fn synthesize(a: SynthesizeArgs) -> Result<ExitCode> {
    let clean = read_image(&a.clean)?;
    let (h, w) = clean.dims();
    let depth = match (&a.depth, a.constant_depth) {
        (_, Some(d)) => DepthMap::filled(h, w, d)?,
        (Some(path), None) => read_depth(path, a.depth_scale)?,
        (None, None) => bail!("either --depth or --constant-depth is required"),
    };
    let t = transmission_from_depth(&depth, a.beta)?;
    let hazy = synthesize_haze(&clean, &t, &AtmosphericLight::new(a.airlight)?)?;
    write_image(&hazy, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceSpec {
    name: String,
    clean: PathBuf,
    depth: PathBuf,
}

fn load_sources(list: &Path, depth_scale: f64) -> Result<Vec<SceneSource>> {
    let text = std::fs::read_to_string(list).with_context(|| format!("reading {}", list.display()))?;
    let specs: Vec<SourceSpec> =
        serde_json::from_str(&text).with_context(|| format!("parsing source list {}", list.display()))?;
    let base = list.parent().unwrap_or(Path::new("."));
    specs
        .into_iter()
        .map(|s| {
            Ok(SceneSource {
                clean: read_image(&base.join(&s.clean))?,
                depth: read_depth(&base.join(&s.depth), depth_scale)?,
                name: s.name,
            })
        })
        .collect()
}

pub fn make_dataset(a: MakeDatasetArgs) -> Result<ExitCode> {
    let sources = match (a.synthetic, &a.sources) {
        (Some(n), _) => data::toy_sources(n, a.size, a.seed)?,
        (None, Some(list)) => load_sources(list, a.depth_scale)?,
        (None, None) => bail!("either --synthetic or --sources is required"),
    };
    let manifest = data::make_dataset(&sources, &a.out, a.seed, a.depth_scale)?;
    println!(
        "wrote {} entries to {}",
        manifest.entries.len(),
        a.out.join(data::DatasetManifest::FILE_NAME).display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut config = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let (outcome, artifacts) = training::train(&config, &a.manifest, &a.out)?;
    for r in &outcome.log.records {
        println!(
            "epoch {:>3}  lr {:.0e}  g_total {:.5}  mse {:.5}  feat {:.5}  adv {:.4}  d {:.4}",
            r.epoch, r.lr, r.g_total, r.g_mse, r.g_feat, r.g_adv, r.d_loss
        );
    }
    println!("generator     {}", artifacts.generator.display());
    println!("discriminator {}", artifacts.discriminator.display());
    println!("log           {}", artifacts.log.display());
    Ok(ExitCode::SUCCESS)
}

pub fn dehaze(a: DehazeArgs) -> Result<ExitCode> {
    let params = filter_params(&a.filter)?;
    let (net, _) = load_generator(&a.checkpoint).context("loading generator checkpoint")?;
    let hazy = read_image(&a.input)?;
    let (dehazed, norms) = recursive_dehaze(&net, &hazy, a.recursive as usize)?;
    if a.recursive > 1 {
        for (i, n) in norms.iter().enumerate() {
            println!("pass {} residual norm {n:.6}", i + 1);
        }
    }
    let out = if a.no_postprocess {
        dehazed
    } else {
        halo_suppress(&hazy, &dehazed, &params)?
    };
    write_image(&out, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(ExitCode::SUCCESS)
}

pub fn postprocess(a: PostprocessArgs) -> Result<ExitCode> {
    let params = filter_params(&a.filter)?;
    let hazy = read_image(&a.hazy)?;
    let dehazed = read_image(&a.dehazed)?;
    write_image(&halo_suppress(&hazy, &dehazed, &params)?, &a.output)?;
    println!("wrote {}", a.output.display());
    Ok(ExitCode::SUCCESS)
}

/// JSON has no infinity, so identical images report PSNR as the string "inf".
fn psnr_value(v: f64) -> Value {
    if v.is_infinite() {
        json!("inf")
    } else {
        json!(v)
    }
}

fn image_pairs(reference: &Path, test: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if !reference.is_dir() {
        let name = reference
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        return Ok(vec![(name, reference.to_path_buf(), test.to_path_buf())]);
    }
    if !test.is_dir() {
        bail!("{} is a directory but {} is not", reference.display(), test.display());
    }
    let mut names: Vec<String> = std::fs::read_dir(reference)
        .with_context(|| format!("listing {}", reference.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no PNG files in {}", reference.display());
    }
    Ok(names
        .into_iter()
        .map(|n| (n.clone(), reference.join(&n), test.join(&n)))
        .collect())
}

pub fn evaluate(a: EvaluateArgs) -> Result<ExitCode> {
    let params = SsimParams::default();
    let mut rows = Vec::new();
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    let pairs = image_pairs(&a.reference, &a.test)?;
    for (name, rp, tp) in &pairs {
        let r = read_image(rp)?;
        let t = read_image(tp)?;
        let p = psnr(&r, &t, 1.0)?;
        let s = ssim(&r, &t, &params)?;
        psnr_sum += p;
        ssim_sum += s;
        rows.push(json!({ "name": name, "psnr": psnr_value(p), "ssim": s }));
    }
    let n = pairs.len() as f64;
    let report = json!({
        "images": rows,
        "mean_psnr": psnr_value(psnr_sum / n),
        "mean_ssim": ssim_sum / n,
    });
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &a.report {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{text}");
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck() -> Result<ExitCode> {
    let reports = run_suite()?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<40} {:>6} entries  max rel err {:.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", reports.len());
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(ExitCode::SUCCESS)
}
