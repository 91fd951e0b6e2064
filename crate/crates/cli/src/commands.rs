use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mobilex_core::checkpoint::Checkpoint;
use mobilex_core::data::sample::{encode_depth, save_depth_png, save_rgb_png};
use mobilex_core::data::{Batch, Manifest, ManifestEntry, Recipe, SampleSource};
use mobilex_core::engine::{self, TrainOptions, TrainState, LAST_CHECKPOINT, METRICS_LOG, TRAIN_LOG};
use mobilex_core::metrics::CSV_HEADER;
use mobilex_core::model::{load_pretrained_backbone, MobileXNet};
use mobilex_core::tensor::{parallel, Tensor};

use crate::error::{CliError, Result};
use crate::pareto;
use crate::settings::Settings;

const DEFAULT_HW: (usize, usize) = (228, 304);

pub fn train(s: &Settings) -> Result<()> {
    parallel::init_from_env();
    let manifest = Manifest::load(s.require::<PathBuf>("manifest")?)?;
    let validation = s.path("val_manifest")?.map(Manifest::load).transpose()?;
    let cfg = s.train_config()?;
    let out = s.path("out")?.unwrap_or_else(|| PathBuf::from("run"));

    let (mut model, mut state) = match s.path("checkpoint")? {
        Some(resume) => {
            let (model, state) = engine::load_training(&resume)?;
            println!("resuming {} after epoch {}", resume.display(), state.epoch);
            (model, state)
        }
        None => {
            let first = manifest.load_sample(0)?;
            let arch = s.architecture((first.height, first.width))?;
            let mut model = MobileXNet::new(arch, s.get_or("seed", 0)?)?;
            if let Some(p) = s.path("pretrained")? {
                load_pretrained_backbone(&mut model, &Checkpoint::load(p)?)?;
            }
            (model, TrainState::default())
        }
    };
    println!(
        "training {} ({} parameters) on {} samples for {} epochs",
        model.config.variant,
        model.parameter_count(),
        manifest.len(),
        cfg.epochs
    );
    let progress = |r: &engine::EpochRecord| {
        let mut line = format!("epoch {:>3}  loss {:.6}", r.epoch, r.mean_loss);
        if let Some(t) = &r.train {
            line += &format!("  train rmse {:.4} d1 {:.4}", t.rmse, t.delta1);
        }
        if let Some(v) = &r.validation {
            line += &format!("  val rmse {:.4} d1 {:.4}", v.rmse, v.delta1);
        }
        println!("{line}");
    };
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        validation: validation.as_ref().map(|v| v as &dyn SampleSource),
        eval_cap: s.cap()?,
        stop_after: None,
        progress: Some(&progress),
    };
    engine::train_with(&mut model, &manifest, &cfg, &mut state, &opts)?;
    println!(
        "wrote {}, {} and {}",
        out.join(LAST_CHECKPOINT).display(),
        out.join(TRAIN_LOG).display(),
        out.join(METRICS_LOG).display()
    );
    Ok(())
}

pub fn eval(s: &Settings, label: &str) -> Result<()> {
    parallel::init_from_env();
    let (model, _) = engine::load_model(s.require::<PathBuf>("checkpoint")?)?;
    let manifest = Manifest::load(s.require::<PathBuf>("manifest")?)?;
    let report = engine::evaluate_with(&model, &manifest, s.accumulator()?, s.get_or("batch_size", 8)?)?;
    let row = report.csv_row(label);
    println!("{CSV_HEADER}\n{row}");
    if let Some(path) = s.path("out")? {
        append_row(&path, CSV_HEADER, &row)?;
    }
    Ok(())
}

fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    writeln!(f, "{row}")?;
    Ok(())
}

/// Writes `NNNNN_depth.png` (16-bit, the entry's divisor), the preprocessed
/// `NNNNN_rgb.png`, and a manifest pairing them.
pub fn predict(s: &Settings) -> Result<()> {
    parallel::init_from_env();
    let (model, _) = engine::load_model(s.require::<PathBuf>("checkpoint")?)?;
    let manifest = Manifest::load(s.require::<PathBuf>("manifest")?)?;
    let out = s.require::<PathBuf>("out")?;
    std::fs::create_dir_all(&out)?;
    let mut written = Manifest {
        recipe: Recipe::None,
        entries: Vec::new(),
    };
    for (i, entry) in manifest.entries.iter().enumerate() {
        let sample = manifest.load_sample(i)?;
        let batch = Batch::from_samples(std::slice::from_ref(&sample), vec![i])?;
        let pred = model.predict(&batch.rgb)?;
        let raw = encode_depth(pred.data(), None, entry.divisor);
        let (rgb, depth) = (format!("{i:05}_rgb.png"), format!("{i:05}_depth.png"));
        save_depth_png(&out.join(&depth), sample.height, sample.width, raw)?;
        save_rgb_png(&out.join(&rgb), sample.height, sample.width, sample.rgb)?;
        written.entries.push(ManifestEntry {
            rgb: rgb.into(),
            depth: depth.into(),
            divisor: entry.divisor,
        });
    }
    std::fs::write(out.join("predictions.tsv"), written.to_text())?;
    println!("wrote {} depth maps to {}", written.entries.len(), out.display());
    Ok(())
}

pub fn inspect(s: &Settings) -> Result<()> {
    let arch = s.architecture(DEFAULT_HW)?;
    let (h, w) = (arch.input_h, arch.input_w);
    let model = MobileXNet::<f32>::build(arch)?;
    let report = model.count(h, w);
    println!("{} variant at {h}x{w}", model.config.variant);
    println!("{:<28} {:<10} {:>12} {:>16}  output", "layer", "kind", "params", "macs");
    for l in &report.layers {
        println!(
            "{:<28} {:<10} {:>12} {:>16}  {}x{}x{}",
            l.name, l.kind, l.params, l.macs, l.output[0], l.output[1], l.output[2]
        );
    }
    println!(
        "total parameters {} ({:.2} M), MACs {} ({:.2} G)",
        report.parameters,
        report.parameters as f64 / 1e6,
        report.macs,
        report.macs as f64 / 1e9
    );
    if let Some(path) = s.path("out")? {
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.into()))?;
        let io = |e: csv::Error| CliError::Io(e.into());
        w.write_record(["layer", "kind", "params", "macs", "out_c", "out_h", "out_w"])
            .map_err(io)?;
        for l in &report.layers {
            let [c, oh, ow] = l.output;
            w.write_record([
                l.name.clone(),
                l.kind.to_string(),
                l.params.to_string(),
                l.macs.to_string(),
                c.to_string(),
                oh.to_string(),
                ow.to_string(),
            ])
            .map_err(io)?;
        }
        w.write_record([
            "total",
            "",
            &report.parameters.to_string(),
            &report.macs.to_string(),
            "",
            "",
            "",
        ])
        .map_err(io)?;
        w.flush()?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyStats {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles over non-empty `samples`.
    pub fn new(samples: &[f64]) -> Self {
        let mut v = samples.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let rank = |q: f64| v[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            mean: v.iter().sum::<f64>() / n as f64,
            median: if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            },
            p95: rank(0.95),
            min: v[0],
            max: v[n - 1],
        }
    }
}

pub fn default_device() -> String {
    format!("host-{}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn bench(s: &Settings, iters: usize, warmup: usize, device: &str) -> Result<()> {
    if iters < 1 {
        return Err(CliError::config("iters must be at least 1"));
    }
    let threads = parallel::init_from_env_or(Some(1));
    let model = match s.path("checkpoint")? {
        Some(p) => engine::load_model(p)?.0,
        None => MobileXNet::new(s.architecture(DEFAULT_HW)?, s.get_or("seed", 0)?)?,
    };
    let h = s.get_or("height", model.config.input_h)?;
    let w = s.get_or("width", model.config.input_w)?;
    let macs = model.count(h, w).macs;
    let frame = Tensor::from_vec([1, 3, h, w], vec![0.5f32; 3 * h * w]).map_err(mobilex_core::Error::from)?;
    for _ in 0..warmup {
        model.predict(&frame)?;
    }
    let samples: Vec<f64> = (0..iters)
        .map(|_| {
            let t = Instant::now();
            model.predict(&frame).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_, _>>()?;
    let st = LatencyStats::new(&samples);
    println!("device {device}");
    println!("threads {threads}");
    println!("variant {}", model.config.variant);
    println!("input 1x3x{h}x{w}");
    println!("macs {macs}");
    println!("iters {} (warmup {warmup})", samples.len());
    println!(
        "latency_ms mean {:.3} median {:.3} p95 {:.3} min {:.3} max {:.3}",
        st.mean, st.median, st.p95, st.min, st.max
    );
    if let Some(path) = s.path("out")? {
        append_row(
            &path,
            "device,variant,height,width,threads,iters,warmup,macs,mean_ms,median_ms,p95_ms,min_ms,max_ms",
            &format!(
                "{device},{},{h},{w},{threads},{iters},{warmup},{macs},{},{},{},{},{}",
                model.config.variant, st.mean, st.median, st.p95, st.min, st.max
            ),
        )?;
    }
    Ok(())
}

pub fn pareto(input: &Path, out: Option<&Path>, svg: Option<&Path>) -> Result<()> {
    let points = pareto::read_points_file(input)?;
    let (front, dominated) = mobilex_core::pareto::pareto_front(&points)?;
    println!("front ({} of {}):", front.len(), points.len());
    for p in &front {
        println!("  {:<32} error {:<10} time {} ms", p.label, p.error, p.time_ms);
    }
    for p in &dominated {
        println!("  dominated: {} (error {}, time {} ms)", p.label, p.error, p.time_ms);
    }
    if let Some(path) = out {
        pareto::write_points(std::fs::File::create(path)?, &front)?;
    }
    if let Some(path) = svg {
        std::fs::write(path, pareto::svg(&front, &dominated))?;
    }
    Ok(())
}
