use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use fxnet::accel::Simulator;
use fxnet::distill::{evaluate, train_student, train_teacher, DistillConfig, History};
use fxnet::metrics::EvalReport;
use fxnet::nn::checkpoint::{load_student, load_teacher, save_student, save_teacher};
use fxnet::nn::model::predict;
use fxnet::nn::{StudentNet, TeacherConfig, TeacherNet, NUM_CLASSES};
use fxnet::quantize::{
    export_model, export_rom, import_model, quantize_student, quantized_forward, quantized_predict, RomImage,
};
use fxnet::signal::io::{load_csv, read_spectra, write_spectra};
use fxnet::signal::{dataset_from_records, synthetic_records, SampleSet, Snr, Spectrum, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Source};
use crate::manifest::Manifest;

/// Which student an artifact belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dkd,
    NoKd,
}

impl Variant {
    pub fn from_flag(no_kd: bool) -> Self {
        if no_kd {
            Variant::NoKd
        } else {
            Variant::Dkd
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dkd => "dkd",
            Variant::NoKd => "nokd",
        }
    }
}

/// Stable per-purpose seed derived from the run seed.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{purpose}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn rng(cfg: &RunConfig, purpose: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, purpose))
}

pub struct Paths<'a> {
    out: &'a Path,
}

impl<'a> Paths<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Self { out: &cfg.out }
    }

    pub fn data(&self, snr: Snr) -> PathBuf {
        self.out.join(format!("data_{}.bpgs", snr.tag()))
    }

    pub fn teacher(&self, snr: Snr) -> PathBuf {
        self.out.join(format!("teacher_{}.bpgf", snr.tag()))
    }

    pub fn student(&self, v: Variant, snr: Snr) -> PathBuf {
        self.out.join(format!("student_{}_{}.bpgf", v.name(), snr.tag()))
    }

    pub fn quantized(&self, v: Variant, snr: Snr) -> PathBuf {
        self.out.join(format!("student_{}_{}.bpgq", v.name(), snr.tag()))
    }

    pub fn rom(&self, v: Variant, snr: Snr) -> PathBuf {
        self.out.join(format!("rom_{}_{}", v.name(), snr.tag()))
    }

    pub fn file(&self, name: String) -> PathBuf {
        self.out.join(name)
    }
}

fn need(path: &Path, hint: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {} (run `fxnet {hint}` first)", path.display());
    }
    Ok(())
}

fn load_data(p: &Paths, snr: Snr, m: &mut Manifest) -> Result<SampleSet> {
    let path = p.data(snr);
    need(&path, "gen-data")?;
    m.input(&path)?;
    read_spectra(&path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str, m: &mut Manifest) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    m.output(path)
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new("gen-data", cfg);
    let records = match &cfg.source {
        Source::Synthetic => synthetic_records(&mut rng(cfg, "records"))?,
        Source::Csv(path) => {
            m.input(path)?;
            load_csv(path, NUM_CLASSES).with_context(|| format!("loading {}", path.display()))?
        }
    };
    for &snr in &cfg.snrs {
        let mut r = rng(cfg, &format!("data/{}", snr.tag()));
        let set = dataset_from_records(&records, cfg.per_class, cfg.hop, snr, &mut r)?;
        let path = p.data(snr);
        write_spectra(&path, &set)?;
        m.output(&path)?;
        eprintln!(
            "{}: {} train / {} val / {} test spectra",
            path.display(),
            set.count(Split::Train),
            set.count(Split::Val),
            set.count(Split::Test)
        );
    }
    m.write()?;
    Ok(())
}

pub fn train_teacher_cmd(cfg: &RunConfig) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new("train-teacher", cfg);
    for &snr in &cfg.snrs {
        let data = load_data(&p, snr, &mut m)?;
        let tag = snr.tag();
        let net = TeacherNet::new(&TeacherConfig::default(), &mut rng(cfg, &format!("teacher-init/{tag}")))?;
        let (net, hist) = train_teacher(net, &data, &cfg.teacher(), derive_seed(cfg.seed, &format!("teacher-train/{tag}")))?;
        let path = p.teacher(snr);
        save_teacher(&path, &net)?;
        m.output(&path)?;
        write(&p.file(format!("teacher_{tag}_history.csv")), &hist.to_csv(), &mut m)?;
        let test = evaluate(&net, &data.subset(Split::Test))?;
        eprintln!("snr {snr}: teacher val F1 {:.4}, test F1 {:.4}", hist.best_val_f1(), test.f1);
    }
    m.write()?;
    Ok(())
}

/// Same initial weights and batch order for both variants, so the two
/// students differ only in the loss.
fn fit_student(
    cfg: &RunConfig,
    teacher: Option<&TeacherNet>,
    data: &SampleSet,
    snr: Snr,
    dc: &DistillConfig,
) -> Result<(StudentNet, History)> {
    let tag = snr.tag();
    let init = StudentNet::new(&mut rng(cfg, &format!("student-init/{tag}")));
    Ok(train_student(teacher, init, data, dc, derive_seed(cfg.seed, &format!("student-train/{tag}")))?)
}

pub fn distill(cfg: &RunConfig, v: Variant) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new(&format!("distill-{}", v.name()), cfg);
    for &snr in &cfg.snrs {
        let data = load_data(&p, snr, &mut m)?;
        let teacher = match v {
            Variant::Dkd => {
                let path = p.teacher(snr);
                need(&path, "train-teacher")?;
                m.input(&path)?;
                Some(load_teacher(&path)?)
            }
            Variant::NoKd => None,
        };
        let tag = snr.tag();
        let (net, hist) = fit_student(cfg, teacher.as_ref(), &data, snr, &cfg.student)?;
        let path = p.student(v, snr);
        save_student(&path, &net)?;
        m.output(&path)?;
        write(&p.file(format!("student_{}_{tag}_history.csv", v.name())), &hist.to_csv(), &mut m)?;
        let test = evaluate(&net, &data.subset(Split::Test))?;
        eprintln!("snr {snr}: {} student val F1 {:.4}, test F1 {:.4}", v.name(), hist.best_val_f1(), test.f1);
    }
    m.write()?;
    Ok(())
}

fn load_student_for(p: &Paths, v: Variant, snr: Snr, m: &mut Manifest) -> Result<StudentNet> {
    let path = p.student(v, snr);
    let hint = match v {
        Variant::Dkd => "distill",
        Variant::NoKd => "distill --no-kd",
    };
    need(&path, hint)?;
    m.input(&path)?;
    Ok(load_student(&path)?)
}

fn load_quantized(p: &Paths, v: Variant, snr: Snr, m: &mut Manifest) -> Result<fxnet::quantize::QuantizedModel> {
    let path = p.quantized(v, snr);
    need(&path, if v == Variant::Dkd { "quantize" } else { "quantize --no-kd" })?;
    m.input(&path)?;
    Ok(import_model(&path)?)
}

/// The first `n` training spectra.
fn calibration_set(data: &SampleSet, n: usize) -> Vec<&Spectrum> {
    let train = data.subset(Split::Train);
    train[..n.min(train.len())].to_vec()
}

pub fn quantize_cmd(cfg: &RunConfig, v: Variant) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new(&format!("quantize-{}", v.name()), cfg);
    for &snr in &cfg.snrs {
        let data = load_data(&p, snr, &mut m)?;
        let net = load_student_for(&p, v, snr, &mut m)?;
        let qm = quantize_student(&net, &calibration_set(&data, cfg.calibration), cfg.calib)?;
        let path = p.quantized(v, snr);
        export_model(&qm, &path)?;
        m.output(&path)?;
        eprintln!("snr {snr}: formats {}", qm.formats);
    }
    m.write()?;
    Ok(())
}

pub fn export_rom_cmd(cfg: &RunConfig, v: Variant) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new(&format!("export-rom-{}", v.name()), cfg);
    for &snr in &cfg.snrs {
        let qm = load_quantized(&p, v, snr, &mut m)?;
        let dir = p.rom(v, snr);
        export_rom(&qm, &dir)?;
        m.output(&dir)?;
    }
    m.write()?;
    Ok(())
}

pub fn simulate(cfg: &RunConfig, v: Variant) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new(&format!("simulate-{}", v.name()), cfg);
    for &snr in &cfg.snrs {
        let data = load_data(&p, snr, &mut m)?;
        let qm = load_quantized(&p, v, snr, &mut m)?;
        let mut sim = Simulator::new(&qm, cfg.sim);
        let rom_dir = p.rom(v, snr);
        if rom_dir.exists() {
            m.input(&rom_dir)?;
            sim.rom = RomImage::read_hex(&rom_dir)?;
        }
        let test = data.subset(Split::Test);
        let (mut truth, mut pred, mut mismatches) = (Vec::new(), Vec::new(), 0usize);
        let mut report = None;
        for s in &test {
            let out = sim.run(s)?;
            let (logits, class) = quantized_forward(&qm, s)?;
            if logits != out.logits || class != out.class {
                mismatches += 1;
            }
            truth.push(s.label);
            pred.push(out.class);
            report = Some(out.report);
        }
        let tag = format!("{}_{}", v.name(), snr.tag());
        let eval = EvalReport::from_predictions(NUM_CLASSES, &truth, &pred)?;
        write(&p.file(format!("sim_{tag}.csv")), &eval.to_csv(), &mut m)?;
        let mut kv = report.context("empty test split")?.to_kv();
        let _ = writeln!(kv, "samples={}", test.len());
        let _ = writeln!(kv, "mismatches={mismatches}");
        write(&p.file(format!("cycles_{tag}.txt")), &kv, &mut m)?;
        if mismatches > 0 {
            bail!("simulator disagrees with the reference pass on {mismatches} inputs");
        }
        eprintln!("snr {snr}: simulator F1 {:.4}, {} bit-exact", eval.f1, test.len());
    }
    m.write()?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, v: Variant) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new(&format!("eval-{}", v.name()), cfg);
    let mut drop = String::from("snr,float_f1,quant_f1,drop_points\n");
    for &snr in &cfg.snrs {
        let data = load_data(&p, snr, &mut m)?;
        let net = load_student_for(&p, v, snr, &mut m)?;
        let qm = load_quantized(&p, v, snr, &mut m)?;
        let test = data.subset(Split::Test);
        let truth: Vec<usize> = test.iter().map(|s| s.label).collect();
        let float = evaluate(&net, &test)?;
        let quant = EvalReport::from_predictions(NUM_CLASSES, &truth, &quantized_predict(&qm, &test)?)?;
        let tag = format!("{}_{}", v.name(), snr.tag());
        write(&p.file(format!("eval_{tag}_float.csv")), &float.to_csv(), &mut m)?;
        write(&p.file(format!("eval_{tag}_quant.csv")), &quant.to_csv(), &mut m)?;
        let points = 100.0 * (float.f1 - quant.f1);
        let _ = writeln!(drop, "{snr},{:.6},{:.6},{points:.4}", float.f1, quant.f1);
        eprintln!("snr {snr}: float F1 {:.4}, quantized F1 {:.4}, drop {points:.2} points", float.f1, quant.f1);
    }
    write(&p.file(format!("drop_{}.csv", v.name())), &drop, &mut m)?;
    m.write()?;
    Ok(())
}

pub fn bench(cfg: &RunConfig, v: Variant) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new(&format!("bench-{}", v.name()), cfg);
    let mut csv = String::from(
        "snr,samples,host_float_us,host_quant_us,sim_cycles,sim_us,float_to_sim_ratio,power\n",
    );
    for &snr in &cfg.snrs {
        let data = load_data(&p, snr, &mut m)?;
        let net = load_student_for(&p, v, snr, &mut m)?;
        let qm = load_quantized(&p, v, snr, &mut m)?;
        let test = data.subset(Split::Test);
        let batch = &test[..test.len().min(1000)];
        if batch.is_empty() {
            bail!("empty test split");
        }
        let n = batch.len() as f64;
        let t = Instant::now();
        predict(&net, batch)?;
        let float_us = t.elapsed().as_secs_f64() * 1e6 / n;
        let t = Instant::now();
        quantized_predict(&qm, batch)?;
        let quant_us = t.elapsed().as_secs_f64() * 1e6 / n;
        let report = Simulator::new(&qm, cfg.sim).run(batch[0])?.report;
        let _ = writeln!(
            csv,
            "{snr},{},{float_us:.3},{quant_us:.3},{},{:.4},{:.3},not_modeled",
            batch.len(),
            report.total(),
            report.latency_us(),
            float_us / report.latency_us()
        );
    }
    write(&p.file(format!("bench_{}.csv", v.name())), &csv, &mut m)?;
    print!("{csv}");
    m.write()?;
    Ok(())
}

/// Explicit value lists for the grid; an empty list keeps the config value.
#[derive(Debug, Clone, Default)]
pub struct SweepGrid {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
}

fn or_default<T: Copy>(v: &[T], d: T) -> Vec<T> {
    if v.is_empty() {
        vec![d]
    } else {
        v.to_vec()
    }
}

pub fn sweep(cfg: &RunConfig, v: Variant, grid: &SweepGrid) -> Result<()> {
    let p = Paths::new(cfg);
    let mut m = Manifest::new(&format!("sweep-{}", v.name()), cfg);
    let base = cfg.student;
    for &snr in &cfg.snrs {
        let data = load_data(&p, snr, &mut m)?;
        let teacher = match v {
            Variant::Dkd => {
                let path = p.teacher(snr);
                need(&path, "train-teacher")?;
                m.input(&path)?;
                Some(load_teacher(&path)?)
            }
            Variant::NoKd => None,
        };
        let mut csv = String::from("lr,batch_size,temperature,alpha,val_f1,test_f1\n");
        let mut best: Option<(f64, String)> = None;
        for &lr in &or_default(&grid.lrs, base.lr) {
            for &batch_size in &or_default(&grid.batch_sizes, base.batch_size) {
                for &temperature in &or_default(&grid.temperatures, base.temperature) {
                    for &alpha in &or_default(&grid.alphas, base.alpha) {
                        let dc = DistillConfig {
                            lr,
                            batch_size,
                            temperature,
                            alpha,
                            ..base
                        };
                        dc.validate()?;
                        let (net, _) = fit_student(cfg, teacher.as_ref(), &data, snr, &dc)?;
                        let val = evaluate(&net, &data.subset(Split::Val))?.f1;
                        let test = evaluate(&net, &data.subset(Split::Test))?.f1;
                        let row = format!("{lr},{batch_size},{temperature},{alpha},{val:.6},{test:.6}");
                        eprintln!("snr {snr}: {row}");
                        let _ = writeln!(csv, "{row}");
                        if best.as_ref().is_none_or(|(b, _)| val > *b) {
                            best = Some((val, row));
                        }
                    }
                }
            }
        }
        write(&p.file(format!("sweep_{}_{}.csv", v.name(), snr.tag())), &csv, &mut m)?;
        if let Some((_, row)) = best {
            eprintln!("snr {snr}: best on validation: {row}");
        }
    }
    m.write()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(3, "a"), derive_seed(3, "a"));
        assert_ne!(derive_seed(3, "a"), derive_seed(3, "b"));
        assert_ne!(derive_seed(3, "a"), derive_seed(4, "a"));
    }

    #[test]
    fn artifact_names() {
        let cfg = RunConfig {
            out: "o".into(),
            ..Default::default()
        };
        let p = Paths::new(&cfg);
        assert_eq!(p.data(Snr::Db(-2.0)), Path::new("o/data_m2db.bpgs"));
        assert_eq!(p.quantized(Variant::NoKd, Snr::Clean), Path::new("o/student_nokd_clean.bpgq"));
    }
}
