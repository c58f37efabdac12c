//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use orthosynth::baselines::{synthesize_3dgan, train_3dgan, Baseline3DConfig};
use orthosynth::gan::{build_generator, GeneratorConfig, StageTrainConfig};
use orthosynth::io::checkpoint::{decode_model, encode_model};
use orthosynth::io::montage::montage_bytes;
use orthosynth::io::ovol::{decode, encode};
use orthosynth::io::report::{canonical_json, write_report};
use orthosynth::metrics::*;
use orthosynth::nn::Tensor;
use orthosynth::phantom::{generate_phantom, generate_subjects, DatasetSpec, Split, TissueTable};
use orthosynth::pipeline::*;
use orthosynth::volume::{extract_slices, stack_slices, Dims, Orientation, Volume};
use rand::RngExt;

const SEEDS: [u64; 3] = [7, 8, 9];
const EPOCHS: [usize; 3] = [4, 2, 2];
const EPOCHS_3D: usize = 3;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(1);
    let mut mismatches = 0;
    for _ in 0..120 {
        let dims = Dims::new(r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let v = common::random_volume(&mut r, dims);
        for o in Orientation::ALL {
            let back = stack_slices(&extract_slices(&v, o), o).unwrap();
            let same = back.dims() == dims
                && back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            mismatches += !same as usize;
        }
    }
    let t = start.elapsed();
    check(
        mismatches == 0 && t < Duration::from_secs(1),
        format!("120 volumes x 3 orientations, {mismatches} mismatches, {:.3} s", t.as_secs_f64()),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, &str) = (0.0, "");
    for c in common::layer_cases() {
        let e = common::check_case(&c);
        if e > worst.0 || e.is_nan() {
            worst = (e, c.name);
        }
    }
    let full = common::full_generator_check(GeneratorConfig::synthesis(2).base_channels, 400);
    let t = start.elapsed();
    check(
        worst.0 < common::GRAD_TOL && full < common::GRAD_TOL && t < Duration::from_secs(120),
        format!(
            "worst layer {} {:.2e}, full generator {:.2e}, {:.1} s",
            worst.1,
            worst.0,
            full,
            t.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let z = Volume::zeros(Dims::new(1, 1, 100)).unwrap();
    let mut one = z.clone();
    one.data_mut()[0] = 1.0;
    let p20 = psnr(&z, &one, 1.0).unwrap();
    let cap = psnr(&one, &one, 1.0).unwrap();
    let stats = |mean: Vec<f64>, cov: nalgebra::DMatrix<f64>| GaussianStats {
        mean: nalgebra::DVector::from_vec(mean),
        covariance: cov,
        n: 2,
    };
    let eye = nalgebra::DMatrix::identity(4, 4);
    let a = stats(vec![0.0; 4], eye.clone());
    let b = stats(vec![1.0, 0.0, 0.0, 0.0], eye);
    let f_same = frechet_distance(&a, &a).unwrap();
    let f_shift = frechet_distance(&a, &b).unwrap();
    let f_var = frechet_distance(
        &stats(vec![0.0], nalgebra::DMatrix::from_element(1, 1, 4.0)),
        &stats(vec![0.0], nalgebra::DMatrix::from_element(1, 1, 1.0)),
    )
    .unwrap();
    let constant = Volume::filled(Dims::new(5, 6, 7), 0.4).unwrap();
    let alternating = Volume::from_fn(Dims::new(6, 5, 4), |z, _, _| (z % 2) as f32).unwrap();
    let di0 = discontinuity_index(&constant, Orientation::Axial).unwrap();
    let di1 = discontinuity_index(&alternating, Orientation::Axial).unwrap();
    check(
        (p20 - 20.0).abs() <= 1e-9
            && cap == 99.0
            && f_same <= 1e-6
            && (f_shift - 1.0).abs() <= 1e-8
            && (f_var - 1.0).abs() <= 1e-8
            && di0 == 0.0
            && di1 == 1.0,
        format!(
            "psnr {p20} / cap {cap}, frechet {f_same:.1e} / {f_shift} / {f_var}, di {di0} / {di1}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let cfg = PipelineConfig::default();
    let gcfg = GeneratorConfig { in_channels: 2, ..cfg.synthesis };
    let synthesis = StageModel {
        orientation: Orientation::Axial,
        generator: build_generator(&gcfg, 44).unwrap(),
        config: gcfg,
        seed: 44,
        epochs: 0,
    };
    let m = identity_refinement_pipeline(synthesis, &cfg).unwrap();
    let mut r = common::rng(4);
    let mut equal = 0;
    for i in 0..10 {
        let dims = Dims::new(8 * r.random_range(1..=3), 8 * r.random_range(1..=3), 8 * r.random_range(1..=3));
        let sources = BTreeMap::from([
            (Contrast::Pd, common::random_volume(&mut r, dims)),
            (Contrast::T2, common::random_volume(&mut r, dims)),
        ]);
        let s = SubjectVolumes::new(&format!("r{i}"), sources, None).unwrap();
        let (out, _) = run_pipeline(&m, &s).unwrap();
        let a = synthesize_stage1(m.g_axial().unwrap(), &s).unwrap();
        equal += out.data().iter().zip(a.data()).all(|(x, y)| x.to_bits() == y.to_bits()) as usize;
    }
    check(equal == 10, format!("{equal}/10 random subjects bitwise equal to stage A"))
}

/// Everything criterion 5 and 6 need from one seeded run.
#[derive(Clone)]
struct Experiment {
    seed: u64,
    stage_a_psnr: f64,
    constant_psnr: f64,
    full_psnr: f64,
    di_full: f64,
    di_2d: f64,
    reports: Vec<MetricReport>,
    montage: Option<Vec<u8>>,
    seconds: f64,
}

fn mean_psnr(refs: &[&Volume], syns: &[Volume]) -> f64 {
    refs.iter().zip(syns).map(|(r, s)| psnr(r, s, 1.0).unwrap()).sum::<f64>() / refs.len() as f64
}

fn run_experiment(seed: u64, with_3d: bool) -> Experiment {
    let start = Instant::now();
    let spec = DatasetSpec { master_seed: seed, ..DatasetSpec::default() };
    let data = generate_subjects(&spec, &TissueTable::default()).unwrap();
    let (train, val, test) = (data.volumes(Split::Train), data.volumes(Split::Val), data.volumes(Split::Test));
    assert_eq!((train.len(), val.len(), test.len()), (35, 5, 10));
    let cfg = PipelineConfig {
        master_seed: seed,
        epochs_per_stage: EPOCHS.to_vec(),
        ..PipelineConfig::default()
    };
    let (models, _) = train_pipeline(&train, &val, &cfg).unwrap();
    let runs: Vec<(Volume, Vec<Volume>)> = test.iter().map(|s| run_pipeline(&models, s).unwrap()).collect();
    // The cross-sectional baseline is the pipeline's stage A under the same seed and config.
    let stage_a: Vec<Volume> = runs.iter().map(|r| r.1[0].clone()).collect();
    let full: Vec<Volume> = runs.into_iter().map(|r| r.0).collect();
    let refs: Vec<&Volume> = test.iter().map(|s| s.target.as_ref().unwrap()).collect();
    let constant: Vec<Volume> = refs.iter().map(|r| Volume::filled(r.dims(), 0.5).unwrap()).collect();
    let fe = FeatureExtractor::new();
    let report = |syn: &[Volume], method: &str| {
        let syn: Vec<&Volume> = syn.iter().collect();
        let mut r = evaluate_volumes(&refs, &syn, &fe).unwrap().with_provenance(method, &spec.dataset_id(), seed);
        r.wall_seconds = start.elapsed().as_secs_f64();
        r
    };
    let proposed = report(&full, "proposed");
    let two_d = report(&stage_a, "2D-GAN");
    let mut reports = vec![proposed.clone(), two_d.clone()];
    let mut montage = None;
    if with_3d {
        let c3 = Baseline3DConfig {
            train: StageTrainConfig { epochs: EPOCHS_3D, batch_size: 1, seed, ..StageTrainConfig::default() },
            ..Baseline3DConfig::default()
        };
        let (g3, _) = train_3dgan(&train, &val, &c3).unwrap();
        let vol: Vec<Volume> = test.iter().map(|s| synthesize_3dgan(&g3, s).unwrap()).collect();
        reports.push(report(&vol, "3D-GAN"));
        montage = Some(
            montage_bytes(&[
                ("reference", refs[0]),
                ("2D-GAN", &stage_a[0]),
                ("3D-GAN", &vol[0]),
                ("proposed", &full[0]),
            ])
            .unwrap(),
        );
    }
    Experiment {
        seed,
        stage_a_psnr: two_d.psnr_mean,
        constant_psnr: mean_psnr(&refs, &constant),
        full_psnr: proposed.psnr_mean,
        di_full: proposed.di_delta.off_axis_mean(),
        di_2d: two_d.di_delta.off_axis_mean(),
        reports,
        montage,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn artifact_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&d).unwrap();
    d
}

/// `"X dB higher PSNR and Y% lower FID compared to <method>"`, either direction.
fn paper_phrasing(line: &str, method: &str) -> bool {
    let number = |s: &str| s.parse::<f64>().is_ok() && s.split('.').nth(1).is_some_and(|d| d.len() == 2);
    let w: Vec<&str> = line.split(' ').collect();
    w.len() == 11
        && number(w[0])
        && w[1] == "dB"
        && matches!(w[2], "higher" | "lower")
        && w[3] == "PSNR"
        && w[4] == "and"
        && w[5].strip_suffix('%').is_some_and(number)
        && matches!(w[6], "higher" | "lower")
        && w[7..10] == ["FID", "compared", "to"]
        && w[10] == method
}

fn report_compare(a: &MetricReport, b: &MetricReport) -> String {
    let dir = artifact_dir();
    let (pa, pb) = (dir.join(format!("{}.json", a.method)), dir.join(format!("{}.json", b.method)));
    write_report(a, &pa).unwrap();
    write_report(b, &pb).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_orthosynth"))
        .args(["report-compare", "--a", pa.to_str().unwrap(), "--b", pb.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap().trim_end().to_string()
}

fn criterion_5(first: &Experiment) -> Outcome {
    let mut runs = vec![];
    let mut lines = vec![];
    for &seed in &SEEDS[1..] {
        runs.push(run_experiment(seed, false));
    }
    runs.insert(0, first.clone());
    let mut passes = [0usize; 3];
    for e in &runs {
        let a = e.stage_a_psnr - e.constant_psnr >= 3.0;
        let b = e.full_psnr >= e.stage_a_psnr - 0.1;
        let c = e.di_full <= e.di_2d;
        passes[0] += a as usize;
        passes[1] += b as usize;
        passes[2] += c as usize;
        lines.push(format!(
            "    seed {}: stage A {:.2} dB vs constant {:.2} dB [{}], full {:.2} dB [{}], off-axis di_delta full {:.5} vs 2D-GAN {:.5} [{}], {:.0} s",
            e.seed,
            e.stage_a_psnr,
            e.constant_psnr,
            if a { "ok" } else { "fail" },
            e.full_psnr,
            if b { "ok" } else { "fail" },
            e.di_full,
            e.di_2d,
            if c { "ok" } else { "fail" },
            e.seconds
        ));
    }
    let per_seed_all = runs
        .iter()
        .filter(|e| {
            e.stage_a_psnr - e.constant_psnr >= 3.0 && e.full_psnr >= e.stage_a_psnr - 0.1 && e.di_full <= e.di_2d
        })
        .count();
    let proposed = &first.reports[0];
    let mut d_ok = true;
    for baseline in &first.reports[1..] {
        let line = report_compare(proposed, baseline);
        d_ok &= paper_phrasing(&line, &baseline.method);
        lines.push(format!("    report-compare: {line}"));
    }
    for l in &lines {
        println!("{l}");
    }
    check(
        per_seed_all >= 2 && d_ok,
        format!(
            "(a) {}/3 (b) {}/3 (c) {}/3 seeds, all of (a)-(c) on {per_seed_all}/3 seeds, (d) {}",
            passes[0],
            passes[1],
            passes[2],
            if d_ok { "ok" } else { "fail" }
        ),
    )
}

fn criterion_6(first: &Experiment) -> Outcome {
    let again = run_experiment(first.seed, true);
    let json = |e: &Experiment| e.reports.iter().map(|r| canonical_json(r).unwrap()).collect::<Vec<_>>();
    let same_reports = json(first) == json(&again);
    let same_montage = first.montage.is_some() && first.montage == again.montage;
    let dir = artifact_dir();
    if let Some(m) = &first.montage {
        std::fs::write(dir.join("fig1.pgm"), m).unwrap();
    }
    check(
        same_reports && same_montage,
        format!(
            "seed {}: {} reports identical {same_reports}, montage identical {same_montage}",
            first.seed,
            first.reports.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    let v = Volume::from_fn(Dims::new(2, 2, 2), |z, y, x| (z + y + x) as f32).unwrap();
    let good = encode(&v).unwrap();
    let mut cases: Vec<Vec<u8>> = vec![good.clone(); 4];
    cases[0][..4].copy_from_slice(b"XXXX");
    cases[1][4] = 9;
    cases[2][17] = 2;
    cases[3].truncate(good.len() - 4);
    let msgs: Vec<String> = cases.iter().map(|c| decode(c).unwrap_err().to_string()).collect();
    let distinct = (0..4).all(|i| (i + 1..4).all(|j| msgs[i] != msgs[j]));
    let expected = msgs[0].contains("bad magic")
        && msgs[1].contains("version")
        && msgs[2].contains("dtype")
        && msgs[3].contains("payload length");
    let g = build_generator(&GeneratorConfig::synthesis(2), 77).unwrap();
    let back = decode_model(&encode_model(&g).unwrap()).unwrap();
    let mut r = common::rng(7);
    let probe: Vec<Tensor<f32>> = (0..4)
        .map(|_| Tensor::new(vec![2, 32, 32], (0..2048).map(|_| r.random::<f32>()).collect()).unwrap())
        .collect();
    let bitwise = probe.iter().all(|x| {
        let (a, b) = (g.forward(x).unwrap(), back.forward(x).unwrap());
        a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });
    check(
        distinct && expected && bitwise,
        format!("rejections {msgs:?}, checkpoint forward bitwise {bitwise}"),
    )
}

fn criterion_8() -> Outcome {
    let table = TissueTable::default();
    let entries = common::blend_table(&table);
    let mut worst = f64::INFINITY;
    for seed in 0..4 {
        let s = generate_phantom("oracle", 100 + seed, 32, &table, 0.0).unwrap();
        let p = psnr(s.volumes.target.as_ref().unwrap(), &common::oracle_predict(&s, &entries), 1.0).unwrap();
        worst = worst.min(p);
    }
    check(worst >= 30.0, format!("nearest blurred-table entry predictor, worst of 4 phantoms {worst:.2} dB"))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!(
        "criterion {id} [{tag}] {name}: {detail} ({:.1} s)",
        start.elapsed().as_secs_f64()
    );
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= run(1, "slicing round trip", criterion_1);
    ok &= run(2, "gradient fidelity", criterion_2);
    ok &= run(3, "metric oracles", criterion_3);
    ok &= run(4, "identity refinement", criterion_4);
    let first = run_experiment(SEEDS[0], true);
    ok &= run(5, "phantom end-to-end", || criterion_5(&first));
    ok &= run(6, "determinism", || criterion_6(&first));
    ok &= run(7, "format robustness", criterion_7);
    ok &= run(8, "learnability oracle", criterion_8);
    if !ok {
        std::process::exit(1);
    }
}
