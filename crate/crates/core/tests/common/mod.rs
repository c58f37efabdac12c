//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use orthosynth::gan::{build_discriminator, build_generator, DiscriminatorConfig, GeneratorConfig};
use orthosynth::nn::{finite_diff_check, Head, InputSpec, LayerSpec, LossSpec, Model, Tensor};
use orthosynth::phantom::{PhantomSubject, TissueTable, BLUR_TAPS};
use orthosynth::pipeline::Contrast;
use orthosynth::volume::{Dims, Volume};
use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut Xoshiro256PlusPlus, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_volume(rng: &mut Xoshiro256PlusPlus, dims: Dims) -> Volume {
    Volume::new(dims, (0..dims.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn conv2(i: usize, o: usize, k: usize, s: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv2d { in_channels: i, out_channels: o, kernel: k, stride: s, padding: k / 2, bias }
}

fn conv3(i: usize, o: usize, k: usize, s: usize, bias: bool) -> LayerSpec {
    LayerSpec::Conv3d { in_channels: i, out_channels: o, kernel: k, stride: s, padding: k / 2, bias }
}

pub struct GradCase {
    pub name: &'static str,
    pub model: Model<f64>,
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

fn case(name: &'static str, channels: usize, rank: usize, specs: Vec<LayerSpec>, head: Head, seed: u64) -> GradCase {
    let input = InputSpec { channels, rank, spatial_multiple: 1 };
    let model = Model::<f64>::new(input, specs, head, seed).unwrap();
    let mut r = rng(seed ^ 0xCA5E);
    let spatial: &[usize] = if rank == 2 { &[6, 6] } else { &[4, 4, 4] };
    let shape: Vec<usize> = [channels].iter().chain(spatial).copied().collect();
    let x = random_tensor(&mut r, &shape, 0.05, 0.95);
    let y = model.forward(&x).unwrap();
    let target = random_tensor(&mut r, y.shape(), -2.0, 2.0);
    GradCase { name, model, input: x, target }
}

/// One small model per layer kind, each ending in a parameterised layer or an activation.
pub fn layer_cases() -> Vec<GradCase> {
    vec![
        case("conv2d", 2, 2, vec![conv2(2, 3, 3, 1, true)], Head::Plain, 1),
        case("conv2d_stride2", 2, 2, vec![conv2(2, 3, 3, 2, true)], Head::Plain, 2),
        case("conv2d_1x1", 2, 2, vec![conv2(2, 3, 1, 1, true)], Head::Plain, 3),
        case(
            "upsample_conv2d",
            2,
            2,
            vec![LayerSpec::UpsampleConv2d { in_channels: 2, out_channels: 2, kernel: 3, bias: true }],
            Head::Plain,
            4,
        ),
        case("conv3d", 2, 3, vec![conv3(2, 2, 3, 1, true)], Head::Plain, 5),
        case("conv3d_stride2", 2, 3, vec![conv3(2, 2, 3, 2, true)], Head::Plain, 6),
        case(
            "upsample_conv3d",
            1,
            3,
            vec![LayerSpec::UpsampleConv3d { in_channels: 1, out_channels: 2, kernel: 3, bias: true }],
            Head::Plain,
            7,
        ),
        case(
            "instance_norm",
            2,
            2,
            vec![conv2(2, 3, 3, 1, false), LayerSpec::InstanceNorm { channels: 3 }],
            Head::Plain,
            8,
        ),
        case("relu", 2, 2, vec![conv2(2, 3, 3, 1, true), LayerSpec::Relu], Head::Plain, 9),
        case(
            "leaky_relu",
            2,
            2,
            vec![conv2(2, 3, 3, 1, true), LayerSpec::LeakyRelu { slope: 0.2 }],
            Head::Plain,
            10,
        ),
        case("sigmoid", 2, 2, vec![conv2(2, 3, 3, 1, true), LayerSpec::Sigmoid], Head::Plain, 11),
        case("tanh", 2, 2, vec![conv2(2, 3, 3, 1, true), LayerSpec::Tanh], Head::Plain, 12),
        case(
            "skip_concat",
            2,
            2,
            vec![
                conv2(2, 3, 3, 1, true),
                conv2(3, 2, 3, 1, true),
                LayerSpec::SkipConcat { source: 0, channels: 3 },
                conv2(5, 1, 3, 1, true),
            ],
            Head::Plain,
            13,
        ),
        case(
            "residual_head",
            1,
            2,
            vec![conv2(1, 2, 3, 1, true), LayerSpec::Tanh, conv2(2, 1, 3, 1, true), LayerSpec::Tanh],
            Head::Residual { scale: 0.5 },
            14,
        ),
    ]
}

pub fn check_case(c: &GradCase) -> f64 {
    finite_diff_check(&c.model, &LossSpec::L2, &c.input, &c.target, GRAD_EPS, 400).unwrap()
}

/// Full depth-3 U-Net generator under `adv + 100 * L1` through a conditional discriminator.
/// Returns the worst relative error over a seeded parameter sample.
pub fn full_generator_check(base_channels: usize, samples: usize) -> f64 {
    let gcfg = GeneratorConfig { base_channels, ..GeneratorConfig::synthesis(2) };
    assert_eq!(gcfg.depth, 3);
    let g = build_generator(&gcfg, 21).unwrap().cast::<f64>();
    let d = build_discriminator(&DiscriminatorConfig::conditional(2), 22).unwrap().cast::<f64>();
    let mut r = rng(23);
    let x = random_tensor(&mut r, &[2, 16, 16], 0.0, 1.0);
    // Targets far from the sigmoid output range keep L1 away from its kink.
    let target = Tensor::new(
        vec![1, 16, 16],
        (0..256).map(|i| if i % 2 == 0 { -1.0 } else { 2.0 }).collect(),
    )
    .unwrap();
    let loss = LossSpec::Weighted(vec![
        (1.0, LossSpec::Adversarial { discriminator: &d, condition: &x }),
        (100.0, LossSpec::L1),
    ]);
    finite_diff_check(&g, &loss, &x, &target, GRAD_EPS, samples).unwrap()
}

/// Every distinct blurred intensity triple: one per composition of the 27 taps.
pub fn blend_table(table: &TissueTable) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    let n = BLUR_TAPS as u32;
    for a in 0..=n {
        for b in 0..=n - a {
            for c in 0..=n - a - b {
                for d in 0..=n - a - b - c {
                    let counts = [a, b, c, d, n - a - b - c - d];
                    let v = |contrast| {
                        counts
                            .iter()
                            .enumerate()
                            .map(|(k, &cnt)| cnt as f64 * table.value(k, contrast))
                            .sum::<f64>()
                            / n as f64
                    };
                    out.push([v(Contrast::Pd), v(Contrast::T2), v(Contrast::T1)]);
                }
            }
        }
    }
    out
}

/// Predicts T1 per voxel from the blurred-table entry nearest in (PD, T2).
pub fn oracle_predict(subject: &PhantomSubject, entries: &[[f64; 3]]) -> Volume {
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let pd = &subject.volumes.sources[&Contrast::Pd];
    let t2 = &subject.volumes.sources[&Contrast::T2];
    let data = pd
        .data()
        .iter()
        .zip(t2.data())
        .map(|(&p, &t)| {
            let (p, t) = (p as f64, t as f64);
            let start = sorted.partition_point(|e| e[0] < p);
            let mut best = (f64::INFINITY, 0.0);
            let mut visit = |e: &[f64; 3]| {
                let d = (e[0] - p).powi(2) + (e[1] - t).powi(2);
                if d < best.0 {
                    best = (d, e[2]);
                }
                (e[0] - p).powi(2) > best.0
            };
            for e in &sorted[start..] {
                if visit(e) {
                    break;
                }
            }
            for e in sorted[..start].iter().rev() {
                if visit(e) {
                    break;
                }
            }
            best.1 as f32
        })
        .collect();
    Volume::new(pd.dims(), data).unwrap()
}

/// Predicts T1 from the nearest of the five pure tissue entries.
pub fn pure_entry_predict(subject: &PhantomSubject, table: &TissueTable) -> Volume {
    let pd = &subject.volumes.sources[&Contrast::Pd];
    let t2 = &subject.volumes.sources[&Contrast::T2];
    let data = pd
        .data()
        .iter()
        .zip(t2.data())
        .map(|(&p, &t)| {
            let k = (0..5)
                .min_by(|&a, &b| {
                    let d = |k| (table.value(k, Contrast::Pd) - p as f64).powi(2) + (table.value(k, Contrast::T2) - t as f64).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            table.value(k, Contrast::T1) as f32
        })
        .collect();
    Volume::new(pd.dims(), data).unwrap()
}
