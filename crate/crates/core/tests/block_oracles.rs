use ann_core::autograd::BlockCase;
use ann_core::blocks::{
    block_forward, stage_fusion_pipeline, BlockConfig, BlockKind, BlockWeights, Combine, Eval,
    Normalization, PipelineStage, Probe, Projection,
};
use ann_core::checks::{anchor_permutation_suite, forward_with_permuted_anchors, random_regime};
use ann_core::sampling::{SamplerSpec, SamplingMethod};
use ann_core::tensor::{Distribution, Shape3, Tensor};
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn positions(x: &Tensor) -> Mat {
    let s = x.dims3().unwrap();
    (0..s.channels)
        .map(|c| {
            (0..s.height)
                .flat_map(|h| (0..s.width).map(move |w| (h, w)))
                .map(|(h, w)| x.at(&[c, h, w]))
                .collect()
        })
        .collect()
}

fn project(p: &Projection, x: &Mat) -> Mat {
    let (out, inp) = (p.weight.shape()[0], p.weight.shape()[1]);
    let n = x[0].len();
    (0..out)
        .map(|o| {
            (0..n)
                .map(|j| {
                    (0..inp)
                        .map(|i| p.weight.at(&[o, i]) * x[i][j])
                        .sum::<f64>()
                        + p.bias.as_ref().map_or(0.0, |b| b.data()[o])
                })
                .collect()
        })
        .collect()
}

/// Average or max pooling of an `E × (H·W)` map by direct bin enumeration,
/// levels concatenated in order.
fn pool(x: &Mat, h: usize, w: usize, levels: &[usize], max: bool) -> Mat {
    x.iter()
        .map(|row| {
            let mut out = Vec::new();
            for &n in levels {
                for i in 0..n {
                    for j in 0..n {
                        let mut vals = Vec::new();
                        for r in i * h / n..((i + 1) * h).div_ceil(n) {
                            for q in j * w / n..((j + 1) * w).div_ceil(n) {
                                vals.push(row[r * w + q]);
                            }
                        }
                        out.push(if max {
                            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                        } else {
                            vals.iter().sum::<f64>() / vals.len() as f64
                        });
                    }
                }
            }
            out
        })
        .collect()
}

/// Straight-line evaluation of any block kind.
fn oracle(
    kind: BlockKind,
    high: &Tensor,
    low: Option<&Tensor>,
    cfg: &BlockConfig,
    w: &BlockWeights,
) -> Tensor {
    let hs = high.dims3().unwrap();
    let xh = positions(high);
    let (xl, ls) = match low {
        Some(l) => (positions(l), l.dims3().unwrap()),
        None => (xh.clone(), hs),
    };
    let phi = project(&w.query, &xh);
    let mut theta = project(&w.key, &xl);
    let mut gamma = match &w.value {
        Some(v) => project(v, &xl),
        None => theta.clone(),
    };
    if kind.is_asymmetric() {
        let spec = cfg.sampler.as_ref().unwrap();
        let max = match spec.method {
            SamplingMethod::PyramidAverage | SamplingMethod::Average => false,
            SamplingMethod::PyramidMax | SamplingMethod::Max => true,
            SamplingMethod::Identity => {
                let n = ls.positions();
                theta = theta.iter().map(|r| r[..n].to_vec()).collect();
                gamma = gamma.iter().map(|r| r[..n].to_vec()).collect();
                return finish(cfg, w, &xh, hs, &phi, &theta, &gamma);
            }
            m => panic!("oracle does not cover {m:?}"),
        };
        theta = pool(&theta, ls.height, ls.width, &spec.levels, max);
        gamma = pool(&gamma, ls.height, ls.width, &spec.levels, max);
    }
    finish(cfg, w, &xh, hs, &phi, &theta, &gamma)
}

fn finish(
    cfg: &BlockConfig,
    w: &BlockWeights,
    xh: &Mat,
    hs: Shape3,
    phi: &Mat,
    theta: &Mat,
    gamma: &Mat,
) -> Tensor {
    let (e, n, s) = (phi.len(), phi[0].len(), theta[0].len());
    let mut attended = vec![vec![0.0; n]; e];
    for i in 0..n {
        let mut sim: Vec<f64> = (0..s)
            .map(|j| (0..e).map(|k| phi[k][i] * theta[k][j]).sum())
            .collect();
        match cfg.normalization {
            Normalization::Softmax => {
                let m = sim.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = sim.iter().map(|v| (v - m).exp()).sum();
                sim.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
            }
            Normalization::Rescale => sim.iter_mut().for_each(|v| *v /= s as f64),
            Normalization::None => {}
        }
        for k in 0..e {
            attended[k][i] = (0..s).map(|j| sim[j] * gamma[k][j]).sum();
        }
    }
    let projected = project(&w.output, &attended);
    let rows: Mat = match cfg.combine {
        Combine::Residual => projected
            .iter()
            .zip(xh)
            .map(|(p, x)| p.iter().zip(x).map(|(a, b)| a + b).collect())
            .collect(),
        Combine::Concat => projected.into_iter().chain(xh.iter().cloned()).collect(),
    };
    let c = rows.len();
    Tensor::from_vec(&[c, hs.height, hs.width], rows.concat()).unwrap()
}

fn case_for(kind: BlockKind, seed: u64, sampler: Option<SamplerSpec>) -> BlockCase {
    let r = random_regime(kind, 6, seed);
    let cfg = match sampler {
        Some(s) => r.config.with_sampler(s),
        None => r.config,
    };
    BlockCase::random(kind, &cfg, r.shape, r.low_shape, seed).unwrap()
}

fn check_oracle(case: &BlockCase) -> f64 {
    let got = case.forward().unwrap();
    let want = oracle(
        case.kind,
        &case.high,
        case.low.as_ref(),
        &case.cfg,
        &case.weights,
    );
    got.max_abs_diff(&want).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn nb_matches_scalar_oracle(seed in any::<u64>()) {
        prop_assert!(check_oracle(&case_for(BlockKind::Nb, seed, None)) < 1e-10);
    }

    #[test]
    fn fnb_matches_scalar_oracle(seed in any::<u64>()) {
        prop_assert!(check_oracle(&case_for(BlockKind::Fnb, seed, None)) < 1e-10);
    }

    #[test]
    fn apnb_matches_pooling_oracle(seed in any::<u64>(), max in any::<bool>()) {
        let m = if max { SamplingMethod::PyramidMax } else { SamplingMethod::PyramidAverage };
        let case = case_for(BlockKind::Apnb, seed, Some(SamplerSpec::new(m, &[1, 2, 4])));
        prop_assert!(check_oracle(&case) < 1e-10);
    }

    #[test]
    fn afnb_matches_pooling_oracle(seed in any::<u64>()) {
        let case = case_for(BlockKind::Afnb, seed, Some(SamplerSpec::pyramid_average(&[1, 3])));
        prop_assert!(check_oracle(&case) < 1e-10);
    }

    #[test]
    fn output_shape_contract(seed in any::<u64>(), k in 0usize..4) {
        let kind = BlockKind::ALL[k];
        let sampler = kind.is_asymmetric().then(|| SamplerSpec::pyramid_average(&[1, 2]));
        let case = case_for(kind, seed, sampler);
        let out = case.forward().unwrap();
        let s = case.high.dims3().unwrap();
        let channels = match case.cfg.combine {
            Combine::Concat => case.cfg.out() + s.channels,
            Combine::Residual => s.channels,
        };
        prop_assert_eq!(out.shape(), &[channels, s.height, s.width]);
    }

    #[test]
    fn anchor_permutation_invariance(seed in any::<u64>(), perm in any::<u64>()) {
        let case = case_for(BlockKind::Afnb, seed, Some(SamplerSpec::new(SamplingMethod::PyramidMax, &[1, 2, 3])));
        let d = forward_with_permuted_anchors(&case, perm).unwrap().max_abs_diff(&case.forward().unwrap()).unwrap();
        prop_assert!(d <= 1e-12);
    }
}

#[test]
fn permutation_suite_for_apnb() {
    let r = anchor_permutation_suite(BlockKind::Apnb, 20, 5).unwrap();
    assert!(r.passed, "{}", r.max_deviation);
}

struct Attended(Option<Tensor>);

impl Probe for Attended {
    fn on_attention(&mut self, attended: &Tensor) {
        self.0 = Some(attended.clone());
    }
}

fn attended(case: &BlockCase) -> Tensor {
    let mut probe = Attended(None);
    Eval::new(&mut probe)
        .forward(
            case.kind,
            &case.high,
            case.low.as_ref(),
            &case.cfg,
            &case.weights,
        )
        .unwrap();
    probe.0.unwrap()
}

#[test]
fn value_translation_shifts_attention() {
    for (i, kind) in BlockKind::ALL.into_iter().enumerate() {
        let mut cfg = BlockConfig::new(3, 4).with_shared_key_value(false);
        if kind.is_fusion() {
            cfg = cfg.with_low_channels(2);
        }
        if kind.is_asymmetric() {
            cfg = cfg.with_sampler(SamplerSpec::pyramid_average(&[1, 2, 3]));
        }
        let case = BlockCase::random(
            kind,
            &cfg,
            Shape3::new(3, 5, 4),
            Some(Shape3::new(2, 6, 3)),
            i as u64,
        )
        .unwrap();
        let shift = [0.5, -1.25, 2.0, 0.125];
        let mut moved = case.clone();
        let value = moved.weights.value.as_mut().unwrap();
        let bias = value.bias.as_ref().unwrap();
        let shifted: Vec<f64> = bias.data().iter().zip(shift).map(|(b, c)| b + c).collect();
        value.bias = Some(Tensor::from_vec(&[4], shifted).unwrap());

        let (before, after) = (attended(&case), attended(&moved));
        let (n, e) = after.dims2().unwrap();
        for p in 0..n {
            for (k, s) in shift.iter().enumerate().take(e) {
                let d = after.at(&[p, k]) - before.at(&[p, k]) - s;
                assert!(d.abs() < 1e-10, "{kind} position {p} channel {k}: {d}");
            }
        }
    }
}

#[test]
fn tiny_nb_by_hand() {
    // One channel, one embedding, 1×2 map, unit weights, no biases, residual:
    // similarity [[1,2],[2,4]] for x = [1,2].
    let cfg = BlockConfig::new(1, 1)
        .with_shared_key_value(true)
        .with_bias(false)
        .with_combine(Combine::Residual);
    let one = Tensor::full(&[1, 1], 1.0).unwrap();
    let w = BlockWeights {
        query: Projection::new(one.clone(), None),
        key: Projection::new(one.clone(), None),
        value: None,
        output: Projection::new(one, None),
    };
    let x = Tensor::from_values(&[1, 1, 2], &[1.0, 2.0]).unwrap();
    let y = block_forward(BlockKind::Nb, &x, None, &cfg, &w).unwrap();
    let soft = |a: f64, b: f64| (a.exp() * 1.0 + b.exp() * 2.0) / (a.exp() + b.exp());
    assert!((y.data()[0] - (1.0 + soft(1.0, 2.0))).abs() < 1e-14);
    assert!((y.data()[1] - (2.0 + soft(2.0, 4.0))).abs() < 1e-14);
}

#[test]
fn pipeline_identity_samplers_match_dense() {
    let stage4 = Tensor::seeded_fill(&[3, 7, 6], 1, Distribution::Uniform).unwrap();
    let stage5 = Tensor::seeded_fill(&[4, 4, 3], 2, Distribution::Uniform).unwrap();
    let fuse = BlockConfig::new(4, 2).with_low_channels(3);
    let refine = BlockConfig::new(fuse.output_channels(), 3);
    let (wf, wr) = (
        ann_core::blocks::init_weights(&fuse, 3).unwrap(),
        ann_core::blocks::init_weights(&refine, 4).unwrap(),
    );
    let id = SamplerSpec::identity();
    let (fuse_a, refine_a) = (
        fuse.clone().with_sampler(id.clone()),
        refine.clone().with_sampler(id),
    );
    let dense = stage_fusion_pipeline(
        &stage4,
        &stage5,
        PipelineStage {
            kind: BlockKind::Fnb,
            cfg: &fuse,
            weights: &wf,
        },
        PipelineStage {
            kind: BlockKind::Nb,
            cfg: &refine,
            weights: &wr,
        },
    )
    .unwrap();
    let sparse = stage_fusion_pipeline(
        &stage4,
        &stage5,
        PipelineStage {
            kind: BlockKind::Afnb,
            cfg: &fuse_a,
            weights: &wf,
        },
        PipelineStage {
            kind: BlockKind::Apnb,
            cfg: &refine_a,
            weights: &wr,
        },
    )
    .unwrap();
    assert!(dense.max_abs_diff(&sparse).unwrap() <= 1e-12);
    assert_eq!(dense.shape(), &[refine.out() + refine.in_channels, 4, 3]);
}

#[test]
fn pipeline_constant_stages_give_constant_output() {
    let stage4 = Tensor::full(&[2, 6, 6], 0.7).unwrap();
    let stage5 = Tensor::full(&[3, 3, 3], -0.4).unwrap();
    let fuse = BlockConfig::new(3, 2)
        .with_low_channels(2)
        .with_sampler(SamplerSpec::pyramid_average(&[1, 2]));
    let refine = BlockConfig::new(fuse.output_channels(), 2)
        .with_sampler(SamplerSpec::pyramid_average(&[1, 3]));
    let (wf, wr) = (
        ann_core::blocks::init_weights(&fuse, 5).unwrap(),
        ann_core::blocks::init_weights(&refine, 6).unwrap(),
    );
    let out = stage_fusion_pipeline(
        &stage4,
        &stage5,
        PipelineStage {
            kind: BlockKind::Afnb,
            cfg: &fuse,
            weights: &wf,
        },
        PipelineStage {
            kind: BlockKind::Apnb,
            cfg: &refine,
            weights: &wr,
        },
    )
    .unwrap();
    for plane in out.data().chunks(9) {
        assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-14));
    }
}
