//! Exit criteria for the library. Run with
//! `cargo test -p promptpool --test acceptance -- --nocapture` to see the
//! per-criterion report.

mod common;

use std::time::{Duration, Instant};

use common::*;
use promptpool::context::max_target_length;
use promptpool::npy::encode;
use promptpool::pooling::multi_token_count;
use promptpool::{
    alignment_logits, average_pool, certificate, compression_ratio, frame_similarities,
    interpolate_pe, map_index, output_shape, parallel, pool_backward, pool_forward, pool_multi,
    pool_separate_st, project_visual, random_tail_extend, read_tensor, relevance_profile,
    scores_multi_prompt, softmax_scores, uniform_interpolate_pe, write_tensor, AlignmentConfig,
    Continuity, Dtype, PoolMode, PoolingSpec, PositionalEmbeddingTable, ProjectionMatrix,
    RateSchedule, Shape3, Tensor, TextFeature,
};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn grid(t: usize, w: usize, h: usize) -> Shape3 {
    Shape3::new(t, w, h).unwrap()
}

fn c1_shape_fidelity() -> Outcome {
    let out = output_shape(grid(32, 24, 24), &PoolingSpec::video()).map_err(|e| e.to_string())?;
    ensure(out == grid(16, 8, 8) && out.tokens() == 1024, || {
        format!("got {out} = {} tokens", out.tokens())
    })?;
    Ok(format!("(32,24,24) -> {out} = {} tokens", out.tokens()))
}

fn c2_compression() -> Outcome {
    let video = compression_ratio(grid(32, 24, 24), grid(16, 8, 8));
    let image_out = output_shape(grid(1, 24, 24), &PoolingSpec::image()).unwrap();
    let image = compression_ratio(grid(1, 24, 24), image_out);
    ensure(video == 18.0 && video > 15.0, || {
        format!("video ratio {video}")
    })?;
    ensure(image == 9.0, || format!("image ratio {image}"))?;
    Ok(format!("video {video}, image {image}"))
}

fn c3_table_seven() -> Outcome {
    let g = grid(32, 24, 24);
    let tiled = |k| PoolingSpec::tiled(k, PoolMode::WeightedAverage).unwrap();
    let a = multi_token_count(g, &[tiled([1, 6, 6]), tiled([8, 2, 2])]).unwrap();
    let b = multi_token_count(g, &[tiled([4, 3, 3]), tiled([2, 4, 4])]).unwrap();
    ensure(a == 1088 && b == 1088, || format!("{a} / {b}"))?;
    Ok(format!("(1,6,6)+(8,2,2) -> {a}, (4,3,3)+(2,4,4) -> {b}"))
}

fn c4_softmax() -> Outcome {
    let mut r = rng(4);
    let (mut worst_sum, mut worst_shift) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let shape = [
            r.random_range(1..=6),
            r.random_range(1..=8),
            r.random_range(1..=8),
        ];
        let n = shape.iter().product();
        let spread = r.random_range(0.1..200.0);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-spread..spread)).collect();
        let s = softmax_scores(&Tensor::from_f64(shape.to_vec(), x.clone()).unwrap()).unwrap();
        let total: f64 = s.values().iter().sum();
        worst_sum = worst_sum.max((total - 1.0).abs());
        let k = r.random_range(-1000.0..1000.0);
        let shifted = Tensor::from_f64(shape.to_vec(), x.iter().map(|v| v + k).collect()).unwrap();
        let s2 = softmax_scores(&shifted).unwrap();
        worst_shift = worst_shift.max(max_abs_diff(s.values(), s2.values()));
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |b, (i, &x)| if x > b.1 { (i, x) } else { b },
                )
                .0
        };
        ensure(argmax(&x) == argmax(s.values()), || {
            format!("argmax moved in case {case}")
        })?;
    }
    ensure(worst_sum <= 1e-6, || format!("sum error {worst_sum:e}"))?;
    ensure(worst_shift <= 1e-9, || {
        format!("shift error {worst_shift:e}")
    })?;
    Ok(format!(
        "1000 tensors: max |sum-1| {worst_sum:.1e}, max shift drift {worst_shift:.1e}"
    ))
}

fn c5_oracle() -> Outcome {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for mode in [
        PoolMode::WeightedSumLiteral,
        PoolMode::WeightedAverage,
        PoolMode::Max,
        PoolMode::AverageBaseline,
    ] {
        for _ in 0..100 {
            let g = [
                r.random_range(1..=8),
                r.random_range(1..=12),
                r.random_range(1..=12),
            ];
            let d = r.random_range(1..=16);
            let v = random_tensor(&mut r, &[g[0], g[1], g[2], d]);
            let s = random_scores(&mut r, g[0], g[1], g[2]);
            let spec = random_spec(&mut r, g, mode);
            let out = pool_forward(&v, Some(&s), &spec).map_err(|e| e.to_string())?;
            let (shape, expected) = naive_pool(&v, &s, &spec);
            ensure(out.shape() == &shape[..], || {
                format!("shape {:?} vs {shape:?}", out.shape())
            })?;
            worst = worst.max(max_abs_diff(out.data(), &expected));
        }
    }
    ensure(worst <= 1e-12, || format!("max abs error {worst:e}"))?;
    Ok(format!(
        "4 modes x 100 instances, max abs error {worst:.1e}"
    ))
}

fn c6_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let specs = [
        PoolingSpec::video(),
        PoolingSpec::new([2, 3, 3], [1, 2, 2], PoolMode::WeightedAverage).unwrap(),
        PoolingSpec::new([1, 2, 4], [2, 3, 1], PoolMode::WeightedAverage).unwrap(),
    ];
    for (i, base) in specs.iter().enumerate() {
        for mode in [PoolMode::WeightedSumLiteral, PoolMode::WeightedAverage] {
            let spec = base.with_mode(mode);
            let mut r = rng(600 + i as u64);
            let v = random_tensor(&mut r, &[4, 6, 6, 4]);
            let s = random_scores(&mut r, 4, 6, 6);
            let o = output_shape(grid(4, 6, 6), &spec).unwrap();
            let g = random_tensor(&mut r, &[o.t, o.w, o.h, 4]);
            let grads = pool_backward(&v, Some(&s), &spec, &g).map_err(|e| e.to_string())?;
            let loss = |v: &Tensor, s: &Tensor| -> f64 {
                let out = pool_forward(v, Some(s), &spec).unwrap();
                out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let num_v = central_differences(v.data(), 1e-5, |x| {
                loss(&Tensor::from_f64(vec![4, 6, 6, 4], x.to_vec()).unwrap(), &s)
            });
            let num_s = central_differences(s.data(), 1e-5, |x| {
                loss(&v, &Tensor::from_f64(vec![4, 6, 6], x.to_vec()).unwrap())
            });
            worst = worst
                .max(max_relative_error(grads.grad_v.data(), &num_v))
                .max(max_relative_error(grads.grad_s.data(), &num_s));
        }
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!(
        "2 modes x 3 specs on 4x6x6x4, max relative error {worst:.1e}"
    ))
}

fn c7_baseline() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = [
            r.random_range(1..=8),
            r.random_range(1..=12),
            r.random_range(1..=12),
        ];
        let d = r.random_range(1..=16);
        let v = random_tensor(&mut r, &[g[0], g[1], g[2], d]);
        let n = g.iter().product::<usize>();
        let s = Tensor::from_f64(g.to_vec(), vec![1.0 / n as f64; n]).unwrap();
        let spec = random_spec(&mut r, g, PoolMode::WeightedAverage);
        let a = pool_forward(&v, Some(&s), &spec).unwrap();
        let b = average_pool(&v, &spec).unwrap();
        worst = worst.max(max_abs_diff(a.data(), b.data()));
    }
    ensure(worst <= 1e-9, || format!("max abs error {worst:e}"))?;
    Ok(format!("100 instances, max abs error {worst:.1e}"))
}

fn c8_pe_extension() -> Outcome {
    let p = PositionalEmbeddingTable::new(random_tensor(&mut rng(8), &[77, 32])).unwrap();
    let sched = RateSchedule::asymmetric(244);
    let out = interpolate_pe(&p, &sched).map_err(|e| e.to_string())?;
    for i in 0..20 {
        ensure(bits(out.row(i)) == bits(p.row(i)), || {
            format!("prefix row {i} differs")
        })?;
    }
    let mut integer_rows = 0;
    for i in 0..244 {
        let j = map_index(i, &sched, 77).unwrap();
        if j.fract() == 0.0 {
            integer_rows += 1;
            ensure(bits(out.row(i)) == bits(p.row(j as usize)), || {
                format!("integer row {i} (j={j}) differs")
            })?;
        }
    }
    // Exhaustive sweep over target positions.
    let wide = RateSchedule {
        target_length: 10_000,
        ..sched
    };
    let in_range: Vec<usize> = (0..10_000)
        .filter(|&i| map_index(i, &wide, 77).is_ok())
        .collect();
    let last = *in_range.last().unwrap();
    ensure(in_range.len() == last + 1, || {
        "in-range positions are not a prefix".into()
    })?;
    let j243 = map_index(243, &sched, 77).map_err(|e| e.to_string())?;
    ensure(j243 == 75.75, || format!("j(243) = {j243}"))?;
    ensure(last == 244, || {
        format!("largest in-range target index {last}, expected 244")
    })?;
    ensure(max_target_length(&sched, 77) == Some(last + 1), || {
        "closed form disagrees with sweep".into()
    })?;

    let mut prev = f64::NEG_INFINITY;
    for i in 0..10_000 {
        let j = wide.coordinate(i);
        ensure(j > prev, || format!("mapping not increasing at {i}"))?;
        prev = j;
    }
    ensure(wide.continuity == Continuity::ContinuousPiecewise, || {
        "wrong mode".into()
    })?;
    Ok(format!(
        "prefix 0..19 bit-exact, {integer_rows} integer-j rows bit-exact, target 244 valid \
         (j(243)=75.75), sweep: last in-range index 244 (j=76=L-1), strictly increasing"
    ))
}

fn bits(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

fn c9_certificate() -> Outcome {
    let cert = |s: &[f64]| certificate(s, 0.5).unwrap().certificate;
    ensure(cert(&[0.9, 0.7, 0.51]) == 1.0, || "all relevant".into())?;
    ensure(cert(&[0.1, -0.3, 0.49]) == 0.0, || "none relevant".into())?;
    ensure(cert(&[0.6, 0.4, 0.6, 0.4]) == 0.5, || {
        "half relevant".into()
    })?;
    ensure(cert(&[0.5]) == 0.0, || "0.5 must not exceed 0.5".into())?;

    let mut r = rng(9);
    for _ in 0..200 {
        let n = r.random_range(1..30);
        let sims: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let (a, b) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        ensure(
            certificate(&sims, hi).unwrap().certificate
                <= certificate(&sims, lo).unwrap().certificate,
            || "threshold monotonicity violated".into(),
        )?;

        let d = r.random_range(1..10);
        let frames = random_tensor(&mut r, &[n, d]);
        let text = random_tensor(&mut r, &[d]);
        let k = r.random_range(0.01..100.0);
        let scaled =
            Tensor::from_f64(vec![n, d], frames.data().iter().map(|x| x * k).collect()).unwrap();
        let a = frame_similarities(&frames, text.data()).map_err(|e| e.to_string())?;
        let b = frame_similarities(&scaled, text.data()).map_err(|e| e.to_string())?;
        ensure(max_abs_diff(&a, &b) <= 1e-12, || {
            "scale changed similarities".into()
        })?;
        let pa = relevance_profile(&frames, text.data(), 0.2).unwrap();
        let pb = relevance_profile(&scaled, text.data(), 0.2).unwrap();
        ensure(pa.certificate == pb.certificate, || {
            "scale changed certificate".into()
        })?;
    }
    Ok("hand cases exact; 200 monotonicity and scale-invariance trials".into())
}

fn c10_determinism() -> Outcome {
    let mut r = rng(10);
    let v = random_tensor(&mut r, &[8, 12, 12, 16]);
    let m = ProjectionMatrix::new(random_tensor(&mut r, &[16, 8])).unwrap();
    let prompts: Vec<TextFeature> = (0..2)
        .map(|_| TextFeature::new(random_tensor(&mut r, &[8]).into_data()).unwrap())
        .collect();
    let s = random_scores(&mut r, 8, 12, 12);
    let overlap = PoolingSpec::new([2, 3, 3], [1, 2, 2], PoolMode::WeightedAverage).unwrap();
    let o = output_shape(grid(8, 12, 12), &overlap).unwrap();
    let g = random_tensor(&mut r, &[o.t, o.w, o.h, 16]);
    let table = PositionalEmbeddingTable::new(random_tensor(&mut r, &[77, 16])).unwrap();
    let frames = random_tensor(&mut r, &[64, 8]);

    let run = |degree: usize| -> Vec<(&'static str, Tensor)> {
        parallel::with_degree(degree, || {
            let mut outs = Vec::new();
            let p = project_visual(&v, &m).unwrap();
            let logits = alignment_logits(&p, &prompts[0], &AlignmentConfig::default()).unwrap();
            outs.push(("softmax", softmax_scores(&logits).unwrap().into_tensor()));
            outs.push((
                "multi-prompt",
                scores_multi_prompt(&p, &prompts, &AlignmentConfig::default())
                    .unwrap()
                    .into_tensor(),
            ));
            outs.push(("projection", p));
            outs.push(("logits", logits));
            for mode in [
                PoolMode::WeightedSumLiteral,
                PoolMode::WeightedAverage,
                PoolMode::Max,
                PoolMode::AverageBaseline,
            ] {
                outs.push((
                    "pool",
                    pool_forward(&v, Some(&s), &overlap.with_mode(mode)).unwrap(),
                ));
            }
            for mode in [PoolMode::WeightedSumLiteral, PoolMode::WeightedAverage] {
                let grads = pool_backward(&v, Some(&s), &overlap.with_mode(mode), &g).unwrap();
                outs.push(("grad_v", grads.grad_v));
                outs.push(("grad_s", grads.grad_s));
            }
            outs.push(("average", average_pool(&v, &PoolingSpec::video()).unwrap()));
            let tiled = |k| PoolingSpec::tiled(k, PoolMode::WeightedAverage).unwrap();
            outs.push((
                "multi",
                pool_multi(&v, Some(&s), &[tiled([1, 6, 6]), tiled([8, 2, 2])]).unwrap(),
            ));
            outs.push((
                "separate-st",
                pool_separate_st(
                    &v,
                    Some(&s),
                    &PoolingSpec::identity(PoolMode::WeightedAverage),
                    &tiled([1, 3, 3]),
                )
                .unwrap(),
            ));
            outs.push((
                "pe-asymmetric",
                interpolate_pe(&table, &RateSchedule::asymmetric(244))
                    .unwrap()
                    .into_tensor(),
            ));
            outs.push((
                "pe-uniform",
                uniform_interpolate_pe(&table, 154).unwrap().into_tensor(),
            ));
            outs.push((
                "pe-random",
                random_tail_extend(&table, 100, 3, 0.02)
                    .unwrap()
                    .into_tensor(),
            ));
            let sims = frame_similarities(&frames, prompts[0].values()).unwrap();
            outs.push((
                "similarities",
                Tensor::from_f64(vec![sims.len()], sims).unwrap(),
            ));
            outs
        })
        .unwrap()
    };
    let base = run(1);
    for degree in [2, 8] {
        for ((name, a), (_, b)) in base.iter().zip(run(degree)) {
            ensure(a.bit_eq(&b), || {
                format!("{name} differs at degree {degree}")
            })?;
        }
    }
    Ok(format!(
        "{} kernel outputs bit-identical at degrees 1, 2, 8",
        base.len()
    ))
}

fn c11_file_format() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut r = rng(11);
    for i in 0..100 {
        let rank = r.random_range(0..=4);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(0..=5)).collect();
        let dtype = if i % 2 == 0 { Dtype::F64 } else { Dtype::F32 };
        let t = random_tensor(&mut r, &shape).cast(dtype);
        let path = dir.path().join(format!("{i}.npy"));
        write_tensor(&t, &path).map_err(|e| e.to_string())?;
        let back = read_tensor(&path).map_err(|e| e.to_string())?;
        ensure(back.bit_eq(&t), || {
            format!("tensor {i} changed on round trip")
        })?;

        let bytes = std::fs::read(&path).unwrap();
        ensure(bytes == encode(&t), || {
            "file differs from encoder output".into()
        })?;
        let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| e.to_string())?;
        let ext_shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
        ensure(ext_shape == shape, || {
            format!("npyz shape {ext_shape:?} vs {shape:?}")
        })?;
        let values: Vec<f64> = match dtype {
            Dtype::F32 => npy
                .into_vec::<f32>()
                .unwrap()
                .into_iter()
                .map(f64::from)
                .collect(),
            Dtype::F64 => npy.into_vec::<f64>().unwrap(),
        };
        ensure(bits(&values) == bits(t.data()), || {
            format!("npyz values differ for {i}")
        })?;
    }
    Ok("100 tensors bit-exact through write/read; all parsed by npyz".into())
}

#[test]
fn acceptance_criteria() {
    type Criterion = (&'static str, Option<Duration>, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        (
            "1 shape fidelity",
            Some(Duration::from_secs(1)),
            c1_shape_fidelity,
        ),
        ("2 compression claims", None, c2_compression),
        ("3 multi-branch token counts", None, c3_table_seven),
        (
            "4 softmax contract",
            Some(Duration::from_secs(10)),
            c4_softmax,
        ),
        (
            "5 oracle equivalence",
            Some(Duration::from_secs(30)),
            c5_oracle,
        ),
        (
            "6 gradient correctness",
            Some(Duration::from_secs(60)),
            c6_gradients,
        ),
        ("7 baseline equivalence", None, c7_baseline),
        ("8 positional-embedding extension", None, c8_pe_extension),
        ("9 certificate metric", None, c9_certificate),
        ("10 determinism", None, c10_determinism),
        ("11 file-format round-trip", None, c11_file_format),
    ];
    let mut failed = Vec::new();
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let mut outcome = check();
        let elapsed = start.elapsed();
        if let (Ok(_), Some(limit)) = (&outcome, budget) {
            if elapsed > limit {
                outcome = Err(format!("took {elapsed:?}, budget {limit:?}"));
            }
        }
        match &outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                println!("FAIL  {name}: {why} [{elapsed:.2?}]");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
