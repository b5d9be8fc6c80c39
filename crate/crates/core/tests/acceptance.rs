//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Numeric arguments select criteria, e.g.
//! `cargo test --test acceptance -- 5 7`.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{fd_max_rel_error, rng, uniform};
use poelic::adversary::{spectral_normalize, Discriminator, DiscriminatorConfig};
use poelic::autograd::Graph;
use poelic::codec::Codec;
use poelic::context::{
    decode_latent, encode_latent, params_from_state, pass_positions, serial_reference_decode, ContextModel, Pass,
    NUM_GROUPS,
};
use poelic::entropy::gaussian_pmf;
use poelic::eval_io::dataset::synthetic_image;
use poelic::eval_io::metrics::{gaussian_window, ms_ssim, psnr};
use poelic::losses::*;
use poelic::nn::{Bound, ParamStore};
use poelic::tensor::Tensor;
use poelic::training::{run_training, steps_per_epoch, Dataset, TrainConfig, Trainer};
use poelic::transforms::CodecConfig;
use rand::Rng;
use rand_distr::StandardNormal;

// Tolerances.
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const RATE_REL_TOL: f64 = 0.02;
const RATE_ABS_TOL_BITS: f64 = 64.0 * 8.0;
const PMF_SUM_TOL: f64 = 1e-12;
const PMF_ZERO: f64 = 0.3829249;
const PMF_ZERO_TOL: f64 = 1e-6;
const SN_ITERS: usize = 50;
const SN_TOL: f64 = 0.01;
const STYLE_TOL: f64 = 1e-9;
const SMOKE_BUDGET: Duration = Duration::from_secs(30 * 60);
const BPP_MATCH: f64 = 0.15;
const STEER_BAND: f64 = 0.5;
const STEER_FRACTION: f64 = 0.8;
const PSNR_TOL: f64 = 1e-6;
const MS_SSIM_TOL: f64 = 1e-4;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 11] = [
        ("gradient suite", gradient_suite),
        ("coding round trip", coding_round_trip),
        ("rate fidelity", rate_fidelity),
        ("context equivalence", context_equivalence),
        ("gaussian likelihood", gaussian_likelihood),
        ("spectral norm", spectral_norm),
        ("style-loss oracle", style_oracle),
        ("multiplexer", multiplexer),
        ("toy training smoke", training_smoke),
        ("rate steering", rate_steering),
        ("metrics", metrics),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = f();
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("PASS {n:2} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:2} {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1 -----------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let shape = [1, 3, 32, 32];
    let x = uniform(&shape, 0.0, 1.0, 1);
    let x_hat = uniform(&shape, 0.0, 1.0, 2);
    let logits = uniform(&shape, -2.0, 2.0, 3);
    let probs = uniform(&shape, 0.05, 0.95, 4);
    let fe = FeatureExtractor::random(0, Activation::Silu);
    let fe_p64 = fe.params.cast::<f64>();
    let w = LossWeights::default();

    let disc = Discriminator::new(DiscriminatorConfig::toy(CodecConfig::toy().latent_channels)).unwrap();
    let (dp, sn) = disc.init(&mut rng(5));
    let dp64 = dp.cast::<f64>();
    let y_hat = Tensor::<f64>::randn(&[1, 80, 2, 2], 1.0, &mut rng(6));

    let mut results: Vec<(&str, f64, f64)> = Vec::new();
    let xc = x.clone();
    let fx_ref: Vec<Tensor<f64>> = {
        let g = Graph::new();
        let p = Bound::new(&g, &fe_p64, false);
        fe.features(&p, g.constant(x.clone())).iter().map(|v| (*v.value()).clone()).collect()
    };
    results.push(timed("charbonnier", || fd_max_rel_error(&x_hat, GRAD_STEP, |g, v| charbonnier(g.constant(xc.clone()), v, w.charbonnier_eps))));
    results.push(timed("hinge-G", || fd_max_rel_error(&logits, GRAD_STEP, |_, v| hinge_adversarial_g(v))));
    let other = uniform(&shape, -2.0, 2.0, 7);
    results.push(timed("hinge-D real", || fd_max_rel_error(&logits, GRAD_STEP, |g, v| hinge_adversarial_d(v, g.constant(other.clone())))));
    results.push(timed("hinge-D fake", || fd_max_rel_error(&logits, GRAD_STEP, |g, v| hinge_adversarial_d(g.constant(other.clone()), v))));
    results.push(timed("BCE-G", || fd_max_rel_error(&probs, GRAD_STEP, |_, v| bce_adversarial_g(v))));
    let other_p = uniform(&shape, 0.05, 0.95, 8);
    results.push(timed("BCE-D real", || fd_max_rel_error(&probs, GRAD_STEP, |g, v| bce_adversarial_d(v, g.constant(other_p.clone())))));
    results.push(timed("BCE-D fake", || fd_max_rel_error(&probs, GRAD_STEP, |g, v| bce_adversarial_d(g.constant(other_p.clone()), v))));
    results.push(timed("patched style", || fd_max_rel_error(&x_hat, GRAD_STEP, |g, v| {
            let p = Bound::new(g, &fe_p64, false);
            let fx: Vec<_> = fx_ref.iter().map(|t| g.constant(t.clone())).collect();
            style_loss_from_features(&fx, &fe.features(&p, v), w.style_patch)
        })));
    results.push(timed("LPIPS-style", || fd_max_rel_error(&x_hat, GRAD_STEP, |g, v| {
            let p = Bound::new(g, &fe_p64, false);
            let fx: Vec<_> = fx_ref.iter().map(|t| g.constant(t.clone())).collect();
            lpips_from_features(&fx, &fe.features(&p, v), &fe.lpips_weights_as())
        })));
    results.push(timed("total objective", || fd_max_rel_error(&x_hat, GRAD_STEP, |g, v| {
            let p = Bound::new(g, &fe_p64, false);
            let pd = Bound::new(g, &dp64, false);
            let mut sn = sn.clone();
            let fake = disc.forward(&pd, &mut sn, v, g.constant(y_hat.clone()), false).unwrap();
            total_objective(&fe, &p, g.constant(xc.clone()), v, g.scalar(0.25), Some(fake), &w).total
        })));
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results
        .iter()
        .map(|(n, e, t)| format!("{n} {e:.1e} ({t:.0}s)"))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        worst <= GRAD_TOL && elapsed < GRAD_BUDGET,
        format!("max rel err {worst:.2e} (tol {GRAD_TOL:.0e}) in {:.0}s; {detail}", elapsed.as_secs_f64()),
    )
}

fn timed(name: &str, f: impl FnOnce() -> f64) -> (&str, f64, f64) {
    let t = Instant::now();
    let e = f();
    (name, e, t.elapsed().as_secs_f64())
}

// 2, 3 --------------------------------------------------------------------

fn random_toy_images(n: usize) -> Vec<Tensor<f32>> {
    let mut r = rng(2024);
    (0..n)
        .map(|i| {
            let h = r.random_range(24..=160);
            let w = r.random_range(24..=160);
            if i % 5 == 4 {
                Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut r)
            } else {
                synthetic_image(h, w, &mut r)
            }
        })
        .collect()
}

fn toy_codec() -> Codec {
    Codec::random(CodecConfig::toy(), 11).unwrap()
}

fn coding_round_trip() -> Outcome {
    let codec = toy_codec();
    let (mut mismatches, mut differing_streams, mut symbols) = (0usize, 0usize, 0usize);
    for img in random_toy_images(50) {
        let a = codec.compress(&img).map_err(|e| e.to_string())?;
        let b = codec.compress(&img).map_err(|e| e.to_string())?;
        differing_streams += usize::from(a.bytes != b.bytes);
        let d = codec.decode_latents(&a.bytes).map_err(|e| e.to_string())?;
        symbols += a.z_symbols.len() + a.y_symbols.len();
        mismatches += count_diff(&a.z_symbols, &d.z_symbols) + count_diff(&a.y_symbols, &d.y_symbols);
        mismatches += usize::from(a.y_hat != d.y_hat);
    }
    check(
        mismatches == 0 && differing_streams == 0,
        format!("50 images, {symbols} symbols, {mismatches} mismatches, {differing_streams} non-identical re-encodings"),
    )
}

fn count_diff(a: &[i32], b: &[i32]) -> usize {
    if a.len() != b.len() {
        return a.len().max(b.len());
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn rate_fidelity() -> Outcome {
    let codec = toy_codec();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_ratio = 0.0f64;
    let mut ok = true;
    for img in random_toy_images(50) {
        let c = codec.compress(&img).map_err(|e| e.to_string())?;
        let file_bits = (c.bytes.len() * 8) as f64;
        let allowed = RATE_REL_TOL * c.table_bits + RATE_ABS_TOL_BITS;
        let dev = (file_bits - c.table_bits).abs();
        ok &= dev <= allowed;
        worst_excess = worst_excess.max(dev - allowed);
        worst_ratio = worst_ratio.max(file_bits / c.table_bits);
    }
    check(
        ok,
        format!("worst |file - ideal| minus allowance {worst_excess:.0} bits (<= 0 passes); max file/ideal {worst_ratio:.4}"),
    )
}

// 4 -----------------------------------------------------------------------

fn context_equivalence() -> Outcome {
    let cfg = CodecConfig::toy();
    let model = ContextModel::new(&cfg).unwrap();
    let mut store = ParamStore::new();
    model.init(&mut store, &mut rng(12));
    let m = cfg.latent_channels;
    let hyper_c = cfg.hyper_ctx_channels();
    let mut r = rng(13);
    let mut mismatches = 0usize;
    let mut symbols = 0usize;
    for i in 0..100 {
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let hyper = Tensor::randn(&[1, hyper_c, h, w], 1.0, &mut r);
        let y = Tensor::randn(&[1, m, h, w], 1.0 + (i % 4) as f64, &mut r);
        let code = encode_latent(&model, &store, &hyper, &y).map_err(|e| e.to_string())?;
        let pf = |k, pass, s: &Tensor<f32>| params_from_state(&model, &store, &hyper, s, k, pass);
        let (par, par_y) = decode_latent(model.layout(), (h, w), &code.streams, pf).map_err(|e| e.to_string())?;
        let (ser, ser_y) =
            serial_reference_decode(model.layout(), (h, w), &code.streams, pf).map_err(|e| e.to_string())?;
        symbols += par.len();
        mismatches += count_diff(&par, &ser) + count_diff(&par, &code.symbols) + usize::from(par_y != ser_y);
    }

    // Causality: perturbing not-yet-decoded entries must leave the current
    // pass's parameters unchanged; perturbing decoded entries must not.
    let (h, w) = (4, 4);
    let (mut leaks, mut probes, mut sensitive) = (0usize, 0usize, 0usize);
    let layout = model.layout();
    for trial in 0..5 {
        let hyper = Tensor::randn(&[1, hyper_c, h, w], 1.0, &mut r);
        for k in 0..NUM_GROUPS {
            for pass in Pass::BOTH {
                let decoded = |c: usize, i: usize, j: usize| {
                    c < layout.offset(k)
                        || (pass == Pass::NonAnchor
                            && c < layout.offset(k) + layout.size(k)
                            && Pass::Anchor.contains(i, j))
                };
                let base = Tensor::<f32>::randn(&[1, m, h, w], 2.0, &mut r);
                let mut future = base.clone();
                let mut past = base.clone();
                for c in 0..m {
                    for i in 0..h {
                        for j in 0..w {
                            let at = (c * h + i) * w + j;
                            let bump: f32 = 5.0 * r.sample::<f32, _>(StandardNormal);
                            if decoded(c, i, j) {
                                past.data_mut()[at] += bump;
                            } else {
                                future.data_mut()[at] += bump;
                            }
                        }
                    }
                }
                let at_pass = |t: &(Tensor<f32>, Tensor<f32>)| -> Vec<f32> {
                    let mut v = Vec::new();
                    for gc in 0..layout.size(k) {
                        for &(i, j) in &pass_positions(h, w, pass) {
                            v.push(t.0.data()[(gc * h + i) * w + j]);
                            v.push(t.1.data()[(gc * h + i) * w + j]);
                        }
                    }
                    v
                };
                let p0 = at_pass(&params_from_state(&model, &store, &hyper, &base, k, pass).unwrap());
                let pf = at_pass(&params_from_state(&model, &store, &hyper, &future, k, pass).unwrap());
                let pp = at_pass(&params_from_state(&model, &store, &hyper, &past, k, pass).unwrap());
                probes += 1;
                leaks += usize::from(p0 != pf);
                let has_context = k > 0 || pass == Pass::NonAnchor;
                if has_context && trial == 0 {
                    sensitive += usize::from(p0 != pp);
                }
            }
        }
    }
    let contexts = 2 * NUM_GROUPS - 1;
    check(
        mismatches == 0 && leaks == 0 && sensitive == contexts,
        format!(
            "100 latents, {symbols} symbols, {mismatches} parallel/serial mismatches; \
             {leaks}/{probes} perturbation probes leaked; {sensitive}/{contexts} passes respond to decoded context"
        ),
    )
}

// 5 -----------------------------------------------------------------------

/// erf by its Maclaurin series, summed until terms vanish.
fn erf_series(x: f64) -> f64 {
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    while term.abs() > 1e-300 && n < 200.0 {
        n += 1.0;
        term *= -x * x / n;
        sum += term / (2.0 * n + 1.0);
        if (term / (2.0 * n + 1.0)).abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn gaussian_likelihood() -> Outcome {
    let sum: f64 = (-30..=30).map(|d| gaussian_pmf(d as f64, 0.0, 1.0)).sum();
    let p0 = gaussian_pmf(0.0, 0.0, 1.0);
    let oracle = erf_series(0.5 / std::f64::consts::SQRT_2);
    let ok = (sum - 1.0).abs() <= PMF_SUM_TOL && (p0 - PMF_ZERO).abs() <= PMF_ZERO_TOL && (p0 - oracle).abs() <= 1e-14;
    check(
        ok,
        format!("sum-1 = {:.1e}, p(0) = {p0:.10} (erf series {oracle:.10}, target {PMF_ZERO})", sum - 1.0),
    )
}

// 6 -----------------------------------------------------------------------

fn spectral_norm() -> Outcome {
    let mut r = rng(14);
    let mut parts = Vec::new();
    let mut ok = true;
    for (rows, cols) in [(8, 8), (64, 576)] {
        let w = Tensor::<f64>::randn(&[rows, cols], 1.0, &mut r);
        let mut u: Vec<f64> = (0..rows).map(|_| r.sample(StandardNormal)).collect();
        let n = spectral_normalize(&w, &mut u, SN_ITERS);
        let top = nalgebra::DMatrix::from_row_slice(rows, cols, n.data()).singular_values().max();
        ok &= (top - 1.0).abs() <= SN_TOL;
        parts.push(format!("{rows}x{cols}: sigma_max {top:.6}"));
    }
    check(ok, parts.join(", "))
}

// 7 -----------------------------------------------------------------------

/// Squared Frobenius distance of area-normalised Gram matrices, tile by
/// tile, averaged over batch and tiles.
fn style_brute_force(a: &Tensor<f64>, b: &Tensor<f64>, tile: usize) -> f64 {
    let (bn, c, h, w) = a.dims4();
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..bn {
        for ty in (0..h).step_by(tile) {
            for tx in (0..w).step_by(tile) {
                let (th, tw) = (tile.min(h - ty), tile.min(w - tx));
                let area = (th * tw) as f64;
                let mut dist = 0.0;
                for p in 0..c {
                    for q in 0..c {
                        let (mut ga, mut gb) = (0.0, 0.0);
                        for y in ty..ty + th {
                            for x in tx..tx + tw {
                                ga += a.at(&[n, p, y, x]) * a.at(&[n, q, y, x]);
                                gb += b.at(&[n, p, y, x]) * b.at(&[n, q, y, x]);
                            }
                        }
                        let d = (ga - gb) / area;
                        dist += d * d;
                    }
                }
                total += dist;
                count += 1;
            }
        }
    }
    total / count as f64
}

fn style_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let a = uniform(&[2, 4, 64, 64], -1.0, 1.0, 100 + seed);
        let b = uniform(&[2, 4, 64, 64], -1.0, 1.0, 200 + seed);
        let g = Graph::new();
        let got = style_loss_from_features(&[g.constant(a.clone())], &[g.constant(b.clone())], 16).item();
        worst = worst.max((got - style_brute_force(&a, &b, 16)).abs());
    }
    let a = uniform(&[2, 4, 16, 16], -1.0, 1.0, 300);
    let b = uniform(&[2, 4, 16, 16], -1.0, 1.0, 301);
    let g = Graph::new();
    let (va, vb) = (g.constant(a), g.constant(b));
    let patched = style_loss_from_features(&[va], &[vb], 16).item();
    let unpatched = (gram_matrix(va, true) - gram_matrix(vb, true))
        .square()
        .sum_dims(&[1, 2])
        .mean()
        .item();
    let eq = (patched - unpatched).abs();
    check(
        worst <= STYLE_TOL && eq <= STYLE_TOL,
        format!("64x64 max |patched - tiled oracle| {worst:.1e}; 16x16 |patched - unpatched| {eq:.1e}"),
    )
}

// 8 -----------------------------------------------------------------------

fn multiplexer() -> Outcome {
    let w = LossWeights::default();
    let at = lambda_multiplexer(w.rate_target, &w);
    let below = lambda_multiplexer(w.rate_target - 1e-9, &w);
    check(
        at == w.lambda_alpha && below == w.lambda_beta,
        format!("lambda(R*) = {at}, lambda(R* - 1e-9) = {below}"),
    )
}

// 9, 10 -------------------------------------------------------------------

struct SeedRun {
    seed: u64,
    pre_first: f64,
    pre_last: f64,
    pre_bpp: f64,
    pre_lpips: f64,
    ft_bpp: f64,
    ft_lpips: f64,
    steered: usize,
    final_epoch: usize,
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn held_out_scores(codec: &Codec, fe: &FeatureExtractor, data: &Dataset) -> (f64, f64) {
    let (mut bpp, mut lp) = (0.0, 0.0);
    for i in 0..data.len() {
        let x = data.image(i);
        let bytes = codec.compress(x).unwrap().bytes;
        let x_hat = codec.decompress(&bytes).unwrap();
        bpp += (bytes.len() * 8) as f64 / (x.shape()[1] * x.shape()[2]) as f64;
        lp += lpips_distance(fe, x, &x_hat);
    }
    (bpp / data.len() as f64, lp / data.len() as f64)
}

fn smoke_seed(seed: u64) -> poelic::error::Result<SeedRun> {
    let all = Dataset::synthetic(110, 192, &mut rng(1000 + seed));
    let (held_out, train) = all.split_at(10);
    let dir = tempfile::tempdir().unwrap();

    let pre_cfg = TrainConfig {
        seed,
        ..TrainConfig::load(&config_path("smoke_pretrain.toml"))?
    };
    let spe = steps_per_epoch(train.len(), pre_cfg.batch_size);
    let pre = run_training(Trainer::new(pre_cfg.clone(), spe)?, &train, &dir.path().join("pre"))?;
    let r = &pre.reports;
    let mean = |s: &[poelic::losses::LossReport]| s.iter().map(|x| x.total).sum::<f64>() / s.len() as f64;
    let fe = pre.trainer.features.clone();
    let (pre_bpp, pre_lpips) = held_out_scores(&pre.trainer.codec, &fe, &held_out);

    let ft_cfg = TrainConfig {
        seed,
        init_checkpoint: Some(dir.path().join("pre/final.safetensors")),
        ..TrainConfig::load(&config_path("smoke_finetune.toml"))?
    };
    let ft = run_training(Trainer::new(ft_cfg.clone(), spe)?, &train, &dir.path().join("ft"))?;
    let last_epoch = &ft.reports[ft.reports.len() - spe as usize..];
    let target = ft_cfg.rate_target;
    let steered = last_epoch
        .iter()
        .filter(|x| (x.rate_bpp - target).abs() <= STEER_BAND * target)
        .count();
    let (ft_bpp, ft_lpips) = held_out_scores(&ft.trainer.codec, &fe, &held_out);
    Ok(SeedRun {
        seed,
        pre_first: mean(&r[..10]),
        pre_last: mean(&r[r.len() - 10..]),
        pre_bpp,
        pre_lpips,
        ft_bpp,
        ft_lpips,
        steered,
        final_epoch: last_epoch.len(),
    })
}

/// The three smoke runs, shared by criteria 9 and 10.
fn smoke_runs() -> &'static Result<(Vec<SeedRun>, Duration), String> {
    static RUNS: std::sync::OnceLock<Result<(Vec<SeedRun>, Duration), String>> = std::sync::OnceLock::new();
    RUNS.get_or_init(|| {
        let t = Instant::now();
        let runs = (0..3).map(smoke_seed).collect::<poelic::error::Result<Vec<_>>>();
        runs.map(|r| (r, t.elapsed())).map_err(|e| e.to_string())
    })
}

fn training_smoke() -> Outcome {
    let (runs, elapsed) = smoke_runs().as_ref().map_err(|e| format!("training failed: {e}"))?;
    let decreasing = runs.iter().filter(|r| r.pre_last < r.pre_first).count();
    let improved = runs
        .iter()
        .filter(|r| (r.ft_bpp - r.pre_bpp).abs() <= BPP_MATCH * r.pre_bpp && r.ft_lpips < r.pre_lpips)
        .count();
    let per_seed = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: loss {:.2}->{:.2}, bpp {:.3}->{:.3} ({:+.1}%), lpips {:.4}->{:.4}",
                r.seed,
                r.pre_first,
                r.pre_last,
                r.pre_bpp,
                r.ft_bpp,
                100.0 * (r.ft_bpp / r.pre_bpp - 1.0),
                r.pre_lpips,
                r.ft_lpips
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(
        decreasing == 3 && improved >= 2 && *elapsed <= SMOKE_BUDGET,
        format!(
            "pretrain loss decreasing in {decreasing}/3, perceptual gain at matched bpp in {improved}/3, {:.0}s; {per_seed}",
            elapsed.as_secs_f64()
        ),
    )
}

fn rate_steering() -> Outcome {
    let (runs, _) = smoke_runs().as_ref().map_err(|e| format!("training failed: {e}"))?;
    let ok = runs
        .iter()
        .all(|r| r.steered as f64 >= STEER_FRACTION * r.final_epoch as f64);
    let detail = runs
        .iter()
        .map(|r| format!("seed {}: {}/{}", r.seed, r.steered, r.final_epoch))
        .collect::<Vec<_>>()
        .join(", ");
    check(ok, format!("final-epoch batches within +-50% of R*: {detail}"))
}

// 11 ----------------------------------------------------------------------

/// MS-SSIM computed directly: 2-D Gaussian kernel, per-pixel statistics,
/// 2x2 mean pooling with zero padding on odd sides.
fn ms_ssim_reference(x: &Tensor<f32>, y: &Tensor<f32>) -> f64 {
    const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let sigma = 1.5f64;
    let mut k2 = [[0.0f64; 11]; 11];
    let mut ksum = 0.0;
    for (i, row) in k2.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    k2.iter_mut().flatten().for_each(|v| *v /= ksum);
    let (c1, c2) = (1e-4, 9e-4);
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut total = 0.0;
    for ch in 0..3 {
        let mut a: Vec<Vec<f64>> = (0..h).map(|i| (0..w).map(|j| x.at(&[ch, i, j]) as f64).collect()).collect();
        let mut b: Vec<Vec<f64>> = (0..h).map(|i| (0..w).map(|j| y.at(&[ch, i, j]) as f64).collect()).collect();
        let mut prod = 1.0;
        for (level, wt) in WEIGHTS.iter().enumerate() {
            let (ah, aw) = (a.len(), a[0].len());
            let (mut ssim_sum, mut cs_sum, mut n) = (0.0, 0.0, 0.0);
            for i in 0..=ah - 11 {
                for j in 0..=aw - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (di, krow) in k2.iter().enumerate() {
                        for (dj, &k) in krow.iter().enumerate() {
                            let (p, q) = (a[i + di][j + dj], b[i + di][j + dj]);
                            ma += k * p;
                            mb += k * q;
                            saa += k * p * p;
                            sbb += k * q * q;
                            sab += k * p * q;
                        }
                    }
                    let cs = (2.0 * (sab - ma * mb) + c2) / ((saa - ma * ma) + (sbb - mb * mb) + c2);
                    cs_sum += cs;
                    ssim_sum += cs * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
                    n += 1.0;
                }
            }
            if level == 4 {
                prod *= (ssim_sum / n).max(0.0).powf(*wt);
            } else {
                prod *= (cs_sum / n).max(0.0).powf(*wt);
                a = pool(&a);
                b = pool(&b);
            }
        }
        total += prod;
    }
    total / 3.0
}

fn pool(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (p.len(), p[0].len());
    let (ph, pw) = (h % 2, w % 2);
    let get = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            p[i as usize][j as usize]
        }
    };
    let (oh, ow) = ((h + 2 * ph) / 2, (w + 2 * pw) / 2);
    (0..oh)
        .map(|i| {
            (0..ow)
                .map(|j| {
                    let (i0, j0) = (2 * i as isize - ph as isize, 2 * j as isize - pw as isize);
                    (get(i0, j0) + get(i0 + 1, j0) + get(i0, j0 + 1) + get(i0 + 1, j0 + 1)) / 4.0
                })
                .collect()
        })
        .collect()
}

fn metrics() -> Outcome {
    let zero = Tensor::<f32>::zeros(&[3, 16, 16]);
    let offset = Tensor::<f32>::full(&[3, 16, 16], 0.1);
    let p = psnr(&zero, &offset).map_err(|e| e.to_string())?;
    let psnr_err = (p - 20.0).abs();
    assert!((gaussian_window().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut r = rng(15);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let (h, w) = (r.random_range(161..=200), r.random_range(161..=200));
        let x = synthetic_image(h, w, &mut r);
        let noise = Tensor::<f32>::randn(&[3, h, w], 0.02 + 0.03 * i as f64, &mut r);
        let y = x.zip_map(&noise, |a, n| (a + n).clamp(0.0, 1.0));
        let got = ms_ssim(&x, &y).map_err(|e| e.to_string())?;
        worst = worst.max((got - ms_ssim_reference(&x, &y)).abs());
    }
    check(
        psnr_err <= PSNR_TOL && worst <= MS_SSIM_TOL,
        format!("PSNR(0, 0.1) = {p:.9} dB; max |MS-SSIM - direct reference| {worst:.1e} over 10 pairs"),
    )
}
