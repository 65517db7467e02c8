//! The nine acceptance checks, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach stdout:
//! `cargo test -p pms-ssl --test acceptance`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pms_ssl::clustering::{kmeans_fit, multi_resolution_targets};
use pms_ssl::features::FeatureSource;
use pms_ssl::finetune::{beam_decode, ctc_loss, word_error_rate, DecodeConfig};
use pms_ssl::model::{
    attention_heads, build_attention_masks, codeword_distribution, forward, CodebookHead, ConvLayer, ModelConfig,
    Params, Window, Bound,
};
use pms_ssl::numerics::{grad_check, Tape, Tensor};
use pms_ssl::pipeline::{generate_toy_corpus, read_metrics, ExperimentConfig, Pipeline, ToyCorpusConfig};
use pms_ssl::ssl::{
    pretrain_step, sample_mask, supervised_losses, total_loss, Adam, MaskConfig, MaskSpec, OptimConfig, SslConfig,
    TrainUtterance,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Small model with a single conv layer of stride `stride`.
fn small_model(layers: usize, heads: usize, dim: usize, windows: Option<Vec<Window>>, k: Vec<usize>, sizes: Vec<usize>) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        num_heads: heads,
        model_dim: dim,
        ffn_mult: 2,
        conv_spec: vec![ConvLayer {
            channels: 4,
            kernel: 2,
            stride: 2,
        }],
        window_schedule: windows,
        supervised_layers: k,
        codebook_sizes: sizes,
        codebook_dim: 4,
        ..ModelConfig::desk()
    }
}

// 1 -------------------------------------------------------------------------

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = small_model(
        4,
        4,
        16,
        Some(vec![Window::Frames(1), Window::Frames(1), Window::Frames(2), Window::Frames(2)]),
        vec![2, 4],
        vec![3, 5],
    );
    cfg.validate().map_err(e2s)?;
    let params = Params::<f64>::init(&cfg, 5).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let wave: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let t = cfg.num_frames(wave.len());
    ensure(t == 8, || format!("expected T = 8, got {t}"))?;
    let mask = MaskSpec::from_starts(t, vec![1, 5], 2).map_err(e2s)?;
    let targets: Vec<Vec<u32>> = vec![(0..8).map(|i| i % 3).collect(), (0..8).map(|i| (i * 2) % 5).collect()];
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let point: Vec<Tensor<f64>> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let ssl = grad_check(
        |tape, vars| {
            let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()).collect());
            let out = forward(tape, &bound, &cfg, &wave, &mask.indices)?;
            let tg: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
            let losses = supervised_losses(tape, &bound, &cfg, &out, &tg, &mask)?;
            total_loss(tape, &losses)
        },
        &point,
        1e-5,
    )
    .map_err(e2s)?;
    let scalars: usize = point.iter().map(Tensor::len).sum();

    let mut worst_ctc = 0.0f64;
    for (i, labels) in [vec![1], vec![1, 2], vec![2, 2], vec![3, 1, 2]].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let logits = random_tensor(&mut rng, &[4, 4], 2.0);
        let r = grad_check(|tape, v| tape.ctc_loss(v[0], labels), &[logits], 1e-5).map_err(e2s)?;
        worst_ctc = worst_ctc.max(r.max_relative_error);
    }
    let elapsed = start.elapsed();
    ensure(ssl.max_relative_error < 1e-4, || {
        format!(
            "SSL loss max rel err {:.3e} at input {:?} ({})",
            ssl.max_relative_error, ssl.worst, names[ssl.worst.0]
        )
    })?;
    ensure(worst_ctc < 1e-4, || format!("CTC max rel err {worst_ctc:.3e}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "SSL loss over {scalars} parameters max rel err {:.2e}; CTC max rel err {:.2e}; {:.1?}",
        ssl.max_relative_error, worst_ctc, elapsed
    ))
}

// 2 -------------------------------------------------------------------------

/// Plain-loop attention of one head over an explicit key range.
fn slice_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], row: usize, lo: usize, hi: usize) -> Vec<f64> {
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    let scores: Vec<f64> = (lo..=hi)
        .map(|j| q[row].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; v[0].len()];
    for (w, j) in e.iter().zip(lo..=hi) {
        for (o, x) in out.iter_mut().zip(&v[j]) {
            *o += w / z * x;
        }
    }
    out
}

fn project(h: &Tensor<f64>, w: &Tensor<f64>, col0: usize, width: usize) -> Vec<Vec<f64>> {
    (0..h.rows())
        .map(|r| {
            (col0..col0 + width)
                .map(|c| (0..h.cols()).map(|i| h.at(r, i) * w.at(i, c)).sum())
                .collect()
        })
        .collect()
}

fn head_outputs(params: &Params<f64>, cfg: &ModelConfig, h: &Tensor<f64>) -> Result<Vec<Tensor<f64>>, String> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let x = tape.constant(h.clone());
    let plan = build_attention_masks(h.rows(), cfg).map_err(e2s)?;
    let heads = attention_heads(&mut tape, &p, cfg, 1, x, &plan).map_err(e2s)?;
    Ok(heads.into_iter().map(|v| tape.value(v).clone()).collect())
}

fn restricted_attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (heads, dim) = (4, 8);
    let dh = dim / heads;
    let mut worst = 0.0f64;
    let mut perturbations = 0;
    for case in 0..200 {
        let t = rng.gen_range(1..=32);
        let w = [0, 1, 3, 8, t][case % 5];
        let cfg = small_model(1, heads, dim, Some(vec![Window::Frames(w)]), vec![1], vec![2]);
        let params = Params::<f64>::init(&cfg, case as u64).map_err(e2s)?;
        let h = random_tensor(&mut rng, &[t, dim], 1.5);
        let out = head_outputs(&params, &cfg, &h)?;
        for (head, history) in [(heads - 2, true), (heads - 1, false)] {
            let q = project(&h, params.get("layers.1.attn.wq").unwrap(), head * dh, dh);
            let k = project(&h, params.get("layers.1.attn.wk").unwrap(), head * dh, dh);
            let v = project(&h, params.get("layers.1.attn.wv").unwrap(), head * dh, dh);
            for row in 0..t {
                let (lo, hi) = if history {
                    (row.saturating_sub(w), row)
                } else {
                    (row, (row + w).min(t - 1))
                };
                let want = slice_attention(&q, &k, &v, row, lo, hi);
                for (a, b) in out[head].row(row).iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        // Perturb keys on the forbidden side of a pivot row.
        let pivot = rng.gen_range(0..t);
        for (head, later) in [(heads - 2, true), (heads - 1, false)] {
            let mut h2 = h.clone();
            let mut touched = false;
            for r in 0..t {
                if (later && r > pivot) || (!later && r < pivot) {
                    for x in h2.row_mut(r) {
                        *x += rng.gen_range(-3.0..3.0);
                    }
                    touched = true;
                }
            }
            let out2 = head_outputs(&params, &cfg, &h2)?;
            let same = out[head].row(pivot).iter().zip(out2[head].row(pivot)).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure(same, || {
                format!(
                    "{} head row {pivot} changed under perturbation (T={t}, w={w})",
                    if later { "history" } else { "future" }
                )
            })?;
            perturbations += touched as usize;
        }
    }
    ensure(worst < 1e-10, || format!("slice oracle max abs diff {worst:.3e}"))?;
    Ok(format!(
        "200 instances, slice oracle max abs diff {worst:.2e}; {perturbations} causality perturbations bit-exact"
    ))
}

// 3 -------------------------------------------------------------------------

fn layer_losses(
    params: &Params<f64>,
    cfg: &ModelConfig,
    wave: &[f64],
    targets: &[Vec<u32>],
    mask: &MaskSpec,
) -> Result<Vec<u64>, String> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| true);
    let out = forward(&mut tape, &p, cfg, wave, &mask.indices).map_err(e2s)?;
    let tg: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
    let losses = supervised_losses(&mut tape, &p, cfg, &out, &tg, mask).map_err(e2s)?;
    Ok(losses.iter().map(|l| tape.value(l.loss).item().to_bits()).collect())
}

fn masked_only_loss() -> Outcome {
    let cfg = small_model(
        2,
        4,
        8,
        Some(vec![Window::Frames(2), Window::Frames(4)]),
        vec![1, 2],
        vec![3, 6],
    );
    let params = Params::<f64>::init(&cfg, 3).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mask_cfg = MaskConfig { p: 0.08, l: 10 };
    let mut masked_total = 0;
    let mut nonempty = 0;
    for draw in 0..100u64 {
        let t = rng.gen_range(20..=60);
        let wave: Vec<f64> = (0..2 * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = sample_mask(t, &mask_cfg, draw).map_err(e2s)?;
        let targets: Vec<Vec<u32>> = cfg
            .codebook_sizes
            .iter()
            .map(|&c| (0..t).map(|_| rng.gen_range(0..c as u32)).collect())
            .collect();
        let mut mutated = targets.clone();
        for (tg, &c) in mutated.iter_mut().zip(&cfg.codebook_sizes) {
            for (i, x) in tg.iter_mut().enumerate() {
                if !mask.contains(i) {
                    *x = (*x + rng.gen_range(1..c as u32)) % c as u32;
                }
            }
        }
        let a = layer_losses(&params, &cfg, &wave, &targets, &mask)?;
        let b = layer_losses(&params, &cfg, &wave, &mutated, &mask)?;
        ensure(a == b, || format!("draw {draw}: per-layer losses changed"))?;
        masked_total += mask.indices.len();
        nonempty += !mask.is_empty() as usize;
    }
    Ok(format!(
        "100 mask draws ({nonempty} non-empty, {masked_total} masked frames), per-layer losses bit-identical"
    ))
}

// 4 -------------------------------------------------------------------------

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn codeword_distribution_validity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for draw in 0..10_000 {
        let d = rng.gen_range(1..=12);
        let de = rng.gen_range(1..=8);
        let c = rng.gen_range(2..=20);
        let proj = random_tensor(&mut rng, &[d, de], 1.0);
        let emb = random_tensor(&mut rng, &[c, de], 1.0);
        let o: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tau = rng.gen_range(0.02..2.0);
        let base = CodebookHead::new(proj.clone(), emb.clone(), tau).map_err(e2s)?;
        let p = match codeword_distribution(&o, &base) {
            Ok(p) => p,
            // A·o = 0 has no defined cosine; redraw-free skip is not expected
            // with continuous draws.
            Err(e) => return Err(format!("draw {draw}: {e}")),
        };
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        let top = argmax(&p);
        for factor in [0.1, 0.5, 3.0, 10.0] {
            let head = CodebookHead::new(proj.clone(), emb.clone(), tau * factor).map_err(e2s)?;
            let q = codeword_distribution(&o, &head).map_err(e2s)?;
            worst = worst.max((q.iter().sum::<f64>() - 1.0).abs());
            ensure(argmax(&q) == top, || format!("draw {draw}: argmax moved when tau scaled by {factor}"))?;
        }
    }
    ensure(worst < 1e-9, || format!("sum deviates from 1 by {worst:.3e}"))?;
    Ok(format!("10000 draws x 5 temperatures, max |sum - 1| = {worst:.2e}, argmax invariant"))
}

// 5 -------------------------------------------------------------------------

/// Best 2-partition of a small 1-D set by exhaustive search.
fn best_two_partition(xs: &[f64]) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for bits in 1..(1u32 << xs.len()) - 1 {
        let (a, b): (Vec<f64>, Vec<f64>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (i, &x) in xs.iter().enumerate() {
                if bits >> i & 1 == 1 {
                    a.push(x)
                } else {
                    b.push(x)
                }
            }
            (a, b)
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let sse: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
        if sse < best.0 {
            best = (sse, ma.min(mb), ma.max(mb));
        }
    }
    (best.1, best.2)
}

fn clustering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut iterations = 0;
    for set in 0..100 {
        let n = rng.gen_range(10..=120);
        let d = rng.gen_range(1..=5);
        let k = rng.gen_range(1..=n.min(8));
        let pts = random_tensor(&mut rng, &[n, d], 5.0);
        let model = kmeans_fit(&pts, k, 50, set).map_err(e2s)?;
        let hist = model.inertia_history();
        iterations += hist.len();
        for w in hist.windows(2) {
            ensure(w[1] <= w[0], || format!("dataset {set}: inertia rose {} -> {}", w[0], w[1]))?;
        }
    }

    let xs = [0.0, 1.0, 10.0, 11.0];
    let (lo, hi) = best_two_partition(&xs);
    let pts = Tensor::new([4, 1], xs.to_vec()).unwrap();
    let model = kmeans_fit(&pts, 2, 50, 0).map_err(e2s)?;
    let mut c: Vec<f64> = model.centroids().data().to_vec();
    c.sort_by(f64::total_cmp);
    ensure(c == vec![lo, hi] && lo == 0.5 && hi == 10.5, || format!("centroids {c:?}, oracle {{{lo}, {hi}}}"))?;

    let corpus: Vec<Tensor<f64>> = (0..8).map(|_| random_tensor(&mut rng, &[100, 6], 3.0)).collect();
    let sets = multi_resolution_targets(&corpus, FeatureSource::EncoderLayer(6), &[100, 300, 500], 0.8, 20, 9).map_err(e2s)?;
    for k in [100, 300, 500] {
        let s = sets.get(&k).ok_or_else(|| format!("no {k}-cluster set"))?;
        ensure(s.model.k() == k && s.targets.codebook_size == k, || format!("{k}-cluster set has wrong size"))?;
        ensure(s.targets.labels.iter().flatten().all(|&l| (l as usize) < k), || format!("label out of range for k={k}"))?;
        ensure(s.targets.labels.iter().map(Vec::len).sum::<usize>() == 800, || "labels do not cover corpus".into())?;
    }
    Ok(format!(
        "100 datasets ({iterations} Lloyd iterations) monotone; {{0,1,10,11}} -> {{{lo}, {hi}}}; 640 sampled frames -> k = 100/300/500"
    ))
}

// 6 -------------------------------------------------------------------------

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|x| x - z).collect()
}

/// Probability of every collapsed label sequence, by path enumeration.
fn path_posteriors(logits: &Tensor<f64>) -> HashMap<Vec<usize>, f64> {
    let logp: Vec<Vec<f64>> = (0..logits.rows()).map(|t| log_softmax_row(logits.row(t))).collect();
    let (t_len, classes) = (logits.rows(), logits.cols());
    let mut out = HashMap::new();
    let mut path = vec![0usize; t_len];
    loop {
        let lp: f64 = path.iter().enumerate().map(|(t, &c)| logp[t][c]).sum();
        let mut y = Vec::new();
        let mut prev = usize::MAX;
        for &c in &path {
            if c != 0 && c != prev {
                y.push(c);
            }
            prev = c;
        }
        *out.entry(y).or_insert(0.0) += lp.exp();
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return out;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

fn label_sequences(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut all = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 1..=v {
                let mut s2: Vec<usize> = s.clone();
                s2.push(c);
                next.push(s2);
            }
        }
        all.extend(next.iter().cloned());
        frontier = next;
    }
    all
}

fn ctc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut infeasible = 0;
    for v in 1..=4 {
        for t in 1..=5 {
            let logits = random_tensor(&mut rng, &[t, v + 1], 2.0);
            let post = path_posteriors(&logits);
            for labels in label_sequences(v, 3) {
                let p = post.get(&labels).copied().unwrap_or(0.0);
                match ctc_loss(&logits, &labels) {
                    Ok(loss) => {
                        ensure(p > 0.0, || format!("loss {loss} for unreachable {labels:?} at T={t}"))?;
                        worst = worst.max((loss - (-p.ln())).abs());
                        checked += 1;
                    }
                    Err(_) => {
                        ensure(p == 0.0, || format!("rejected reachable {labels:?} at T={t}, V={v}"))?;
                        infeasible += 1;
                    }
                }
            }
        }
    }
    ensure(worst < 1e-8, || format!("CTC loss vs enumeration max abs diff {worst:.3e}"))?;

    let mut beam_cases = 0;
    for case in 0..300 {
        let t = rng.gen_range(1..=4);
        let v = rng.gen_range(1..=4);
        let logits = random_tensor(&mut rng, &[t, v + 1], 3.0);
        let post = path_posteriors(&logits);
        let (best, _) = post
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(y, p)| (y.clone(), *p))
            .unwrap();
        let cfg = DecodeConfig {
            beam: 10_000,
            ..DecodeConfig::default()
        };
        let hyp = beam_decode(&logits, &cfg).map_err(e2s)?;
        ensure(hyp.symbols == best, || format!("case {case}: beam {:?} vs exhaustive {best:?}", hyp.symbols))?;
        beam_cases += 1;
    }
    Ok(format!(
        "{checked} feasible + {infeasible} infeasible (T, labels, V) instances, max abs diff {worst:.2e}; beam = exhaustive argmax on {beam_cases} instances"
    ))
}

// 7 -------------------------------------------------------------------------

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config(corpus: &Path, out: &Path) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(&workspace_root().join("configs/toy.toml")).map_err(e2s)?;
    cfg.corpus.unlabeled = corpus.join("unlabeled");
    cfg.corpus.labeled = corpus.join("labeled");
    cfg.corpus.transcripts = corpus.join("labeled/transcripts.tsv");
    cfg.output_dir = out.to_path_buf();
    Ok(cfg)
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn end_to_end_toy_run() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let corpus = tmp.path().join("corpus");
    generate_toy_corpus(&corpus, &ToyCorpusConfig::default()).map_err(e2s)?;

    let start = Instant::now();
    let mut first = Pipeline::open(toy_config(&corpus, &tmp.path().join("run-a"))?).map_err(e2s)?;
    let summary = first.run_all().map_err(e2s)?;
    let elapsed = start.elapsed();

    let metrics = read_metrics(&summary.epoch_dir.join("iter2/metrics.txt")).map_err(e2s)?;
    let lpf: Vec<f64> = metrics
        .iter()
        .map(|m| m["loss_per_frame"].parse::<f64>().unwrap())
        .collect();
    ensure(lpf.len() >= 20, || format!("only {} iteration-2 steps", lpf.len()))?;
    let early = mean(&lpf[..10]);
    let late = mean(&lpf[lpf.len() - 10..]);
    let drop = 1.0 - late / early;

    let ft = read_metrics(&summary.epoch_dir.join("finetune/metrics.txt")).map_err(e2s)?;
    let cer = ft
        .iter()
        .rev()
        .find_map(|m| m.get("train_cer"))
        .and_then(|c| c.parse::<f64>().ok())
        .ok_or("no training CER recorded")?;

    let mut second = Pipeline::open(toy_config(&corpus, &tmp.path().join("run-b"))?).map_err(e2s)?;
    let again = second.run_all().map_err(e2s)?;
    let a = files_under(&summary.epoch_dir);
    let b = files_under(&again.epoch_dir);
    let differing: Vec<&PathBuf> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();

    ensure(elapsed < Duration::from_secs(30 * 60), || format!("run took {elapsed:?}"))?;
    ensure(drop >= 0.20, || format!("iteration-2 loss/frame {early:.4} -> {late:.4}, drop {:.1}%", drop * 100.0))?;
    ensure(cer == 0.0, || format!("final training CER {cer}"))?;
    ensure(a.len() == b.len() && differing.is_empty(), || format!("runs differ in {differing:?}"))?;
    Ok(format!(
        "run-all {elapsed:.1?}; iteration-2 loss/frame {early:.3} -> {late:.3} (-{:.0}%); training CER 0; {} artifacts bit-identical across runs",
        drop * 100.0,
        a.len()
    ))
}

// 8 -------------------------------------------------------------------------

fn step_losses(cfg: &ModelConfig, steps: usize) -> Result<(Vec<u64>, Params<f64>), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cfg.codebook_sizes[0] as u32;
    let data: Vec<TrainUtterance<f64>> = (0..4)
        .map(|i| {
            let n = 2 * rng.gen_range(30..=50);
            let t = cfg.num_frames(n);
            TrainUtterance {
                id: format!("u{i}"),
                wave: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                targets: vec![(0..t).map(|_| rng.gen_range(0..c)).collect()],
            }
        })
        .collect();
    let ssl = SslConfig {
        mask: MaskConfig { p: 0.08, l: 10 },
        optim: OptimConfig::with_steps(steps),
        seed: 8,
    };
    let mut params = Params::<f64>::init(cfg, 8).map_err(e2s)?;
    let mut adam = Adam::new(&ssl.optim);
    let mut losses = Vec::new();
    for step in 1..=steps {
        let batch: Vec<&TrainUtterance<f64>> = vec![&data[step % 4], &data[(step + 1) % 4]];
        let m = pretrain_step(&mut params, &mut adam, cfg, &ssl, &batch, step, step).map_err(e2s)?;
        losses.push(m.loss.to_bits());
    }
    Ok((losses, params))
}

fn baseline_regression_guard() -> Outcome {
    let reference = small_model(4, 4, 16, None, vec![4], vec![7]);
    let general = small_model(4, 4, 16, Some(vec![Window::Unbounded; 4]), vec![4], vec![7]);
    let plan = build_attention_masks(10, &general).map_err(e2s)?;
    ensure((0..4).any(|h| plan.head_mask(1, h).is_some()), || "unbounded windows produced no masked heads".into())?;
    let (a, pa) = step_losses(&reference, 30)?;
    let (b, pb) = step_losses(&general, 30)?;
    ensure(a == b, || {
        let i = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(0);
        format!("losses diverge at step {}", i + 1)
    })?;
    let same_params = pa.iter().all(|(n, t)| {
        pb.get(n)
            .map(|u| t.data().iter().zip(u.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
            .unwrap_or(false)
    });
    ensure(same_params, || "parameters differ after training".into())?;
    Ok("30 steps: per-step losses and final parameters bit-identical to the single-codebook, full-attention reference".into())
}

// 9 -------------------------------------------------------------------------

fn edit_distance(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + (a[i - 1] != b[j - 1]) as usize;
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn wer_arithmetic() -> Outcome {
    let r = word_error_rate("a x c", "a b c").rate();
    ensure(r == Some(1.0 / 3.0), || format!("'a x c' vs 'a b c' gave {r:?}"))?;
    let d = word_error_rate("", "a b c").rate();
    ensure(d == Some(1.0), || format!("all-deletion gave {d:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let words = ["a", "b", "c", "dd", "e"];
    for case in 0..100 {
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<&str> {
            (0..rng.gen_range(0..=8)).map(|_| words[rng.gen_range(0..words.len())]).collect()
        };
        let hyp = sentence(&mut rng);
        let mut reference = sentence(&mut rng);
        if reference.is_empty() {
            reference.push("a");
        }
        let got = word_error_rate(&hyp.join(" "), &reference.join(" "));
        let want = edit_distance(&hyp, &reference);
        ensure(got.errors() == want && got.reference_len == reference.len(), || {
            format!("case {case}: {} errors, oracle {want}", got.errors())
        })?;
        ensure(got.rate() == Some(want as f64 / reference.len() as f64), || format!("case {case}: rate mismatch"))?;
    }
    Ok("1/3 and 1.0 exact; 100 random pairs match the DP oracle".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("restricted-attention oracle", restricted_attention_oracle),
        ("masked-only loss", masked_only_loss),
        ("codeword distribution", codeword_distribution_validity),
        ("clustering", clustering),
        ("CTC oracle", ctc_oracle),
        ("end-to-end toy run", end_to_end_toy_run),
        ("baseline regression guard", baseline_regression_guard),
        ("WER arithmetic", wer_arithmetic),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("[PASS] {n}. {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {n}. {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
