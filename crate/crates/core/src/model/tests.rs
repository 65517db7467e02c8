use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{Tape, Tensor};

fn tiny(windows: Option<Vec<Window>>) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 4,
        model_dim: 8,
        ffn_mult: 2,
        conv_spec: vec![
            ConvLayer { channels: 4, kernel: 4, stride: 2 },
            ConvLayer { channels: 4, kernel: 2, stride: 2 },
        ],
        activation: Default::default(),
        sample_rate: 16_000,
        window_schedule: windows,
        supervised_layers: vec![1, 2],
        codebook_sizes: vec![3, 4],
        codebook_dim: 4,
        temperature: 0.1,
    }
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::new([r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn history_window_by_hand() {
    let m = window_mask(5, Window::Frames(1), true);
    let row2: Vec<usize> = (0..5).filter(|&c| m[2 * 5 + c]).collect();
    assert_eq!(row2, vec![1, 2]);
    let f = window_mask(5, Window::Frames(1), false);
    let row4: Vec<usize> = (0..5).filter(|&c| f[4 * 5 + c]).collect();
    assert_eq!(row4, vec![4]);
}

#[test]
fn covering_window_stops_truncating() {
    for t in 1..8 {
        assert!(window_mask(t, Window::Unbounded, true).iter().all(|&b| b));
        for history in [true, false] {
            let m = window_mask(t, Window::Frames(t - 1), history);
            assert_eq!(m, window_mask(t, Window::Frames(t + 5), history));
            for j in 0..t {
                let want = |c: usize| if history { c <= j } else { c >= j };
                assert!((0..t).all(|c| m[j * t + c] == want(c)));
            }
        }
    }
}

#[test]
fn plan_marks_only_last_two_heads() {
    let cfg = tiny(Some(vec![Window::Frames(1), Window::Frames(2)]));
    let plan = build_attention_masks(6, &cfg).unwrap();
    assert!(plan.head_mask(1, 0).is_none());
    assert!(plan.head_mask(1, 1).is_none());
    assert!(plan.head_mask(1, 2).is_some());
    assert!(plan.allowed(2, 2, 3, 1) && !plan.allowed(2, 2, 3, 0) && !plan.allowed(2, 2, 3, 4));
    assert!(plan.allowed(2, 3, 3, 5) && !plan.allowed(2, 3, 3, 2));
    let none = build_attention_masks(6, &tiny(None)).unwrap();
    assert!((0..4).all(|h| none.head_mask(1, h).is_none()));
    assert!(build_attention_masks(0, &cfg).is_err());
}

/// Attention of one head over the explicit key/value slice `[lo, hi]`.
fn slice_attention(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], lo: usize, hi: usize) -> Vec<f64> {
    let d = q.len() as f64;
    let scores: Vec<f64> = (lo..=hi)
        .map(|k| q.iter().zip(&keys[k]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (i, k) in (lo..=hi).enumerate() {
        for (o, v) in out.iter_mut().zip(&values[k]) {
            *o += e[i] / z * v;
        }
    }
    out
}

fn project_head(h: &Tensor<f64>, w: &Tensor<f64>, head: usize, dh: usize) -> Vec<Vec<f64>> {
    (0..h.rows())
        .map(|r| {
            (head * dh..(head + 1) * dh)
                .map(|c| (0..h.cols()).map(|i| h.at(r, i) * w.at(i, c)).sum())
                .collect()
        })
        .collect()
}

#[test]
fn restricted_heads_match_slice_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for w in [0, 1, 3, 9] {
        let cfg = tiny(Some(vec![Window::Frames(w), Window::Frames(w.max(2))]));
        let params = Params::<f64>::init(&cfg, w as u64).unwrap();
        let t = 7;
        let h = rand_matrix(&mut rng, t, 8);
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let hv = tape.constant(h.clone());
        let plan = build_attention_masks(t, &cfg).unwrap();
        let heads = attention_heads(&mut tape, &p, &cfg, 1, hv, &plan).unwrap();
        for (head, history) in [(2, Some(true)), (3, Some(false)), (0, None)] {
            let q = project_head(&h, params.get("layers.1.attn.wq").unwrap(), head, 2);
            let k = project_head(&h, params.get("layers.1.attn.wk").unwrap(), head, 2);
            let v = project_head(&h, params.get("layers.1.attn.wv").unwrap(), head, 2);
            let got = tape.value(heads[head]);
            for j in 0..t {
                let (lo, hi) = match history {
                    Some(true) => (j.saturating_sub(w), j),
                    Some(false) => (j, (j + w).min(t - 1)),
                    None => (0, t - 1),
                };
                let want = slice_attention(&q[j], &k, &v, lo, hi);
                for (a, b) in got.row(j).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-10, "w={w} head={head} row={j}");
                }
            }
        }
    }
}

#[test]
fn history_head_is_causal_and_future_head_anticausal() {
    let cfg = tiny(Some(vec![Window::Frames(2), Window::Frames(3)]));
    let params = Params::<f64>::init(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let t = 9;
    let base = rand_matrix(&mut rng, t, 8);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let plan = build_attention_masks(t, &cfg).unwrap();
        let heads = attention_heads(&mut tape, &p, &cfg, 2, xv, &plan).unwrap();
        (tape.value(heads[2]).clone(), tape.value(heads[3]).clone())
    };
    let (hist0, fut0) = run(&base);
    for pos in 0..t {
        let mut x = base.clone();
        for v in x.row_mut(pos) {
            *v += 0.5;
        }
        let (hist, fut) = run(&x);
        for j in 0..pos {
            assert_eq!(hist.row(j), hist0.row(j), "history row {j} saw position {pos}");
        }
        for j in pos + 1..t {
            assert_eq!(fut.row(j), fut0.row(j), "future row {j} saw position {pos}");
        }
    }
}

#[test]
fn single_frame_attention_is_value_projection() {
    let cfg = tiny(Some(vec![Window::Frames(0), Window::Frames(1)]));
    let params = Params::<f64>::init(&cfg, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = rand_matrix(&mut rng, 1, 8);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let hv = tape.constant(h.clone());
    let plan = build_attention_masks(1, &cfg).unwrap();
    let out = multi_scale_attention(&mut tape, &p, &cfg, 1, hv, &plan).unwrap();
    let wv = tape.constant(params.get("layers.1.attn.wv").unwrap().clone());
    let wo = tape.constant(params.get("layers.1.attn.wo").unwrap().clone());
    let v = tape.matmul(hv, wv).unwrap();
    let want = tape.matmul(v, wo).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(want)) < 1e-14);
}

#[test]
fn zero_layers_is_identity() {
    let mut cfg = tiny(None);
    cfg.num_layers = 0;
    cfg.supervised_layers.clear();
    cfg.codebook_sizes.clear();
    let params = Params::<f64>::init(&cfg, 0).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let x = tape.constant(Tensor::full([3, 8], 0.25));
    let plan = build_attention_masks(3, &cfg).unwrap();
    let out = encoder_forward(&mut tape, &p, &cfg, x, &plan).unwrap();
    assert_eq!(out.top(), x);
}

#[test]
fn conv_encoder_frame_counts_and_linearity() {
    let cfg = tiny(None);
    let mut params = Params::<f64>::init(&cfg, 0).unwrap();
    for name in ["conv.0.bias", "conv.1.bias", "feat_ln.beta", "proj.bias"] {
        let shape = params.get(name).unwrap().shape().to_vec();
        params.insert(name, Tensor::zeros(shape));
    }
    for n in [8, 16, 40] {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let w = tape.constant(Tensor::zeros([n, 1]));
        let y = conv_encode(&mut tape, &p, &cfg, w).unwrap();
        assert_eq!(tape.shape(y), &[n / 4, 8]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let w = tape.constant(Tensor::zeros([3, 1]));
    let err = conv_encode(&mut tape, &p, &cfg, w).unwrap_err();
    assert!(err.to_string().contains("at least 4 samples"), "{err}");
}

#[test]
fn masking_replaces_only_listed_rows() {
    let cfg = tiny(None);
    let params = Params::<f64>::init(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames = rand_matrix(&mut rng, 6, 8);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, |_| false);
    let f = tape.constant(frames.clone());
    let same = apply_mask(&mut tape, &p, f, &[]).unwrap();
    assert_eq!(tape.value(same), &frames);
    let m = apply_mask(&mut tape, &p, f, &[1, 4]).unwrap();
    let emb = params.get("mask_emb").unwrap().data();
    for r in 0..6 {
        let want = if r == 1 || r == 4 { emb } else { frames.row(r) };
        assert_eq!(tape.value(m).row(r), want);
    }
    let all = apply_mask(&mut tape, &p, f, &[0, 1, 2, 3, 4, 5]).unwrap();
    assert!((0..6).all(|r| tape.value(all).row(r) == emb));
    assert!(apply_mask(&mut tape, &p, f, &[6]).is_err());
}

#[test]
fn forward_outputs_are_finite() {
    let cfg = tiny(Some(vec![Window::Frames(1), Window::Frames(3)]));
    let params = Params::<f64>::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(4..64);
        let wave: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let out = forward(&mut tape, &p, &cfg, &wave, &[0]).unwrap();
        assert_eq!(out.layers.len(), 2);
        for &l in &out.layers {
            assert_eq!(tape.shape(l), &[n / 4, 8]);
            assert!(tape.value(l).is_finite());
        }
    }
}

#[test]
fn forward_runs_in_f32() {
    let cfg = tiny(Some(vec![Window::Frames(1), Window::Frames(3)]));
    let params = Params::<f64>::init(&cfg, 9).unwrap();
    let wave: Vec<f64> = (0..32).map(|i| (i as f64 * 0.3).sin()).collect();
    let mut t64 = Tape::new();
    let p64 = params.bind(&mut t64, |_| false);
    let o64 = forward(&mut t64, &p64, &cfg, &wave, &[]).unwrap();

    let p32 = params.cast::<f32>();
    let mut t32 = Tape::new();
    let b32 = p32.bind(&mut t32, |_| false);
    let w32: Vec<f32> = wave.iter().map(|&x| x as f32).collect();
    let o32 = forward(&mut t32, &b32, &cfg, &w32, &[]).unwrap();
    let diff = t64.value(o64.top()).max_abs_diff(&t32.value(o32.top()).cast());
    assert!(diff < 1e-3, "{diff}");
}
