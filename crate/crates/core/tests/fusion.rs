use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use humanrf::config::Config;
use humanrf::diffcore::{ParamStore, Tape, Tensor, Var};
use humanrf::featbank::PointFeatures;
use humanrf::fusion::{Fusion, Reduce, NUM_TOKENS};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn fusion(c: usize, heads: usize, d: usize, reduce: Reduce) -> (ParamStore, Fusion) {
    let mut store = ParamStore::new();
    let f = Fusion::with_dims(&mut store, [5, 6, 7], c, heads, d, reduce, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (store, f)
}

fn tokens(tape: &mut Tape, p: usize, c: usize, seed: u64) -> Vec<Var> {
    (0..NUM_TOKENS)
        .map(|i| tape.constant(random(&[p, c], seed + i as u64)))
        .collect()
}

#[test]
fn default_fusion_widths() {
    let cfg = Config::default();
    assert_eq!(cfg.token_channels, 32);
    assert_eq!(cfg.heads, 3);
    let mut store = ParamStore::new();
    let f = Fusion::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(f.output_dim(), 96);
}

#[test]
fn attention_rows_are_stochastic() {
    let (store, f) = fusion(8, 2, 4, Reduce::Concat);
    let mut tape = Tape::new();
    let bp = store.bind(&mut tape, false);
    let toks = tokens(&mut tape, 10_000, 8, 10);
    let att = f.attend(&mut tape, &bp, &toks).unwrap();
    for w in &att.weights {
        for row in tape.value(*w).data().chunks(NUM_TOKENS) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }
}

#[test]
fn softmax_ignores_a_shared_logit_shift() {
    let mut tape = Tape::new();
    let x = random(&[200, NUM_TOKENS], 3);
    let mut shifted = x.clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 37.5);
    let a = tape.constant(x);
    let b = tape.constant(shifted);
    let sa = tape.softmax(a, 1).unwrap();
    let sb = tape.softmax(b, 1).unwrap();
    for (p, q) in tape.value(sa).data().iter().zip(tape.value(sb).data()) {
        assert!((p - q).abs() <= 1e-12);
    }
}

#[test]
fn dominant_key_takes_all_weight() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap());
    let s = tape.softmax(x, 1).unwrap();
    assert!(tape.value(s).data()[0] >= 1.0 - 1e-20);
}

/// Keys set to zero and values to the identity map.
fn collapsed(c: usize) -> (ParamStore, Fusion) {
    let (mut store, f) = fusion(c, 1, c, Reduce::Concat);
    store.get_mut(f.k.w).data_mut().fill(0.0);
    let v = store.get_mut(f.v.w).data_mut();
    v.fill(0.0);
    for i in 0..c {
        v[i * c + i] = 1.0;
    }
    (store, f)
}

#[test]
fn equal_keys_give_the_mean_of_values() {
    let c = 6;
    let (store, f) = collapsed(c);
    let mut tape = Tape::new();
    let bp = store.bind(&mut tape, false);
    let toks = tokens(&mut tape, 7, c, 20);
    let att = f.attend(&mut tape, &bp, &toks).unwrap();
    let third = 1.0 / 3.0;
    for w in &att.weights {
        assert!(tape.value(*w).data().iter().all(|&x| x == third));
    }
    let vals: Vec<&[f64]> = toks.iter().map(|&t| tape.value(t).data()).collect();
    for h in &att.heads {
        for (i, &got) in tape.value(*h).data().iter().enumerate() {
            let want = third * vals[0][i] + third * vals[1][i] + third * vals[2][i];
            assert_eq!(got, want);
        }
    }
}

#[test]
fn zero_features_and_zero_bias_give_zero_tokens() {
    let (mut store, f) = fusion(8, 2, 4, Reduce::Concat);
    for p in &f.proj {
        store.get_mut(p.b.expect("projection bias")).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let bp = store.bind(&mut tape, false);
    let pf = PointFeatures {
        global: tape.constant(Tensor::zeros(&[3, 5])),
        point: tape.constant(Tensor::zeros(&[3, 6])),
        pixel: tape.constant(Tensor::zeros(&[3, 7])),
    };
    for t in f.make_tokens(&mut tape, &bp, &pf).unwrap() {
        assert!(tape.value(t).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn permuting_tokens_permutes_output_blocks() {
    let c = 8;
    let (store, f) = fusion(c, 2, 4, Reduce::Concat);
    let mut tape = Tape::new();
    let bp = store.bind(&mut tape, false);
    let toks = tokens(&mut tape, 5, c, 30);
    let perm = [2, 0, 1];
    let permuted: Vec<Var> = perm.iter().map(|&i| toks[i]).collect();
    let a = f.attend(&mut tape, &bp, &toks).unwrap();
    let b = f.attend(&mut tape, &bp, &permuted).unwrap();
    let fa = f.fuse(&mut tape, &a).unwrap();
    let fb = f.fuse(&mut tape, &b).unwrap();
    assert_eq!(tape.shape(fa), &[5, 3 * c]);
    let (va, vb) = (tape.value(fa).data(), tape.value(fb).data());
    for row in 0..5 {
        for (j, &src) in perm.iter().enumerate() {
            for k in 0..c {
                let x = va[row * 3 * c + src * c + k];
                let y = vb[row * 3 * c + j * c + k];
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mean_reduction_averages_tokens() {
    let c = 8;
    let (store, f) = fusion(c, 2, 4, Reduce::Mean);
    assert_eq!(f.output_dim(), c);
    let mut tape = Tape::new();
    let bp = store.bind(&mut tape, false);
    let toks = tokens(&mut tape, 4, c, 40);
    let att = f.attend(&mut tape, &bp, &toks).unwrap();
    let m = f.fuse(&mut tape, &att).unwrap();
    let t: Vec<&[f64]> = att.tokens.iter().map(|&v| tape.value(v).data()).collect();
    for (i, &x) in tape.value(m).data().iter().enumerate() {
        assert!((x - (t[0][i] + t[1][i] + t[2][i]) / 3.0).abs() < 1e-14);
    }
}

#[test]
fn indivisible_channels_are_rejected() {
    let mut cfg = Config::default();
    cfg.head_dim = 0;
    cfg.token_channels = 32;
    cfg.heads = 3;
    let mut store = ParamStore::new();
    assert!(Fusion::new(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}
