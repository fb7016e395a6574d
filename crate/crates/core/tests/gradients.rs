//! Finite-difference verification for every tape primitive and the layer
//! builders, in f64.

use fallcast_core::autodiff::layers::{
    batch_norm, bilstm, convlstm_cell, graph_conv, lstm_cell, lstm_scan, BnMode, ConvLstmWeights,
    GraphConvWeights, LstmWeights, MaskMode,
};
use fallcast_core::autodiff::{grad_check, Tape, Tensor};
use fallcast_core::rng;
use rand::Rng;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 0.5 * rng::normal(&mut r)).collect())
}

fn randu(shape: Vec<usize>, lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect())
}

/// Reduce any tensor to a scalar through a fixed weighted sum, so gradients
/// reach every output entry with distinct sensitivities.
fn spread(tape: &mut Tape<f64>, v: fallcast_core::autodiff::Var) -> fallcast_core::autodiff::Var {
    let n = tape.value(v).numel();
    let shape = tape.value(v).shape().to_vec();
    let w = Tensor::new(
        shape,
        (0..n).map(|i| 0.3 + 0.07 * (i as f64).sin()).collect(),
    );
    let wv = tape.constant(w);
    let prod = tape.mul(v, wv).unwrap();
    tape.mean_all(prod)
}

macro_rules! check {
    ($name:ident, $inputs:expr, $builder:expr) => {
        #[test]
        fn $name() {
            let inputs = $inputs;
            let err = grad_check(&inputs, 42, EPS, $builder).unwrap();
            assert!(err < TOL, "max relative error {err}");
        }
    };
}

check!(grad_add, vec![randn(vec![3, 4], 1), randn(vec![3, 4], 2)], |t,
                                                                    v| {
    let s = t.add(v[0], v[1])?;
    Ok(spread(t, s))
});

check!(grad_sub, vec![randn(vec![5], 3), randn(vec![5], 4)], |t, v| {
    let s = t.sub(v[0], v[1])?;
    Ok(spread(t, s))
});

check!(grad_mul, vec![randn(vec![2, 3], 5), randn(vec![2, 3], 6)], |t,
                                                                    v| {
    let s = t.mul(v[0], v[1])?;
    Ok(spread(t, s))
});

check!(grad_affine, vec![randn(vec![7], 7)], |t, v| {
    let s = t.affine(v[0], -1.7, 0.3);
    Ok(spread(t, s))
});

check!(
    grad_scale_var,
    vec![randn(vec![4], 8), randn(vec![1], 9)],
    |t, v| {
        let s = t.scale_var(v[0], v[1])?;
        Ok(spread(t, s))
    }
);

check!(grad_relu, vec![randn(vec![9], 10)], |t, v| {
    let s = t.relu(v[0]);
    Ok(spread(t, s))
});

check!(grad_sigmoid, vec![randn(vec![6], 11)], |t, v| {
    let s = t.sigmoid(v[0]);
    Ok(spread(t, s))
});

check!(grad_tanh, vec![randn(vec![6], 12)], |t, v| {
    let s = t.tanh(v[0]);
    Ok(spread(t, s))
});

check!(grad_ln, vec![randu(vec![6], 0.2, 3.0, 13)], |t, v| {
    let s = t.ln(v[0]);
    Ok(spread(t, s))
});

check!(grad_clamp, vec![randn(vec![12], 14)], |t, v| {
    // keep entries away from the clamp boundaries so FD is valid
    let s = t.clamp(v[0], -3.0, 3.0);
    Ok(spread(t, s))
});

check!(
    grad_matmul,
    vec![randn(vec![3, 4], 15), randn(vec![4, 2], 16)],
    |t, v| {
        let s = t.matmul(v[0], v[1])?;
        Ok(spread(t, s))
    }
);

check!(
    grad_matmul_rank3,
    vec![randn(vec![2, 3, 4], 17), randn(vec![4, 5], 18)],
    |t, v| {
        let s = t.matmul(v[0], v[1])?;
        Ok(spread(t, s))
    }
);

check!(
    grad_dot,
    vec![randn(vec![5], 19), randn(vec![5], 20)],
    |t, v| {
        let s = t.dot(v[0], v[1])?;
        Ok(spread(t, s))
    }
);

check!(
    grad_bmm,
    vec![randn(vec![2, 3, 3], 21), randn(vec![2, 3, 4], 22)],
    |t, v| {
        let s = t.bmm(v[0], v[1])?;
        Ok(spread(t, s))
    }
);

check!(grad_bmm_const_left, vec![randn(vec![2, 3, 4], 23)], |t, v| {
    let s = t.bmm_const_left(randn(vec![3, 3], 24), v[0])?;
    Ok(spread(t, s))
});

check!(grad_mul_bcast_frames, vec![randn(vec![2, 3, 3], 25)], |t,
                                                               v| {
    let s = t.mul_bcast_frames(v[0], randn(vec![3, 3], 26))?;
    Ok(spread(t, s))
});

check!(grad_softmax, vec![randn(vec![3, 5], 27)], |t, v| {
    let s = t.softmax(v[0]);
    Ok(spread(t, s))
});

check!(grad_dropout, vec![randn(vec![40], 28)], |t, v| {
    // tape seed is fixed per evaluation, so the mask is identical across
    // the FD evaluations and the op is differentiable
    let s = t.dropout(v[0], 0.5);
    Ok(spread(t, s))
});

check!(
    grad_concat_last,
    vec![randn(vec![3, 2], 29), randn(vec![3, 4], 30)],
    |t, v| {
        let s = t.concat_last(&[v[0], v[1]])?;
        Ok(spread(t, s))
    }
);

check!(grad_slice_last, vec![randn(vec![3, 6], 31)], |t, v| {
    let s = t.slice_last(v[0], 1, 3)?;
    Ok(spread(t, s))
});

check!(grad_slice_first, vec![randn(vec![4, 3, 2], 32)], |t, v| {
    let s = t.slice_first(v[0], 2)?;
    Ok(spread(t, s))
});

check!(
    grad_stack_first,
    vec![randn(vec![3, 2], 33), randn(vec![3, 2], 34)],
    |t, v| {
        let s = t.stack_first(&[v[0], v[1]])?;
        Ok(spread(t, s))
    }
);

check!(grad_mean_except_last, vec![randn(vec![4, 3], 35)], |t, v| {
    let s = t.mean_except_last(v[0]);
    Ok(spread(t, s))
});

check!(grad_mean_mid, vec![randn(vec![2, 4, 3], 36)], |t, v| {
    let s = t.mean_mid(v[0])?;
    Ok(spread(t, s))
});

check!(grad_mean_all, vec![randn(vec![3, 3], 37)], |t, v| {
    Ok(t.mean_all(v[0]))
});

check!(grad_max_except_last, vec![randn(vec![5, 3], 38)], |t, v| {
    let s = t.max_except_last(v[0]);
    Ok(spread(t, s))
});

check!(
    grad_temporal_conv,
    vec![
        randn(vec![6, 3, 4], 39),
        randn(vec![5, 4, 2], 40),
        randn(vec![2], 41),
    ],
    |t, v| {
        let s = t.temporal_conv(v[0], v[1], Some(v[2]))?;
        Ok(spread(t, s))
    }
);

check!(
    grad_joint_conv,
    vec![
        randn(vec![5, 3], 42),
        randn(vec![3, 3, 4], 43),
        randn(vec![4], 44),
    ],
    |t, v| {
        let s = t.joint_conv(v[0], v[1], Some(v[2]))?;
        Ok(spread(t, s))
    }
);

check!(
    grad_channel_mul,
    vec![randn(vec![4, 3], 45), randn(vec![3], 46)],
    |t, v| {
        let s = t.channel_mul(v[0], v[1])?;
        Ok(spread(t, s))
    }
);

check!(
    grad_channel_add,
    vec![randn(vec![4, 3], 47), randn(vec![3], 48)],
    |t, v| {
        let s = t.channel_add(v[0], v[1])?;
        Ok(spread(t, s))
    }
);

check!(grad_rsqrt_eps, vec![randu(vec![6], 0.1, 2.0, 49)], |t, v| {
    let s = t.rsqrt_eps(v[0], 1e-5);
    Ok(spread(t, s))
});

check!(grad_transpose2, vec![randn(vec![3, 4], 50)], |t, v| {
    let s = t.transpose2(v[0])?;
    Ok(spread(t, s))
});

check!(
    grad_lstm_cell,
    vec![
        randn(vec![3], 51),
        randn(vec![4], 52),
        randn(vec![4], 53),
        randn(vec![3, 16], 54),
        randn(vec![4, 16], 55),
        randn(vec![16], 56),
    ],
    |t, v| {
        let w = LstmWeights {
            w_x: v[3],
            w_h: v[4],
            b: v[5],
            hidden: 4,
        };
        let (h, c) = lstm_cell(t, v[0], v[1], v[2], &w)?;
        let both = t.concat_last(&[h, c])?;
        Ok(spread(t, both))
    }
);

check!(
    grad_convlstm_cell,
    vec![
        randn(vec![5, 3], 57),
        randn(vec![5, 2], 58),
        randn(vec![5, 2], 59),
        randn(vec![3, 3, 8], 60),
        randn(vec![3, 2, 8], 61),
        randn(vec![8], 62),
    ],
    |t, v| {
        let w = ConvLstmWeights {
            w_x: v[3],
            w_h: v[4],
            b: v[5],
            hidden: 2,
        };
        let (h, c) = convlstm_cell(t, v[0], v[1], v[2], &w)?;
        let both = t.concat_last(&[h, c])?;
        Ok(spread(t, both))
    }
);

check!(
    grad_batch_norm_train,
    vec![
        randn(vec![6, 3], 63),
        randn(vec![3], 64),
        randn(vec![3], 65),
    ],
    |t, v| {
        let bn = batch_norm(t, v[0], v[1], v[2], 1e-5, &BnMode::Train)?;
        Ok(spread(t, bn.out))
    }
);

check!(
    grad_graph_conv_masked,
    vec![
        randn(vec![4, 3, 2], 66),  // features (T, V, C)
        randn(vec![4, 3, 3], 67),  // masks (T, V, V)
        randn(vec![2, 5], 68),     // hop weight
        randn(vec![3, 5, 5], 69),  // tcn kernel
        randn(vec![5], 70),        // tcn bias
        randn(vec![5], 71),        // gamma
        randn(vec![5], 72),        // beta
    ],
    |t, v| {
        let hops = vec![randu(vec![3, 3], 0.0, 1.0, 73)];
        let w = GraphConvWeights {
            hop_weights: vec![v[2]],
            tcn_w: v[3],
            tcn_b: v[4],
            bn_gamma: v[5],
            bn_beta: v[6],
        };
        let out = graph_conv(t, v[0], &hops, &MaskMode::Shared(v[1]), &w, 1e-5, &BnMode::Train)?;
        Ok(spread(t, out.out))
    }
);

#[test]
fn lstm_scan_matches_manual_loop() {
    // forward-only scan equals stepping the cell by hand
    let xs: Vec<Tensor<f64>> = (0..5).map(|i| randn(vec![3], 100 + i)).collect();
    let w_x = randn(vec![3, 16], 200);
    let w_h = randn(vec![4, 16], 201);
    let b = randn(vec![16], 202);

    let mut tape = Tape::new(false, 0);
    let xv: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let w = LstmWeights {
        w_x: tape.constant(w_x.clone()),
        w_h: tape.constant(w_h.clone()),
        b: tape.constant(b.clone()),
        hidden: 4,
    };
    let scan = lstm_scan(&mut tape, &xv, &w).unwrap();

    let mut h = tape.constant(Tensor::zeros(vec![4]));
    let mut c = tape.constant(Tensor::zeros(vec![4]));
    for &x in &xv {
        let (nh, nc) = lstm_cell(&mut tape, x, h, c, &w).unwrap();
        h = nh;
        c = nc;
    }
    assert_eq!(tape.value(*scan.last().unwrap()), tape.value(h));
}

#[test]
fn bilstm_backward_half_mirrors_forward_half() {
    let xs: Vec<Tensor<f64>> = (0..6).map(|i| randn(vec![3], 300 + i)).collect();
    let mk = |t: &mut Tape<f64>, seed: u64| LstmWeights {
        w_x: t.constant(randn(vec![3, 8], seed)),
        w_h: t.constant(randn(vec![2, 8], seed + 1)),
        b: t.constant(randn(vec![8], seed + 2)),
        hidden: 2,
    };

    // backward half on xs equals forward half on reversed xs
    let mut tape = Tape::new(false, 0);
    let xv: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let fw = mk(&mut tape, 400);
    let bw = mk(&mut tape, 500);
    let out = bilstm(&mut tape, &xv, &[(fw, bw)]).unwrap();

    let mut tape2 = Tape::new(false, 0);
    let xv_rev: Vec<_> = xs.iter().rev().map(|x| tape2.constant(x.clone())).collect();
    let bw2 = mk(&mut tape2, 500);
    let scan = lstm_scan(&mut tape2, &xv_rev, &bw2).unwrap();

    // per-step: bwd component of outputs[i] equals scan[T-1-i]
    for (i, &o) in out.outputs.iter().enumerate() {
        let full = tape.value(o).data();
        let bwd_part = &full[2..4];
        let expect = tape2.value(scan[xs.len() - 1 - i]).data();
        for (a, b) in bwd_part.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn convlstm_kernel1_degenerates_to_per_joint_lstm() {
    let v = 4;
    let x = randn(vec![v, 3], 600);
    let h0 = randn(vec![v, 2], 601);
    let c0 = randn(vec![v, 2], 602);
    let w_x = randn(vec![1, 3, 8], 603);
    let w_h = randn(vec![1, 2, 8], 604);
    let b = randn(vec![8], 605);

    let mut tape = Tape::new(false, 0);
    let cw = ConvLstmWeights {
        w_x: tape.constant(w_x.clone()),
        w_h: tape.constant(w_h.clone()),
        b: tape.constant(b.clone()),
        hidden: 2,
    };
    let xv = tape.constant(x.clone());
    let hv = tape.constant(h0.clone());
    let cv = tape.constant(c0.clone());
    let (h, _) = convlstm_cell(&mut tape, xv, hv, cv, &cw).unwrap();
    let conv_h = tape.value(h).data().to_vec();

    // same weights as a dense cell applied joint by joint
    let mut tape2 = Tape::new(false, 0);
    let lw = LstmWeights {
        w_x: tape2.constant(Tensor::new(vec![3, 8], w_x.data().to_vec())),
        w_h: tape2.constant(Tensor::new(vec![2, 8], w_h.data().to_vec())),
        b: tape2.constant(b.clone()),
        hidden: 2,
    };
    for j in 0..v {
        let xj = tape2.constant(Tensor::new(vec![3], x.data()[j * 3..(j + 1) * 3].to_vec()));
        let hj = tape2.constant(Tensor::new(vec![2], h0.data()[j * 2..(j + 1) * 2].to_vec()));
        let cj = tape2.constant(Tensor::new(vec![2], c0.data()[j * 2..(j + 1) * 2].to_vec()));
        let (hn, _) = lstm_cell(&mut tape2, xj, hj, cj, &lw).unwrap();
        let expect = tape2.value(hn).data();
        for (a, b) in conv_h[j * 2..(j + 1) * 2].iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_weight_cells_produce_zero_states() {
    let mut tape = Tape::<f64>::new(false, 0);
    let x = tape.constant(Tensor::zeros(vec![3]));
    let h = tape.constant(Tensor::zeros(vec![4]));
    let c = tape.constant(Tensor::zeros(vec![4]));
    let w = LstmWeights {
        w_x: tape.constant(Tensor::zeros(vec![3, 16])),
        w_h: tape.constant(Tensor::zeros(vec![4, 16])),
        b: tape.constant(Tensor::zeros(vec![16])),
        hidden: 4,
    };
    let (h1, c1) = lstm_cell(&mut tape, x, h, c, &w).unwrap();
    assert!(tape.value(h1).iter().all(|&v| v == 0.0));
    assert!(tape.value(c1).iter().all(|&v| v == 0.0));

    let xm = tape.constant(Tensor::zeros(vec![5, 3]));
    let hm = tape.constant(Tensor::zeros(vec![5, 2]));
    let cm = tape.constant(Tensor::zeros(vec![5, 2]));
    let cw = ConvLstmWeights {
        w_x: tape.constant(Tensor::zeros(vec![3, 3, 8])),
        w_h: tape.constant(Tensor::zeros(vec![3, 2, 8])),
        b: tape.constant(Tensor::zeros(vec![8])),
        hidden: 2,
    };
    let (hc, _) = convlstm_cell(&mut tape, xm, hm, cm, &cw).unwrap();
    assert!(tape.value(hc).iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_rows_sum_to_one_and_relu_identity() {
    let mut tape = Tape::<f64>::new(false, 0);
    let x = tape.input(randn(vec![4, 7], 700), false);
    let s = tape.softmax(x);
    let (rows, cols) = (4, 7);
    for r in 0..rows {
        let sum: f64 = tape.value(s).data()[r * cols..(r + 1) * cols].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let pos = tape.relu(x);
    let neg = tape.affine(x, -1.0, 0.0);
    let negr = tape.relu(neg);
    let prod = tape.mul(pos, negr).unwrap();
    assert!(tape.value(prod).iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_eval_is_identity_and_train_preserves_mean() {
    let x = randu(vec![5000], 0.5, 1.5, 800);
    let mut eval_tape = Tape::<f64>::new(false, 9);
    let xv = eval_tape.constant(x.clone());
    let d = eval_tape.dropout(xv, 0.5);
    assert_eq!(eval_tape.value(d).data(), x.data());

    let mut train_tape = Tape::<f64>::new(true, 9);
    let xv = train_tape.constant(x.clone());
    let d = train_tape.dropout(xv, 0.5);
    let mean_in: f64 = x.iter().sum::<f64>() / x.numel() as f64;
    let mean_out: f64 = train_tape.value(d).iter().sum::<f64>() / x.numel() as f64;
    assert!(
        (mean_in - mean_out).abs() < 0.05,
        "inverted scaling should preserve the mean: {mean_in} vs {mean_out}"
    );
}

#[test]
fn graph_conv_identity_spatial_step_is_temporal_conv_only() {
    // single all-ones-masked identity hop with identity feature transform
    let x = randn(vec![4, 3, 2], 900);
    let tcn_w = randn(vec![3, 2, 2], 901);
    let tcn_b = randn(vec![2], 902);

    let mut tape = Tape::new(false, 0);
    let xv = tape.constant(x.clone());
    let mask = tape.constant(Tensor::full(vec![4, 3, 3], 1.0));
    let eye = Tensor::new(vec![3, 3], {
        let mut d = vec![0.0; 9];
        d[0] = 1.0;
        d[4] = 1.0;
        d[8] = 1.0;
        d
    });
    let w_eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let w = GraphConvWeights {
        hop_weights: vec![w_eye],
        tcn_w: tape.constant(tcn_w.clone()),
        tcn_b: tape.constant(tcn_b.clone()),
        bn_gamma: tape.constant(Tensor::full(vec![2], 1.0)),
        bn_beta: tape.constant(Tensor::zeros(vec![2])),
    };
    // eval-mode bn with identity statistics keeps values untouched
    let bn = BnMode::Eval {
        mean: Tensor::zeros(vec![2]),
        var: Tensor::full(vec![2], 1.0 - 1e-5),
    };
    let out = graph_conv(&mut tape, xv, &[eye], &MaskMode::Shared(mask), &w, 1e-5, &bn).unwrap();

    let mut tape2 = Tape::new(false, 0);
    let xv2 = tape2.constant(x);
    let wv = tape2.constant(tcn_w);
    let bv = tape2.constant(tcn_b);
    let tc = tape2.temporal_conv(xv2, wv, Some(bv)).unwrap();
    let tc = tape2.relu(tc);

    for (a, b) in tape.value(out.out).iter().zip(tape2.value(tc).iter()) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn masking_a_joint_zeroes_its_spatial_aggregation() {
    // zero mask row/column for joint 1 removes its contribution
    let x = randu(vec![2, 3, 2], 0.5, 1.5, 1000);
    let hop = Tensor::full(vec![3, 3], 1.0);

    let mut tape = Tape::new(false, 0);
    let xv = tape.constant(x);
    let mut mdata = vec![1.0; 2 * 9];
    for t in 0..2 {
        for j in 0..3 {
            mdata[t * 9 + 1 * 3 + j] = 0.0;
            mdata[t * 9 + j * 3 + 1] = 0.0;
        }
    }
    let mask = tape.constant(Tensor::new(vec![2, 3, 3], mdata));
    let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
    let out = fallcast_core::autodiff::layers::spatial_graph_conv(
        &mut tape,
        xv,
        &[hop],
        &MaskMode::Shared(mask),
        &[w],
    )
    .unwrap();
    // joint 1 row receives nothing and contributes nothing
    let o = tape.value(out).data();
    for t in 0..2 {
        for c in 0..2 {
            assert_eq!(o[t * 6 + 1 * 2 + c], 0.0);
        }
    }
}
