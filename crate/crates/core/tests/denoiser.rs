use anchorvid_core::attention::{PositionEmbeddings, SpatialKv};
use anchorvid_core::denoiser::{
    capture_frame1_kv, denoise, denoise_traced, init_denoiser, time_features, Arch, ControlHooks,
    DenoiserParams, PromptEmbedding,
};
use anchorvid_core::reference::{self, Matrix};
use anchorvid_core::{randn, AttentionMode, Error, SeededRng, Tensor};

fn mat(t: &Tensor) -> Matrix {
    reference::to_matrix(t)
}

fn matvec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Whole forward pass in f64, one loop per block, with the key lists taken
/// from the reference builder.
#[allow(clippy::needless_range_loop)]
fn straight_line(
    z: &Tensor,
    prompt: &PromptEmbedding,
    t: usize,
    params: &DenoiserParams,
    encoder: AttentionMode,
    decoder: AttentionMode,
    shared: Option<&[SpatialKv]>,
) -> Vec<f64> {
    let (f, c, h, w) = (z.dims()[0], z.dims()[1], z.dims()[2], z.dims()[3]);
    let hw = h * w;
    let zd = z.data();
    // x[frame][site][channel]
    let mut x: Vec<Vec<Vec<f64>>> = (0..f)
        .map(|i| {
            (0..hw)
                .map(|s| {
                    (0..c)
                        .map(|ch| f64::from(zd[(i * c + ch) * hw + s]))
                        .collect()
                })
                .collect()
        })
        .collect();
    let prompt_vec: Vec<f64> = prompt.vec.data().iter().map(|&v| f64::from(v)).collect();
    let time: Vec<f64> = reference::sinusoid_table(t + 1, 4)[t].clone();
    let bias = add(
        &matvec(&mat(params.cond_proj.weight()), &prompt_vec),
        &matvec(&mat(params.time_proj.weight()), &time),
    );
    let pos = reference::sinusoid_table(f, c);
    let n_enc = params.encoder_blocks.len();

    for (b, block) in params.blocks().enumerate() {
        for frame in &mut x {
            for tok in frame.iter_mut() {
                *tok = add(tok, &bias);
            }
        }
        let sp = &block.spatial;
        let (wq, wk, wv, mix) = (
            mat(sp.attn.wq.weight()),
            mat(sp.attn.wk.weight()),
            mat(sp.attn.wv.weight()),
            mat(sp.mix.weight()),
        );
        let next: Vec<Vec<Vec<f64>>> = x
            .iter()
            .map(|frame| {
                let (keys, values): (Matrix, Matrix) = match shared {
                    Some(kv) => (mat(&kv[b].k), mat(&kv[b].v)),
                    None => (
                        frame.iter().map(|tok| matvec(&wk, tok)).collect(),
                        frame.iter().map(|tok| matvec(&wv, tok)).collect(),
                    ),
                };
                frame
                    .iter()
                    .map(|tok| {
                        let a = reference::attention(&matvec(&wq, tok), &keys, &values);
                        add(tok, &matvec(&mix, &a))
                    })
                    .collect()
            })
            .collect();
        x = next;

        let mode = if b < n_enc { encoder } else { decoder };
        let m = &block.motion;
        let p_in = mat(m.project_in.weight());
        let p_out = mat(m.project_out.weight());
        let attn_layers = [&m.attn1, &m.attn2]
            .map(|a| (mat(a.wq.weight()), mat(a.wk.weight()), mat(a.wv.weight())));
        for s in 0..hw {
            let mut tokens: Matrix = (0..f).map(|i| matvec(&p_in, &x[i][s])).collect();
            for (aq, ak, av) in &attn_layers {
                let tok =
                    |content: usize, position: usize| add(&tokens[content - 1], &pos[position - 1]);
                tokens = (1..=f)
                    .map(|i| {
                        let (qc, qp) = reference::query(mode, i, f);
                        let q = matvec(aq, &tok(qc, qp));
                        let list = reference::list(mode, i, f);
                        let keys: Matrix = list
                            .iter()
                            .map(|&(cc, pp)| matvec(ak, &tok(cc, pp)))
                            .collect();
                        let values: Matrix = list
                            .iter()
                            .map(|&(cc, pp)| matvec(av, &tok(cc, pp)))
                            .collect();
                        reference::attention(&q, &keys, &values)
                    })
                    .collect();
            }
            for i in 0..f {
                let delta = matvec(&p_out, &tokens[i]);
                x[i][s] = add(&x[i][s], &delta);
            }
        }
    }
    let mut out = vec![0.0; f * c * hw];
    for i in 0..f {
        for s in 0..hw {
            for ch in 0..c {
                out[(i * c + ch) * hw + s] = x[i][s][ch];
            }
        }
    }
    out
}

fn max_abs(a: &Tensor, b: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(b)
        .map(|(&x, y)| (f64::from(x) - y).abs())
        .fold(0.0, f64::max)
}

fn setup(seed: u64, f: usize) -> (DenoiserParams, PromptEmbedding, Tensor) {
    let params = init_denoiser(seed, Arch::default()).unwrap();
    let prompt = PromptEmbedding::from_text("a lighthouse", 8).unwrap();
    let z = randn(&mut SeededRng::new(seed + 100), vec![f, 8, 8, 8]).unwrap();
    (params, prompt, z)
}

#[test]
fn matches_straight_line_reference_window_corrected() {
    let (params, prompt, z) = setup(3, 4);
    let got = denoise(&z, &prompt, 17, &params, &ControlHooks::default()).unwrap();
    let want = straight_line(
        &z,
        &prompt,
        17,
        &params,
        AttentionMode::WindowCorrected,
        AttentionMode::Global,
        None,
    );
    let err = max_abs(&got, &want);
    assert!(err < 1e-4, "max abs error {err}");
}

#[test]
fn matches_straight_line_reference_two_anchor_with_shared_kv() {
    let (params, prompt, z) = setup(4, 5);
    let z1 = Tensor::new(vec![1, 8, 8, 8], z.outer(0).to_vec()).unwrap();
    let kv = capture_frame1_kv(&z1, &prompt, 3, &params).unwrap();
    let hooks = ControlHooks {
        encoder_mode: AttentionMode::WindowTwoAnchor,
        ..ControlHooks::default()
    }
    .with_shared_kv(&kv);
    let got = denoise(&z, &prompt, 3, &params, &hooks).unwrap();
    let want = straight_line(
        &z,
        &prompt,
        3,
        &params,
        AttentionMode::WindowTwoAnchor,
        AttentionMode::Global,
        Some(&kv),
    );
    assert!(max_abs(&got, &want) < 1e-4);
}

#[test]
fn deterministic() {
    let (params, prompt, z) = setup(3, 3);
    let a = denoise(&z, &prompt, 5, &params, &ControlHooks::default()).unwrap();
    let b = denoise(&z, &prompt, 5, &params, &ControlHooks::default()).unwrap();
    assert!(a.bitwise_eq(&b));
}

#[test]
fn single_frame_ignores_temporal_modes() {
    let (params, prompt, z) = setup(5, 1);
    let plain = denoise(&z, &prompt, 9, &params, &ControlHooks::plain()).unwrap();
    for mode in [
        AttentionMode::WindowUncorrected,
        AttentionMode::WindowCorrected,
    ] {
        let hooks = ControlHooks {
            encoder_mode: mode,
            decoder_mode: mode,
            ..ControlHooks::plain()
        };
        assert!(denoise(&z, &prompt, 9, &params, &hooks)
            .unwrap()
            .bitwise_eq(&plain));
    }
}

#[test]
fn identical_frames_give_identical_outputs_under_global() {
    // Sinusoidal positions tell equal frames apart, so the symmetry needs a
    // constant table.
    let (mut params, prompt, z1) = setup(6, 1);
    let z = Tensor::new(vec![4, 8, 8, 8], z1.data().repeat(4)).unwrap();
    let sinusoidal = denoise(&z, &prompt, 20, &params, &ControlHooks::plain()).unwrap();
    assert_ne!(sinusoidal.outer(1), sinusoidal.outer(0));

    let row = [0.3f32, -0.1, 0.0, 0.7, 0.2, 0.2, -0.5, 0.1];
    params.set_position_table(PositionEmbeddings::constant(32, &row).unwrap());
    let out = denoise(&z, &prompt, 20, &params, &ControlHooks::plain()).unwrap();
    for i in 1..4 {
        assert!(out.outer(i) == out.outer(0));
    }
}

#[test]
fn spatial_modules_are_frame_local_without_motion() {
    let (params, prompt, z) = setup(7, 3);
    let hooks = ControlHooks {
        bypass_motion: true,
        ..ControlHooks::plain()
    };
    let base = denoise(&z, &prompt, 12, &params, &hooks).unwrap();
    let mut bumped = z.outer(1).to_vec();
    bumped[5] += 0.25;
    let z2 = z.with_outer(1, &bumped).unwrap();
    let out = denoise(&z2, &prompt, 12, &params, &hooks).unwrap();
    assert_eq!(out.outer(0), base.outer(0));
    assert_eq!(out.outer(2), base.outer(2));
    assert_ne!(out.outer(1), base.outer(1));
}

#[test]
fn zeroed_weights_leave_only_the_biases() {
    let (mut params, prompt, z) = setup(8, 2);
    let c = 8;
    for b in params.blocks_mut() {
        let zero = || anchorvid_core::attention::Linear::zeros(c, c).unwrap();
        b.spatial.attn.wq = zero();
        b.spatial.attn.wk = zero();
        b.spatial.attn.wv = zero();
        b.spatial.mix = zero();
        b.motion.project_in = zero();
        for a in [&mut b.motion.attn1, &mut b.motion.attn2] {
            a.wq = zero();
            a.wk = zero();
            a.wv = zero();
        }
        b.motion.project_out = zero();
    }
    let t = 33;
    let out = denoise(&z, &prompt, t, &params, &ControlHooks::default()).unwrap();
    let cond = params.cond_proj.apply(prompt.vec.data());
    let time = params.time_proj.apply(&time_features(t));
    let n = params.arch.total_blocks() as f64;
    for i in 0..2 {
        for ch in 0..c {
            let bias = f64::from(cond[ch]) + f64::from(time[ch]);
            for s in 0..64 {
                let idx = ch * 64 + s;
                let want = f64::from(z.outer(i)[idx]) + n * bias;
                assert!((f64::from(out.outer(i)[idx]) - want).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn captured_kv_reproduces_the_unshared_single_frame() {
    let (params, prompt, z1) = setup(9, 1);
    let kv = capture_frame1_kv(&z1, &prompt, 25, &params).unwrap();
    assert_eq!(kv.len(), 4);
    for cache in &kv {
        assert_eq!(cache.k.dims(), &[64, 8]);
        assert_eq!(cache.v.dims(), &[64, 8]);
    }
    let own = denoise(&z1, &prompt, 25, &params, &ControlHooks::image()).unwrap();
    let shared = denoise(
        &z1,
        &prompt,
        25,
        &params,
        &ControlHooks::image().with_shared_kv(&kv),
    )
    .unwrap();
    assert!(own.bitwise_eq(&shared));
}

#[test]
fn shared_kv_on_repeated_frames_matches_frame_one() {
    let (params, prompt, z1) = setup(10, 1);
    let kv = capture_frame1_kv(&z1, &prompt, 8, &params).unwrap();
    let z = Tensor::new(vec![4, 8, 8, 8], z1.data().repeat(4)).unwrap();
    let hooks = ControlHooks {
        bypass_motion: true,
        ..ControlHooks::default().with_shared_kv(&kv)
    };
    let out = denoise(&z, &prompt, 8, &params, &hooks).unwrap();
    for i in 1..4 {
        let d = out
            .outer(i)
            .iter()
            .zip(out.outer(0))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(d <= 1e-6, "frame {i}: {d}");
    }
}

#[test]
fn mode_split_follows_block_position() {
    let (params, prompt, z) = setup(11, 3);
    let (_, info) = denoise_traced(&z, &prompt, 2, &params, &ControlHooks::default()).unwrap();
    assert_eq!(
        info.modes,
        vec![
            Some(AttentionMode::WindowCorrected),
            Some(AttentionMode::WindowCorrected),
            Some(AttentionMode::Global),
            Some(AttentionMode::Global),
        ]
    );
}

#[test]
fn sharing_without_a_source_is_rejected() {
    let (params, prompt, z) = setup(12, 2);
    let hooks = ControlHooks {
        share_kv: true,
        ..ControlHooks::default()
    };
    assert!(matches!(
        denoise(&z, &prompt, 2, &params, &hooks),
        Err(Error::MissingKvSource(0))
    ));
    let short: Vec<SpatialKv> = Vec::new();
    assert!(denoise(
        &z,
        &prompt,
        2,
        &params,
        &ControlHooks::default().with_shared_kv(&short)
    )
    .is_err());
}
