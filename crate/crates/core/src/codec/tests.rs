use std::path::Path;

use rand::Rng;

use super::*;
use crate::autodiff::{grad_check_many, Graph, Tensor, Var};
use crate::seed;
use crate::shape::{generate_shape, make_corpus, ShapeSpec, Solid, TsdfGrid};

fn random_grid(dims: [usize; 3], seed_value: u64) -> TsdfGrid {
    let mut rng = seed::rng_from(seed_value);
    let n = dims.iter().product();
    TsdfGrid::new(dims, 0.2, (0..n).map(|_| rng.random_range(-0.2f32..0.2)).collect()).unwrap()
}

#[test]
fn desk_partition_has_64_patches() {
    let spec = PatchSpec::for_dims([16; 3], 4).unwrap();
    let patches = partition(&random_grid([16; 3], 1), &spec).unwrap();
    assert_eq!(patches.len(), 64);
    assert!(patches.iter().all(|p| p.len() == 64));
    // Patch 1 is the next block along x.
    let g = random_grid([16; 3], 1);
    assert_eq!(partition(&g, &spec).unwrap()[1][0], g.get(4, 0, 0));
    assert_eq!(partition(&g, &spec).unwrap()[4][0], g.get(0, 4, 0));
}

#[test]
fn single_patch_equals_the_grid() {
    let g = random_grid([8; 3], 2);
    let spec = PatchSpec::for_dims([8; 3], 8).unwrap();
    let p = partition(&g, &spec).unwrap();
    assert_eq!(p.len(), 1);
    assert_eq!(p[0], g.values());
}

#[test]
fn partition_assemble_round_trip_is_bitwise() {
    for (dims, edge) in [([16, 16, 16], 4), ([8, 12, 4], 4), ([6, 6, 6], 2)] {
        let g = random_grid(dims, 3);
        let spec = PatchSpec::for_dims(dims, edge).unwrap();
        let back = assemble(&partition(&g, &spec).unwrap(), &spec, 0.2).unwrap();
        assert_eq!(back, g);
    }
}

#[test]
fn indivisible_dims_are_rejected() {
    assert!(PatchSpec::for_dims([10, 8, 8], 4).is_err());
    assert!(PatchSpec::for_dims([8, 8, 8], 1).is_err());
    let spec = PatchSpec::for_dims([8; 3], 4).unwrap();
    assert!(partition(&random_grid([12; 3], 1), &spec).is_err());
}

#[test]
fn zero_patch_with_zero_output_layer_encodes_to_zero() {
    let mut p = CodecParams::new(64, 8, 1).unwrap();
    p.zero_encoder_output();
    assert_eq!(p.encode_rows(&[0.0; 64], 1).unwrap(), vec![0.0; 8]);
}

#[test]
fn identical_patches_encode_identically() {
    let p = CodecParams::new(8, 4, 2).unwrap();
    let row: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).sin()).collect();
    let rows: Vec<f64> = row.iter().chain(row.iter()).copied().collect();
    let z = p.encode_rows(&rows, 2).unwrap();
    assert_eq!(z[..4], z[4..]);
}

fn points(p: &CodecParams) -> Vec<Tensor> {
    p.store.tensors()
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let p = CodecParams::new(8, 3, 4).unwrap();
    let mut rng = seed::rng_from(5);
    let x: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..1.5)).collect();
    let err = grad_check_many(
        |g: &mut Graph, v: &[Var]| {
            let b = p.with_vars(v.to_vec());
            let xv = g.constant_from(&[2, 8], x.clone())?;
            let z = b.encode(g, xv)?;
            let wv = g.constant_from(&[2, 3], w.clone())?;
            let y = g.mul(z, wv)?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        },
        &points(&p),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn quantize_examples() {
    let mut rng = seed::rng_from(6);
    let entries: Vec<f64> = (0..5 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let book = Codebook::new(5, 3, entries).unwrap();
    let (i, e) = book.quantize(book.entry(3));
    assert_eq!(i, 3);
    assert_eq!(e, book.entry(3));
    // Equidistant between entries 1 and 4.
    let book = Codebook::new(5, 1, vec![10.0, -1.0, 20.0, 30.0, 1.0]).unwrap();
    assert_eq!(book.quantize(&[0.0]).0, 1);
    let book = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
    assert_eq!(book.quantize(&[0.6, 0.0]).0, 1);
}

#[test]
fn quantizer_is_a_projection() {
    let mut rng = seed::rng_from(7);
    let entries: Vec<f64> = (0..16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let book = Codebook::new(16, 4, entries).unwrap();
    for k in 0..16 {
        assert_eq!(book.quantize(book.entry(k)).0, k);
    }
}

#[test]
fn kmeans_finds_two_tight_clusters() {
    let mut rng = seed::rng_from(8);
    let mut pts = Vec::new();
    for c in [[-2.0, 0.0], [3.0, 1.0]] {
        for _ in 0..50 {
            pts.push(vec![c[0] + rng.random_range(-0.05..0.05), c[1] + rng.random_range(-0.05..0.05)]);
        }
    }
    let means: Vec<Vec<f64>> = [0..50, 50..100]
        .into_iter()
        .map(|r| {
            let n = r.len() as f64;
            let s = pts[r].iter().fold(vec![0.0, 0.0], |a, p| vec![a[0] + p[0], a[1] + p[1]]);
            vec![s[0] / n, s[1] / n]
        })
        .collect();
    let fit = init_codebook_kmeans(&pts, 2, 10, 1).unwrap();
    for m in &means {
        let (i, _) = fit.codebook.quantize(m);
        let c = fit.codebook.entry(i);
        assert!(((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt() < 0.05 * 2f64.sqrt());
    }
}

#[test]
fn kmeans_with_one_center_per_point_is_exact() {
    let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
    let fit = init_codebook_kmeans(&pts, 6, 3, 2).unwrap();
    assert_eq!(*fit.objective.last().unwrap(), 0.0);
}

#[test]
fn kmeans_without_iterations_returns_the_seeding() {
    let mut rng = seed::rng_from(9);
    let pts: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let fit = init_codebook_kmeans(&pts, 5, 0, 3).unwrap();
    assert_eq!(fit.objective.len(), 1);
    for k in 0..5 {
        assert!(pts.iter().any(|p| p.as_slice() == fit.codebook.entry(k)));
    }
    let again = init_codebook_kmeans(&pts, 5, 4, 3).unwrap();
    assert_eq!(again.objective[0], fit.objective[0]);
}

#[test]
fn kmeans_objective_never_increases() {
    let mut rng = seed::rng_from(10);
    for trial in 0..5 {
        let pts: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let fit = init_codebook_kmeans(&pts, 8, 15, trial).unwrap();
        for w in fit.objective.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective);
        }
    }
}

#[test]
fn kmeans_rejects_too_few_distinct_latents() {
    let pts = vec![vec![1.0], vec![1.0], vec![2.0]];
    assert!(init_codebook_kmeans(&pts, 3, 1, 0).is_err());
}

fn zero_codec(volume: usize, n_z: usize) -> CodecParams {
    let mut p = CodecParams::new(volume, n_z, 0).unwrap();
    for e in p.store.entries_mut() {
        e.tensor.data_mut().fill(0.0);
    }
    p
}

#[test]
fn perfect_reconstruction_has_zero_loss() {
    let p = zero_codec(8, 2);
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let book = g.input(&Tensor::zeros(&[3, 2]).requires_grad(true));
    let x = g.constant_from(&[4, 8], vec![0.0; 32]).unwrap();
    let (terms, _) = vqvae_loss(&mut g, &b, book, x, 0.25).unwrap();
    assert_eq!(g.scalar(terms.total), 0.0);
}

#[test]
fn zero_commitment_weight_gives_no_encoder_gradient() {
    let p = CodecParams::new(8, 2, 3).unwrap();
    let mut rng = seed::rng_from(3);
    let mut g = Graph::new();
    let b = p.bind(&mut g);
    let book = g.input(&Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng).requires_grad(true));
    let x = g.constant_from(&[4, 8], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let (terms, _) = vqvae_loss(&mut g, &b, book, x, 0.0).unwrap();
    assert_eq!(g.scalar(terms.commit), 0.0);
    g.backward(terms.commit).unwrap();
    for &v in b.vars() {
        assert!(g.grad(v).is_none_or(|gr| gr.iter().all(|&x| x == 0.0)));
    }
}

#[test]
fn codebook_learns_only_from_the_codebook_term() {
    let p = CodecParams::new(8, 2, 3).unwrap();
    let mut rng = seed::rng_from(4);
    let init = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng).requires_grad(true);
    let x: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grad_of = |pick: fn(&VqTerms) -> Var| {
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let book = g.input(&init);
        let xv = g.constant_from(&[4, 8], x.clone()).unwrap();
        let (terms, _) = vqvae_loss(&mut g, &b, book, xv, 0.25).unwrap();
        g.backward(pick(&terms)).unwrap();
        g.grad(book).map_or(vec![0.0; 6], <[f64]>::to_vec)
    };
    let total = grad_of(|t| t.total);
    let cb = grad_of(|t| t.codebook);
    assert_eq!(total, cb);
    assert!(grad_of(|t| t.recon).iter().all(|&v| v == 0.0));
    assert!(cb.iter().any(|&v| v != 0.0));
}

#[test]
fn straight_through_copies_the_decoder_input_gradient() {
    let p = CodecParams::new(8, 3, 5).unwrap();
    let mut rng = seed::rng_from(5);
    let z = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng).requires_grad(true);
    let zq = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng).requires_grad(true);
    let target: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |g: &mut Graph, input: Var| {
        let b = p.bind_frozen(g);
        let y = b.decode(g, input).unwrap();
        let t = g.constant_from(&[2, 8], target.clone()).unwrap();
        let d = g.sub(y, t).unwrap();
        let d2 = g.mul(d, d).unwrap();
        g.sum(d2)
    };
    let mut g1 = Graph::new();
    let zv = g1.input(&z);
    let zqv = g1.constant(&zq);
    let st = straight_through(&mut g1, zv, zqv).unwrap();
    assert_eq!(g1.value(st), zq.data());
    let l1 = loss(&mut g1, st);
    g1.backward(l1).unwrap();
    let mut g2 = Graph::new();
    let direct = g2.input(&zq);
    let l2 = loss(&mut g2, direct);
    g2.backward(l2).unwrap();
    assert_eq!(g1.grad(zv).unwrap(), g2.grad(direct).unwrap());
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    // One-voxel patches with a one-wide latent; the decoder weights are the
    // only path where the quantized forward pass is smooth.
    let p = CodecParams::new(1, 1, 6).unwrap();
    let mut rng = seed::rng_from(6);
    for _ in 0..10 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let book = Tensor::uniform(&[2, 1], -1.0, 1.0, &mut rng);
        let decoder = points(&p)[4..].to_vec();
        let err = grad_check_many(
            |g: &mut Graph, v: &[Var]| {
                let mut vars = p.store.bind_frozen(g);
                vars[4..].copy_from_slice(v);
                let b = p.with_vars(vars);
                let bv = g.constant(&book);
                let xv = g.constant_from(&[3, 1], x.clone())?;
                let (terms, _) = vqvae_loss(g, &b, bv, xv, 0.25)?;
                Ok(terms.recon)
            },
            &decoder,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

#[test]
fn detokenize_rejects_masks() {
    let spec = PatchSpec::for_dims([8; 3], 4).unwrap();
    let codec = Codec {
        patch: spec,
        truncation: 0.2,
        params: CodecParams::new(64, 4, 1).unwrap(),
        codebook: Codebook::new(3, 4, vec![0.0; 12]).unwrap(),
    };
    let tokens = TokenMap::new(vec![0, 1, 2, 3, 0, 0, 0, 0], [2, 2, 2], 3, None).unwrap();
    assert!(matches!(codec.detokenize(&tokens), Err(Error::UnresolvedMask { position: 3 })));
    assert!(TokenMap::new(vec![4; 8], [2, 2, 2], 3, None).is_err());
}

#[test]
fn token_file_round_trip() {
    let t = TokenMap::new((0..8).collect(), [2, 2, 2], 7, Some(2)).unwrap();
    let bytes = t.encode().unwrap();
    assert_eq!(&bytes[..5], b"TOKM1");
    assert_eq!(i32::from_le_bytes(bytes[21..25].try_into().unwrap()), 2);
    assert_eq!(TokenMap::decode(Path::new("t"), &bytes).unwrap(), t);
    let none = TokenMap::new(vec![0; 8], [2, 2, 2], 7, None).unwrap();
    let bytes = none.encode().unwrap();
    assert_eq!(i32::from_le_bytes(bytes[21..25].try_into().unwrap()), -1);
    assert_eq!(TokenMap::decode(Path::new("t"), &bytes).unwrap(), none);
    assert!(matches!(
        TokenMap::decode(Path::new("t"), b"CKPT1"),
        Err(Error::BadMagic { expected: "TOKM1", .. })
    ));
}

#[test]
fn codebook_file_round_trip() {
    let mut book = Codebook::new(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    book.round_to_f32();
    let bytes = book.encode().unwrap();
    assert_eq!(&bytes[..5], b"CDBK1");
    assert_eq!(bytes.len(), 13 + 24);
    assert_eq!(Codebook::decode(Path::new("c"), &bytes).unwrap(), book);
    assert!(Codebook::decode(Path::new("c"), &bytes[..20]).is_err());
}

#[test]
fn small_training_run_reconstructs_and_round_trips() {
    let corpus = make_corpus(12, 3, [8; 3], 0.2, 5).unwrap();
    let grids: Vec<TsdfGrid> = corpus.into_iter().map(|s| s.grid).collect();
    let spec = PatchSpec::for_dims([8; 3], 4).unwrap();
    let cfg = CodecTrainConfig {
        k: 8,
        n_z: 4,
        warmup_epochs: 30,
        epochs: 30,
        batch: 16,
        lr: 3e-3,
        seed: 1,
        ..CodecTrainConfig::default()
    };
    let (codec, report) = train_codec(&grids, spec, &cfg).unwrap();
    assert!(report.loss_curve.last().unwrap() < report.loss_curve.first().unwrap());
    assert!(report.mean_abs_error < 0.1, "{}", report.mean_abs_error);
    let dir = tempfile::tempdir().unwrap();
    codec.save(dir.path()).unwrap();
    let back = Codec::load(dir.path(), spec, 0.2, 4).unwrap();
    let cube = generate_shape(&ShapeSpec { solid: Solid::cube(0.5), class_label: 0 }, [8; 3], 0.2).unwrap();
    assert_eq!(back.tokenize(&cube, None).unwrap(), codec.tokenize(&cube, None).unwrap());
    assert_eq!(back.reconstruct(&cube).unwrap(), codec.reconstruct(&cube).unwrap());
}
