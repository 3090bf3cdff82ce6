use super::*;
use crate::codec::{train_codec, CodecTrainConfig, PatchSpec};
use crate::denoiser::{ConditionMode, DenoiserConfig};
use crate::diffusion::{build_schedule, ScheduleKind};
use crate::shape::make_corpus;

struct Fixture {
    net: DenoiserNet,
    schedule: DiffusionSchedule,
    codec: Codec,
    grids: Vec<TsdfGrid>,
}

fn fixture(mode: ConditionMode) -> Fixture {
    let corpus = make_corpus(12, 3, [8; 3], 0.2, 3).unwrap();
    let grids: Vec<TsdfGrid> = corpus.into_iter().map(|s| s.grid).collect();
    let cfg = CodecTrainConfig {
        k: 6,
        n_z: 4,
        warmup_epochs: 2,
        epochs: 2,
        batch: 32,
        kmeans_iters: 5,
        seed: 1,
        ..Default::default()
    };
    let (codec, _) = train_codec(&grids, PatchSpec::for_dims([8; 3], 4).unwrap(), &cfg).unwrap();
    let net = DenoiserNet::new(
        DenoiserConfig {
            channels: 8,
            blocks: 1,
            mfm_layers: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 4,
            condition_mode: mode,
            cond_vocab: 7,
            k: 6,
            patch_grid: [2, 2, 2],
            t_max: 6,
            pool: 2,
            zero_residual: false,
        },
        2,
    )
    .unwrap();
    let schedule = build_schedule(6, 6, &ScheduleKind::LinearCumulative).unwrap();
    Fixture {
        net,
        schedule,
        codec,
        grids,
    }
}

impl Fixture {
    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(&self.net, &self.schedule, &self.codec).unwrap()
    }
}

#[test]
fn region_parsing_and_patch_masks() {
    let r: Region = "0:1,0:1,0:0.5".parse().unwrap();
    assert_eq!(r, Region::bottom_half());
    let m = r.patch_mask([4, 4, 4]);
    assert_eq!(m.iter().filter(|&&o| o).count(), 32);
    assert!(m[..32].iter().all(|&o| o) && m[32..].iter().all(|&o| !o));
    // Patches straddling the boundary are not observed.
    let r = Region::new([0.0; 3], [1.0, 1.0, 0.3]).unwrap();
    assert_eq!(r.patch_mask([4, 4, 4]).iter().filter(|&&o| o).count(), 16);
    assert!("0:1,0:1".parse::<Region>().is_err());
    assert!("0:1,0:1,0.6:0.5".parse::<Region>().is_err());
    assert_eq!(Region::full().patch_mask([2, 2, 2]), vec![true; 8]);
}

#[test]
fn start_steps_follow_the_fraction() {
    let s = ConditionSpec::new(Mode::Completion, 0);
    assert_eq!(s.start_step(25).unwrap(), 13);
    assert_eq!(ConditionSpec::new(Mode::Edit, 0).start_step(100).unwrap(), 98);
    assert_eq!(s.clone().with_start(0.0).start_step(25).unwrap(), 0);
    assert!(s.with_start(1.5).start_step(25).is_err());
}

#[test]
fn completion_with_k0_and_full_observation_returns_the_input() {
    let f = fixture(ConditionMode::Class);
    let p = f.pipeline();
    let spec = ConditionSpec::new(Mode::Completion, 4).with_region(Region::full()).with_start(0.0);
    let input = f.codec.tokenize(&f.grids[0], None).unwrap();
    for s in p.complete(&f.grids[0], &spec, 3).unwrap() {
        assert_eq!(s.tokens.indices, input.indices);
    }
}

#[test]
fn completion_guards() {
    let f = fixture(ConditionMode::Class);
    let p = f.pipeline();
    let spec = ConditionSpec::new(Mode::Completion, 4);
    assert!(p.complete(&f.grids[0], &spec, 1).is_err());
    let tiny = spec.clone().with_region(Region::new([0.0; 3], [0.2, 0.2, 0.2]).unwrap());
    assert!(p.complete(&f.grids[0], &tiny, 1).is_err());
    let k0 = spec.with_region(Region::bottom_half()).with_start(0.0);
    assert!(p.complete(&f.grids[0], &k0, 1).is_err());
}

#[test]
fn edit_with_k0_keeps_the_tokens() {
    let f = fixture(ConditionMode::Class);
    let p = f.pipeline();
    let current = f.codec.tokenize(&f.grids[1], Some(1)).unwrap();
    let spec = ConditionSpec::new(Mode::Edit, 2).with_start(0.0);
    let out = p.edit(&current, 1, &spec).unwrap();
    assert_eq!(out.tokens.indices, current.indices);
    assert!(p.edit(&current, 9, &spec).is_err());
}

#[test]
fn every_mode_is_mask_free_and_deterministic() {
    let f = fixture(ConditionMode::Class);
    let p = f.pipeline();
    let mask = f.schedule.mask() as u32;
    let check = |a: &Sample, b: &Sample| {
        assert!(a.tokens.indices.iter().all(|&s| s < mask));
        assert_eq!(a.tokens.indices, b.tokens.indices);
        assert_eq!(a.grid, b.grid);
    };
    let spec = ConditionSpec::new(Mode::Unconditional, 9);
    check(&p.sample(&spec, 0).unwrap(), &p.sample(&spec, 0).unwrap());
    let spec = ConditionSpec::new(Mode::ClassConditional, 9).with_label(2);
    check(&p.sample(&spec, 1).unwrap(), &p.sample(&spec, 1).unwrap());
    assert!(p.sample(&ConditionSpec::new(Mode::ClassConditional, 9), 0).is_err());
    let spec = ConditionSpec::new(Mode::Completion, 5).with_region(Region::bottom_half());
    let a = p.complete(&f.grids[2], &spec, 4).unwrap();
    let b = p.complete(&f.grids[2], &spec, 4).unwrap();
    a.iter().zip(&b).for_each(|(x, y)| check(x, y));
    let noisy = add_noise(&f.grids[3], 0.05, NoiseKind::Gaussian, 1).unwrap();
    let spec = ConditionSpec::new(Mode::Denoise, 5);
    check(&p.denoise(&noisy, &spec).unwrap(), &p.denoise(&noisy, &spec).unwrap());
    let current = f.codec.tokenize(&f.grids[0], Some(0)).unwrap();
    let spec = ConditionSpec::new(Mode::Edit, 5);
    check(&p.edit(&current, 1, &spec).unwrap(), &p.edit(&current, 1, &spec).unwrap());
}

#[test]
fn token_sequence_sampling_is_mask_free() {
    let f = fixture(ConditionMode::TokenSequence);
    let p = f.pipeline();
    let spec = ConditionSpec::new(Mode::TokenSequence, 1).with_cond_tokens(vec![0, 3, 3, 5]);
    let s = p.sample(&spec, 0).unwrap();
    assert!(s.tokens.first_mask().is_none());
}

#[test]
fn guidance_rows_stay_distributions() {
    let f = fixture(ConditionMode::Class);
    let p = f.pipeline();
    let tokens = vec![6u32; 8];
    for w in [0.0, 0.5, 3.0] {
        let lp = p.guided_log_probs(&tokens, 4, Some(1), &[], w).unwrap();
        for row in lp.chunks(6) {
            assert!((row.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn noise_is_clamped_and_zero_noise_is_identity() {
    let f = fixture(ConditionMode::Class);
    let g = &f.grids[0];
    assert_eq!(&add_noise(g, 0.0, NoiseKind::Uniform, 3).unwrap(), g);
    for kind in [NoiseKind::Gaussian, NoiseKind::Uniform] {
        let n = add_noise(g, 0.5, kind, 3).unwrap();
        assert!(n.values().iter().all(|v| v.abs() <= 0.2));
        assert!(n.mean_abs_diff(g).unwrap() > 0.0);
    }
    assert!(add_noise(g, -1.0, NoiseKind::Gaussian, 3).is_err());
}

#[test]
fn mismatched_parts_are_rejected() {
    let f = fixture(ConditionMode::Class);
    let other = build_schedule(5, 6, &ScheduleKind::LinearCumulative).unwrap();
    assert!(Pipeline::new(&f.net, &other, &f.codec).is_err());
}
