//! Acceptance suite: one test per criterion, run serially (a shared lock
//! prevents CPU contention between criteria). The staged-training artifacts
//! are built once on the default configuration and cached under
//! `target/acceptance-cache`; set CNC_ACCEPT_FRESH=1 to force a retrain.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use once_cell::sync::Lazy;
use serde::{Deserialize, Serialize};

use cnc_cli::evalcmd::{
    eval_items, run_lambda_sweep, run_ordering_suite, run_recon_suite, run_semantics_suite,
};
use cnc_cli::util::{estimator_for_dataset, load_model};
use cnc_cli::{dataset, samplecmd, store, traincmd, triplet};
use cnc_core::backbone::{build_unet, Attachment, BatchConditioning, CodecMode, LatentCodec, UNetConfig};
use cnc_core::diffusion::{ddim_sample_batch, DiffusionSchedule, SamplerOptions, ScheduleConfig};
use cnc_core::embedders::ImageEmbedder;
use cnc_core::global_conditioning::{
    build_guidance_mask, masked_cross_attention, GuidanceMask, SoftGuidanceMode,
};
use cnc_core::local_fuser::{fdn_modulate, fuse_local, LocalFuserConfig, LocalFuserParams};
use cnc_core::nn::{finite_diff_check_params, Ctx, ParamGroup, ParamStore};
use cnc_core::rng::rng_for;
use cnc_core::tensor::tape::{finite_diff_check, Tape};
use cnc_core::tensor::Tensor;
use cnc_core::toy_world::{render_scene, sample_scene, GeneratorConfig};
use cnc_core::trainer::{Trainer, TrainerConfig};
use cnc_core::triplets::{build_triplet, OracleInpainter, TripletOptions};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

fn cache_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache")
}

#[derive(Serialize, Deserialize, Clone)]
struct StageSummary {
    stage: String,
    start_loss: f64,
    end_loss: f64,
    wall_seconds: f64,
}

#[derive(Serialize, Deserialize, Clone)]
struct RunSummary {
    config_hash: String,
    stages: Vec<StageSummary>,
    total_wall_seconds: f64,
}

struct Artifacts {
    scenes: PathBuf,
    checkpoints: BTreeMap<&'static str, PathBuf>,
    summary: RunSummary,
}

static ARTIFACTS: Lazy<Artifacts> = Lazy::new(build_artifacts);

fn default_trainer_config() -> TrainerConfig {
    TrainerConfig::default()
}

fn build_artifacts() -> Artifacts {
    let trainer_cfg = default_trainer_config();
    let exp = cnc_cli::config::ExperimentConfig {
        trainer: trainer_cfg.clone(),
        sampler: Default::default(),
        triplets: None,
        out: None,
    };
    let cfg_hash = exp.config_hash().expect("hashable config");
    let root = cache_root().join(&cfg_hash[..12]);
    let scenes = root.join("scenes");
    let triplets = root.join("triplets");
    let runs = root.join("runs");
    let summary_path = root.join("summary.json");

    let fresh_requested = std::env::var("CNC_ACCEPT_FRESH").map(|v| v == "1").unwrap_or(false);
    let stage_names = ["prior", "local", "global", "finetune"];
    let cached_ok = !fresh_requested
        && summary_path.exists()
        && stage_names.iter().all(|s| runs.join(format!("{s}-final.ckpt")).exists());
    if cached_ok {
        let summary: RunSummary =
            serde_json::from_slice(&std::fs::read(&summary_path).expect("summary readable"))
                .expect("summary parses");
        if summary.config_hash == cfg_hash {
            eprintln!("[acceptance] reusing cached staged run at {}", root.display());
            return Artifacts {
                scenes,
                checkpoints: stage_names
                    .iter()
                    .map(|s| (*s, runs.join(format!("{s}-final.ckpt"))))
                    .collect(),
                summary,
            };
        }
    }

    eprintln!("[acceptance] running the full curriculum into {}", root.display());
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).expect("cache root");
    let t0 = Instant::now();

    dataset::run(&dataset::DatasetGenArgs {
        seed: trainer_cfg.seed,
        count: 2000,
        resolution: trainer_cfg.unet.codec.pixel_res,
        out: scenes.clone(),
    })
    .expect("dataset gen");
    triplet::run(&triplet::TripletBuildArgs {
        dataset: scenes.clone(),
        backend: "oracle".into(),
        condition: "depth".into(),
        out: triplets.clone(),
        dilation_radius: None,
    })
    .expect("triplet build");

    let cfg_path = root.join("exp.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&exp).expect("cfg json"))
        .expect("cfg write");

    let mut stages = Vec::new();
    let mut resume: Option<PathBuf> = None;
    for stage in stage_names {
        let out = traincmd::run(&traincmd::TrainArgs {
            config: Some(cfg_path.clone()),
            stage: Some(stage.to_string()),
            resume: resume.clone(),
            seed: None,
            triplets: Some(triplets.clone()),
            out: Some(runs.clone()),
        })
        .unwrap_or_else(|e| panic!("stage {stage} failed: {e:#}"));
        stages.push(StageSummary {
            stage: stage.to_string(),
            start_loss: out.start_loss,
            end_loss: out.end_loss,
            wall_seconds: out.wall_seconds,
        });
        resume = Some(out.checkpoint);
    }
    let summary = RunSummary {
        config_hash: cfg_hash,
        stages,
        total_wall_seconds: t0.elapsed().as_secs_f64(),
    };
    std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary).expect("summary json"))
        .expect("summary write");
    Artifacts {
        scenes,
        checkpoints: stage_names
            .iter()
            .map(|s| (*s, runs.join(format!("{s}-final.ckpt"))))
            .collect(),
        summary,
    }
}

fn sampler_opts(steps: usize) -> SamplerOptions {
    SamplerOptions { steps, cfg_scale: 7.0, mode: SoftGuidanceMode::Additive }
}

// ---- criterion 1 ----

#[test]
fn criterion_01_triplet_algebra_1000() {
    let _g = serial();
    let t0 = Instant::now();
    let gen = GeneratorConfig::default();
    for seed in 0..1000u64 {
        let scene = sample_scene(seed, &gen).unwrap();
        let s = render_scene(&scene, 32).unwrap();
        let inp = OracleInpainter::for_sample(&s);
        let t = build_triplet(&s, &inp, &TripletOptions::default()).unwrap();
        let (h, w) = (32, 32);
        for p in 0..h * w {
            let m = t.mask.data()[p] > 0.5;
            let md = t.dilated_mask.data()[p] > 0.5;
            assert!(md || !m, "mask containment violated");
            for ch in 0..3 {
                let i = ch * h * w + p;
                let src = t.source.data()[i];
                let fg = t.foreground.data()[i];
                // I_f == I_s (x) M exactly
                assert_eq!(fg, if m { src } else { 0.0 });
                // I_f + I_s (x) (1-M) == I_s exactly
                assert_eq!(fg + if m { 0.0 } else { src }, src);
                // I_b == I_s outside the dilated mask
                if !md {
                    assert_eq!(t.background.data()[i], src);
                }
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "triplet algebra suite took {elapsed:.1}s");
    println!("criterion 1 PASS: 1000 triplets exact in {elapsed:.1}s");
}

// ---- criterion 2 ----

#[test]
fn criterion_02_soft_guidance_zero_leak() {
    let _g = serial();
    let mut rng = rng_for(2024, "criterion2");
    use rand::Rng as _;
    for trial in 0..25 {
        let lh = rng.gen_range(1..=8usize);
        let lw = rng.gen_range(1..=8usize);
        let t_len = rng.gen_range(1..=8usize);
        let n = rng.gen_range(1..=4usize);
        let heads = 8;
        let d = 32;
        let mut m = Tensor::<f32>::zeros(&[lh, lw]);
        for v in m.data_mut().iter_mut() {
            *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
        let gm = build_guidance_mask(&m, (lh, lw), t_len, n).unwrap();
        gm.validate().unwrap();
        let tape = Tape::<f64>::no_grad();
        let q = Tensor::randn(&[1, lh * lw, d], &mut rng);
        let k = Tensor::randn(&[1, t_len + 2 * n, d], &mut rng);
        for mode in [SoftGuidanceMode::Additive, SoftGuidanceMode::Hadamard] {
            let w = tape.attention_weights(&q, &k, heads, Some(&gm.mask), mode);
            let cols = t_len + 2 * n;
            for hd in 0..heads {
                for r in 0..lh * lw {
                    let row = &w.data()[(hd * lh * lw + r) * cols..][..cols];
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-6, "row sum {sum} trial {trial}");
                    assert!(row[..t_len].iter().all(|&x| x > 0.0), "text column not positive");
                    if mode == SoftGuidanceMode::Additive {
                        let bit = m.data()[r] >= 0.5;
                        let (lo, hi) =
                            if bit { (t_len + n, t_len + 2 * n) } else { (t_len, t_len + n) };
                        assert!(
                            row[lo..hi].iter().all(|&x| x == 0.0),
                            "masked block leaked weight"
                        );
                    }
                }
            }
        }
    }

    // the 2x2 / T=1 / N=1 hand case
    let m = Tensor::new(&[2, 2], vec![1.0f32, 1.0, 0.0, 0.0]);
    let gm = build_guidance_mask(&m, (2, 2), 1, 1).unwrap();
    let tape = Tape::<f64>::no_grad();
    let q = Tensor::zeros(&[1, 4, 8]);
    let k = Tensor::randn(&[1, 3, 8], &mut rng);
    let add = tape.attention_weights(&q, &k, 1, Some(&gm.mask), SoftGuidanceMode::Additive);
    assert_eq!(&add.data()[..3], &[0.5, 0.5, 0.0]);
    let had = tape.attention_weights(&q, &k, 1, Some(&gm.mask), SoftGuidanceMode::Hadamard);
    for c in 0..3 {
        assert!((had.data()[c] - 1.0 / 3.0).abs() < 1e-12);
    }
    println!("criterion 2 PASS: exact zero-leak, text ubiquity, hand case in both modes");
}

// ---- criterion 3 ----

fn random_batch_conditioning(
    config: &UNetConfig,
    seed: u64,
) -> BatchConditioning<f32> {
    let mut rng = rng_for(seed, "criterion3-cond");
    use rand::Rng as _;
    let px = config.codec.pixel_res;
    let mut mask = Tensor::<f32>::zeros(&[px, px]);
    for v in mask.data_mut().iter_mut() {
        *v = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
    }
    BatchConditioning {
        text_ids: (0..config.context_len).map(|i| (i * 5 + 1) % config.vocab_size).collect(),
        fg_cond: Tensor::rand_uniform(&[1, 1, px, px], 0.0, 1.0, &mut rng),
        bg_cond: Tensor::rand_uniform(&[1, 1, px, px], 0.0, 1.0, &mut rng),
        fg_emb: Tensor::randn(&[1, config.emb_dim], &mut rng),
        bg_emb: Tensor::randn(&[1, config.emb_dim], &mut rng),
        lambda_fg: vec![1.0],
        lambda_bg: vec![1.0],
        masks: vec![mask],
        mode: SoftGuidanceMode::Additive,
    }
}

#[test]
fn criterion_03_zero_init_transparency() {
    let _g = serial();
    for b in [4usize, 12] {
        let config = UNetConfig { encoder_blocks: b, ..Default::default() };
        let (mut model, store) = build_unet::<f32>(&config, 99).unwrap();
        model.set_attachment(Attachment::FULL);
        let mut rng = rng_for(3, "criterion3");
        for trial in 0..20 {
            let z = Tensor::randn(&[1, 3, 32, 32], &mut rng);
            let cond = random_batch_conditioning(&config, 1000 + trial);
            let tape = Tape::no_grad();
            let cx = Ctx::new(&tape, &store);
            let with = model.forward(&cx, &z, &[7], &cond).unwrap();
            let mut null = cnc_core::backbone::null_conditioning::<f32>(
                &config,
                1,
                SoftGuidanceMode::Additive,
            );
            null.text_ids = cond.text_ids.clone();
            let without = model.forward(&cx, &z, &[7], &null).unwrap();
            let rel = tape.value(with).rel_l2_diff(&tape.value(without));
            assert!(rel <= 1e-6, "B={b} trial {trial}: rel {rel}");
        }
    }
    println!("criterion 3 PASS: conditioned == unconditioned within 1e-6 for B in {{4,12}}");
}

// ---- criterion 4 ----

#[test]
fn criterion_04_integration_wiring() {
    let _g = serial();
    for b in [4usize, 8, 12] {
        let config = UNetConfig { encoder_blocks: b, ..Default::default() };
        let pairs = config.decoder_skip_pairs();
        assert_eq!(pairs.len(), b);
        for (i, j) in pairs {
            assert_eq!(i + j, b + 1, "B={b}: decoder {i} pairs with skip {j}");
        }
        // the model builds under this wiring
        build_unet::<f32>(&config, 0).unwrap();
    }
    println!("criterion 4 PASS: i+j=B+1 for all decoder blocks at B in {{4,8,12}}");
}

// ---- criterion 5 ----

#[test]
fn criterion_05_gradient_correctness() {
    let _g = serial();
    let t0 = Instant::now();

    // fdn_modulate
    let mut rng = rng_for(5, "c5-fdn");
    let err = finite_diff_check(
        &[
            Tensor::randn(&[1, 3, 4, 4], &mut rng),
            Tensor::randn(&[1, 2, 4, 4], &mut rng),
            Tensor::randn_scaled(&[3, 2, 3, 3], 0.3, &mut rng),
            Tensor::randn(&[3], &mut rng),
            Tensor::randn_scaled(&[3, 2, 3, 3], 0.3, &mut rng),
            Tensor::randn(&[3], &mut rng),
        ],
        &[true; 6],
        |tp, v| {
            let out = fdn_modulate(tp, v[0], v[1], v[2], Some(v[3]), v[4], Some(v[5])).unwrap();
            tp.mean_all(tp.silu(out))
        },
        1e-5,
    );
    assert!(err < 1e-4, "fdn_modulate grad err {err}");

    // masked_cross_attention, both modes
    let m = Tensor::new(&[2, 2], vec![1.0f32, 0.0, 1.0, 1.0]);
    let gm = build_guidance_mask(&m, (2, 2), 2, 1).unwrap();
    for mode in [SoftGuidanceMode::Additive, SoftGuidanceMode::Hadamard] {
        let bits = gm.mask.clone();
        let err = finite_diff_check(
            &[
                Tensor::randn(&[1, 4, 8], &mut rng_for(6, "c5z")),
                Tensor::randn(&[1, 4, 8], &mut rng_for(7, "c5c")),
                Tensor::randn(&[8, 8], &mut rng_for(8, "c5q")),
                Tensor::randn(&[8, 8], &mut rng_for(9, "c5k")),
                Tensor::randn(&[8, 8], &mut rng_for(10, "c5v")),
            ],
            &[true; 5],
            |tp, v| {
                let gmask = GuidanceMask { mask: bits.clone(), text_len: 2, n_tokens: 1 };
                let out =
                    masked_cross_attention(tp, v[0], v[1], &gmask, v[2], v[3], v[4], mode, 2)
                        .unwrap();
                tp.mse_loss(out, v[0])
            },
            1e-5,
        );
        assert!(err < 1e-4, "masked_cross_attention grad err {err} mode {mode:?}");
    }

    // fuse_local through a randomized (post-init) parameter set
    let mut store = ParamStore::<f64>::new();
    let mut rng = rng_for(11, "c5-lf");
    let params = LocalFuserParams::init(
        &mut store,
        "lf",
        LocalFuserConfig {
            stream_width: 4,
            stream_blocks: 2,
            scale_channels: [6, 8, 10, 12],
            stem_factor: 1,
        },
        &mut rng,
    );
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.tensor(id).shape().to_vec();
        store.set_tensor(id, Tensor::randn_scaled(&shape, 0.15, &mut rng));
    }
    store.set_trainable(ParamGroup::LocalFuser, true);
    let fg = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng);
    let bg = Tensor::<f64>::randn(&[1, 1, 8, 8], &mut rng);
    let all: Vec<_> = store.ids().collect();
    let err = finite_diff_check_params(&store, &all, 4, 1e-5, |tape, cx| {
        let f = tape.constant(fg.clone());
        let b = tape.constant(bg.clone());
        let feats = fuse_local(cx, f, b, &params).unwrap();
        let mut loss = tape.mean_all(feats.scales[0]);
        for &s in &feats.scales[1..] {
            loss = tape.add(loss, tape.mse_loss(s, tape.scale(s, 0.5)));
        }
        loss
    });
    assert!(err < 1e-4, "fuse_local grad err {err}");

    // loss_step through the full dual-branch model in f64
    let config = UNetConfig {
        encoder_blocks: 4,
        base_channels: 8,
        channel_mults: [1, 1, 2, 2],
        attention_levels: vec![2, 3],
        transformer_per_block: false,
        heads: 2,
        ffn_mult: 2,
        codec: LatentCodec { mode: CodecMode::Identity, pixel_res: 16 },
        time_dim: 16,
        ..Default::default()
    };
    let (mut model, mut store) = build_unet::<f64>(&config, 13).unwrap();
    model.set_attachment(Attachment::FULL);
    // open the zero-initialized layers so every path carries gradient
    let mut rng = rng_for(14, "c5-open");
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.get(id).name.clone();
        if name.starts_with("zc.")
            || name.contains(".zero")
            || name.contains("global_fuser") && name.ends_with(".l2.w")
            || name.contains("proj_out")
        {
            let shape = store.tensor(id).shape().to_vec();
            store.set_tensor(id, Tensor::randn_scaled(&shape, 0.05, &mut rng));
        }
    }
    for g in ParamGroup::ALL {
        store.set_trainable(g, true);
    }
    let schedule = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let scene = sample_scene(0, &GeneratorConfig::default()).unwrap();
    let sample = render_scene(&scene, 16).unwrap();
    let inp = OracleInpainter::for_sample(&sample);
    let trip = build_triplet(&sample, &inp, &TripletOptions::default()).unwrap();
    let embedder = ImageEmbedder::new(0, config.emb_dim);
    let tc = TrainerConfig { unet: config.clone(), ..Default::default() };
    let item = cnc_core::trainer::train_items_from_triplets(&[trip], &tc, &embedder).unwrap()
        .remove(0);
    // freeze the stochastic draws once
    let t_draw = 412usize;
    let mut nrng = rng_for(15, "c5-noise");
    let eps = Tensor::<f32>::randn(&[3, 16, 16], &mut nrng);
    let z_t = cnc_core::diffusion::q_sample(&item.z0, t_draw, &eps, &schedule).unwrap();
    let z_t64 = z_t.cast::<f64>().reshaped(&[1, 3, 16, 16]);
    let eps64 = eps.cast::<f64>().reshaped(&[1, 3, 16, 16]);
    let cond = cnc_core::diffusion::prepare_batch::<f64>(
        &[item.cond.clone()],
        &cnc_core::embedders::Vocabulary::toy(),
        &config,
        SoftGuidanceMode::Additive,
    )
    .unwrap();

    // sample parameters across every trainable group
    let mut probe: Vec<_> = Vec::new();
    let picks = [
        "enc.b0.res.conv1.w",
        "dec.b1.res.conv2.w",
        "center.attn.cross_k.w",
        "text.table",
        "clone.enc.b2.res.conv1.w",
        "zc.enc1.w",
        "zc.center.w",
        "fdn.l1.gamma.w",
        "local_fuser.fg.res0.conv1.w",
        "local_fuser.zero2.w",
        "global_fuser.fg.l1.w",
        "global_fuser.bg.l2.w",
        "temb.l1.w",
    ];
    for name in picks {
        probe.push(store.id_of(name).unwrap_or_else(|| panic!("missing {name}")));
    }
    let err = finite_diff_check_params(&store, &probe, 3, 1e-5, |_tape, cx| {
        cnc_core::diffusion::loss_for_noised(cx, &model, &z_t64, &[t_draw], &eps64, &cond).unwrap()
    });
    assert!(err < 1e-4, "loss_step grad err {err}");
    let elapsed = t0.elapsed().as_secs_f64();
    assert!(elapsed < 300.0, "gradient suite took {elapsed:.0}s");
    println!("criterion 5 PASS: analytic gradients match finite differences (<1e-4) in {elapsed:.0}s");
}

// ---- criterion 6 ----

#[test]
fn criterion_06_frozen_prior_audit() {
    let _g = serial();
    let art = &*ARTIFACTS;
    let cfg = default_trainer_config();
    let prior = Trainer::load_checkpoint(&art.checkpoints["prior"], &cfg).unwrap();
    let finetune = Trainer::load_checkpoint(&art.checkpoints["finetune"], &cfg).unwrap();
    let snapshot = prior.store.hash_group(ParamGroup::Prior);
    let after = finetune.store.hash_group(ParamGroup::Prior);
    assert_eq!(snapshot, after, "frozen prior drifted during the staged run");
    assert_eq!(finetune.prior_hash.as_deref(), Some(snapshot.as_str()));
    println!("criterion 6 PASS: frozen prior hash {} stable through all stages", &snapshot[..12]);
}

// ---- criterion 7 ----

#[test]
fn criterion_07_end_to_end_training() {
    let _g = serial();
    let art = &*ARTIFACTS;
    assert_eq!(art.summary.stages.len(), 4);
    let day = 24.0 * 3600.0;
    assert!(
        art.summary.total_wall_seconds < day,
        "curriculum took {:.1}h",
        art.summary.total_wall_seconds / 3600.0
    );
    for s in &art.summary.stages {
        assert!(
            s.end_loss < s.start_loss,
            "stage {} loss did not decrease: {:.4} -> {:.4}",
            s.stage,
            s.start_loss,
            s.end_loss
        );
    }
    println!(
        "criterion 7 PASS: full curriculum in {:.2}h CPU; stage losses {}",
        art.summary.total_wall_seconds / 3600.0,
        art.summary
            .stages
            .iter()
            .map(|s| format!("{} {:.3}->{:.3}", s.stage, s.start_loss, s.end_loss))
            .collect::<Vec<_>>()
            .join(", ")
    );
}

// ---- criterion 8 ----

#[test]
fn criterion_08_occlusion_ordering() {
    let _g = serial();
    let art = &*ARTIFACTS;
    let loaded = load_model(&art.checkpoints["local"]).unwrap();
    let outcome = run_ordering_suite(&loaded, 50, 808, &sampler_opts(50)).unwrap();
    assert!(outcome.used >= 50);
    assert!(
        outcome.accuracy >= 0.8,
        "occlusion accuracy {:.3} below 0.8 on {} pairs",
        outcome.accuracy,
        outcome.used
    );
    println!(
        "criterion 8 PASS: occlusion accuracy {:.3} on {} held-out pairs after the local stage",
        outcome.accuracy, outcome.used
    );
}

// ---- criterion 9 ----

#[test]
fn criterion_09_semantic_localization() {
    let _g = serial();
    let art = &*ARTIFACTS;
    let loaded = load_model(&art.checkpoints["finetune"]).unwrap();
    let manifest = store::read_dataset_manifest(&art.scenes).unwrap();
    let mut samples = store::rerender_split(&manifest, "test").unwrap();
    samples.truncate(50);
    let items = eval_items(&loaded, &samples).unwrap();

    let sem = run_semantics_suite(&loaded, &items, &sampler_opts(50), 909).unwrap();
    assert!(
        sem.margin.mean >= 0.05,
        "correct-vs-swapped margin {:.4} below 0.05",
        sem.margin.mean
    );
    assert!(sem.lambda0_bitwise_invariant, "lambda_bg=0 must be bit-invariant to the bg exemplar");

    let rows = run_lambda_sweep(&loaded, &items, &[0.5, 1.0, 1.5], &sampler_opts(50), 910).unwrap();
    for w in rows.windows(2) {
        assert!(
            w[1].bg_sim.mean >= w[0].bg_sim.mean - 1e-9,
            "bg_sim not non-decreasing: {:.4}@{} -> {:.4}@{}",
            w[0].bg_sim.mean,
            w[0].lambda_bg,
            w[1].bg_sim.mean,
            w[1].lambda_bg
        );
    }
    println!(
        "criterion 9 PASS: pairing margin {:.3} (gray baseline {:.3}); bg_sim {} over lambda {{0.5,1.0,1.5}}; lambda0 bit-invariant",
        sem.margin.mean,
        sem.gray_margin.mean,
        rows.iter().map(|r| format!("{:.3}", r.bg_sim.mean)).collect::<Vec<_>>().join(" -> ")
    );
}

// ---- criterion 10 ----

#[test]
fn criterion_10_reconstruction() {
    let _g = serial();
    let art = &*ARTIFACTS;
    let loaded = load_model(&art.checkpoints["finetune"]).unwrap();
    let manifest = store::read_dataset_manifest(&art.scenes).unwrap();
    let mut samples = store::rerender_split(&manifest, "test").unwrap();
    samples.truncate(50);
    let items = eval_items(&loaded, &samples).unwrap();
    let estimator = estimator_for_dataset(
        &art.scenes,
        &art.scenes.parent().unwrap().join("depth_estimator.blob"),
        &Default::default(),
    )
    .unwrap();
    let rec = run_recon_suite(&loaded, &items, &estimator, &sampler_opts(50), 1010).unwrap();
    assert!(rec.ssim.mean >= 0.5, "mean SSIM {:.4} below 0.5", rec.ssim.mean);
    assert!(
        rec.depth_mae.mean <= 2.0 * rec.estimator_val_mae,
        "depth MAE {:.4} above 2x estimator validation MAE {:.4}",
        rec.depth_mae.mean,
        rec.estimator_val_mae
    );
    println!(
        "criterion 10 PASS: SSIM {:.3}, depth MAE {:.4} (estimator val {:.4}) over 50 reconstructions",
        rec.ssim.mean, rec.depth_mae.mean, rec.estimator_val_mae
    );
}

// ---- criterion 11 ----

#[test]
fn criterion_11_determinism() {
    let _g = serial();
    std::env::set_var("CNC_DETERMINISTIC", "1");
    let dir = tempfile::tempdir().unwrap();

    // dataset gen, twice
    let gen_hash = |name: &str| {
        let out = dir.path().join(name);
        dataset::run(&dataset::DatasetGenArgs {
            seed: 3,
            count: 8,
            resolution: 32,
            out: out.clone(),
        })
        .unwrap();
        std::fs::remove_file(out.join("run_manifest.json")).unwrap();
        cnc_cli::manifest::hash_dir(&out).unwrap()
    };
    assert_eq!(gen_hash("d1"), gen_hash("d2"), "dataset gen not bitwise reproducible");

    // one training epoch, twice (small config through the CLI path)
    let scenes = dir.path().join("d1");
    let triplets = dir.path().join("t");
    triplet::run(&triplet::TripletBuildArgs {
        dataset: scenes,
        backend: "oracle".into(),
        condition: "depth".into(),
        out: triplets.clone(),
        dilation_radius: None,
    })
    .unwrap();
    let mut tc = TrainerConfig {
        unet: UNetConfig {
            encoder_blocks: 4,
            base_channels: 8,
            channel_mults: [1, 1, 2, 2],
            attention_levels: vec![2, 3],
            transformer_per_block: false,
            heads: 2,
            ffn_mult: 2,
            codec: LatentCodec { mode: CodecMode::Identity, pixel_res: 32 },
            time_dim: 16,
            ..Default::default()
        },
        seed: 5,
        ..Default::default()
    };
    tc.stages.prior.epochs = 1;
    tc.stages.prior.batch_size = 8;
    let exp = cnc_cli::config::ExperimentConfig {
        trainer: tc,
        sampler: Default::default(),
        triplets: None,
        out: None,
    };
    let cfg_path = dir.path().join("exp.json");
    std::fs::write(&cfg_path, serde_json::to_vec(&exp).unwrap()).unwrap();
    let train_hash = |name: &str| {
        let out = dir.path().join(name);
        let o = traincmd::run(&traincmd::TrainArgs {
            config: Some(cfg_path.clone()),
            stage: Some("prior".into()),
            resume: None,
            seed: None,
            triplets: Some(triplets.clone()),
            out: Some(out),
        })
        .unwrap();
        cnc_cli::manifest::hash_file(&o.checkpoint).unwrap()
    };
    let (h1, h2) = (train_hash("r1"), train_hash("r2"));
    assert_eq!(h1, h2, "1-epoch training not bitwise reproducible");

    // ddim sampling, twice
    let ckpt = dir.path().join("r1/prior-final.ckpt");
    let png_hash = |name: &str| {
        let out = dir.path().join(format!("{name}.png"));
        samplecmd::run(&samplecmd::SampleArgs {
            checkpoint: Some(ckpt.clone()),
            prompt: Some("red circle on navy background".into()),
            steps: 10,
            cfg: 7.0,
            seed: 77,
            out: Some(out.clone()),
            ..Default::default()
        })
        .unwrap();
        cnc_cli::manifest::hash_file(&out).unwrap()
    };
    assert_eq!(png_hash("s1"), png_hash("s2"), "ddim sampling not bitwise reproducible");
    println!("criterion 11 PASS: dataset gen, 1-epoch training and ddim sampling are bitwise reproducible");
}

// ---- trained-model example checks beyond the numbered criteria ----

#[test]
fn trained_extras_stream_disentanglement_and_tokens() {
    let _g = serial();
    let art = &*ARTIFACTS;
    let loaded = load_model(&art.checkpoints["finetune"]).unwrap();

    // fg/bg global streams produce different tokens on a trained checkpoint
    let mut rng = rng_for(42, "extras");
    let emb = Tensor::<f32>::randn(&[loaded.config.unet.emb_dim], &mut rng);
    let fg = loaded
        .model
        .global_fuser
        .project_tokens_tensor(&loaded.store, &emb, cnc_core::global_conditioning::Stream::Foreground)
        .unwrap();
    let bg = loaded
        .model
        .global_fuser
        .project_tokens_tensor(&loaded.store, &emb, cnc_core::global_conditioning::Stream::Background)
        .unwrap();
    assert!(fg.max_abs_diff(&bg) > 1e-6, "trained fg/bg streams should differ");

    // zeroing the bg stream moves fused features less inside the fg mask
    // than outside it, on >= 50 toy samples
    let gen = GeneratorConfig::default();
    let (mut fg_acc, mut bg_acc) = (0.0f64, 0.0f64);
    let (mut fg_n, mut bg_n) = (0usize, 0usize);
    for seed in 5000..5050u64 {
        let scene = sample_scene(seed, &gen).unwrap();
        let s = render_scene(&scene, 32).unwrap();
        let inp = OracleInpainter::for_sample(&s);
        let t = build_triplet(&s, &inp, &TripletOptions::default()).unwrap();
        let tape = Tape::no_grad();
        let cx = Ctx::new(&tape, &loaded.store);
        let fg_map =
            tape.constant(t.fg_condition.clone().reshaped(&[1, 1, 32, 32]));
        let bg_map =
            tape.constant(t.bg_condition.clone().reshaped(&[1, 1, 32, 32]));
        let zero = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let full = fuse_local(&cx, fg_map, bg_map, &loaded.model.local_fuser).unwrap();
        let nobg = fuse_local(&cx, fg_map, zero, &loaded.model.local_fuser).unwrap();
        let a = tape.value(full.scales[0]);
        let b = tape.value(nobg.scales[0]);
        let ch = a.shape()[1];
        for c in 0..ch {
            for p in 0..32 * 32 {
                let d = (a.data()[c * 1024 + p] - b.data()[c * 1024 + p]).abs() as f64;
                if t.mask.data()[p] > 0.5 {
                    fg_acc += d;
                    fg_n += 1;
                } else {
                    bg_acc += d;
                    bg_n += 1;
                }
            }
        }
    }
    let (fg_mean, bg_mean) = (fg_acc / fg_n as f64, bg_acc / bg_n as f64);
    assert!(
        fg_mean < bg_mean,
        "bg-stream ablation should move fg regions less: fg {fg_mean:.5} vs bg {bg_mean:.5}"
    );
    println!(
        "trained extras PASS: stream ablation delta fg {fg_mean:.5} < bg {bg_mean:.5}; fg/bg tokens diverge"
    );
}

#[test]
fn trained_extras_ddim_stride_consistency() {
    let _g = serial();
    let art = &*ARTIFACTS;
    let loaded = load_model(&art.checkpoints["finetune"]).unwrap();
    let manifest = store::read_dataset_manifest(&art.scenes).unwrap();
    let mut samples = store::rerender_split(&manifest, "test").unwrap();
    samples.truncate(4);
    let items = eval_items(&loaded, &samples).unwrap();
    let requests: Vec<_> = items
        .iter()
        .enumerate()
        .map(|(i, it)| cnc_core::diffusion::SampleRequest {
            cond: it.cond.clone(),
            seed: 4242 + i as u64,
        })
        .collect();
    let full = ddim_sample_batch(
        &loaded.model,
        &loaded.store,
        &loaded.schedule,
        &loaded.vocab,
        &requests,
        &sampler_opts(loaded.schedule.t_steps()),
    )
    .unwrap();
    let strided = ddim_sample_batch(
        &loaded.model,
        &loaded.store,
        &loaded.schedule,
        &loaded.vocab,
        &requests,
        &sampler_opts(50),
    )
    .unwrap();
    let mut mad = 0.0f64;
    let mut n = 0usize;
    for (a, b) in full.iter().zip(&strided) {
        for (x, y) in a.data().iter().zip(b.data()) {
            mad += (x - y).abs() as f64;
            n += 1;
        }
    }
    mad /= n as f64;
    assert!(mad < 0.1, "50-step vs full-step mean abs diff {mad:.4}");
    println!("trained extras PASS: ddim 50-step stays within {mad:.4} of full-step sampling");
}
