use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use latent_restore::cli::{self, Options};
use latent_restore::config::RunConfig;
use latent_restore::data::Split;
use latent_restore::eval::{self, ScoredSet};
use latent_restore::prior::ConditioningContext;
use latent_restore::scoring;
use lsr_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lsr_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn tiny_config() -> RunConfig {
    let mut cfg: RunConfig = serde_json::from_str(
        r#"{
            "seed": 5,
            "data": {"train_volumes": 2, "val_volumes": 2, "val_normal_volumes": 1, "slices": 4, "side": 16,
                     "radius_range": [2, 3], "span_range": [2, 3]},
            "codec": {"image_side": 16, "channels": 4, "res_channels": 4, "codebook_size": 8, "embedding_dim": 4,
                      "vae_latent_dim": 4},
            "prior": {"channels": 4, "blocks": 1, "res_blocks": 1},
            "scoring": {"restorations": 2},
            "eval": {"contrast_probe": false}
        }"#,
    )
    .unwrap();
    for t in [&mut cfg.train.vqvae, &mut cfg.train.prior, &mut cfg.train.vae] {
        t.max_steps = 4;
        t.batch_size = 2;
    }
    cfg
}

#[test]
fn metrics_match_the_library() {
    let scores = [0.3, 0.9, 0.1, 0.9, 0.5];
    let labels = [0u8, 1, 0, 0, 1];
    let set = ScoredSet::new(scores.to_vec(), labels.iter().map(|&l| l != 0).collect()).unwrap();
    let mut out = f64::NAN;
    assert_eq!(
        unsafe { lsr_auroc(scores.as_ptr(), labels.as_ptr(), 5, &mut out) },
        LsrStatus::Ok
    );
    assert_eq!(out, eval::auroc(&set).unwrap());
    assert_eq!(
        unsafe { lsr_average_precision(scores.as_ptr(), labels.as_ptr(), 5, &mut out) },
        LsrStatus::Ok
    );
    assert_eq!(out, eval::average_precision(&set).unwrap());

    let a = [1u8, 1, 1, 1, 0, 0, 0, 0];
    let b = [0u8, 1, 1, 1, 1, 1, 1, 0];
    assert_eq!(unsafe { lsr_dice(a.as_ptr(), b.as_ptr(), 8, &mut out) }, LsrStatus::Ok);
    assert!((out - 0.6).abs() < 1e-15);

    let map = [0.9, 0.8, 0.1, 0.2];
    let truth = [1u8, 1, 0, 0];
    let (mut t, mut d) = (0.0, 0.0);
    assert_eq!(
        unsafe { lsr_best_dice(map.as_ptr(), truth.as_ptr(), 4, &mut t, &mut d) },
        LsrStatus::Ok
    );
    assert_eq!((t, d), (0.8, 1.0));
}

#[test]
fn scoring_helpers() {
    let nll = [1.0, 2.0, 3.0, 8.0];
    let mut out = 0.0;
    assert_eq!(
        unsafe { lsr_sample_score(nll.as_ptr(), 4, 7.0, &mut out) },
        LsrStatus::Ok
    );
    assert_eq!(out, 8.0);

    let mut spike = vec![0.0; 81];
    spike[40] = 3.0;
    let mut smoothed = vec![1.0; 81];
    assert_eq!(
        unsafe { lsr_smooth(spike.as_ptr(), 9, 9, smoothed.as_mut_ptr()) },
        LsrStatus::Ok
    );
    assert!(smoothed.iter().all(|&v| v == 0.0));
}

#[test]
fn errors_are_reported_not_raised() {
    let mut out = 0.0;
    let labels = [1u8, 1];
    let scores = [0.1, 0.2];
    assert_eq!(
        unsafe { lsr_auroc(scores.as_ptr(), labels.as_ptr(), 2, &mut out) },
        LsrStatus::SingleClass
    );
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { lsr_auroc(ptr::null(), labels.as_ptr(), 2, &mut out) },
        LsrStatus::NullPointer
    );
    assert!(last_error().contains("scores"));
    assert_eq!(
        unsafe { lsr_auroc(scores.as_ptr(), labels.as_ptr(), 2, ptr::null_mut()) },
        LsrStatus::SingleClass
    );
    let negative = [-1.0; 4];
    let mut buf = [0.0; 4];
    assert_eq!(
        unsafe { lsr_smooth(negative.as_ptr(), 2, 2, buf.as_mut_ptr()) },
        LsrStatus::InvalidArgument
    );
    // success clears the message
    assert_eq!(
        unsafe { lsr_sample_score(scores.as_ptr(), 2, 0.0, &mut out) },
        LsrStatus::Ok
    );
    assert!(last_error().is_empty());

    let missing = CString::new("/nonexistent/models").unwrap();
    let mut handle = ptr::null_mut();
    let status = unsafe { lsr_scorer_open(missing.as_ptr(), ptr::null(), &mut handle) };
    assert_eq!(status, LsrStatus::MissingDependency);
    assert!(handle.is_null());
    unsafe { lsr_scorer_free(ptr::null_mut()) };
    assert!(!unsafe { CStr::from_ptr(lsr_version()) }.to_bytes().is_empty());
}

fn train_tiny(root: &Path) -> RunConfig {
    let cfg = tiny_config();
    cli::cmd_pipeline(&cfg, root, &Options::default()).unwrap();
    std::fs::write(root.join("config.json"), serde_json::to_vec(&cfg).unwrap()).unwrap();
    cfg
}

#[test]
fn scorer_handle_matches_library_scoring() {
    let root = tempfile::tempdir().unwrap();
    let cfg = train_tiny(root.path());
    let models = root.path().join("models");
    let models_c = CString::new(models.to_str().unwrap()).unwrap();
    let config_c = CString::new(root.path().join("config.json").to_str().unwrap()).unwrap();

    // the default config does not match these checkpoints
    let mut handle = ptr::null_mut();
    let status = unsafe { lsr_scorer_open(models_c.as_ptr(), ptr::null(), &mut handle) };
    assert_eq!(status, LsrStatus::InvalidArgument, "{}", last_error());

    assert_eq!(
        unsafe { lsr_scorer_open(models_c.as_ptr(), config_c.as_ptr(), &mut handle) },
        LsrStatus::Ok,
        "{}",
        last_error()
    );
    let mut side = 0;
    assert_eq!(unsafe { lsr_scorer_image_side(handle, &mut side) }, LsrStatus::Ok);
    assert_eq!(side, 16);

    let manifest = latent_restore::data::Manifest::load(&root.path().join("data").join("manifest.json")).unwrap();
    let slice = &manifest.load_split(&root.path().join("data"), Split::Val).unwrap()[1];
    let pixels = slice.image.data();
    let mut score = 0.0;
    let mut map = vec![0.0; 256];
    let status = unsafe {
        lsr_score_image(
            handle,
            pixels.as_ptr(),
            16,
            16,
            slice.position,
            42,
            &mut score,
            map.as_mut_ptr(),
        )
    };
    assert_eq!(status, LsrStatus::Ok, "{}", last_error());

    let m = cli::load_scoring_models(&cfg, &models).unwrap();
    let ctx = ConditioningContext::new(slice.position).unwrap();
    let want = scoring::score_image(&slice.image, &m.codec, &m.prior, ctx, &m.scoring, 42).unwrap();
    assert_eq!(score, want.sample_score);
    assert_eq!(map, want.map.values());

    let mut base = 0.0;
    let status = unsafe { lsr_baseline_score(handle, pixels.as_ptr(), 16, 16, &mut base, ptr::null_mut()) };
    assert_eq!(status, LsrStatus::Ok);
    assert_eq!(base, scoring::vae_scores(&slice.image, &m.vae).unwrap().0);

    let status = unsafe { lsr_score_image(handle, pixels.as_ptr(), 16, 16, 0.9, 42, &mut score, ptr::null_mut()) };
    assert_eq!(status, LsrStatus::InvalidArgument);
    let status = unsafe { lsr_score_image(handle, pixels.as_ptr(), 8, 32, 0.0, 42, &mut score, ptr::null_mut()) };
    assert_ne!(status, LsrStatus::Ok);
    unsafe { lsr_scorer_free(handle) };
}

#[test]
fn header_is_valid_c_and_cpp() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("include")
        .join("latent_restore.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "lsr_scorer_open",
        "lsr_score_image",
        "lsr_auroc",
        "LSR_STATUS_OK",
        "typedef struct LsrScorer",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"latent_restore.h\"\nint main(void) { double o; LsrStatus s = lsr_dice(0, 0, 0, &o); return s == LSR_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    for (compiler, extra) in [("cc", &["-std=c99"][..]), ("c++", &["-x", "c++"][..])] {
        let status = Command::new(compiler)
            .args(extra)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(header.parent().unwrap())
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{compiler} rejected the header"),
            Err(e) => eprintln!("skipping {compiler}: {e}"),
        }
    }
}
