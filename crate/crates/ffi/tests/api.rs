use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use fconv::config::Config;
use fconv::io_data::make_synthetic_scene;
use fconv::net::{NetSpec, Network};
use fconv::pipeline::{infer_scene, train_first_stage, PreparedScene};
use fconv_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe { fconv_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn desk_config() -> *mut FconvConfig {
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { fconv_config_new(c("desk").as_ptr(), &mut cfg) },
        FconvStatus::Ok
    );
    for (k, v) in [
        ("block_channels", "8,8,8"),
        ("pointnet_widths", "8,8"),
        ("deconv_channels", "8"),
        ("steps", "3"),
        ("fg_threshold", "0.001"),
    ] {
        assert_eq!(
            unsafe { fconv_config_set(cfg, c(k).as_ptr(), c(v).as_ptr()) },
            FconvStatus::Ok
        );
    }
    cfg
}

fn rust_config() -> Config {
    let mut cfg = Config::preset("desk").unwrap();
    cfg.apply_overrides(&[
        "block_channels=8,8,8",
        "pointnet_widths=8,8",
        "deconv_channels=8",
        "steps=3",
        "fg_threshold=0.001",
    ])
    .unwrap();
    cfg
}

fn trained_checkpoint(dir: &Path, cfg: &Config) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scenes: Vec<PreparedScene> = (0..2)
        .map(|i| {
            PreparedScene::new(
                &make_synthetic_scene(&cfg.synth_config(), &format!("{i}"), &mut rng).unwrap(),
                cfg,
            )
        })
        .collect();
    let mut net = Network::new(NetSpec::from_config(cfg), &mut rng).unwrap();
    train_first_stage(&mut net, &scenes, cfg, &mut rng).unwrap();
    let path = dir.join("first.ckpt");
    net.save(&path).unwrap();
    path
}

#[test]
fn unknown_preset_is_a_config_error() {
    let mut cfg = ptr::null_mut();
    let status = unsafe { fconv_config_new(c("nope").as_ptr(), &mut cfg) };
    assert_eq!(status, FconvStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("unknown preset"), "{}", last_error());
}

#[test]
fn null_arguments_are_reported() {
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { fconv_config_new(ptr::null(), &mut cfg) },
        FconvStatus::NullPointer
    );
    assert!(last_error().contains("preset"));
    assert_eq!(
        unsafe { fconv_config_new(c("desk").as_ptr(), ptr::null_mut()) },
        FconvStatus::NullPointer
    );
    unsafe { fconv_config_free(ptr::null_mut()) };
    assert_eq!(unsafe { fconv_detections_len(ptr::null()) }, 0);
}

#[test]
fn config_overrides_are_validated() {
    let cfg = desk_config();
    assert_eq!(
        unsafe { fconv_config_set(cfg, c("no_such_key").as_ptr(), c("1").as_ptr()) },
        FconvStatus::Config
    );
    assert_eq!(
        unsafe { fconv_config_set(cfg, c("yaw_bins").as_ptr(), c("many").as_ptr()) },
        FconvStatus::Config
    );
    assert_eq!(unsafe { fconv_config_category_count(cfg) }, 1);
    unsafe { fconv_config_free(cfg) };
}

#[test]
fn last_error_reports_the_full_length() {
    let mut cfg = ptr::null_mut();
    unsafe { fconv_config_new(c("nope").as_ptr(), &mut cfg) };
    let needed = unsafe { fconv_last_error(ptr::null_mut(), 0) };
    let mut small = [0 as c_char; 8];
    assert_eq!(unsafe { fconv_last_error(small.as_mut_ptr(), small.len()) }, needed);
    assert_eq!(unsafe { CStr::from_ptr(small.as_ptr()) }.to_bytes().len(), 7);
    assert_eq!(needed, last_error().len() + 1);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let cfg = desk_config();
    let mut det = ptr::null_mut();
    let status = unsafe { fconv_detector_new(cfg, c("/nonexistent/model.ckpt").as_ptr(), ptr::null(), &mut det) };
    assert_eq!(status, FconvStatus::Io);
    assert!(det.is_null());
    unsafe { fconv_config_free(cfg) };
}

#[test]
fn box_iou_matches_the_library() {
    let a = FconvBox {
        center: [0.0; 3],
        sizes: [1.0; 3],
        yaw: 0.0,
    };
    let b = FconvBox {
        center: [0.5, 0.0, 0.0],
        sizes: [1.0; 3],
        yaw: 0.0,
    };
    let (mut i3, mut ib) = (0.0, 0.0);
    assert_eq!(unsafe { fconv_box_iou(&a, &b, &mut i3, &mut ib) }, FconvStatus::Ok);
    assert!((i3 - 1.0 / 3.0).abs() < 1e-12 && (ib - 1.0 / 3.0).abs() < 1e-12);
    let bad = FconvBox {
        sizes: [0.0, 1.0, 1.0],
        ..a
    };
    assert_eq!(
        unsafe { fconv_box_iou(&a, &bad, &mut i3, ptr::null_mut()) },
        FconvStatus::Invalid
    );
}

#[test]
fn detection_through_the_c_abi_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let rcfg = rust_config();
    let model = trained_checkpoint(dir.path(), &rcfg);
    let cfg = desk_config();
    let mut det = ptr::null_mut();
    let model_c = c(model.to_str().unwrap());
    assert_eq!(
        unsafe { fconv_detector_new(cfg, model_c.as_ptr(), ptr::null(), &mut det) },
        FconvStatus::Ok,
        "{}",
        last_error()
    );
    unsafe { fconv_config_free(cfg) };

    let sample = make_synthetic_scene(&rcfg.synth_config(), "000042", &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let xyz: Vec<f64> = sample.rect_points().iter().flatten().copied().collect();
    let proj: Vec<f64> = sample.calib.projection.iter().flatten().copied().collect();
    let mut scene = ptr::null_mut();
    let id = c(&sample.frame_id);
    let n = xyz.len() / 3;
    assert_eq!(
        unsafe { fconv_scene_new(id.as_ptr(), xyz.as_ptr(), ptr::null(), n, proj.as_ptr(), &mut scene) },
        FconvStatus::Ok
    );
    for p in &sample.proposals {
        let [u0, v0, u1, v1] = p.image_box;
        let cat = c(&p.category);
        assert_eq!(
            unsafe { fconv_scene_add_proposal(scene, cat.as_ptr(), u0, v0, u1, v1, p.score_2d) },
            FconvStatus::Ok
        );
    }
    assert_eq!(unsafe { fconv_scene_proposal_count(scene) }, sample.proposals.len());

    let mut dets = ptr::null_mut();
    assert_eq!(
        unsafe { fconv_detect(det, scene, &mut dets) },
        FconvStatus::Ok,
        "{}",
        last_error()
    );
    let net = Network::from_file(NetSpec::from_config(&rcfg), &model).unwrap();
    let expected = infer_scene(&net, &PreparedScene::new(&sample, &rcfg), &rcfg).unwrap();
    assert!(!expected.is_empty());
    assert_eq!(unsafe { fconv_detections_len(dets) }, expected.len());
    for (i, e) in expected.iter().enumerate() {
        let mut got = FconvDetection {
            category: 9,
            bbox: FconvBox {
                center: [0.0; 3],
                sizes: [0.0; 3],
                yaw: 0.0,
            },
            score_3d: 0.0,
            score_2d: 0.0,
            score_fused: 0.0,
        };
        assert_eq!(unsafe { fconv_detections_get(dets, i, &mut got) }, FconvStatus::Ok);
        assert_eq!(got.category, 0);
        assert_eq!(
            got.bbox,
            FconvBox {
                center: e.bbox.center,
                sizes: e.bbox.sizes,
                yaw: e.bbox.yaw
            }
        );
        assert_eq!(
            (got.score_3d, got.score_2d, got.score_fused),
            (e.score_3d, e.score_2d, e.score_fused)
        );
    }
    let mut sink = std::mem::MaybeUninit::<FconvDetection>::uninit();
    assert_eq!(
        unsafe { fconv_detections_get(dets, expected.len(), sink.as_mut_ptr()) },
        FconvStatus::OutOfRange
    );
    unsafe {
        fconv_detections_free(dets);
        fconv_scene_free(scene);
        fconv_detector_free(det);
    }
}

#[test]
fn invalid_proposal_is_rejected() {
    let proj = [700.0, 0.0, 600.0, 0.0, 0.0, 700.0, 180.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let mut scene = ptr::null_mut();
    assert_eq!(
        unsafe { fconv_scene_new(c("f").as_ptr(), ptr::null(), ptr::null(), 0, proj.as_ptr(), &mut scene) },
        FconvStatus::Ok
    );
    let status = unsafe { fconv_scene_add_proposal(scene, c("Car").as_ptr(), 10.0, 10.0, 5.0, 20.0, 0.9) };
    assert_ne!(status, FconvStatus::Ok);
    assert_eq!(unsafe { fconv_scene_proposal_count(scene) }, 0);
    unsafe { fconv_scene_free(scene) };
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = target_dir().join("libfconv_ffi.a");
    if !lib.exists() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "fconv.h"
int main(void) {
    FconvConfig *cfg = NULL;
    if (fconv_config_new("desk", &cfg) != FCONV_STATUS_OK) return 1;
    if (fconv_config_set(cfg, "no_such_key", "1") != FCONV_STATUS_CONFIG) return 2;
    char msg[256];
    fconv_last_error(msg, sizeof msg);
    if (strstr(msg, "no_such_key") == NULL) return 3;
    FconvBox a = {{0, 0, 0}, {1, 1, 1}, 0};
    FconvBox b = {{0.5, 0, 0}, {1, 1, 1}, 0};
    double iou = 0;
    if (fconv_box_iou(&a, &b, &iou, NULL) != FCONV_STATUS_OK) return 4;
    fconv_config_free(cfg);
    printf("%.6f\n", iou);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("smoke");
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&header_dir)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.333333");
}
