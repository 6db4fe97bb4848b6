use std::ffi::{c_char, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use moelab_ffi::*;

const CFG: &str = r#"{
    "model": {"hidden_dim": 8, "inner_dim": 16, "layers": 2},
    "train": {"tokens_per_step": 16, "warmup_steps": 2, "total_steps": 20},
    "telemetry": {"log_interval": 5}
}"#;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { moelab_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn config(json: &str) -> *mut MoelabConfig {
    let text = CString::new(json).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(
        unsafe { moelab_config_from_json(text.as_ptr(), &mut cfg) },
        MoelabStatus::Ok
    );
    cfg
}

#[test]
fn convert_and_verify_through_the_c_abi() {
    unsafe {
        let cfg = config(CFG);
        let mut dense = ptr::null_mut();
        assert_eq!(moelab_model_dense(cfg, &mut dense), MoelabStatus::Ok);
        let mut moe = ptr::null_mut();
        assert_eq!(moelab_model_convert(dense, cfg, &mut moe), MoelabStatus::Ok);
        assert_eq!(moelab_model_hidden_dim(moe), 8);
        assert!(moelab_model_param_count(moe) > moelab_model_param_count(dense));

        let (mut dev, mut verdict) = (f64::NAN, MoelabVerdict::NotEquivalent);
        let status = moelab_verify(dense, moe, 4, 8, 1, &mut dev, &mut verdict);
        assert_eq!(status, MoelabStatus::Ok);
        assert_eq!(dev, 0.0);
        assert_eq!(verdict, MoelabVerdict::Equivalent);

        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let (mut yd, mut ym) = (vec![0.0; 24], vec![1.0; 24]);
        assert_eq!(
            moelab_model_forward(dense, x.as_ptr(), 3, yd.as_mut_ptr()),
            MoelabStatus::Ok
        );
        assert_eq!(
            moelab_model_forward(moe, x.as_ptr(), 3, ym.as_mut_ptr()),
            MoelabStatus::Ok
        );
        assert_eq!(yd, ym);

        moelab_model_free(moe);
        moelab_model_free(dense);
        moelab_config_free(cfg);
    }
}

#[test]
fn errors_map_to_status_codes_with_messages() {
    unsafe {
        let bad = CString::new(r#"{"train": {"lr": 0}}"#).unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(
            moelab_config_from_json(bad.as_ptr(), &mut cfg),
            MoelabStatus::Config
        );
        assert!(cfg.is_null());
        assert!(last_error().contains("lr"));

        let garbage = CString::new("{").unwrap();
        assert_eq!(
            moelab_config_from_json(garbage.as_ptr(), &mut cfg),
            MoelabStatus::Json
        );
        assert_eq!(
            moelab_config_from_json(ptr::null(), &mut cfg),
            MoelabStatus::NullPointer
        );

        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/checkpoint").unwrap();
        assert_eq!(
            moelab_model_load(missing.as_ptr(), &mut model),
            MoelabStatus::Checkpoint
        );

        // verifying a dense model against itself violates the precondition
        let cfg = config(CFG);
        let mut dense = ptr::null_mut();
        assert_eq!(moelab_model_dense(cfg, &mut dense), MoelabStatus::Ok);
        let (mut dev, mut verdict) = (0.0, MoelabVerdict::Equivalent);
        let status = moelab_verify(dense, dense, 1, 1, 0, &mut dev, &mut verdict);
        assert_eq!(status, MoelabStatus::Precondition);
        moelab_model_free(dense);
        moelab_config_free(cfg);

        assert_eq!(moelab_model_hidden_dim(ptr::null()), 0);
        moelab_model_free(ptr::null_mut());
    }
}

#[test]
fn train_steps_and_checkpoint_round_trip() {
    unsafe {
        let cfg = config(CFG);
        let mut dense = ptr::null_mut();
        let mut moe = ptr::null_mut();
        assert_eq!(moelab_model_dense(cfg, &mut dense), MoelabStatus::Ok);
        assert_eq!(moelab_model_convert(dense, cfg, &mut moe), MoelabStatus::Ok);

        let mut trainer = ptr::null_mut();
        assert_eq!(moelab_trainer_new(moe, cfg, &mut trainer), MoelabStatus::Ok);
        let mut loss = MoelabStepLoss::default();
        for step in 1..=5 {
            assert_eq!(moelab_trainer_step(trainer, &mut loss), MoelabStatus::Ok);
            assert_eq!(loss.step, step);
            assert_eq!(loss.total, loss.mse + loss.aux);
        }

        let mut written = 0usize;
        let status = moelab_trainer_report_json(trainer, ptr::null_mut(), 0, &mut written);
        assert_eq!(status, MoelabStatus::BufferTooSmall);
        let mut buf = vec![0 as c_char; written + 1];
        let status = moelab_trainer_report_json(trainer, buf.as_mut_ptr(), buf.len(), &mut written);
        assert_eq!(status, MoelabStatus::Ok);
        let json: Vec<u8> = buf[..written].iter().map(|&c| c as u8).collect();
        let report: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(report["layers"].as_array().unwrap().len(), 2);

        let mut trained = ptr::null_mut();
        assert_eq!(
            moelab_trainer_model(trainer, &mut trained),
            MoelabStatus::Ok
        );
        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().to_str().unwrap()).unwrap();
        assert_eq!(
            moelab_model_save(trained, path.as_ptr(), 7),
            MoelabStatus::Ok
        );
        let mut back = ptr::null_mut();
        assert_eq!(
            moelab_model_load(path.as_ptr(), &mut back),
            MoelabStatus::Ok
        );

        let x: Vec<f64> = (0..16).map(|i| i as f64 / 16.0 - 0.5).collect();
        let (mut a, mut b) = (vec![0.0; 16], vec![0.0; 16]);
        assert_eq!(
            moelab_model_forward(trained, x.as_ptr(), 2, a.as_mut_ptr()),
            MoelabStatus::Ok
        );
        assert_eq!(
            moelab_model_forward(back, x.as_ptr(), 2, b.as_mut_ptr()),
            MoelabStatus::Ok
        );
        assert_eq!(a, b);

        for m in [back, trained, moe, dense] {
            moelab_model_free(m);
        }
        moelab_trainer_free(trainer);
        moelab_config_free(cfg);
    }
}

#[test]
fn bf16_helpers() {
    assert_eq!(moelab_bf16_round(115.5002), 115.5);
    assert_eq!(moelab_ulp_bf16(115.5), 0.5);
}

/// Compiles and runs a small C program against the generated header and the
/// static library. Skipped when no C compiler is on the path.
#[test]
fn header_compiles_and_links_from_c() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = crate_dir.join("include");
    assert!(header_dir.join("moelab.h").exists());
    // tests live in target/<profile>/deps; the static library one level up
    let exe = std::env::current_exe().unwrap();
    let lib_dir = exe.parent().unwrap().parent().unwrap();
    if !lib_dir.join("libmoelab_ffi.a").exists()
        || Command::new("cc").arg("--version").output().is_err()
    {
        eprintln!("skipping: no static library or C compiler");
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "moelab.h"
int main(void) {
    MoelabConfig *cfg = NULL;
    MoelabModel *dense = NULL, *moe = NULL;
    const char *json = "{\"model\": {\"hidden_dim\": 4, \"inner_dim\": 8, \"layers\": 1}}";
    if (moelab_config_from_json(json, &cfg) != MOELAB_STATUS_OK) return 1;
    if (moelab_model_dense(cfg, &dense) != MOELAB_STATUS_OK) return 2;
    if (moelab_model_convert(dense, cfg, &moe) != MOELAB_STATUS_OK) return 3;
    double dev = 1.0;
    MoelabVerdict verdict = MOELAB_VERDICT_NOT_EQUIVALENT;
    if (moelab_verify(dense, moe, 2, 4, 0, &dev, &verdict) != MOELAB_STATUS_OK) return 4;
    if (dev != 0.0 || verdict != MOELAB_VERDICT_EQUIVALENT) return 5;
    if (moelab_config_from_json("{", &cfg) != MOELAB_STATUS_JSON) return 6;
    char msg[128];
    moelab_last_error(msg, sizeof msg);
    printf("%s\n", msg);
    moelab_model_free(moe);
    moelab_model_free(dense);
    moelab_config_free(cfg);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(lib_dir.join("libmoelab_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(
        out.status.success(),
        "C smoke test exited with {:?}",
        out.status
    );
}
