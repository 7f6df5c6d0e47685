//! Exercises the C ABI from Rust, plus a C program compiled against the
//! generated header.

use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use treg_core::data::{make_synthetic_planted_task, PreferencePair, Tokenizer};
use treg_core::losses::{self, LossConfig};
use treg_core::model::{ModelConfig, PolicyState, Role};
use treg_core::rewards::record_contrastive_rewards;
use treg_ffi::*;

fn small_config() -> TregModelConfig {
    TregModelConfig {
        context_len: 64,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        seed: 3,
        ..treg_model_config_default()
    }
}

fn core_model() -> PolicyState {
    PolicyState::init(ModelConfig {
        context_len: 64,
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(treg_last_error()) }.to_str().unwrap().to_string()
}

fn new_model() -> *mut TregModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { treg_model_init(&small_config(), &mut m) }, TregStatus::Ok);
    m
}

#[test]
fn logprobs_match_the_core_library() {
    let m = new_model();
    let tokens = [257u32, 101, 259, 97, 98, 258];
    let mut out = [0.0f64; 8];
    let mut n = 0usize;
    let s = unsafe { treg_response_logprobs(m, tokens.as_ptr(), tokens.len(), 3, out.as_mut_ptr(), out.len(), &mut n) };
    assert_eq!(s, TregStatus::Ok);
    assert_eq!(n, 3);
    let want = core_model().forward_logprobs(&tokens, 3).unwrap();
    assert_eq!(&out[..3], want.as_slice());
    assert_eq!(unsafe { treg_model_parameter_count(m) }, core_model().config().parameter_count());
    unsafe { treg_model_free(m) };
}

#[test]
fn small_buffers_report_the_needed_length() {
    let text = CString::new("echo: abc").unwrap();
    let mut out = [0u32; 2];
    let mut n = 0;
    let s = unsafe { treg_encode_prompt(text.as_ptr(), out.as_mut_ptr(), out.len(), &mut n) };
    assert_eq!(s, TregStatus::BufferTooSmall);
    assert_eq!(n, Tokenizer::new().encode_prompt("echo: abc").len());
    assert!(last_error().contains("need"));
    let mut big = vec![0u32; n];
    let s = unsafe { treg_encode_prompt(text.as_ptr(), big.as_mut_ptr(), big.len(), &mut n) };
    assert_eq!(s, TregStatus::Ok);
    assert_eq!(big, Tokenizer::new().encode_prompt("echo: abc"));
    assert_eq!(last_error(), "");
}

#[test]
fn null_pointers_and_bad_configs_are_reported() {
    let mut n = 0;
    let s = unsafe { treg_response_logprobs(ptr::null(), ptr::null(), 0, 1, ptr::null_mut(), 0, &mut n) };
    assert_eq!(s, TregStatus::NullPointer);
    assert!(last_error().contains("model"));
    let mut m = ptr::null_mut();
    let bad = TregModelConfig {
        n_heads: 3,
        ..small_config()
    };
    assert_eq!(unsafe { treg_model_init(&bad, &mut m) }, TregStatus::InvalidArgument);
    assert!(m.is_null());
    unsafe { treg_model_free(ptr::null_mut()) };
}

#[test]
fn rewards_and_losses_match_the_core_library() {
    let policy = new_model();
    let mut evaluator = ptr::null_mut();
    assert_eq!(unsafe { treg_model_freeze(policy, &mut evaluator) }, TregStatus::Ok);

    let rec = make_synthetic_planted_task(1, 4).remove(0);
    let core_eval = core_model().freeze_copy(Role::Evaluator);
    let tok = Tokenizer::new();
    let (want_w, want_l) = record_contrastive_rewards(&core_eval, &tok, &rec).unwrap();

    let instr = CString::new(rec.instruction.clone()).unwrap();
    let get = |answer: &str| {
        let a = CString::new(answer).unwrap();
        let mut out = vec![0.0; 64];
        let mut n = 0;
        let s = unsafe { treg_contrastive_rewards(evaluator, instr.as_ptr(), a.as_ptr(), out.as_mut_ptr(), out.len(), &mut n) };
        assert_eq!(s, TregStatus::Ok, "{}", last_error());
        out.truncate(n);
        out
    };
    let (rw, rl) = (get(&rec.chosen), get(&rec.rejected));
    assert_eq!(rw, want_w.values);
    assert_eq!(rl, want_l.values);

    let pair = PreferencePair::from_record(&rec, &tok, 64).unwrap();
    let cfg = treg_loss_config_default();
    let mut out = TregLossBreakdown::default();
    let s = unsafe {
        treg_pair_loss(
            policy,
            evaluator,
            &cfg,
            pair.prompt.as_ptr(),
            pair.prompt.len(),
            pair.chosen.as_ptr(),
            pair.chosen.len(),
            pair.rejected.as_ptr(),
            pair.rejected.len(),
            rw.as_ptr(),
            rl.as_ptr(),
            &mut out,
        )
    };
    assert_eq!(s, TregStatus::Ok, "{}", last_error());
    let m = core_model();
    let want = losses::treg_loss(&m, &core_eval, &want_w, &want_l, &pair, &LossConfig::default()).unwrap();
    assert_eq!(out.total, want.total);
    assert_eq!(out.weight, 0.5);
    assert!((out.base_loss - std::f64::consts::LN_2).abs() < 1e-12);

    // Regularized configs need reward arrays.
    let s = unsafe {
        treg_pair_loss(
            policy,
            evaluator,
            &cfg,
            pair.prompt.as_ptr(),
            pair.prompt.len(),
            pair.chosen.as_ptr(),
            pair.chosen.len(),
            pair.rejected.as_ptr(),
            pair.rejected.len(),
            ptr::null(),
            ptr::null(),
            &mut out,
        )
    };
    assert_eq!(s, TregStatus::NullPointer);
    unsafe {
        treg_model_free(policy);
        treg_model_free(evaluator);
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = new_model();
    assert_eq!(unsafe { treg_model_save(m, path.as_ptr()) }, TregStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { treg_model_load(path.as_ptr(), &mut back) }, TregStatus::Ok);
    let tokens = [257u32, 120, 259, 121, 258];
    let score = |h: *const TregModel| {
        let mut out = [0.0; 4];
        let mut n = 0;
        unsafe { treg_response_logprobs(h, tokens.as_ptr(), tokens.len(), 3, out.as_mut_ptr(), 4, &mut n) };
        out
    };
    assert_eq!(score(m), score(back));
    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { treg_model_load(missing.as_ptr(), &mut h) }, TregStatus::Io);
    unsafe {
        treg_model_free(m);
        treg_model_free(back);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(treg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/treg.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "treg_model_init",
        "treg_model_load",
        "treg_model_save",
        "treg_model_free",
        "treg_model_freeze",
        "treg_response_logprobs",
        "treg_contrastive_rewards",
        "treg_pair_loss",
        "treg_last_error",
        "typedef struct TregModel TregModel;",
        "TREG_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
}

#[test]
fn c_program_compiles_and_runs_against_the_header() {
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipping");
        return;
    };
    assert!(cc.status.success());
    // target/<profile>/deps/<test> -> target/<profile>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libtreg_ffi.a");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "treg.h"
int main(void) {
    TregModelConfig cfg = treg_model_config_default();
    cfg.context_len = 32; cfg.d_model = 8; cfg.n_layers = 1; cfg.n_heads = 2;
    TregModel *m = NULL;
    if (treg_model_init(&cfg, &m) != TREG_STATUS_OK) return 1;
    uint32_t toks[5]; size_t n = 0;
    if (treg_encode_prompt("hi", toks, 5, &n) != TREG_STATUS_OK || n != 4) return 2;
    uint32_t seq[6] = {toks[0], toks[1], toks[2], toks[3], 97, 258};
    double lp[2];
    if (treg_response_logprobs(m, seq, 6, 4, lp, 2, &n) != TREG_STATUS_OK || n != 2) return 3;
    if (!(lp[0] < 0.0 && lp[1] < 0.0)) return 4;
    if (treg_response_logprobs(NULL, seq, 6, 4, lp, 2, &n) != TREG_STATUS_NULL_POINTER) return 5;
    printf("%s\n", treg_last_error());
    treg_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let syntax = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(syntax.success(), "header does not compile");
    if !lib.exists() {
        eprintln!("{} not built; link step skipped", lib.display());
        return;
    }
    let exe = dir.path().join("main");
    let link = Command::new("cc")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(link.status.success(), "{}", String::from_utf8_lossy(&link.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).contains("model is null"));
}
