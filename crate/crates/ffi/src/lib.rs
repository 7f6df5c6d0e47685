//! C ABI for `treg-core`.
//!
//! Models are opaque `TregModel` handles created by `treg_model_init` or
//! `treg_model_load` and released with `treg_model_free`. Every fallible
//! function returns a `TregStatus`; on failure `treg_last_error` describes
//! the problem until the next call on the same thread. Output arrays are
//! caller-allocated: pass the capacity, get the required length back, and
//! `TREG_STATUS_BUFFER_TOO_SMALL` if it did not fit.
//!
//! The header `include/treg.h` is generated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use treg_core::data::{PreferencePair, Tokenizer};
use treg_core::losses::{self, BaseObjective, LossConfig, Regularize, Weighting};
use treg_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, PolicyState, Role};
use treg_core::rewards::{self, RewardSource, TokenRewardVector};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TregStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Model = 5,
    Reward = 6,
    Loss = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct TregModel {
    inner: PolicyState,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TregModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TregBase {
    Dpo = 0,
    Simpo = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TregWeighting {
    Sequence = 0,
    Static = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TregRegularize {
    BothOutputs = 0,
    ChosenOnly = 1,
    Off = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TregLossConfig {
    pub beta: f64,
    pub alpha: f64,
    pub base: TregBase,
    pub weighting: TregWeighting,
    pub regularize: TregRegularize,
    pub sft_coeff: f64,
    pub simpo_gamma: f64,
}

/// Per-pair loss components.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct TregLossBreakdown {
    pub base_loss: f64,
    pub reg_loss_w: f64,
    pub reg_loss_l: f64,
    pub weight: f64,
    pub sft_loss: f64,
    pub total: f64,
    pub reward_margin: f64,
}

type Failure = (TregStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TregStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TregStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TregStatus::Panic
        }
    }
}

fn fail<E: std::fmt::Display>(status: TregStatus) -> impl Fn(E) -> Failure {
    move |e| (status, e.to_string())
}

unsafe fn model_ref<'a>(p: *const TregModel, what: &str) -> Result<&'a PolicyState, Failure> {
    p.as_ref()
        .map(|m| &m.inner)
        .ok_or((TregStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err((TregStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((TregStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (TregStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T: Copy>(values: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> Result<(), Failure> {
    if out_len.is_null() {
        return Err((TregStatus::NullPointer, "out_len is null".into()));
    }
    *out_len = values.len();
    if values.len() > cap {
        return Err((
            TregStatus::BufferTooSmall,
            format!("need {} elements, capacity is {cap}", values.len()),
        ));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err((TregStatus::NullPointer, "out is null".into()));
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

fn into_handle(m: PolicyState, out: *mut *mut TregModel) -> Result<(), Failure> {
    if out.is_null() {
        return Err((TregStatus::NullPointer, "out is null".into()));
    }
    unsafe { *out = Box::into_raw(Box::new(TregModel { inner: m })) };
    Ok(())
}

/// Message of the last failed call on this thread ("" after a success).
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn treg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn treg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default model configuration.
#[no_mangle]
pub extern "C" fn treg_model_config_default() -> TregModelConfig {
    let c = ModelConfig::default();
    TregModelConfig {
        vocab_size: c.vocab_size,
        context_len: c.context_len,
        d_model: c.d_model,
        n_layers: c.n_layers,
        n_heads: c.n_heads,
        seed: c.seed,
    }
}

/// Default loss configuration (DPO base with contrastive regularization).
#[no_mangle]
pub extern "C" fn treg_loss_config_default() -> TregLossConfig {
    let c = LossConfig::default();
    TregLossConfig {
        beta: c.beta,
        alpha: c.alpha,
        base: TregBase::Dpo,
        weighting: TregWeighting::Sequence,
        regularize: TregRegularize::BothOutputs,
        sft_coeff: c.sft_coeff,
        simpo_gamma: c.simpo_gamma,
    }
}

/// Freshly initialised trainable model.
///
/// # Safety
/// `config` must point to a valid config and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn treg_model_init(config: *const TregModelConfig, out: *mut *mut TregModel) -> TregStatus {
    guard(|| {
        let c = config
            .as_ref()
            .ok_or((TregStatus::NullPointer, "config is null".to_string()))?;
        let m = PolicyState::init(ModelConfig {
            vocab_size: c.vocab_size,
            context_len: c.context_len,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            seed: c.seed,
        })
        .map_err(fail(TregStatus::InvalidArgument))?;
        into_handle(m, out)
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn treg_model_load(path: *const c_char, out: *mut *mut TregModel) -> TregStatus {
    guard(|| {
        let p = string(path, "path")?;
        let ck = load_checkpoint(Path::new(p)).map_err(fail(TregStatus::Io))?;
        into_handle(ck.model, out)
    })
}

/// Writes `model` to a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn treg_model_save(model: *const TregModel, path: *const c_char) -> TregStatus {
    guard(|| {
        let m = model_ref(model, "model")?;
        let p = string(path, "path")?;
        save_checkpoint(Path::new(p), &Checkpoint::new(m.clone())).map_err(fail(TregStatus::Io))
    })
}

/// Frozen copy of `model`, usable as reference or evaluator.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn treg_model_freeze(model: *const TregModel, out: *mut *mut TregModel) -> TregStatus {
    guard(|| {
        let m = model_ref(model, "model")?;
        into_handle(m.freeze_copy(Role::Evaluator), out)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn treg_model_free(model: *mut TregModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn treg_model_parameter_count(model: *const TregModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config().parameter_count())
}

/// Tokens of `[BOS] instruction [SEP]`.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn treg_encode_prompt(
    text: *const c_char,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> TregStatus {
    guard(|| {
        let t = string(text, "text")?;
        write_out(&Tokenizer::new().encode_prompt(t), out, cap, out_len)
    })
}

/// Tokens of `response [EOS]`.
///
/// # Safety
/// As [`treg_encode_prompt`].
#[no_mangle]
pub unsafe extern "C" fn treg_encode_response(
    text: *const c_char,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> TregStatus {
    guard(|| {
        let t = string(text, "text")?;
        write_out(&Tokenizer::new().encode_response(t), out, cap, out_len)
    })
}

/// `log π(tokens[p] | tokens[..p])` for `p` in `prompt_len..len`.
///
/// # Safety
/// `tokens` must hold `len` elements; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn treg_response_logprobs(
    model: *const TregModel,
    tokens: *const u32,
    len: usize,
    prompt_len: usize,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> TregStatus {
    guard(|| {
        let m = model_ref(model, "model")?;
        let t = slice(tokens, len, "tokens")?;
        let lp = m.forward_logprobs(t, prompt_len).map_err(fail(TregStatus::Model))?;
        write_out(&lp, out, cap, out_len)
    })
}

/// Contrastive token rewards of `answer [EOS]` from a frozen evaluator:
/// one value in [-0.5, 0.5] per response token.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must hold `cap` elements.
#[no_mangle]
pub unsafe extern "C" fn treg_contrastive_rewards(
    evaluator: *const TregModel,
    instruction: *const c_char,
    answer: *const c_char,
    out: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> TregStatus {
    guard(|| {
        let e = model_ref(evaluator, "evaluator")?;
        let instruction = string(instruction, "instruction")?;
        let answer = string(answer, "answer")?;
        let tok = Tokenizer::new();
        let tokens = tok.encode_response(answer);
        let prompts = rewards::render_contrastive_prompts(&tok, instruction, answer, tokens.len(), e.config().context_len)
            .map_err(fail(TregStatus::Reward))?;
        let r = rewards::contrastive_token_rewards(e, &prompts, &tokens).map_err(fail(TregStatus::Reward))?;
        write_out(&r.values, out, cap, out_len)
    })
}

fn loss_config(c: &TregLossConfig) -> LossConfig {
    LossConfig {
        beta: c.beta,
        alpha: c.alpha,
        base: match c.base {
            TregBase::Dpo => BaseObjective::Dpo,
            TregBase::Simpo => BaseObjective::Simpo,
        },
        weighting: match c.weighting {
            TregWeighting::Sequence => Weighting::Sequence,
            TregWeighting::Static => Weighting::Static,
        },
        reward_source: RewardSource::Contrastive,
        regularize: match c.regularize {
            TregRegularize::BothOutputs => Regularize::BothOutputs,
            TregRegularize::ChosenOnly => Regularize::ChosenOnly,
            TregRegularize::Off => Regularize::Off,
        },
        sft_coeff: c.sft_coeff,
        simpo_gamma: c.simpo_gamma,
    }
}

/// Loss components of one preference pair.
///
/// `prompt`, `chosen` and `rejected` are token arrays (responses end with
/// EOS). `rewards_w` / `rewards_l` hold one contrastive reward per response
/// token; they may be null only when the config does not regularize.
///
/// # Safety
/// Every non-null array must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn treg_pair_loss(
    policy: *const TregModel,
    reference: *const TregModel,
    config: *const TregLossConfig,
    prompt: *const u32,
    prompt_len: usize,
    chosen: *const u32,
    chosen_len: usize,
    rejected: *const u32,
    rejected_len: usize,
    rewards_w: *const f64,
    rewards_l: *const f64,
    out: *mut TregLossBreakdown,
) -> TregStatus {
    guard(|| {
        let p = model_ref(policy, "policy")?;
        let r = model_ref(reference, "reference")?;
        let cfg = loss_config(
            config
                .as_ref()
                .ok_or((TregStatus::NullPointer, "config is null".to_string()))?,
        );
        cfg.validate().map_err(fail(TregStatus::InvalidArgument))?;
        if out.is_null() {
            return Err((TregStatus::NullPointer, "out is null".into()));
        }
        let pair = PreferencePair::new(
            "ffi",
            slice(prompt, prompt_len, "prompt")?.to_vec(),
            slice(chosen, chosen_len, "chosen")?.to_vec(),
            slice(rejected, rejected_len, "rejected")?.to_vec(),
        );
        let rv = |ptr: *const f64, n: usize| -> Result<TokenRewardVector, Failure> {
            if ptr.is_null() {
                return Ok(TokenRewardVector::zeros(n, RewardSource::Contrastive));
            }
            TokenRewardVector::new(slice(ptr, n, "rewards")?.to_vec(), RewardSource::Contrastive)
                .map_err(fail(TregStatus::InvalidArgument))
        };
        if cfg.regularizes() && (rewards_w.is_null() || rewards_l.is_null()) {
            return Err((TregStatus::NullPointer, "regularized loss needs both reward arrays".into()));
        }
        let (w, l) = (rv(rewards_w, chosen_len)?, rv(rewards_l, rejected_len)?);
        let b = losses::treg_loss(p, r, &w, &l, &pair, &cfg).map_err(fail(TregStatus::Loss))?;
        *out = TregLossBreakdown {
            base_loss: b.base_loss,
            reg_loss_w: b.reg_loss_w,
            reg_loss_l: b.reg_loss_l,
            weight: b.weight,
            sft_loss: b.sft_loss,
            total: b.total,
            reward_margin: b.reward_margin,
        };
        Ok(())
    })
}
