//! C ABI for `vit-surgeon`.
//!
//! Models and text banks are opaque handles created by `vs_*_load` or
//! `vs_*_new` functions and released with the matching `vs_*_free`. Every
//! fallible call returns a [`VsStatus`]; on failure the message is
//! available from [`vs_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use vit_surgeon::encoder::{EncodeMode, Variant};
use vit_surgeon::error::{Category, Error};
use vit_surgeon::model::{generate_synthetic, ModelBundle, ModelConfig};
use vit_surgeon::netpbm::RgbImage;
use vit_surgeon::pipeline::{self, InferenceConfig, TextBank};
use vit_surgeon::surgery::{self, FusionConfig, FusionVariant, SuppressionConfig, SuppressionStart};
use vit_surgeon::diagnostics;
use vit_surgeon::Tensor;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8, undersized buffer or bad option.
    InvalidArgument = 1,
    /// Malformed or inconsistent files and pixel data.
    Data = 2,
    /// Invalid model, configuration or surgery that cannot be resolved.
    Model = 3,
    /// Internal panic caught at the boundary.
    Panic = 4,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsMode {
    Vanilla = 0,
    Clearclip = 1,
    Gclip = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsFusionVariant {
    GlobalBlocks = 0,
    ClsDuplicate = 1,
}

/// Segmentation settings. Start from [`vs_segment_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VsSegmentOptions {
    pub mode: VsMode,
    /// Extra fused blocks after the emergence block; negative fuses none.
    pub amf_width: i32,
    pub amf_variant: VsFusionVariant,
    pub cs_enabled: bool,
    /// Suppression start block; negative picks it from the entropy profile.
    pub cs_start: i32,
    pub cs_dual: bool,
    /// Zero keeps the model's default for each of these.
    pub resize_short_side: usize,
    pub window: usize,
    pub stride: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct VsModelInfo {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub embed_dim: usize,
}

/// Opaque model handle.
pub struct VsModel(ModelBundle);

/// Opaque class text-embedding bank.
pub struct VsTextBank(TextBank);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

enum Failure {
    Arg(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn arg(msg: impl Into<String>) -> Failure {
    Failure::Arg(msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VsStatus::Ok
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            VsStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            match e.category() {
                Category::Data => VsStatus::Data,
                Category::Model => VsStatus::Model,
            }
        }
        Err(_) => {
            set_error("internal panic".into());
            VsStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(arg(format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| arg(format!("{what} is not valid UTF-8")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| arg(format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| arg(format!("{what} is null")))
}

fn start_of(n: i32) -> SuppressionStart {
    match usize::try_from(n) {
        Ok(s) => SuppressionStart::Block(s),
        Err(_) => SuppressionStart::Auto,
    }
}

/// Message of the last failed call on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads `model.gtf` and `model.cfg` from a directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_model_load(dir: *const c_char, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dir = path_arg(dir, "dir")?;
        let bundle = ModelBundle::load_dir(&dir)?;
        *out = Box::into_raw(Box::new(VsModel(bundle)));
        Ok(())
    })
}

/// Builds a seeded random model of the given geometry.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_model_synthetic(info: VsModelInfo, seed: u64, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = ModelConfig::new(info.layers, info.width, info.heads, info.patch, info.image_size, info.embed_dim);
        *out = Box::into_raw(Box::new(VsModel(generate_synthetic(&cfg, seed)?)));
        Ok(())
    })
}

/// Writes `model.gtf` and `model.cfg` into `dir`, creating it if needed.
///
/// # Safety
/// `model` must come from this library and `dir` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vs_model_save(model: *const VsModel, dir: *const c_char) -> VsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        model.0.save_dir(&path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_model_free(model: *mut VsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_model_info(model: *const VsModel, out: *mut VsModelInfo) -> VsStatus {
    guard(|| {
        let c = handle(model, "model")?.0.config();
        *out_ptr(out, "out")? = VsModelInfo {
            layers: c.layers,
            width: c.width,
            heads: c.heads,
            patch: c.patch,
            image_size: c.image_size,
            embed_dim: c.embed_dim,
        };
        Ok(())
    })
}

/// Normalized fc2 norm entropy of each block into `out[0..layers]`.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vs_model_entropy_profile(model: *const VsModel, out: *mut f64, len: usize) -> VsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let profile = diagnostics::entropy_profile(&model.0)?;
        if out.is_null() || len < profile.len() {
            return Err(arg(format!("output needs room for {} values", profile.len())));
        }
        let out = std::slice::from_raw_parts_mut(out, profile.len());
        for (o, (_, h)) in out.iter_mut().zip(profile) {
            *o = h;
        }
        Ok(())
    })
}

/// Resolves the suppression start block; negative `start` means automatic.
///
/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_model_suppression_start(model: *const VsModel, start: i32, out: *mut usize) -> VsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let cfg = SuppressionConfig {
            start: start_of(start),
            ..SuppressionConfig::default()
        };
        *out_ptr(out, "out")? = surgery::find_suppression_start(&model.0, &cfg)?;
        Ok(())
    })
}

/// New model with fc2 of blocks `s..=f` channel-suppressed; negative
/// `start` resolves `s` automatically.
///
/// # Safety
/// `model` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_model_suppress(model: *const VsModel, start: i32, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let out = out_ptr(out, "out")?;
        let cfg = SuppressionConfig {
            start: start_of(start),
            ..SuppressionConfig::default()
        };
        let suppressed = surgery::apply_cs(&model.0, &cfg)?;
        *out = Box::into_raw(Box::new(VsModel(suppressed.bundle)));
        Ok(())
    })
}

/// Loads the `text_embeddings` tensor of a GTF file with its class names.
///
/// # Safety
/// Both paths must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_text_bank_load(
    gtf: *const c_char,
    classes: *const c_char,
    out: *mut *mut VsTextBank,
) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let bank = pipeline::build_text_bank(&path_arg(gtf, "gtf")?, &path_arg(classes, "classes")?)?;
        *out = Box::into_raw(Box::new(VsTextBank(bank)));
        Ok(())
    })
}

/// Builds a bank from `classes × dim` row-major embeddings; class names
/// are `class0`, `class1`, ...
///
/// # Safety
/// `embeddings` must point to `classes * dim` floats and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn vs_text_bank_new(
    embeddings: *const f32,
    classes: usize,
    dim: usize,
    out: *mut *mut VsTextBank,
) -> VsStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if embeddings.is_null() {
            return Err(arg("embeddings is null"));
        }
        let len = classes.checked_mul(dim).ok_or_else(|| arg("bank size overflows"))?;
        let data = std::slice::from_raw_parts(embeddings, len).to_vec();
        let names = (0..classes).map(|i| format!("class{i}")).collect();
        let bank = TextBank::new(Tensor::new(vec![classes, dim], data)?, names, "caller")?;
        *out = Box::into_raw(Box::new(VsTextBank(bank)));
        Ok(())
    })
}

/// # Safety
/// `bank` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_text_bank_free(bank: *mut VsTextBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// # Safety
/// `bank` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn vs_text_bank_num_classes(bank: *const VsTextBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.num_classes())
}

/// gclip with one extra fused block and automatic dual-stream suppression.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vs_segment_options_default(out: *mut VsSegmentOptions) -> VsStatus {
    guard(|| {
        *out_ptr(out, "out")? = VsSegmentOptions {
            mode: VsMode::Gclip,
            amf_width: 1,
            amf_variant: VsFusionVariant::GlobalBlocks,
            cs_enabled: true,
            cs_start: -1,
            cs_dual: true,
            resize_short_side: 0,
            window: 0,
            stride: 0,
        };
        Ok(())
    })
}

fn inference_config(model: &ModelBundle, o: &VsSegmentOptions) -> InferenceConfig {
    let variant = match o.mode {
        VsMode::Vanilla => Variant::Vanilla,
        VsMode::Clearclip => Variant::ClearClip,
        VsMode::Gclip => Variant::GClip,
    };
    let fusion = match (variant, usize::try_from(o.amf_width)) {
        (Variant::GClip, Ok(width)) => Some(FusionConfig {
            width,
            variant: match o.amf_variant {
                VsFusionVariant::GlobalBlocks => FusionVariant::GlobalBlocks,
                VsFusionVariant::ClsDuplicate => FusionVariant::ClsDuplicate,
            },
            ..FusionConfig::default()
        }),
        _ => None,
    };
    let suppression = SuppressionConfig {
        enabled: o.cs_enabled,
        start: start_of(o.cs_start),
        dual_stream: o.cs_dual,
        ..SuppressionConfig::default()
    };
    let mode = EncodeMode {
        variant,
        fusion,
        suppression,
    };
    let mut cfg = InferenceConfig::for_model(model.config(), mode);
    if o.resize_short_side > 0 {
        cfg.resize_short_side = o.resize_short_side;
    }
    if o.window > 0 {
        cfg.window = o.window;
    }
    if o.stride > 0 {
        cfg.stride = o.stride;
    }
    cfg
}

/// Segments an interleaved 8-bit RGB image, writing one class index per
/// pixel into `mask` (`width * height` bytes). Null `options` uses the
/// defaults.
///
/// # Safety
/// `rgb` must point to `width * height * 3` bytes, `mask` to
/// `width * height` writable bytes, and handles must come from this library.
#[no_mangle]
pub unsafe extern "C" fn vs_segment_rgb(
    model: *const VsModel,
    bank: *const VsTextBank,
    rgb: *const u8,
    width: usize,
    height: usize,
    options: *const VsSegmentOptions,
    mask: *mut u8,
) -> VsStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let bank = handle(bank, "bank")?;
        if rgb.is_null() || mask.is_null() {
            return Err(arg("image or mask buffer is null"));
        }
        let pixels = width.checked_mul(height).ok_or_else(|| arg("image size overflows"))?;
        let opts = match options.as_ref() {
            Some(o) => *o,
            None => {
                let mut o = std::mem::MaybeUninit::uninit();
                vs_segment_options_default(o.as_mut_ptr());
                o.assume_init()
            }
        };
        let bytes = std::slice::from_raw_parts(rgb, pixels * 3).to_vec();
        let image = RgbImage::new(width, height, bytes)?;
        let seg = pipeline::sliding_window_segment(&image, &model.0, &bank.0, &inference_config(&model.0, &opts))?;
        std::slice::from_raw_parts_mut(mask, pixels).copy_from_slice(&seg.mask.data);
        Ok(())
    })
}
