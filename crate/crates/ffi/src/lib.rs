//! C ABI over the detector: opaque model handles, status codes, and a
//! single scoring entry point. Pixels cross the boundary as raw f32 in
//! [0,1], channel-major [C,H,W]; normalization happens inside.

use std::ffi::{c_char, CStr};
use std::path::Path;
use std::ptr;

use loradet::checkpoint::load_checkpoint;
use loradet::data::normalize;
use loradet::model::Model;
use loradet::numeric::tensor::Tensor;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LoradetStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    LoadFailed = 3,
    BadIndex = 4,
    BufferTooSmall = 5,
    BadImageSize = 6,
    PredictFailed = 7,
}

/// Opaque detector handle; create with `loradet_model_load`, destroy with
/// `loradet_model_free`.
pub struct LoradetModel {
    inner: Model<f32>,
}

/// Load a checkpoint from a NUL-terminated path into a fresh handle.
/// On success writes the handle through `out` and returns `Ok`.
///
/// # Safety
/// `path` must point to a valid NUL-terminated string and `out` to a
/// writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn loradet_model_load(
    path: *const c_char,
    out: *mut *mut LoradetModel,
) -> LoradetStatus {
    if path.is_null() || out.is_null() {
        return LoradetStatus::NullArgument;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return LoradetStatus::InvalidUtf8;
    };
    match load_checkpoint(Path::new(path)) {
        Ok(model) => {
            *out = Box::into_raw(Box::new(LoradetModel { inner: model }));
            LoradetStatus::Ok
        }
        Err(_) => {
            *out = ptr::null_mut();
            LoradetStatus::LoadFailed
        }
    }
}

/// Release a handle returned by `loradet_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer previously returned by `loradet_model_load`
/// that has not been freed already.
#[no_mangle]
pub unsafe extern "C" fn loradet_model_free(model: *mut LoradetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of adapter branches (generator families) in the model; 0 for a
/// null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn loradet_model_num_generators(model: *const LoradetModel) -> u32 {
    model.as_ref().map(|m| m.inner.k() as u32).unwrap_or(0)
}

/// Expected image side length in pixels.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn loradet_model_image_size(model: *const LoradetModel) -> u32 {
    model
        .as_ref()
        .map(|m| m.inner.cfg.vit.image_size as u32)
        .unwrap_or(0)
}

/// Expected channel count.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn loradet_model_channels(model: *const LoradetModel) -> u32 {
    model
        .as_ref()
        .map(|m| m.inner.cfg.vit.channels as u32)
        .unwrap_or(0)
}

/// Copy the NUL-terminated name of generator `index` into `buf`.
///
/// # Safety
/// `model` must be a live handle; `buf` must point to `buf_len` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn loradet_model_generator_name(
    model: *const LoradetModel,
    index: u32,
    buf: *mut c_char,
    buf_len: usize,
) -> LoradetStatus {
    let Some(m) = model.as_ref() else {
        return LoradetStatus::NullArgument;
    };
    if buf.is_null() {
        return LoradetStatus::NullArgument;
    }
    let Some(name) = m.inner.generators.get(index as usize) else {
        return LoradetStatus::BadIndex;
    };
    let bytes = name.as_bytes();
    if bytes.len() + 1 > buf_len {
        return LoradetStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    LoradetStatus::Ok
}

/// Score one image. `pixels` holds `channels * size * size` floats in
/// [0,1], channel-major row-major. Writes the fake probability through
/// `fake_prob` and, when `merge_weights` is non-null, the per-branch
/// routing weights (length = number of generators).
///
/// # Safety
/// All pointers must be valid for their stated lengths for the duration
/// of the call.
#[no_mangle]
pub unsafe extern "C" fn loradet_predict(
    model: *const LoradetModel,
    pixels: *const f32,
    pixel_count: usize,
    fake_prob: *mut f32,
    merge_weights: *mut f32,
) -> LoradetStatus {
    let Some(m) = model.as_ref() else {
        return LoradetStatus::NullArgument;
    };
    if pixels.is_null() || fake_prob.is_null() {
        return LoradetStatus::NullArgument;
    }
    let vit = &m.inner.cfg.vit;
    let expected = vit.channels * vit.image_size * vit.image_size;
    if pixel_count != expected {
        return LoradetStatus::BadImageSize;
    }
    let data = std::slice::from_raw_parts(pixels, pixel_count).to_vec();
    let image = match Tensor::new(vec![vit.channels, vit.image_size, vit.image_size], data) {
        Ok(t) => t,
        Err(_) => return LoradetStatus::BadImageSize,
    };
    let normalized = match normalize(&image) {
        Ok(t) => t,
        Err(_) => return LoradetStatus::BadImageSize,
    };
    match m.inner.predict(&normalized) {
        Ok(pred) => {
            *fake_prob = pred.fake_prob as f32;
            if !merge_weights.is_null() {
                for (i, w) in pred.merge_weights.iter().enumerate() {
                    *merge_weights.add(i) = *w as f32;
                }
            }
            LoradetStatus::Ok
        }
        Err(_) => LoradetStatus::PredictFailed,
    }
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn loradet_status_message(status: LoradetStatus) -> *const c_char {
    let msg: &'static [u8] = match status {
        LoradetStatus::Ok => b"ok\0",
        LoradetStatus::NullArgument => b"null argument\0",
        LoradetStatus::InvalidUtf8 => b"path is not valid UTF-8\0",
        LoradetStatus::LoadFailed => b"checkpoint failed to load\0",
        LoradetStatus::BadIndex => b"generator index out of range\0",
        LoradetStatus::BufferTooSmall => b"buffer too small\0",
        LoradetStatus::BadImageSize => b"pixel buffer does not match model input\0",
        LoradetStatus::PredictFailed => b"prediction failed\0",
    };
    msg.as_ptr() as *const c_char
}
