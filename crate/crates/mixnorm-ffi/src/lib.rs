//! C ABI for the test-time normalization harness. All functions return an
//! `int32_t` status (0 success, 2 usage/format error, 3 numeric failure)
//! unless documented otherwise; objects are opaque handles that must be
//! released with their matching `_free` function. The most recent error
//! message is kept per thread and read with `mixnorm_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use mixnorm::bench::{build_stream, generate_source_dataset, SampleStream, StreamMode};
use mixnorm::error::Error;
use mixnorm::format;
use mixnorm::harness::{
    run_adaptation, Method, MethodKind, RunResult, DEFAULT_EVAL_PER_CLASS,
};
use mixnorm::model::Network;

pub const MIXNORM_OK: i32 = 0;
pub const MIXNORM_ERR_USAGE: i32 = 2;
pub const MIXNORM_ERR_NUMERIC: i32 = 3;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn fail(err: Error) -> i32 {
    let code = err.exit_code();
    set_error(&err.to_string());
    code
}

fn usage(msg: &str) -> i32 {
    set_error(msg);
    MIXNORM_ERR_USAGE
}

/// Opaque: a (possibly trained) network checkpoint.
pub struct MixnormModel(Network);
/// Opaque: an ordered evaluation stream.
pub struct MixnormStream(SampleStream);
/// Opaque: one adaptation run's scores and prediction trace.
pub struct MixnormRunResult(RunResult);

unsafe fn cstr<'a>(p: *const c_char, what: &str) -> Result<&'a str, i32> {
    if p.is_null() {
        return Err(usage(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| usage(&format!("{what} is not valid UTF-8")))
}

/// Message for the most recent error on this thread. Borrowed; valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mixnorm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a model checkpoint from a plain-text file.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_model_load(
    path: *const c_char,
    out: *mut *mut MixnormModel,
) -> i32 {
    if out.is_null() {
        return usage("out pointer is null");
    }
    let path = match cstr(path, "path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match format::load_model(Path::new(path)) {
        Ok(net) => {
            *out = Box::into_raw(Box::new(MixnormModel(net)));
            MIXNORM_OK
        }
        Err(e) => fail(e),
    }
}

/// Save a model checkpoint; round-trips bit-exactly.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_model_save(
    model: *const MixnormModel,
    path: *const c_char,
) -> i32 {
    if model.is_null() {
        return usage("model is null");
    }
    let path = match cstr(path, "path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match format::save_model(&(*model).0, Path::new(path)) {
        Ok(()) => MIXNORM_OK,
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn mixnorm_model_free(model: *mut MixnormModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Build an evaluation stream over the pinned procedural evaluation dataset.
/// `descriptor` is `single:<kind>:<severity>`, `mixed:<severity>`, or
/// `clean`.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_stream_build(
    descriptor: *const c_char,
    seed: u64,
    out: *mut *mut MixnormStream,
) -> i32 {
    if out.is_null() {
        return usage("out pointer is null");
    }
    let descriptor = match cstr(descriptor, "stream descriptor") {
        Ok(d) => d,
        Err(code) => return code,
    };
    let build = || -> mixnorm::Result<SampleStream> {
        let mode = StreamMode::parse(descriptor)?;
        let dataset = generate_source_dataset(2001, DEFAULT_EVAL_PER_CLASS)?;
        build_stream(&dataset, mode, seed)
    };
    match build() {
        Ok(stream) => {
            *out = Box::into_raw(Box::new(MixnormStream(stream)));
            MIXNORM_OK
        }
        Err(e) => fail(e),
    }
}

/// Load a stream pinned to a file by `stream export` tooling.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_stream_load(
    path: *const c_char,
    out: *mut *mut MixnormStream,
) -> i32 {
    if out.is_null() {
        return usage("out pointer is null");
    }
    let path = match cstr(path, "path") {
        Ok(p) => p,
        Err(code) => return code,
    };
    match format::load_stream(Path::new(path)) {
        Ok(stream) => {
            *out = Box::into_raw(Box::new(MixnormStream(stream)));
            MIXNORM_OK
        }
        Err(e) => fail(e),
    }
}

/// Number of samples in the stream; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_stream_len(stream: *const MixnormStream) -> usize {
    if stream.is_null() {
        return 0;
    }
    (*stream).0.len()
}

#[no_mangle]
pub unsafe extern "C" fn mixnorm_stream_free(stream: *mut MixnormStream) {
    if !stream.is_null() {
        drop(Box::from_raw(stream));
    }
}

/// Run one adaptation method (`source_only`, `online_bn`, `tent`,
/// `mixnorm`, `mixnorm_fixed_affine`, `mixnormbn`, or `variant:<name>`)
/// over the stream, online, with the method's shipping hyperparameters.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_run(
    model: *const MixnormModel,
    method: *const c_char,
    stream: *const MixnormStream,
    batch_size: usize,
    seed: u64,
    out: *mut *mut MixnormRunResult,
) -> i32 {
    if model.is_null() || stream.is_null() || out.is_null() {
        return usage("model, stream, and out must be non-null");
    }
    let method = match cstr(method, "method") {
        Ok(m) => m,
        Err(code) => return code,
    };
    let run = || -> mixnorm::Result<RunResult> {
        let kind = MethodKind::parse(method)?;
        let stream = &(*stream).0;
        run_adaptation(
            &(*model).0,
            &Method::defaults(kind, stream.mode),
            stream,
            batch_size,
            seed,
        )
    };
    match run() {
        Ok(result) => {
            *out = Box::into_raw(Box::new(MixnormRunResult(result)));
            MIXNORM_OK
        }
        Err(e) => fail(e),
    }
}

/// Overall error rate in [0,1]; NaN for a null handle.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_result_error_rate(result: *const MixnormRunResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    (*result).0.error_rate
}

#[no_mangle]
pub unsafe extern "C" fn mixnorm_result_n_samples(result: *const MixnormRunResult) -> usize {
    if result.is_null() {
        return 0;
    }
    (*result).0.n_samples
}

/// Predicted class for one stream position, or -1 if out of range.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_result_prediction(
    result: *const MixnormRunResult,
    index: usize,
) -> i32 {
    if result.is_null() {
        return -1;
    }
    let predictions: &[usize] = &(*result).0.predictions;
    match predictions.get(index) {
        Some(&p) => p as i32,
        None => -1,
    }
}

/// Error rate restricted to one corruption kind (or "clean"); NaN if the
/// kind is absent from the stream.
#[no_mangle]
pub unsafe extern "C" fn mixnorm_result_kind_error_rate(
    result: *const MixnormRunResult,
    kind: *const c_char,
) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    let kind = match cstr(kind, "kind") {
        Ok(k) => k,
        Err(_) => return f64::NAN,
    };
    match (*result).0.per_corruption.get(kind) {
        Some(&(wrong, total)) => wrong as f64 / total as f64,
        None => f64::NAN,
    }
}

#[no_mangle]
pub unsafe extern "C" fn mixnorm_result_free(result: *mut MixnormRunResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixnorm::model::{train_source, LayerSpec, TrainConfig};
    use std::ffi::CString;
    use std::ptr;

    fn trained_model_file(dir: &Path) -> std::path::PathBuf {
        let train: Vec<_> = generate_source_dataset(1, 6)
            .unwrap()
            .into_iter()
            .map(|img| (img.pixels, img.label))
            .collect();
        let layers = vec![
            LayerSpec::Conv3x3 { in_ch: 3, out_ch: 6 },
            LayerSpec::NormSlot { channels: 6 },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { in_dim: 6, out_dim: 10 },
        ];
        let cfg = TrainConfig { epochs: 2, batch_size: 16, ..Default::default() };
        let net = train_source(layers, [3, 16, 16], 10, &train, &train, &cfg, 5).unwrap();
        let path = dir.join("model.txt");
        format::save_model(&net, &path).unwrap();
        path
    }

    #[test]
    fn full_c_abi_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model_path = CString::new(trained_model_file(dir.path()).to_str().unwrap()).unwrap();
        unsafe {
            let mut model: *mut MixnormModel = ptr::null_mut();
            assert_eq!(mixnorm_model_load(model_path.as_ptr(), &mut model), MIXNORM_OK);

            // save -> reload is byte-identical
            let copy = dir.path().join("copy.txt");
            let copy_c = CString::new(copy.to_str().unwrap()).unwrap();
            assert_eq!(mixnorm_model_save(model, copy_c.as_ptr()), MIXNORM_OK);
            assert_eq!(
                std::fs::read(dir.path().join("model.txt")).unwrap(),
                std::fs::read(&copy).unwrap()
            );

            let desc = CString::new("single:contrast:2").unwrap();
            let mut stream: *mut MixnormStream = ptr::null_mut();
            assert_eq!(mixnorm_stream_build(desc.as_ptr(), 3, &mut stream), MIXNORM_OK);
            let n = mixnorm_stream_len(stream);
            assert_eq!(n, 10 * DEFAULT_EVAL_PER_CLASS);

            let method = CString::new("mixnorm_fixed_affine").unwrap();
            let mut result: *mut MixnormRunResult = ptr::null_mut();
            assert_eq!(
                mixnorm_run(model, method.as_ptr(), stream, 4, 3, &mut result),
                MIXNORM_OK
            );
            assert_eq!(mixnorm_result_n_samples(result), n);
            let err = mixnorm_result_error_rate(result);
            assert!((0.0..=1.0).contains(&err));
            let kind = CString::new("contrast").unwrap();
            assert_eq!(mixnorm_result_kind_error_rate(result, kind.as_ptr()), err);
            assert!(mixnorm_result_prediction(result, 0) >= 0);
            assert_eq!(mixnorm_result_prediction(result, n), -1);

            mixnorm_result_free(result);
            mixnorm_stream_free(stream);
            mixnorm_model_free(model);
        }
    }

    #[test]
    fn error_paths_set_codes_and_messages() {
        unsafe {
            let mut model: *mut MixnormModel = ptr::null_mut();
            let missing = CString::new("/nonexistent/model.txt").unwrap();
            assert_eq!(
                mixnorm_model_load(missing.as_ptr(), &mut model),
                MIXNORM_ERR_USAGE
            );
            assert!(model.is_null());
            let msg = CStr::from_ptr(mixnorm_last_error()).to_str().unwrap();
            assert!(!msg.is_empty());

            let mut stream: *mut MixnormStream = ptr::null_mut();
            let bad = CString::new("single:fog:9").unwrap();
            assert_eq!(
                mixnorm_stream_build(bad.as_ptr(), 0, &mut stream),
                MIXNORM_ERR_USAGE
            );

            assert_eq!(mixnorm_model_load(ptr::null(), &mut model), MIXNORM_ERR_USAGE);
            assert_eq!(mixnorm_stream_len(ptr::null()), 0);
            assert!(mixnorm_result_error_rate(ptr::null()).is_nan());
            mixnorm_model_free(ptr::null_mut());
        }
    }
}
