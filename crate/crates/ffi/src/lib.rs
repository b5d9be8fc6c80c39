//! C interface to the codec.
//!
//! Every fallible function returns a [`PoelicStatus`]; on failure a message
//! is available from [`poelic_last_error_message`] on the same thread.
//! Buffers handed out by the library are released with
//! [`poelic_buffer_free`], codecs with [`poelic_codec_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use poelic::codec::Codec;
use poelic::error::Error;
use poelic::eval_io::image::{from_rgb8, to_rgb8};
use poelic::transforms::{CodecConfig, Scale};

/// Result codes. Values 2 to 6 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoelicStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Bitstream = 5,
    Data = 6,
    Panic = 7,
}

/// Opaque codec handle.
pub struct PoelicCodec {
    codec: Codec,
}

/// Bytes owned by the library.
#[repr(C)]
pub struct PoelicBuffer {
    pub data: *mut u8,
    pub len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PoelicStatus {
    match e {
        Error::Usage(_) => PoelicStatus::InvalidArgument,
        Error::Io { .. } => PoelicStatus::Io,
        Error::Checkpoint(_) => PoelicStatus::Checkpoint,
        Error::Bitstream(_) => PoelicStatus::Bitstream,
        Error::Data(_) | Error::Shape(_) => PoelicStatus::Data,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (PoelicStatus, String)>) -> PoelicStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PoelicStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error (panic)".into());
            PoelicStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (PoelicStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PoelicStatus, String) {
    (PoelicStatus::NullArgument, format!("{what} is null"))
}

fn into_buffer(bytes: Vec<u8>) -> PoelicBuffer {
    let boxed = bytes.into_boxed_slice();
    let len = boxed.len();
    PoelicBuffer {
        data: Box::into_raw(boxed) as *mut u8,
        len,
    }
}

/// Load a codec checkpoint from a NUL-terminated UTF-8 path.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn poelic_codec_open(path: *const c_char, out: *mut *mut PoelicCodec) -> PoelicStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (PoelicStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let codec = Codec::load(Path::new(path)).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PoelicCodec { codec }));
        Ok(())
    })
}

/// Create an untrained codec: `scale` 0 is the toy model, 1 the full one.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn poelic_codec_new_random(scale: u32, seed: u64, out: *mut *mut PoelicCodec) -> PoelicStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let scale = match scale {
            0 => Scale::Toy,
            1 => Scale::Full,
            s => return Err((PoelicStatus::InvalidArgument, format!("unknown scale {s}"))),
        };
        let codec = Codec::random(CodecConfig::for_scale(scale), seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PoelicCodec { codec }));
        Ok(())
    })
}

/// # Safety
/// `codec` must come from this library and not be used afterwards; null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn poelic_codec_free(codec: *mut PoelicCodec) {
    if !codec.is_null() {
        drop(Box::from_raw(codec));
    }
}

/// Compress interleaved 8-bit RGB pixels (`3 * width * height` bytes, row
/// major) into `out`.
///
/// # Safety
/// `pixels` must point to `3 * width * height` readable bytes; `codec` and
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn poelic_compress_rgb8(
    codec: *const PoelicCodec,
    pixels: *const u8,
    width: usize,
    height: usize,
    out: *mut PoelicBuffer,
) -> PoelicStatus {
    guard(|| {
        if codec.is_null() || pixels.is_null() || out.is_null() {
            return Err(null("codec, pixels or out"));
        }
        let n = width
            .checked_mul(height)
            .and_then(|v| v.checked_mul(3))
            .ok_or_else(|| (PoelicStatus::InvalidArgument, "image too large".to_string()))?;
        if n == 0 {
            return Err((PoelicStatus::InvalidArgument, "image is empty".into()));
        }
        let img = from_rgb8(width, height, std::slice::from_raw_parts(pixels, n)).map_err(lib_err)?;
        let c = (*codec).codec.compress(&img).map_err(lib_err)?;
        *out = into_buffer(c.bytes);
        Ok(())
    })
}

/// Decode a stream into interleaved 8-bit RGB pixels.
///
/// # Safety
/// `data` must point to `len` readable bytes; the other pointers must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn poelic_decompress_rgb8(
    codec: *const PoelicCodec,
    data: *const u8,
    len: usize,
    out_pixels: *mut PoelicBuffer,
    out_width: *mut usize,
    out_height: *mut usize,
) -> PoelicStatus {
    guard(|| {
        if codec.is_null() || data.is_null() || out_pixels.is_null() || out_width.is_null() || out_height.is_null() {
            return Err(null("an argument"));
        }
        let img = (*codec)
            .codec
            .decompress(std::slice::from_raw_parts(data, len))
            .map_err(lib_err)?;
        let (w, h, px) = to_rgb8(&img).map_err(lib_err)?;
        *out_pixels = into_buffer(px);
        *out_width = w;
        *out_height = h;
        Ok(())
    })
}

/// Release a buffer and reset it to empty. Safe to call twice.
///
/// # Safety
/// `buf` must be null or point to a buffer filled by this library.
#[no_mangle]
pub unsafe extern "C" fn poelic_buffer_free(buf: *mut PoelicBuffer) {
    if buf.is_null() || (*buf).data.is_null() {
        return;
    }
    let b = &mut *buf;
    drop(Box::from_raw(ptr::slice_from_raw_parts_mut(b.data, b.len)));
    b.data = ptr::null_mut();
    b.len = 0;
}

/// Message of the last failure on this thread, or null after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn poelic_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}
