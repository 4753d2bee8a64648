//! C ABI over the lowsplat library.
//!
//! Objects cross the boundary as opaque handles owned by the caller and
//! released with the matching `*_free`. Every fallible call returns an
//! `LsStatus`; on failure the message is kept per thread and can be read
//! with `ls_last_error`. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lowsplat::adapter::{adapt, AdapterParams};
use lowsplat::camera::{CameraRecord, CameraView};
use lowsplat::config::RunConfig;
use lowsplat::imaging::{self, Image};
use lowsplat::lowlight::{degrade, sample_params, LowlightConfig};
use lowsplat::render::render;
use lowsplat::rng::SeededRng;
use lowsplat::scene::{scene_read, scene_write, GaussianScene};
use lowsplat::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    MissingInput = 4,
    CorruptInput = 5,
    DimensionMismatch = 6,
    DegenerateGeometry = 7,
    Io = 8,
    Panic = 9,
}

/// Pinhole camera. `rotation` is camera-to-world, row-major; `center` is
/// the camera position in world coordinates.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LsCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub center: [f64; 3],
    pub width: u32,
    pub height: u32,
}

/// Opaque RGB image with f64 samples in [0, 1].
pub struct LsImage(Image);
/// Opaque Gaussian scene.
pub struct LsScene(GaussianScene);
/// Opaque adapter parameters.
pub struct LsAdapter(AdapterParams);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> LsStatus {
    match e {
        Error::MissingFile(_) => LsStatus::MissingInput,
        Error::UnsupportedFormat { .. } | Error::CorruptData { .. } | Error::MalformedRecord { .. } => {
            LsStatus::CorruptInput
        }
        Error::Unwritable { .. } | Error::Io { .. } => LsStatus::Io,
        Error::DimensionMismatch(_) => LsStatus::DimensionMismatch,
        Error::InvalidArgument(_) | Error::EmptyInput(_) => LsStatus::InvalidArgument,
        Error::DegenerateGeometry(_) => LsStatus::DegenerateGeometry,
        Error::InvalidConfig(_) => LsStatus::InvalidConfig,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LsStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            LsStatus::NullArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LsStatus::Panic
        }
    }
}

unsafe fn arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidArgument(format!("{what} is not UTF-8"))))
}

fn camera(c: &LsCamera) -> Result<CameraView, Fail> {
    let rec = CameraRecord {
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        rotation: c.rotation,
        translation: c.center,
        width: c.width as usize,
        height: c.height as usize,
    };
    Ok(CameraView::try_from(&rec)?)
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Copies the last error message of this thread into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ls_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ls_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an image from `width * height * 3` interleaved RGB samples.
///
/// # Safety
/// `rgb` must point to `width * height * 3` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn ls_image_new(width: u32, height: u32, rgb: *const f64, out_image: *mut *mut LsImage) -> LsStatus {
    guard(|| {
        let o = out(out_image, "out_image")?;
        let n = width as usize * height as usize * 3;
        let data = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(arg(rgb, "rgb")?, n).to_vec()
        };
        *o = boxed(LsImage(Image::from_vec(width as usize, height as usize, data)?));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_image` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_image_load(path: *const c_char, out_image: *mut *mut LsImage) -> LsStatus {
    guard(|| {
        let o = out(out_image, "out_image")?;
        *o = boxed(LsImage(imaging::load_image(c_str(path, "path")?)?));
        Ok(())
    })
}

/// Writes an 8-bit RGB PNG.
///
/// # Safety
/// `image` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ls_image_save(image: *const LsImage, path: *const c_char) -> LsStatus {
    guard(|| {
        imaging::save_image(&arg(image, "image")?.0, c_str(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle; the size outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ls_image_size(image: *const LsImage, width: *mut u32, height: *mut u32) -> LsStatus {
    guard(|| {
        let img = &arg(image, "image")?.0;
        *out(width, "width")? = img.width() as u32;
        *out(height, "height")? = img.height() as u32;
        Ok(())
    })
}

/// Copies the samples into `rgb`, which must hold `width * height * 3`.
///
/// # Safety
/// `rgb` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ls_image_pixels(image: *const LsImage, rgb: *mut f64, len: usize) -> LsStatus {
    guard(|| {
        let data = arg(image, "image")?.0.data();
        if len < data.len() {
            return Err(Error::DimensionMismatch(format!("buffer holds {len} samples, image has {}", data.len())).into());
        }
        if !data.is_empty() {
            ptr::copy_nonoverlapping(data.as_ptr(), out(rgb, "rgb")?, data.len());
        }
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_image_free(image: *mut LsImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// PSNR in dB (capped for identical images) and SSIM of two same-sized images.
///
/// # Safety
/// Handles must be live; outputs writable or null.
#[no_mangle]
pub unsafe extern "C" fn ls_image_metrics(
    a: *const LsImage,
    b: *const LsImage,
    out_psnr: *mut f64,
    out_ssim: *mut f64,
) -> LsStatus {
    guard(|| {
        let (a, b) = (&arg(a, "a")?.0, &arg(b, "b")?.0);
        let p = imaging::psnr(a, b)?;
        let s = imaging::ssim(a, b)?;
        if let Some(o) = out_psnr.as_mut() {
            *o = p;
        }
        if let Some(o) = out_ssim.as_mut() {
            *o = s;
        }
        Ok(())
    })
}

/// Applies the default lowlight degradation, drawn from the stream
/// (`seed`, `scene_id`, `view_id`).
///
/// # Safety
/// `image` must be live, `scene_id` NUL-terminated, `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_degrade(
    image: *const LsImage,
    seed: u64,
    scene_id: *const c_char,
    view_id: u64,
    out_image: *mut *mut LsImage,
) -> LsStatus {
    guard(|| {
        let img = &arg(image, "image")?.0;
        let o = out(out_image, "out_image")?;
        let cfg = LowlightConfig::default();
        let params = sample_params(&cfg, &mut SeededRng::for_view(seed, c_str(scene_id, "scene_id")?, view_id));
        *o = boxed(LsImage(degrade(img, &params, cfg.stages)?));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out_scene` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_scene_read(path: *const c_char, out_scene: *mut *mut LsScene) -> LsStatus {
    guard(|| {
        let o = out(out_scene, "out_scene")?;
        *o = boxed(LsScene(scene_read(c_str(path, "path")?)?));
        Ok(())
    })
}

/// # Safety
/// `scene` must be live and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ls_scene_write(scene: *const LsScene, path: *const c_char) -> LsStatus {
    guard(|| {
        scene_write(&arg(scene, "scene")?.0, c_str(path, "path")?)?;
        Ok(())
    })
}

/// Number of primitives, or 0 for a null handle.
///
/// # Safety
/// `scene` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn ls_scene_len(scene: *const LsScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_scene_free(scene: *mut LsScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Renders `scene` from `camera` over a constant `background` color.
///
/// # Safety
/// Pointers must be live; `background` points to 3 doubles.
#[no_mangle]
pub unsafe extern "C" fn ls_render(
    scene: *const LsScene,
    camera: *const LsCamera,
    background: *const f64,
    out_image: *mut *mut LsImage,
) -> LsStatus {
    guard(|| {
        let scene = &arg(scene, "scene")?.0;
        let cam = self::camera(arg(camera, "camera")?)?;
        let bg = std::slice::from_raw_parts(arg(background, "background")?, 3);
        let o = out(out_image, "out_image")?;
        *o = boxed(LsImage(render(scene, &cam, [bg[0], bg[1], bg[2]]).image));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out_adapter` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_adapter_read(path: *const c_char, out_adapter: *mut *mut LsAdapter) -> LsStatus {
    guard(|| {
        let o = out(out_adapter, "out_adapter")?;
        *o = boxed(LsAdapter(AdapterParams::read(c_str(path, "path")?)?));
        Ok(())
    })
}

/// # Safety
/// Handles must be live; `out_image` writable.
#[no_mangle]
pub unsafe extern "C" fn ls_adapter_apply(
    adapter: *const LsAdapter,
    image: *const LsImage,
    out_image: *mut *mut LsImage,
) -> LsStatus {
    guard(|| {
        let a = &arg(adapter, "adapter")?.0;
        let img = &arg(image, "image")?.0;
        let o = out(out_image, "out_image")?;
        *o = boxed(LsImage(adapt(img, a)?));
        Ok(())
    })
}

/// # Safety
/// `adapter` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ls_adapter_free(adapter: *mut LsAdapter) {
    if !adapter.is_null() {
        drop(Box::from_raw(adapter));
    }
}

/// Two-view reconstruction. `adapter` may be null (no enhancement);
/// `config_toml` may be null (defaults) or a run configuration whose
/// `[pipeline]` table is used.
///
/// # Safety
/// Non-null pointers must be live; `config_toml` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ls_reconstruct(
    image0: *const LsImage,
    camera0: *const LsCamera,
    image1: *const LsImage,
    camera1: *const LsCamera,
    adapter: *const LsAdapter,
    config_toml: *const c_char,
    out_scene: *mut *mut LsScene,
) -> LsStatus {
    guard(|| {
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(c_str(config_toml, "config_toml")?)?
        };
        cfg.validate()?;
        let contexts = [
            (arg(image0, "image0")?.0.clone(), camera(arg(camera0, "camera0")?)?),
            (arg(image1, "image1")?.0.clone(), camera(arg(camera1, "camera1")?)?),
        ];
        let o = out(out_scene, "out_scene")?;
        let rec = lowsplat::mvs::reconstruct(&contexts, adapter.as_ref().map(|a| &a.0), &cfg.pipeline, None)?;
        *o = boxed(LsScene(rec.scene));
        Ok(())
    })
}
