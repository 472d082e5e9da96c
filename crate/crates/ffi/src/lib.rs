//! C ABI for curio.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`CurioStatus`]; on failure [`curio_last_error`] describes the
//! problem until the next call on the same thread. Images are row-major
//! `height * width * 3` arrays of doubles in `[0, 1]`. Scenes travel as the
//! label JSON used by datasets.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use curio::eval::{dssim, param_metric, MetricWeights};
use curio::nn::Generator;
use curio::oracle::{optimize_joint, OracleConfig};
use curio::train::checkpoint::load_generator;
use curio::{Error, Image, SceneCode, WorldSpec};

/// Result of every fallible call. Values match the `curio` exit codes where
/// both exist.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurioStatus {
    Ok = 0,
    InvalidInput = 2,
    Io = 3,
    Numeric = 4,
    NullPointer = 5,
    Panic = 6,
}

/// A world description (task, camera, render settings).
pub struct CurioWorld(WorldSpec);

/// A trained encoder with its heads.
pub struct CurioGenerator {
    generator: Generator,
    world: WorldSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap_or_default());
}

fn status_of(e: &Error) -> CurioStatus {
    match e.exit_code() {
        3 => CurioStatus::Io,
        4 => CurioStatus::Numeric,
        _ => CurioStatus::InvalidInput,
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

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CurioStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CurioStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            CurioStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            CurioStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::InvalidConfig(format!("{what} is not UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn image_arg(data: *const f64, height: usize, width: usize, what: &'static str) -> Result<Image, Fail> {
    if data.is_null() {
        return Err(Fail::Null(what));
    }
    let n = height * width * 3;
    Ok(Image::new(height, width, std::slice::from_raw_parts(data, n).to_vec())?)
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn curio_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Create a preset world (`circles`, `spheres` or `varied`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn curio_world_preset(
    name: *const c_char,
    image_size: usize,
    out: *mut *mut CurioWorld,
) -> CurioStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let w = WorldSpec::preset(str_arg(name, "name")?, image_size)?;
        *out = Box::into_raw(Box::new(CurioWorld(w)));
        Ok(())
    })
}

/// # Safety
/// `world` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn curio_world_free(world: *mut CurioWorld) {
    if !world.is_null() {
        drop(Box::from_raw(world));
    }
}

/// Side length of images in this world, or 0 for a null handle.
///
/// # Safety
/// `world` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn curio_world_image_size(world: *const CurioWorld) -> usize {
    world.as_ref().map_or(0, |w| w.0.image_size)
}

/// Render a scene JSON into `out`, which must hold `size * size * 3` doubles.
///
/// # Safety
/// Pointers must be valid; `out` must have room for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn curio_render_scene(
    world: *const CurioWorld,
    scene_json: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> CurioStatus {
    guard(|| {
        let w = &ref_arg(world, "world")?.0;
        let scene = SceneCode::from_json(str_arg(scene_json, "scene_json")?)?;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let img = w.render(&scene)?;
        if out_len != img.data().len() {
            return Err(Error::ShapeMismatch(format!("output buffer of {out_len}, image needs {}", img.data().len())).into());
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(img.data());
        Ok(())
    })
}

/// Load the generator stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn curio_generator_load(path: *const c_char, out: *mut *mut CurioGenerator) -> CurioStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (generator, world) = load_generator(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CurioGenerator { generator, world }));
        Ok(())
    })
}

/// # Safety
/// `g` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn curio_generator_free(g: *mut CurioGenerator) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// New handle to the world a generator was trained on.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn curio_generator_world(g: *const CurioGenerator, out: *mut *mut CurioWorld) -> CurioStatus {
    guard(|| {
        let g = ref_arg(g, "generator")?;
        *out_arg(out, "out")? = Box::into_raw(Box::new(CurioWorld(g.world.clone())));
        Ok(())
    })
}

/// Predict the scene code of one image. The returned JSON string must be
/// released with [`curio_string_free`].
///
/// # Safety
/// `image` must hold `size * size * 3` doubles for the generator's image size.
#[no_mangle]
pub unsafe extern "C" fn curio_generator_encode(
    g: *mut CurioGenerator,
    image: *const f64,
    out_json: *mut *mut c_char,
) -> CurioStatus {
    guard(|| {
        let g = g.as_mut().ok_or(Fail::Null("generator"))?;
        let out = out_arg(out_json, "out_json")?;
        let s = g.world.image_size;
        let img = image_arg(image, s, s, "image")?;
        let code = g.generator.encode(&[&img])?.remove(0);
        *out = CString::new(code.to_json()).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn curio_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Assignment-based parameter error between two scene codes of `world`,
/// with unit weights.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn curio_param_metric(
    world: *const CurioWorld,
    a_json: *const c_char,
    b_json: *const c_char,
    out: *mut f64,
) -> CurioStatus {
    guard(|| {
        let w = &ref_arg(world, "world")?.0;
        let a = SceneCode::from_json(str_arg(a_json, "a_json")?)?;
        let b = SceneCode::from_json(str_arg(b_json, "b_json")?)?;
        let out = out_arg(out, "out")?;
        *out = param_metric(&a, &b, &MetricWeights::default(), w)?.0;
        Ok(())
    })
}

/// Structural dissimilarity of two `height x width` RGB images.
///
/// # Safety
/// `a` and `b` must each hold `height * width * 3` doubles.
#[no_mangle]
pub unsafe extern "C" fn curio_dssim(
    a: *const f64,
    b: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
) -> CurioStatus {
    guard(|| {
        let ia = image_arg(a, height, width, "a")?;
        let ib = image_arg(b, height, width, "b")?;
        *out_arg(out, "out")? = dssim(&ia, &ib)?;
        Ok(())
    })
}

/// Run the analytic blob experiment and report the collapsed and solved
/// fractions.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn curio_oracle_run(
    n_problems: usize,
    steps: usize,
    curiosity: bool,
    seed: u64,
    out_collapse: *mut f64,
    out_success: *mut f64,
) -> CurioStatus {
    guard(|| {
        let cfg = OracleConfig {
            n_problems,
            steps,
            use_curiosity: curiosity,
            seed,
            frame_every: 0,
            ..OracleConfig::default()
        };
        cfg.validate()?;
        let collapse = out_arg(out_collapse, "out_collapse")?;
        let success = out_arg(out_success, "out_success")?;
        let o = optimize_joint(&cfg)?.outcome();
        *collapse = o.collapse_fraction;
        *success = o.success_fraction;
        Ok(())
    })
}
