//! Minimal bindings to the system HDF5 C library.
//!
//! Only the handful of calls needed for bag files are bound: contiguous
//! datasets of `f32`/`i8` and scalar string/integer attributes on the root
//! group. The serial HDF5 build is not thread-safe, so every open file holds
//! a process-wide lock for its whole lifetime.

#![allow(non_camel_case_types, non_upper_case_globals)]

use std::ffi::{c_char, c_int, c_uint, c_void, CStr, CString};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, Once};

use crate::error::{Error, Result};

type hid_t = i64;
type herr_t = c_int;
type htri_t = c_int;
type hsize_t = u64;

const H5P_DEFAULT: hid_t = 0;
const H5S_ALL: hid_t = 0;
const H5E_DEFAULT: hid_t = 0;
const H5F_ACC_RDONLY: c_uint = 0x0000;
const H5F_ACC_TRUNC: c_uint = 0x0002;
const H5S_SCALAR: c_int = 0;
const H5T_CSET_UTF8: c_int = 1;
const H5T_VARIABLE: usize = usize::MAX;

type ErrWalk = Option<unsafe extern "C" fn(hid_t, *mut c_void) -> herr_t>;

#[link(name = "hdf5")]
extern "C" {
    fn H5open() -> herr_t;
    fn H5Eset_auto2(estack: hid_t, func: ErrWalk, client: *mut c_void) -> herr_t;
    fn H5Fcreate(name: *const c_char, flags: c_uint, fcpl: hid_t, fapl: hid_t) -> hid_t;
    fn H5Fopen(name: *const c_char, flags: c_uint, fapl: hid_t) -> hid_t;
    fn H5Fclose(id: hid_t) -> herr_t;
    fn H5Screate_simple(rank: c_int, dims: *const hsize_t, maxdims: *const hsize_t) -> hid_t;
    fn H5Screate(class: c_int) -> hid_t;
    fn H5Sclose(id: hid_t) -> herr_t;
    fn H5Sget_simple_extent_ndims(id: hid_t) -> c_int;
    fn H5Sget_simple_extent_dims(id: hid_t, dims: *mut hsize_t, maxdims: *mut hsize_t) -> c_int;
    fn H5Dcreate2(
        loc: hid_t,
        name: *const c_char,
        dtype: hid_t,
        space: hid_t,
        lcpl: hid_t,
        dcpl: hid_t,
        dapl: hid_t,
    ) -> hid_t;
    fn H5Dopen2(loc: hid_t, name: *const c_char, dapl: hid_t) -> hid_t;
    fn H5Dget_space(id: hid_t) -> hid_t;
    fn H5Dwrite(
        id: hid_t,
        mem_type: hid_t,
        mem_space: hid_t,
        file_space: hid_t,
        xfer: hid_t,
        buf: *const c_void,
    ) -> herr_t;
    fn H5Dread(
        id: hid_t,
        mem_type: hid_t,
        mem_space: hid_t,
        file_space: hid_t,
        xfer: hid_t,
        buf: *mut c_void,
    ) -> herr_t;
    fn H5Dclose(id: hid_t) -> herr_t;
    fn H5Acreate2(
        loc: hid_t,
        name: *const c_char,
        dtype: hid_t,
        space: hid_t,
        acpl: hid_t,
        aapl: hid_t,
    ) -> hid_t;
    fn H5Aopen(obj: hid_t, name: *const c_char, aapl: hid_t) -> hid_t;
    fn H5Aexists(obj: hid_t, name: *const c_char) -> htri_t;
    fn H5Awrite(id: hid_t, dtype: hid_t, buf: *const c_void) -> herr_t;
    fn H5Aread(id: hid_t, dtype: hid_t, buf: *mut c_void) -> herr_t;
    fn H5Aget_type(id: hid_t) -> hid_t;
    fn H5Aclose(id: hid_t) -> herr_t;
    fn H5Tcopy(id: hid_t) -> hid_t;
    fn H5Tset_size(id: hid_t, size: usize) -> herr_t;
    fn H5Tset_cset(id: hid_t, cset: c_int) -> herr_t;
    fn H5Tget_size(id: hid_t) -> usize;
    fn H5Tis_variable_str(id: hid_t) -> htri_t;
    fn H5Tclose(id: hid_t) -> herr_t;
    fn H5Lexists(loc: hid_t, name: *const c_char, lapl: hid_t) -> htri_t;
    fn H5free_memory(ptr: *mut c_void) -> herr_t;

    static H5T_NATIVE_FLOAT_g: hid_t;
    static H5T_NATIVE_SCHAR_g: hid_t;
    static H5T_NATIVE_INT_g: hid_t;
    static H5T_C_S1_g: hid_t;
    static H5T_IEEE_F32LE_g: hid_t;
    static H5T_STD_I8LE_g: hid_t;
    static H5T_STD_I32LE_g: hid_t;
}

static LOCK: Mutex<()> = Mutex::new(());
static INIT: Once = Once::new();

fn check(ret: i64, what: &str) -> Result<i64> {
    if ret < 0 {
        Err(Error::Hdf5(format!("{what} failed")))
    } else {
        Ok(ret)
    }
}

fn cstring(s: &str) -> Result<CString> {
    CString::new(s).map_err(|_| Error::Hdf5(format!("name `{s}` contains a NUL byte")))
}

/// Owned identifier closed on drop.
struct Handle {
    id: hid_t,
    close: unsafe extern "C" fn(hid_t) -> herr_t,
}

impl Handle {
    fn new(id: hid_t, close: unsafe extern "C" fn(hid_t) -> herr_t, what: &str) -> Result<Self> {
        check(id, what)?;
        Ok(Self { id, close })
    }
}

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe {
            (self.close)(self.id);
        }
    }
}

#[derive(Clone, Copy)]
enum Elem {
    F32,
    I8,
}

impl Elem {
    fn mem_type(self) -> hid_t {
        unsafe {
            match self {
                Elem::F32 => H5T_NATIVE_FLOAT_g,
                Elem::I8 => H5T_NATIVE_SCHAR_g,
            }
        }
    }

    fn file_type(self) -> hid_t {
        unsafe {
            match self {
                Elem::F32 => H5T_IEEE_F32LE_g,
                Elem::I8 => H5T_STD_I8LE_g,
            }
        }
    }
}

/// An open HDF5 file. Holds the library lock until dropped.
pub(crate) struct H5File {
    id: hid_t,
    path: PathBuf,
    _guard: MutexGuard<'static, ()>,
}

impl H5File {
    fn lock() -> Result<MutexGuard<'static, ()>> {
        let guard = LOCK.lock().unwrap_or_else(|p| p.into_inner());
        let mut ok = true;
        INIT.call_once(|| unsafe {
            ok = H5open() >= 0;
            H5Eset_auto2(H5E_DEFAULT, None, std::ptr::null_mut());
        });
        if !ok {
            return Err(Error::Hdf5("library initialisation failed".into()));
        }
        Ok(guard)
    }

    fn path_cstring(path: &Path) -> Result<CString> {
        cstring(&path.to_string_lossy())
    }

    pub fn create(path: &Path) -> Result<Self> {
        let guard = Self::lock()?;
        let name = Self::path_cstring(path)?;
        let id = unsafe { H5Fcreate(name.as_ptr(), H5F_ACC_TRUNC, H5P_DEFAULT, H5P_DEFAULT) };
        if id < 0 {
            return Err(Error::io(
                path,
                std::io::Error::other("cannot create hdf5 file"),
            ));
        }
        Ok(Self {
            id,
            path: path.to_path_buf(),
            _guard: guard,
        })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let guard = Self::lock()?;
        let name = Self::path_cstring(path)?;
        let id = unsafe { H5Fopen(name.as_ptr(), H5F_ACC_RDONLY, H5P_DEFAULT) };
        if id < 0 {
            return Err(Error::Hdf5(format!(
                "{} is not a readable hdf5 file",
                path.display()
            )));
        }
        Ok(Self {
            id,
            path: path.to_path_buf(),
            _guard: guard,
        })
    }

    pub fn has_dataset(&self, name: &str) -> Result<bool> {
        let c = cstring(name)?;
        Ok(unsafe { H5Lexists(self.id, c.as_ptr(), H5P_DEFAULT) } > 0)
    }

    fn write_dataset(&self, name: &str, dims: &[usize], elem: Elem, buf: *const c_void) -> Result<()> {
        let c = cstring(name)?;
        let dims: Vec<hsize_t> = dims.iter().map(|&d| d as hsize_t).collect();
        unsafe {
            let space = Handle::new(
                H5Screate_simple(dims.len() as c_int, dims.as_ptr(), std::ptr::null()),
                H5Sclose,
                "H5Screate_simple",
            )?;
            let ds = Handle::new(
                H5Dcreate2(
                    self.id,
                    c.as_ptr(),
                    elem.file_type(),
                    space.id,
                    H5P_DEFAULT,
                    H5P_DEFAULT,
                    H5P_DEFAULT,
                ),
                H5Dclose,
                "H5Dcreate2",
            )?;
            check(
                H5Dwrite(ds.id, elem.mem_type(), H5S_ALL, H5S_ALL, H5P_DEFAULT, buf) as i64,
                "H5Dwrite",
            )?;
        }
        Ok(())
    }

    pub fn write_f32(&self, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.write_dataset(name, dims, Elem::F32, data.as_ptr().cast())
    }

    pub fn write_i8(&self, name: &str, dims: &[usize], data: &[i8]) -> Result<()> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.write_dataset(name, dims, Elem::I8, data.as_ptr().cast())
    }

    fn dataset_shape(&self, ds: hid_t) -> Result<Vec<usize>> {
        unsafe {
            let space = Handle::new(H5Dget_space(ds), H5Sclose, "H5Dget_space")?;
            let rank = check(H5Sget_simple_extent_ndims(space.id) as i64, "extent_ndims")? as usize;
            let mut dims = vec![0 as hsize_t; rank];
            check(
                H5Sget_simple_extent_dims(space.id, dims.as_mut_ptr(), std::ptr::null_mut()) as i64,
                "extent_dims",
            )?;
            Ok(dims.into_iter().map(|d| d as usize).collect())
        }
    }

    fn open_dataset(&self, name: &str) -> Result<Handle> {
        if !self.has_dataset(name)? {
            return Err(Error::MissingDataset {
                path: self.path.clone(),
                name: name.to_string(),
            });
        }
        let c = cstring(name)?;
        Handle::new(
            unsafe { H5Dopen2(self.id, c.as_ptr(), H5P_DEFAULT) },
            H5Dclose,
            "H5Dopen2",
        )
    }

    pub fn read_f32(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let ds = self.open_dataset(name)?;
        let shape = self.dataset_shape(ds.id)?;
        let mut out = vec![0f32; shape.iter().product()];
        if !out.is_empty() {
            unsafe {
                check(
                    H5Dread(
                        ds.id,
                        Elem::F32.mem_type(),
                        H5S_ALL,
                        H5S_ALL,
                        H5P_DEFAULT,
                        out.as_mut_ptr().cast(),
                    ) as i64,
                    "H5Dread",
                )?;
            }
        }
        Ok((shape, out))
    }

    pub fn read_i8(&self, name: &str) -> Result<(Vec<usize>, Vec<i8>)> {
        let ds = self.open_dataset(name)?;
        let shape = self.dataset_shape(ds.id)?;
        let mut out = vec![0i8; shape.iter().product()];
        if !out.is_empty() {
            unsafe {
                check(
                    H5Dread(
                        ds.id,
                        Elem::I8.mem_type(),
                        H5S_ALL,
                        H5S_ALL,
                        H5P_DEFAULT,
                        out.as_mut_ptr().cast(),
                    ) as i64,
                    "H5Dread",
                )?;
            }
        }
        Ok((shape, out))
    }

    pub fn write_attr_str(&self, name: &str, value: &str) -> Result<()> {
        let c = cstring(name)?;
        let v = cstring(value)?;
        unsafe {
            let dtype = Handle::new(H5Tcopy(H5T_C_S1_g), H5Tclose, "H5Tcopy")?;
            check(H5Tset_size(dtype.id, H5T_VARIABLE) as i64, "H5Tset_size")?;
            check(H5Tset_cset(dtype.id, H5T_CSET_UTF8) as i64, "H5Tset_cset")?;
            let space = Handle::new(H5Screate(H5S_SCALAR), H5Sclose, "H5Screate")?;
            let attr = Handle::new(
                H5Acreate2(self.id, c.as_ptr(), dtype.id, space.id, H5P_DEFAULT, H5P_DEFAULT),
                H5Aclose,
                "H5Acreate2",
            )?;
            let ptr: *const c_char = v.as_ptr();
            check(
                H5Awrite(attr.id, dtype.id, (&ptr as *const *const c_char).cast()) as i64,
                "H5Awrite",
            )?;
        }
        Ok(())
    }

    pub fn write_attr_i32(&self, name: &str, value: i32) -> Result<()> {
        let c = cstring(name)?;
        unsafe {
            let space = Handle::new(H5Screate(H5S_SCALAR), H5Sclose, "H5Screate")?;
            let attr = Handle::new(
                H5Acreate2(self.id, c.as_ptr(), H5T_STD_I32LE_g, space.id, H5P_DEFAULT, H5P_DEFAULT),
                H5Aclose,
                "H5Acreate2",
            )?;
            check(
                H5Awrite(attr.id, H5T_NATIVE_INT_g, (&value as *const i32).cast()) as i64,
                "H5Awrite",
            )?;
        }
        Ok(())
    }

    fn open_attr(&self, name: &str) -> Result<Handle> {
        let c = cstring(name)?;
        let exists = unsafe { H5Aexists(self.id, c.as_ptr()) };
        if exists <= 0 {
            return Err(Error::MissingDataset {
                path: self.path.clone(),
                name: format!("@{name}"),
            });
        }
        Handle::new(
            unsafe { H5Aopen(self.id, c.as_ptr(), H5P_DEFAULT) },
            H5Aclose,
            "H5Aopen",
        )
    }

    pub fn read_attr_str(&self, name: &str) -> Result<String> {
        let attr = self.open_attr(name)?;
        unsafe {
            let ftype = Handle::new(H5Aget_type(attr.id), H5Tclose, "H5Aget_type")?;
            if H5Tis_variable_str(ftype.id) > 0 {
                let mtype = Handle::new(H5Tcopy(H5T_C_S1_g), H5Tclose, "H5Tcopy")?;
                check(H5Tset_size(mtype.id, H5T_VARIABLE) as i64, "H5Tset_size")?;
                check(H5Tset_cset(mtype.id, H5T_CSET_UTF8) as i64, "H5Tset_cset")?;
                let mut ptr: *mut c_char = std::ptr::null_mut();
                check(
                    H5Aread(attr.id, mtype.id, (&mut ptr as *mut *mut c_char).cast()) as i64,
                    "H5Aread",
                )?;
                if ptr.is_null() {
                    return Ok(String::new());
                }
                let s = CStr::from_ptr(ptr).to_string_lossy().into_owned();
                H5free_memory(ptr.cast());
                Ok(s)
            } else {
                let size = H5Tget_size(ftype.id);
                let mut buf = vec![0u8; size.max(1)];
                check(
                    H5Aread(attr.id, ftype.id, buf.as_mut_ptr().cast()) as i64,
                    "H5Aread",
                )?;
                let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
                Ok(String::from_utf8_lossy(&buf[..end]).trim_end().to_string())
            }
        }
    }

    pub fn read_attr_i32(&self, name: &str) -> Result<i32> {
        let attr = self.open_attr(name)?;
        let mut value: i32 = 0;
        unsafe {
            check(
                H5Aread(attr.id, H5T_NATIVE_INT_g, (&mut value as *mut i32).cast()) as i64,
                "H5Aread",
            )?;
        }
        Ok(value)
    }
}

impl Drop for H5File {
    fn drop(&mut self) {
        unsafe {
            H5Fclose(self.id);
        }
    }
}
