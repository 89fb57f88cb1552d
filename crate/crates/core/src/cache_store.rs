//! Optional on-disk persistence of the quantized-point caches of derived fields.
//!
//! When a directory is installed with [`set_cache_dir`], every derived field
//! built afterwards is seeded from `<dir>/<hash>.json` (if present) and
//! registered; [`flush`] writes all registered caches back. Values are stored as
//! raw bit patterns, so a warm run reproduces a cold one exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::QuantizedCache;
use crate::quadrature::Estimate;

struct Store {
    dir: PathBuf,
    caches: Vec<(String, Arc<QuantizedCache>)>,
}

fn store() -> &'static Mutex<Option<Store>> {
    static STORE: OnceLock<Mutex<Option<Store>>> = OnceLock::new();
    STORE.get_or_init(|| Mutex::new(None))
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    /// `[k0, k1, k2, value bits, error bits]`
    entries: Vec<(i64, i64, i64, u64, u64)>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::CacheStore(format!("{}: {e}", path.display()))
}

/// Installs (or with `None`, removes) the cache directory. Creates it if needed.
pub fn set_cache_dir(dir: Option<&Path>) -> Result<()> {
    let mut guard = store().lock().expect("cache store lock");
    *guard = match dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(|e| io_err(d, e))?;
            Some(Store {
                dir: d.to_path_buf(),
                caches: Vec::new(),
            })
        }
        None => None,
    };
    Ok(())
}

/// 64-bit FNV-1a, used only to name cache files; the full key is stored inside.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn file_for(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{:016x}.json", fnv1a(key)))
}

/// Seeds `cache` from disk and registers it for [`flush`]. No-op without a directory.
pub(crate) fn attach(key: String, cache: &Arc<QuantizedCache>) -> Result<()> {
    let mut guard = store().lock().expect("cache store lock");
    let Some(st) = guard.as_mut() else {
        return Ok(());
    };
    let path = file_for(&st.dir, &key);
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let file: CacheFile = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        if file.key == key {
            cache.extend(file.entries.into_iter().map(|(a, b, c, v, e)| {
                ([a, b, c], Estimate::new(f64::from_bits(v), f64::from_bits(e)))
            }));
        }
    }
    if !st.caches.iter().any(|(k, _)| *k == key) {
        st.caches.push((key, Arc::clone(cache)));
    }
    Ok(())
}

/// Writes every registered cache atomically. Returns the number of files written.
pub fn flush() -> Result<usize> {
    let guard = store().lock().expect("cache store lock");
    let Some(st) = guard.as_ref() else {
        return Ok(0);
    };
    for (key, cache) in &st.caches {
        let file = CacheFile {
            key: key.clone(),
            entries: cache
                .entries()
                .into_iter()
                .map(|(k, v)| (k[0], k[1], k[2], v.value.to_bits(), v.error.to_bits()))
                .collect(),
        };
        let path = file_for(&st.dir, key);
        let tmp = path.with_extension(format!("json.tmp{}", std::process::id()));
        let text = serde_json::to_string(&file).map_err(|e| io_err(&path, e))?;
        fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
    }
    Ok(st.caches.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }
}
