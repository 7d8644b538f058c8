//! Append-only key-value persistence.
//!
//! One text file per component, one `key = value` line per write,
//! last-write-wins on reload. Appending keeps historical values in the
//! file, which is exactly what the at-rest privacy scan wants to see: if a
//! secret ever touched disk, it stays visible to the scanner.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Store {
    path: PathBuf,
    map: BTreeMap<String, String>,
}

impl Store {
    /// Open (or create) the file and replay existing lines.
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Store> {
        let path = path.as_ref().to_path_buf();
        let mut map = BTreeMap::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for line in text.lines() {
                    let line = line.trim();
                    if line.is_empty() || line.starts_with('#') {
                        continue;
                    }
                    if let Some((k, v)) = line.split_once(" = ") {
                        map.insert(k.to_string(), v.to_string());
                    } else if let Some(k) = line.strip_suffix(" =") {
                        // An empty value trims to `key =`; blanking a key
                        // must survive reload or deletes would resurrect.
                        map.insert(k.to_string(), String::new());
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(&path, "")?;
            }
            Err(e) => return Err(e),
        }
        Ok(Store { path, map })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Values must be single-line; binary data goes in as hex.
    pub fn set(&mut self, key: &str, value: &str) -> std::io::Result<()> {
        assert!(!key.contains('\n') && !value.contains('\n'), "single-line entries only");
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{key} = {value}")?;
        f.flush()?;
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_bytes(&mut self, key: &str, value: &[u8]) -> std::io::Result<()> {
        self.set(key, &hex::encode(value))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    pub fn get_bytes(&self, key: &str) -> Option<Vec<u8>> {
        self.get(key).and_then(|v| hex::decode(v).ok())
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.map.range(prefix.to_string()..).take_while(move |(k, _)| k.starts_with(prefix)).map(|(k, _)| k.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_reload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.db");
        {
            let mut s = Store::open(&path).unwrap();
            s.set("alpha", "1").unwrap();
            s.set_bytes("raw", &[0xde, 0xad]).unwrap();
            s.set("alpha", "2").unwrap();
        }
        let s = Store::open(&path).unwrap();
        assert_eq!(s.get("alpha"), Some("2"), "last write wins");
        assert_eq!(s.get_bytes("raw"), Some(vec![0xde, 0xad]));
        assert!(!s.contains("missing"));
    }

    #[test]
    fn blanked_keys_stay_blank_after_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.db");
        {
            let mut s = Store::open(&path).unwrap();
            s.set("k", "secret").unwrap();
            s.set("k", "").unwrap();
        }
        let s = Store::open(&path).unwrap();
        assert_eq!(s.get("k"), Some(""));
    }

    #[test]
    fn history_stays_in_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.db");
        let mut s = Store::open(&path).unwrap();
        s.set("k", "first").unwrap();
        s.set("k", "second").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("first") && text.contains("second"));
    }

    #[test]
    fn prefix_scan() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Store::open(dir.path().join("a.db")).unwrap();
        s.set("user.alice.pk", "x").unwrap();
        s.set("user.bob.pk", "y").unwrap();
        s.set("health.alice", "z").unwrap();
        let users: Vec<&str> = s.keys_with_prefix("user.").collect();
        assert_eq!(users, vec!["user.alice.pk", "user.bob.pk"]);
    }
}
