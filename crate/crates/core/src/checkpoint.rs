//! Checkpoints: the parameter tensors written back to back in tensor file
//! format, plus a text index with one `name offset length` line per tensor.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{read_tensor, write_tensor};

pub fn index_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".index");
    PathBuf::from(p)
}

pub fn encode(params: &ParamStore) -> Result<(Vec<u8>, String)> {
    let mut data = Vec::new();
    let mut index = String::new();
    for (name, t) in params.iter() {
        if name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("parameter name {name:?} has whitespace")));
        }
        let offset = data.len();
        let len = write_tensor(&mut data, t)?;
        index.push_str(&format!("{name} {offset} {len}\n"));
    }
    Ok((data, index))
}

pub fn decode(data: &[u8], index: &str) -> Result<ParamStore> {
    let mut out = ParamStore::default();
    for (lineno, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::format("checkpoint index", format!("line {}: {line:?}", lineno + 1));
        let mut parts = line.split_whitespace();
        let (Some(name), Some(off), Some(len), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let off: usize = off.parse().map_err(|_| bad())?;
        let len: usize = len.parse().map_err(|_| bad())?;
        let bytes = data
            .get(off..off.checked_add(len).ok_or_else(bad)?)
            .ok_or_else(|| Error::format("checkpoint", format!("{name} lies outside the data file")))?;
        let mut cursor = Cursor::new(bytes);
        let t = read_tensor(&mut cursor)?;
        if cursor.position() as usize != len {
            return Err(Error::format("checkpoint", format!("{name} length mismatch")));
        }
        out.insert(name, t);
    }
    Ok(out)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    let (data, index) = encode(params)?;
    fs::write(path, data).map_err(Error::at(path))?;
    let ip = index_path(path);
    fs::write(&ip, index).map_err(Error::at(&ip))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let data = fs::read(path).map_err(Error::at(path))?;
    let ip = index_path(path);
    let index = fs::read_to_string(&ip).map_err(Error::at(&ip))?;
    decode(&data, &index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn encode_decode_roundtrip() {
        let mut p = ParamStore::default();
        p.insert("a.weight", Tensor::new(vec![2, 1, 1, 1], vec![1.5, -2.0]).unwrap());
        p.insert("b", Tensor::scalar(0.25));
        let (data, index) = encode(&p).unwrap();
        assert_eq!(index.lines().count(), 2);
        assert!(index.starts_with("a.weight 0 "));
        assert_eq!(decode(&data, &index).unwrap(), p);
        assert!(decode(&data, "a.weight 0 9999\n").is_err());
        assert!(decode(&data, "a.weight zero 3\n").is_err());
    }
}
