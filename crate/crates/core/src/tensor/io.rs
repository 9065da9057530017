use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Network, Real, Tensor};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"BEVW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Named float32 tensors in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightsFile {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl WeightsFile {
    pub fn from_network<T: Real>(net: &Network<T>) -> Self {
        WeightsFile {
            tensors: net.param_names().map(String::from).zip(net.params.iter().map(|p| p.cast())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every parameter of `net` from the file, checking names and
    /// shapes.
    pub fn apply<T: Real>(&self, net: &mut Network<T>) -> Result<()> {
        let names: Vec<String> = net.param_names().map(String::from).collect();
        let missing: Vec<&str> = names
            .iter()
            .filter(|n| self.get(n).is_none())
            .map(String::as_str)
            .collect();
        if !missing.is_empty() || self.tensors.len() != names.len() {
            let extra: Vec<&str> = self
                .tensors
                .iter()
                .map(|(n, _)| n.as_str())
                .filter(|n| !names.iter().any(|m| m == n))
                .collect();
            return Err(Error::Weights(format!(
                "file has {} tensors, network needs {}; missing: [{}]; unexpected: [{}]",
                self.tensors.len(),
                names.len(),
                missing.join(", "),
                extra.join(", ")
            )));
        }
        for (i, name) in names.iter().enumerate() {
            let t = self.get(name).expect("presence checked");
            if t.shape != net.params[i].shape {
                return Err(Error::Weights(format!(
                    "tensor {name} has shape {:?}, network expects {:?}",
                    t.shape, net.params[i].shape
                )));
            }
            net.params[i] = t.cast();
        }
        Ok(())
    }
}

pub fn write_weights<W: Write>(w: &mut W, file: &WeightsFile) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&(file.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &file.tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.shape.len() as u8])?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> std::result::Result<[u8; N], String> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| "truncated weights file".to_string())?;
    Ok(buf)
}

pub fn read_weights<R: Read>(r: &mut R) -> std::result::Result<WeightsFile, String> {
    let magic = take::<4, _>(r)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(format!("bad magic {magic:?}, expected BEVW"));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != WEIGHTS_VERSION {
        return Err(format!("unsupported weights version {version}, expected {WEIGHTS_VERSION}"));
    }
    let count = u32::from_le_bytes(take(r)?);
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| "truncated weights file".to_string())?;
        let name = String::from_utf8(name).map_err(|_| "tensor name is not UTF-8".to_string())?;
        let rank = take::<1, _>(r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| format!("truncated data for tensor {name}"))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(WeightsFile { tensors })
}

pub fn save_weights<T: Real>(path: &Path, net: &Network<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_weights(&mut w, &WeightsFile::from_network(net)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_weights<T: Real>(path: &Path, net: &mut Network<T>) -> Result<()> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let file = read_weights(&mut BufReader::new(f)).map_err(|m| Error::Weights(format!("{}: {m}", path.display())))?;
    file.apply(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NetSpec;

    fn net(width: usize) -> Network<f32> {
        let mut s = NetSpec::new();
        let x = s.input(3);
        let a = s.conv_bn_relu("a", x, width);
        s.conv_with_bias("out", a, 2, 1, true, -4.6);
        Network::new(s, 5)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let a = net(4);
        save_weights(&path, &a).unwrap();
        let mut b = net(4);
        b.params.iter_mut().for_each(|p| p.data.fill(0.0));
        load_weights(&path, &mut b).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.shape, y.shape);
            assert!(x.data.iter().zip(&y.data).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn layout_matches_format() {
        let mut file = WeightsFile::default();
        file.tensors.push(("ab".into(), Tensor::from_vec(&[2], vec![1.0, -2.0])));
        let mut buf = Vec::new();
        write_weights(&mut buf, &file).unwrap();
        let mut expect = b"BEVW".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u16.to_le_bytes());
        expect.extend(b"ab");
        expect.push(1);
        expect.extend(2u32.to_le_bytes());
        expect.extend(1f32.to_le_bytes());
        expect.extend((-2f32).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_weights(&mut buf.as_slice()).unwrap(), file);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &WeightsFile::from_network(&net(4))).unwrap();
        buf[0] = b'X';
        assert!(read_weights(&mut buf.as_slice()).unwrap_err().contains("magic"));
        let mut buf2 = Vec::new();
        write_weights(&mut buf2, &WeightsFile::default()).unwrap();
        buf2[4] = 2;
        assert!(read_weights(&mut buf2.as_slice()).unwrap_err().contains("version"));
    }

    #[test]
    fn truncated_rejected() {
        let mut buf = Vec::new();
        write_weights(&mut buf, &WeightsFile::from_network(&net(4))).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_weights(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn missing_tensors_named() {
        let mut file = WeightsFile::from_network(&net(4));
        file.tensors.retain(|(n, _)| n != "a.bn.gamma" && n != "out.bias");
        let mut target = net(4);
        let err = file.apply(&mut target).unwrap_err().to_string();
        assert!(err.contains("a.bn.gamma") && err.contains("out.bias"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let file = WeightsFile::from_network(&net(4));
        let mut other = net(5);
        assert!(matches!(file.apply(&mut other), Err(Error::Weights(_))));
    }
}
