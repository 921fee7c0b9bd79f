//! `.vol` and `.xry` binary formats (all integers and floats little-endian).
//!
//! ```text
//! .vol  "XCTV" | u32 version | u32 D | u32 H | u32 W | f32 * D*H*W (W fastest)
//! .xry  "XCTX" | u32 version | u32 H | u32 W | u8 style | f32 * H*W
//! ```

use std::fs;
use std::path::Path;

use super::{StyleTag, Volume, XrayImage};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"XCTV";
pub const XRAY_MAGIC: &[u8; 4] = b"XCTX";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                field,
                format!(
                    "truncated: need {} bytes at offset {}, {} remain",
                    n,
                    self.pos,
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::format(
                "magic",
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(field, "element count overflows"))?;
        let raw = self.take(bytes, field)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(
                "version",
                format!("unsupported version {v}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                "trailer",
                format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn dim_u32(d: usize) -> u32 {
    u32::try_from(d).expect("dimension fits in u32")
}

pub fn volume_to_bytes(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + v.len() * 4);
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for d in v.dims() {
        out.extend_from_slice(&dim_u32(d).to_le_bytes());
    }
    push_f32s(&mut out, v.voxels());
    out
}

pub fn volume_from_bytes(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(buf);
    r.magic(VOLUME_MAGIC)?;
    r.version()?;
    let dims = [
        r.u32("dims")? as usize,
        r.u32("dims")? as usize,
        r.u32("dims")? as usize,
    ];
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::format("dims", "voxel count overflows"))?;
    let voxels = r.f32s(n, "voxels")?;
    r.finish()?;
    Volume::new(dims, voxels).map_err(|e| Error::format("voxels", e.to_string()))
}

pub fn xray_to_bytes(x: &XrayImage) -> Vec<u8> {
    let [h, w] = x.dims();
    let mut out = Vec::with_capacity(17 + h * w * 4);
    out.extend_from_slice(XRAY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(h).to_le_bytes());
    out.extend_from_slice(&dim_u32(w).to_le_bytes());
    out.push(x.style().code());
    push_f32s(&mut out, x.pixels());
    out
}

pub fn xray_from_bytes(buf: &[u8]) -> Result<XrayImage> {
    let mut r = Reader::new(buf);
    r.magic(XRAY_MAGIC)?;
    r.version()?;
    let h = r.u32("dims")? as usize;
    let w = r.u32("dims")? as usize;
    let code = r.u8("style_tag")?;
    let style = StyleTag::from_code(code)
        .ok_or_else(|| Error::format("style_tag", format!("unknown style tag {code}")))?;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::format("dims", "pixel count overflows"))?;
    let pixels = r.f32s(n, "pixels")?;
    r.finish()?;
    XrayImage::new([h, w], pixels, style).map_err(|e| Error::format("pixels", e.to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &volume_to_bytes(v))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    volume_from_bytes(&read(path.as_ref())?)
}

pub fn save_xray(x: &XrayImage, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &xray_to_bytes(x))
}

pub fn load_xray(path: impl AsRef<Path>) -> Result<XrayImage> {
    xray_from_bytes(&read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Volume::new(dims, (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn volume_roundtrip_8_cubed() {
        let v = random_volume(3, [8, 8, 8]);
        let bytes = volume_to_bytes(&v);
        assert_eq!(bytes.len(), 20 + 512 * 4);
        let back = volume_from_bytes(&bytes).unwrap();
        assert_eq!(volume_to_bytes(&back), bytes);
        assert_eq!(back, v);
    }

    #[test]
    fn bad_magic_is_reported() {
        let mut bytes = volume_to_bytes(&random_volume(1, [2, 2, 2]));
        bytes[..4].copy_from_slice(b"XXXX");
        let err = volume_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        assert!(matches!(err, Error::Format { field: "magic", .. }));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut bytes = volume_to_bytes(&random_volume(1, [2, 2, 2]));
        bytes.truncate(bytes.len() - 4);
        let err = volume_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { field: "voxels", .. }), "{err}");
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn wrong_version_and_trailing_bytes() {
        let v = random_volume(2, [2, 2, 2]);
        let mut bytes = volume_to_bytes(&v);
        bytes[4] = 9;
        assert!(matches!(
            volume_from_bytes(&bytes),
            Err(Error::Format { field: "version", .. })
        ));
        let mut bytes = volume_to_bytes(&v);
        bytes.push(0);
        assert!(matches!(
            volume_from_bytes(&bytes),
            Err(Error::Format { field: "trailer", .. })
        ));
    }

    #[test]
    fn xray_unknown_style_rejected() {
        let x = XrayImage::new([2, 3], vec![0.25; 6], StyleTag::Shifted).unwrap();
        let mut bytes = xray_to_bytes(&x);
        assert_eq!(bytes[16], 1);
        bytes[16] = 4;
        assert!(matches!(
            xray_from_bytes(&bytes),
            Err(Error::Format { field: "style_tag", .. })
        ));
    }

    #[test]
    fn files_on_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(9, [3, 4, 5]);
        save_volume(&v, dir.path().join("a.vol")).unwrap();
        assert_eq!(load_volume(dir.path().join("a.vol")).unwrap(), v);
        let x = XrayImage::new([4, 5], vec![0.5; 20], StyleTag::Drr).unwrap();
        save_xray(&x, dir.path().join("a.xry")).unwrap();
        assert_eq!(load_xray(dir.path().join("a.xry")).unwrap(), x);
        assert!(matches!(
            load_volume(dir.path().join("missing.vol")),
            Err(Error::Io { .. })
        ));
    }

    proptest! {
        #[test]
        fn volume_bytes_roundtrip(d in 2usize..6, h in 2usize..6, w in 2usize..6, seed in any::<u64>()) {
            let v = random_volume(seed, [d, h, w]);
            let bytes = volume_to_bytes(&v);
            let back = volume_from_bytes(&bytes).unwrap();
            prop_assert_eq!(volume_to_bytes(&back), bytes);
        }

        #[test]
        fn xray_bytes_roundtrip(h in 1usize..8, w in 1usize..8, style in 0u8..2, seed in any::<u64>()) {
            let v = random_volume(seed, [2, h.max(2), w.max(2)]);
            let px: Vec<f32> = v.voxels()[..h * w].to_vec();
            let x = XrayImage::new([h, w], px, StyleTag::from_code(style).unwrap()).unwrap();
            let bytes = xray_to_bytes(&x);
            prop_assert_eq!(xray_from_bytes(&bytes).unwrap(), x);
        }
    }
}
