use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Volume;
use crate::error::{Error, Result};
use crate::projection::Plane;

/// Writes one binary PGM (`P5`, maxval 255) per slice orthogonal to `plane`'s
/// collapsed axis, named `slice_%04d.pgm`. Rows and columns follow the
/// remaining volume axes in order.
pub fn export_slices(v: &Volume, plane: Plane, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dims = v.dims();
    let axis = plane.axis();
    let rest: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (rows, cols) = (dims[rest[0]], dims[rest[1]]);
    let mut paths = Vec::with_capacity(dims[axis]);
    for s in 0..dims[axis] {
        let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
        for r in 0..rows {
            for c in 0..cols {
                let mut idx = [0usize; 3];
                idx[axis] = s;
                idx[rest[0]] = r;
                idx[rest[1]] = c;
                let value = v.get(idx[0], idx[1], idx[2]);
                bytes.push((value * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        let path = out_dir.join(format!("slice_{s:04}.pgm"));
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
