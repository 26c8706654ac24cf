//! On-disk formats: binary grid images ("CTG1") and sinograms ("CTS1") with
//! FNV-1a payload checksums, plus CSV mirrors for plotting. All binary
//! fields are little-endian; CSV carries full f64 round-trip precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::boundary::{BoundaryLayout, BoundarySinogram, DomainTag};
use crate::error::{Error, Result};
use crate::grid::{GridImage, SpatialGrid};

pub const GRID_MAGIC: &[u8; 4] = b"CTG1";
pub const SINOGRAM_MAGIC: &[u8; 4] = b"CTS1";

/// 64-bit FNV-1a over a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

fn f64_at(bytes: &[u8], idx: usize) -> f64 {
    f64::from_le_bytes(bytes[idx * 8..idx * 8 + 8].try_into().unwrap())
}

/// Write a grid image: magic, u32 nx, u32 ny, f64 bounds, row-major f64
/// payload, trailing u64 FNV-1a checksum of the payload bytes.
pub fn write_grid_image(path: &Path, img: &GridImage<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(GRID_MAGIC)?;
    w.write_all(&(img.grid.nx as u32).to_le_bytes())?;
    w.write_all(&(img.grid.ny as u32).to_le_bytes())?;
    let mut header = Vec::with_capacity(32);
    push_f64(&mut header, img.grid.x_min);
    push_f64(&mut header, img.grid.x_max);
    push_f64(&mut header, img.grid.y_min);
    push_f64(&mut header, img.grid.y_max);
    w.write_all(&header)?;
    let mut payload = Vec::with_capacity(img.values.len() * 8);
    for &v in &img.values {
        push_f64(&mut payload, v);
    }
    w.write_all(&payload)?;
    w.write_all(&fnv1a64(&payload).to_le_bytes())?;
    Ok(())
}

pub fn read_grid_image(path: &Path) -> Result<GridImage<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact(&mut r, 4)?;
    if magic != GRID_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected CTG1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let dims = read_exact(&mut r, 8)?;
    let nx = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
    let ny = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
    if nx < 2 || ny < 2 || nx * ny > 1 << 28 {
        return Err(Error::Format(format!("implausible dimensions {nx} x {ny}")));
    }
    let bounds = read_exact(&mut r, 32)?;
    let payload = read_exact(&mut r, nx * ny * 8)?;
    let checksum = read_exact(&mut r, 8)?;
    let expect = u64::from_le_bytes(checksum.try_into().unwrap());
    let got = fnv1a64(&payload);
    if expect != got {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {expect:#018x}, computed {got:#018x}"
        )));
    }
    let grid = SpatialGrid::new(
        [f64_at(&bounds, 0), f64_at(&bounds, 2)],
        [f64_at(&bounds, 1), f64_at(&bounds, 3)],
        nx,
        ny,
    );
    let values = (0..nx * ny).map(|i| f64_at(&payload, i)).collect();
    GridImage::new(grid, values)
}

/// Write a sinogram: magic, u32 node count, per node
/// (arc-length, direction angle, dxi weight, value), trailing checksum over
/// the node records.
pub fn write_sinogram(path: &Path, sino: &BoundarySinogram<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SINOGRAM_MAGIC)?;
    w.write_all(&(sino.values.len() as u32).to_le_bytes())?;
    let mut payload = Vec::with_capacity(sino.values.len() * 32);
    for (node, &v) in sino.layout.nodes.iter().zip(&sino.values) {
        push_f64(&mut payload, node.arc);
        push_f64(&mut payload, node.psi);
        push_f64(&mut payload, node.weight);
        push_f64(&mut payload, v);
    }
    w.write_all(&payload)?;
    w.write_all(&fnv1a64(&payload).to_le_bytes())?;
    Ok(())
}

/// Raw sinogram records as stored on disk.
#[derive(Clone, Debug)]
pub struct SinogramRecords {
    pub arc: Vec<f64>,
    pub psi: Vec<f64>,
    pub weight: Vec<f64>,
    pub value: Vec<f64>,
}

pub fn read_sinogram(path: &Path) -> Result<SinogramRecords> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = read_exact(&mut r, 4)?;
    if magic != SINOGRAM_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected CTS1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count_bytes = read_exact(&mut r, 4)?;
    let count = u32::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
    if count == 0 || count > 1 << 26 {
        return Err(Error::Format(format!("implausible node count {count}")));
    }
    let payload = read_exact(&mut r, count * 32)?;
    let checksum = read_exact(&mut r, 8)?;
    let expect = u64::from_le_bytes(checksum.try_into().unwrap());
    let got = fnv1a64(&payload);
    if expect != got {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {expect:#018x}, computed {got:#018x}"
        )));
    }
    let mut out = SinogramRecords {
        arc: Vec::with_capacity(count),
        psi: Vec::with_capacity(count),
        weight: Vec::with_capacity(count),
        value: Vec::with_capacity(count),
    };
    for i in 0..count {
        out.arc.push(f64_at(&payload, 4 * i));
        out.psi.push(f64_at(&payload, 4 * i + 1));
        out.weight.push(f64_at(&payload, 4 * i + 2));
        out.value.push(f64_at(&payload, 4 * i + 3));
    }
    Ok(out)
}

/// Bind stored records to a freshly built layout, verifying that the node
/// coordinates agree (the file does not carry the full geometry).
pub fn attach_records(
    records: SinogramRecords,
    layout: Arc<BoundaryLayout<f64>>,
) -> Result<BoundarySinogram<f64>> {
    if records.value.len() != layout.len() {
        return Err(Error::NodeSetMismatch {
            expected: layout.len(),
            got: records.value.len(),
        });
    }
    let tol = 1e-9 * (1.0 + layout.perimeter.abs());
    for (i, node) in layout.nodes.iter().enumerate() {
        if (records.arc[i] - node.arc).abs() > tol
            || (records.psi[i] - node.psi).abs() > 1e-9
            || (records.weight[i] - node.weight).abs() > tol
        {
            return Err(Error::Format(format!(
                "sinogram node {i} does not match the configured geometry \
                 (arc {} vs {}, angle {} vs {})",
                records.arc[i], node.arc, records.psi[i], node.psi
            )));
        }
    }
    Ok(BoundarySinogram {
        layout,
        values: records.value,
        domain_tag: DomainTag::Enclosing,
    })
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV mirror of a grid image: `ix,iy,x,y,value` with LF endings.
pub fn write_grid_image_csv(path: &Path, img: &GridImage<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"ix,iy,x,y,value\n")?;
    for (ix, iy, x) in img.grid.node_iter() {
        let line = format!(
            "{ix},{iy},{},{},{}\n",
            fmt17(x[0]),
            fmt17(x[1]),
            fmt17(img.values[img.grid.index(ix, iy)])
        );
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// CSV mirror of a sinogram: `arc_length,angle,weight,value`.
pub fn write_sinogram_csv(path: &Path, sino: &BoundarySinogram<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"arc_length,angle,weight,value\n")?;
    for (node, &v) in sino.layout.nodes.iter().zip(&sino.values) {
        let line = format!(
            "{},{},{},{}\n",
            fmt17(node.arc),
            fmt17(node.psi),
            fmt17(node.weight),
            fmt17(v)
        );
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Residual-history CSV: `iteration,residual`.
pub fn write_residuals_csv(path: &Path, residuals: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(b"iteration,residual\n")?;
    for (i, &r) in residuals.iter().enumerate() {
        w.write_all(format!("{i},{}\n", fmt17(r)).as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::boundary_measure_nodes;
    use crate::geometry::{Domain, EnergyShell, ForceField};

    #[test]
    fn fnv1a_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn grid_image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        let grid = SpatialGrid::new([-1.3, -1.0], [1.3, 1.0], 17, 13);
        let img = GridImage::from_fn(grid, |x| 0.3 * x[0] - x[1] * x[1]);
        write_grid_image(&path, &img).unwrap();
        let back = read_grid_image(&path).unwrap();
        assert_eq!(back.values, img.values);
        assert!(back.grid.same_shape(&img.grid));
    }

    #[test]
    fn grid_image_checksum_detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.bin");
        let grid = SpatialGrid::new([0.0, 0.0], [1.0, 1.0], 4, 4);
        let img = GridImage::from_fn(grid, |x| x[0]);
        write_grid_image(&path, &img).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n / 2] ^= 0xff;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_grid_image(&path), Err(Error::Format(_))));
    }

    #[test]
    fn sinogram_roundtrip_and_attach() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sino.bin");
        let dom = Domain::<f64>::disc([0.0, 0.0], 1.3);
        let force = ForceField::zero();
        let shell = EnergyShell::new(0.5, &force, &dom).unwrap();
        let layout = Arc::new(boundary_measure_nodes(&dom, &force, &shell, 12, 6).unwrap());
        let mut sino = BoundarySinogram::zeros(layout.clone(), DomainTag::Enclosing);
        for (i, v) in sino.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        write_sinogram(&path, &sino).unwrap();
        let records = read_sinogram(&path).unwrap();
        let back = attach_records(records, layout.clone()).unwrap();
        assert_eq!(back.values, sino.values);

        // A layout with different counts is rejected.
        let other = Arc::new(boundary_measure_nodes(&dom, &force, &shell, 12, 8).unwrap());
        let records = read_sinogram(&path).unwrap();
        assert!(attach_records(records, other).is_err());
    }
}
