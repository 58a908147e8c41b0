//! State dumps: a `.npy` array of complex128 samples plus a `.json` sidecar holding the grid.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::grid::{GridSpec, PhysicalState};
use crate::{Complex64, Error, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

#[derive(Serialize, Deserialize)]
struct Sidecar {
    grid: GridSpec,
    /// Row-major axis order of the array: v axes then z axes.
    shape: Vec<usize>,
    hermite_cutoff: Option<usize>,
}

fn shape_of(grid: &GridSpec) -> Vec<usize> {
    let mut s = vec![grid.n_v; grid.dim_v()];
    s.extend(std::iter::repeat_n(grid.n_z, grid.p));
    s
}

pub fn encode_npy(shape: &[usize], values: &[Complex64]) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let tuple = if dims.len() == 1 { format!("({},)", dims[0]) } else { format!("({})", dims.join(", ")) };
    let mut header = format!("{{'descr': '<c16', 'fortran_order': False, 'shape': {tuple}, }}");
    // pad so that the data starts on a 64-byte boundary, header ends in '\n'
    let unpadded = MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 16 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for c in values {
        out.extend_from_slice(&c.re.to_le_bytes());
        out.extend_from_slice(&c.im.to_le_bytes());
    }
    out
}

pub fn decode_npy(bytes: &[u8]) -> Result<(Vec<usize>, Vec<Complex64>)> {
    let bad = |m: &str| Error::Config(format!("npy: {m}"));
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("missing magic"));
    }
    let (hlen, start) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12),
        _ => return Err(bad("unsupported version")),
    };
    let header = std::str::from_utf8(bytes.get(start..start + hlen).ok_or_else(|| bad("truncated header"))?).map_err(|_| bad("header not utf-8"))?;
    if !header.contains("'descr': '<c16'") {
        return Err(bad("dtype must be <c16"));
    }
    if header.contains("'fortran_order': True") {
        return Err(bad("fortran order not supported"));
    }
    let open = header.find("'shape': (").ok_or_else(|| bad("no shape"))? + "'shape': (".len();
    let close = open + header[open..].find(')').ok_or_else(|| bad("no shape"))?;
    let shape = header[open..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("shape entry")))
        .collect::<Result<Vec<_>>>()?;
    let count: usize = shape.iter().product();
    let data = &bytes[start + hlen..];
    if data.len() != 16 * count {
        return Err(bad(&format!("expected {} data bytes, found {}", 16 * count, data.len())));
    }
    let values = data
        .chunks_exact(16)
        .map(|c| Complex64::new(f64::from_le_bytes(c[..8].try_into().unwrap()), f64::from_le_bytes(c[8..].try_into().unwrap())))
        .collect();
    Ok((shape, values))
}

/// Writes `<stem>.npy` and `<stem>.json`.
pub fn save_state(state: &PhysicalState, stem: &Path, hermite_cutoff: Option<usize>) -> Result<()> {
    let shape = shape_of(&state.grid);
    fs::write(stem.with_extension("npy"), encode_npy(&shape, &state.values))?;
    let side = Sidecar { grid: state.grid.clone(), shape, hermite_cutoff };
    fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn load_state(stem: &Path) -> Result<PhysicalState> {
    let side: Sidecar = serde_json::from_str(&fs::read_to_string(stem.with_extension("json"))?)?;
    side.grid.validate()?;
    let (shape, values) = decode_npy(&fs::read(stem.with_extension("npy"))?)?;
    if shape != shape_of(&side.grid) || shape != side.shape {
        return Err(Error::Dimension(format!("array shape {shape:?} does not match the sidecar grid")));
    }
    let state = PhysicalState { grid: side.grid, values };
    state.check_finite()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::htype::GroupStructure;

    #[test]
    fn npy_header_layout() {
        let b = encode_npy(&[3], &[Complex64::new(1.0, -2.0); 3]);
        let hlen = u16::from_le_bytes([b[8], b[9]]) as usize;
        assert_eq!((10 + hlen) % 64, 0);
        assert_eq!(b[10 + hlen - 1], b'\n');
        let (s, v) = decode_npy(&b).unwrap();
        assert_eq!(s, vec![3]);
        assert_eq!(v[2], Complex64::new(1.0, -2.0));
        assert!(decode_npy(&b[..b.len() - 1]).is_err());
        assert!(decode_npy(b"NUMPY").is_err());
    }

    #[test]
    fn state_roundtrip_is_bit_exact() {
        let g = GroupStructure::heisenberg(1);
        let grid = GridSpec::new(&g, 3.0, 2.0, 8, 8).unwrap().with_offset(vec![5]).unwrap();
        let st = PhysicalState::from_fn(&grid, |v, z| Complex64::new(v[0] * 0.3 + z[0], v[1].sin() / 7.0));
        let dir = std::env::temp_dir().join(format!("htsim-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("state");
        save_state(&st, &stem, Some(12)).unwrap();
        let back = load_state(&stem).unwrap();
        assert_eq!(back.grid, st.grid);
        assert!(back.values.iter().zip(&st.values).all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits()));
        fs::remove_dir_all(&dir).unwrap();
    }
}
