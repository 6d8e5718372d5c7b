//! Little-endian binary checkpoint.
//!
//! ```text
//! "MELR"                      4 bytes
//! version                     u16 (= 1)
//! mode n r_mini d_in d_out    u32 each (mode: 0 = lora, 1 = melora)
//! alpha dropout_p             f64 each
//! seed                        u64
//! for each mini i in 0..n:
//!     A_i  (r_mini x d_in/n)  f64, row-major
//!     B_i  (d_out/n x r_mini) f64, row-major
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::adapters::{check_divisible, Adapter, AdapterMode, LoraAdapter, MeloraAdapter};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MELR";
pub const CHECKPOINT_VERSION: u16 = 1;

// Refuse to allocate absurd tensors from a corrupt header.
const MAX_ENTRIES: u64 = 1 << 28;

pub fn write_checkpoint<W: Write>(adapter: &Adapter, mut out: W) -> Result<()> {
    let mode: u32 = match adapter.mode() {
        AdapterMode::Lora => 0,
        AdapterMode::Melora => 1,
    };
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for field in [
        mode,
        to_u32(adapter.n())?,
        to_u32(adapter.r_mini())?,
        to_u32(adapter.d_in())?,
        to_u32(adapter.d_out())?,
    ] {
        out.write_all(&field.to_le_bytes())?;
    }
    out.write_all(&adapter.alpha().to_le_bytes())?;
    out.write_all(&adapter.dropout_p().to_le_bytes())?;
    out.write_all(&adapter.seed().to_le_bytes())?;
    for block in adapter.blocks() {
        for m in [block.a(), block.b()] {
            for v in m.as_slice() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Adapter> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(read_array(&mut input)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mode = read_u32(&mut input)?;
    let n = read_u32(&mut input)? as usize;
    let r_mini = read_u32(&mut input)? as usize;
    let d_in = read_u32(&mut input)? as usize;
    let d_out = read_u32(&mut input)? as usize;
    let alpha = f64::from_le_bytes(read_array(&mut input)?);
    let dropout_p = f64::from_le_bytes(read_array(&mut input)?);
    let seed = u64::from_le_bytes(read_array(&mut input)?);

    let mode = match mode {
        0 => AdapterMode::Lora,
        1 => AdapterMode::Melora,
        other => return Err(Error::Format(format!("unknown adapter mode {other}"))),
    };
    if mode == AdapterMode::Lora && n != 1 {
        return Err(Error::Format(format!("lora checkpoint with n = {n}")));
    }
    if n == 0 || r_mini == 0 || d_in == 0 || d_out == 0 {
        return Err(Error::Format("zero dimension in header".into()));
    }
    check_divisible(d_in, d_out, n).map_err(|e| Error::Format(e.to_string()))?;
    let (bi, bo) = (d_in / n, d_out / n);
    let total = (r_mini as u64) * ((d_in + d_out) as u64);
    if total > MAX_ENTRIES {
        return Err(Error::Format(format!("header declares {total} entries")));
    }

    let mut minis = Vec::with_capacity(n);
    for _ in 0..n {
        let a = read_matrix(&mut input, r_mini, bi)?;
        let b = read_matrix(&mut input, bo, r_mini)?;
        minis.push(LoraAdapter::from_parts(a, b, alpha, dropout_p).map_err(|e| Error::Format(e.to_string()))?);
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }

    let mut adapter = match mode {
        AdapterMode::Lora => Adapter::Lora(minis.pop().expect("n = 1")),
        AdapterMode::Melora => Adapter::Melora(MeloraAdapter::from_minis(minis)?),
    };
    adapter.set_seed(seed);
    Ok(adapter)
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so a failed write never leaves a partial checkpoint.
pub fn save_checkpoint(adapter: &Adapter, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(adapter, &mut buf)?;
    crate::cli::write_atomic(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Adapter> {
    let bytes = fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::UnexpectedEof
        } else {
            Error::Io(e)
        }
    })
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(input, &mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(input)?))
}

fn read_matrix<R: Read>(input: &mut R, rows: usize, cols: usize) -> Result<Matrix> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(f64::from_le_bytes(read_array(input)?));
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::InitOptions;

    fn sample(mode: AdapterMode, n: usize) -> Adapter {
        let opts = InitOptions {
            alpha: 16.0,
            dropout_p: 0.05,
            init_std: None,
        };
        let mut a = Adapter::init(mode, 8, 12, n, 2, &opts, 99).unwrap();
        a.randomize_b(1.0, 1);
        a
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let ad = sample(AdapterMode::Melora, 2);
        let mut buf = Vec::new();
        write_checkpoint(&ad, &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"MELR");
        assert_eq!(&buf[4..6], &[1, 0]);
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        assert_eq!(
            [u32_at(6), u32_at(10), u32_at(14), u32_at(18), u32_at(22)],
            [1, 2, 2, 8, 12]
        );
        assert_eq!(f64::from_le_bytes(buf[26..34].try_into().unwrap()), 16.0);
        assert_eq!(f64::from_le_bytes(buf[34..42].try_into().unwrap()), 0.05);
        assert_eq!(u64::from_le_bytes(buf[42..50].try_into().unwrap()), 99);
        // first entry of A_0 follows the header directly
        let first = f64::from_le_bytes(buf[50..58].try_into().unwrap());
        assert_eq!(first, ad.blocks()[0].a().get(0, 0));
        // A_1 starts after A_0 (2x4) and B_0 (6x2)
        let a1 = 50 + 8 * (8 + 12);
        assert_eq!(
            f64::from_le_bytes(buf[a1..a1 + 8].try_into().unwrap()),
            ad.blocks()[1].a().get(0, 0)
        );
        assert_eq!(buf.len(), 50 + 8 * 2 * (8 + 12));
    }

    #[test]
    fn round_trip_both_modes() {
        for (mode, n) in [
            (AdapterMode::Lora, 1),
            (AdapterMode::Melora, 2),
            (AdapterMode::Melora, 4),
        ] {
            let ad = sample(mode, n);
            let mut buf = Vec::new();
            write_checkpoint(&ad, &mut buf).unwrap();
            assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), ad);
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let ad = sample(AdapterMode::Melora, 2);
        let mut buf = Vec::new();
        write_checkpoint(&ad, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(Error::BadMagic(_))));

        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::UnsupportedVersion(2))
        ));

        for cut in [3, 20, 49, buf.len() - 1] {
            let err = read_checkpoint(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::UnexpectedEof), "cut {cut}: {err}");
            assert_eq!(err.to_string(), "checkpoint: unexpected end of file");
        }

        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_checkpoint(long.as_slice()), Err(Error::Format(_))));

        let mut bad_mode = buf;
        bad_mode[6] = 7;
        assert!(matches!(read_checkpoint(bad_mode.as_slice()), Err(Error::Format(_))));
    }
}
