//! Binary cohort container. All integers little-endian.
//!
//! ```text
//! header   "ARGC" u32:version u32:slides u32:d u32:classes u32:crc32(previous 20 bytes)
//! slide    u32:label u32:patches patch* u32:crc32(slide bytes before it)
//! patch    u32:row u32:col f64[d]:macro f64[d]:meso u32:nuclei nucleus*
//! nucleus  f64:x f64:y u8:class u16:vertices (f64 f64)* u16:width u16:height u8[w*h]
//! ```
//!
//! Slide, patch and nucleus ids are their positions in the file.

use std::fs;
use std::path::Path;

use super::{Cohort, PatchRecord, SlideRecord};
use crate::nucfeat::{GrayTile, Nucleus, NucleusClass};
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ARGC";
pub const FORMAT_VERSION: u32 = 1;
pub(crate) const HEADER_LEN: usize = 24;

pub(crate) fn nucleus_len(vertices: usize, width: usize, height: usize) -> usize {
    16 + 1 + 2 + 16 * vertices + 4 + width * height
}

pub(crate) fn patch_len(d: usize, nuclei_bytes: usize) -> usize {
    12 + 16 * d + nuclei_bytes
}

pub(crate) fn slide_overhead() -> usize {
    12
}

/// Exact size of the encoding of `cohort`.
pub fn encoded_len(cohort: &Cohort) -> usize {
    HEADER_LEN
        + cohort
            .slides
            .iter()
            .map(|s| {
                slide_overhead()
                    + s.patches
                        .iter()
                        .map(|p| {
                            let nuclei: usize = p
                                .nuclei
                                .iter()
                                .map(|n| nucleus_len(n.contour.len(), n.tile.width, n.tile.height))
                                .sum();
                            patch_len(cohort.d, nuclei)
                        })
                        .sum::<usize>()
            })
            .sum::<usize>()
}

fn u16_field(value: usize, what: &str, offset: usize) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::Format {
        offset: offset as u64,
        reason: format!("{what} {value} does not fit in u16"),
    })
}

fn u32_field(value: usize, what: &str, offset: usize) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Format {
        offset: offset as u64,
        reason: format!("{what} {value} does not fit in u32"),
    })
}

pub fn write_cohort_bytes(cohort: &Cohort) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(cohort));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_field(cohort.slides.len(), "slide count", 8)?.to_le_bytes());
    out.extend_from_slice(&u32_field(cohort.d, "width", 12)?.to_le_bytes());
    out.extend_from_slice(&u32_field(cohort.classes, "class count", 16)?.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());

    for slide in &cohort.slides {
        let start = out.len();
        out.extend_from_slice(&u32_field(slide.label, "label", start)?.to_le_bytes());
        out.extend_from_slice(&u32_field(slide.patches.len(), "patch count", out.len())?.to_le_bytes());
        for p in &slide.patches {
            if p.macro_.len() != cohort.d || p.meso.len() != cohort.d {
                return Err(Error::Format {
                    offset: out.len() as u64,
                    reason: format!("patch {} embedding width differs from {}", p.patch_id, cohort.d),
                });
            }
            out.extend_from_slice(&p.row.to_le_bytes());
            out.extend_from_slice(&p.col.to_le_bytes());
            for v in p.macro_.iter().chain(&p.meso) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&u32_field(p.nuclei.len(), "nucleus count", out.len())?.to_le_bytes());
            for n in &p.nuclei {
                out.extend_from_slice(&n.centroid[0].to_le_bytes());
                out.extend_from_slice(&n.centroid[1].to_le_bytes());
                out.push(n.class.code());
                out.extend_from_slice(&u16_field(n.contour.len(), "vertex count", out.len())?.to_le_bytes());
                for v in &n.contour {
                    out.extend_from_slice(&v[0].to_le_bytes());
                    out.extend_from_slice(&v[1].to_le_bytes());
                }
                out.extend_from_slice(&u16_field(n.tile.width, "tile width", out.len())?.to_le_bytes());
                out.extend_from_slice(&u16_field(n.tile.height, "tile height", out.len())?.to_le_bytes());
                out.extend_from_slice(&n.tile.pixels);
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    Ok(out)
}

pub fn write_cohort(path: &Path, cohort: &Cohort) -> Result<()> {
    fs::write(path, write_cohort_bytes(cohort)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, offset: usize, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: offset as u64,
            reason: reason.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(self.pos, format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn finite(&mut self, what: &str) -> Result<f64> {
        let at = self.pos;
        let v = self.f64(what)?;
        if !v.is_finite() {
            return self.fail(at, format!("non-finite {what}"));
        }
        Ok(v)
    }

    fn crc(&mut self, start: usize, what: &str) -> Result<()> {
        let computed = crc32fast::hash(&self.bytes[start..self.pos]);
        let at = self.pos;
        let stored = self.u32(what)?;
        if stored != computed {
            return self.fail(at, format!("{what} checksum mismatch (stored {stored:08x}, computed {computed:08x})"));
        }
        Ok(())
    }
}

pub fn read_cohort_bytes(bytes: &[u8]) -> Result<Cohort> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return r.fail(0, "bad magic bytes");
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return r.fail(4, format!("unsupported version {version}, expected {FORMAT_VERSION}"));
    }
    let slides = r.u32("slide count")? as usize;
    let d = r.u32("width")? as usize;
    let classes = r.u32("class count")? as usize;
    r.crc(0, "header")?;
    if d == 0 {
        return r.fail(12, "embedding width is zero");
    }
    if classes < 2 {
        return r.fail(16, format!("class count {classes} is below 2"));
    }

    let mut out = Vec::with_capacity(slides.min(1 << 16));
    for slide_id in 0..slides {
        let start = r.pos;
        let label = r.u32("label")? as usize;
        if label >= classes {
            return r.fail(start, format!("slide {slide_id} label {label} out of range"));
        }
        let at = r.pos;
        let n_patches = r.u32("patch count")? as usize;
        if n_patches == 0 {
            return r.fail(at, format!("slide {slide_id} has no patches"));
        }
        let mut patches = Vec::with_capacity(n_patches.min(1 << 16));
        for patch_id in 0..n_patches {
            let row = r.u32("patch row")?;
            let col = r.u32("patch col")?;
            let mut embed = || (0..d).map(|_| r.finite("embedding value")).collect::<Result<Vec<f64>>>();
            let macro_ = embed()?;
            let meso = embed()?;
            let n_nuclei = r.u32("nucleus count")? as usize;
            let mut nuclei = Vec::with_capacity(n_nuclei.min(1 << 16));
            for id in 0..n_nuclei {
                let centroid = [r.finite("centroid")?, r.finite("centroid")?];
                let at = r.pos;
                let code = r.u8("nucleus class")?;
                let Some(class) = NucleusClass::from_code(code) else {
                    return r.fail(at, format!("unknown nucleus class code {code}"));
                };
                let at = r.pos;
                let m = r.u16("vertex count")? as usize;
                if m < 3 {
                    return r.fail(at, format!("contour with {m} vertices"));
                }
                let contour = (0..m)
                    .map(|_| Ok([r.finite("vertex")?, r.finite("vertex")?]))
                    .collect::<Result<Vec<_>>>()?;
                let at = r.pos;
                let width = r.u16("tile width")? as usize;
                let height = r.u16("tile height")? as usize;
                if width == 0 || height == 0 {
                    return r.fail(at, "empty intensity tile");
                }
                let pixels = r.take(width * height, "tile pixels")?.to_vec();
                nuclei.push(Nucleus {
                    id: id as u32,
                    centroid,
                    contour,
                    class,
                    tile: GrayTile { width, height, pixels },
                });
            }
            patches.push(PatchRecord {
                patch_id: patch_id as u32,
                row,
                col,
                macro_,
                meso,
                nuclei,
            });
        }
        r.crc(start, "slide")?;
        out.push(SlideRecord {
            slide_id: slide_id as u32,
            label,
            patches,
        });
    }
    if r.pos != bytes.len() {
        return r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(Cohort {
        d,
        classes,
        slides: out,
    })
}

pub fn read_cohort(path: &Path) -> Result<Cohort> {
    read_cohort_bytes(&fs::read(path)?)
}
