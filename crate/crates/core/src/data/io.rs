//! Dataset file: magic `UAPD`, `u16` version, `u32` header length, JSON
//! header, then little-endian `f32` pixels (sample-major, row-major HWC) and
//! `i32` token ids (sample-major, caption-major, padded to `max_len`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attributes, Dataset, ImageTensor, PairedSample, SyntheticSpec, TokenSeq, Vocabulary};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"UAPD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: SyntheticSpec,
    vocabulary: Vocabulary,
    n_images: usize,
    shape: [usize; 3],
    captions_per_image: usize,
    max_len: usize,
    attributes: Vec<Attributes>,
}

pub(crate) fn write_dataset<W: Write>(ds: &Dataset, out: &mut W) -> Result<()> {
    let shape = ds.image_shape();
    let header = Header {
        spec: ds.spec.clone(),
        vocabulary: ds.vocab.clone(),
        n_images: ds.len(),
        shape: [shape.h, shape.w, shape.c],
        captions_per_image: ds.captions_per_image(),
        max_len: ds.spec.max_len,
        attributes: ds.samples.iter().map(|s| s.attributes.clone()).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for s in &ds.samples {
        for v in s.image.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    for s in &ds.samples {
        for c in &s.captions {
            for &id in &c.ids {
                out.write_all(&(id as i32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let magic = read_exact(r, 4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad dataset magic {magic:?}")));
    }
    let version = u16::from_le_bytes(read_exact(r, 2, "version")?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let len = u32::from_le_bytes(read_exact(r, 4, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&read_exact(r, len, "header")?)
        .map_err(|e| Error::Format(format!("corrupt dataset header: {e}")))?;
    let vocab = header.vocabulary.rebuild_index()?;
    let spec = header.spec;
    let shape = spec.image_shape();
    if [shape.h, shape.w, shape.c] != header.shape
        || header.n_images != spec.n_images
        || header.captions_per_image != spec.captions_per_image
        || header.max_len != spec.max_len
        || header.attributes.len() != header.n_images
    {
        return Err(Error::Format("dataset header fields disagree".into()));
    }
    let n = header.n_images;
    let k = header.captions_per_image;
    let pixel_bytes = read_exact(r, n * shape.len() * 4, "pixel payload")?;
    let token_bytes = read_exact(r, n * k * header.max_len * 4, "token payload")?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after token payload".into()));
    }

    let mut pixels = pixel_bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    let mut tokens = token_bytes.chunks_exact(4).map(|b| i32::from_le_bytes(b.try_into().unwrap()));
    let mut samples = Vec::with_capacity(n);
    for (i, attributes) in header.attributes.into_iter().enumerate() {
        let data: Vec<f32> = pixels.by_ref().take(shape.len()).collect();
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Format(format!("image {i} has pixels outside [0,1]")));
        }
        let image = ImageTensor::from_vec(shape, data)?;
        let mut captions = Vec::with_capacity(k);
        for _ in 0..k {
            let ids = tokens
                .by_ref()
                .take(header.max_len)
                .map(|t| {
                    u32::try_from(t)
                        .ok()
                        .filter(|&id| (id as usize) < vocab.len())
                        .ok_or_else(|| Error::Format(format!("token id {t} outside the vocabulary")))
                })
                .collect::<Result<Vec<u32>>>()?;
            captions.push(TokenSeq::from_padded(ids));
        }
        samples.push(PairedSample { image, captions, image_id: i as u32, attributes });
    }
    Ok(Dataset { spec, vocab, samples })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    read_dataset(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn bytes() -> Vec<u8> {
        let ds = generate_dataset(&SyntheticSpec::dataset_a(3, 2)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        buf
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut b = bytes();
        b[0] = b'X';
        assert!(matches!(read_dataset(&mut b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let b = bytes();
        let cut = &b[..b.len() - 3];
        assert!(matches!(read_dataset(&mut &cut[..]), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_header_is_a_format_error() {
        let mut b = bytes();
        b[12] = b'#';
        assert!(matches!(read_dataset(&mut b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn out_of_range_token_is_a_format_error() {
        let mut b = bytes();
        let n = b.len();
        b[n - 4..].copy_from_slice(&999i32.to_le_bytes());
        assert!(matches!(read_dataset(&mut b.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut b = bytes();
        b.push(0);
        assert!(matches!(read_dataset(&mut b.as_slice()), Err(Error::Format(_))));
    }
}
