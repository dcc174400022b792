//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json             generator config, scene count, image size, format version
//! <dir>/images/000000.pgm         binary P5, 8-bit, maxval 255
//! <dir>/annotations/000000.json   {"seed": .., "instances": [{cx, cy, a, b, theta, area_px}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{rasterize_with, sample_scenes, EllipseInstance, GenConfig, ImagePatch, Scene};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    scene_count: usize,
    width: usize,
    height: usize,
    generator: GenConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct Annotation {
    seed: u64,
    instances: Vec<EllipseInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub scenes: Vec<Scene>,
    pub images: Vec<ImagePatch>,
}

impl Dataset {
    /// `n` scenes of `master` rendered in memory.
    pub fn generate(config: &GenConfig, master: u64, n: usize) -> Result<Dataset> {
        let scenes = sample_scenes(config, master, n)?;
        let images = scenes.iter().map(|s| rasterize_with(s, &config.intensity)).collect();
        Ok(Dataset { config: config.clone(), scenes, images })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Subset by index, in the order given.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            config: self.config.clone(),
            scenes: indices.iter().map(|&i| self.scenes[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
        }
    }
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:06}.pgm"))
}

fn annotation_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("annotations").join(format!("{i:06}.json"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_pgm(img: &ImagePatch) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<ImagePatch> {
    let err = |m: &str| Error::data(path, m);
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated PGM header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ASCII PGM header"))?);
    }
    if tokens[0] != "P5" {
        return Err(err("not a binary (P5) PGM"));
    }
    let parse = |t: &str| t.parse::<usize>().map_err(|_| err("bad PGM header number"));
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let raster = bytes.get(pos + 1..).ok_or_else(|| err("missing raster"))?;
    if raster.len() != w * h {
        return Err(err(&format!("raster holds {} bytes, expected {}", raster.len(), w * h)));
    }
    Ok(ImagePatch { width: w, height: h, data: raster.iter().map(|&b| b as f64 / 255.0).collect() })
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

pub fn write_dataset(dir: &Path, config: &GenConfig, scenes: &[Scene], images: &[ImagePatch]) -> Result<()> {
    if scenes.len() != images.len() {
        return Err(Error::Dimension(format!("{} scenes but {} images", scenes.len(), images.len())));
    }
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION.to_string(),
        scene_count: scenes.len(),
        width: config.width,
        height: config.height,
        generator: config.clone(),
    };
    write_file(&dir.join("manifest.json"), &to_json(&manifest))?;
    for (i, (scene, img)) in scenes.iter().zip(images).enumerate() {
        if (img.width, img.height) != (config.width, config.height)
            || (scene.width, scene.height) != (config.width, config.height)
        {
            return Err(Error::Dimension(format!("scene {i} does not match the configured image size")));
        }
        write_file(&image_path(dir, i), &encode_pgm(img))?;
        let ann = Annotation { seed: scene.seed, instances: scene.instances.clone() };
        write_file(&annotation_path(dir, i), &to_json(&ann))?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(path, format!("cannot read: {e}")))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let manifest: Manifest =
        serde_json::from_slice(&read_file(&mpath)?).map_err(|e| Error::data(&mpath, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::data(&mpath, format!("unsupported format version {:?}", manifest.format_version)));
    }
    if (manifest.width, manifest.height) != (manifest.generator.width, manifest.generator.height) {
        return Err(Error::data(&mpath, "image size disagrees with generator config"));
    }
    for sub in ["images", "annotations"] {
        let p = dir.join(sub);
        let present = match fs::read_dir(&p) {
            Ok(entries) => entries.filter_map(|e| e.ok()).count(),
            Err(_) if manifest.scene_count == 0 => 0,
            Err(e) => return Err(Error::data(&p, format!("cannot list: {e}"))),
        };
        if present != manifest.scene_count {
            return Err(Error::data(
                &p,
                format!("manifest lists {} scenes, directory holds {present} files", manifest.scene_count),
            ));
        }
    }
    let mut scenes = Vec::with_capacity(manifest.scene_count);
    let mut images = Vec::with_capacity(manifest.scene_count);
    for i in 0..manifest.scene_count {
        let ipath = image_path(dir, i);
        let img = decode_pgm(&read_file(&ipath)?, &ipath)?;
        if (img.width, img.height) != (manifest.width, manifest.height) {
            return Err(Error::data(&ipath, "image size disagrees with manifest"));
        }
        let apath = annotation_path(dir, i);
        let ann: Annotation =
            serde_json::from_slice(&read_file(&apath)?).map_err(|e| Error::data(&apath, e.to_string()))?;
        scenes.push(Scene { width: manifest.width, height: manifest.height, seed: ann.seed, instances: ann.instances });
        images.push(img);
    }
    Ok(Dataset { config: manifest.generator, scenes, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{rasterize, sample_scenes};

    fn small() -> (GenConfig, Vec<Scene>, Vec<ImagePatch>) {
        let cfg = GenConfig::desk();
        let scenes = sample_scenes(&cfg, 3, 10).unwrap();
        let images = scenes.iter().map(rasterize).collect();
        (cfg, scenes, images)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, scenes, images) = small();
        write_dataset(dir.path(), &cfg, &scenes, &images).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, Dataset { config: cfg, scenes, images });
    }

    #[test]
    fn missing_annotation_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, scenes, images) = small();
        write_dataset(dir.path(), &cfg, &scenes, &images).unwrap();
        let victim = annotation_path(dir.path(), 4);
        fs::remove_file(&victim).unwrap();
        fs::write(dir.path().join("annotations").join("stray.txt"), b"x").unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Data { path, .. }) => assert_eq!(path, victim),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_count_mismatch_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, scenes, images) = small();
        write_dataset(dir.path(), &cfg, &scenes, &images).unwrap();
        fs::remove_file(image_path(dir.path(), 9)).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Data { .. })));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig::desk();
        write_dataset(dir.path(), &cfg, &[], &[]).unwrap();
        assert!(read_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn pgm_header_and_errors() {
        let img = ImagePatch { width: 2, height: 1, data: vec![0.0, 1.0] };
        let bytes = encode_pgm(&img);
        assert_eq!(bytes, b"P5\n2 1\n255\n\x00\xff");
        let p = Path::new("x.pgm");
        assert_eq!(decode_pgm(&bytes, p).unwrap(), img);
        assert!(decode_pgm(b"P2\n2 1\n255\n\x00\xff", p).is_err());
        assert!(decode_pgm(b"P5\n2 1\n255\n\x00", p).is_err());
        assert!(decode_pgm(b"P5\n# comment\n2 1\n255\n\x00\xff", p).is_ok());
    }
}
