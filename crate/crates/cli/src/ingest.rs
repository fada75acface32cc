//! Reading labelled image folders.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use reidpatch::dataset::{parse_market_name, quad_sidecar, read_quad_sidecar, Dataset, LabeledImage};
use reidpatch::geometry::AnchorQuad;
use reidpatch::imagecore::Image;
use log::warn;

use crate::config::FolderSource;
use crate::error::{CliError, CliResult};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Centred box over the upper torso, in pixel-centre coordinates.
pub fn default_torso_quad(height: usize, width: usize) -> reidpatch::Result<AnchorQuad> {
    let (h, w) = (height as f64, width as f64);
    AnchorQuad::new(
        [
            [0.25 * w - 0.5, 0.25 * h - 0.5],
            [0.75 * w - 0.5, 0.25 * h - 0.5],
            [0.75 * w - 0.5, 0.55 * h - 0.5],
            [0.25 * w - 0.5, 0.55 * h - 0.5],
        ],
        width,
        height,
    )
}

fn scale_quad(q: &AnchorQuad, from: (usize, usize), to: (usize, usize)) -> reidpatch::Result<AnchorQuad> {
    let sy = to.0 as f64 / from.0 as f64;
    let sx = to.1 as f64 / from.1 as f64;
    q.map(|[x, y]| [(x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5])
}

struct Parsed {
    path: PathBuf,
    identity: u32,
    camera: u32,
    sequence: Option<u32>,
}

/// Loads every parseable image in `dir` (not recursive), resized to
/// `height x width`. Unparseable names are skipped with a warning.
///
/// Sequence numbers come from the file name when they are unique within an
/// (identity, camera) group and from sorted file order otherwise.
pub fn ingest_folder(dir: &Path, height: usize, width: usize) -> CliResult<Vec<LabeledImage>> {
    if !dir.is_dir() {
        return Err(CliError::Ingest(format!("{} is not a directory", dir.display())));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Ingest(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let image_stems: BTreeSet<String> = paths
        .iter()
        .filter(|p| is_image(p))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();

    let mut parsed = Vec::new();
    for path in paths {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if (ext == "txt" || ext == "json") && image_stems.contains(&stem) {
            continue;
        }
        let labels = if is_image(&path) { parse_market_name(&name) } else { None };
        match labels {
            Some((identity, camera, sequence)) => parsed.push(Parsed { path, identity, camera, sequence }),
            None => warn!("skipping {}: not a labelled image name", path.display()),
        }
    }
    if parsed.is_empty() {
        return Err(CliError::Ingest(format!("no parseable image files in {}", dir.display())));
    }

    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, p) in parsed.iter().enumerate() {
        groups.entry((p.identity, p.camera)).or_default().push(i);
    }
    let mut sequence = vec![0u32; parsed.len()];
    for members in groups.values() {
        let seqs: Vec<Option<u32>> = members.iter().map(|&i| parsed[i].sequence).collect();
        let unique = seqs.iter().all(|s| s.is_some()) && seqs.iter().collect::<BTreeSet<_>>().len() == seqs.len();
        for (k, &i) in members.iter().enumerate() {
            sequence[i] = if unique { parsed[i].sequence.unwrap() } else { k as u32 + 1 };
        }
    }

    let mut out = Vec::with_capacity(parsed.len());
    for (i, p) in parsed.iter().enumerate() {
        let err = |e: reidpatch::Error| CliError::Ingest(format!("{}: {e}", p.path.display()));
        let raw = Image::load(&p.path).map_err(err)?;
        let from = (raw.height(), raw.width());
        let image = if from == (height, width) { raw } else { raw.resize_bilinear(height, width).map_err(err)? };
        let quad = match read_quad_sidecar(&quad_sidecar(&p.path)).map_err(err)? {
            Some(q) => {
                let q = scale_quad(&q, from, (height, width)).map_err(err)?;
                if !q.inside(width, height) {
                    return Err(CliError::Ingest(format!("{}: quad annotation leaves the image", p.path.display())));
                }
                q
            }
            None => default_torso_quad(height, width).map_err(err)?,
        };
        out.push(LabeledImage {
            image,
            identity: p.identity,
            camera: p.camera,
            sequence: sequence[i],
            quad,
        });
    }
    Ok(out)
}

/// Ingests a folder source. `train/` and `test/` sub-directories are used as
/// given; a flat folder is split per (identity, camera) group in sequence order.
pub fn ingest_dataset(src: &FolderSource) -> CliResult<Dataset> {
    let train_dir = src.path.join("train");
    let test_dir = src.path.join("test");
    if train_dir.is_dir() && test_dir.is_dir() {
        return Ok(Dataset {
            train: ingest_folder(&train_dir, src.height, src.width)?,
            test: ingest_folder(&test_dir, src.height, src.width)?,
        });
    }
    let mut all = ingest_folder(&src.path, src.height, src.width)?;
    all.sort_by_key(|li| (li.identity, li.camera, li.sequence));
    let mut ds = Dataset::default();
    let mut start = 0;
    while start < all.len() {
        let key = (all[start].identity, all[start].camera);
        let end = start + all[start..].iter().take_while(|li| (li.identity, li.camera) == key).count();
        let n_train = ((end - start) as f64 * src.train_fraction).round() as usize;
        for (k, li) in all[start..end].iter().enumerate() {
            if k < n_train {
                ds.train.push(li.clone());
            } else {
                ds.test.push(li.clone());
            }
        }
        start = end;
    }
    Ok(ds)
}
