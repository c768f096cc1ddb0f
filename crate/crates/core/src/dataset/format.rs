//! On-disk dataset layouts.
//!
//! Both formats are a flat directory of `<id>.png` images, each with a sibling
//! `<id>.txt` annotation file, plus an optional `classes.txt` (one label per line).
//!
//! * `VedaiLike`: `<label> <x_min> <y_min> <x_max> <y_max> [orig|synth]`
//! * `YoloTxt`: `<class-index> <cx> <cy> <w> <h> [orig|synth]`, normalized to `[0, 1]`;
//!   `classes.txt` is required and maps indices to labels.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::ImageFormat;
use serde::{Deserialize, Serialize};

use super::{Annotation, BBox, Dataset, DatasetError, ImageRecord, Provenance};

const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[serde(rename = "vedai")]
    VedaiLike,
    #[serde(rename = "yolo")]
    YoloTxt,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vedai" => Ok(Format::VedaiLike),
            "yolo" => Ok(Format::YoloTxt),
            other => Err(format!("unknown format {other:?} (expected vedai|yolo)")),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Collapse float noise from normalized-coordinate conversion onto a 1/1024 px grid.
fn snap(v: f64) -> f64 {
    let r = (v * 1024.0).round() / 1024.0;
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

fn read_classes(root: &Path) -> Result<Option<Vec<String>>, DatasetError> {
    let path = root.join(CLASSES_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(Some(
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
    ))
}

pub fn load_dataset(root: &Path, format: Format) -> Result<Dataset, DatasetError> {
    let entries = fs::read_dir(root).map_err(io_err(root))?;
    let mut images: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_err(root))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            images.push(path);
        }
    }
    images.sort();

    let classes = read_classes(root)?;
    if format == Format::YoloTxt && classes.is_none() {
        return Err(DatasetError::MissingAnnotation(root.join(CLASSES_FILE)));
    }
    let class_list = classes.clone().unwrap_or_default();

    let mut records = Vec::with_capacity(images.len());
    let mut label_set: BTreeSet<String> = class_list.iter().cloned().collect();
    for image_path in images {
        let ann_path = image_path.with_extension("txt");
        if !ann_path.exists() {
            return Err(DatasetError::MissingAnnotation(ann_path));
        }
        let image = image::ImageReader::open(&image_path)
            .map_err(io_err(&image_path))?
            .with_guessed_format()
            .map_err(io_err(&image_path))?
            .decode()
            .map_err(|source| DatasetError::UnreadableImage {
                file: image_path.clone(),
                source,
            })?
            .into_rgb8();
        let (width, height) = image.dimensions();
        let text = fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?;
        let annotations = match format {
            Format::VedaiLike => parse_vedai(&text, &ann_path, width, height)?,
            Format::YoloTxt => parse_yolo(&text, &ann_path, width, height, &class_list)?,
        };
        label_set.extend(annotations.iter().map(|a| a.label.clone()));
        let id = image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DatasetError::InvalidId(image_path.display().to_string()))?
            .to_owned();
        records.push(ImageRecord::new(id, image, annotations)?);
    }
    Dataset::new(records, label_set)
}

fn malformed(file: &Path, line: usize, reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedAnnotation {
        file: file.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

fn parse_float(token: &str, file: &Path, line: usize) -> Result<f64, DatasetError> {
    token
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| malformed(file, line, format!("not a finite number: {token:?}")))
}

fn parse_provenance(token: Option<&&str>, file: &Path, line: usize) -> Result<Provenance, DatasetError> {
    match token {
        None => Ok(Provenance::Original),
        Some(t) => Provenance::from_token(t).ok_or_else(|| malformed(file, line, format!("unknown provenance {t:?}"))),
    }
}

fn checked_box(coords: [f64; 4], file: &Path, line: usize, width: u32, height: u32) -> Result<BBox, DatasetError> {
    let [x0, y0, x1, y1] = coords;
    let bbox = BBox::new(x0, y0, x1, y1).map_err(|e| malformed(file, line, e.to_string()))?;
    if !bbox.fits_within(width, height) {
        return Err(DatasetError::OutOfBoundsBox {
            file: file.to_path_buf(),
            line,
        });
    }
    Ok(bbox)
}

fn parse_vedai(text: &str, file: &Path, width: u32, height: u32) -> Result<Vec<Annotation>, DatasetError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 5 && tokens.len() != 6 {
            return Err(malformed(
                file,
                line,
                format!("expected 5 or 6 fields, found {}", tokens.len()),
            ));
        }
        let mut coords = [0.0; 4];
        for (slot, token) in coords.iter_mut().zip(&tokens[1..5]) {
            *slot = parse_float(token, file, line)?;
        }
        let bbox = checked_box(coords, file, line, width, height)?;
        let provenance = parse_provenance(tokens.get(5), file, line)?;
        out.push(Annotation::new(bbox, tokens[0], provenance));
    }
    Ok(out)
}

fn parse_yolo(
    text: &str,
    file: &Path,
    width: u32,
    height: u32,
    classes: &[String],
) -> Result<Vec<Annotation>, DatasetError> {
    let (w_img, h_img) = (width as f64, height as f64);
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() != 5 && tokens.len() != 6 {
            return Err(malformed(
                file,
                line,
                format!("expected 5 or 6 fields, found {}", tokens.len()),
            ));
        }
        let class: usize = tokens[0]
            .parse()
            .map_err(|_| malformed(file, line, format!("bad class index {:?}", tokens[0])))?;
        let label = classes.get(class).ok_or_else(|| {
            malformed(
                file,
                line,
                format!("class index {class} out of range ({} classes)", classes.len()),
            )
        })?;
        let cx = parse_float(tokens[1], file, line)?;
        let cy = parse_float(tokens[2], file, line)?;
        let w = parse_float(tokens[3], file, line)?;
        let h = parse_float(tokens[4], file, line)?;
        let coords = [
            snap((cx - w / 2.0) * w_img),
            snap((cy - h / 2.0) * h_img),
            snap((cx + w / 2.0) * w_img),
            snap((cy + h / 2.0) * h_img),
        ];
        let bbox = checked_box(coords, file, line, width, height)?;
        let provenance = parse_provenance(tokens.get(5), file, line)?;
        out.push(Annotation::new(bbox, label.clone(), provenance));
    }
    Ok(out)
}

/// Writes the dataset so that `load_dataset` reproduces it.
pub fn save_dataset(dataset: &Dataset, root: &Path, format: Format) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(io_err(root))?;

    let classes: Vec<&String> = dataset.label_set().iter().collect();
    let class_index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let classes_path = root.join(CLASSES_FILE);
    let mut classes_text = String::new();
    for label in &classes {
        classes_text.push_str(label);
        classes_text.push('\n');
    }
    fs::write(&classes_path, classes_text).map_err(io_err(&classes_path))?;

    for record in dataset.records() {
        let image_path = root.join(format!("{}.png", record.id()));
        record
            .image()
            .save_with_format(&image_path, ImageFormat::Png)
            .map_err(|e| DatasetError::Io {
                path: image_path.clone(),
                source: std::io::Error::other(e),
            })?;

        let ann_path = root.join(format!("{}.txt", record.id()));
        let mut file = fs::File::create(&ann_path).map_err(io_err(&ann_path))?;
        let (w_img, h_img) = (record.width() as f64, record.height() as f64);
        for ann in record.annotations() {
            let b = &ann.bbox;
            let line = match format {
                Format::VedaiLike => format!(
                    "{} {} {} {} {} {}\n",
                    ann.label,
                    b.x_min(),
                    b.y_min(),
                    b.x_max(),
                    b.y_max(),
                    ann.provenance.as_token()
                ),
                Format::YoloTxt => {
                    let (cx, cy) = b.center();
                    format!(
                        "{} {} {} {} {} {}\n",
                        class_index[ann.label.as_str()],
                        cx / w_img,
                        cy / h_img,
                        b.width() / w_img,
                        b.height() / h_img,
                        ann.provenance.as_token()
                    )
                }
            };
            file.write_all(line.as_bytes()).map_err(io_err(&ann_path))?;
        }
    }
    Ok(())
}
