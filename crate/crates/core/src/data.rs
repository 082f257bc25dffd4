//! Synthetic volumetric EHR generator and the tab-separated manifest format.
//!
//! Each sample couples a smooth random volume carrying a class-dependent
//! structural signal (a centered low-intensity ellipsoid whose radius grows
//! with severity) with a templated record text and the canonical diagnosis
//! Q&A. Generation is a pure function of (class, seed, options).
//!
//! The background noise and the shared demographic fields are drawn from
//! class-independent streams, so volumes generated for different classes
//! from the same seed differ only in the ellipsoid. That makes the
//! class-conditional intensity ordering exact rather than statistical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng;
use crate::text::{DiagnosisClass, QUESTION_TEXT};
use crate::volume::{load_volume, resize_cube, save_volume, Volume};

/// One synthetic record: volume reference plus texts.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// Path of the volume file, relative to the manifest directory.
    pub volume_path: String,
    pub class: DiagnosisClass,
    pub description: String,
    pub question: String,
    pub answer: String,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub name: String,
    pub dim: usize,
    pub records: Vec<SampleRecord>,
    /// Directory volume paths are resolved against.
    pub dir: PathBuf,
}

impl Manifest {
    pub fn class_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.class.label()).or_insert(0) += 1;
        }
        counts
    }

    pub fn load_volume(&self, record: &SampleRecord) -> Result<Volume> {
        load_volume(&self.dir.join(&record.volume_path))
    }

    pub fn find(&self, id: &str) -> Result<&SampleRecord> {
        self.records
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::invalid(format!("sample `{id}` not found in manifest")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GenOptions {
    pub dim: usize,
    /// Draw MMSE/CDR class-independently so the record text carries no class
    /// signal and only the image modality separates the classes.
    pub ambiguous_text: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            dim: 32,
            ambiguous_text: false,
        }
    }
}

/// Ellipsoid radius factors per class; severity grows the carved region.
fn radius_factor(class: DiagnosisClass) -> f64 {
    match class {
        DiagnosisClass::Nc => 1.0,
        DiagnosisClass::Mci => 1.5,
        DiagnosisClass::Dem => 2.2,
    }
}

/// Record text fields for one (class, seed) draw.
pub fn generate_texts(class: DiagnosisClass, seed: u64, opts: &GenOptions) -> (String, String, String) {
    let mut shared = rng::stream(rng::derive_seed(seed, "shared-fields"));
    let age = rng::uniform_int(&mut shared, 55, 90);
    let sex = if rng::uniform(&mut shared, 0.0, 1.0) < 0.5 {
        "female"
    } else {
        "male"
    };
    let educ = rng::uniform_int(&mut shared, 6, 20);
    let ses = rng::uniform_int(&mut shared, 1, 5);
    let logmem = rng::uniform_int(&mut shared, 0, 25);

    let mut class_stream = rng::stream(rng::derive_seed(seed, class.label()));
    let (mmse, cdr) = if opts.ambiguous_text {
        let mmse = rng::uniform_int(&mut class_stream, 12, 30);
        let cdr = ["0", "0.5", "1", "2"][rng::uniform_int(&mut class_stream, 0, 3) as usize];
        (mmse, cdr)
    } else {
        match class {
            DiagnosisClass::Nc => (rng::uniform_int(&mut class_stream, 28, 30), "0"),
            DiagnosisClass::Mci => (rng::uniform_int(&mut class_stream, 24, 27), "0.5"),
            DiagnosisClass::Dem => (
                rng::uniform_int(&mut class_stream, 12, 23),
                ["1", "2"][rng::uniform_int(&mut class_stream, 0, 1) as usize],
            ),
        }
    };

    let description = format!(
        "subject aged {age} sex {sex} education {educ} years ses {ses} mmse score {mmse} cdr rating {cdr} logical memory {logmem}"
    );
    (description, QUESTION_TEXT.to_string(), class.answer().to_string())
}

/// Synthesize the volume for one (class, seed) draw: smooth background noise
/// with a centered low-intensity ellipsoid scaled by class severity.
pub fn generate_volume(class: DiagnosisClass, seed: u64, opts: &GenOptions) -> Volume {
    let dim = opts.dim;
    let mut bg_stream = rng::stream(rng::derive_seed(seed, "background"));
    let grid = 5usize;
    let noise: Vec<f32> = (0..grid * grid * grid)
        .map(|_| rng::uniform(&mut bg_stream, 0.35, 0.65) as f32)
        .collect();
    let coarse = Volume::new([grid, grid, grid], noise).expect("noise in range");
    let mut vol = resize_cube(&coarse, dim);

    let mut class_stream = rng::stream(rng::derive_seed(seed, &format!("shape-{}", class.label())));
    let jitter = 1.0 + 0.1 * rng::uniform(&mut class_stream, -1.0, 1.0);
    let r = (dim as f64 / 10.0) * radius_factor(class) * jitter;
    let (rz, ry, rx) = (r, 0.9 * r, 1.1 * r);
    let c = (dim as f64 - 1.0) / 2.0;
    for z in 0..dim {
        let fz = (z as f64 - c) / rz;
        for y in 0..dim {
            let fy = (y as f64 - c) / ry;
            for x in 0..dim {
                let fx = (x as f64 - c) / rx;
                if fz * fz + fy * fy + fx * fx <= 1.0 {
                    let idx = vol.index(z, y, x);
                    vol.voxels_mut()[idx] *= 0.15;
                }
            }
        }
    }
    vol
}

pub struct GeneratedSample {
    pub description: String,
    pub question: String,
    pub answer: String,
    pub volume: Volume,
}

pub fn generate_sample(class: DiagnosisClass, seed: u64, opts: &GenOptions) -> GeneratedSample {
    let (description, question, answer) = generate_texts(class, seed, opts);
    GeneratedSample {
        description,
        question,
        answer,
        volume: generate_volume(class, seed, opts),
    }
}

/// Mean intensity inside the central box [dim/4, 3*dim/4) per axis — the
/// window the class signal lives in.
pub fn central_mean(v: &Volume) -> f64 {
    let dim = v.dims()[0];
    let (lo, hi) = (dim / 4, 3 * dim / 4);
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for z in lo..hi {
        for y in lo..hi {
            for x in lo..hi {
                sum += v.get(z, y, x) as f64;
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub name: String,
    pub classes: Vec<DiagnosisClass>,
    pub per_class: usize,
    pub dim: usize,
    pub base_seed: u64,
    pub ambiguous_text: bool,
}

/// Generate a balanced dataset under `out_dir`: volume files in `volumes/`,
/// manifest at `<name>.tsv`. Returns the manifest path.
pub fn generate_dataset(out_dir: &Path, spec: &DatasetSpec) -> Result<PathBuf> {
    let opts = GenOptions {
        dim: spec.dim,
        ambiguous_text: spec.ambiguous_text,
    };
    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir)?;
    let mut records = Vec::with_capacity(spec.per_class * spec.classes.len());
    for i in 0..spec.per_class {
        for &class in &spec.classes {
            let sample_seed =
                rng::derive_seed(spec.base_seed, &format!("{}-{}-{i}", spec.name, class.label()));
            let sample = generate_sample(class, sample_seed, &opts);
            let id = format!("{}-{}-{i:04}", spec.name, class.label().to_lowercase());
            let volume_path = format!("volumes/{id}.vol");
            save_volume(&sample.volume, &out_dir.join(&volume_path))?;
            records.push(SampleRecord {
                id,
                volume_path,
                class,
                description: sample.description,
                question: sample.question,
                answer: sample.answer,
                seed: sample_seed,
            });
        }
    }
    let manifest_path = out_dir.join(format!("{}.tsv", spec.name));
    write_manifest(&spec.name, spec.dim, &records, &manifest_path)?;
    Ok(manifest_path)
}

/// Write the manifest: a `name<TAB>dim` header, then one record per line
/// with tab-separated fields (id, volume path, class, T, Q, A, seed).
pub fn write_manifest(
    name: &str,
    dim: usize,
    records: &[SampleRecord],
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{name}\t{dim}\n"));
    for r in records {
        for field in [
            r.id.as_str(),
            r.volume_path.as_str(),
            r.description.as_str(),
            r.question.as_str(),
            r.answer.as_str(),
        ] {
            if field.contains('\t') || field.contains('\n') {
                return Err(Error::invalid(format!(
                    "manifest field for `{}` contains a separator",
                    r.id
                )));
            }
        }
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.id, r.volume_path, r.class.label(), r.description, r.question, r.answer, r.seed
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let content = fs::read_to_string(path)?;
    let dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Manifest {
        line: 1,
        reason: "empty file".into(),
    })?;
    let head: Vec<&str> = header.split('\t').collect();
    if head.len() != 2 {
        return Err(Error::Manifest {
            line: 1,
            reason: format!("header needs `name<TAB>dim`, got {} fields", head.len()),
        });
    }
    let name = head[0].to_string();
    let dim: usize = head[1].parse().map_err(|_| Error::Manifest {
        line: 1,
        reason: format!("bad dim `{}`", head[1]),
    })?;
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::Manifest {
                line: lineno,
                reason: format!("expected 7 fields, got {}", fields.len()),
            });
        }
        let class = DiagnosisClass::parse(fields[2]).map_err(|e| Error::Manifest {
            line: lineno,
            reason: e.to_string(),
        })?;
        let seed: u64 = fields[6].parse().map_err(|_| Error::Manifest {
            line: lineno,
            reason: format!("bad seed `{}`", fields[6]),
        })?;
        let record = SampleRecord {
            id: fields[0].to_string(),
            volume_path: fields[1].to_string(),
            class,
            description: fields[3].to_string(),
            question: fields[4].to_string(),
            answer: fields[5].to_string(),
            seed,
        };
        if !dir.join(&record.volume_path).is_file() {
            return Err(Error::Manifest {
                line: lineno,
                reason: format!("sample `{}` references missing volume file `{}`", record.id, record.volume_path),
            });
        }
        records.push(record);
    }
    Ok(Manifest {
        name,
        dim,
        records,
        dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    #[test]
    fn generation_is_deterministic() {
        let opts = GenOptions {
            dim: 16,
            ambiguous_text: false,
        };
        let a = generate_sample(DiagnosisClass::Mci, 77, &opts);
        let b = generate_sample(DiagnosisClass::Mci, 77, &opts);
        assert_eq!(a.description, b.description);
        assert!(a.volume.bit_eq(&b.volume));
    }

    #[test]
    fn central_intensity_orders_by_severity_on_matched_seeds() {
        let opts = GenOptions {
            dim: 16,
            ambiguous_text: false,
        };
        for seed in 0..100u64 {
            let nc = central_mean(&generate_volume(DiagnosisClass::Nc, seed, &opts));
            let mci = central_mean(&generate_volume(DiagnosisClass::Mci, seed, &opts));
            let dem = central_mean(&generate_volume(DiagnosisClass::Dem, seed, &opts));
            assert!(nc > mci && mci > dem, "seed {seed}: {nc} {mci} {dem}");
        }
    }

    #[test]
    fn threshold_on_central_mean_separates_nc_from_dem() {
        // learnability-by-construction oracle: a single threshold sweep on
        // the central-window mean classifies NC vs DEM at >= 95%.
        let opts = GenOptions {
            dim: 32,
            ambiguous_text: false,
        };
        let mut scored: Vec<(f64, bool)> = Vec::new();
        for seed in 0..100u64 {
            scored.push((
                central_mean(&generate_volume(DiagnosisClass::Nc, seed * 31 + 7, &opts)),
                true,
            ));
            scored.push((
                central_mean(&generate_volume(DiagnosisClass::Dem, seed * 17 + 3, &opts)),
                false,
            ));
        }
        let mut best = 0usize;
        for &(threshold, _) in &scored {
            let correct = scored
                .iter()
                .filter(|&&(m, is_nc)| (m >= threshold) == is_nc)
                .count();
            best = best.max(correct);
        }
        assert!(best >= 190, "best threshold separates only {best}/200");
    }

    #[test]
    fn informative_text_encodes_class_in_mmse() {
        let opts = GenOptions {
            dim: 16,
            ambiguous_text: false,
        };
        let (desc, _, _) = generate_texts(DiagnosisClass::Nc, 5, &opts);
        assert!(desc.contains("cdr rating 0 "));
        let (desc, _, _) = generate_texts(DiagnosisClass::Mci, 5, &opts);
        assert!(desc.contains("cdr rating 0.5 "));
    }

    #[test]
    fn generated_texts_round_trip_through_tokenizer() {
        let vocab = Vocabulary::grammar();
        for seed in 0..1000u64 {
            for class in DiagnosisClass::ALL {
                for ambiguous in [false, true] {
                    let opts = GenOptions {
                        dim: 16,
                        ambiguous_text: ambiguous,
                    };
                    let (t, q, a) = generate_texts(class, seed, &opts);
                    for text in [&t, &q, &a] {
                        let ids = vocab.tokenize(text).unwrap();
                        assert_eq!(&vocab.detokenize(&ids).unwrap(), text);
                    }
                }
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            name: "toyset".into(),
            classes: DiagnosisClass::ALL.to_vec(),
            per_class: 3,
            dim: 8,
            base_seed: 11,
            ambiguous_text: false,
        };
        let manifest_path = generate_dataset(dir.path(), &spec).unwrap();
        let m = read_manifest(&manifest_path).unwrap();
        assert_eq!(m.name, "toyset");
        assert_eq!(m.dim, 8);
        assert_eq!(m.records.len(), 9);
        let counts = m.class_counts();
        assert!(counts.values().all(|&c| c == 3));
        // volumes load and are the advertised size
        let v = m.load_volume(&m.records[0]).unwrap();
        assert_eq!(v.dims(), [8, 8, 8]);
        // rewrite and compare
        let copy = dir.path().join("copy.tsv");
        write_manifest(&m.name, m.dim, &m.records, &copy).unwrap();
        let m2 = read_manifest(&copy).unwrap();
        assert_eq!(m.records, m2.records);
    }

    #[test]
    fn missing_volume_file_is_reported_with_sample_id() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            name: "small".into(),
            classes: vec![DiagnosisClass::Nc],
            per_class: 1,
            dim: 8,
            base_seed: 0,
            ambiguous_text: false,
        };
        let manifest_path = generate_dataset(dir.path(), &spec).unwrap();
        let m = read_manifest(&manifest_path).unwrap();
        fs::remove_file(dir.path().join(&m.records[0].volume_path)).unwrap();
        match read_manifest(&manifest_path) {
            Err(Error::Manifest { reason, .. }) => {
                assert!(reason.contains("small-nc-0000"), "reason: {reason}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        fs::write(&path, "name\t8\nonly\tthree\tfields\n").unwrap();
        match read_manifest(&path) {
            Err(Error::Manifest { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected manifest error, got {other:?}"),
        }
    }
}
