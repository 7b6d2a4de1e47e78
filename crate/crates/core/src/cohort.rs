//! Cohort generation and on-disk layout.
//!
//! A cohort directory holds `manifest.txt` (roster: id, label, synthetic
//! flag, volume path), `concepts.csv` (one row per subject, columns in the
//! canonical concept order), and `volumes/` with one header/payload pair per
//! subject. Subject parameters are drawn from per-subject seed streams, so
//! any subject can be regenerated in isolation and cohort generation order
//! never shifts another subject's data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::phantom::{self, PhantomSpec, MIN_TUBE_RADIUS};
use crate::seed::{self, tag};
use crate::volume::{self, Volume};

pub const MANIFEST_NAME: &str = "manifest.txt";
pub const CONCEPTS_NAME: &str = "concepts.csv";
pub const VOLUME_DIR: &str = "volumes";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CohortParams {
    pub n_patients: usize,
    pub n_controls: usize,
    pub grid: [usize; 3],
    /// Uniform sampling range for the tube radius (sigma, voxels).
    pub tube_radius: (f64, f64),
    /// Uniform sampling range for the bulge diameter factor of positives.
    pub bulge_factor: (f64, f64),
    pub noise_sigma: f64,
    pub control_points: usize,
    pub seed: u64,
}

impl Default for CohortParams {
    fn default() -> Self {
        CohortParams {
            n_patients: 92,
            n_controls: 44,
            grid: [96, 96, 96],
            tube_radius: (3.0, 5.0),
            bulge_factor: (1.6, 2.4),
            noise_sigma: 0.01,
            control_points: 5,
            seed: 7,
        }
    }
}

impl CohortParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.n_controls == 0 {
            return Err(Error::validation(
                "cohort needs at least one patient and one control",
            ));
        }
        let (rlo, rhi) = self.tube_radius;
        if !(rlo.is_finite() && rhi.is_finite()) || rlo > rhi || rlo < MIN_TUBE_RADIUS {
            return Err(Error::validation(format!(
                "tube radius range ({rlo}, {rhi}) must be ordered and >= {MIN_TUBE_RADIUS}"
            )));
        }
        let (flo, fhi) = self.bulge_factor;
        if !(flo.is_finite() && fhi.is_finite()) || flo > fhi || flo <= 1.0 || fhi > 4.0 {
            return Err(Error::validation(format!(
                "bulge factor range ({flo}, {fhi}) must be ordered and within (1, 4]"
            )));
        }
        // The widest subject must fit; probe with the range maxima.
        let probe = PhantomSpec {
            grid: self.grid,
            tube_radius: rhi,
            centerline_control_points: self.control_points,
            bulge_present: true,
            bulge_diameter_factor: fhi,
            noise_sigma: self.noise_sigma,
            seed: 0,
        };
        probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    /// 1 for patients, 0 for controls.
    pub label: u8,
    /// True only for oversampled duplicates added at split time.
    pub synthetic: bool,
    /// Volume path relative to the cohort root, without extension.
    pub volume: PathBuf,
    pub concepts: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub root: PathBuf,
    pub seed: u64,
    pub records: Vec<SubjectRecord>,
    /// Concept column order, identical for every record.
    pub concept_names: Vec<String>,
}

impl Cohort {
    pub fn n_patients(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    pub fn n_controls(&self) -> usize {
        self.records.iter().filter(|r| r.label == 0).count()
    }

    pub fn load_volume(&self, record: &SubjectRecord) -> Result<Volume> {
        volume::load_volume(&self.root.join(&record.volume))
    }

    /// Concept values of one record in `concept_names` order.
    pub fn concept_row(&self, record: &SubjectRecord) -> Vec<f64> {
        self.concept_names
            .iter()
            .map(|n| *record.concepts.get(n).expect("record misses concept"))
            .collect()
    }
}

fn subject_spec(params: &CohortParams, index: usize, is_patient: bool) -> PhantomSpec {
    let subject_seed = seed::derive(params.seed, &[tag("subject"), index as u64]);
    let mut rng = seed::stream(subject_seed, &[tag("subject-params")]);
    // Both draws happen for both classes so parameter streams stay aligned.
    let draw = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| -> f64 {
        let u: f64 = rng.random();
        lo + u * (hi - lo)
    };
    let radius = draw(&mut rng, params.tube_radius.0, params.tube_radius.1);
    let factor = draw(&mut rng, params.bulge_factor.0, params.bulge_factor.1);
    PhantomSpec {
        grid: params.grid,
        tube_radius: radius,
        centerline_control_points: params.control_points,
        bulge_present: is_patient,
        bulge_diameter_factor: if is_patient { factor } else { 1.0 },
        noise_sigma: params.noise_sigma,
        seed: subject_seed,
    }
}

/// Generate every subject volume plus concepts and persist the cohort
/// under `dir`.
pub fn generate_cohort(params: &CohortParams, dir: &Path) -> Result<Cohort> {
    params.validate()?;
    let vol_dir = dir.join(VOLUME_DIR);
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;

    let total = params.n_patients + params.n_controls;
    let mut records = Vec::with_capacity(total);
    for index in 0..total {
        let is_patient = index < params.n_patients;
        let (class_ord, prefix) = if is_patient {
            (index + 1, 'p')
        } else {
            (index - params.n_patients + 1, 'c')
        };
        let subject_id = format!("{prefix}{class_ord:03}");
        let spec = subject_spec(params, index, is_patient);
        let (vol, concepts) = phantom::generate_with_concepts(&spec)?;
        let rel = PathBuf::from(VOLUME_DIR).join(&subject_id);
        volume::save_volume(&vol, &dir.join(&rel))?;
        records.push(SubjectRecord {
            subject_id,
            label: is_patient as u8,
            synthetic: false,
            volume: rel,
            concepts: concepts.into_iter().collect(),
        });
    }

    let cohort = Cohort {
        root: dir.to_path_buf(),
        seed: params.seed,
        records,
        concept_names: phantom::CONCEPT_ORDER.iter().map(|s| s.to_string()).collect(),
    };
    write_manifest(&cohort, &dir.join(MANIFEST_NAME))?;
    write_concepts_csv(&cohort, &dir.join(CONCEPTS_NAME))?;
    Ok(cohort)
}

fn write_manifest(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "cohortfmt = 1");
    let _ = writeln!(text, "seed = {}", cohort.seed);
    let _ = writeln!(text, "patients = {}", cohort.n_patients());
    let _ = writeln!(text, "controls = {}", cohort.n_controls());
    for r in &cohort.records {
        let _ = writeln!(
            text,
            "subject {} label={} synthetic={} volume={}",
            r.subject_id,
            r.label,
            r.synthetic,
            r.volume.display()
        );
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_concepts_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut text = String::new();
    text.push_str("subject_id");
    for name in &cohort.concept_names {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for r in &cohort.records {
        text.push_str(&r.subject_id);
        for v in cohort.concept_row(r) {
            // `{}` prints the shortest representation that parses back to
            // the same f64, so the CSV round-trips exactly.
            let _ = write!(text, ",{v}");
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_cohort(dir: &Path) -> Result<Cohort> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let bad = |reason: String| Error::format(&manifest_path, reason);

    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| bad("manifest is empty".into()))?;
    if first.trim() != "cohortfmt = 1" {
        return Err(bad(format!("expected 'cohortfmt = 1', got '{first}'")));
    }
    let mut seed = None;
    let mut patients = None;
    let mut controls = None;
    let mut entries: Vec<(String, u8, bool, PathBuf)> = Vec::new();
    for line in lines {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("subject ") {
            let mut parts = rest.split_whitespace();
            let id = parts
                .next()
                .ok_or_else(|| bad("subject line misses id".into()))?
                .to_string();
            let mut label = None;
            let mut synthetic = None;
            let mut vol = None;
            for kv in parts {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(format!("bad subject field '{kv}'")))?;
                match k {
                    "label" => {
                        let l: u8 = v
                            .parse()
                            .map_err(|_| bad(format!("bad label '{v}' for {id}")))?;
                        if l > 1 {
                            return Err(bad(format!("label must be 0 or 1, got {l}")));
                        }
                        label = Some(l);
                    }
                    "synthetic" => {
                        synthetic = Some(v.parse::<bool>().map_err(|_| {
                            bad(format!("bad synthetic flag '{v}' for {id}"))
                        })?);
                    }
                    "volume" => vol = Some(PathBuf::from(v)),
                    other => return Err(bad(format!("unknown subject field '{other}'"))),
                }
            }
            let label = label.ok_or_else(|| bad(format!("{id} misses label")))?;
            let synthetic = synthetic.ok_or_else(|| bad(format!("{id} misses synthetic")))?;
            let vol = vol.ok_or_else(|| bad(format!("{id} misses volume")))?;
            entries.push((id, label, synthetic, vol));
        } else if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim(), v.trim());
            match k {
                "seed" => {
                    seed = Some(v.parse::<u64>().map_err(|_| bad(format!("bad seed '{v}'")))?)
                }
                "patients" => {
                    patients =
                        Some(v.parse::<usize>().map_err(|_| bad(format!("bad count '{v}'")))?)
                }
                "controls" => {
                    controls =
                        Some(v.parse::<usize>().map_err(|_| bad(format!("bad count '{v}'")))?)
                }
                other => return Err(bad(format!("unknown manifest key '{other}'"))),
            }
        } else {
            return Err(bad(format!("unparseable line '{line}'")));
        }
    }
    let seed = seed.ok_or_else(|| bad("manifest misses seed".into()))?;
    let patients = patients.ok_or_else(|| bad("manifest misses patients".into()))?;
    let controls = controls.ok_or_else(|| bad("manifest misses controls".into()))?;
    let have_p = entries.iter().filter(|e| e.1 == 1).count();
    let have_c = entries.iter().filter(|e| e.1 == 0).count();
    if have_p != patients || have_c != controls {
        return Err(bad(format!(
            "declared {patients}/{controls} patients/controls but listed {have_p}/{have_c}"
        )));
    }

    let (concept_names, mut rows) = read_concepts_csv(&dir.join(CONCEPTS_NAME))?;
    let mut records = Vec::with_capacity(entries.len());
    for (id, label, synthetic, vol) in entries {
        let values = rows.remove(&id).ok_or_else(|| {
            Error::format(
                dir.join(CONCEPTS_NAME),
                format!("subject {id} missing from concept table"),
            )
        })?;
        let concepts = concept_names
            .iter()
            .cloned()
            .zip(values)
            .collect::<BTreeMap<_, _>>();
        records.push(SubjectRecord {
            subject_id: id,
            label,
            synthetic,
            volume: vol,
            concepts,
        });
    }
    if !rows.is_empty() {
        let extra: Vec<_> = rows.keys().cloned().collect();
        return Err(Error::format(
            dir.join(CONCEPTS_NAME),
            format!("concept rows without manifest entries: {extra:?}"),
        ));
    }
    Ok(Cohort {
        root: dir.to_path_buf(),
        seed,
        records,
        concept_names,
    })
}

fn read_concepts_csv(path: &Path) -> Result<(Vec<String>, BTreeMap<String, Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format(path, reason);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("concept table is empty".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("subject_id") {
        return Err(bad("first column must be subject_id".into()));
    }
    let names: Vec<String> = cols.map(|s| s.to_string()).collect();
    if names.is_empty() {
        return Err(bad("concept table has no concept columns".into()));
    }
    let mut rows = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap().to_string();
        let values: Vec<f64> = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| bad(format!("bad concept value '{f}' for {id}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != names.len() {
            return Err(bad(format!(
                "{id} has {} values for {} columns",
                values.len(),
                names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("{id} has a non-finite concept value")));
        }
        if rows.insert(id.clone(), values).is_some() {
            return Err(bad(format!("duplicate concept row for {id}")));
        }
    }
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params(seed: u64) -> CohortParams {
        CohortParams {
            n_patients: 3,
            n_controls: 2,
            grid: [24, 24, 24],
            tube_radius: (1.5, 1.6),
            bulge_factor: (1.8, 2.2),
            noise_sigma: 0.01,
            control_points: 5,
            seed,
        }
    }

    #[test]
    fn params_validation() {
        let mut p = small_params(1);
        p.n_patients = 0;
        assert!(p.validate().is_err());
        let mut p = small_params(1);
        p.tube_radius = (1.6, 1.5);
        assert!(p.validate().is_err());
        let mut p = small_params(1);
        p.bulge_factor = (0.9, 2.0);
        assert!(p.validate().is_err());
        let mut p = small_params(1);
        p.tube_radius = (3.0, 5.0); // cannot fit a 5-voxel tube in 24^3
        assert!(p.validate().is_err());
        assert!(small_params(1).validate().is_ok());
    }

    #[test]
    fn generates_roster_ids_labels_and_files() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate_cohort(&small_params(3), dir.path()).unwrap();
        let ids: Vec<&str> = cohort.records.iter().map(|r| r.subject_id.as_str()).collect();
        assert_eq!(ids, ["p001", "p002", "p003", "c001", "c002"]);
        assert_eq!(cohort.n_patients(), 3);
        assert_eq!(cohort.n_controls(), 2);
        assert!(cohort.records.iter().all(|r| !r.synthetic));
        for r in &cohort.records {
            let v = cohort.load_volume(r).unwrap();
            assert_eq!(v.shape(), [24, 24, 24]);
            assert_eq!(r.label, if r.subject_id.starts_with('p') { 1 } else { 0 });
        }
        assert!(dir.path().join(MANIFEST_NAME).is_file());
        assert!(dir.path().join(CONCEPTS_NAME).is_file());
    }

    #[test]
    fn round_trips_through_disk_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let generated = generate_cohort(&small_params(9), dir.path()).unwrap();
        let loaded = load_cohort(dir.path()).unwrap();
        assert_eq!(loaded, generated);
    }

    #[test]
    fn generation_is_reproducible_across_directories() {
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_cohort(&small_params(5), da.path()).unwrap();
        generate_cohort(&small_params(5), db.path()).unwrap();
        for name in [MANIFEST_NAME, CONCEPTS_NAME] {
            let a = fs::read(da.path().join(name)).unwrap();
            let b = fs::read(db.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
        }
        let a = fs::read(da.path().join("volumes/p001.volraw")).unwrap();
        let b = fs::read(db.path().join("volumes/p001.volraw")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn concept_table_matches_canonical_order() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = generate_cohort(&small_params(2), dir.path()).unwrap();
        assert_eq!(cohort.concept_names.len(), phantom::CONCEPT_ORDER.len());
        for (have, want) in cohort.concept_names.iter().zip(phantom::CONCEPT_ORDER) {
            assert_eq!(have, want);
        }
        // Subjects get distinct geometry, hence distinct concepts.
        let a = cohort.concept_row(&cohort.records[0]);
        let b = cohort.concept_row(&cohort.records[1]);
        assert_ne!(a, b);
    }

    #[test]
    fn load_rejects_tampered_manifest() {
        let dir = tempfile::tempdir().unwrap();
        generate_cohort(&small_params(4), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, text.replace("patients = 3", "patients = 4")).unwrap();
        let err = load_cohort(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }
}
