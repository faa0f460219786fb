//! File formats: dataset CSV, model and config TOML, parameter blobs and
//! measurement tables.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use sysrec_core::bench::{BenchmarkSpec, InputSignal, System};
use sysrec_core::net::{NetShape, NetWeights, RecoveryNetParams};
use sysrec_core::select::{MeasurementRow, MeasurementTable};
use sysrec_core::train::{ThetaSource, TrainConfig};
use sysrec_core::{SparseOdeModel, TermLibrary, Trajectory};

use crate::error::{format_err, io_err, Error, Result};

/// Shortest text that parses back to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| format_err(path, e))
}

fn to_toml<T: Serialize>(path: &Path, value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| format_err(path, e))
}

// ---------------------------------------------------------------- datasets

/// Relative tolerance on the uniform time grid.
pub const GRID_TOL: f64 = 1e-9;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.position() {
        Some(p) => Error::Row {
            path: path.to_path_buf(),
            row: p.line() as usize,
            message: e.to_string(),
        },
        None => format_err(path, e),
    }
}

/// Writes `t, x1..xn, u1..um` with one row per sample.
pub fn save_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=traj.n_states()).map(|i| format!("x{i}")));
        header.extend((1..=traj.n_inputs()).map(|i| format!("u{i}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..traj.len() {
            let row = std::iter::once(traj.time(i))
                .chain(traj.state(i).iter().copied())
                .chain(traj.input(i).iter().copied())
                .map(num);
            w.write_record(row).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    write_text(path, std::str::from_utf8(&out).expect("csv output is utf-8"))
}

/// Reads a dataset written by [`save_csv`]; the header fixes the state and
/// input counts and the time column must lie on a uniform grid.
pub fn load_csv(path: &Path) -> Result<Trajectory> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.first() != Some(&"t") {
        return Err(format_err(path, "first column must be 't'"));
    }
    let n = cols.iter().skip(1).take_while(|c| c.starts_with('x')).count();
    let m = cols.len() - 1 - n;
    for (i, c) in cols[1..=n].iter().enumerate() {
        if *c != format!("x{}", i + 1) {
            return Err(format_err(path, format!("expected column x{}, found '{c}'", i + 1)));
        }
    }
    for (i, c) in cols[n + 1..].iter().enumerate() {
        if *c != format!("u{}", i + 1) {
            return Err(format_err(path, format!("expected column u{}, found '{c}'", i + 1)));
        }
    }
    if n == 0 {
        return Err(format_err(path, "no state columns"));
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = k + 2;
        if rec.len() != cols.len() {
            return Err(Error::Row {
                path: path.to_path_buf(),
                row,
                message: format!("expected {} fields, found {}", cols.len(), rec.len()),
            });
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Row {
                path: path.to_path_buf(),
                row,
                message: format!("column {}: '{field}' is not a number", cols[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Row {
                    path: path.to_path_buf(),
                    row,
                    message: format!("column {} is not finite", cols[j]),
                });
            }
            match j {
                0 => times.push(v),
                j if j <= n => states.push(v),
                _ => inputs.push(v),
            }
        }
    }
    if times.len() < 2 {
        return Err(format_err(path, "need at least two samples"));
    }
    let t0 = times[0];
    let dt = (times[times.len() - 1] - t0) / (times.len() - 1) as f64;
    if dt.is_nan() || dt <= 0.0 {
        return Err(format_err(path, "time must increase"));
    }
    for (i, &t) in times.iter().enumerate() {
        let expect = t0 + i as f64 * dt;
        if (t - expect).abs() > GRID_TOL * t.abs().max(expect.abs()).max(dt) {
            return Err(Error::Row {
                path: path.to_path_buf(),
                row: i + 2,
                message: format!("time {t} is off the uniform grid (expected {expect})"),
            });
        }
    }
    Ok(Trajectory::new(t0, dt, n, m, states, inputs)?)
}

// ------------------------------------------------------------------ models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermEntry {
    pub term: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquationFile {
    pub terms: Vec<TermEntry>,
}

/// Structured text form of a [`SparseOdeModel`]: library metadata plus the
/// non-zero `(term, coefficient)` pairs of every equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub n_states: usize,
    pub n_inputs: usize,
    pub order: u32,
    pub include_constant: bool,
    pub threshold: f64,
    pub equations: Vec<EquationFile>,
}

impl ModelFile {
    pub fn from_model(model: &SparseOdeModel) -> Self {
        let lib = model.library();
        let equations = (0..model.n_states())
            .map(|eq| EquationFile {
                terms: lib
                    .terms()
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| model.get(eq, *j) != 0.0)
                    .map(|(j, t)| TermEntry {
                        term: t.name(),
                        coefficient: model.get(eq, j),
                    })
                    .collect(),
            })
            .collect();
        Self {
            n_states: lib.n_states(),
            n_inputs: lib.n_inputs(),
            order: lib.order(),
            include_constant: lib.include_constant(),
            threshold: model.threshold(),
            equations,
        }
    }

    pub fn to_model(&self) -> sysrec_core::Result<SparseOdeModel> {
        let lib = TermLibrary::new(self.n_states, self.n_inputs, self.order, self.include_constant)?;
        if self.equations.len() != self.n_states {
            return Err(sysrec_core::Error::Dimension {
                what: "equations",
                expected: self.n_states,
                got: self.equations.len(),
            });
        }
        let entries: Vec<(usize, &str, f64)> = self
            .equations
            .iter()
            .enumerate()
            .flat_map(|(eq, e)| e.terms.iter().map(move |t| (eq, t.term.as_str(), t.coefficient)))
            .collect();
        SparseOdeModel::from_terms(lib, &entries, self.threshold)
    }
}

pub fn model_to_string(model: &SparseOdeModel) -> String {
    toml::to_string(&ModelFile::from_model(model)).expect("model file serialises")
}

pub fn save_model(path: &Path, model: &SparseOdeModel) -> Result<()> {
    write_text(path, &model_to_string(model))
}

pub fn load_model(path: &Path) -> Result<SparseOdeModel> {
    let file: ModelFile = parse_toml(path)?;
    file.to_model().map_err(|e| format_err(path, e))
}

// -------------------------------------------------------------- parameters

const PARAMS_MAGIC: &[u8; 8] = b"SYSRECNP";
const PARAMS_VERSION: u32 = 1;

/// Little-endian blob: magic, version, shape, τ, seed, weight count and the
/// weights in [`NetWeights::NAMES`] order.
pub fn params_to_bytes(params: &RecoveryNetParams) -> Vec<u8> {
    let mut out = Vec::new();
    let s = &params.shape;
    out.extend_from_slice(PARAMS_MAGIC);
    out.write_u32::<LittleEndian>(PARAMS_VERSION).unwrap();
    for v in [s.channels, s.hidden, s.dense_hidden, s.n_coefficients, s.n_shifts] {
        out.write_u64::<LittleEndian>(v as u64).unwrap();
    }
    out.write_f64::<LittleEndian>(params.tau).unwrap();
    out.write_u64::<LittleEndian>(params.seed).unwrap();
    let flat = params.weights.flatten();
    out.write_u64::<LittleEndian>(flat.len() as u64).unwrap();
    for v in flat {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn params_from_bytes(bytes: &[u8]) -> std::result::Result<RecoveryNetParams, String> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| "truncated header")?;
    if &magic != PARAMS_MAGIC {
        return Err("not a parameter file".into());
    }
    let e = |_| "truncated header".to_string();
    let version = r.read_u32::<LittleEndian>().map_err(e)?;
    if version != PARAMS_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.read_u64::<LittleEndian>().map_err(e)? as usize;
    }
    let shape = NetShape {
        channels: dims[0],
        hidden: dims[1],
        dense_hidden: dims[2],
        n_coefficients: dims[3],
        n_shifts: dims[4],
    };
    let tau = r.read_f64::<LittleEndian>().map_err(e)?;
    let seed = r.read_u64::<LittleEndian>().map_err(e)?;
    let count = r.read_u64::<LittleEndian>().map_err(e)? as usize;
    let mut weights = NetWeights::zeros(&shape);
    if weights.len() != count {
        return Err(format!("shape needs {} weights, header says {count}", weights.len()));
    }
    for i in 0..count {
        let v = r
            .read_f64::<LittleEndian>()
            .map_err(|_| "truncated weights".to_string())?;
        weights.set(i, v);
    }
    if (r.position() as usize) != bytes.len() {
        return Err("trailing bytes".into());
    }
    RecoveryNetParams::from_weights(shape, weights, tau, seed).map_err(|e| e.to_string())
}

pub fn params_summary(params: &RecoveryNetParams) -> String {
    let s = &params.shape;
    let mut out = format!(
        "format: SYSRECNP v{PARAMS_VERSION}\nchannels: {}\nhidden: {}\ndense_hidden: {}\ncoefficients: {}\nshifts: {}\ntau: {}\nseed: {}\nparameters: {}\n",
        s.channels,
        s.hidden,
        s.dense_hidden,
        s.n_coefficients,
        s.n_shifts,
        num(params.tau),
        params.seed,
        params.n_params()
    );
    for (name, t) in NetWeights::NAMES.iter().zip(params.weights.tensors()) {
        out.push_str(&format!("  {name}: {}\n", t.len()));
    }
    out
}

pub fn save_params(path: &Path, params: &RecoveryNetParams) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&params_to_bytes(params)).map_err(io_err(path))
}

pub fn load_params(path: &Path) -> Result<RecoveryNetParams> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    params_from_bytes(&bytes).map_err(|m| format_err(path, m))
}

// --------------------------------------------------------- benchmark specs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputFile {
    Constant {
        values: Vec<f64>,
    },
    Sine {
        amplitude: f64,
        frequency: f64,
        offset: f64,
    },
}

/// Benchmark spec as written on disk; omitted fields take the system's defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpecFile {
    pub system: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<InputFile>,
}

impl BenchmarkSpecFile {
    pub fn resolve(&self) -> sysrec_core::Result<BenchmarkSpec> {
        let system: System = self.system.parse()?;
        let mut spec = BenchmarkSpec::default_for(system);
        if let Some(v) = &self.initial_state {
            spec.initial_state = v.clone();
        }
        if let Some(v) = self.duration {
            spec.duration = v;
        }
        if let Some(v) = self.rate {
            spec.rate = v;
        }
        if let Some(v) = self.noise {
            spec.noise = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.substeps {
            spec.substeps = v;
        }
        if let Some(input) = &self.input {
            spec.input = match input {
                InputFile::Constant { values } => InputSignal::Constant(values.clone()),
                InputFile::Sine {
                    amplitude,
                    frequency,
                    offset,
                } => InputSignal::Sine {
                    amplitude: *amplitude,
                    frequency: *frequency,
                    offset: *offset,
                },
            };
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Fully populated form of a spec.
    pub fn from_spec(spec: &BenchmarkSpec) -> Self {
        let input = match &spec.input {
            InputSignal::Constant(v) => InputFile::Constant { values: v.clone() },
            InputSignal::Sine {
                amplitude,
                frequency,
                offset,
            } => InputFile::Sine {
                amplitude: *amplitude,
                frequency: *frequency,
                offset: *offset,
            },
        };
        Self {
            system: spec.system.name().into(),
            initial_state: Some(spec.initial_state.clone()),
            duration: Some(spec.duration),
            rate: Some(spec.rate),
            noise: Some(spec.noise),
            seed: Some(spec.seed),
            substeps: Some(spec.substeps),
            input: Some(input),
        }
    }
}

pub fn load_benchmark_spec(path: &Path) -> Result<BenchmarkSpec> {
    let file: BenchmarkSpecFile = parse_toml(path)?;
    file.resolve().map_err(|e| format_err(path, e))
}

pub fn save_benchmark_spec(path: &Path, spec: &BenchmarkSpec) -> Result<()> {
    write_text(path, &to_toml(path, &BenchmarkSpecFile::from_spec(spec))?)
}

// ----------------------------------------------------------- train configs

macro_rules! train_config_file {
    ($($field:ident : $ty:ty),* $(,)?) => {
        /// Training config as written on disk. Fields override the preset's
        /// values (or the defaults when no preset is named).
        #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct TrainConfigFile {
            /// System whose tuned configuration is the starting point.
            #[serde(default, skip_serializing_if = "Option::is_none")]
            pub preset: Option<String>,
            /// `"dataset"` or `"batch"`.
            #[serde(default, skip_serializing_if = "Option::is_none")]
            pub theta_source: Option<String>,
            $(
                #[serde(default, skip_serializing_if = "Option::is_none")]
                pub $field: Option<$ty>,
            )*
        }

        impl TrainConfigFile {
            pub fn resolve(&self) -> sysrec_core::Result<TrainConfig> {
                let mut c = match &self.preset {
                    Some(name) => name.parse::<System>()?.train_config(),
                    None => TrainConfig::default(),
                };
                $(
                    if let Some(v) = &self.$field {
                        c.$field = v.clone();
                    }
                )*
                if let Some(s) = &self.theta_source {
                    c.theta_source = match s.as_str() {
                        "dataset" => ThetaSource::Dataset,
                        "batch" => ThetaSource::Batch,
                        other => {
                            return Err(sysrec_core::Error::Domain(format!(
                                "theta_source must be 'dataset' or 'batch', not '{other}'"
                            )))
                        }
                    };
                }
                Ok(c)
            }

            /// Fully populated form of a config, without a preset.
            pub fn from_config(c: &TrainConfig) -> Self {
                Self {
                    preset: None,
                    theta_source: Some(
                        match c.theta_source {
                            ThetaSource::Dataset => "dataset",
                            ThetaSource::Batch => "batch",
                        }
                        .into(),
                    ),
                    $($field: Some(c.$field.clone()),)*
                }
            }
        }
    };
}

train_config_file! {
    epochs: usize,
    batch_size: usize,
    window: usize,
    stride: usize,
    hidden: usize,
    dense_hidden: usize,
    order: u32,
    include_constant: bool,
    tau: f64,
    learning_rate: f64,
    lr_floor: f64,
    beta1: f64,
    beta2: f64,
    adam_eps: f64,
    substeps: usize,
    divergence_cap: f64,
    state_bound: f64,
    segment_start: f64,
    segment_full: f64,
    tau_start: f64,
    input_shifts: bool,
    standardize: bool,
    precondition: bool,
    output_init_scale: f64,
    encoder_stride: usize,
    seed: u64,
}

pub fn load_train_config(path: &Path) -> Result<TrainConfigFile> {
    let file: TrainConfigFile = parse_toml(path)?;
    file.resolve().map_err(|e| format_err(path, e))?;
    Ok(file)
}

pub fn train_config_to_string(config: &TrainConfig) -> String {
    toml::to_string(&TrainConfigFile::from_config(config)).expect("config serialises")
}

// ------------------------------------------------------ measurement tables

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct MeasurementRecord {
    platform: u8,
    task: u8,
    hi: f64,
    e: f64,
    #[serde(rename = "N")]
    n: f64,
    error: f64,
    time_s: f64,
    #[serde(rename = "energy_J")]
    energy_j: f64,
    #[serde(rename = "dram_MB")]
    dram_mb: f64,
}

pub fn load_measurements(path: &Path) -> Result<MeasurementTable> {
    let text = read_text(path)?;
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (k, rec) in r.deserialize::<MeasurementRecord>().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = MeasurementRow {
            platform: rec.platform,
            task: rec.task,
            hi: rec.hi,
            e: rec.e,
            n: rec.n,
            error: rec.error,
            time_s: rec.time_s,
            energy_j: rec.energy_j,
            dram_mb: rec.dram_mb,
        };
        MeasurementTable::new(vec![row]).map_err(|e| Error::Row {
            path: path.to_path_buf(),
            row: k + 2,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err(path, "no measurement rows"));
    }
    Ok(MeasurementTable::new(rows)?)
}

pub fn save_measurements(path: &Path, table: &MeasurementTable) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record([
            "platform", "task", "hi", "e", "N", "error", "time_s", "energy_J", "dram_MB",
        ])
        .map_err(|e| csv_err(path, e))?;
        for r in &table.rows {
            let mut rec = vec![r.platform.to_string(), r.task.to_string()];
            rec.extend([r.hi, r.e, r.n, r.error, r.time_s, r.energy_j, r.dram_mb].map(num));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(io_err(path))?;
    }
    write_text(path, std::str::from_utf8(&out).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sysrec_core::library::lotka_volterra_reference;
    use sysrec_core::net::init_params;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e22, 0.52, f64::MIN_POSITIVE] {
            assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let t = Trajectory::new(
            0.5,
            0.1,
            2,
            1,
            vec![1.0, 2.0, 1.0 / 3.0, -4.0, 5.0, 6.5],
            vec![0.0, 1.0, 2.0],
        )
        .unwrap();
        save_csv(&p, &t).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.states(), t.states());
        assert_eq!(back.inputs(), t.inputs());
        assert_eq!(back.len(), 3);
        assert!((back.dt() - 0.1).abs() < 1e-15);
        assert!(read_text(&p).unwrap().starts_with("t,x1,x2,u1\n"));
    }

    #[test]
    fn bad_rows_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_text(&p, "t,x1\n0,1\n1,abc\n").unwrap();
        let e = load_csv(&p).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
        write_text(&p, "t,x1\n0,1\n1,2\n2.5,3\n").unwrap();
        let e = load_csv(&p).unwrap_err().to_string();
        assert!(e.contains("uniform grid"), "{e}");
        write_text(&p, "time,x1\n0,1\n").unwrap();
        assert!(load_csv(&p).is_err());
    }

    #[test]
    fn model_round_trip() {
        let m = lotka_volterra_reference();
        let text = model_to_string(&m);
        let back = ModelFile::to_model(&toml::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(text.contains("x1*x2"));
    }

    #[test]
    fn params_round_trip() {
        let shape = NetShape::new(2, 1, 3, 6, 1).with_dense_hidden(4);
        let p = init_params(shape, 0.001, 7).unwrap();
        let bytes = params_to_bytes(&p);
        assert_eq!(params_from_bytes(&bytes).unwrap(), p);
        assert!(params_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(params_summary(&p).contains("seed: 7"));
    }

    #[test]
    fn specs_take_defaults() {
        let f: BenchmarkSpecFile = toml::from_str("system = \"lotka_volterra\"\nnoise = 0.1\n").unwrap();
        let s = f.resolve().unwrap();
        assert_eq!(s.noise, 0.1);
        assert_eq!(s.initial_state, vec![30.0, 4.0]);
        let full = BenchmarkSpecFile::from_spec(&s);
        assert_eq!(full.resolve().unwrap(), s);
        assert!(toml::from_str::<BenchmarkSpecFile>("system = 3").is_err());
    }

    #[test]
    fn train_config_round_trip() {
        let f: TrainConfigFile = toml::from_str("preset = \"lorenz\"\nepochs = 7\n").unwrap();
        let c = f.resolve().unwrap();
        assert_eq!((c.epochs, c.window), (7, 40));
        let text = train_config_to_string(&c);
        let back: TrainConfigFile = toml::from_str(&text).unwrap();
        assert_eq!(back.resolve().unwrap(), c);
    }

    #[test]
    fn measurement_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let t = MeasurementTable::bundled();
        save_measurements(&p, &t).unwrap();
        assert_eq!(load_measurements(&p).unwrap(), t);
        write_text(
            &p,
            "platform,task,hi,e,N,error,time_s,energy_J,dram_MB\n3,0,16,64,100,1,1,1,1\n",
        )
        .unwrap();
        let e = load_measurements(&p).unwrap_err().to_string();
        assert!(e.contains("row 2"), "{e}");
    }
}
