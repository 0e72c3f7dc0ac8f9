//! On-disk artifact formats.
//!
//! Every CSV starts with `# key: value` metadata lines, then a header row.
//! Numbers are written with 9 significant digits so regenerated artifacts
//! diff cleanly. Trained models use a line-oriented text format with exact
//! (shortest round-trip) floats.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ecocruise_core::inverse::GammaFlags;
use ecocruise_core::nn::{Dataset, MinMaxScaler, MlpModel};
use ecocruise_core::{GammaSeries, RoadProfile, Trajectory};

use crate::error::{Error, Result};

/// Ordered `# key: value` header block.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta(pub Vec<(String, String)>);

impl Meta {
    pub fn new() -> Self {
        Self::default().with("generator", concat!("ecocruise ", env!("CARGO_PKG_VERSION")))
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.0 {
            let _ = writeln!(s, "# {k}: {v}");
        }
        s
    }

    /// Leading comment lines of `text`; lines without a `key: value` shape are skipped.
    pub fn parse(text: &str) -> Self {
        let mut m = Self::default();
        for line in text.lines() {
            let Some(rest) = line.strip_prefix('#') else { break };
            if let Some((k, v)) = rest.split_once(':') {
                m.0.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        m
    }
}

/// `%.9g`: 9 significant digits, trailing zeros dropped.
pub fn g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mant));
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// A missing input is the caller's mistake and reported as such.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Validation(format!("{}: no such file", path.display())),
        _ => Error::io(path, e),
    })
}

/// Write through a sibling temp file so readers never see a partial artifact.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Render metadata, header and rows as CSV text.
pub fn render_csv<I, R>(meta: &Meta, header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
    meta.render() + &body
}

/// Parsed CSV table: each record keeps its 1-based file line for messages.
pub struct Table {
    pub path: PathBuf,
    pub meta: Meta,
    pub header: Vec<String>,
    pub rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let meta = Meta::parse(text);
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
        let csv_err = |e: csv::Error| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, line, e.to_string())
        };
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        if header.iter().all(|h| h.is_empty()) {
            return Err(Error::parse(path, 1, "missing header row"));
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { path: path.to_path_buf(), meta, header, rows })
    }

    pub fn expect_header(&self, expected: &[&str]) -> Result<()> {
        if self.header.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(Error::parse(
                &self.path,
                self.header_line(),
                format!("expected header `{}`, found `{}`", expected.join(","), self.header.join(",")),
            ));
        }
        Ok(())
    }

    fn header_line(&self) -> u64 {
        self.meta.0.len() as u64 + 1
    }

    pub fn num(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<f64> {
        self.opt_num(line, rec, col)?
            .ok_or_else(|| Error::parse(&self.path, line, format!("empty `{}`", self.header[col])))
    }

    pub fn opt_num(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<Option<f64>> {
        let raw = rec.get(col).unwrap_or("");
        if raw.is_empty() {
            return Ok(None);
        }
        raw.parse::<f64>()
            .map(Some)
            .map_err(|_| Error::parse(&self.path, line, format!("`{}`: not a number: {raw:?}", self.header[col])))
    }

    pub fn int(&self, line: u64, rec: &csv::StringRecord, col: usize) -> Result<u64> {
        let raw = rec.get(col).unwrap_or("");
        raw.parse::<u64>()
            .map_err(|_| Error::parse(&self.path, line, format!("`{}`: not an integer: {raw:?}", self.header[col])))
    }
}

pub const ELEVATION_HEADER: [&str; 2] = ["distance_m", "elevation_m"];
pub const ROAD_HEADER: [&str; 4] = ["index", "position_m", "elevation_m", "grade"];
pub const TRAJECTORY_HEADER: [&str; 6] = ["index", "position_m", "v_mps", "vavg_mps", "te_nm", "fuel_kg_per_m"];
pub const GAMMA_HEADER: [&str; 5] = ["index", "position_m", "gamma", "residual", "flags"];

/// Surveyed `(distance, elevation)` rows resampled onto a uniform `ds` grid.
pub fn read_elevation(path: &Path, ds: f64) -> Result<RoadProfile> {
    let t = Table::read(path)?;
    t.expect_header(&ELEVATION_HEADER)?;
    let mut rows = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        rows.push((t.num(*line, rec, 0)?, t.num(*line, rec, 1)?));
    }
    Ok(RoadProfile::resample(&rows, ds)?)
}

pub fn render_road(road: &RoadProfile, meta: &Meta) -> String {
    let rows = road.elevation().iter().enumerate().map(|(i, &h)| {
        let grade = road.grade().get(i).map_or(String::new(), |&g| g9(g));
        [i.to_string(), g9(road.position(i)), g9(h), grade]
    });
    render_csv(meta, &ROAD_HEADER, rows)
}

/// Reads an exported road; grades are re-derived from the elevations.
pub fn read_road(path: &Path) -> Result<(RoadProfile, Meta)> {
    let t = Table::read(path)?;
    t.expect_header(&ROAD_HEADER)?;
    if t.rows.len() < 2 {
        return Err(Error::parse(path, t.header_line(), "road needs at least 2 rows"));
    }
    let mut positions = Vec::with_capacity(t.rows.len());
    let mut elevation = Vec::with_capacity(t.rows.len());
    for (i, (line, rec)) in t.rows.iter().enumerate() {
        if t.int(*line, rec, 0)? != i as u64 {
            return Err(Error::parse(path, *line, format!("expected index {i}")));
        }
        positions.push(t.num(*line, rec, 1)?);
        elevation.push(t.num(*line, rec, 2)?);
    }
    let ds = positions[1] - positions[0];
    let (last_line, _) = t.rows[t.rows.len() - 1];
    let span = positions[positions.len() - 1] - positions[0];
    if !(ds > 0.0) || (span - ds * (positions.len() - 1) as f64).abs() > 1e-6 * span.max(1.0) {
        return Err(Error::parse(path, last_line, "positions are not uniformly spaced"));
    }
    Ok((RoadProfile::from_elevation(ds, elevation)?, t.meta))
}

pub fn render_trajectory(traj: &Trajectory, meta: &Meta) -> String {
    let rows = (0..traj.v.len()).map(|k| {
        let input = |x: Option<&f64>| x.map_or(String::new(), |&x| g9(x));
        [k.to_string(), g9(traj.position(k)), g9(traj.v[k]), g9(traj.vavg[k]), input(traj.te.get(k)), input(traj.fuel.get(k))]
    });
    render_csv(meta, &TRAJECTORY_HEADER, rows)
}

/// Inverse of [`render_trajectory`]: `P + 1` state rows, inputs empty on the last.
pub fn read_trajectory(path: &Path) -> Result<(Trajectory, Meta)> {
    let t = Table::read(path)?;
    t.expect_header(&TRAJECTORY_HEADER)?;
    if t.rows.len() < 2 {
        return Err(Error::parse(path, t.header_line(), "trajectory needs at least 2 rows"));
    }
    let n = t.rows.len();
    let mut traj = Trajectory { ds: 0.0, v: Vec::with_capacity(n), vavg: Vec::with_capacity(n), te: Vec::new(), fuel: Vec::new() };
    let mut positions = Vec::with_capacity(n);
    for (i, (line, rec)) in t.rows.iter().enumerate() {
        positions.push(t.num(*line, rec, 1)?);
        traj.v.push(t.num(*line, rec, 2)?);
        traj.vavg.push(t.num(*line, rec, 3)?);
        let te = t.opt_num(*line, rec, 4)?;
        let fuel = t.opt_num(*line, rec, 5)?;
        match (i + 1 < n, te, fuel) {
            (true, Some(te), Some(f)) => {
                traj.te.push(te);
                traj.fuel.push(f);
            }
            (false, None, None) => {}
            (true, ..) => return Err(Error::parse(path, *line, "missing te_nm or fuel_kg_per_m")),
            (false, ..) => return Err(Error::parse(path, *line, "final state row must leave te_nm and fuel_kg_per_m empty")),
        }
    }
    traj.ds = positions[1] - positions[0];
    Ok((traj, t.meta))
}

pub fn render_gamma(series: &GammaSeries, ds: f64, meta: &Meta) -> String {
    let rows = (0..series.len()).map(|i| {
        let k = series.positions[i];
        [k.to_string(), g9(k as f64 * ds), g9(series.gamma[i]), g9(series.residuals[i]), series.flags[i].bits().to_string()]
    });
    render_csv(meta, &GAMMA_HEADER, rows)
}

pub fn read_gamma(path: &Path) -> Result<(GammaSeries, Meta)> {
    let t = Table::read(path)?;
    t.expect_header(&GAMMA_HEADER)?;
    let mut s = GammaSeries::default();
    for (line, rec) in &t.rows {
        s.positions.push(t.int(*line, rec, 0)? as usize);
        s.gamma.push(t.num(*line, rec, 2)?);
        s.residuals.push(t.num(*line, rec, 3)?);
        let bits = t.int(*line, rec, 4)?;
        if bits > 7 {
            return Err(Error::parse(path, *line, format!("unknown flag bits {bits}")));
        }
        s.flags.push(GammaFlags(bits as u8));
    }
    Ok((s, t.meta))
}

/// `g_1..g_P,v_ref,gamma` for a dataset whose last feature is the set point.
pub fn dataset_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..dim).map(|i| format!("g_{i}")).collect();
    h.push("v_ref".into());
    h.push("gamma".into());
    h
}

pub fn render_dataset(data: &Dataset, meta: &Meta) -> String {
    let header = dataset_header(data.dim);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..data.len()).map(|i| data.row(i).iter().chain([&data.targets[i]]).map(|&x| g9(x)).collect::<Vec<_>>());
    render_csv(meta, &header, rows)
}

/// Sample positions are not stored; rows are numbered in file order.
pub fn read_dataset(path: &Path) -> Result<(Dataset, Meta)> {
    let t = Table::read(path)?;
    let dim = t.header.len().saturating_sub(1);
    if dim < 2 {
        return Err(Error::parse(path, t.header_line(), "dataset needs grade columns, v_ref and gamma"));
    }
    let expected = dataset_header(dim);
    t.expect_header(&expected.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut data = Dataset::new(dim);
    let mut row = vec![0.0; dim];
    for (i, (line, rec)) in t.rows.iter().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = t.num(*line, rec, j)?;
        }
        data.push(&row, t.num(*line, rec, dim)?, i)?;
    }
    Ok((data, t.meta))
}

const MODEL_MAGIC: &str = "ecocruise-mlp 1";

fn join_exact(xs: &[f64]) -> String {
    let mut s = String::with_capacity(xs.len() * 24);
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:e}");
    }
    s
}

/// Self-describing text model: dims, both scalers, provenance digests and
/// every weight row (one output unit per line) followed by the bias line.
pub fn render_model(model: &MlpModel, meta: &Meta) -> String {
    let mut s = meta.render();
    let _ = writeln!(s, "{MODEL_MAGIC}");
    let dims: Vec<String> = model.dims.iter().map(usize::to_string).collect();
    let _ = writeln!(s, "dims {}", dims.join(" "));
    let _ = writeln!(s, "config_fingerprint {:016x}", model.config_fingerprint);
    let _ = writeln!(s, "scaler_provenance {:016x}", model.scaler_provenance);
    let _ = writeln!(s, "input_min {}", join_exact(&model.input_scaler.min));
    let _ = writeln!(s, "input_range {}", join_exact(&model.input_scaler.range));
    let _ = writeln!(s, "target_min {}", join_exact(&model.target_scaler.min));
    let _ = writeln!(s, "target_range {}", join_exact(&model.target_scaler.range));
    for l in 0..model.layers() {
        let (inp, out) = (model.dims[l], model.dims[l + 1]);
        let _ = writeln!(s, "layer {l} {out} {inp}");
        for r in 0..out {
            let _ = writeln!(s, "{}", join_exact(&model.weights[l][r * inp..(r + 1) * inp]));
        }
        let _ = writeln!(s, "{}", join_exact(&model.biases[l]));
    }
    s
}

struct Lines<'a> {
    path: &'a Path,
    it: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(u64, &'a str)> {
        loop {
            match self.it.next() {
                Some((_, l)) if l.starts_with('#') || l.trim().is_empty() => continue,
                Some((i, l)) => return Ok((i as u64 + 1, l.trim())),
                None => return Err(Error::parse(self.path, 0, "unexpected end of model file")),
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(u64, &'a str)> {
        let (n, l) = self.next()?;
        match l.split_once(' ') {
            Some((k, rest)) if k == key => Ok((n, rest)),
            _ if l == key => Ok((n, "")),
            _ => Err(Error::parse(self.path, n, format!("expected `{key}`"))),
        }
    }

    fn floats(&self, n: u64, s: &str, len: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| Error::parse(self.path, n, "malformed number"))?;
        if v.len() != len {
            return Err(Error::parse(self.path, n, format!("expected {len} values, found {}", v.len())));
        }
        Ok(v)
    }

    fn hex(&self, n: u64, s: &str) -> Result<u64> {
        u64::from_str_radix(s, 16).map_err(|_| Error::parse(self.path, n, "malformed digest"))
    }
}

pub fn parse_model(path: &Path, text: &str) -> Result<(MlpModel, Meta)> {
    let meta = Meta::parse(text);
    let mut ln = Lines { path, it: text.lines().enumerate().peekable() };
    let (n, magic) = ln.next()?;
    if magic != MODEL_MAGIC {
        return Err(Error::parse(path, n, format!("not an `{MODEL_MAGIC}` model")));
    }
    let (n, dims) = ln.keyed("dims")?;
    let dims: Vec<usize> = dims
        .split_whitespace()
        .map(str::parse)
        .collect::<Result<_, _>>()
        .map_err(|_| Error::parse(path, n, "malformed dims"))?;
    if dims.len() < 2 || dims.contains(&0) || dims[dims.len() - 1] != 1 {
        return Err(Error::parse(path, n, "dims must be positive and end in a single output"));
    }
    let (n, fp) = ln.keyed("config_fingerprint")?;
    let config_fingerprint = ln.hex(n, fp)?;
    let (n, prov) = ln.keyed("scaler_provenance")?;
    let scaler_provenance = ln.hex(n, prov)?;
    let (n, s) = ln.keyed("input_min")?;
    let in_min = ln.floats(n, s, dims[0])?;
    let (n, s) = ln.keyed("input_range")?;
    let in_range = ln.floats(n, s, dims[0])?;
    let (n, s) = ln.keyed("target_min")?;
    let t_min = ln.floats(n, s, 1)?;
    let (n, s) = ln.keyed("target_range")?;
    let t_range = ln.floats(n, s, 1)?;

    let mut model = MlpModel::new(&dims, 0)?;
    for l in 0..dims.len() - 1 {
        let (inp, out) = (dims[l], dims[l + 1]);
        let (n, shape) = ln.keyed("layer")?;
        if shape.split_whitespace().ne([l.to_string(), out.to_string(), inp.to_string()].iter().map(String::as_str)) {
            return Err(Error::parse(path, n, format!("expected `layer {l} {out} {inp}`")));
        }
        for r in 0..out {
            let (n, row) = ln.next()?;
            let w = ln.floats(n, row, inp)?;
            model.weights[l][r * inp..(r + 1) * inp].copy_from_slice(&w);
        }
        let (n, b) = ln.next()?;
        model.biases[l] = ln.floats(n, b, out)?;
    }
    if let Some((i, extra)) = ln.it.find(|(_, l)| !l.trim().is_empty() && !l.starts_with('#')) {
        return Err(Error::parse(path, i as u64 + 1, format!("trailing content {extra:?}")));
    }
    model.input_scaler = MinMaxScaler { min: in_min, range: in_range };
    model.target_scaler = MinMaxScaler { min: t_min, range: t_range };
    model.scaler_provenance = scaler_provenance;
    model.config_fingerprint = config_fingerprint;
    Ok((model, meta))
}

pub fn read_model(path: &Path) -> Result<(MlpModel, Meta)> {
    parse_model(path, &read_text(path)?)
}
