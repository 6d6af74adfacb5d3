//! On-disk formats: binary checkpoints and trajectories, CSV maps and
//! series, PGM heatmaps, JSON sidecars.
//!
//! Everything written here is a pure function of its inputs, so reruns with
//! the same data produce byte-identical files. Floats in text formats carry
//! 17 significant digits and round-trip exactly.
//!
//! Binary container layout (all integers 32-bit little-endian, all floats
//! 64-bit little-endian):
//!
//! - `FGV1` (network parameters): magic, layer count `L`, `L + 1` widths,
//!   then per layer the row-major weight matrix followed by the bias vector.
//! - `FGT1` (trajectories): magic, solver id, stored flag, state and
//!   conditioning shapes with optional lat-lon metadata, named scalar
//!   conditioners, grid levels and schedule parameters, the conditioning
//!   vector, the noise sample, the final state, and (when stored) the state
//!   at every grid level.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::mlp::Mlp;
use crate::sampler::{Solver, Trajectory};
use crate::series::ConditioningSeries;
use crate::state::{Conditioning, GridMeta, StateVector};

const MLP_MAGIC: &[u8; 4] = b"FGV1";
const TRAJ_MAGIC: &[u8; 4] = b"FGT1";

/// Format a float with 17 significant digits (round-trips any f64).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------
// little-endian primitives
// ---------------------------------------------------------------------

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for v in vs {
            self.f64(*v)?;
        }
        Ok(())
    }
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b)?;
        Ok(())
    }
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inp.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.inp.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.inp.read_exact(&mut b)?;
        Ok(b)
    }
    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }
}

fn shape_u32(shape: &[usize]) -> Result<Vec<u32>> {
    shape
        .iter()
        .map(|&s| u32::try_from(s).map_err(|_| Error::Format("dimension exceeds u32".into())))
        .collect()
}

// ---------------------------------------------------------------------
// FGV1: network parameters
// ---------------------------------------------------------------------

pub fn save_mlp(path: &Path, net: &Mlp) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer { out: std::io::BufWriter::new(file) };
    w.bytes(MLP_MAGIC)?;
    w.u32(net.n_layers() as u32)?;
    for width in shape_u32(net.widths())? {
        w.u32(width)?;
    }
    for l in 0..net.n_layers() {
        w.f64s(&net.weights()[l])?;
        w.f64s(&net.biases()[l])?;
    }
    w.out.flush()?;
    Ok(())
}

pub fn load_mlp(path: &Path) -> Result<Mlp> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader { inp: std::io::BufReader::new(file) };
    r.magic(MLP_MAGIC)?;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Format(format!("implausible layer count {n_layers}")));
    }
    let widths: Vec<usize> = (0..n_layers + 1)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        weights.push(r.f64s(widths[l] * widths[l + 1])?);
        biases.push(r.f64s(widths[l + 1])?);
    }
    Mlp::from_parts(widths, weights, biases)
}

// ---------------------------------------------------------------------
// FGT1: trajectories
// ---------------------------------------------------------------------

fn write_shape_and_meta<W: Write>(w: &mut Writer<W>, sv: &StateVector) -> Result<()> {
    let dims = shape_u32(sv.shape())?;
    w.u32(dims.len() as u32)?;
    for d in dims {
        w.u32(d)?;
    }
    match sv.grid_meta() {
        Some(meta) => {
            w.u32(1)?;
            w.u32(meta.n_lat as u32)?;
            w.u32(meta.n_lon as u32)?;
            w.f64s(&meta.latitudes)?;
        }
        None => w.u32(0)?,
    }
    Ok(())
}

fn read_shape_and_meta<R: Read>(r: &mut Reader<R>) -> Result<(Vec<usize>, Option<GridMeta>)> {
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible shape rank {rank}")));
    }
    let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    let meta = if r.u32()? == 1 {
        let n_lat = r.u32()? as usize;
        let n_lon = r.u32()? as usize;
        let lats = r.f64s(n_lat)?;
        Some(GridMeta::new(n_lat, n_lon, lats)?)
    } else {
        None
    };
    Ok((shape, meta))
}

fn state_with_meta(data: Vec<f64>, shape: &[usize], meta: Option<GridMeta>) -> Result<StateVector> {
    let sv = StateVector::new(data, shape.to_vec())?;
    match meta {
        Some(m) => sv.with_grid_meta(m),
        None => Ok(sv),
    }
}

pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer { out: std::io::BufWriter::new(file) };
    w.bytes(TRAJ_MAGIC)?;
    w.u32(match traj.solver() {
        Solver::Euler => 0,
        Solver::Heun => 1,
    })?;
    w.u32(traj.is_stored() as u32)?;
    write_shape_and_meta(&mut w, traj.xi())?;
    write_shape_and_meta(&mut w, traj.conditioning().c())?;
    let scalars = traj.conditioning().scalars();
    w.u32(scalars.len() as u32)?;
    for (name, value) in scalars {
        let bytes = name.as_bytes();
        w.u32(bytes.len() as u32)?;
        w.bytes(bytes)?;
        w.f64(*value)?;
    }
    let grid = traj.grid();
    w.u32(grid.levels().len() as u32)?;
    w.f64(grid.rho())?;
    w.f64(grid.sigma_min())?;
    w.f64(grid.sigma_max())?;
    w.f64s(grid.levels())?;
    w.f64s(traj.conditioning().c().data())?;
    w.f64s(traj.xi().data())?;
    w.f64s(traj.final_state().data())?;
    if let Some(states) = traj.states() {
        for s in states {
            w.f64s(s.data())?;
        }
    }
    w.out.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader { inp: std::io::BufReader::new(file) };
    r.magic(TRAJ_MAGIC)?;
    let solver = match r.u32()? {
        0 => Solver::Euler,
        1 => Solver::Heun,
        other => return Err(Error::Format(format!("unknown solver id {other}"))),
    };
    let stored = r.u32()? == 1;
    let (state_shape, state_meta) = read_shape_and_meta(&mut r)?;
    let (cond_shape, cond_meta) = read_shape_and_meta(&mut r)?;
    let n_scalars = r.u32()? as usize;
    let mut scalars = Vec::with_capacity(n_scalars);
    for _ in 0..n_scalars {
        let len = r.u32()? as usize;
        if len > 4096 {
            return Err(Error::Format("implausible scalar name length".into()));
        }
        let name = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::Format("scalar name is not utf-8".into()))?;
        scalars.push((name, r.f64()?));
    }
    let n_levels = r.u32()? as usize;
    let rho = r.f64()?;
    let sigma_min = r.f64()?;
    let sigma_max = r.f64()?;
    let levels = r.f64s(n_levels)?;
    let grid = TimeGrid::from_parts(levels, rho, sigma_min, sigma_max)?;

    let cond_len: usize = cond_shape.iter().product();
    let state_len: usize = state_shape.iter().product();
    let c = state_with_meta(r.f64s(cond_len)?, &cond_shape, cond_meta)?;
    let cond = Conditioning::new(c, scalars)?;
    let xi = state_with_meta(r.f64s(state_len)?, &state_shape, state_meta.clone())?;
    let final_state = state_with_meta(r.f64s(state_len)?, &state_shape, state_meta.clone())?;
    let states = if stored {
        let mut v = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            v.push(state_with_meta(r.f64s(state_len)?, &state_shape, state_meta.clone())?);
        }
        Some(v)
    } else {
        None
    };
    Trajectory::from_parts(grid, solver, cond, xi, final_state, states)
}

// ---------------------------------------------------------------------
// CSV maps
// ---------------------------------------------------------------------

/// Rows/columns view of a state for the CSV map format.
fn map_dims(sv: &StateVector) -> Result<(usize, usize)> {
    match sv.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Contract(format!("csv maps need rank 1 or 2, shape is {other:?}"))),
    }
}

/// Write `# shape: R C` then R rows of C comma-separated floats with 17
/// significant digits.
pub fn write_map_csv(path: &Path, sv: &StateVector) -> Result<()> {
    let (rows, cols) = map_dims(sv)?;
    let mut out = String::new();
    out.push_str(&format!("# shape: {rows} {cols}\n"));
    for r in 0..rows {
        let row = &sv.data()[r * cols..(r + 1) * cols];
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a CSV map back; single-row maps load as rank-1 states.
pub fn read_map_csv(path: &Path) -> Result<StateVector> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty csv map".into()))?;
    let dims: Vec<usize> = header
        .strip_prefix("# shape:")
        .ok_or_else(|| Error::Format("csv map missing '# shape:' header".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("bad shape token '{t}'"))))
        .collect::<Result<_>>()?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Format("csv map header needs exactly two dims".into()));
    };
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        if i >= rows {
            return Err(Error::Format("more rows than the declared shape".into()));
        }
        for tok in line.split(',') {
            data.push(
                tok.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad float '{tok}'")))?,
            );
        }
    }
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "csv map has {} values for shape {rows}x{cols}",
            data.len()
        )));
    }
    let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
    StateVector::new(data, shape)
}

// ---------------------------------------------------------------------
// PGM heatmaps
// ---------------------------------------------------------------------

/// Binary 8-bit grayscale PGM, linearly scaled between the map's min and
/// max (returned so callers can record them in a sidecar). A constant map
/// renders as black.
pub fn write_pgm(path: &Path, sv: &StateVector) -> Result<(f64, f64)> {
    let (rows, cols) = map_dims(sv)?;
    let min = sv.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = sv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut bytes = Vec::with_capacity(64 + rows * cols);
    bytes.extend_from_slice(format!("P5\n{cols} {rows}\n255\n").as_bytes());
    for v in sv.data() {
        let px = if span > 0.0 { ((v - min) / span * 255.0).round() as u8 } else { 0 };
        bytes.push(px);
    }
    std::fs::write(path, bytes)?;
    Ok((min, max))
}

// ---------------------------------------------------------------------
// Series CSV + JSON sidecars
// ---------------------------------------------------------------------

/// Sidecar describing the conditioning shape of a series CSV.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SeriesMeta {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_meta: Option<GridMeta>,
}

/// Write `tau,c...` rows (17 significant digits throughout).
pub fn write_series_csv(path: &Path, series: &ConditioningSeries) -> Result<()> {
    let mut out = String::new();
    for (tau, value) in series.taus().iter().zip(series.values()) {
        let mut fields = vec![fmt_f64(*tau)];
        fields.extend(value.data().iter().map(|v| fmt_f64(*v)));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the sidecar next to a series CSV.
pub fn write_series_meta(path: &Path, meta: &SeriesMeta) -> Result<()> {
    write_json(path, meta)
}

/// Load a series CSV. Without a sidecar the conditioning is flat
/// `[columns - 1]`.
pub fn read_series_csv(path: &Path, meta: Option<&SeriesMeta>) -> Result<ConditioningSeries> {
    let text = std::fs::read_to_string(path)?;
    let mut nodes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {}: bad float '{t}'", i + 1)))
            })
            .collect::<Result<_>>()?;
        if fields.len() < 2 {
            return Err(Error::Format(format!("line {}: need tau plus values", i + 1)));
        }
        let tau = fields[0];
        let data = fields[1..].to_vec();
        let value = match meta {
            Some(m) => state_with_meta(data, &m.shape, m.grid_meta.clone())?,
            None => StateVector::from_vec(data)?,
        };
        nodes.push((tau, value));
    }
    ConditioningSeries::new(nodes)
}

/// Sidecar path convention: `<file>.meta.json`.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("json encode: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
