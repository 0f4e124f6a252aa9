//! Versioned artifact formats: model and density JSON, trajectory/loss/bands
//! CSV.
//!
//! Every JSON artifact carries a `format_version` field. Model files
//! round-trip parameters bit-exactly (the JSON float encoding is the shortest
//! representation that parses back to the identical value).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adjoint_opt::LossRecord;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::measure::DensityField;
use crate::pipeline::QuantileBands;
use crate::scalar::{to_f64, Scalar};
use crate::velocity::{Activation, ModelSpec, VelocityModel};

/// Version tag written into every JSON artifact.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRepr<T> {
    pub dim: usize,
    pub bounds: Vec<(T, T)>,
    pub counts: Vec<usize>,
}

impl<T: Scalar> GridRepr<T> {
    pub fn from_grid(grid: &Grid<T>) -> Self {
        Self {
            dim: grid.dim(),
            bounds: grid.bounds().to_vec(),
            counts: grid.counts().to_vec(),
        }
    }

    pub fn to_grid(&self) -> Result<Grid<T>> {
        if self.dim != self.bounds.len() {
            return Err(Error::Format(format!(
                "grid dim {} != bounds length {}",
                self.dim,
                self.bounds.len()
            )));
        }
        Grid::new(self.bounds.clone(), self.counts.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityRepr<T> {
    pub format_version: u32,
    pub grid: GridRepr<T>,
    pub mass: Vec<T>,
}

fn check_version(version: u32, what: &str) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{what}: unsupported format_version {version} (expected {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

pub fn density_to_json<T: Scalar>(rho: &DensityField<T>) -> Result<String> {
    let repr = DensityRepr {
        format_version: FORMAT_VERSION,
        grid: GridRepr::from_grid(rho.grid()),
        mass: rho.mass().to_vec(),
    };
    Ok(serde_json::to_string_pretty(&repr)?)
}

pub fn density_from_json<T: Scalar>(json: &str) -> Result<DensityField<T>> {
    let repr: DensityRepr<T> = serde_json::from_str(json)?;
    check_version(repr.format_version, "density")?;
    DensityField::new(repr.grid.to_grid()?, repr.mass)
}

pub fn save_density<T: Scalar>(path: &Path, rho: &DensityField<T>) -> Result<()> {
    fs::write(path, density_to_json(rho)?)?;
    Ok(())
}

pub fn load_density<T: Scalar>(path: &Path) -> Result<DensityField<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read density file {}: {e}", path.display())))?;
    density_from_json(&text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelRepr<T> {
    pub format_version: u32,
    pub variant: String,
    pub grid: GridRepr<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degree: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<String>,
    pub theta: Vec<T>,
}

pub fn model_to_json<T: Scalar>(model: &VelocityModel<T>) -> Result<String> {
    let (variant, degree, hidden, activation) = match model.spec() {
        ModelSpec::PiecewiseConstant => ("piecewise_constant", None, None, None),
        ModelSpec::Polynomial { degree } => ("polynomial", Some(degree), None, None),
        ModelSpec::NeuralNet { hidden, activation } => (
            "neural_net",
            None,
            Some(hidden),
            Some(activation.name().to_string()),
        ),
    };
    let repr = ModelRepr {
        format_version: FORMAT_VERSION,
        variant: variant.to_string(),
        grid: GridRepr::from_grid(model.grid()),
        degree,
        hidden,
        activation,
        theta: model.theta().to_vec(),
    };
    Ok(serde_json::to_string_pretty(&repr)?)
}

pub fn model_from_json<T: Scalar>(json: &str) -> Result<VelocityModel<T>> {
    let repr: ModelRepr<T> = serde_json::from_str(json)?;
    check_version(repr.format_version, "model")?;
    let spec = match repr.variant.as_str() {
        "piecewise_constant" => ModelSpec::PiecewiseConstant,
        "polynomial" => ModelSpec::Polynomial {
            degree: repr
                .degree
                .ok_or_else(|| Error::Format("polynomial model needs a degree".to_string()))?,
        },
        "neural_net" => ModelSpec::NeuralNet {
            hidden: repr
                .hidden
                .ok_or_else(|| Error::Format("neural net model needs a width".to_string()))?,
            activation: Activation::parse(
                repr.activation.as_deref().unwrap_or("tanh"),
            )?,
        },
        other => return Err(Error::Format(format!("unknown model variant {other}"))),
    };
    VelocityModel::from_parts(&spec, repr.grid.to_grid()?, repr.theta)
}

pub fn save_model<T: Scalar>(path: &Path, model: &VelocityModel<T>) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<VelocityModel<T>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read model file {}: {e}", path.display())))?;
    model_from_json(&text)
}

fn stamp_line(out: &mut String, stamp: Option<&str>) {
    if let Some(s) = stamp {
        out.push_str(&format!("# generated {s}\n"));
    }
}

/// Trajectory CSV: optional leading time column, then one column per state
/// coordinate, with a header row naming the axes.
pub fn trajectory_to_csv<T: Scalar>(
    traj: &Trajectory<T>,
    with_time: bool,
    stamp: Option<&str>,
) -> String {
    let mut out = String::new();
    stamp_line(&mut out, stamp);
    let mut header: Vec<String> = Vec::new();
    if with_time {
        header.push("t".to_string());
    }
    for k in 0..traj.dim() {
        header.push(format!("x{k}"));
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in traj.rows().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        if with_time {
            let t = traj
                .times()
                .map(|ts| to_f64(ts[i]))
                .unwrap_or(i as f64);
            fields.push(format!("{t}"));
        }
        for v in row {
            fields.push(format!("{}", to_f64(*v)));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_trajectory_csv<T: Scalar>(
    path: &Path,
    traj: &Trajectory<T>,
    with_time: bool,
    stamp: Option<&str>,
) -> Result<()> {
    fs::write(path, trajectory_to_csv(traj, with_time, stamp))?;
    Ok(())
}

/// Parse a trajectory CSV. Comment lines (`#`) and a non-numeric header row
/// are skipped; `time_column` strips the leading column into sample times.
pub fn trajectory_from_csv<T: Scalar>(text: &str, time_column: bool) -> Result<Trajectory<T>> {
    let mut traj: Option<Trajectory<T>> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> =
            fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if traj.is_none() => continue, // header row
            Err(e) => {
                return Err(Error::Format(format!(
                    "line {}: cannot parse '{line}': {e}",
                    lineno + 1
                )))
            }
        };
        let (t, state) = if time_column {
            if values.len() < 2 {
                return Err(Error::Format(format!(
                    "line {}: need a time column plus at least one coordinate",
                    lineno + 1
                )));
            }
            (Some(values[0]), &values[1..])
        } else {
            (None, &values[..])
        };
        let traj = traj.get_or_insert_with(|| Trajectory::new(state.len()));
        if state.len() != traj.dim() {
            return Err(Error::Format(format!(
                "line {}: expected {} coordinates, got {}",
                lineno + 1,
                traj.dim(),
                state.len()
            )));
        }
        let row: Vec<T> = state
            .iter()
            .map(|&v| T::from_f64(v).ok_or_else(|| Error::Format("bad float".to_string())))
            .collect::<Result<_>>()?;
        match t {
            Some(tv) => traj.push_timed(
                T::from_f64(tv).ok_or_else(|| Error::Format("bad time".to_string()))?,
                &row,
            ),
            None => traj.push(&row),
        }
    }
    traj.ok_or(Error::EmptyMeasure)
}

pub fn read_trajectory_csv<T: Scalar>(path: &Path, time_column: bool) -> Result<Trajectory<T>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Format(format!("cannot read trajectory file {}: {e}", path.display()))
    })?;
    trajectory_from_csv(&text, time_column)
}

/// Loss-curve CSV: iteration, objective kind, value, gradient norm, wall time.
pub fn write_loss_csv<T: Scalar>(
    path: &Path,
    log: &[LossRecord<T>],
    stamp: Option<&str>,
) -> Result<()> {
    let mut out = String::new();
    stamp_line(&mut out, stamp);
    out.push_str("iteration,objective,value,grad_norm,wall_time_s\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.iter,
            r.kind.name(),
            to_f64(r.value),
            to_f64(r.grad_norm),
            r.wall_time_s
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Quantile-band CSV: time, one column per level, then the mean.
pub fn write_bands_csv<T: Scalar>(
    path: &Path,
    bands: &QuantileBands<T>,
    stamp: Option<&str>,
) -> Result<()> {
    let mut out = String::new();
    stamp_line(&mut out, stamp);
    let mut header = vec!["time".to_string()];
    for l in &bands.levels {
        header.push(format!("q{:02}", (to_f64(*l) * 100.0).round() as u32));
    }
    header.push("mean".to_string());
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..bands.times.len() {
        let mut fields = vec![format!("{}", to_f64(bands.times[i]))];
        for q in &bands.rows[i] {
            fields.push(format!("{}", to_f64(*q)));
        }
        fields.push(format!("{}", to_f64(bands.mean[i])));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Density frames CSV: one row per frame, time followed by the cell masses.
pub fn write_frames_csv<T: Scalar>(
    path: &Path,
    frames: &[(T, DensityField<T>)],
    stamp: Option<&str>,
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    if let Some(s) = stamp {
        writeln!(w, "# generated {s}")?;
    }
    if let Some((_, first)) = frames.first() {
        let g = first.grid();
        writeln!(
            w,
            "# grid dim={} counts={}",
            g.dim(),
            g.counts()
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("x")
        )?;
    }
    for (t, frame) in frames {
        write!(w, "{}", to_f64(*t))?;
        for m in frame.mass() {
            write!(w, ",{}", to_f64(*m))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Flat density CSV with a grid header comment.
pub fn write_density_csv<T: Scalar>(
    path: &Path,
    rho: &DensityField<T>,
    stamp: Option<&str>,
) -> Result<()> {
    let g = rho.grid();
    let mut out = String::new();
    stamp_line(&mut out, stamp);
    out.push_str(&format!("# format_version {FORMAT_VERSION}\n"));
    out.push_str(&format!(
        "# grid dim={} bounds={} counts={}\n",
        g.dim(),
        g.bounds()
            .iter()
            .map(|(a, b)| format!("{},{}", to_f64(*a), to_f64(*b)))
            .collect::<Vec<_>>()
            .join(";"),
        g.counts()
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("x")
    ));
    out.push_str("mass\n");
    for m in rho.mass() {
        out.push_str(&format!("{}\n", to_f64(*m)));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::InitConfig;

    #[test]
    fn model_json_round_trips_bit_exactly() {
        let g = Grid::new(vec![(-2.0, 2.0), (-1.0, 3.0)], vec![9, 9]).unwrap();
        let spec = ModelSpec::NeuralNet {
            hidden: 7,
            activation: Activation::Sigmoid,
        };
        let model =
            VelocityModel::<f64>::init(&spec, g, &InitConfig::default(), 123).unwrap();
        let json = model_to_json(&model).unwrap();
        let back: VelocityModel<f64> = model_from_json(&json).unwrap();
        assert_eq!(model.theta(), back.theta());
        assert_eq!(model.spec(), back.spec());
        assert_eq!(model.grid(), back.grid());
        // And a second encode is byte-identical.
        assert_eq!(json, model_to_json(&back).unwrap());
    }

    #[test]
    fn density_json_round_trips() {
        let g = Grid::new(vec![(0.0, 1.0)], vec![5]).unwrap();
        let rho =
            DensityField::new(g, vec![0.125, 0.25, 0.25, 0.25, 0.125]).unwrap();
        let json = density_to_json(&rho).unwrap();
        let back: DensityField<f64> = density_from_json(&json).unwrap();
        assert_eq!(rho.mass(), back.mass());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let g = Grid::new(vec![(0.0, 1.0)], vec![5]).unwrap();
        let rho = DensityField::new(g, vec![0.2; 5]).unwrap();
        let json = density_to_json(&rho)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(density_from_json::<f64>(&json).is_err());
    }

    #[test]
    fn trajectory_csv_round_trips_with_and_without_time() {
        let mut traj = Trajectory::<f64>::new(2);
        traj.push_timed(0.0, &[1.0, -0.5]);
        traj.push_timed(0.25, &[0.875, -0.25]);
        traj.push_timed(0.5, &[1.0 / 3.0, 0.1]);
        let csv = trajectory_to_csv(&traj, true, None);
        assert!(csv.starts_with("t,x0,x1\n"));
        let back: Trajectory<f64> = trajectory_from_csv(&csv, true).unwrap();
        assert_eq!(back.len(), 3);
        for i in 0..3 {
            assert_eq!(back.row(i), traj.row(i));
            assert_eq!(back.times().unwrap()[i], traj.times().unwrap()[i]);
        }
        let csv2 = trajectory_to_csv(&traj, false, Some("test-stamp"));
        assert!(csv2.starts_with("# generated test-stamp\n"));
        let back2: Trajectory<f64> = trajectory_from_csv(&csv2, false).unwrap();
        assert_eq!(back2.row(2), traj.row(2));
    }
}
