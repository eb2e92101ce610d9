//! Binary persistence of neural fields.
//!
//! A `model.bin` holds one or more named fields. All integers and floats are
//! little-endian.
//!
//! ```text
//! offset  size      content
//! 0       8         magic b"SDEFITNF"
//! 8       4         format version (u32, currently 1)
//! 12      4         field count F (u32)
//! then F records:
//!         2         name length L (u16)
//!         L         name, UTF-8
//!         1         output transform: 0 identity, 1 squared
//!         4         layer count K (u32, widths has K entries)
//!         4*K       widths (u32 each)
//!         8         init seed (u64)
//!         8*n       input center (f64), n = widths[0]
//!         8*n       input scale (f64)
//!         8         parameter count P (u64)
//!         8*P       parameters (f64), layer by layer, W row-major then b
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::densities::PotentialSpec;
use crate::error::{Error, Result};
use crate::field::{param_count, NeuralField, OutputTransform};
use crate::residual::{ClosedDrift, Diffusion, Drift, SdeModel, TrainMask};

pub const MAGIC: &[u8; 8] = b"SDEFITNF";
pub const FORMAT_VERSION: u32 = 1;

fn transform_code(t: OutputTransform) -> u8 {
    match t {
        OutputTransform::Identity => 0,
        OutputTransform::Squared => 1,
    }
}

pub fn encode_fields(fields: &[(&str, &NeuralField)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (name, f) in fields {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(transform_code(f.transform()));
        out.extend_from_slice(&(f.widths().len() as u32).to_le_bytes());
        for w in f.widths() {
            out.extend_from_slice(&(*w as u32).to_le_bytes());
        }
        out.extend_from_slice(&f.seed().to_le_bytes());
        for v in f.input_center().iter().chain(f.input_scale()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(f.num_params() as u64).to_le_bytes());
        for v in f.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "model file truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format(format!("{what} count overflows")))?,
            what,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_fields(buf: &[u8]) -> Result<Vec<(String, NeuralField)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported model format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let count = c.u32("field count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format("field name is not UTF-8".into()))?
            .to_string();
        let transform = match c.u8("transform")? {
            0 => OutputTransform::Identity,
            1 => OutputTransform::Squared,
            t => {
                return Err(Error::Format(format!(
                    "field {name}: unknown transform code {t}"
                )))
            }
        };
        let k = c.u32("layer count")? as usize;
        if k > 4096 {
            return Err(Error::Format(format!(
                "field {name}: implausible layer count {k}"
            )));
        }
        let widths = (0..k)
            .map(|_| c.u32("widths").map(|w| w as usize))
            .collect::<Result<Vec<_>>>()?;
        let seed = c.u64("seed")?;
        let n = widths.first().copied().unwrap_or(0);
        let center = c.f64s(n, "input center")?;
        let scale = c.f64s(n, "input scale")?;
        let p = c.u64("parameter count")? as usize;
        if k >= 2 && p != param_count(&widths) {
            return Err(Error::Format(format!(
                "field {name}: {p} parameters stored, widths {widths:?} need {}",
                param_count(&widths)
            )));
        }
        let params = c.f64s(p, "parameters")?;
        let field = NeuralField::from_parts(widths, transform, center, scale, seed, params)
            .map_err(|e| Error::Format(format!("field {name}: {e}")))?;
        out.push((name, field));
    }
    if c.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last field",
            buf.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn save_fields(path: impl AsRef<Path>, fields: &[(&str, &NeuralField)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_fields(fields))?;
    Ok(())
}

pub fn load_fields(path: impl AsRef<Path>) -> Result<Vec<(String, NeuralField)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_fields(&buf)
}

/// Serializable drift; neural parts point at a field in `model.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DriftDescription {
    Closed { drift: ClosedDrift },
    Potential { potential: PotentialSpec },
    Neural { field: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DiffusionDescription {
    Constant { sigma: Vec<f64> },
    Polynomial { coeffs: Vec<f64> },
    Neural { field: String },
}

/// An [`SdeModel`] as JSON plus named fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescription {
    pub dim: usize,
    pub drift: DriftDescription,
    pub diffusion: DiffusionDescription,
}

pub const DRIFT_FIELD: &str = "drift";
pub const SIGMA_FIELD: &str = "sigma";
pub const DENSITY_FIELD: &str = "density";

impl ModelDescription {
    pub fn describe(model: &SdeModel) -> Self {
        let drift = match &model.drift {
            Drift::Closed(c) => DriftDescription::Closed { drift: c.clone() },
            Drift::Potential(p) => DriftDescription::Potential {
                potential: p.clone(),
            },
            Drift::Neural(_) => DriftDescription::Neural {
                field: DRIFT_FIELD.to_string(),
            },
        };
        let diffusion = match &model.diffusion {
            Diffusion::Constant(s) => DiffusionDescription::Constant { sigma: s.clone() },
            Diffusion::Polynomial1d(c) => DiffusionDescription::Polynomial { coeffs: c.clone() },
            Diffusion::Neural(_) => DiffusionDescription::Neural {
                field: SIGMA_FIELD.to_string(),
            },
        };
        ModelDescription {
            dim: model.dim,
            drift,
            diffusion,
        }
    }

    /// Fields of `model` that [`ModelDescription::describe`] refers to.
    pub fn fields(model: &SdeModel) -> Vec<(&'static str, &NeuralField)> {
        let mut v = Vec::new();
        if let Drift::Neural(f) = &model.drift {
            v.push((DRIFT_FIELD, f));
        }
        if let Diffusion::Neural(f) = &model.diffusion {
            v.push((SIGMA_FIELD, f));
        }
        v
    }

    pub fn build(&self, fields: &[(String, NeuralField)]) -> Result<SdeModel> {
        let find = |name: &str| {
            fields
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, f)| f.clone())
                .ok_or_else(|| {
                    Error::Format(format!(
                        "model refers to field {name:?}, which is not present"
                    ))
                })
        };
        let drift = match &self.drift {
            DriftDescription::Closed { drift } => Drift::Closed(drift.clone()),
            DriftDescription::Potential { potential } => Drift::Potential(potential.clone()),
            DriftDescription::Neural { field } => Drift::Neural(find(field)?),
        };
        let diffusion = match &self.diffusion {
            DiffusionDescription::Constant { sigma } => Diffusion::Constant(sigma.clone()),
            DiffusionDescription::Polynomial { coeffs } => Diffusion::Polynomial1d(coeffs.clone()),
            DiffusionDescription::Neural { field } => Diffusion::Neural(find(field)?),
        };
        let mut m = SdeModel::new(self.dim, drift, diffusion)?;
        m.trainable = TrainMask::default();
        Ok(m)
    }
}

/// `manifest.json` next to a `model.bin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub model: ModelDescription,
    /// Name of the density field in `model.bin`, if any.
    pub density_field: Option<String>,
    /// Free-form provenance: experiment, seed, config echo.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Writes `model.bin` and `manifest.json` into `dir`.
pub fn save_model(
    dir: impl AsRef<Path>,
    model: &SdeModel,
    density: Option<&NeuralField>,
    provenance: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut fields = ModelDescription::fields(model);
    if let Some(d) = density {
        fields.push((DENSITY_FIELD, d));
    }
    save_fields(dir.join("model.bin"), &fields)?;
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        model: ModelDescription::describe(model),
        density_field: density.map(|_| DENSITY_FIELD.to_string()),
        provenance,
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Model, optional density field and manifest from a directory written by [`save_model`].
pub fn load_model(dir: impl AsRef<Path>) -> Result<(SdeModel, Option<NeuralField>, ModelManifest)> {
    let dir = dir.as_ref();
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    let fields = load_fields(dir.join("model.bin"))?;
    let model = manifest.model.build(&fields)?;
    let density = match &manifest.density_field {
        Some(name) => Some(
            fields
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, f)| f.clone())
                .ok_or_else(|| {
                    Error::Format(format!("density field {name:?} missing from model.bin"))
                })?,
        ),
        None => None,
    };
    Ok((model, density, manifest))
}
